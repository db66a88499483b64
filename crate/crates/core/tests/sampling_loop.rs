use aligncvc::data::{make_sample, DatasetConfig, SceneGridConfig};
use aligncvc::denoiser::{Conditioning, DenoiserConfig};
use aligncvc::alignment::DiscriminatorConfig;
use aligncvc::alignment::TrainBatch;
use aligncvc::metrics::{cvc_proxy, CvcConfig};
use aligncvc::pipeline::{ModelConfig, Models};
use aligncvc::recon::{ReconConfig, ViewGeometry};
use aligncvc::sampling::*;
use aligncvc::schedule::{make_inference_plan, NoiseSchedule};
use aligncvc::seed;
use gradtape::Tensor;
use rand::Rng;

struct Setup {
    models: Models,
    schedule: NoiseSchedule,
    geometry: ViewGeometry<f32>,
    cond: Conditioning<f32>,
}

fn setup() -> Setup {
    let data = DatasetConfig {
        resolution: 16,
        scene: SceneGridConfig { grid: 8, ..SceneGridConfig::default() },
        ..DatasetConfig::default()
    };
    let cfg = ModelConfig {
        denoiser: DenoiserConfig { width: 4, lora_rank: 2, time_dim: 8, ..DenoiserConfig::default() },
        recon: ReconConfig { grid: 8, features: 4, hidden: 8, pe_freqs: 1, ..ReconConfig::default() },
        disc: DiscriminatorConfig { width: 4, views: 4 },
    };
    let schedule = NoiseSchedule::default();
    let mut models = Models::build(&cfg, &schedule, 9);
    // Untrained output layers are zero; give every weight some signal.
    let mut rng = seed::rng(10);
    for (_, t) in models.mvg.base.iter_mut().chain(models.mvg.adapter.iter_mut()) {
        t.data_mut().iter_mut().for_each(|v| *v += rng.random_range(-0.05..0.05));
    }
    for (_, t) in models.recon_params.iter_mut() {
        t.data_mut().iter_mut().for_each(|v| *v += rng.random_range(-0.2..0.2));
    }
    let samples: Vec<_> = (0..2).map(|i| make_sample(i, 3, &data).unwrap()).collect();
    let batch = TrainBatch::from_samples(&samples).unwrap();
    Setup {
        geometry: models.geometry(&data.poses().unwrap(), &data.render_config()).unwrap(),
        cond: batch.conditioning(),
        models,
        schedule,
    }
}

impl Setup {
    fn sampler(&self) -> Sampler<'_> {
        Sampler::new(&self.models, &self.geometry, &self.schedule, SamplingConfig::default())
    }
}

#[test]
fn four_step_loop_runs_four_of_each_phase() {
    let s = setup();
    let plan = make_inference_plan(4, &s.schedule).unwrap();
    let out = s.sampler().aligncvc(&s.cond, &plan, 1).unwrap();
    let tr = &out.trace;
    assert_eq!((tr.denoise_calls, tr.reconstruct_calls, tr.render_calls), (4, 4, 4));
    assert_eq!(tr.records.len(), 4);
    let ts: Vec<usize> = tr.records.iter().map(|r| r.t_k).collect();
    assert_eq!(ts, vec![999, 749, 499, 249]);
    assert!(ts.windows(2).all(|w| w[1] < w[0]));
    assert_eq!(tr.records.iter().map(|r| r.k).collect::<Vec<_>>(), vec![4, 3, 2, 1]);
    for r in &tr.records {
        assert!(r.x_hat.is_finite());
        let x = r.x_tilde.as_ref().expect("every step renders");
        assert!(x.rgb.is_finite() && x.depth.is_finite() && x.opacity.is_finite());
        assert_eq!(r.scene_stats.len(), 2);
    }
    assert_eq!(out.scenes.len(), 2);
    assert_eq!(tr.to_jsonl().unwrap().lines().count(), 4);
}

#[test]
fn two_stage_denoises_k_times_and_reconstructs_once() {
    let s = setup();
    let plan = make_inference_plan(4, &s.schedule).unwrap();
    let out = s.sampler().two_stage(&s.cond, &plan, 1).unwrap();
    let tr = &out.trace;
    assert_eq!((tr.denoise_calls, tr.reconstruct_calls, tr.render_calls), (4, 1, 1));
    assert_eq!(tr.records.len(), 4);
    assert!(tr.records[..3].iter().all(|r| r.x_tilde.is_none()));
    assert!(tr.records[3].x_tilde.is_some());
}

#[test]
fn feedback_fully_replaces_the_generator_state() {
    let s = setup();
    let plan = make_inference_plan(4, &s.schedule).unwrap();
    let sampler = s.sampler();
    let plain = sampler.aligncvc(&s.cond, &plan, 7).unwrap();
    let wreck = |k: usize, x: &mut Tensor<f32>| {
        let mut rng = seed::rng(k as u64);
        x.data_mut().iter_mut().for_each(|v| *v = rng.random_range(-1e3..1e3));
    };
    let perturbed = sampler.aligncvc_from(&s.cond, &plan, 7, Some(&wreck)).unwrap();
    assert!(plain.trace.same_content(&perturbed.trace));
    assert_eq!(plain.scenes, perturbed.scenes);

    // With partial feedback the same perturbation must show up.
    let half = Sampler { cfg: SamplingConfig { feedback_mix: 0.5, ..SamplingConfig::default() }, ..sampler };
    let a = half.aligncvc(&s.cond, &plan, 7).unwrap();
    let b = half.aligncvc_from(&s.cond, &plan, 7, Some(&wreck)).unwrap();
    assert!(!a.trace.same_content(&b.trace));
    let bad = Sampler { cfg: SamplingConfig { feedback_mix: 1.5, ..SamplingConfig::default() }, ..sampler };
    assert!(bad.aligncvc(&s.cond, &plan, 7).is_err());
}

#[test]
fn runs_are_bit_deterministic_and_seed_dependent() {
    let s = setup();
    let plan = make_inference_plan(4, &s.schedule).unwrap();
    let sampler = s.sampler();
    let a = sampler.aligncvc(&s.cond, &plan, 5).unwrap();
    let b = sampler.aligncvc(&s.cond, &plan, 5).unwrap();
    let c = sampler.aligncvc(&s.cond, &plan, 6).unwrap();
    assert!(a.trace.same_content(&b.trace));
    assert_eq!(a.scenes, b.scenes);
    assert_ne!(a.scenes, c.scenes);
    let d = sampler.two_stage(&s.cond, &plan, 5).unwrap();
    let e = sampler.two_stage(&s.cond, &plan, 5).unwrap();
    assert!(d.trace.same_content(&e.trace));
    assert_eq!(d.scenes, e.scenes);
}

#[test]
fn single_step_loop_equals_single_step_two_stage() {
    let s = setup();
    let plan = make_inference_plan(1, &s.schedule).unwrap();
    let sampler = s.sampler();
    let a = sampler.aligncvc(&s.cond, &plan, 3).unwrap();
    let b = sampler.two_stage(&s.cond, &plan, 3).unwrap();
    assert_eq!(a.scenes, b.scenes);
    assert_eq!(a.views.data(), b.views.data());
    assert!(a.trace.same_content(&b.trace));
}

#[test]
fn sampling_ablations_reduce_to_their_definitions() {
    let s = setup();
    let plan = make_inference_plan(4, &s.schedule).unwrap();
    let trained = s.sampler();
    let pretrained_recon = s.models.recon_params.clone();

    let nf = ablation_sample(AblationVariant::NoFeedback, &trained, &pretrained_recon, &s.cond, &plan, 2).unwrap();
    let ts = trained.two_stage(&s.cond, &plan, 2).unwrap();
    assert!(nf.trace.same_content(&ts.trace));

    let mut teacher_equal = s.models.clone();
    teacher_equal.mvg.zero_adapter();
    let zeroed = Sampler::new(&teacher_equal, &s.geometry, &s.schedule, SamplingConfig::default());
    let fm = ablation_sample(AblationVariant::FixedMvg, &trained, &pretrained_recon, &s.cond, &plan, 2).unwrap();
    assert!(fm.trace.same_content(&zeroed.aligncvc(&s.cond, &plan, 2).unwrap().trace));

    let mut other = s.models.recon_params.clone();
    other.iter_mut().for_each(|(_, t)| t.data_mut().iter_mut().for_each(|v| *v *= 0.5));
    let fr = ablation_sample(AblationVariant::FixedRecon, &trained, &other, &s.cond, &plan, 2).unwrap();
    let manual = Sampler { recon_params: &other, ..trained }.aligncvc(&s.cond, &plan, 2).unwrap();
    assert!(fr.trace.same_content(&manual.trace));
    let p3 = ablation_sample(AblationVariant::Pretrained3dAware, &trained, &other, &s.cond, &plan, 2).unwrap();
    let manual = Sampler { recon_params: &other, use_adapter: false, ..trained }.aligncvc(&s.cond, &plan, 2).unwrap();
    assert!(p3.trace.same_content(&manual.trace));

    assert!("fixed_mvg".parse::<AblationVariant>().is_ok());
    assert!("frozen_everything".parse::<AblationVariant>().is_err());
}

#[test]
fn intermediate_renders_are_consistent_explicit_scenes() {
    let s = setup();
    let plan = make_inference_plan(4, &s.schedule).unwrap();
    let out = s.sampler().aligncvc(&s.cond, &plan, 4).unwrap();
    let intr = s.geometry.rig.config().intrinsics();
    let r = intr.resolution;
    for rec in &out.trace.records {
        let x = rec.x_tilde.as_ref().unwrap();
        for b in 0..2 {
            let views = x.rgb.slice_rows(b * 4, 4);
            let depth = x.depth.slice_rows(b * 4, 4);
            let opacity = x.opacity.slice_rows(b * 4, 4);
            let score = cvc_proxy(&views, &depth, &opacity, s.geometry.poses(), &intr, &CvcConfig::default()).unwrap();
            assert!(score.no_valid_pixels || score.score >= 0.95, "step {} scene {b}: {}", rec.k, score.score);
            assert_eq!(views.shape(), &[4, r, r, 3]);
        }
    }
}

#[test]
fn mismatched_poses_are_rejected() {
    let s = setup();
    let plan = make_inference_plan(2, &s.schedule).unwrap();
    let cond = Conditioning { x_c: s.cond.x_c.clone(), poses: s.cond.poses.permuted(&[1, 0, 2, 3]).unwrap() };
    assert!(s.sampler().aligncvc(&cond, &plan, 0).is_err());
    assert!(s.sampler().two_stage(&cond, &plan, 0).is_err());
}
