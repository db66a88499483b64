//! Acceptance runner: one PASS/FAIL line per criterion.
//!
//! The heavy criteria (7 to 10) pretrain and jointly train at the default
//! experiment budgets on the 200-scene synthetic dataset. Environment:
//!
//! - `ACCEPTANCE_SET`: comma-separated config overrides, e.g.
//!   `train.steps=300,pretrain.teacher_steps=800`.
//! - `ACCEPTANCE_DIR`: cache directory for the dataset and the pretrained
//!   checkpoint (default: the cargo target tmpdir). Cached items are reused
//!   only when their config matches.
//! - `ACCEPTANCE_ONLY`: comma-separated criterion numbers to run.
//! - `ACCEPTANCE_STRICT=1`: exit non-zero when any criterion fails.

mod common;

use std::path::{Path, PathBuf};
use std::time::Instant;

use aligncvc::alignment::distill::distill_gradient_at;
use aligncvc::alignment::{gan_loss_discriminator, gan_loss_generator, joint_train_step, DistillConfig, GanVariant, Optimizers};
use aligncvc::camera::{make_pose_set, CameraPose};
use aligncvc::checkpoint::Checkpoint;
use aligncvc::config::ExperimentConfig;
use aligncvc::data::build_dataset;
use aligncvc::harness::{prepare_dataset, pretrain, run_ablation, run_training, AblationTable, Experiment, Logger, Variant};
use aligncvc::metrics::{cvc_proxy, EvalReport, SamplingMode};
use aligncvc::pipeline::Models;
use aligncvc::render::{render, render_multiview, Rig};
use aligncvc::schedule::{q_sample, renoise, NoiseDraw, NoiseSchedule};
use aligncvc::seed;
use anyhow::{ensure, Context, Result};
use common::*;
use gradtape::{Graph, Tensor};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Result<Outcome> {
    Ok(Outcome { pass, detail: detail.into() })
}

/// Criterion 1: distillation null cases.
fn null_cases() -> Result<Outcome> {
    let s = NoiseSchedule::default();
    let cond = one_pixel_cond();
    let mut worst = 0.0f64;
    for k in 0..20u64 {
        let x = NoiseDraw::<f64>::new(&[1, 1, 1, 3], k).eps;
        let t = 20 + 40 * k as usize;
        let same = distill_gradient_at(&x, &cond, &LinearTeacher::default(), &s, 1.0, t, t, k)?;
        let zero = distill_gradient_at(&x, &cond, &LinearTeacher::default(), &s, 0.0, t, t + 100, k)?;
        for v in same.grad.data().iter().chain(zero.grad.data()) {
            worst = worst.max(v.abs());
        }
    }
    outcome(worst <= 1e-6, format!("max |grad| over dt=0 and omega=0 cases: {worst:e}"))
}

/// Criterion 2: linear-teacher closed form.
fn closed_form() -> Result<Outcome> {
    let s = NoiseSchedule::default();
    let cond = one_pixel_cond();
    let mut worst = 0.0f64;
    let cfg = DistillConfig::default();
    for k in 0..50u64 {
        let x = NoiseDraw::<f64>::new(&[1, 1, 1, 3], 1000 + k).eps.map(|v| v.tanh());
        let omega = 0.25 + 0.05 * k as f64;
        let shift = [cfg.delta_t_min, cfg.delta_t_max, -100, 75][k as usize % 4];
        let t = 20 + (k as usize * 97) % 960;
        let u = (t as i64 + shift).clamp(1, 1000) as usize;
        let out = distill_gradient_at(&x, &cond, &LinearTeacher::default(), &s, omega, t, u, 7 + k)?;
        for i in 0..3 {
            let want = linear_teacher_gradient(x.data()[i], out.noise.eps.data()[i], t, u, omega);
            let rel = (out.grad.data()[i] - want).abs() / want.abs().max(1e-12);
            worst = worst.max(rel);
        }
    }
    outcome(worst <= 1e-6, format!("max relative error vs closed form: {worst:e}"))
}

/// Criterion 3: GAN plug-in values.
#[allow(clippy::approx_constant)]
fn gan_plug_in() -> Result<Outcome> {
    let g = Graph::<f64>::new();
    let zeros = || g.constant(Tensor::zeros(vec![4, 1]));
    let d = g.item(gan_loss_discriminator(&g, zeros(), zeros()));
    let gen = g.item(gan_loss_generator(&g, zeros(), GanVariant::NonSaturating));
    let ok = (d - (-1.38629)).abs() <= 1e-5 && (gen - 0.69315).abs() <= 1e-5;
    outcome(ok, format!("discriminator objective {d:.6} (want -1.38629), generator {gen:.6} (want 0.69315)"))
}

/// Criterion 4: renderer gradients and brute-force march.
fn renderer() -> Result<Outcome> {
    let poses = make_pose_set(&[0.0, 90.0], 15.0, 2.2)?;
    let rig = Rig::<f64>::new(&poses, 4, 1.0, &small_render_config(8, 16))?;
    let (fd_worst, checked) = render_fd_worst(&rig, &random_rows(4, 1), 2);

    let scene = single_cell_scene(5, 40.0);
    let mut cfg = small_render_config(9, 1024);
    cfg.fov_deg = 12.0;
    let mut march_worst = 0.0f64;
    for pose in [CameraPose::new(0.0, 0.0, 2.2), CameraPose::new(33.0, 21.0, 2.2)] {
        let img = render(&scene, pose, &cfg)?;
        for row in 0..9 {
            for col in 0..9 {
                let want = oracle_pixel(&scene, pose, &cfg, row, col, 20_000);
                for (c, w) in want.iter().enumerate() {
                    march_worst = march_worst.max((img.data()[(row * 9 + col) * 3 + c] as f64 - w).abs());
                }
            }
        }
    }
    outcome(
        fd_worst < 1e-3 && checked > 0 && march_worst <= 1e-3,
        format!("4^3 grid, 8x8 views: FD max rel {fd_worst:.2e} over {checked} entries; march max abs {march_worst:.2e}"),
    )
}

/// Criterion 5: forward-process moments within three standard errors.
fn schedule_moments() -> Result<Outcome> {
    let s = NoiseSchedule::default();
    let draws = 10_000;
    let x0 = Tensor::<f32>::new(vec![2], vec![0.8, -0.35]);
    let img = Tensor::<f32>::new(vec![2], vec![0.9, 0.325]);
    let mut worst = 0.0f64;
    for t in [1, 250, 500, 750, 1000] {
        let (a, sd) = s.coefficients(t);
        for route in 0..2 {
            let mut cols = vec![Vec::with_capacity(draws); 2];
            for i in 0..draws {
                let seed_i = 1_000_000 * t as u64 + i as u64;
                let x = if route == 0 { q_sample(&x0, t, &NoiseDraw::new(&[2], seed_i), &s)? } else { renoise(&img, t, seed_i, &s)? };
                for (p, &v) in x.data().iter().enumerate() {
                    cols[p].push(v as f64);
                }
            }
            for (p, col) in cols.iter().enumerate() {
                let (mean, var) = moments(col);
                let n = draws as f64;
                let want_mean = a * x0.data()[p] as f64;
                let want_var = sd * sd;
                let z_mean = (mean - want_mean).abs() / (want_var / n).sqrt();
                let z_var = (var - want_var).abs() / (want_var * (2.0 / (n - 1.0)).sqrt());
                worst = worst.max(z_mean).max(z_var);
            }
        }
    }
    outcome(worst < 3.0, format!("q_sample and renoise at 5 timesteps, 1e4 draws: max deviation {worst:.2} standard errors"))
}

struct Heavy {
    exp: Experiment,
    pretrained: Checkpoint,
    joint: Models,
    joint_finite: (usize, usize),
    reports: Option<(EvalReport, EvalReport)>,
    ablation: Option<AblationTable>,
    dir: PathBuf,
}

fn cache_dir() -> PathBuf {
    std::env::var_os("ACCEPTANCE_DIR").map(PathBuf::from).unwrap_or_else(|| Path::new(env!("CARGO_TARGET_TMPDIR")).join("acceptance"))
}

fn acceptance_config() -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::default();
    cfg.apply_env()?;
    if let Ok(list) = std::env::var("ACCEPTANCE_SET") {
        for kv in list.split(',').filter(|s| !s.trim().is_empty()) {
            cfg.set(kv.trim())?;
        }
    }
    cfg.train.log_every = 100;
    Ok(cfg)
}

fn stage(what: &str, start: Instant) {
    eprintln!("acceptance: {what} done at {:.0}s", start.elapsed().as_secs_f64());
}

fn heavy_setup(start: Instant) -> Result<Heavy> {
    let cfg = acceptance_config()?;
    let dir = cache_dir();
    std::fs::create_dir_all(&dir)?;
    let mut log = Logger::file(&dir.join("acceptance.log"))?;
    let dataset = prepare_dataset(&cfg, &dir.join("data"))?;
    let exp = Experiment::new(cfg.clone(), &dataset)?;
    stage("dataset", start);
    let ck_path = dir.join("pretrained.bin");
    let cached = Checkpoint::load(&ck_path).ok().filter(|ck| ck.config.pretrain == cfg.pretrain && ck.config.model == cfg.model && ck.config.data == cfg.data && ck.config.seed == cfg.seed && ck.config.schedule == cfg.schedule && ck.config.scene_count == cfg.scene_count);
    let pretrained = match cached {
        Some(ck) => ck,
        None => {
            let (ck, summary) = pretrain(&exp, &mut log)?;
            eprintln!("acceptance: pretraining {summary:?}");
            ck.save(&ck_path)?;
            ck
        }
    };
    stage("pretraining", start);
    let outcome = run_training(&exp, &pretrained, None, &mut log)?;
    let finite = outcome.losses.iter().filter(|l| l.is_finite()).count();
    outcome.checkpoint.save(&dir.join("joint.bin"))?;
    stage("joint training", start);
    Ok(Heavy { exp, pretrained, joint: outcome.models, joint_finite: (finite, outcome.losses.len()), reports: None, ablation: None, dir })
}

/// Criterion 6: loop structure, feedback totality and determinism on the
/// jointly trained models.
fn loop_structure(h: &Heavy) -> Result<Outcome> {
    let sample = &h.exp.eval[0];
    let batch = aligncvc::alignment::TrainBatch::from_samples(std::slice::from_ref(sample))?;
    let cond = batch.conditioning();
    let sampler = h.exp.sampler(&h.joint);
    let plan = &h.exp.plan;
    ensure!(plan.len() == 4, "acceptance expects the default 4-step plan");
    let a = sampler.aligncvc(&cond, plan, 11)?;
    let tr = &a.trace;
    let counts = (tr.denoise_calls, tr.reconstruct_calls, tr.render_calls);
    let wreck = |k: usize, x: &mut Tensor<f32>| {
        let mut rng = seed::rng(k as u64);
        x.data_mut().iter_mut().for_each(|v| *v = rand::Rng::random_range(&mut rng, -1e3..1e3));
    };
    let perturbed = sampler.aligncvc_from(&cond, plan, 11, Some(&wreck))?;
    let total = perturbed.trace.same_content(tr) && perturbed.scenes == a.scenes;
    let b = sampler.aligncvc(&cond, plan, 11)?;
    let det = b.trace.same_content(tr) && b.scenes == a.scenes;
    outcome(
        counts == (4, 4, 4) && tr.records.len() == 4 && total && det,
        format!("K=4 calls (denoise, reconstruct, render) = {counts:?}; feedback totality {total}; bit-deterministic {det}"),
    )
}

/// Criterion 7: intermediate renders are consistent; GT beats permuted GT.
fn explicit_cvc(h: &Heavy) -> Result<Outcome> {
    let cfg = &h.exp.config;
    let poses = h.exp.geometry.poses().clone();
    let intr = h.exp.geometry.rig.config().intrinsics();
    let sampler = h.exp.sampler(&h.joint);
    let mut min_render = f64::INFINITY;
    let mut flagged = 0;
    for (i, sample) in h.exp.eval.iter().enumerate() {
        let batch = aligncvc::alignment::TrainBatch::from_samples(std::slice::from_ref(sample))?;
        let out = sampler.aligncvc(&batch.conditioning(), &h.exp.plan, seed::derive(cfg.seed, "acceptance.cvc", i as u64))?;
        for rec in &out.trace.records {
            let x = rec.x_tilde.as_ref().context("aligncvc record without a render")?;
            let score = cvc_proxy(&x.rgb, &x.depth, &x.opacity, &poses, &intr, &cfg.eval.cvc)?;
            if score.no_valid_pixels {
                flagged += 1;
            } else {
                min_render = min_render.min(score.score);
            }
        }
    }
    let swapped = poses.permuted(&[1, 0, 2, 3])?;
    let render_cfg = cfg.data.render_config();
    let mut min_margin = f64::INFINITY;
    for sample in &h.exp.eval {
        let (_, out) = render_multiview(&sample.scene, &poses, &render_cfg)?;
        let own = cvc_proxy(&out.rgb, &out.depth, &out.opacity, &poses, &intr, &cfg.eval.cvc)?;
        let perm = cvc_proxy(&out.rgb, &out.depth, &out.opacity, &swapped, &intr, &cfg.eval.cvc)?;
        min_margin = min_margin.min(own.score - perm.score);
    }
    outcome(
        min_render >= 0.95 && flagged == 0 && min_margin > 0.0,
        format!(
            "min intermediate render score {min_render:.4} over {} scenes x 4 steps ({flagged} flagged); min GT - permuted margin {min_margin:.4} over {} scenes",
            h.exp.eval.len(),
            h.exp.eval.len()
        ),
    )
}

/// Criterion 8: aligncvc vs two-stage after joint training.
fn directional_main(h: &mut Heavy, start: Instant) -> Result<Outcome> {
    let two = h.exp.evaluate(&h.joint, SamplingMode::TwoStage);
    let ours = h.exp.evaluate(&h.joint, SamplingMode::Aligncvc);
    two.write(&h.dir, "eval_two_stage")?;
    ours.write(&h.dir, "eval_aligncvc")?;
    stage("evaluation", start);
    let gap = ours.psnr - two.psnr;
    let pass = gap >= 1.0 && ours.cvc > two.cvc && two.failures.is_empty() && ours.failures.is_empty();
    let detail = format!(
        "{} held-out scenes: aligncvc PSNR {:.3} / CVC {:.4} vs two-stage {:.3} / {:.4} (gap {gap:+.3} dB, need >= +1.0 and higher CVC); {:.0}s so far",
        ours.count,
        ours.psnr,
        ours.cvc,
        two.psnr,
        two.cvc,
        start.elapsed().as_secs_f64()
    );
    h.reports = Some((two, ours));
    outcome(pass, detail)
}

/// Criterion 9: ablation ordering.
fn directional_ablation(h: &mut Heavy, start: Instant) -> Result<Outcome> {
    let mut log = Logger::file(&h.dir.join("acceptance.log"))?;
    let variants = [Variant::NoMvgAlign, Variant::NoReconAlign, Variant::NoDistributionAlign, Variant::HardAlignedMvg];
    let table = run_ablation(&h.exp, &h.pretrained, &variants, &mut log)?;
    stage("ablation", start);
    let joint = match &h.reports {
        Some((_, ours)) => ours.psnr,
        None => h.exp.evaluate(&h.joint, SamplingMode::Aligncvc).psnr,
    };
    let psnr = |v| table.row(v).map(|r| r.psnr).unwrap_or(f64::NAN);
    let (no_mvg, no_recon, none, hard) =
        (psnr(Variant::NoMvgAlign), psnr(Variant::NoReconAlign), psnr(Variant::NoDistributionAlign), psnr(Variant::HardAlignedMvg));
    let single_ok = [no_mvg, no_recon].iter().all(|&p| joint - p >= 0.3 && p - none >= 0.3);
    let pass = single_ok && hard <= joint;
    std::fs::write(h.dir.join("ablation.md"), table.to_markdown())?;
    h.ablation = Some(table);
    outcome(
        pass,
        format!(
            "PSNR joint {joint:.3}, w/o MVG align {no_mvg:.3}, w/o recon align {no_recon:.3}, w/o distribution align {none:.3}, hard-aligned MVG {hard:.3} (need gaps >= 0.3 dB and hard <= joint)"
        ),
    )
}

/// Criterion 10: single-batch overfit and finite losses over 1000 steps.
fn overfit(h: &Heavy) -> Result<Outcome> {
    let cfg = &h.exp.config;
    let mut models = h.exp.init_models();
    h.pretrained.apply(&mut models)?;
    let mut opts = Optimizers::new(&models, &cfg.optim);
    let batch = h.exp.batch("acceptance.overfit", 0, cfg.train.batch)?;
    let mut recon = Vec::with_capacity(500);
    for step in 0..500 {
        let s = seed::derive(cfg.seed, "acceptance.overfit.step", step as u64);
        let l = joint_train_step(&batch, &mut models, &mut opts, &cfg.align, h.exp.step_env(), step, s)?;
        recon.push(l.l_recon);
    }
    let at10 = recon[9];
    let tail = recon[480..].iter().sum::<f64>() / 20.0;
    let drop = 1.0 - tail / at10;
    let (finite, total) = h.joint_finite;
    outcome(
        drop >= 0.8 && finite == total && total >= 1000,
        format!("l_recon step 10 {at10:.5} -> mean of steps 481-500 {tail:.5} ({:.1}% drop, need 80%); finite losses {finite}/{total} joint steps", drop * 100.0),
    )
}

/// Criterion 11: resume equivalence and dataset reproducibility.
fn determinism(h: &Heavy) -> Result<Outcome> {
    let mut cfg = h.exp.config.clone();
    cfg.train.steps = 100;
    cfg.train.ckpt_every = 50;
    let exp = Experiment { config: cfg.clone(), ..clone_experiment(&h.exp) };
    let run = tempfile::tempdir()?;
    let mut log = Logger::silent();
    let full = run_training(&exp, &h.pretrained, Some(run.path()), &mut log)?;
    let mid = Checkpoint::load(&full.written[0])?;
    let resumed = run_training(&exp, &mid, None, &mut log)?;
    let bytes = |ck: &Checkpoint| -> Result<Vec<u8>> {
        let mut v = Vec::new();
        ck.write_to(&mut v)?;
        Ok(v)
    };
    let resume_ok = mid.step == 50 && bytes(&resumed.checkpoint)? == bytes(&full.checkpoint)?;

    let (a, b) = (tempfile::tempdir()?, tempfile::tempdir()?);
    build_dataset(12, cfg.seed, a.path(), &cfg.data)?;
    build_dataset(12, cfg.seed, b.path(), &cfg.data)?;
    let data_ok = tree_bytes(a.path())? == tree_bytes(b.path())?;
    outcome(resume_ok && data_ok, format!("50+50 resumed vs 100 uninterrupted bit-exact: {resume_ok}; 12-scene dataset byte-identical across builds: {data_ok}"))
}

fn clone_experiment(e: &Experiment) -> Experiment {
    Experiment {
        config: e.config.clone(),
        schedule: e.schedule.clone(),
        plan: e.plan.clone(),
        geometry: e.geometry.clone(),
        train: e.train.clone(),
        eval: e.eval.clone(),
    }
}

fn tree_bytes(dir: &Path) -> Result<Vec<(PathBuf, Vec<u8>)>> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d)? {
            let p = e?.path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(dir)?.to_path_buf(), std::fs::read(&p)?));
            }
        }
    }
    out.sort();
    Ok(out)
}

fn report(n: usize, name: &str, r: Result<Outcome>, passed: &mut usize) {
    match r {
        Ok(o) => {
            *passed += o.pass as usize;
            println!("{} criterion {n:>2} {name}: {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
        }
        Err(e) => println!("FAIL criterion {n:>2} {name}: error: {e:#}"),
    }
}

fn main() {
    // `cargo test` passes harness flags such as `--nocapture`; they are ignored.
    let only: Option<Vec<usize>> =
        std::env::var("ACCEPTANCE_ONLY").ok().map(|s| s.split(',').filter_map(|x| x.trim().parse().ok()).collect());
    let wanted = |n: usize| only.as_ref().is_none_or(|o| o.contains(&n));
    let start = Instant::now();
    let mut passed = 0;
    let mut ran = 0;
    let light: [(usize, &str, fn() -> Result<Outcome>); 5] = [
        (1, "distillation null cases", null_cases),
        (2, "distillation closed form", closed_form),
        (3, "GAN plug-in values", gan_plug_in),
        (4, "renderer gradients and march oracle", renderer),
        (5, "schedule statistics", schedule_moments),
    ];
    for (n, name, f) in light {
        if wanted(n) {
            ran += 1;
            report(n, name, f(), &mut passed);
        }
    }
    if (6..=11).any(wanted) {
        match heavy_setup(start) {
            Ok(mut h) => {
                let h = &mut h;
                if wanted(6) {
                    ran += 1;
                    report(6, "loop structure", loop_structure(h), &mut passed);
                }
                if wanted(7) {
                    ran += 1;
                    report(7, "explicit CVC", explicit_cvc(h), &mut passed);
                }
                if wanted(8) {
                    ran += 1;
                    report(8, "aligncvc vs two-stage", directional_main(h, start), &mut passed);
                }
                if wanted(9) {
                    ran += 1;
                    report(9, "ablation ordering", directional_ablation(h, start), &mut passed);
                }
                if wanted(10) {
                    ran += 1;
                    report(10, "overfit and finiteness", overfit(h), &mut passed);
                }
                if wanted(11) {
                    ran += 1;
                    report(11, "determinism and resume", determinism(h), &mut passed);
                }
            }
            Err(e) => {
                for n in (6..=11).filter(|&n| wanted(n)) {
                    ran += 1;
                    println!("FAIL criterion {n:>2}: setup error: {e:#}");
                }
            }
        }
    }
    println!("acceptance: {passed}/{ran} criteria passed in {:.0}s", start.elapsed().as_secs_f64());
    if passed < ran && std::env::var("ACCEPTANCE_STRICT").is_ok_and(|v| v == "1") {
        std::process::exit(1);
    }
}
