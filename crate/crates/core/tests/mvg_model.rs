use aligncvc::camera::{make_pose_set, CameraPoseSet};
use aligncvc::denoiser::{Conditioning, Denoiser, DenoiserConfig, DenoiserParams, Output};
use aligncvc::nn::Ctx;
use aligncvc::schedule::{predict_x0, NoiseDraw, NoiseSchedule};
use aligncvc::seed;
use gradtape::{Graph, ParamStore, Tensor};
use rand::Rng;
use rand_distr::{Distribution, Normal};

fn tiny(output: Output) -> DenoiserConfig {
    DenoiserConfig { width: 4, lora_rank: 2, time_dim: 8, output }
}

/// Replaces every tensor of `store` with Gaussian values so no layer is
/// trivially zero.
fn randomize(store: &mut ParamStore<f32>, std: f64, seed: u64) {
    let mut rng = seed::rng(seed);
    let d = Normal::new(0.0, std).unwrap();
    for (_, t) in store.iter_mut() {
        t.data_mut().iter_mut().for_each(|v| *v = d.sample(&mut rng) as f32);
    }
}

fn inputs(scenes: usize, poses: &CameraPoseSet, r: usize, seed: u64) -> (Tensor<f32>, Conditioning<f32>) {
    let x_t = NoiseDraw::<f32>::new(&[scenes * poses.len(), r, r, 3], seed).eps;
    let x_c = NoiseDraw::<f32>::new(&[scenes, r, r, 3], seed + 1).eps.map(|v| v.clamp(-1.0, 1.0));
    (x_t, Conditioning { x_c, poses: poses.clone() })
}

fn bits(t: &Tensor<f32>) -> Vec<u32> {
    t.data().iter().map(|v| v.to_bits()).collect()
}

#[test]
fn output_shape_follows_input_for_any_view_count() {
    let s = NoiseSchedule::default();
    let (net, params) = Denoiser::build(tiny(Output::Velocity), &s, 1);
    for n in [1, 2, 3, 4, 6] {
        let az: Vec<f64> = (0..n).map(|i| i as f64 * 360.0 / n as f64).collect();
        let poses = make_pose_set(&az, 0.0, 2.2).unwrap();
        let (x, cond) = inputs(2, &poses, 8, 3);
        let out = net.predict(&params, true, &x, &[10, 900], &cond).unwrap();
        assert_eq!(out.shape(), x.shape());
    }
}

#[test]
fn shape_and_timestep_errors_are_reported() {
    let s = NoiseSchedule::default();
    let (net, params) = Denoiser::build(tiny(Output::Eps), &s, 1);
    let poses = make_pose_set(&[0.0, 90.0], 0.0, 2.2).unwrap();
    let (x, cond) = inputs(1, &poses, 8, 3);
    assert!(net.predict(&params, false, &x, &[0], &cond).is_err());
    assert!(net.predict(&params, false, &x, &[1001], &cond).is_err());
    assert!(net.predict(&params, false, &x, &[5, 5], &cond).is_err());
    let bad = Conditioning { x_c: Tensor::zeros(vec![1, 4, 4, 3]), poses: poses.clone() };
    assert!(net.predict(&params, false, &x, &[5], &bad).is_err());
    let odd = Tensor::<f32>::zeros(vec![2, 6, 6, 3]);
    let c6 = Conditioning { x_c: Tensor::zeros(vec![1, 6, 6, 3]), poses };
    assert!(net.predict(&params, false, &odd, &[5], &c6).is_err());
}

#[test]
fn zero_adapter_student_is_bit_identical_to_teacher() {
    let s = NoiseSchedule::default();
    for output in [Output::Eps, Output::Velocity] {
        let (net, mut params) = Denoiser::build(tiny(output), &s, 7);
        randomize(&mut params.base, 0.3, 8);
        randomize(&mut params.adapter, 0.3, 9);
        params.zero_adapter();
        let poses = make_pose_set(&[0.0, 90.0, 180.0, 270.0], 0.0, 2.2).unwrap();
        let (x, cond) = inputs(2, &poses, 8, 10);
        let teacher = net.predict(&params, false, &x, &[300, 17], &cond).unwrap();
        let student = net.predict(&params, true, &x, &[300, 17], &cond).unwrap();
        assert_eq!(bits(&teacher), bits(&student));
    }
}

#[test]
fn nonzero_adapter_changes_the_student_only() {
    let s = NoiseSchedule::default();
    let (net, mut params) = Denoiser::build(tiny(Output::Eps), &s, 7);
    randomize(&mut params.base, 0.3, 8);
    let poses = make_pose_set(&[0.0, 90.0], 0.0, 2.2).unwrap();
    let (x, cond) = inputs(1, &poses, 8, 10);
    let before = net.predict(&params, false, &x, &[300], &cond).unwrap();
    randomize(&mut params.adapter, 0.3, 9);
    let teacher = net.predict(&params, false, &x, &[300], &cond).unwrap();
    let student = net.predict(&params, true, &x, &[300], &cond).unwrap();
    assert_eq!(bits(&before), bits(&teacher));
    assert!(teacher.max_abs_diff(&student) > 1e-3);
}

#[test]
fn joint_view_and_pose_permutation_permutes_outputs_exactly() {
    let s = NoiseSchedule::default();
    let (net, mut params) = Denoiser::build(tiny(Output::Velocity), &s, 21);
    randomize(&mut params.base, 0.3, 22);
    randomize(&mut params.adapter, 0.3, 23);
    let poses = make_pose_set(&[0.0, 90.0, 180.0, 270.0], 10.0, 2.2).unwrap();
    let (x, cond) = inputs(2, &poses, 8, 24);
    let ts = [640, 55];
    let out = net.predict(&params, true, &x, &ts, &cond).unwrap();

    let order = [2, 0, 3, 1];
    let per = 8 * 8 * 3;
    let permute = |t: &Tensor<f32>| {
        let mut data = Vec::with_capacity(t.numel());
        for b in 0..2 {
            for &j in &order {
                let row = b * 4 + j;
                data.extend_from_slice(&t.data()[row * per..(row + 1) * per]);
            }
        }
        Tensor::new(t.shape().to_vec(), data)
    };
    let cond_p = Conditioning { x_c: cond.x_c.clone(), poses: poses.permuted(&order).unwrap() };
    let out_p = net.predict(&params, true, &permute(&x), &ts, &cond_p).unwrap();
    assert_eq!(bits(&permute(&out)), bits(&out_p));
}

#[test]
fn velocity_target_and_output_agree_on_perfect_prediction() {
    // If the raw output equals the raw target, the converted noise equals the
    // noise that produced x_t.
    let s = NoiseSchedule::default();
    let (net, _) = Denoiser::build(tiny(Output::Velocity), &s, 1);
    let x0 = NoiseDraw::<f64>::new(&[2, 4, 4, 3], 5).eps.map(|v| v.tanh());
    let eps = NoiseDraw::<f64>::new(&[2, 4, 4, 3], 6).eps;
    for t in [1, 249, 999, 1000] {
        let v = net.raw_target(&x0, &eps, &[t]).unwrap();
        let (a, sd) = s.coefficients(t);
        for i in 0..x0.numel() {
            let x_t = a * x0.data()[i] + sd * eps.data()[i];
            let e = a * v.data()[i] + sd * x_t;
            assert!((e - eps.data()[i]).abs() < 1e-12);
        }
    }
}

#[test]
fn eps_loss_at_initialization_is_near_one() {
    // The output layer starts at zero, so the prediction is zero and the
    // loss is the second moment of unit Gaussian noise.
    let s = NoiseSchedule::default();
    let (net, params) = Denoiser::build(DenoiserConfig { output: Output::Eps, ..DenoiserConfig::default() }, &s, 3);
    let poses = make_pose_set(&[0.0, 90.0, 180.0, 270.0], 0.0, 2.2).unwrap();
    let (x, cond) = inputs(2, &poses, 16, 4);
    let eps = NoiseDraw::<f32>::new(x.shape(), 5).eps;
    let pred = net.predict(&params, false, &x, &[400, 800], &cond).unwrap();
    assert!(pred.data().iter().all(|&v| v == 0.0));
    let mse = eps.zip_map(&pred, |a, b| (a - b) * (a - b)).mean() as f64;
    assert!((mse - 1.0).abs() < 0.05, "{mse}");
}

/// `|eps_pred|^2` (or `|x0_hat|^2`) as a function of the adapter, in f64.
fn adapter_objective(
    net: &Denoiser,
    params: &DenoiserParams,
    adapter: &ParamStore<f64>,
    x: &Tensor<f64>,
    t: usize,
    cond: &Conditioning<f64>,
    through_x0: Option<&NoiseSchedule>,
) -> (f64, Vec<Option<Tensor<f64>>>) {
    let g = Graph::<f64>::new();
    let base = params.base.cast::<f64>().bind(&g, false);
    let ad = adapter.bind(&g, true);
    let ctx = Ctx { base: &base, adapter: Some(&ad) };
    let xv = g.constant(x.clone());
    let eps = net.forward(&g, ctx, xv, &[t], g.constant(cond.x_c.clone()), &cond.poses).unwrap();
    let y = match through_x0 {
        None => eps,
        Some(s) => {
            let (a, sd) = s.coefficients(t);
            g.scale(g.sub(xv, g.scale(eps, sd)), 1.0 / a)
        }
    };
    let loss = g.sum_all(g.sqr(y));
    let value = g.item(loss);
    let mut grads = g.backward(loss);
    (value, ad.grads(&mut grads))
}

fn check_adapter_gradients(output: Output, through_x0: bool) {
    let s = NoiseSchedule::default();
    let (net, mut params) = Denoiser::build(tiny(output), &s, 31);
    randomize(&mut params.base, 0.4, 32);
    randomize(&mut params.adapter, 0.2, 33);
    let poses = make_pose_set(&[0.0, 180.0], 0.0, 2.2).unwrap();
    let x = NoiseDraw::<f64>::new(&[2, 8, 8, 3], 34).eps;
    let cond = Conditioning { x_c: NoiseDraw::<f64>::new(&[1, 8, 8, 3], 35).eps.map(|v| v.clamp(-1.0, 1.0)), poses };
    let t = 420;
    let sched = through_x0.then_some(&s);
    let adapter = params.adapter.cast::<f64>();
    let (_, grads) = adapter_objective(&net, &params, &adapter, &x, t, &cond, sched);

    let ids: Vec<_> = adapter.ids().collect();
    let mut rng = seed::rng(36);
    let h = 1e-5;
    for _ in 0..10 {
        let id = ids[rng.random_range(0..ids.len())];
        let i = rng.random_range(0..adapter.get(id).numel());
        let mut plus = adapter.clone();
        plus.get_mut(id).data_mut()[i] += h;
        let mut minus = adapter.clone();
        minus.get_mut(id).data_mut()[i] -= h;
        let fp = adapter_objective(&net, &params, &plus, &x, t, &cond, sched).0;
        let fm = adapter_objective(&net, &params, &minus, &x, t, &cond, sched).0;
        let fd = (fp - fm) / (2.0 * h);
        let ad = grads[id.index()].as_ref().map_or(0.0, |g| g.data()[i]);
        let rel = (fd - ad).abs() / fd.abs().max(ad.abs()).max(1e-6);
        assert!(rel < 1e-2, "param {id:?}[{i}]: fd {fd} autodiff {ad} rel {rel}");
    }
    let total: f64 = grads.iter().flatten().map(|g| g.data().iter().map(|v| v.abs()).sum::<f64>()).sum();
    assert!(total > 0.0);
}

#[test]
fn adapter_gradients_of_noise_prediction_match_finite_differences() {
    check_adapter_gradients(Output::Eps, false);
    check_adapter_gradients(Output::Velocity, false);
}

#[test]
fn adapter_gradients_of_clean_estimate_match_finite_differences() {
    check_adapter_gradients(Output::Velocity, true);
}

#[test]
fn student_denoise_delegates_to_predict_x0() {
    let s = NoiseSchedule::default();
    let models = aligncvc::pipeline::Models::build(&Default::default(), &s, 5);
    let poses = make_pose_set(&[0.0, 90.0, 180.0, 270.0], 0.0, 2.2).unwrap();
    let (x, cond) = inputs(1, &poses, 16, 6);
    let (eps, x0) = models.student().denoise(&x, 749, &cond, &s).unwrap();
    let expect = predict_x0(&x, &eps, 749, &s).unwrap();
    assert_eq!(bits(&x0), bits(&expect));
}
