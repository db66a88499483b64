use aligncvc::schedule::*;
use gradtape::Tensor;
use proptest::prelude::*;

/// Running product of `1 - beta_i` with the linear interpolation written out
/// independently of the library.
fn oracle_alpha_bar(t_max: usize, t: usize, b0: f64, b1: f64) -> f64 {
    let mut p = 1.0f64;
    for i in 1..=t {
        let beta = b0 + (b1 - b0) * ((i - 1) as f64) / ((t_max - 1) as f64);
        p *= 1.0 - beta;
    }
    p
}

#[test]
fn alpha_bar_end_matches_running_product_oracle() {
    let s = NoiseSchedule::default();
    let oracle = oracle_alpha_bar(1000, 1000, 1e-4, 0.02);
    // Exact rational product, evaluated offline and frozen.
    let frozen = 4.035_829_765_375_683_5e-5;
    assert!((oracle - frozen).abs() / frozen < 1e-12);
    assert!((s.alpha_bar(1000) - frozen).abs() / frozen < 1e-10);
    assert!((s.alpha_bar(1) - 0.9999).abs() < 1e-15);
}

#[test]
fn default_plan_is_trailing_uniform() {
    let s = NoiseSchedule::default();
    assert_eq!(make_inference_plan(4, &s).unwrap().steps(), &[999, 749, 499, 249]);
    assert_eq!(make_inference_plan(1, &s).unwrap().steps(), &[999]);
    assert!(make_inference_plan(0, &s).is_err());
    assert!(make_inference_plan(1001, &s).is_err());
}

#[test]
fn predict_x0_matches_scalar_formula() {
    let s = NoiseSchedule::default();
    let x_t = NoiseDraw::<f64>::new(&[5, 7], 11).eps;
    let eps = NoiseDraw::<f64>::new(&[5, 7], 12).eps;
    for t in [1, 37, 500, 999, 1000] {
        let ab = oracle_alpha_bar(1000, t, 1e-4, 0.02);
        let got = predict_x0(&x_t, &eps, t, &s).unwrap();
        for ((&x, &e), &g) in x_t.data().iter().zip(eps.data()).zip(got.data()) {
            let want = (x - (1.0 - ab).sqrt() * e) / ab.sqrt();
            assert!((g - want).abs() <= 1e-9 * want.abs().max(1.0), "t={t}: {g} vs {want}");
        }
    }
}

#[test]
fn deterministic_steps_compose_under_constant_noise_prediction() {
    let s = NoiseSchedule::default();
    let x = NoiseDraw::<f64>::new(&[2, 4, 4, 3], 3).eps;
    let eps = NoiseDraw::<f64>::new(&[2, 4, 4, 3], 4).eps;
    for (ta, tb, tc) in [(999, 749, 499), (999, 500, 1), (300, 200, 0), (10, 9, 8)] {
        let two = denoise_step(&denoise_step(&x, &eps, ta, tb, &s).unwrap(), &eps, tb, tc, &s).unwrap();
        let one = denoise_step(&x, &eps, ta, tc, &s).unwrap();
        assert!(two.max_abs_diff(&one) < 1e-6, "{ta}->{tb}->{tc}");
    }
}

#[test]
fn denoise_step_rejects_upward_steps() {
    let s = NoiseSchedule::default();
    let x = Tensor::<f32>::zeros(vec![3]);
    assert!(denoise_step(&x, &x, 10, 10, &s).is_err());
    assert!(denoise_step(&x, &x, 10, 11, &s).is_err());
}

struct Moments {
    mean: f64,
    var: f64,
    n: f64,
}

fn moments(samples: &[f64]) -> Moments {
    let n = samples.len() as f64;
    let mean = samples.iter().sum::<f64>() / n;
    let var = samples.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    Moments { mean, var, n }
}

#[test]
fn q_sample_moments_within_three_standard_errors() {
    let s = NoiseSchedule::default();
    let x0 = Tensor::<f32>::new(vec![2], vec![0.8, -0.35]);
    let draws = 10_000;
    for t in [1, 250, 500, 750, 1000] {
        let (a, sd) = s.coefficients(t);
        let mut per_pixel = vec![Vec::with_capacity(draws); 2];
        for i in 0..draws {
            let noise = NoiseDraw::new(&[2], 1_000_000 * t as u64 + i as u64);
            let x = q_sample(&x0, t, &noise, &s).unwrap();
            for (p, &v) in x.data().iter().enumerate() {
                per_pixel[p].push(v as f64);
            }
        }
        for (p, samples) in per_pixel.iter().enumerate() {
            let m = moments(samples);
            let want_mean = a * x0.data()[p] as f64;
            let want_var = sd * sd;
            let se_mean = (want_var / m.n).sqrt();
            let se_var = want_var * (2.0 / (m.n - 1.0)).sqrt();
            assert!((m.mean - want_mean).abs() < 3.0 * se_mean, "t={t} px={p}: mean {} vs {want_mean}", m.mean);
            assert!((m.var - want_var).abs() < 3.0 * se_var, "t={t} px={p}: var {} vs {want_var}", m.var);
        }
    }
}

#[test]
fn renoise_snr_at_last_plan_step_within_three_standard_errors() {
    let s = NoiseSchedule::default();
    let t = *make_inference_plan(4, &s).unwrap().steps().last().unwrap();
    assert_eq!(t, 249);
    let white = Tensor::<f32>::new(vec![1], vec![1.0]);
    let samples: Vec<f64> = (0..10_000).map(|i| renoise(&white, t, 77 + i, &s).unwrap().data()[0] as f64).collect();
    let m = moments(&samples);
    let snr = m.mean * m.mean / m.var;
    let want = s.alpha_bar(t) / (1.0 - s.alpha_bar(t));
    // Frozen from the exact rational product.
    assert!((s.alpha_bar(t) - 0.526_750_764_329_550_6).abs() < 1e-12);
    let (mu, v) = (s.alpha_bar(t).sqrt(), 1.0 - s.alpha_bar(t));
    let se = (4.0 * mu * mu / (v * m.n) + 2.0 * mu.powi(4) / (v * v * (m.n - 1.0))).sqrt();
    assert!((snr - want).abs() < 3.0 * se, "snr {snr} vs {want} (se {se})");
}

#[test]
fn renoise_is_seed_deterministic() {
    let s = NoiseSchedule::default();
    let r = Tensor::<f32>::from_fn(vec![2, 4, 4, 3], |i| (i % 7) as f32 / 7.0);
    let a = renoise(&r, 499, 5, &s).unwrap();
    let b = renoise(&r, 499, 5, &s).unwrap();
    assert_eq!(a, b);
    assert_eq!(a, q_sample(&to_signal(&r), 499, &NoiseDraw::new(r.shape(), 5), &s).unwrap());
}

proptest! {
    #[test]
    fn plans_are_strictly_decreasing_and_in_range(t in 1usize..1500, k_frac in 0.0f64..1.0) {
        let s = build_schedule(t, 1e-4, 0.02).unwrap();
        let k = 1 + ((t - 1) as f64 * k_frac) as usize;
        let plan = make_inference_plan(k, &s).unwrap();
        prop_assert_eq!(plan.len(), k);
        prop_assert!(plan.steps().windows(2).all(|w| w[0] > w[1]));
        prop_assert!(plan.steps().iter().all(|&x| (1..=t).contains(&x)));
    }

    #[test]
    fn schedules_are_monotone(t in 1usize..1500, b0 in 1e-6f64..0.02, extra in 0.0f64..0.03) {
        let s = build_schedule(t, b0, b0 + extra).unwrap();
        for i in 1..=t {
            prop_assert!(s.alpha_bar(i) > 0.0 && s.alpha_bar(i) < 1.0);
            prop_assert!(s.beta(i) > 0.0 && s.beta(i) < 1.0);
            if i > 1 {
                prop_assert!(s.alpha_bar(i) < s.alpha_bar(i - 1));
            }
        }
    }

    #[test]
    fn predict_x0_inverts_q_sample(t in 1usize..=1000, seed in any::<u64>()) {
        let s = NoiseSchedule::default();
        let x0 = NoiseDraw::<f64>::new(&[16], seed).eps.map(|v| v.clamp(-1.0, 1.0));
        let noise = NoiseDraw::<f64>::new(&[16], seed ^ 0x5555);
        let xt = q_sample(&x0, t, &noise, &s).unwrap();
        let back = predict_x0(&xt, &noise.eps, t, &s).unwrap();
        prop_assert!(back.max_abs_diff(&x0) < 1e-6);
    }
}
