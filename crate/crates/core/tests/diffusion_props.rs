mod common;

use csdm::diffusion::process::dropout;
use csdm::diffusion::{
    build_schedule, diffusion_loss, forward_sample, posterior_coeffs, reverse_step, sample_chain,
    subsequence, ZeroDenoiser,
};
use csdm::numcore::{SplitRng, Tensor};
use proptest::prelude::*;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn schedule_is_monotone_and_pinned(steps in 2usize..400, beta in 1e-7f64..0.05) {
        let s = build_schedule(steps, beta).unwrap();
        prop_assert_eq!(s.alpha(0), 1.0);
        prop_assert_eq!(s.c(0), 0.0);
        prop_assert_eq!(s.c(steps), 1.0);
        prop_assert!(s.alphas().windows(2).all(|w| w[1] < w[0]));
        prop_assert!(s.cs().windows(2).all(|w| w[1] > w[0]));
        let direct = (1.0 - beta).powi(steps as i32);
        prop_assert!((s.alpha(steps) - direct).abs() < 1e-12);
    }

    #[test]
    fn posterior_identities(t in 2usize..=100, frac in 0.0f64..=1.0) {
        let s = build_schedule(100, 1e-5).unwrap();
        let sigma = frac * (1.0 - s.alpha(t - 1)).sqrt();
        let (k, l, n) = posterior_coeffs(&s, t, sigma).unwrap();
        prop_assert!((k * s.alpha(t).sqrt() + l - s.alpha(t - 1).sqrt()).abs() < 1e-12);
        prop_assert!((k * s.c(t).sqrt() + n - s.c(t - 1).sqrt()).abs() < 1e-12);
        prop_assert!((k * k * (1.0 - s.alpha(t)) + sigma * sigma - (1.0 - s.alpha(t - 1))).abs() < 1e-12);
    }

    #[test]
    fn oracle_generation_inverts_any_stride(stride in 1usize..=100, seed in 0u64..1000) {
        prop_assert!(common::oracle_inversion_error(stride, seed) < 1e-8);
    }

    #[test]
    fn subsequence_shape(steps in 2usize..300, stride in 1usize..300) {
        prop_assume!(stride <= steps);
        let seq = subsequence(steps, stride).unwrap();
        prop_assert_eq!(seq[0], steps);
        prop_assert_eq!(*seq.last().unwrap(), 0);
        prop_assert_eq!(seq.len(), steps.div_ceil(stride) + 1);
        prop_assert!(seq.windows(2).all(|w| w[1] < w[0]));
    }
}

#[test]
fn posterior_rejects_oversized_sigma_and_bad_steps() {
    let s = build_schedule(100, 1e-5).unwrap();
    let too_big = 1.01 * (1.0 - s.alpha(9)).sqrt();
    assert!(posterior_coeffs(&s, 10, too_big).is_err());
    assert!(posterior_coeffs(&s, 1, 0.0).is_err());
    assert!(posterior_coeffs(&s, 101, 0.0).is_err());
}

#[test]
fn forward_sample_moments() {
    let s = build_schedule(100, 1e-5).unwrap();
    let n = 50_000;
    let z0 = common::repeat_row(&[1.5, -0.5], n);
    let h = common::repeat_row(&[0.3, 2.0], n);
    let mut rng = SplitRng::new(21);
    for t in [1usize, 37, 100] {
        let (z, _) = forward_sample(&s, &z0, &h, &vec![t; n], &mut rng, false, 0.0).unwrap();
        let var = 1.0 - s.alpha(t);
        for j in 0..2 {
            let col: Vec<f64> = (0..n).map(|r| z.row(r)[j]).collect();
            let mean = col.iter().sum::<f64>() / n as f64;
            let sv = col.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
            let expect = s.alpha(t).sqrt() * z0.row(0)[j] + s.c(t).sqrt() * h.row(0)[j];
            assert!(
                (mean - expect).abs() < 4.0 * (var / n as f64).sqrt(),
                "t={t} mean {mean} vs {expect}"
            );
            assert!(
                (sv / var - 1.0).abs() < 0.05,
                "t={t} variance {sv} vs {var}"
            );
        }
    }
}

#[test]
fn zero_denoiser_loss_is_chi_square_mean() {
    // |eps|^2 over k dims has mean k and variance 2k.
    let s = build_schedule(100, 1e-5).unwrap();
    let (n, k) = (20_000, 16);
    let mut rng = SplitRng::new(3);
    let z0 = Tensor::from_fn(&[n, k], |_| rng.normal());
    let h = Tensor::from_fn(&[n, k], |_| rng.normal());
    let l = diffusion_loss(&ZeroDenoiser, &s, &z0, &h, &mut rng, 0.5).unwrap();
    let se = (2.0 * k as f64 / n as f64).sqrt();
    assert!((l - k as f64).abs() < 4.0 * se, "loss {l}");
}

#[test]
fn dropout_preserves_expectation() {
    let mut rng = SplitRng::new(4);
    let x = Tensor::filled(&[200_000, 1], 2.0);
    let y = dropout(&x, 0.5, &mut rng).unwrap();
    let mean = y.data().iter().sum::<f64>() / y.len() as f64;
    assert!((mean - 2.0).abs() < 0.02, "{mean}");
    assert!(y.data().iter().all(|&v| v == 0.0 || v == 4.0));
    assert!(dropout(&x, 1.0, &mut rng).is_err());
}

#[test]
fn stochastic_steps_differ_and_deterministic_steps_do_not() {
    let s = build_schedule(100, 1e-5).unwrap();
    let mut rng = SplitRng::new(5);
    let z = Tensor::from_fn(&[4, 3], |_| rng.normal());
    let h = Tensor::from_fn(&[4, 3], |_| rng.normal());
    let a = sample_chain(&ZeroDenoiser, &s, &z, &h, 10, 0.0, &mut SplitRng::new(1)).unwrap();
    let b = sample_chain(&ZeroDenoiser, &s, &z, &h, 10, 0.0, &mut SplitRng::new(2)).unwrap();
    assert_eq!(a, b);
    let c = sample_chain(&ZeroDenoiser, &s, &z, &h, 10, 0.5, &mut SplitRng::new(1)).unwrap();
    let d = sample_chain(&ZeroDenoiser, &s, &z, &h, 10, 0.5, &mut SplitRng::new(2)).unwrap();
    assert_ne!(c, d);
    assert!(reverse_step(&ZeroDenoiser, &s, &z, 10, 10, &h, 0.0, &mut rng).is_err());
}

#[test]
fn chain_marginals_hold_with_fewer_chains() {
    for t in [1usize, 50, 99] {
        let (z, tr) = common::marginal_chain_check(t, 20_000, 100 + t as u64);
        assert!(z < 4.0 && tr < 0.05, "t={t}: z {z}, trace err {tr}");
    }
}
