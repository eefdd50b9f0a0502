mod common;

use common::{mixture_moments, mixture_sampler_trial};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use relumix_core::edm::{
    apply_guidance, euler_sample, euler_trajectory, guidance_scales, karras_sigmas, loss_weight,
    precondition, EdmParams, GuidanceMode, Precond,
};

#[test]
fn default_schedule_endpoints_are_exact() {
    let s = EdmParams::default().sigmas().unwrap();
    assert_eq!(s.len(), 26);
    assert_eq!(s[0], 700.0);
    assert_eq!(s[24], 0.002);
    assert_eq!(s[25], 0.0);
}

#[test]
fn sampler_recovers_mixture_moments() {
    let (m, v) = mixture_moments();
    for seed in 0..3 {
        let (sm, sv) = mixture_sampler_trial(seed);
        assert!((sm - m).abs() <= 0.02 * m, "seed {seed}: mean {sm} vs {m}");
        assert!(
            (sv - v).abs() <= 0.05 * v,
            "seed {seed}: variance {sv} vs {v}"
        );
    }
}

#[test]
fn sample_shape_and_range() {
    let params = EdmParams {
        steps: 3,
        ..Default::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let clip = euler_sample(
        |x: &[f64], _, _| Ok(vec![0.5; x.len()]),
        2,
        2,
        3,
        &params,
        &mut rng,
    )
    .unwrap();
    assert_eq!((clip.frames, clip.height, clip.width), (2, 2, 3));
    assert!(clip.data.iter().all(|&v| (0.0..=1.0).contains(&v)));
}

#[test]
fn precondition_passes_scaled_input() {
    let x = [1.0, -2.0];
    let out = precondition(3.0, &x, |scaled, c_noise| {
        let p = Precond::new(3.0).unwrap();
        assert_eq!(c_noise, p.c_noise);
        assert_eq!(scaled, &[p.c_in, -2.0 * p.c_in]);
        Ok(vec![0.0, 0.0])
    })
    .unwrap();
    assert_eq!(out, vec![0.1, -0.2]);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn schedule_strictly_decreasing(steps in 2usize..200, lo in 1e-4f64..0.5, ratio in 1.5f64..1e5, rho in 0.5f64..12.0) {
        let hi = lo * ratio;
        let s = karras_sigmas(steps, lo, hi, rho).unwrap();
        prop_assert_eq!(s.len(), steps + 1);
        prop_assert_eq!(s[0], hi);
        prop_assert_eq!(s[steps - 1], lo);
        prop_assert_eq!(s[steps], 0.0);
        for w in s.windows(2) {
            prop_assert!(w[0] > w[1]);
        }
    }

    #[test]
    fn loss_weight_cancels_output_scale(sigma in 1e-3f64..1e3) {
        let p = Precond::new(sigma).unwrap();
        prop_assert!((loss_weight(sigma).unwrap() * p.c_out * p.c_out - 1.0).abs() < 1e-12);
        prop_assert!((p.c_skip + p.c_out * p.c_out - 1.0).abs() < 1e-12);
    }

    #[test]
    fn unit_guidance_is_bitwise_identity(cond in prop::collection::vec(-5.0f64..5.0, 12), uncond in prop::collection::vec(-5.0f64..5.0, 12)) {
        let mut out = cond.clone();
        apply_guidance(&mut out, &uncond, &[1.0, 1.0, 1.0]);
        prop_assert_eq!(out, cond);
    }

    #[test]
    fn linear_guidance_is_monotone(frames in 1usize..40, lo in 0.0f64..3.0, span in 0.0f64..3.0) {
        let mut p = EdmParams::default();
        p.guidance.min = lo;
        p.guidance.max = lo + span;
        let s = guidance_scales(frames, &p);
        prop_assert_eq!(s.len(), frames);
        prop_assert_eq!(s[0], lo);
        for w in s.windows(2) {
            prop_assert!(w[1] >= w[0]);
        }
        p.guidance.mode = GuidanceMode::Constant;
        prop_assert!(guidance_scales(frames, &p).iter().all(|&v| v == p.guidance.constant));
    }
}

/// For a single Gaussian the Euler step is affine in `x - m`, so each output is
/// `m + F * (sigma_max * z - m)` with `F` the product of the per-step factors.
#[test]
fn euler_matches_affine_recursion_for_a_gaussian() {
    let (m, s) = (0.3, 0.7);
    let params = EdmParams::default();
    let denoise = |x: &[f64], sigma: f64, _| {
        Ok(x.iter()
            .map(|&v| (v * s * s + m * sigma * sigma) / (s * s + sigma * sigma))
            .collect())
    };
    let out = euler_trajectory(denoise, 2, 50, &params, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
    let sig = params.sigmas().unwrap();
    let f: f64 = sig
        .windows(2)
        .map(|p| 1.0 + (p[1] - p[0]) * p[0] / (s * s + p[0] * p[0]))
        .product();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for &o in &out {
        let z: f64 = StandardNormal.sample(&mut rng);
        let want = m + f * (params.sigma_max * z - m);
        assert!(
            (o - want).abs() <= 1e-9 * want.abs().max(1.0),
            "{o} vs {want}"
        );
    }
}
