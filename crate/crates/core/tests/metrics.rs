mod common;

use std::collections::BTreeMap;

use common::{drifting_texture, metric_oracles, tiny_gen};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use relumix_core::metrics::*;
use relumix_core::scenegen::{generate_dataset, Split};
use relumix_core::video::{Frame, VideoClip};

fn noisy(f: &Frame, sigma: f64, rng: &mut ChaCha8Rng) -> Frame {
    use rand_distr::{Distribution, Normal};
    let n = Normal::new(0.0, sigma).unwrap();
    let data = f
        .data
        .iter()
        .map(|&v| (v as f64 + n.sample(rng)).clamp(0.0, 1.0) as f32)
        .collect();
    Frame::new(f.height, f.width, data).unwrap()
}

#[test]
fn exact_identities() {
    for (name, ok) in metric_oracles() {
        assert!(ok, "{name}");
    }
}

#[test]
fn psnr_matches_definition() {
    assert_eq!(psnr_from_mse(0.01), 20.0);
    assert!((psnr_from_mse(1e-4) - 40.0).abs() < 1e-12);
    assert_eq!(psnr_from_mse(1e-30), PSNR_CAP);
    let a = Frame::filled(4, 4, [0.5; 3]);
    let b = Frame::filled(4, 4, [0.6; 3]);
    assert!((psnr(&a, &b).unwrap() - 20.0).abs() < 1e-5);
}

#[test]
fn ssim_is_symmetric_and_drops_with_noise() {
    let f = drifting_texture(&[(0.0, 0.0)], 24, 24).frame(0);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let g = noisy(&f, 0.05, &mut rng);
    let h = noisy(&f, 0.2, &mut rng);
    assert_eq!(ssim(&f, &g).unwrap(), ssim(&g, &f).unwrap());
    assert!(ssim(&f, &g).unwrap() > ssim(&f, &h).unwrap());
    assert!(ssim(
        &Frame::filled(8, 8, [0.0; 3]),
        &Frame::filled(8, 8, [0.0; 3])
    )
    .is_err());
}

#[test]
fn proxy_grows_with_distortion() {
    let f = drifting_texture(&[(0.0, 0.0)], 24, 24).frame(0);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let small = perceptual_proxy(&f, &noisy(&f, 0.02, &mut rng)).unwrap();
    let large = perceptual_proxy(&f, &noisy(&f, 0.2, &mut rng)).unwrap();
    assert!(small > 0.0 && large > small);
}

#[test]
fn translated_texture_has_coherent_flow() {
    let clip = drifting_texture(&[(0.0, 0.0), (0.5, 1.0), (1.0, 2.0), (1.5, 3.0)], 48, 48);
    let stats = flow_consistency(&clip, AngleStd::Literal).unwrap();
    assert!(stats.tracks > 10 && !stats.no_tracks, "{stats:?}");
    assert!(
        stats.sigma_mag < 0.1 && stats.sigma_angle < 0.1,
        "{stats:?}"
    );
    let circ = flow_consistency(&clip, AngleStd::Circular).unwrap();
    assert_eq!(circ.sigma_mag, stats.sigma_mag);
}

#[test]
fn flat_clip_has_no_tracks() {
    let clip = VideoClip::from_frames(&[
        Frame::filled(32, 32, [0.3; 3]),
        Frame::filled(32, 32, [0.3; 3]),
    ])
    .unwrap();
    let stats = flow_consistency(&clip, AngleStd::Literal).unwrap();
    assert!(stats.no_tracks);
    assert_eq!(stats.score, 1.0);
}

#[test]
fn coloured_clip_has_positive_colour_spread() {
    let mut f = Frame::filled(8, 8, [0.2, 0.4, 0.6]);
    f.data[..96].iter_mut().for_each(|v| *v = 0.9 - *v);
    let clip = VideoClip::from_frames(&[f]).unwrap();
    assert!(color_consistency(&clip) > 1.0);
}

#[test]
fn aggd_recovers_laplace_shape() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x: Vec<f64> = (0..200_000)
        .map(|_| {
            let u: f64 = rng.random_range(-0.5..0.5);
            -u.signum() * (1.0 - 2.0 * u.abs()).ln()
        })
        .collect();
    let a = fit_aggd(&x);
    assert!((a.alpha - 1.0).abs() < 0.05, "{a:?}");
    assert!((a.sigma_l / a.sigma_r - 1.0).abs() < 0.02);
    let zero = fit_aggd(&[0.0; 10]);
    assert_eq!((zero.alpha, zero.sigma_l), (10.0, 1e-6));
}

#[test]
fn nss_score_rises_with_noise() {
    let dir = tempfile::tempdir().unwrap();
    let m = generate_dataset(&tiny_gen(11), dir.path(), 1).unwrap();
    let frames_of = |split| {
        let mut out = Vec::new();
        for s in m.scenes_in(split) {
            for &l in &s.lightings {
                out.extend(m.load_clip(s.id, l).unwrap().frames());
            }
        }
        out
    };
    let train: Vec<Vec<f64>> = frames_of(Split::Train)
        .iter()
        .map(|f| brisque_features(f).unwrap())
        .collect();
    assert_eq!(train[0].len(), NSS_FEATURES);
    let stats = PristineStats::fit(&train).unwrap();
    let test = frames_of(Split::Test);
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let worse = test
        .iter()
        .filter(|f| {
            brisque_score(&noisy(f, 0.1, &mut rng), &stats).unwrap()
                > brisque_score(f, &stats).unwrap()
        })
        .count();
    assert!(
        worse as f64 >= 0.95 * test.len() as f64,
        "{worse}/{}",
        test.len()
    );
    assert!(PristineStats::fit(&train[..50]).is_err());
}

#[test]
fn evaluate_reports_every_metric() {
    let clip = drifting_texture(&[(0.0, 0.0), (0.5, 1.0), (1.0, 2.0)], 32, 32);
    let clips = BTreeMap::from([
        ("a".to_string(), clip.clone()),
        ("b".to_string(), clip.reversed()),
    ]);
    let report = evaluate(&clips, Some(&clips), None, &EvalOptions::default()).unwrap();
    let names: Vec<&str> = report.keys().map(|s| s.as_str()).collect();
    assert_eq!(
        names,
        [
            "color_consistency",
            "flow_consistency",
            "perceptual_proxy",
            "psnr",
            "ssim",
            "temporal_perceptual"
        ]
    );
    assert_eq!(report["psnr"].mean, PSNR_CAP);
    assert_eq!(report["ssim"].per_clip.len(), 2);
    let missing = BTreeMap::from([("a".to_string(), clip)]);
    assert!(evaluate(&clips, Some(&missing), None, &EvalOptions::default()).is_err());
    assert!(evaluate(&BTreeMap::new(), None, None, &EvalOptions::default()).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn lab_round_trip(r in 0.0f64..1.0, g in 0.0f64..1.0, b in 0.0f64..1.0) {
        let back = lab_to_srgb(srgb_to_lab([r, g, b]));
        for (x, y) in back.iter().zip([r, g, b]) {
            prop_assert!((x - y).abs() < 1e-9);
        }
    }

    #[test]
    fn ssim_is_symmetric(seed in 0u64..1000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mk = |rng: &mut ChaCha8Rng| Frame::new(12, 12, (0..432).map(|_| rng.random::<f32>()).collect()).unwrap();
        let (a, b) = (mk(&mut rng), mk(&mut rng));
        let s = ssim(&a, &b).unwrap();
        prop_assert_eq!(s, ssim(&b, &a).unwrap());
        prop_assert!(s <= 1.0 + 1e-12);
    }
}
