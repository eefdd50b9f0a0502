#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use relumix_autograd::{Graph, Tensor};
use relumix_core::denoiser::{Denoiser, DenoiserConfig, ForwardOptions, Params};
use relumix_core::scenegen::GenConfig;
use relumix_core::Variant;

pub fn tiny_config(frames: usize, temporal: bool) -> DenoiserConfig {
    DenoiserConfig {
        base_channels: 8,
        channel_mult: vec![1, 2],
        attention_levels: vec![0, 1],
        heads: 2,
        context_dim: 8,
        frames,
        norm_groups: 4,
        temporal_attention: temporal,
        encoder_channels: vec![4, 4, 4],
        ..Default::default()
    }
    .with_variant(Variant::Full)
}

pub fn uniform(len: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..len).map(|_| rng.random_range(-1.0..1.0)).collect()
}

/// Random input, context and noise level for one clip of `model`.
pub fn random_inputs(
    model: &Denoiser,
    h: usize,
    w: usize,
    seed: u64,
) -> (Tensor<f64>, Tensor<f64>, f64) {
    let cfg = model.config();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let t = cfg.frames;
    let x = Tensor::from_vec(
        &[t, h, w, cfg.in_channels],
        uniform(t * h * w * cfg.in_channels, &mut rng),
    );
    let tokens = model.encoder().tokens_for(h, w);
    let ctx = Tensor::from_vec(
        &[t, tokens, cfg.context_dim],
        uniform(t * tokens * cfg.context_dim, &mut rng),
    );
    let c_noise = rng.random_range(-1.5..1.5);
    (x, ctx, c_noise)
}

pub fn set_by_suffix<T: relumix_autograd::Float>(params: &mut Params<T>, suffix: &str, value: f64) {
    for p in params.entries_mut() {
        if p.name.ends_with(suffix) {
            p.tensor
                .data_mut()
                .iter_mut()
                .for_each(|v| *v = T::lit(value));
        }
    }
}

/// With every gate's `alpha` at zero the gated network matches the cross-attention-free one
/// bit for bit (f32, the training precision).
pub fn gate_closure_trial(seed: u64) -> bool {
    let model = Denoiser::new(tiny_config(2, true)).unwrap();
    let mut params = model.init_params::<f32>(seed);
    set_by_suffix(&mut params, ".gate.alpha", 0.0);
    let (x, ctx, c) = random_inputs(&model, 8, 8, seed + 1000);
    let (x, ctx) = (x.cast::<f32>(), ctx.cast::<f32>());
    let gated = model
        .predict(
            &params,
            x.clone(),
            &[c],
            Some(ctx.clone()),
            &ForwardOptions::default(),
        )
        .unwrap();
    let plain = model
        .predict(
            &params,
            x,
            &[c],
            Some(ctx),
            &ForwardOptions {
                skip_cross_attention: true,
            },
        )
        .unwrap();
    gated
        .data()
        .iter()
        .zip(plain.data())
        .all(|(a, b)| a.to_bits() == b.to_bits())
}

/// Largest relative error between analytic and central-difference gradients of every gate
/// parameter and a sample of `conv_in.weight` entries, in f64.
pub fn gradient_check(seed: u64, frames: usize, temporal: bool) -> f64 {
    let model = Denoiser::new(tiny_config(frames, temporal)).unwrap();
    let mut params = model.init_params::<f64>(seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xfeed);
    for p in params.entries_mut() {
        if p.name.ends_with(".gate.alpha") || p.name.ends_with(".gate.b") {
            p.tensor.data_mut()[0] = rng.random_range(0.3..1.2);
        }
    }
    let (x, ctx, c) = random_inputs(&model, 8, 8, seed + 7);
    let probe_len = frames * 8 * 8 * 3;
    let probe = Tensor::from_vec(&[frames, 8, 8, 3], uniform(probe_len, &mut rng));
    let loss_and_grads = |params: &Params<f64>, want_grads: bool| {
        let mut g = Graph::new();
        let bound = params.bind(&mut g);
        let xv = g.constant(x.clone());
        let cv = g.constant(ctx.clone());
        let out = model
            .forward(
                &mut g,
                &bound,
                xv,
                &[c],
                Some(cv),
                &ForwardOptions::default(),
            )
            .unwrap();
        let pv = g.constant(probe.clone());
        let prod = g.mul(out, pv);
        let loss = g.mean(prod);
        let value = g.value(loss).data()[0];
        let grads = want_grads.then(|| {
            let mut gr = g.backward(loss);
            bound.vars().iter().map(|v| gr.take(*v)).collect::<Vec<_>>()
        });
        (value, grads)
    };
    let (_, grads) = loss_and_grads(&params, true);
    let grads = grads.unwrap();
    let mut targets = Vec::new();
    for (i, p) in params.entries().iter().enumerate() {
        if p.name.contains(".gate.") {
            for j in 0..p.tensor.len() {
                targets.push((i, j));
            }
        }
        if p.name == "conv_in.weight" {
            for _ in 0..6 {
                targets.push((i, rng.random_range(0..p.tensor.len())));
            }
        }
    }
    let h = 1e-6;
    let mut worst: f64 = 0.0;
    for (i, j) in targets {
        let analytic = grads[i].as_ref().map(|t| t.data()[j]).unwrap_or(0.0);
        let orig = params.entries()[i].tensor.data()[j];
        params.entries_mut()[i].tensor.data_mut()[j] = orig + h;
        let (lp, _) = loss_and_grads(&params, false);
        params.entries_mut()[i].tensor.data_mut()[j] = orig - h;
        let (lm, _) = loss_and_grads(&params, false);
        params.entries_mut()[i].tensor.data_mut()[j] = orig;
        let numeric = (lp - lm) / (2.0 * h);
        let err = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6);
        worst = worst.max(err);
    }
    worst
}

/// A small but valid dataset configuration for end-to-end tests.
pub fn tiny_gen(seed: u64) -> GenConfig {
    GenConfig {
        n_scenes: 10,
        lightings_per_scene: 2,
        frames: 8,
        height: 32,
        width: 32,
        seed,
    }
}

/// Two-component 1-D Gaussian mixture used as a sampler oracle.
pub const MIXTURE: [(f64, f64, f64); 2] = [(0.5, 9.5, 0.01), (0.5, 10.5, 0.01)];

pub fn mixture_moments() -> (f64, f64) {
    let mean: f64 = MIXTURE.iter().map(|(w, m, _)| w * m).sum();
    let second: f64 = MIXTURE.iter().map(|(w, m, s)| w * (s * s + m * m)).sum();
    (mean, second - mean * mean)
}

/// Closed-form posterior mean `E[x0 | x0 + sigma * eps = x]` of [`MIXTURE`].
pub fn mixture_denoiser(x: f64, sigma: f64) -> f64 {
    let comps: Vec<(f64, f64)> = MIXTURE
        .iter()
        .map(|&(w, m, s)| {
            let v = s * s + sigma * sigma;
            let log_ev = w.ln() - 0.5 * (x - m) * (x - m) / v - 0.5 * v.ln();
            (log_ev, (x * s * s + m * sigma * sigma) / v)
        })
        .collect();
    let top = comps.iter().map(|c| c.0).fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = comps.iter().map(|c| (c.0 - top).exp()).collect();
    let z: f64 = weights.iter().sum();
    comps.iter().zip(&weights).map(|(c, w)| w / z * c.1).sum()
}

/// Sample mean and variance of 200 draws from the Euler sampler driven by the exact denoiser.
pub fn mixture_sampler_trial(seed: u64) -> (f64, f64) {
    use relumix_core::edm::{euler_trajectory, EdmParams};
    let params = EdmParams::default();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = 200;
    let out = euler_trajectory(
        |x: &[f64], sigma: f64, _| Ok(x.iter().map(|&v| mixture_denoiser(v, sigma)).collect()),
        1,
        n,
        &params,
        &mut rng,
    )
    .unwrap();
    let mean = out.iter().sum::<f64>() / n as f64;
    let var = out.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
    (mean, var)
}

/// Smooth two-dimensional texture sampled at a sub-pixel offset, one frame per offset.
pub fn drifting_texture(
    offsets: &[(f64, f64)],
    h: usize,
    w: usize,
) -> relumix_core::video::VideoClip {
    use relumix_core::video::VideoClip;
    let mut data = Vec::with_capacity(offsets.len() * h * w * 3);
    for &(dy, dx) in offsets {
        for y in 0..h {
            for x in 0..w {
                let (u, v) = (x as f64 - dx, y as f64 - dy);
                let base = 0.5
                    + 0.2 * (0.31 * u).sin() * (0.27 * v).cos()
                    + 0.1 * (0.13 * u + 0.19 * v).sin();
                data.extend(
                    [base, 0.9 * base + 0.05, 1.1 * base - 0.05].map(|c| c.clamp(0.0, 1.0) as f32),
                );
            }
        }
    }
    VideoClip::new(offsets.len(), h, w, data).unwrap()
}

/// Exact metric identities; each entry is `(name, holds)`.
pub fn metric_oracles() -> Vec<(&'static str, bool)> {
    use rand_distr::{Distribution, StandardNormal};
    use relumix_core::metrics::*;
    use relumix_core::video::{Frame, VideoClip};
    let clip = drifting_texture(&[(0.0, 0.0), (0.5, 1.0), (1.0, 2.0)], 32, 32);
    let f = clip.frame(1);
    let frozen = VideoClip::from_frames(&[f.clone(), f.clone(), f.clone()]).unwrap();
    let gray = VideoClip::from_frames(&[
        Frame::filled(16, 16, [0.4; 3]),
        Frame::filled(16, 16, [0.7; 3]),
    ])
    .unwrap();
    let flow = flow_consistency(&frozen, AngleStd::Literal).unwrap();
    let lab = srgb_to_lab([1.0, 1.0, 1.0]);
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let gauss: Vec<f64> = (0..200_000)
        .map(|_| StandardNormal.sample(&mut rng))
        .collect();
    let aggd = fit_aggd(&gauss);
    vec![
        ("ssim identity", (ssim(&f, &f).unwrap() - 1.0).abs() <= 1e-9),
        ("psnr cap", psnr(&f, &f).unwrap() == PSNR_CAP),
        (
            "proxy identity",
            perceptual_proxy(&f, &f).unwrap().abs() <= 1e-9,
        ),
        (
            "frozen temporal",
            temporal_perceptual(&frozen).unwrap().abs() <= 1e-9,
        ),
        ("static flow", (flow.score - 1.0).abs() <= 1e-9),
        (
            "flow formula",
            flow_score(0.5, 0.25) == 1.0 / 1.75 && flow_score(0.0, 0.0) == 1.0,
        ),
        ("gray color", color_consistency(&gray).abs() <= 1e-9),
        (
            "white lab",
            (lab[0] - 100.0).abs() <= 1e-6 && lab[1].abs() <= 1e-6 && lab[2].abs() <= 1e-6,
        ),
        ("aggd gaussian", (aggd.alpha - 2.0).abs() <= 0.05),
    ]
}

/// Two-sided signed-rank p-value by enumerating all sign patterns over doubled integer midranks.
pub fn brute_force_wilcoxon(a: &[f64], b: &[f64]) -> f64 {
    let d: Vec<f64> = a
        .iter()
        .zip(b)
        .map(|(x, y)| x - y)
        .filter(|v| *v != 0.0)
        .collect();
    let n = d.len();
    if n == 0 {
        return 1.0;
    }
    let rank2: Vec<i64> = d
        .iter()
        .map(|v| {
            let less = d.iter().filter(|u| u.abs() < v.abs()).count() as i64;
            let equal = d.iter().filter(|u| u.abs() == v.abs()).count() as i64;
            2 * less + equal + 1
        })
        .collect();
    let total: i64 = rank2.iter().sum();
    let observed: i64 = d
        .iter()
        .zip(&rank2)
        .filter(|(v, _)| **v > 0.0)
        .map(|(_, r)| r)
        .sum();
    let stat = |wp: i64| wp.min(total - wp);
    let w = stat(observed);
    let mut hits = 0u64;
    for mask in 0u64..(1 << n) {
        let wp: i64 = (0..n)
            .filter(|i| mask >> i & 1 == 1)
            .map(|i| rank2[i])
            .sum();
        if stat(wp) <= w {
            hits += 1;
        }
    }
    hits as f64 / (1u64 << n) as f64
}

/// Random paired samples of length 5..=10 with occasional ties and zero differences.
pub fn wilcoxon_fixture(seed: u64) -> (Vec<f64>, Vec<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.random_range(5..=10);
    let shift = rng.random_range(-0.6..0.6);
    let a: Vec<f64> = (0..n)
        .map(|_| (rng.random_range(0.0..4.0f64) * 4.0).round() / 4.0)
        .collect();
    let b = a
        .iter()
        .map(|&x| {
            if rng.random_bool(0.15) {
                x
            } else {
                x - shift - (rng.random_range(-1.0..1.0f64) * 4.0).round() / 4.0
            }
        })
        .collect();
    (a, b)
}

/// Largest gap between the library p-value and the enumeration oracle over `count` fixtures.
pub fn wilcoxon_oracle_gap(count: u64) -> f64 {
    (0..count)
        .map(|s| {
            let (a, b) = wilcoxon_fixture(s);
            let r = relumix_core::experiments::wilcoxon_signed_rank(&a, &b).unwrap();
            assert!(r.exact);
            (r.p - brute_force_wilcoxon(&a, &b)).abs()
        })
        .fold(0.0, f64::max)
}

/// A complete ablation result over all four variants with made-up per-clip scores.
pub fn synthetic_ablation() -> relumix_core::experiments::AblationResult {
    use relumix_core::config::RunConfig;
    use relumix_core::experiments::{
        compare_reports, AblationResult, PValueMatrix, VariantResult, TABLE_METRICS,
    };
    use relumix_core::metrics::{MetricEntry, MetricsReport};
    use std::collections::BTreeMap;
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let variants: Vec<VariantResult> = Variant::ALL
        .iter()
        .enumerate()
        .map(|(k, &v)| {
            let mut report = MetricsReport::new();
            for (m, base) in [("ssim", 0.6), ("psnr", 20.0), ("perceptual_proxy", 0.3)] {
                let per: BTreeMap<String, f64> = (0..8)
                    .map(|c| {
                        (
                            format!("clip_{c}"),
                            base * (1.0 + 0.05 * k as f64) + rng.random_range(-0.02..0.02),
                        )
                    })
                    .collect();
                report.insert(m.to_string(), MetricEntry::from_values(per, "test"));
            }
            VariantResult {
                variant: v,
                checkpoint: format!("{}/final", v.cli_name()).into(),
                fingerprint: "x".into(),
                final_loss: None,
                metrics: report,
            }
        })
        .collect();
    let mut p_values = BTreeMap::new();
    for m in TABLE_METRICS {
        let n = variants.len();
        let p = (0..n)
            .map(|i| {
                (0..n)
                    .map(|j| {
                        if i == j {
                            1.0
                        } else {
                            compare_reports(&variants[i].metrics, &variants[j].metrics, m)
                                .unwrap()
                                .p
                        }
                    })
                    .collect()
            })
            .collect();
        p_values.insert(
            m.to_string(),
            PValueMatrix {
                variants: Variant::ALL.to_vec(),
                p,
            },
        );
    }
    AblationResult {
        config: RunConfig::default(),
        dataset_fingerprint: "d".into(),
        cases: Vec::new(),
        ground_truth: MetricsReport::new(),
        variants,
        p_values,
    }
}

/// Training setup small enough for a few CPU seconds per step.
pub fn tiny_setup(variant: Variant, steps: usize) -> relumix_core::trainer::TrainSetup {
    use relumix_core::edm::EdmParams;
    use relumix_core::trainer::{TrainConfig, TrainSetup};
    TrainSetup {
        train: TrainConfig {
            lr: 1e-3,
            steps,
            batch: 1,
            frames: 2,
            checkpoint_every: 0,
            log_every: 1,
            ..Default::default()
        },
        model: tiny_config(2, true).with_variant(variant),
        edm: EdmParams {
            steps: 2,
            ..Default::default()
        },
    }
}

/// Run configuration for a full ablation that finishes in seconds: five test clips, two
/// training steps per variant and a two-step sampler.
pub fn tiny_run_config() -> relumix_core::config::RunConfig {
    use relumix_core::config::RunConfig;
    let setup = tiny_setup(Variant::Full, 2);
    let mut cfg = RunConfig {
        data: GenConfig {
            lightings_per_scene: 5,
            ..tiny_gen(21)
        },
        model: setup.model,
        train: setup.train,
        edm: setup.edm,
        ..Default::default()
    };
    cfg.ablation.eval_frames = 4;
    cfg
}

/// Every file under `root` keyed by relative path.
pub fn read_tree(root: &std::path::Path) -> std::collections::BTreeMap<String, Vec<u8>> {
    let mut out = std::collections::BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for e in std::fs::read_dir(&dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(
                    p.strip_prefix(root).unwrap().to_string_lossy().into_owned(),
                    std::fs::read(&p).unwrap(),
                );
            }
        }
    }
    out
}

/// Generates, trains, propagates and scores twice from the same seeds into fresh directories.
/// Returns the number of files compared and the paths that differ; wall-clock files are skipped.
pub fn determinism_trial() -> (usize, Vec<String>) {
    use relumix_core::experiments::run_ablation;
    use relumix_core::scenegen::generate_dataset;
    let cfg = tiny_run_config();
    let trees: Vec<_> = (0..2)
        .map(|_| {
            let dir = tempfile::tempdir().unwrap();
            let (data, out) = (dir.path().join("data"), dir.path().join("out"));
            generate_dataset(&cfg.data, &data, 1).unwrap();
            run_ablation(&cfg, &data, &out).unwrap();
            let mut tree = read_tree(dir.path());
            tree.retain(|k, _| !k.ends_with("runtime.json") && !k.ends_with("train_log.csv"));
            tree
        })
        .collect();
    let (a, b) = (&trees[0], &trees[1]);
    let mut diff: Vec<String> = a
        .keys()
        .chain(b.keys())
        .filter(|k| a.get(*k) != b.get(*k))
        .cloned()
        .collect();
    diff.dedup();
    (a.len(), diff)
}

/// Regenerates a ten-lighting dataset with two worker counts and replays every stored clip
/// from its recorded scene. Returns the number of clips checked or the first discrepancy.
pub fn record_and_replay_trial() -> Result<usize, String> {
    use relumix_core::scenegen::{
        generate_dataset, lighting_presets, object_masks, render_clip, sample_scene,
    };
    let cfg = GenConfig {
        lightings_per_scene: 10,
        ..tiny_gen(8)
    };
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let m = generate_dataset(&cfg, a.path(), 1).map_err(|e| e.to_string())?;
    generate_dataset(&cfg, b.path(), 2).map_err(|e| e.to_string())?;
    if read_tree(a.path()) != read_tree(b.path()) {
        return Err("regenerated dataset differs".into());
    }
    let presets = lighting_presets();
    let mut clips = 0;
    for scene in &m.scenes {
        let spec = m.load_scene_spec(scene.id).map_err(|e| e.to_string())?;
        if scene.lightings.len() != 10 {
            return Err(format!(
                "scene {} has {} lightings",
                scene.id,
                scene.lightings.len()
            ));
        }
        for &l in &scene.lightings {
            let replayed = render_clip(&spec, &presets[l]).map_err(|e| e.to_string())?;
            let stored = m.load_clip(scene.id, l).map_err(|e| e.to_string())?;
            if stored
                .data
                .iter()
                .zip(&replayed.data)
                .any(|(s, r)| (s - r).abs() > 0.5 / 255.0 + 1e-6)
            {
                return Err(format!(
                    "scene {} lighting {l}: stored clip does not replay",
                    scene.id
                ));
            }
            clips += 1;
        }
        let resampled = sample_scene(spec.seed, spec.duration_frames, spec.height, spec.width)
            .map_err(|e| e.to_string())?;
        if resampled != spec {
            return Err(format!("scene {} record differs from its seed", scene.id));
        }
        if (0..spec.duration_frames).any(|t| object_masks(&resampled, t) != object_masks(&spec, t))
        {
            return Err(format!("scene {}: masks differ", scene.id));
        }
    }
    Ok(clips)
}
