//! Four-variant ablation, paired significance tests, and result tables.
//!
//! Test clips pair each test-scene lighting (the target) with the next lighting of the same
//! scene (the source). The propagated clip starts from the target's ground-truth frame 0.

use std::collections::BTreeMap;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use statrs::function::erf::erfc;

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::io;
use crate::metrics::{self, EvalOptions, MetricEntry, MetricsReport};
use crate::propagator::Propagator;
use crate::scenegen::{DatasetManifest, Split};
use crate::trainer::{train, ClipStore, TrainSetup};
use crate::variant::Variant;
use crate::video::VideoClip;

/// Metrics compared across variants in the tables.
pub const TABLE_METRICS: [&str; 3] = ["ssim", "psnr", "perceptual_proxy"];

/// Hex SHA-256 of `bytes`.
pub fn fingerprint(bytes: &[u8]) -> String {
    Sha256::digest(bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TestCase {
    pub id: String,
    pub scene: usize,
    pub target_lighting: usize,
    pub source_lighting: usize,
    pub seed: u64,
}

/// Every (test scene, lighting) pair, sourced from the next lighting of the same scene.
pub fn test_cases(manifest: &DatasetManifest, sample_seed: u64) -> Vec<TestCase> {
    let mut out = Vec::new();
    for scene in manifest.scenes_in(Split::Test) {
        let k = scene.lightings.len();
        for i in 0..k {
            let (tgt, src) = (scene.lightings[i], scene.lightings[(i + 1) % k]);
            out.push(TestCase {
                id: format!("scene_{:03}_light_{tgt:02}_from_{src:02}", scene.id),
                scene: scene.id,
                target_lighting: tgt,
                source_lighting: src,
                seed: sample_seed.wrapping_add(out.len() as u64),
            });
        }
    }
    out
}

/// Hash of the dataset manifest and scene descriptions.
pub fn dataset_fingerprint(manifest: &DatasetManifest) -> Result<String> {
    let mut bytes = Vec::new();
    let path = manifest.root.join("manifest.json");
    bytes.extend(std::fs::read(&path).map_err(|e| Error::io(&path, e))?);
    for s in &manifest.scenes {
        let p = crate::scenegen::scene_dir(&manifest.root, s.id).join("scene.json");
        bytes.extend(std::fs::read(&p).map_err(|e| Error::io(&p, e))?);
    }
    Ok(fingerprint(&bytes))
}

/// Hash of everything the variants must share: data, test cases, seeds and training budget.
pub fn shared_fingerprint(cfg: &RunConfig, dataset: &str, cases: &[TestCase]) -> String {
    let doc = serde_json::json!({
        "dataset": dataset,
        "cases": cases,
        "train": cfg.train,
        "edm": cfg.edm,
        "eval_frames": cfg.ablation.eval_frames,
        "paste_reference": cfg.ablation.paste_reference,
    });
    fingerprint(doc.to_string().as_bytes())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WilcoxonResult {
    /// Two-sided p-value in `(0, 1]`.
    pub p: f64,
    /// `min(W+, W-)`.
    pub w: f64,
    /// Pairs left after dropping zero differences.
    pub n: usize,
    pub exact: bool,
    /// All differences were zero.
    pub degenerate: bool,
}

/// Midranks of `|d|`, 1-based.
fn midranks(abs: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..abs.len()).collect();
    idx.sort_by(|&i, &j| abs[i].total_cmp(&abs[j]));
    let mut ranks = vec![0.0; abs.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && abs[idx[j + 1]] == abs[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

pub const WILCOXON_EXACT_MAX: usize = 12;

/// Two-sided Wilcoxon signed-rank test of paired samples.
pub fn wilcoxon_signed_rank(a: &[f64], b: &[f64]) -> Result<WilcoxonResult> {
    if a.len() != b.len() {
        return Err(Error::data(
            None,
            format!(
                "paired samples differ in length: {} vs {}",
                a.len(),
                b.len()
            ),
        ));
    }
    if a.len() < 5 {
        return Err(Error::data(
            None,
            format!("need at least 5 pairs, got {}", a.len()),
        ));
    }
    let d: Vec<f64> = a
        .iter()
        .zip(b)
        .map(|(x, y)| x - y)
        .filter(|v| *v != 0.0)
        .collect();
    let n = d.len();
    if n == 0 {
        return Ok(WilcoxonResult {
            p: 1.0,
            w: 0.0,
            n: 0,
            exact: true,
            degenerate: true,
        });
    }
    let abs: Vec<f64> = d.iter().map(|v| v.abs()).collect();
    let ranks = midranks(&abs);
    let w_plus: f64 = d
        .iter()
        .zip(&ranks)
        .filter(|(v, _)| **v > 0.0)
        .map(|(_, r)| r)
        .sum();
    let total = (n * (n + 1)) as f64 / 2.0;
    let w = w_plus.min(total - w_plus);
    if n <= WILCOXON_EXACT_MAX {
        let mut hits = 0u64;
        for mask in 0u32..(1u32 << n) {
            let wp: f64 = (0..n)
                .filter(|i| mask >> i & 1 == 1)
                .map(|i| ranks[i])
                .sum();
            if wp.min(total - wp) <= w + 1e-9 {
                hits += 1;
            }
        }
        let p = (hits as f64 / (1u64 << n) as f64).min(1.0);
        return Ok(WilcoxonResult {
            p,
            w,
            n,
            exact: true,
            degenerate: false,
        });
    }
    let nf = n as f64;
    let mean = nf * (nf + 1.0) / 4.0;
    let mut tie = 0.0;
    let mut sorted = abs.clone();
    sorted.sort_by(|x, y| x.total_cmp(y));
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && sorted[j + 1] == sorted[i] {
            j += 1;
        }
        let t = (j - i + 1) as f64;
        tie += t * t * t - t;
        i = j + 1;
    }
    let var = nf * (nf + 1.0) * (2.0 * nf + 1.0) / 24.0 - tie / 48.0;
    let z = ((mean - w - 0.5).max(0.0)) / var.sqrt();
    let p = erfc(z / std::f64::consts::SQRT_2).clamp(f64::MIN_POSITIVE, 1.0);
    Ok(WilcoxonResult {
        p,
        w,
        n,
        exact: false,
        degenerate: false,
    })
}

/// Paired test of two reports on one metric; clip ids must match.
pub fn compare_reports(
    a: &MetricsReport,
    b: &MetricsReport,
    metric: &str,
) -> Result<WilcoxonResult> {
    let missing =
        |which: &str| Error::data(None, format!("report {which} has no metric `{metric}`"));
    let ea = a.get(metric).ok_or_else(|| missing("a"))?;
    let eb = b.get(metric).ok_or_else(|| missing("b"))?;
    if ea.per_clip.keys().ne(eb.per_clip.keys()) {
        return Err(Error::data(None, "reports cover different clip ids"));
    }
    let va: Vec<f64> = ea.per_clip.values().copied().collect();
    let vb: Vec<f64> = eb.per_clip.values().copied().collect();
    wilcoxon_signed_rank(&va, &vb)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PValueMatrix {
    pub variants: Vec<Variant>,
    /// `p[i][j]` compares variant `i` with variant `j`; the diagonal is 1.
    pub p: Vec<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VariantResult {
    pub variant: Variant,
    /// Relative to the output directory.
    pub checkpoint: PathBuf,
    pub fingerprint: String,
    /// Mean training objective over the final 10% of steps.
    pub final_loss: Option<f64>,
    pub metrics: MetricsReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationResult {
    pub config: RunConfig,
    pub dataset_fingerprint: String,
    pub cases: Vec<TestCase>,
    pub ground_truth: MetricsReport,
    pub variants: Vec<VariantResult>,
    pub p_values: BTreeMap<String, PValueMatrix>,
}

impl AblationResult {
    pub fn variant(&self, v: Variant) -> Option<&VariantResult> {
        self.variants.iter().find(|r| r.variant == v)
    }

    pub fn p_value(&self, metric: &str, a: Variant, b: Variant) -> Option<f64> {
        let m = self.p_values.get(metric)?;
        let i = m.variants.iter().position(|&v| v == a)?;
        let j = m.variants.iter().position(|&v| v == b)?;
        Some(m.p[i][j])
    }
}

/// Wall-clock seconds per variant; kept apart from the deterministic result.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Runtime {
    pub train_seconds: BTreeMap<String, Option<f64>>,
    pub eval_seconds: BTreeMap<String, f64>,
}

fn window(clip: &VideoClip, frames: usize) -> Result<VideoClip> {
    clip.window(0, frames.min(clip.frames))
}

fn train_or_resume(
    setup: &TrainSetup,
    store: &ClipStore,
    dir: &Path,
    dataset: &str,
) -> Result<(PathBuf, Option<f64>, Option<f64>)> {
    let setup_doc = serde_json::json!({"train": setup.train, "model": setup.model, "edm": setup.edm, "dataset": dataset});
    let setup_path = dir.join("setup.json");
    let final_ckpt = dir.join("final");
    let (json, _) = io::checkpoint_paths(&final_ckpt);
    if json.exists() && setup_path.exists() {
        let prev: serde_json::Value = io::read_json(&setup_path)?;
        if prev == setup_doc {
            log::info!("reusing {}", final_ckpt.display());
            let summary: serde_json::Value = io::read_json(&dir.join("summary.json"))?;
            return Ok((final_ckpt, None, summary["final_loss"].as_f64()));
        }
    }
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    io::write_json(&setup_path, &setup_doc)?;
    let start = Instant::now();
    let outcome = train(setup, store, dir)?;
    let tail = (outcome.losses.len() / 10).max(1);
    let final_loss = outcome.losses[outcome.losses.len() - tail..]
        .iter()
        .sum::<f64>()
        / tail as f64;
    io::write_json(
        &dir.join("summary.json"),
        &serde_json::json!({"final_loss": final_loss}),
    )?;
    Ok((
        outcome.final_checkpoint,
        Some(start.elapsed().as_secs_f64()),
        Some(final_loss),
    ))
}

/// Trains every configured variant, propagates and scores all test clips, and writes
/// `result.json`, `runtime.json`, per-variant reports and the tables into `out_dir`.
pub fn run_ablation(cfg: &RunConfig, data_root: &Path, out_dir: &Path) -> Result<AblationResult> {
    cfg.validate()?;
    let manifest = DatasetManifest::load(data_root)?;
    if manifest.config != cfg.data {
        return Err(Error::config(
            "data",
            "dataset on disk was generated with a different data config",
        ));
    }
    let dataset = dataset_fingerprint(&manifest)?;
    let cases = test_cases(&manifest, cfg.ablation.sample_seed);
    if cases.len() < 5 {
        return Err(Error::data(
            Some(data_root.to_path_buf()),
            format!("only {} test clips; need at least 5", cases.len()),
        ));
    }
    let shared = shared_fingerprint(cfg, &dataset, &cases);
    let store = ClipStore::load(&manifest, Split::Train)?;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;

    let frames = cfg.ablation.eval_frames;
    let mut truth = BTreeMap::new();
    let mut inputs = BTreeMap::new();
    for c in &cases {
        truth.insert(
            c.id.clone(),
            window(&manifest.load_clip(c.scene, c.target_lighting)?, frames)?,
        );
        inputs.insert(
            c.id.clone(),
            window(&manifest.load_clip(c.scene, c.source_lighting)?, frames)?,
        );
    }
    let opts = EvalOptions {
        angle_std: cfg.ablation.angle_std,
    };
    let ground_truth = metrics::evaluate(&truth, None, None, &opts)?;

    let mut runtime = Runtime::default();
    let mut variants = Vec::new();
    for &v in &cfg.ablation.variants {
        let dir = out_dir.join(v.cli_name());
        let setup = cfg.setup_for(v);
        log::info!("variant {v}: training");
        let (ckpt, train_s, final_loss) =
            train_or_resume(&setup, &store, &dir.join("train"), &dataset)?;
        let mut prop = Propagator::from_checkpoint(io::load_checkpoint(&ckpt)?, cfg.edm.clone())?;
        prop.paste_reference = cfg.ablation.paste_reference;
        log::info!("variant {v}: propagating {} clips", cases.len());
        let start = Instant::now();
        let generated: Vec<VideoClip> = cases
            .par_iter()
            .map(|c| prop.propagate(&inputs[&c.id], &truth[&c.id].frame(0), c.seed))
            .collect::<Result<_>>()?;
        let mut preds = BTreeMap::new();
        for (c, clip) in cases.iter().zip(generated) {
            io::write_clip(&clip, &dir.join("clips").join(&c.id))?;
            preds.insert(c.id.clone(), clip);
        }
        let mut report = metrics::evaluate(&preds, Some(&truth), None, &opts)?;
        let (mut to_ref, mut to_src) = (BTreeMap::new(), BTreeMap::new());
        for c in &cases {
            let f0 = preds[&c.id].frame(0);
            to_ref.insert(
                c.id.clone(),
                metrics::perceptual_proxy(&f0, &truth[&c.id].frame(0))?,
            );
            to_src.insert(
                c.id.clone(),
                metrics::perceptual_proxy(&f0, &inputs[&c.id].frame(0))?,
            );
        }
        report.insert(
            "anchor_reference_distance".into(),
            MetricEntry::from_values(to_ref, metrics::PROXY_VERSION),
        );
        report.insert(
            "anchor_source_distance".into(),
            MetricEntry::from_values(to_src, metrics::PROXY_VERSION),
        );
        io::write_json(&dir.join("metrics.json"), &report)?;
        runtime.train_seconds.insert(v.label().into(), train_s);
        runtime
            .eval_seconds
            .insert(v.label().into(), start.elapsed().as_secs_f64());
        io::write_json(&out_dir.join("runtime.json"), &runtime)?;
        let checkpoint = ckpt
            .strip_prefix(out_dir)
            .map(Path::to_path_buf)
            .unwrap_or(ckpt);
        variants.push(VariantResult {
            variant: v,
            checkpoint,
            fingerprint: shared.clone(),
            final_loss,
            metrics: report,
        });
    }
    if variants.iter().any(|r| r.fingerprint != shared) {
        return Err(Error::data(
            None,
            "variants were not run on identical data, seeds and budgets",
        ));
    }

    let mut p_values = BTreeMap::new();
    for metric in TABLE_METRICS {
        let n = variants.len();
        let mut p = vec![vec![1.0; n]; n];
        for i in 0..n {
            for j in i + 1..n {
                let r = compare_reports(&variants[i].metrics, &variants[j].metrics, metric)?;
                p[i][j] = r.p;
                p[j][i] = r.p;
            }
        }
        p_values.insert(
            metric.to_string(),
            PValueMatrix {
                variants: variants.iter().map(|r| r.variant).collect(),
                p,
            },
        );
    }
    let result = AblationResult {
        config: cfg.clone(),
        dataset_fingerprint: dataset,
        cases,
        ground_truth,
        variants,
        p_values,
    };
    io::write_json(&out_dir.join("result.json"), &result)?;
    emit_tables(&result, out_dir)?;
    Ok(result)
}

pub fn format_mean_std(e: &MetricEntry) -> String {
    format!("{:.3} ± {:.3}", e.mean, e.std)
}

fn table1(result: &AblationResult) -> Result<String> {
    let mut out = String::from("variant,ssim,psnr,perceptual_proxy\n");
    for r in &result.variants {
        let cells = TABLE_METRICS
            .iter()
            .map(|m| {
                r.metrics
                    .get(*m)
                    .map(format_mean_std)
                    .ok_or_else(|| Error::data(None, format!("variant {} lacks {m}", r.variant)))
            })
            .collect::<Result<Vec<_>>>()?;
        out.push_str(&format!("{},{}\n", r.variant, cells.join(",")));
    }
    Ok(out)
}

fn table3(result: &AblationResult) -> Result<String> {
    let mut out = String::from("comparison,ssim,psnr,perceptual_proxy\n");
    let vs = &result.variants;
    for j in (0..vs.len()).rev() {
        for i in (0..j).rev() {
            let (a, b) = (&vs[j], &vs[i]);
            let mut cells = Vec::new();
            for m in TABLE_METRICS {
                let p = result
                    .p_value(m, a.variant, b.variant)
                    .ok_or_else(|| Error::data(None, format!("no p-value for {m}")))?;
                let diff = a.metrics[m].mean - b.metrics[m].mean;
                cells.push(format!("{diff:+.3} ({p:.3e})"));
            }
            out.push_str(&format!(
                "{} vs {},{}\n",
                a.variant,
                b.variant,
                cells.join(",")
            ));
        }
    }
    Ok(out)
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))
}

/// Writes `table1.csv`, `table3.csv` and one box plot per table metric.
pub fn emit_tables(result: &AblationResult, out_dir: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut written = Vec::new();
    let t1 = out_dir.join("table1.csv");
    write_text(&t1, &table1(result)?)?;
    written.push(t1);
    let t3 = out_dir.join("table3.csv");
    write_text(&t3, &table3(result)?)?;
    written.push(t3);
    for m in TABLE_METRICS {
        let groups: Vec<Vec<f64>> = result
            .variants
            .iter()
            .map(|r| {
                r.metrics
                    .get(m)
                    .map(|e| e.per_clip.values().copied().collect())
                    .unwrap_or_default()
            })
            .collect();
        let path = out_dir.join(format!("boxplot_{m}.png"));
        io::write_png(&path, &box_plot(&groups, 360, 240))?;
        written.push(path);
    }
    Ok(written)
}

const PALETTE: [[f32; 3]; 4] = [
    [0.85, 0.37, 0.01],
    [0.46, 0.44, 0.70],
    [0.11, 0.62, 0.47],
    [0.91, 0.16, 0.54],
];

fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// Box-and-whisker plot, one box per group left to right, sharing a min-max y range.
pub fn box_plot(groups: &[Vec<f64>], width: usize, height: usize) -> crate::video::Frame {
    let mut px = vec![1.0f32; width * height * 3];
    let mut put = |x: usize, y: usize, c: [f32; 3]| {
        if x < width && y < height {
            px[(y * width + x) * 3..(y * width + x) * 3 + 3].copy_from_slice(&c);
        }
    };
    let all: Vec<f64> = groups
        .iter()
        .flatten()
        .copied()
        .filter(|v| v.is_finite())
        .collect();
    let (lo, hi) = all
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| {
            (a.min(v), b.max(v))
        });
    let margin = 20usize.min(width / 4).min(height / 4);
    let plot_h = height - 2 * margin;
    let to_y = |v: f64| {
        let t = if hi > lo { (v - lo) / (hi - lo) } else { 0.5 };
        margin + ((1.0 - t) * plot_h as f64).round() as usize
    };
    let black = [0.0; 3];
    for y in margin..=margin + plot_h {
        put(margin, y, black);
    }
    for x in margin..width - margin {
        put(x, margin + plot_h, black);
    }
    let slot = (width - 2 * margin) / groups.len().max(1);
    for (g, vals) in groups.iter().enumerate() {
        let mut s: Vec<f64> = vals.iter().copied().filter(|v| v.is_finite()).collect();
        if s.is_empty() {
            continue;
        }
        s.sort_by(|a, b| a.total_cmp(b));
        let color = PALETTE[g % PALETTE.len()];
        let (x0, x1) = (
            margin + g * slot + slot / 4,
            margin + g * slot + 3 * slot / 4,
        );
        let xm = (x0 + x1) / 2;
        let (q1, med, q3) = (
            to_y(quantile(&s, 0.25)),
            to_y(quantile(&s, 0.5)),
            to_y(quantile(&s, 0.75)),
        );
        for y in q3..=q1 {
            for x in x0..=x1 {
                put(x, y, color);
            }
        }
        for x in x0..=x1 {
            put(x, med, black);
            put(x, q1, black);
            put(x, q3, black);
        }
        for y in q3..=q1 {
            put(x0, y, black);
            put(x1, y, black);
        }
        let (top, bottom) = (to_y(s[s.len() - 1]), to_y(s[0]));
        for y in top..q3 {
            put(xm, y, black);
        }
        for y in q1..=bottom {
            put(xm, y, black);
        }
        for x in xm.saturating_sub(4)..=xm + 4 {
            put(x, top, black);
            put(x, bottom, black);
        }
    }
    crate::video::Frame::new(height, width, px).expect("plot buffer matches its size")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn wilcoxon_degenerate_and_shift() {
        let a = [1.0, 2.0, 3.0, 4.0, 5.0];
        let r = wilcoxon_signed_rank(&a, &a).unwrap();
        assert!(r.degenerate && r.p == 1.0);
        let b: Vec<f64> = (1..=10).map(|v| v as f64 * 1.1).collect();
        let a: Vec<f64> = b
            .iter()
            .enumerate()
            .map(|(i, v)| v + 1.0 + i as f64 * 0.01)
            .collect();
        let r = wilcoxon_signed_rank(&a, &b).unwrap();
        assert!((r.p - 2.0 / 1024.0).abs() < 1e-15, "{r:?}");
        assert!(wilcoxon_signed_rank(&a[..4], &b[..4]).is_err());
    }

    #[test]
    fn wilcoxon_normal_path() {
        let a: Vec<f64> = (0..20)
            .map(|i| i as f64 + if i % 3 == 0 { -0.5 } else { 0.7 })
            .collect();
        let b: Vec<f64> = (0..20).map(|i| i as f64).collect();
        let r = wilcoxon_signed_rank(&a, &b).unwrap();
        assert!(!r.exact && r.p > 0.0 && r.p <= 1.0);
        let flipped = wilcoxon_signed_rank(&b, &a).unwrap();
        assert_eq!(r.p, flipped.p);
    }

    #[test]
    fn box_plot_size() {
        let f = box_plot(&[vec![0.1, 0.2, 0.3], vec![0.5; 4]], 200, 120);
        assert_eq!((f.width, f.height), (200, 120));
    }
}
