//! Training pairs built by frame replacement, augmentation, the weighted diffusion loss,
//! top-fraction loss filtering, AdamW and the training loop.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use relumix_autograd::{Float, Gradients, Graph, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::conditioning::{assemble_input, context, Condition};
use crate::denoiser::{Bound, Denoiser, DenoiserConfig, ForwardOptions, Params};
use crate::edm::{loss_weight, sample_training_sigma, EdmParams, Precond};
use crate::error::{Error, Result};
use crate::io;
use crate::propagator::frame_replacement;
use crate::scenegen::{DatasetManifest, Split};
use crate::video::{normalize, Frame, VideoClip};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub betas: [f64; 2],
    pub eps: f64,
    pub weight_decay: f64,
    pub grad_clip: f64,
    pub steps: usize,
    /// Clips per step.
    pub batch: usize,
    /// Frames per training clip; must equal `model.frames`.
    pub frames: usize,
    pub reversal_prob: f64,
    pub topk_fraction: f64,
    /// Last step (exclusive) that uses the top-fraction filter; `null` means `steps / 2`.
    pub topk_until_step: Option<usize>,
    /// Probability of training a clip on the unconditional branch.
    pub cond_drop_prob: f64,
    pub seed: u64,
    /// Checkpoint every this many steps (0 disables intermediate checkpoints).
    pub checkpoint_every: usize,
    pub log_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-5,
            betas: [0.9, 0.95],
            eps: 1e-8,
            weight_decay: 0.01,
            grad_clip: 1.0,
            steps: 5000,
            batch: 2,
            frames: 8,
            reversal_prob: 0.2,
            topk_fraction: 0.1,
            topk_until_step: None,
            cond_drop_prob: 0.1,
            seed: 0,
            checkpoint_every: 1000,
            log_every: 50,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, prefix: &str) -> Result<()> {
        let key = |k: &str| format!("{prefix}{k}");
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::config(key("lr"), "must be positive"));
        }
        for (i, b) in self.betas.iter().enumerate() {
            if !(0.0..1.0).contains(b) {
                return Err(Error::config(
                    key(&format!("betas[{i}]")),
                    "must lie in [0, 1)",
                ));
            }
        }
        if !(self.eps.is_finite() && self.eps > 0.0) {
            return Err(Error::config(key("eps"), "must be positive"));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return Err(Error::config(key("weight_decay"), "must be non-negative"));
        }
        if !(self.grad_clip.is_finite() && self.grad_clip > 0.0) {
            return Err(Error::config(key("grad_clip"), "must be positive"));
        }
        if self.batch == 0 {
            return Err(Error::config(key("batch"), "must be positive"));
        }
        if self.frames < 2 {
            return Err(Error::config(key("frames"), "must be at least 2"));
        }
        if !(0.0..=1.0).contains(&self.reversal_prob) {
            return Err(Error::config(key("reversal_prob"), "must lie in [0, 1]"));
        }
        if !(self.topk_fraction > 0.0 && self.topk_fraction <= 1.0) {
            return Err(Error::config(key("topk_fraction"), "must lie in (0, 1]"));
        }
        if !(0.0..=1.0).contains(&self.cond_drop_prob) {
            return Err(Error::config(key("cond_drop_prob"), "must lie in [0, 1]"));
        }
        if self.log_every == 0 {
            return Err(Error::config(key("log_every"), "must be positive"));
        }
        Ok(())
    }

    pub fn topk_until(&self) -> usize {
        self.topk_until_step.unwrap_or(self.steps / 2)
    }
}

/// One relighting example. `input[0] == target[0] == reference` always holds.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainingPair {
    /// `V'_input`: the source window with its first frame replaced by the reference.
    pub input: VideoClip,
    pub reference: Frame,
    pub target: VideoClip,
    /// The unmodified source window.
    pub source: VideoClip,
    pub scene: usize,
    pub l_src: usize,
    pub l_tgt: usize,
}

impl TrainingPair {
    /// Applies frame replacement to aligned source and target windows.
    pub fn new(
        source: VideoClip,
        target: VideoClip,
        scene: usize,
        l_src: usize,
        l_tgt: usize,
    ) -> Result<Self> {
        if l_src == l_tgt {
            return Err(Error::data(
                None,
                format!("source and target lighting are both {l_src}"),
            ));
        }
        if source.frames != target.frames
            || source.height != target.height
            || source.width != target.width
        {
            return Err(Error::Shape(
                "source and target windows differ in shape".into(),
            ));
        }
        let reference = target.frame(0);
        let input = frame_replacement(&source, &reference)?;
        Ok(Self {
            input,
            reference,
            target,
            source,
            scene,
            l_src,
            l_tgt,
        })
    }
}

/// Clips of one split held in memory, keyed by `(scene, lighting)`.
#[derive(Clone, Debug)]
pub struct ClipStore {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    scenes: Vec<(usize, Vec<usize>)>,
    clips: BTreeMap<(usize, usize), VideoClip>,
}

impl ClipStore {
    pub fn load(manifest: &DatasetManifest, split: Split) -> Result<Self> {
        let mut scenes = Vec::new();
        let mut clips = BTreeMap::new();
        for s in manifest.scenes_in(split) {
            if s.lightings.len() < 2 {
                return Err(Error::data(
                    manifest.root.join("manifest.json"),
                    format!("scene {} has fewer than 2 lightings", s.id),
                ));
            }
            for &l in &s.lightings {
                clips.insert((s.id, l), manifest.load_clip(s.id, l)?);
            }
            scenes.push((s.id, s.lightings.clone()));
        }
        if scenes.is_empty() {
            return Err(Error::data(
                manifest.root.join("manifest.json"),
                format!("no scenes in the {split:?} split"),
            ));
        }
        Ok(Self {
            frames: manifest.frames,
            height: manifest.height,
            width: manifest.width,
            scenes,
            clips,
        })
    }

    /// Builds a store from explicit clips; every scene needs at least two lightings.
    pub fn from_clips(clips: BTreeMap<(usize, usize), VideoClip>) -> Result<Self> {
        let first = clips
            .values()
            .next()
            .ok_or_else(|| Error::data(None, "no clips"))?;
        let (frames, height, width) = (first.frames, first.height, first.width);
        let mut scenes: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for (&(s, l), c) in &clips {
            if (c.frames, c.height, c.width) != (frames, height, width) {
                return Err(Error::data(
                    None,
                    format!("clip ({s}, {l}) has a different shape"),
                ));
            }
            scenes.entry(s).or_default().push(l);
        }
        if let Some((s, _)) = scenes.iter().find(|(_, ls)| ls.len() < 2) {
            return Err(Error::data(
                None,
                format!("scene {s} has fewer than 2 lightings"),
            ));
        }
        Ok(Self {
            frames,
            height,
            width,
            scenes: scenes.into_iter().collect(),
            clips,
        })
    }

    pub fn clip(&self, scene: usize, lighting: usize) -> Option<&VideoClip> {
        self.clips.get(&(scene, lighting))
    }

    pub fn scenes(&self) -> &[(usize, Vec<usize>)] {
        &self.scenes
    }
}

/// Draws a scene, two distinct lightings and a window, then applies frame replacement.
pub fn build_training_pair<R: Rng + ?Sized>(
    store: &ClipStore,
    rng: &mut R,
    frames: usize,
) -> Result<TrainingPair> {
    if store.frames < frames {
        return Err(Error::data(
            None,
            format!("clips have {} frames, need {frames}", store.frames),
        ));
    }
    let (scene, lightings) = &store.scenes[rng.random_range(0..store.scenes.len())];
    let i = rng.random_range(0..lightings.len());
    let mut j = rng.random_range(0..lightings.len() - 1);
    if j >= i {
        j += 1;
    }
    let (l_src, l_tgt) = (lightings[i], lightings[j]);
    let start = rng.random_range(0..=store.frames - frames);
    let source = store.clips[&(*scene, l_src)].window(start, frames)?;
    let target = store.clips[&(*scene, l_tgt)].window(start, frames)?;
    TrainingPair::new(source, target, *scene, l_src, l_tgt)
}

/// With probability `p`, reverses both windows in time and rebuilds the pair.
pub fn temporal_reversal<R: Rng + ?Sized>(
    pair: TrainingPair,
    rng: &mut R,
    p: f64,
) -> Result<TrainingPair> {
    if !rng.random_bool(p) {
        return Ok(pair);
    }
    TrainingPair::new(
        pair.source.reversed(),
        pair.target.reversed(),
        pair.scene,
        pair.l_src,
        pair.l_tgt,
    )
}

/// Mean of the `ceil(fraction * n)` largest values, ties broken toward lower indices.
pub fn topk_loss_filter(losses: &[f64], fraction: f64) -> Result<f64> {
    if losses.is_empty() {
        return Err(Error::data(
            None,
            "top-fraction filter on an empty loss array",
        ));
    }
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::config("train.topk_fraction", "must lie in (0, 1]"));
    }
    let k = topk_count(losses.len(), fraction);
    let mut g = Graph::<f64>::inference();
    let x = g.constant(Tensor::from_vec(&[losses.len()], losses.to_vec()));
    let m = g.topk_mean(x, k);
    Ok(g.value(m).data()[0])
}

pub fn topk_count(n: usize, fraction: f64) -> usize {
    ((fraction * n as f64).ceil() as usize).clamp(1, n)
}

/// Per-element weighted squared error `lambda * (d - target)^2`.
pub fn loss_from_denoised(denoised: &[f64], target: &[f64], lambda: f64) -> Vec<f64> {
    denoised
        .iter()
        .zip(target)
        .map(|(d, t)| lambda * (d - t) * (d - t))
        .collect()
}

/// How per-element losses are reduced to the scalar objective.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Reduction {
    Mean,
    TopFraction(f64),
}

/// A prepared minibatch: network inputs and regression targets for `clips` clips.
#[derive(Clone, Debug)]
pub struct LossBatch<T> {
    pub clips: usize,
    pub sigmas: Vec<f64>,
    /// `[clips * frames, h, w, in_channels]`.
    pub input: Tensor<T>,
    /// `[clips * frames, tokens, context_dim]`.
    pub context: Tensor<T>,
    /// `c_skip * x_noisy - target`, `[clips, frames * h * w * 3]`.
    pub offset: Tensor<T>,
}

/// Noises the targets and assembles inputs for each clip.
///
/// `noise[i]` is the standard normal draw for clip `i`; `dropped[i]` selects the
/// unconditional branch.
pub fn prepare_batch(
    model: &Denoiser,
    params: &Params<f32>,
    pairs: &[TrainingPair],
    sigmas: &[f64],
    noise: &[Vec<f64>],
    dropped: &[bool],
) -> Result<LossBatch<f32>> {
    let cfg = model.config();
    let (frames, h, w) = (
        pairs[0].target.frames,
        pairs[0].target.height,
        pairs[0].target.width,
    );
    if frames != cfg.frames {
        return Err(Error::Shape(format!(
            "pairs have {frames} frames, model expects {}",
            cfg.frames
        )));
    }
    let mut input = Vec::new();
    let mut ctx = Vec::new();
    let mut offset = Vec::new();
    for (i, pair) in pairs.iter().enumerate() {
        let pc = Precond::new(sigmas[i])?;
        let target: Vec<f64> = pair
            .target
            .data
            .iter()
            .map(|&v| normalize(v) as f64)
            .collect();
        let noisy: Vec<f64> = target
            .iter()
            .zip(&noise[i])
            .map(|(t, e)| t + sigmas[i] * e)
            .collect();
        let scaled: Vec<f32> = noisy.iter().map(|v| (pc.c_in * v) as f32).collect();
        let cond = if dropped[i] {
            None
        } else {
            Some(Condition::new(&pair.input, &pair.reference)?)
        };
        input.extend(assemble_input(cfg.use_ef, &scaled, cond.as_ref()));
        ctx.extend(context(model, params, &scaled, cond.as_ref(), frames, h, w)?.into_data());
        offset.extend(
            noisy
                .iter()
                .zip(&target)
                .map(|(x, t)| (pc.c_skip * x - t) as f32),
        );
    }
    let n = pairs.len();
    let tokens = model.encoder().tokens_for(h, w);
    Ok(LossBatch {
        clips: n,
        sigmas: sigmas.to_vec(),
        input: Tensor::from_vec(&[n * frames, h, w, cfg.in_channels], input),
        context: Tensor::from_vec(&[n * frames, tokens, cfg.context_dim], ctx),
        offset: Tensor::from_vec(&[n, frames * h * w * 3], offset),
    })
}

/// Records the loss on `g`; returns `(scalar loss, per-element losses [clips, m])`.
///
/// `weight_scale` multiplies every clip's loss weight.
pub fn diffusion_loss<T: Float>(
    g: &mut Graph<T>,
    bound: &Bound,
    model: &Denoiser,
    batch: &LossBatch<T>,
    reduction: Reduction,
    weight_scale: f64,
) -> Result<(Var, Var)> {
    let mut c_noise = Vec::with_capacity(batch.clips);
    let mut c_out = Vec::with_capacity(batch.clips);
    let mut lambda = Vec::with_capacity(batch.clips);
    for &s in &batch.sigmas {
        let pc = Precond::new(s)?;
        c_noise.push(pc.c_noise);
        c_out.push(T::lit(pc.c_out));
        lambda.push(T::lit(loss_weight(s)? * weight_scale));
    }
    let x = g.constant(batch.input.clone());
    let ctx = g.constant(batch.context.clone());
    let raw = model.forward(g, bound, x, &c_noise, Some(ctx), &ForwardOptions::default())?;
    let m = batch.offset.shape()[1];
    let raw = g.reshape(raw, &[batch.clips, m]);
    let c_out = g.constant(Tensor::from_vec(&[batch.clips], c_out));
    let scaled = g.scale_rows(raw, c_out);
    let offset = g.constant(batch.offset.clone());
    let err = g.add(scaled, offset);
    let sq = g.mul(err, err);
    let lambda = g.constant(Tensor::from_vec(&[batch.clips], lambda));
    let per_element = g.scale_rows(sq, lambda);
    let loss = match reduction {
        Reduction::Mean => g.mean(per_element),
        Reduction::TopFraction(f) => {
            let k = topk_count(batch.clips * m, f);
            g.topk_mean(per_element, k)
        }
    };
    Ok((loss, per_element))
}

/// AdamW with decoupled weight decay; updates trainable parameters only.
#[derive(Clone, Debug)]
pub struct AdamW<T> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub step: u64,
    m: Vec<Option<Vec<T>>>,
    v: Vec<Option<Vec<T>>>,
}

impl<T: Float> AdamW<T> {
    pub fn new(lr: f64, betas: [f64; 2], eps: f64, weight_decay: f64, n_params: usize) -> Self {
        Self {
            lr,
            beta1: betas[0],
            beta2: betas[1],
            eps,
            weight_decay,
            step: 0,
            m: vec![None; n_params],
            v: vec![None; n_params],
        }
    }

    /// One update: `p -= lr * wd * p`, then the bias-corrected Adam step.
    pub fn update(&mut self, params: &mut Params<T>, grads: &[Option<Tensor<T>>]) {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        let (b1, b2) = (T::lit(self.beta1), T::lit(self.beta2));
        let (one, eps) = (T::one(), T::lit(self.eps));
        let decay = T::lit(1.0 - self.lr * self.weight_decay);
        let step_size = T::lit(self.lr / bc1);
        let bc2_sqrt = T::lit(bc2.sqrt());
        for (i, p) in params.entries_mut().iter_mut().enumerate() {
            let Some(grad) = grads[i].as_ref().filter(|_| p.trainable) else {
                continue;
            };
            let m = self.m[i].get_or_insert_with(|| vec![T::zero(); grad.len()]);
            let v = self.v[i].get_or_insert_with(|| vec![T::zero(); grad.len()]);
            for (((w, &gr), mi), vi) in p
                .tensor
                .data_mut()
                .iter_mut()
                .zip(grad.data())
                .zip(m.iter_mut())
                .zip(v.iter_mut())
            {
                *w *= decay;
                *mi = b1 * *mi + (one - b1) * gr;
                *vi = b2 * *vi + (one - b2) * gr * gr;
                let denom = vi.sqrt() / bc2_sqrt + eps;
                *w -= step_size * *mi / denom;
            }
        }
    }
}

/// Gradients of every parameter in store order (`None` for frozen ones).
pub fn collect_grads<T: Float>(
    params: &Params<T>,
    bound: &Bound,
    mut grads: Gradients<T>,
) -> Vec<Option<Tensor<T>>> {
    params
        .entries()
        .iter()
        .zip(bound.vars())
        .map(|(p, &v)| {
            if p.trainable {
                grads
                    .take(v)
                    .or_else(|| Some(Tensor::zeros(p.tensor.shape())))
            } else {
                None
            }
        })
        .collect()
}

pub fn global_norm<T: Float>(grads: &[Option<Tensor<T>>]) -> f64 {
    grads
        .iter()
        .flatten()
        .map(|g| g.sq_norm())
        .sum::<f64>()
        .sqrt()
}

/// Rescales `grads` so their global norm is at most `max_norm`; returns the norm before clipping.
pub fn clip_grad_norm<T: Float>(grads: &mut [Option<Tensor<T>>], max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if norm > max_norm {
        let s = T::lit(max_norm / (norm + 1e-6));
        for g in grads.iter_mut().flatten() {
            for v in g.data_mut() {
                *v *= s;
            }
        }
    }
    norm
}

/// Everything a training run needs besides data.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainSetup {
    pub train: TrainConfig,
    pub model: DenoiserConfig,
    pub edm: EdmParams,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub final_checkpoint: PathBuf,
    pub checkpoints: Vec<PathBuf>,
    pub log: PathBuf,
    /// Scalar objective of every step.
    pub losses: Vec<f64>,
}

/// Random stream for step `step`: pair order depends only on `(seed, step)`.
fn step_rng(seed: u64, step: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(step as u64 + 1);
    rng
}

/// Runs the optimization loop and writes checkpoints and a CSV log into `out_dir`.
pub fn train(setup: &TrainSetup, store: &ClipStore, out_dir: &Path) -> Result<TrainOutcome> {
    let TrainSetup {
        train: cfg,
        model: model_cfg,
        edm,
    } = setup;
    cfg.validate("train.")?;
    edm.validate("edm.")?;
    if cfg.frames != model_cfg.frames {
        return Err(Error::config(
            "train.frames",
            format!("must equal model.frames ({})", model_cfg.frames),
        ));
    }
    let model = Denoiser::new(model_cfg.clone())?;
    let mut params = model.init_params::<f32>(cfg.seed);
    let mut opt = AdamW::<f32>::new(cfg.lr, cfg.betas, cfg.eps, cfg.weight_decay, params.len());
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;

    let log_path = out_dir.join("train_log.csv");
    let mut log = std::fs::File::create(&log_path).map_err(|e| Error::io(&log_path, e))?;
    writeln!(log, "step,loss,sigma_mean,grad_norm,wall_ms").map_err(|e| Error::io(&log_path, e))?;

    let mut losses = Vec::with_capacity(cfg.steps);
    let mut checkpoints = Vec::new();
    let (mut win_loss, mut win_sigma, mut win_norm, mut win_n) = (0.0, 0.0, 0.0, 0usize);
    let start = Instant::now();
    let elements = cfg.frames * store.height * store.width * 3;
    for step in 0..cfg.steps {
        let mut rng = step_rng(cfg.seed, step);
        let mut pairs = Vec::with_capacity(cfg.batch);
        let mut sigmas = Vec::with_capacity(cfg.batch);
        let mut noise = Vec::with_capacity(cfg.batch);
        let mut dropped = Vec::with_capacity(cfg.batch);
        for _ in 0..cfg.batch {
            let pair = build_training_pair(store, &mut rng, cfg.frames)?;
            pairs.push(temporal_reversal(pair, &mut rng, cfg.reversal_prob)?);
            sigmas.push(sample_training_sigma(edm, &mut rng));
            noise.push(
                (0..elements)
                    .map(|_| StandardNormal.sample(&mut rng))
                    .collect::<Vec<f64>>(),
            );
            dropped.push(rng.random_bool(cfg.cond_drop_prob));
        }
        let batch = prepare_batch(&model, &params, &pairs, &sigmas, &noise, &dropped)?;
        let reduction = if step < cfg.topk_until() {
            Reduction::TopFraction(cfg.topk_fraction)
        } else {
            Reduction::Mean
        };
        let mut g = Graph::new();
        let bound = params.bind(&mut g);
        let (loss, _) = diffusion_loss(&mut g, &bound, &model, &batch, reduction, 1.0)?;
        let loss_value = g.value(loss).data()[0] as f64;
        let sigma_mean = sigmas.iter().sum::<f64>() / sigmas.len() as f64;
        if !loss_value.is_finite() {
            return Err(Error::Numerical(format!(
                "non-finite loss at step {step} (sigmas {sigmas:?})"
            )));
        }
        let mut grads = collect_grads(&params, &bound, g.backward(loss));
        drop(g);
        let norm = clip_grad_norm(&mut grads, cfg.grad_clip);
        if !norm.is_finite() {
            return Err(Error::Numerical(format!(
                "non-finite gradient norm at step {step} (sigmas {sigmas:?})"
            )));
        }
        opt.update(&mut params, &grads);
        losses.push(loss_value);

        win_loss += loss_value;
        win_sigma += sigma_mean;
        win_norm += norm;
        win_n += 1;
        if (step + 1) % cfg.log_every == 0 || step + 1 == cfg.steps {
            let k = win_n as f64;
            writeln!(
                log,
                "{},{:.6},{:.6},{:.6},{}",
                step + 1,
                win_loss / k,
                win_sigma / k,
                win_norm / k,
                start.elapsed().as_millis()
            )
            .map_err(|e| Error::io(&log_path, e))?;
            log::info!(
                "step {} loss {:.5} grad_norm {:.4}",
                step + 1,
                win_loss / k,
                win_norm / k
            );
            (win_loss, win_sigma, win_norm, win_n) = (0.0, 0.0, 0.0, 0);
        }
        if cfg.checkpoint_every > 0
            && (step + 1) % cfg.checkpoint_every == 0
            && step + 1 < cfg.steps
        {
            let path = out_dir.join(format!("step_{:06}", step + 1));
            io::save_checkpoint(&path, &params, model_cfg, step + 1)?;
            checkpoints.push(path);
        }
    }
    let final_checkpoint = out_dir.join("final");
    io::save_checkpoint(&final_checkpoint, &params, model_cfg, cfg.steps)?;
    checkpoints.push(final_checkpoint.clone());
    Ok(TrainOutcome {
        final_checkpoint,
        checkpoints,
        log: log_path,
        losses,
    })
}
