//! Triplet-loss training of the joint embedder with AdamW and early stopping.

use std::collections::HashMap;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataio::{segment_rows, Checkpoint, Dataset};
use crate::embedder::{
    center_crop, random_crop, sem_backward, sem_forward, vem_backward, vem_forward_tape,
    Architecture, Dropout, JointVec, ModelParams,
};
use crate::error::{Error, Result};
use crate::matrix::{Matrix, Real};
use crate::miner::TripletRecord;
use crate::netmath::{l2_dist, Mask};
use crate::seed::{
    derive_seed, rng_for, str_key, STREAM_CROP, STREAM_DROPOUT, STREAM_SHUFFLE, STREAM_VALIDATION,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub early_stop_patience: usize,
    /// Triplet margin ε.
    pub margin: f64,
    pub seed: u64,
    /// Fraction of videos whose triplets are held out for early stopping.
    pub val_fraction: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.99,
            adam_eps: 1e-8,
            weight_decay: 1e-5,
            batch_size: 128,
            epochs: 25,
            early_stop_patience: 10,
            margin: 1.0,
            seed: 0,
            val_fraction: 0.1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [self.lr, self.beta1, self.beta2, self.adam_eps];
        if positive.iter().any(|&v| !(v > 0.0 && v.is_finite())) {
            return Err(Error::Config(
                "lr, betas and adam_eps must be positive".into(),
            ));
        }
        if self.beta1 >= 1.0 || self.beta2 >= 1.0 {
            return Err(Error::Config("betas must be below 1".into()));
        }
        if !(self.weight_decay >= 0.0 && self.margin >= 0.0) {
            return Err(Error::Config(
                "weight_decay and margin must be non-negative".into(),
            ));
        }
        if self.batch_size == 0 || self.epochs == 0 || self.early_stop_patience == 0 {
            return Err(Error::Config(
                "batch_size, epochs and patience must be positive".into(),
            ));
        }
        if self.early_stop_patience > self.epochs {
            return Err(Error::Config(format!(
                "patience {} exceeds epochs {}",
                self.early_stop_patience, self.epochs
            )));
        }
        if !(self.val_fraction > 0.0 && self.val_fraction < 1.0) {
            return Err(Error::Config("val_fraction must lie in (0, 1)".into()));
        }
        Ok(())
    }
}

/// `max(‖v − p‖ − ‖v − n‖ + margin, 0)` with Euclidean distances.
pub fn triplet_loss<T: Real>(v: &[T], positive: &[T], negative: &[T], margin: T) -> Result<T> {
    if margin < T::zero() {
        return Err(Error::Config("margin must be non-negative".into()));
    }
    let arg = l2_dist(v, positive)? - l2_dist(v, negative)? + margin;
    Ok(arg.max(T::zero()))
}

#[derive(Clone, Debug)]
pub struct TripletGrad<T> {
    pub loss: T,
    pub d_anchor: Vec<T>,
    pub d_positive: Vec<T>,
    pub d_negative: Vec<T>,
}

/// Loss and its gradient. The hinge counts as active when its argument is
/// exactly zero; a zero distance contributes a zero gradient.
pub fn triplet_loss_grad<T: Real>(
    v: &[T],
    positive: &[T],
    negative: &[T],
    margin: T,
) -> Result<TripletGrad<T>> {
    let dp = l2_dist(v, positive)?;
    let dn = l2_dist(v, negative)?;
    let arg = dp - dn + margin;
    let n = v.len();
    let mut g = TripletGrad {
        loss: arg.max(T::zero()),
        d_anchor: vec![T::zero(); n],
        d_positive: vec![T::zero(); n],
        d_negative: vec![T::zero(); n],
    };
    if arg < T::zero() {
        return Ok(g);
    }
    for i in 0..n {
        let up = if dp > T::zero() {
            (v[i] - positive[i]) / dp
        } else {
            T::zero()
        };
        let un = if dn > T::zero() {
            (v[i] - negative[i]) / dn
        } else {
            T::zero()
        };
        g.d_anchor[i] = up - un;
        g.d_positive[i] = -up;
        g.d_negative[i] = un;
    }
    Ok(g)
}

/// A mini-batch in index form: unique windows and sentences, and triplets
/// pointing into them.
#[derive(Clone, Debug)]
pub struct Batch<T> {
    pub windows: Vec<Matrix<T>>,
    pub sentences: Vec<Vec<T>>,
    /// `(window, positive sentence, negative sentence)` indices.
    pub triplets: Vec<(usize, usize, usize)>,
}

/// Dropout settings for one optimizer step.
#[derive(Clone, Copy, Debug)]
pub struct StepDropout {
    pub rate: f64,
    pub seed: u64,
}

struct Embedded<T> {
    windows: Vec<(JointVec<T>, crate::embedder::VemTape<T>)>,
    sentences: Vec<JointVec<T>>,
}

fn embed<T: Real>(
    p: &ModelParams<T>,
    batch: &Batch<T>,
    dropout: Option<StepDropout>,
) -> Result<Embedded<T>> {
    let windows = batch
        .windows
        .par_iter()
        .enumerate()
        .map(|(i, w)| {
            let mut rng = dropout.map(|d| rng_for(d.seed, &[STREAM_DROPOUT, i as u64]));
            let drop = match (&dropout, rng.as_mut()) {
                (Some(d), Some(rng)) if d.rate > 0.0 => Some(Dropout { rate: d.rate, rng }),
                _ => None,
            };
            vem_forward_tape(w, p, &Mask::all_valid(w.rows()), drop)
        })
        .collect::<Result<Vec<_>>>()?;
    let sentences = batch
        .sentences
        .par_iter()
        .map(|s| sem_forward(s, p))
        .collect::<Result<Vec<_>>>()?;
    Ok(Embedded { windows, sentences })
}

/// Mean triplet loss of the batch.
pub fn batch_loss<T: Real>(p: &ModelParams<T>, batch: &Batch<T>, margin: T) -> Result<T> {
    let e = embed(p, batch, None)?;
    let mut total = T::zero();
    for &(w, pos, neg) in &batch.triplets {
        total = total
            + triplet_loss(
                e.windows[w].0.as_slice(),
                e.sentences[pos].as_slice(),
                e.sentences[neg].as_slice(),
                margin,
            )?;
    }
    Ok(total / T::of(batch.triplets.len().max(1) as f64))
}

// Windows are backpropagated in fixed-size chunks so the gradient sum has the
// same association order for any thread count.
const GRAD_CHUNK: usize = 8;

/// Mean triplet loss and its gradient with respect to every parameter.
pub fn batch_loss_and_grad<T: Real>(
    p: &ModelParams<T>,
    batch: &Batch<T>,
    margin: T,
    dropout: Option<StepDropout>,
) -> Result<(T, ModelParams<T>)> {
    if batch.triplets.is_empty() {
        return Err(Error::Invalid("empty batch".into()));
    }
    let e = embed(p, batch, dropout)?;
    let scale = T::one() / T::of(batch.triplets.len() as f64);
    let d_emb = p.arch.d_emb;
    let mut d_windows = vec![vec![T::zero(); d_emb]; batch.windows.len()];
    let mut d_sentences = vec![vec![T::zero(); d_emb]; batch.sentences.len()];
    let mut total = T::zero();
    for &(w, pos, neg) in &batch.triplets {
        let g = triplet_loss_grad(
            e.windows[w].0.as_slice(),
            e.sentences[pos].as_slice(),
            e.sentences[neg].as_slice(),
            margin,
        )?;
        total = total + g.loss;
        accumulate(&mut d_windows[w], &g.d_anchor, scale);
        accumulate(&mut d_sentences[pos], &g.d_positive, scale);
        accumulate(&mut d_sentences[neg], &g.d_negative, scale);
    }

    let idx: Vec<usize> = (0..batch.windows.len()).collect();
    let partials: Vec<ModelParams<T>> = idx
        .par_chunks(GRAD_CHUNK)
        .map(|chunk| {
            let mut g = p.zeros_like();
            for &i in chunk {
                if d_windows[i].iter().any(|&v| v != T::zero()) {
                    vem_backward(&e.windows[i].1, p, &d_windows[i], &mut g);
                }
            }
            g
        })
        .collect();
    let mut grads = p.zeros_like();
    for g in &partials {
        grads.add_assign(g);
    }
    for (s, d) in batch.sentences.iter().zip(&d_sentences) {
        if d.iter().any(|&v| v != T::zero()) {
            sem_backward(s, p, d, &mut grads);
        }
    }
    Ok((total * scale, grads))
}

fn accumulate<T: Real>(acc: &mut [T], g: &[T], scale: T) {
    for (a, &v) in acc.iter_mut().zip(g) {
        *a = *a + v * scale;
    }
}

/// Signs of every ReLU input and hinge argument in the batch. Central
/// differences are only meaningful when this pattern is the same at both
/// probe points.
pub fn activation_pattern<T: Real>(
    p: &ModelParams<T>,
    batch: &Batch<T>,
    margin: T,
) -> Result<Vec<bool>> {
    let e = embed(p, batch, None)?;
    let mut out = Vec::new();
    for (_, tape) in &e.windows {
        out.extend(tape.relu_inputs().map(|v| v > T::zero()));
    }
    for s in &batch.sentences {
        let pre = crate::netmath::affine(&Matrix::row_vector(s.clone()), &p.w_s, p.b_s.as_slice())?;
        out.extend(pre.as_slice().iter().map(|&v| v > T::zero()));
    }
    for &(w, pos, neg) in &batch.triplets {
        let v = e.windows[w].0.as_slice();
        let arg = l2_dist(v, e.sentences[pos].as_slice())?
            - l2_dist(v, e.sentences[neg].as_slice())?
            + margin;
        out.push(arg >= T::zero());
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl From<&TrainConfig> for AdamWConfig {
    fn from(c: &TrainConfig) -> Self {
        AdamWConfig {
            lr: c.lr,
            beta1: c.beta1,
            beta2: c.beta2,
            eps: c.adam_eps,
            weight_decay: c.weight_decay,
        }
    }
}

/// AdamW update of one tensor. `step` is 1-based.
///
/// ```text
/// θ ← θ·(1 − lr·λ)
/// m ← β1·m + (1 − β1)·g          v ← β2·v + (1 − β2)·g²
/// θ ← θ − lr·(m / (1 − β1^t)) / (√(v / (1 − β2^t)) + eps)
/// ```
pub fn adamw_update<T: Real>(
    param: &mut [T],
    grad: &[T],
    m: &mut [T],
    v: &mut [T],
    step: u64,
    cfg: &AdamWConfig,
) {
    let lr = T::of(cfg.lr);
    let b1 = T::of(cfg.beta1);
    let b2 = T::of(cfg.beta2);
    let decay = T::one() - T::of(cfg.lr * cfg.weight_decay);
    let bc1 = T::one() - T::of(cfg.beta1.powi(step as i32));
    let bc2 = T::one() - T::of(cfg.beta2.powi(step as i32));
    let eps = T::of(cfg.eps);
    for i in 0..param.len() {
        let g = grad[i];
        m[i] = b1 * m[i] + (T::one() - b1) * g;
        v[i] = b2 * v[i] + (T::one() - b2) * g * g;
        let m_hat = m[i] / bc1;
        let v_hat = v[i] / bc2;
        param[i] = param[i] * decay - lr * m_hat / (v_hat.sqrt() + eps);
    }
}

/// First and second moments per parameter tensor.
#[derive(Clone, Debug)]
pub struct OptimState<T = f32> {
    pub m: ModelParams<T>,
    pub v: ModelParams<T>,
    pub step: u64,
}

impl<T: Real> OptimState<T> {
    pub fn new(params: &ModelParams<T>) -> Self {
        OptimState {
            m: params.zeros_like(),
            v: params.zeros_like(),
            step: 0,
        }
    }
}

pub fn adamw_step<T: Real>(
    params: &mut ModelParams<T>,
    grads: &ModelParams<T>,
    state: &mut OptimState<T>,
    cfg: &AdamWConfig,
) -> Result<()> {
    for (name, g) in grads.tensors() {
        if !g.is_finite() {
            return Err(Error::NonFiniteGradient { tensor: name });
        }
    }
    state.step += 1;
    let step = state.step;
    let ms = state.m.tensors_mut();
    let vs = state.v.tensors_mut();
    for ((((_, p), (_, g)), (_, m)), (_, v)) in params
        .tensors_mut()
        .into_iter()
        .zip(grads.tensors())
        .zip(ms)
        .zip(vs)
    {
        adamw_update(
            p.as_mut_slice(),
            g.as_slice(),
            m.as_mut_slice(),
            v.as_mut_slice(),
            step,
            cfg,
        );
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub seconds: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossTrace {
    pub epochs: Vec<EpochRecord>,
    /// Index into `epochs` of the best validation loss.
    pub best_epoch: usize,
}

impl LossTrace {
    /// CSV `epoch,train_loss,val_loss,seconds`. Without `timing` the seconds
    /// column is written as 0 so the file is reproducible byte for byte.
    pub fn to_csv(&self, timing: bool) -> String {
        let mut out = String::from("epoch,train_loss,val_loss,seconds\n");
        for r in &self.epochs {
            let secs = if timing { r.seconds } else { 0.0 };
            out.push_str(&format!(
                "{},{},{},{}\n",
                r.epoch, r.train_loss, r.val_loss, secs
            ));
        }
        out
    }

    pub fn write_csv(&self, path: impl AsRef<Path>, timing: bool) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_csv(timing)).map_err(|e| Error::io(path, e))
    }
}

/// Where each triplet's window lives in the dataset.
#[derive(Clone, Debug)]
struct WindowRef {
    video: usize,
    rows: (usize, usize),
}

struct Prepared {
    windows: Vec<WindowRef>,
    /// `(window, positive, negative)` per triplet, in input order.
    triplets: Vec<(usize, usize, usize)>,
}

fn prepare(ds: &Dataset, triplets: &[TripletRecord]) -> Result<Prepared> {
    let mut index: HashMap<(usize, u64, u64), usize> = HashMap::new();
    let mut windows = Vec::new();
    let mut out = Vec::with_capacity(triplets.len());
    for (i, t) in triplets.iter().enumerate() {
        let video = ds.video_index(&t.video_id).ok_or_else(|| {
            Error::Invalid(format!("triplet {i}: unknown video {:?}", t.video_id))
        })?;
        let n = ds.sentences.rows();
        if t.positive_id >= n || t.negative_id >= n {
            return Err(Error::DanglingSentence {
                id: t.positive_id.max(t.negative_id),
                rows: n,
            });
        }
        let rows = ds.features[video].rows();
        if !(t.start_s >= 0.0 && t.end_s > t.start_s && t.end_s <= rows as f64) {
            return Err(Error::Invalid(format!(
                "triplet {i}: window outside video {:?}",
                t.video_id
            )));
        }
        let key = (video, t.start_s.to_bits(), t.end_s.to_bits());
        let w = *index.entry(key).or_insert_with(|| {
            windows.push(WindowRef {
                video,
                rows: segment_rows(t.start_s, t.end_s, rows),
            });
            windows.len() - 1
        });
        out.push((w, t.positive_id, t.negative_id));
    }
    Ok(Prepared {
        windows,
        triplets: out,
    })
}

/// Splits triplet indices into (train, validation) by a seeded hash of the
/// video id, so no video contributes to both sides.
fn split_by_video(
    ds: &Dataset,
    prepared: &Prepared,
    cfg: &TrainConfig,
) -> Result<(Vec<usize>, Vec<usize>)> {
    let score = |video: usize| -> f64 {
        let h = derive_seed(
            cfg.seed,
            &[STREAM_VALIDATION, str_key(&ds.videos()[video].video_id)],
        );
        (h >> 11) as f64 / (1u64 << 53) as f64
    };
    let mut videos: Vec<usize> = prepared.windows.iter().map(|w| w.video).collect();
    videos.sort_unstable();
    videos.dedup();
    if videos.len() < 2 {
        return Err(Error::EmptyValidation);
    }
    let mut val_videos: Vec<usize> = videos
        .iter()
        .copied()
        .filter(|&v| score(v) < cfg.val_fraction)
        .collect();
    if val_videos.is_empty() {
        // the lowest-scoring video goes to validation
        let v = *videos
            .iter()
            .min_by(|&&a, &&b| score(a).total_cmp(&score(b)))
            .unwrap();
        val_videos.push(v);
    } else if val_videos.len() == videos.len() {
        let v = *videos
            .iter()
            .max_by(|&&a, &&b| score(a).total_cmp(&score(b)))
            .unwrap();
        val_videos.retain(|&x| x != v);
    }
    let (mut train, mut val) = (Vec::new(), Vec::new());
    for (i, &(w, _, _)) in prepared.triplets.iter().enumerate() {
        if val_videos.contains(&prepared.windows[w].video) {
            val.push(i);
        } else {
            train.push(i);
        }
    }
    Ok((train, val))
}

fn assemble(
    ds: &Dataset,
    prepared: &Prepared,
    indices: &[usize],
    max_rows: usize,
    crop_seed: Option<u64>,
) -> Batch<f32> {
    let mut window_slot: HashMap<usize, usize> = HashMap::new();
    let mut sentence_slot: HashMap<usize, usize> = HashMap::new();
    let mut batch = Batch {
        windows: Vec::new(),
        sentences: Vec::new(),
        triplets: Vec::with_capacity(indices.len()),
    };
    for &i in indices {
        let (w, pos, neg) = prepared.triplets[i];
        let wi = *window_slot.entry(w).or_insert_with(|| {
            let r = &prepared.windows[w];
            let (start, end) = r.rows;
            let (a, b) = match crop_seed {
                Some(seed) => random_crop(
                    end - start,
                    max_rows,
                    &mut rng_for(seed, &[STREAM_CROP, w as u64]),
                ),
                None => center_crop(end - start, max_rows),
            };
            batch
                .windows
                .push(ds.features[r.video].slice_rows(start + a, start + b));
            batch.windows.len() - 1
        });
        let mut slot = |id: usize| {
            *sentence_slot.entry(id).or_insert_with(|| {
                batch.sentences.push(ds.sentence(id).to_vec());
                batch.sentences.len() - 1
            })
        };
        let (pi, ni) = (slot(pos), slot(neg));
        batch.triplets.push((wi, pi, ni));
    }
    batch
}

/// Mean loss over `indices`, evaluated in batches without dropout.
fn mean_loss(
    ds: &Dataset,
    prepared: &Prepared,
    indices: &[usize],
    p: &ModelParams<f32>,
    cfg: &TrainConfig,
) -> Result<f64> {
    let mut total = 0.0;
    for chunk in indices.chunks(cfg.batch_size) {
        let batch = assemble(ds, prepared, chunk, p.arch.max_rows, None);
        total += batch_loss(p, &batch, cfg.margin as f32)? as f64 * chunk.len() as f64;
    }
    Ok(total / indices.len() as f64)
}

pub struct TrainOutcome {
    /// Parameters of the epoch with the lowest validation loss.
    pub params: ModelParams<f32>,
    pub trace: LossTrace,
    pub train_triplets: usize,
    pub val_triplets: usize,
}

/// Trains from `init` (or a fresh seeded initialization) and returns the
/// best-validation parameters.
pub fn train(
    ds: &Dataset,
    triplets: &[TripletRecord],
    arch: &Architecture,
    cfg: &TrainConfig,
    init: Option<ModelParams<f32>>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    arch.validate()?;
    if triplets.is_empty() {
        return Err(Error::Invalid("no triplets to train on".into()));
    }
    if ds.manifest.feature_dim != arch.d_c || ds.sentences.cols() != arch.d_s {
        return Err(Error::Shape(format!(
            "dataset has d_c = {}, d_s = {}; architecture expects {} and {}",
            ds.manifest.feature_dim,
            ds.sentences.cols(),
            arch.d_c,
            arch.d_s
        )));
    }
    let prepared = prepare(ds, triplets)?;
    let (train_idx, val_idx) = split_by_video(ds, &prepared, cfg)?;
    if val_idx.is_empty() {
        return Err(Error::EmptyValidation);
    }
    log::info!(
        "training on {} triplets, validating on {} ({} unique windows)",
        train_idx.len(),
        val_idx.len(),
        prepared.windows.len()
    );

    let mut params = match init {
        Some(p) => {
            if &p.arch != arch {
                return Err(Error::Config(
                    "initial parameters do not match the architecture".into(),
                ));
            }
            p
        }
        None => ModelParams::init(arch, cfg.seed)?,
    };
    let mut state = OptimState::new(&params);
    let adam = AdamWConfig::from(cfg);
    let mut trace = LossTrace::default();
    let mut best: Option<(f64, ModelParams<f32>)> = None;
    let mut since_best = 0;

    for epoch in 0..cfg.epochs {
        let started = Instant::now();
        let mut order = train_idx.clone();
        order.shuffle(&mut rng_for(cfg.seed, &[STREAM_SHUFFLE, epoch as u64]));
        let mut train_total = 0.0;
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let step_seed = derive_seed(cfg.seed, &[epoch as u64, b as u64]);
            let batch = assemble(ds, &prepared, chunk, arch.max_rows, Some(step_seed));
            let dropout = (arch.dropout > 0.0).then_some(StepDropout {
                rate: arch.dropout,
                seed: step_seed,
            });
            let (loss, grads) = batch_loss_and_grad(&params, &batch, cfg.margin as f32, dropout)?;
            if !loss.is_finite() {
                return Err(Error::NonFiniteLoss { epoch });
            }
            train_total += loss as f64 * chunk.len() as f64;
            adamw_step(&mut params, &grads, &mut state, &adam)?;
        }
        let train_loss = train_total / train_idx.len().max(1) as f64;
        let val_loss = mean_loss(ds, &prepared, &val_idx, &params, cfg)?;
        if !val_loss.is_finite() {
            return Err(Error::NonFiniteLoss { epoch });
        }
        trace.epochs.push(EpochRecord {
            epoch,
            train_loss,
            val_loss,
            seconds: started.elapsed().as_secs_f64(),
        });
        log::info!("epoch {epoch}: train {train_loss:.6} val {val_loss:.6}");

        if best.as_ref().is_none_or(|(b, _)| val_loss < *b) {
            best = Some((val_loss, params.clone()));
            trace.best_epoch = epoch;
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= cfg.early_stop_patience {
                log::info!("early stop after epoch {epoch}");
                break;
            }
        }
    }
    let (_, params) = best.expect("at least one epoch ran");
    Ok(TrainOutcome {
        params,
        trace,
        train_triplets: train_idx.len(),
        val_triplets: val_idx.len(),
    })
}

pub fn to_checkpoint(params: &ModelParams<f32>, config_echo: String) -> Checkpoint {
    Checkpoint {
        config_echo,
        tensors: params
            .tensors()
            .into_iter()
            .map(|(n, m)| (n, m.clone()))
            .collect(),
    }
}

/// Rebuilds parameters from a checkpoint, checking it against `arch`.
pub fn from_checkpoint(ckpt: &Checkpoint, arch: &Architecture) -> Result<ModelParams<f32>> {
    arch.validate()?;
    ckpt.check_shapes(&ModelParams::<f32>::expected_shapes(arch))?;
    let mut p = ModelParams::zeros(arch);
    for (name, m) in p.tensors_mut() {
        *m = ckpt.get(&name).expect("shape check passed").clone();
    }
    Ok(p)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn triplet_loss_examples() {
        let v = [0.3f64, 1.2, -0.7];
        let p = [1.0, 0.0, 2.0];
        assert_eq!(triplet_loss(&v, &p, &p, 0.75).unwrap(), 0.75);
        let far = [10.0, 10.0, 10.0];
        assert_eq!(triplet_loss(&v, &v, &far, 1.0).unwrap(), 0.0);
        // 0 - √2 + 0.5 < 0
        assert_eq!(
            triplet_loss(&[1.0, 0.0], &[1.0, 0.0], &[0.0, 1.0], 0.5).unwrap(),
            0.0
        );
        assert!(triplet_loss(&[1.0], &[1.0, 0.0], &[0.0, 1.0], 0.5).is_err());
    }

    #[test]
    fn hinge_gradient_conventions() {
        // inactive: exactly zero
        let g = triplet_loss_grad(&[1.0f64, 0.0], &[1.0, 0.1], &[0.0, 5.0], 0.5).unwrap();
        assert!(g
            .d_anchor
            .iter()
            .chain(&g.d_positive)
            .chain(&g.d_negative)
            .all(|&x| x == 0.0));
        // boundary: ‖v-p‖ = 1, ‖v-n‖ = 2, margin 1 -> argument 0, active branch
        let g = triplet_loss_grad(&[0.0f64, 0.0], &[1.0, 0.0], &[0.0, 2.0], 1.0).unwrap();
        assert_eq!(g.loss, 0.0);
        assert_eq!(g.d_anchor, vec![-1.0, 1.0]);
        assert_eq!(g.d_positive, vec![1.0, 0.0]);
        assert_eq!(g.d_negative, vec![0.0, -1.0]);
    }

    fn adam(lr: f64, wd: f64) -> AdamWConfig {
        AdamWConfig {
            lr,
            beta1: 0.9,
            beta2: 0.99,
            eps: 1e-8,
            weight_decay: wd,
        }
    }

    #[test]
    fn adamw_zero_gradient_cases() {
        let mut p = vec![1.5f64, -2.0];
        let (mut m, mut v) = (vec![0.0; 2], vec![0.0; 2]);
        adamw_update(&mut p, &[0.0, 0.0], &mut m, &mut v, 1, &adam(1e-4, 0.0));
        assert_eq!(p, vec![1.5, -2.0]);

        let cfg = adam(1e-2, 0.5);
        let mut p = vec![1.5f64, -2.0];
        for step in 1..=3 {
            adamw_update(&mut p, &[0.0, 0.0], &mut m, &mut v, step, &cfg);
        }
        let f = (1.0 - 1e-2 * 0.5f64).powi(3);
        assert!((p[0] - 1.5 * f).abs() < 1e-15 && (p[1] + 2.0 * f).abs() < 1e-15);
    }

    #[test]
    fn adamw_matches_scalar_unrolling() {
        let (lr, b1, b2, eps, wd) = (0.1, 0.9, 0.99, 1e-8, 0.01);
        let cfg = AdamWConfig {
            lr,
            beta1: b1,
            beta2: b2,
            eps,
            weight_decay: wd,
        };
        let mut p = [2.0f64];
        let (mut m, mut v) = ([0.0], [0.0]);
        adamw_update(&mut p, &[1.0], &mut m, &mut v, 1, &cfg);
        adamw_update(&mut p, &[1.0], &mut m, &mut v, 2, &cfg);

        // by hand, g = 1 both steps
        let m1 = (1.0 - b1) * 1.0;
        let v1 = (1.0 - b2) * 1.0;
        let th1 = 2.0 * (1.0 - lr * wd) - lr * (m1 / (1.0 - b1)) / ((v1 / (1.0 - b2)).sqrt() + eps);
        let m2 = b1 * m1 + (1.0 - b1);
        let v2 = b2 * v1 + (1.0 - b2);
        let th2 = th1 * (1.0 - lr * wd)
            - lr * (m2 / (1.0 - b1 * b1)) / ((v2 / (1.0 - b2 * b2)).sqrt() + eps);
        assert!((p[0] - th2).abs() < 1e-14, "{} vs {th2}", p[0]);
        // m̂ = v̂ = 1 for a constant unit gradient, so each step moves ≈ lr
        assert!(
            (th2 - (2.0 * (1.0 - lr * wd) * (1.0 - lr * wd) - lr * (1.0 - lr * wd) - lr)).abs()
                < 1e-6
        );
    }

    #[test]
    fn adamw_rejects_non_finite_gradient() {
        let arch = Architecture {
            d_c: 2,
            d_s: 2,
            d_model: 2,
            heads: 1,
            layers: 1,
            d_ff: 2,
            d_emb: 2,
            max_rows: 8,
            dropout: 0.0,
        };
        let mut p = ModelParams::<f32>::init(&arch, 0).unwrap();
        let mut g = p.zeros_like();
        g.b_s.as_mut_slice()[1] = f32::NAN;
        let mut st = OptimState::new(&p);
        match adamw_step(&mut p, &g, &mut st, &adam(1e-3, 0.0)) {
            Err(Error::NonFiniteGradient { tensor }) => assert_eq!(tensor, "b_s"),
            other => panic!("unexpected {other:?}"),
        }
    }

    fn toy() -> (ModelParams<f64>, Batch<f64>) {
        let arch = Architecture {
            d_c: 6,
            d_s: 5,
            d_model: 4,
            heads: 2,
            layers: 1,
            d_ff: 8,
            d_emb: 3,
            max_rows: 480,
            dropout: 0.0,
        };
        let p = ModelParams::<f64>::init(&arch, 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut mat = |r: usize, c: usize| {
            Matrix::new(
                r,
                c,
                (0..r * c).map(|_| rng.random_range(-1.0..1.0)).collect(),
            )
            .unwrap()
        };
        let windows = vec![mat(3, 6), mat(2, 6)];
        let sentences = (0..3).map(|_| mat(1, 5).into_vec()).collect();
        (
            p,
            Batch {
                windows,
                sentences,
                triplets: vec![(0, 0, 1), (1, 2, 0)],
            },
        )
    }

    #[test]
    fn satisfied_triplet_leaves_parameters_unchanged() {
        let (p, mut batch) = toy();
        batch.triplets = vec![(0, 0, 1)];
        // a negative far out along the sentence projection, on whichever
        // side the ReLU lets through
        let base = batch.sentences[1].clone();
        let (loss, grads) = [1e3, -1e3]
            .into_iter()
            .map(|k| {
                batch.sentences[1] = base.iter().map(|v| v * k).collect();
                batch_loss_and_grad(&p, &batch, 1.0, None).unwrap()
            })
            .find(|(l, _)| *l == 0.0)
            .expect("one side is far enough");
        assert_eq!(loss, 0.0);
        assert!(grads
            .tensors()
            .iter()
            .all(|(_, g)| g.as_slice().iter().all(|&v| v == 0.0)));
        let mut after = p.clone();
        let mut st = OptimState::new(&after);
        adamw_step(&mut after, &grads, &mut st, &adam(1e-4, 0.0)).unwrap();
        assert_eq!(after.flatten(), p.flatten());
    }

    #[test]
    fn grouped_backprop_equals_sum_of_single_triplets() {
        let (p, batch) = toy();
        let (loss, grads) = batch_loss_and_grad(&p, &batch, 1.0, None).unwrap();
        let mut sum = p.zeros_like();
        let mut loss_sum = 0.0;
        for &t in &batch.triplets {
            let single = Batch {
                triplets: vec![t],
                ..batch.clone()
            };
            let (l, g) = batch_loss_and_grad(&p, &single, 1.0, None).unwrap();
            loss_sum += l;
            sum.add_assign(&g);
        }
        sum.scale_assign(0.5);
        assert!((loss - loss_sum / 2.0).abs() < 1e-14);
        for ((_, a), (_, b)) in grads.tensors().into_iter().zip(sum.tensors()) {
            assert!(a.max_abs_diff(b) < 1e-14);
        }
        assert!((batch_loss(&p, &batch, 1.0).unwrap() - loss).abs() < 1e-14);
    }
}
