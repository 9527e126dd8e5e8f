//! The two-branch joint embedder.
//!
//! The visual branch reduces a per-second feature stack, adds sinusoidal
//! positions, runs post-norm transformer encoder layers, mean-pools the valid
//! rows and projects into the joint space. The sentence branch is a single
//! projection of a pre-computed sentence vector. Both end in a ReLU, so joint
//! vectors are non-negative.
//!
//! ```text
//! stack ─ ReLU(·W_r + b_r) ─ +PE ─┬─ MHA ─(+)─ LN1 ─┬─ FFN ─(+)─ LN2 ─ pool ─ ReLU(·W_v + b_v)
//!                                 └─────────┘       └─────────┘
//! sentence ─ ReLU(·W_s + b_s)
//! ```

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::{Matrix, Real};
use crate::netmath::{
    add_to_row, affine, affine_backward, ffn_backward, ffn_forward, layer_norm_backward,
    layer_norm_forward, masked_mean_pool, masked_mean_pool_backward, mha_backward, mha_forward,
    positional_encoding, relu, relu_backward, AttentionParams, FfnCache, FfnParams, LayerNormCache,
    Mask, MhaCache, LAYER_NORM_EPS,
};
use crate::seed::{rng_for, STREAM_INIT};

/// Architecture dimensions and encoder options.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Architecture {
    /// Visual feature width.
    pub d_c: usize,
    /// Sentence vector width.
    pub d_s: usize,
    pub d_model: usize,
    pub heads: usize,
    pub layers: usize,
    pub d_ff: usize,
    pub d_emb: usize,
    /// Stacks longer than this are cropped.
    pub max_rows: usize,
    pub dropout: f64,
}

impl Default for Architecture {
    fn default() -> Self {
        Architecture {
            d_c: 4096,
            d_s: 768,
            d_model: 512,
            heads: 2,
            layers: 1,
            d_ff: 4 * 512,
            d_emb: 128,
            max_rows: 480,
            dropout: 0.0,
        }
    }
}

impl Architecture {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            self.d_c,
            self.d_s,
            self.d_model,
            self.heads,
            self.layers,
            self.d_ff,
            self.d_emb,
            self.max_rows,
        ];
        if dims.contains(&0) {
            return Err(Error::Config("all dimensions must be positive".into()));
        }
        if self.d_model % self.heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} is not divisible by {} heads",
                self.d_model, self.heads
            )));
        }
        if self.d_model % 2 != 0 {
            return Err(Error::Config(format!(
                "d_model {} must be even for the positional encoding",
                self.d_model
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!(
                "dropout {} outside [0, 1)",
                self.dropout
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderLayer<T = f32> {
    pub attn: AttentionParams<T>,
    pub ffn: FfnParams<T>,
    pub ln1_gain: Matrix<T>,
    pub ln1_bias: Matrix<T>,
    pub ln2_gain: Matrix<T>,
    pub ln2_bias: Matrix<T>,
}

/// Every learnable tensor of both branches. Biases are `1 × n` matrices.
///
/// The same type doubles as the gradient accumulator.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<T = f32> {
    pub arch: Architecture,
    pub w_r: Matrix<T>,
    pub b_r: Matrix<T>,
    pub layers: Vec<EncoderLayer<T>>,
    pub w_v: Matrix<T>,
    pub b_v: Matrix<T>,
    pub w_s: Matrix<T>,
    pub b_s: Matrix<T>,
}

impl<T: Real> ModelParams<T> {
    pub fn zeros(arch: &Architecture) -> Self {
        let layer = EncoderLayer {
            attn: AttentionParams::zeros(arch.d_model, arch.heads),
            ffn: FfnParams::zeros(arch.d_model, arch.d_ff),
            ln1_gain: Matrix::zeros(1, arch.d_model),
            ln1_bias: Matrix::zeros(1, arch.d_model),
            ln2_gain: Matrix::zeros(1, arch.d_model),
            ln2_bias: Matrix::zeros(1, arch.d_model),
        };
        ModelParams {
            arch: arch.clone(),
            w_r: Matrix::zeros(arch.d_c, arch.d_model),
            b_r: Matrix::zeros(1, arch.d_model),
            layers: vec![layer; arch.layers],
            w_v: Matrix::zeros(arch.d_model, arch.d_emb),
            b_v: Matrix::zeros(1, arch.d_emb),
            w_s: Matrix::zeros(arch.d_s, arch.d_emb),
            b_s: Matrix::zeros(1, arch.d_emb),
        }
    }

    /// Glorot-uniform weights, zero biases, unit layer-norm gains.
    pub fn init(arch: &Architecture, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut p = Self::zeros(arch);
        let mut rng = rng_for(seed, &[STREAM_INIT]);
        for (name, m) in p.tensors_mut() {
            if name.ends_with("gain") {
                m.as_mut_slice().iter_mut().for_each(|v| *v = T::one());
            } else if m.rows() > 1 {
                let limit = (6.0 / (m.rows() + m.cols()) as f64).sqrt();
                for v in m.as_mut_slice() {
                    *v = T::of(rng.random_range(-limit..limit));
                }
            }
        }
        Ok(p)
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(&self.arch)
    }

    /// Tensors in canonical order with their checkpoint names.
    pub fn tensors(&self) -> Vec<(String, &Matrix<T>)> {
        let mut out = vec![
            ("w_r".to_string(), &self.w_r),
            ("b_r".to_string(), &self.b_r),
        ];
        for (l, layer) in self.layers.iter().enumerate() {
            for (kind, ws) in [
                ("w_q", &layer.attn.w_q),
                ("w_k", &layer.attn.w_k),
                ("w_v", &layer.attn.w_v),
            ] {
                for (h, w) in ws.iter().enumerate() {
                    out.push((format!("layer{l}.attn.{kind}.{h}"), w));
                }
            }
            out.push((format!("layer{l}.attn.w_o"), &layer.attn.w_o));
            out.push((format!("layer{l}.ffn.w1"), &layer.ffn.w1));
            out.push((format!("layer{l}.ffn.b1"), &layer.ffn.b1));
            out.push((format!("layer{l}.ffn.w2"), &layer.ffn.w2));
            out.push((format!("layer{l}.ffn.b2"), &layer.ffn.b2));
            out.push((format!("layer{l}.ln1.gain"), &layer.ln1_gain));
            out.push((format!("layer{l}.ln1.bias"), &layer.ln1_bias));
            out.push((format!("layer{l}.ln2.gain"), &layer.ln2_gain));
            out.push((format!("layer{l}.ln2.bias"), &layer.ln2_bias));
        }
        out.extend([
            ("w_v".to_string(), &self.w_v),
            ("b_v".to_string(), &self.b_v),
            ("w_s".to_string(), &self.w_s),
            ("b_s".to_string(), &self.b_s),
        ]);
        out
    }

    /// Same order as [`ModelParams::tensors`].
    pub fn tensors_mut(&mut self) -> Vec<(String, &mut Matrix<T>)> {
        let mut out = vec![
            ("w_r".to_string(), &mut self.w_r),
            ("b_r".to_string(), &mut self.b_r),
        ];
        for (l, layer) in self.layers.iter_mut().enumerate() {
            let attn = &mut layer.attn;
            for (kind, ws) in [
                ("w_q", &mut attn.w_q),
                ("w_k", &mut attn.w_k),
                ("w_v", &mut attn.w_v),
            ] {
                for (h, w) in ws.iter_mut().enumerate() {
                    out.push((format!("layer{l}.attn.{kind}.{h}"), w));
                }
            }
            out.push((format!("layer{l}.attn.w_o"), &mut attn.w_o));
            out.push((format!("layer{l}.ffn.w1"), &mut layer.ffn.w1));
            out.push((format!("layer{l}.ffn.b1"), &mut layer.ffn.b1));
            out.push((format!("layer{l}.ffn.w2"), &mut layer.ffn.w2));
            out.push((format!("layer{l}.ffn.b2"), &mut layer.ffn.b2));
            out.push((format!("layer{l}.ln1.gain"), &mut layer.ln1_gain));
            out.push((format!("layer{l}.ln1.bias"), &mut layer.ln1_bias));
            out.push((format!("layer{l}.ln2.gain"), &mut layer.ln2_gain));
            out.push((format!("layer{l}.ln2.bias"), &mut layer.ln2_bias));
        }
        out.extend([
            ("w_v".to_string(), &mut self.w_v),
            ("b_v".to_string(), &mut self.b_v),
            ("w_s".to_string(), &mut self.w_s),
            ("b_s".to_string(), &mut self.b_s),
        ]);
        out
    }

    pub fn expected_shapes(arch: &Architecture) -> Vec<(String, (usize, usize))> {
        Self::zeros(arch)
            .tensors()
            .into_iter()
            .map(|(n, m)| (n, m.shape()))
            .collect()
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors().iter().map(|(_, m)| m.as_slice().len()).sum()
    }

    pub fn cast<U: Real>(&self) -> ModelParams<U> {
        let mut out = ModelParams::<U>::zeros(&self.arch);
        for ((_, dst), (_, src)) in out.tensors_mut().into_iter().zip(self.tensors()) {
            *dst = src.cast();
        }
        out
    }

    /// Flattens all tensors, in canonical order, into one vector.
    pub fn flatten(&self) -> Vec<T> {
        self.tensors()
            .into_iter()
            .flat_map(|(_, m)| m.as_slice().to_vec())
            .collect()
    }

    pub fn unflatten(&mut self, values: &[T]) {
        let mut at = 0;
        for (_, m) in self.tensors_mut() {
            let n = m.as_slice().len();
            m.as_mut_slice().copy_from_slice(&values[at..at + n]);
            at += n;
        }
        assert_eq!(at, values.len(), "flat parameter length");
    }

    pub fn add_assign(&mut self, other: &Self) {
        for ((_, a), (_, b)) in self.tensors_mut().into_iter().zip(other.tensors()) {
            a.add_assign(b);
        }
    }

    pub fn scale_assign(&mut self, s: T) {
        for (_, m) in self.tensors_mut() {
            m.scale_assign(s);
        }
    }
}

/// A joint-space vector.
#[derive(Clone, Debug, PartialEq)]
pub struct JointVec<T = f32>(pub Vec<T>);

impl<T: Real> JointVec<T> {
    pub fn as_slice(&self) -> &[T] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Training-time options for a forward pass.
pub struct Dropout<'a> {
    pub rate: f64,
    pub rng: &'a mut ChaCha8Rng,
}

fn dropout_mask<T: Real>(
    rows: usize,
    cols: usize,
    d: &mut Option<Dropout<'_>>,
) -> Option<Matrix<T>> {
    let d = d.as_mut().filter(|d| d.rate > 0.0)?;
    let keep = T::of(1.0 / (1.0 - d.rate));
    let mut m = Matrix::zeros(rows, cols);
    for v in m.as_mut_slice() {
        if d.rng.random::<f64>() >= d.rate {
            *v = keep;
        }
    }
    Some(m)
}

fn hadamard<T: Real>(a: &Matrix<T>, b: &Matrix<T>) -> Matrix<T> {
    let data = a
        .as_slice()
        .iter()
        .zip(b.as_slice())
        .map(|(&x, &y)| x * y)
        .collect();
    Matrix::new(a.rows(), a.cols(), data).expect("same shape")
}

struct LayerTape<T> {
    input: Matrix<T>,
    mha: MhaCache<T>,
    attn_drop: Option<Matrix<T>>,
    ln1: LayerNormCache<T>,
    normed: Matrix<T>,
    ffn: FfnCache<T>,
    ffn_drop: Option<Matrix<T>>,
    ln2: LayerNormCache<T>,
}

/// Everything the visual backward pass needs from its forward pass.
pub struct VemTape<T> {
    input: Matrix<T>,
    reduced_pre: Matrix<T>,
    layers: Vec<LayerTape<T>>,
    mask: Mask,
    pooled: Vec<T>,
    out_pre: Vec<T>,
}

impl<T: Real> VemTape<T> {
    /// Every value that passed through a ReLU in the forward pass.
    pub fn relu_inputs(&self) -> impl Iterator<Item = T> + '_ {
        self.reduced_pre
            .as_slice()
            .iter()
            .chain(self.layers.iter().flat_map(|l| l.ffn.pre().as_slice()))
            .chain(&self.out_pre)
            .copied()
    }
}

fn check_stack<T: Real>(stack: &Matrix<T>, p: &ModelParams<T>, mask: &Mask) -> Result<()> {
    if stack.rows() == 0 {
        return Err(Error::Invalid("empty segment".into()));
    }
    if stack.cols() != p.arch.d_c {
        return Err(Error::Shape(format!(
            "feature stack has {} columns, model expects d_c = {}",
            stack.cols(),
            p.arch.d_c
        )));
    }
    if mask.len() != stack.rows() {
        return Err(Error::Shape(format!(
            "mask of {} for a {}-row stack",
            mask.len(),
            stack.rows()
        )));
    }
    Ok(())
}

/// Visual branch: stack rows of one segment to a joint vector.
pub fn vem_forward<T: Real>(
    stack: &Matrix<T>,
    p: &ModelParams<T>,
    mask: &Mask,
) -> Result<JointVec<T>> {
    check_stack(stack, p, mask)?;
    Ok(vem_forward_tape(stack, p, mask, None)?.0)
}

/// Forward pass that records a tape for [`vem_backward`].
pub fn vem_forward_tape<T: Real>(
    stack: &Matrix<T>,
    p: &ModelParams<T>,
    mask: &Mask,
    mut dropout: Option<Dropout<'_>>,
) -> Result<(JointVec<T>, VemTape<T>)> {
    check_stack(stack, p, mask)?;
    let eps = T::of(LAYER_NORM_EPS);
    let reduced_pre = affine(stack, &p.w_r, p.b_r.as_slice())?;
    let mut x = relu(&reduced_pre).add(&positional_encoding(stack.rows(), p.arch.d_model)?);
    let mut layers = Vec::with_capacity(p.layers.len());
    for layer in &p.layers {
        let (attn, mha) = mha_forward(&x, &layer.attn, mask);
        let attn_drop = dropout_mask(attn.rows(), attn.cols(), &mut dropout);
        let attn = attn_drop
            .as_ref()
            .map_or(attn.clone(), |d| hadamard(&attn, d));
        let (normed, ln1) = layer_norm_forward(
            &x.add(&attn),
            layer.ln1_gain.as_slice(),
            layer.ln1_bias.as_slice(),
            eps,
        );
        let (f, ffn) = ffn_forward(&normed, &layer.ffn);
        let ffn_drop = dropout_mask(f.rows(), f.cols(), &mut dropout);
        let f = ffn_drop.as_ref().map_or(f.clone(), |d| hadamard(&f, d));
        let (out, ln2) = layer_norm_forward(
            &normed.add(&f),
            layer.ln2_gain.as_slice(),
            layer.ln2_bias.as_slice(),
            eps,
        );
        layers.push(LayerTape {
            input: x,
            mha,
            attn_drop,
            ln1,
            normed,
            ffn,
            ffn_drop,
            ln2,
        });
        x = out;
    }
    let pooled = masked_mean_pool(&x, mask)?;
    let out_pre = affine(
        &Matrix::row_vector(pooled.clone()),
        &p.w_v,
        p.b_v.as_slice(),
    )?
    .into_vec();
    let out = out_pre.iter().map(|&v| v.max(T::zero())).collect();
    Ok((
        JointVec(out),
        VemTape {
            input: stack.clone(),
            reduced_pre,
            layers,
            mask: mask.clone(),
            pooled,
            out_pre,
        },
    ))
}

/// Accumulates into `grads` the gradient of a scalar whose derivative with
/// respect to the visual joint vector is `d_out`.
pub fn vem_backward<T: Real>(
    tape: &VemTape<T>,
    p: &ModelParams<T>,
    d_out: &[T],
    grads: &mut ModelParams<T>,
) {
    let d_pre: Vec<T> = tape
        .out_pre
        .iter()
        .zip(d_out)
        .map(|(&z, &g)| if z > T::zero() { g } else { T::zero() })
        .collect();
    let d_pre = Matrix::row_vector(d_pre);
    let g = affine_backward(&Matrix::row_vector(tape.pooled.clone()), &p.w_v, &d_pre);
    grads.w_v.add_assign(&g.dw);
    add_to_row(&mut grads.b_v, &g.db);

    let mut dx = masked_mean_pool_backward(&tape.mask, g.dx.as_slice());
    for ((lt, layer), lg) in tape
        .layers
        .iter()
        .zip(&p.layers)
        .zip(grads.layers.iter_mut())
        .rev()
    {
        let d_r2 = layer_norm_backward(
            layer.ln2_gain.as_slice(),
            &lt.ln2,
            &dx,
            lg.ln2_gain.as_mut_slice(),
            lg.ln2_bias.as_mut_slice(),
        );
        let d_f = lt
            .ffn_drop
            .as_ref()
            .map_or(d_r2.clone(), |d| hadamard(&d_r2, d));
        let mut d_normed = ffn_backward(&lt.normed, &layer.ffn, &lt.ffn, &d_f, &mut lg.ffn);
        d_normed.add_assign(&d_r2);
        let d_r1 = layer_norm_backward(
            layer.ln1_gain.as_slice(),
            &lt.ln1,
            &d_normed,
            lg.ln1_gain.as_mut_slice(),
            lg.ln1_bias.as_mut_slice(),
        );
        let d_attn = lt
            .attn_drop
            .as_ref()
            .map_or(d_r1.clone(), |d| hadamard(&d_r1, d));
        let mut d_in = mha_backward(&lt.input, &layer.attn, &lt.mha, &d_attn, &mut lg.attn);
        d_in.add_assign(&d_r1);
        dx = d_in;
    }
    // the positional table is constant
    let d_reduced = relu_backward(&tape.reduced_pre, &dx);
    let g = affine_backward(&tape.input, &p.w_r, &d_reduced);
    grads.w_r.add_assign(&g.dw);
    add_to_row(&mut grads.b_r, &g.db);
}

/// Sentence branch: `ReLU(s·W_s + b_s)`.
pub fn sem_forward<T: Real>(sentence: &[T], p: &ModelParams<T>) -> Result<JointVec<T>> {
    if sentence.len() != p.arch.d_s {
        return Err(Error::Shape(format!(
            "sentence vector has {} values, model expects d_s = {}",
            sentence.len(),
            p.arch.d_s
        )));
    }
    let pre = affine(
        &Matrix::row_vector(sentence.to_vec()),
        &p.w_s,
        p.b_s.as_slice(),
    )?;
    Ok(JointVec(relu(&pre).into_vec()))
}

pub fn sem_backward<T: Real>(
    sentence: &[T],
    p: &ModelParams<T>,
    d_out: &[T],
    grads: &mut ModelParams<T>,
) {
    let x = Matrix::row_vector(sentence.to_vec());
    let pre = affine(&x, &p.w_s, p.b_s.as_slice()).expect("sentence shape checked in forward");
    let d_pre = relu_backward(&pre, &Matrix::row_vector(d_out.to_vec()));
    let g = affine_backward(&x, &p.w_s, &d_pre);
    grads.w_s.add_assign(&g.dw);
    add_to_row(&mut grads.b_s, &g.db);
}

/// Pads every stack with zero rows to the longest one, masks the padding, and
/// embeds them. Output order matches input order.
pub fn embed_batch<T: Real>(
    segments: &[Matrix<T>],
    p: &ModelParams<T>,
) -> Result<Vec<JointVec<T>>> {
    if segments.is_empty() {
        return Err(Error::Invalid("empty batch".into()));
    }
    let t_max = segments.iter().map(Matrix::rows).max().unwrap_or(0);
    segments
        .par_iter()
        .enumerate()
        .map(|(index, stack)| {
            let run = || -> Result<JointVec<T>> {
                if stack.rows() == 0 {
                    return Err(Error::Invalid("empty segment".into()));
                }
                let mask = Mask::prefix(stack.rows(), t_max)?;
                vem_forward(&stack.pad_rows(t_max), p, &mask)
            };
            run().map_err(|e| Error::Item {
                index,
                source: Box::new(e),
            })
        })
        .collect()
}

/// Row range kept when a stack of `len` rows is limited to `max_rows`:
/// centered for evaluation.
pub fn center_crop(len: usize, max_rows: usize) -> (usize, usize) {
    if len <= max_rows {
        return (0, len);
    }
    let start = (len - max_rows) / 2;
    (start, start + max_rows)
}

/// Training-time crop: a random start offset in `[0, len - max_rows]`.
pub fn random_crop(len: usize, max_rows: usize, rng: &mut impl Rng) -> (usize, usize) {
    if len <= max_rows {
        return (0, len);
    }
    let start = rng.random_range(0..=len - max_rows);
    (start, start + max_rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::netmath::ffn;
    use rand::SeedableRng;

    fn toy_arch() -> Architecture {
        Architecture {
            d_c: 6,
            d_s: 5,
            d_model: 4,
            heads: 2,
            layers: 1,
            d_ff: 8,
            d_emb: 3,
            max_rows: 480,
            dropout: 0.0,
        }
    }

    fn random_stack(rows: usize, cols: usize, seed: u64) -> Matrix<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Matrix::new(
            rows,
            cols,
            (0..rows * cols)
                .map(|_| rng.random_range(-1.0..1.0))
                .collect(),
        )
        .unwrap()
    }

    /// Positive biases keep the final ReLU active so the outputs are non-trivial.
    fn toy_params() -> ModelParams<f64> {
        let mut p = ModelParams::<f64>::init(&toy_arch(), 4).unwrap();
        p.b_v.as_mut_slice().iter_mut().for_each(|v| *v = 0.5);
        p.b_s.as_mut_slice().iter_mut().for_each(|v| *v = 0.5);
        p
    }

    #[test]
    fn default_dimensions() {
        let arch = Architecture::default();
        assert_eq!(
            (arch.d_model, arch.heads, arch.layers, arch.d_emb),
            (512, 2, 1, 128)
        );
        assert_eq!(arch.d_ff, 2048);
        let p = ModelParams::<f32>::init(&arch, 0).unwrap();
        let stack = Matrix::filled(3, arch.d_c, 0.01f32);
        let v = vem_forward(&stack, &p, &Mask::all_valid(3)).unwrap();
        assert_eq!(v.len(), 128);
        assert!(v.as_slice().iter().all(|&x| x >= 0.0));
    }

    #[test]
    fn single_position_matches_hand_trace() {
        let p = toy_params();
        let stack = random_stack(1, 6, 9);
        let got = vem_forward(&stack, &p, &Mask::all_valid(1)).unwrap();

        // one position: every attention head returns its own value row
        let layer = &p.layers[0];
        let eps = LAYER_NORM_EPS;
        let mut x: Vec<f64> = (0..4)
            .map(|j| {
                let s: f64 =
                    (0..6).map(|k| stack[(0, k)] * p.w_r[(k, j)]).sum::<f64>() + p.b_r[(0, j)];
                s.max(0.0) + if j % 2 == 0 { 0.0 } else { 1.0 }
            })
            .collect();
        let mut concat = vec![0.0; 4];
        for h in 0..2 {
            for c in 0..2 {
                concat[h * 2 + c] = (0..4).map(|k| x[k] * layer.attn.w_v[h][(k, c)]).sum();
            }
        }
        let attn: Vec<f64> = (0..4)
            .map(|j| (0..4).map(|k| concat[k] * layer.attn.w_o[(k, j)]).sum())
            .collect();
        let norm = |v: &[f64], g: &Matrix<f64>, b: &Matrix<f64>| -> Vec<f64> {
            let m = v.iter().sum::<f64>() / 4.0;
            let var = v.iter().map(|a| (a - m) * (a - m)).sum::<f64>() / 4.0;
            (0..4)
                .map(|j| g[(0, j)] * (v[j] - m) / (var + eps).sqrt() + b[(0, j)])
                .collect()
        };
        let r1: Vec<f64> = x.iter().zip(&attn).map(|(a, b)| a + b).collect();
        let a = norm(&r1, &layer.ln1_gain, &layer.ln1_bias);
        let f = ffn(&Matrix::row_vector(a.clone()), &layer.ffn).unwrap();
        let r2: Vec<f64> = a.iter().zip(f.as_slice()).map(|(a, b)| a + b).collect();
        x = norm(&r2, &layer.ln2_gain, &layer.ln2_bias);
        for j in 0..3 {
            let z: f64 = (0..4).map(|k| x[k] * p.w_v[(k, j)]).sum::<f64>() + p.b_v[(0, j)];
            assert!((got.0[j] - z.max(0.0)).abs() < 1e-12);
        }
    }

    #[test]
    fn sentence_branch() {
        let mut p = toy_params();
        let s = [0.3, -1.0, 2.0, 0.0, 0.5];
        p.w_s = Matrix::zeros(5, 3);
        p.b_s = Matrix::zeros(1, 3);
        assert_eq!(sem_forward(&s, &p).unwrap().0, vec![0.0; 3]);
        assert!(sem_forward(&s[..4], &p).is_err());

        // 2 -> 2 by hand: [1, 2]·[[1, -1], [0.5, 1]] + [0, -4] = [2, -3] -> [2, 0]
        let arch = Architecture {
            d_s: 2,
            d_emb: 2,
            ..toy_arch()
        };
        let mut p = ModelParams::<f64>::zeros(&arch);
        p.w_s = Matrix::new(2, 2, vec![1., -1., 0.5, 1.]).unwrap();
        p.b_s = Matrix::new(1, 2, vec![0., -4.]).unwrap();
        assert_eq!(sem_forward(&[1., 2.], &p).unwrap().0, vec![2., 0.]);
    }

    #[test]
    fn padding_does_not_change_output() {
        let p = toy_params();
        let stack = random_stack(3, 6, 1);
        let plain = vem_forward(&stack, &p, &Mask::all_valid(3)).unwrap();
        let padded = vem_forward(&stack.pad_rows(7), &p, &Mask::prefix(3, 7).unwrap()).unwrap();
        for (a, b) in plain.0.iter().zip(&padded.0) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn batch_matches_individual_passes() {
        let p = toy_params().cast::<f32>();
        let stacks: Vec<Matrix<f32>> = [2, 5, 3]
            .iter()
            .enumerate()
            .map(|(i, &t)| random_stack(t, 6, 20 + i as u64).cast())
            .collect();
        let batch = embed_batch(&stacks, &p).unwrap();
        for (s, b) in stacks.iter().zip(&batch) {
            let one = vem_forward(s, &p, &Mask::all_valid(s.rows())).unwrap();
            for (x, y) in one.0.iter().zip(&b.0) {
                assert!((x - y).abs() < 1e-5);
            }
        }
        let single = embed_batch(&stacks[1..2], &p).unwrap();
        assert_eq!(
            single[0],
            vem_forward(&stacks[1], &p, &Mask::all_valid(5)).unwrap()
        );

        let reversed: Vec<_> = stacks.iter().rev().cloned().collect();
        let rb = embed_batch(&reversed, &p).unwrap();
        for (a, b) in batch.iter().zip(rb.iter().rev()) {
            for (x, y) in a.0.iter().zip(&b.0) {
                assert!((x - y).abs() < 1e-5);
            }
        }

        let bad = vec![stacks[0].clone(), Matrix::zeros(2, 4)];
        match embed_batch(&bad, &p) {
            Err(Error::Item { index: 1, .. }) => {}
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn shapes_and_names_are_consistent() {
        let p = ModelParams::<f32>::init(&toy_arch(), 0).unwrap();
        let names: Vec<String> = p.tensors().into_iter().map(|(n, _)| n).collect();
        let unique: std::collections::HashSet<_> = names.iter().collect();
        assert_eq!(unique.len(), names.len());
        assert_eq!(p.flatten().len(), p.parameter_count());
        let mut q = p.zeros_like();
        q.unflatten(&p.flatten());
        assert_eq!(p, q);
        assert!(p.layers[0].ln1_gain.as_slice().iter().all(|&v| v == 1.0));
        assert!(p.b_r.as_slice().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn crops() {
        assert_eq!(center_crop(10, 480), (0, 10));
        assert_eq!(center_crop(500, 480), (10, 490));
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..20 {
            let (s, e) = random_crop(500, 480, &mut rng);
            assert!(e - s == 480 && e <= 500);
        }
    }
}
