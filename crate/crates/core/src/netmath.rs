//! Numeric kernels of the visual encoder, each paired with its analytic
//! backward pass.
//!
//! Forward functions that are part of the public surface validate shapes and
//! return [`Result`]. The `*_backward` functions assume the shapes already
//! passed a forward call and only assert them.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::{dot, norm, Matrix, Real};

/// Per-position validity flags (`true` = real row, `false` = padding).
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Mask(Vec<bool>);

impl Mask {
    pub fn new(valid: Vec<bool>) -> Result<Self> {
        if !valid.iter().any(|&v| v) {
            return Err(Error::AllMasked);
        }
        Ok(Mask(valid))
    }

    pub fn all_valid(len: usize) -> Self {
        assert!(len > 0, "mask of length 0");
        Mask(vec![true; len])
    }

    /// First `valid` positions real, the remaining `len - valid` padding.
    pub fn prefix(valid: usize, len: usize) -> Result<Self> {
        if valid > len {
            return Err(Error::Shape(format!(
                "{valid} valid rows in a mask of {len}"
            )));
        }
        Mask::new((0..len).map(|i| i < valid).collect())
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn is_valid(&self, i: usize) -> bool {
        self.0[i]
    }

    pub fn valid_count(&self) -> usize {
        self.0.iter().filter(|&&v| v).count()
    }

    pub fn as_slice(&self) -> &[bool] {
        &self.0
    }
}

pub fn relu<T: Real>(x: &Matrix<T>) -> Matrix<T> {
    x.map(|v| v.max(T::zero()))
}

/// Gradient of `relu` given its input. The derivative at exactly 0 is taken
/// as 0.
pub fn relu_backward<T: Real>(x: &Matrix<T>, dy: &Matrix<T>) -> Matrix<T> {
    assert_eq!(x.shape(), dy.shape());
    let data = x
        .as_slice()
        .iter()
        .zip(dy.as_slice())
        .map(|(&xv, &g)| if xv > T::zero() { g } else { T::zero() })
        .collect();
    Matrix::new(x.rows(), x.cols(), data).expect("same shape")
}

/// `x·W + b`, with `b` broadcast over rows.
pub fn affine<T: Real>(x: &Matrix<T>, w: &Matrix<T>, b: &[T]) -> Result<Matrix<T>> {
    if x.cols() != w.rows() || b.len() != w.cols() {
        return Err(Error::Shape(format!(
            "affine: input {}x{}, weight {}x{}, bias {}",
            x.rows(),
            x.cols(),
            w.rows(),
            w.cols(),
            b.len()
        )));
    }
    let mut y = x.matmul(w)?;
    for i in 0..y.rows() {
        for (v, &bj) in y.row_mut(i).iter_mut().zip(b) {
            *v = *v + bj;
        }
    }
    Ok(y)
}

#[derive(Clone, Debug)]
pub struct AffineGrads<T> {
    pub dx: Matrix<T>,
    pub dw: Matrix<T>,
    pub db: Vec<T>,
}

pub fn affine_backward<T: Real>(x: &Matrix<T>, w: &Matrix<T>, dy: &Matrix<T>) -> AffineGrads<T> {
    AffineGrads {
        dx: dy.matmul_t(w).expect("affine dx"),
        dw: x.t_matmul(dy).expect("affine dw"),
        db: dy.col_sums(),
    }
}

/// Row-wise softmax with max subtraction. Entries equal to `-inf` get weight
/// exactly 0.
pub fn softmax_rows<T: Real>(x: &Matrix<T>) -> Matrix<T> {
    let mut out = x.clone();
    for i in 0..out.rows() {
        let row = out.row_mut(i);
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        if max == T::neg_infinity() {
            // fully masked rows are rejected before reaching here
            row.iter_mut().for_each(|v| *v = T::zero());
            continue;
        }
        let mut sum = T::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum = sum + *v;
        }
        for v in row.iter_mut() {
            *v = *v / sum;
        }
    }
    out
}

/// Sinusoidal position table: `sin` on even columns, `cos` on odd ones, with
/// wavelengths growing geometrically up to `10000·2π`.
pub fn positional_encoding<T: Real>(t: usize, d_model: usize) -> Result<Matrix<T>> {
    if d_model == 0 || d_model % 2 != 0 {
        return Err(Error::Shape(format!(
            "positional encoding needs an even d_model, got {d_model}"
        )));
    }
    if t == 0 {
        return Err(Error::EmptyMatrix);
    }
    let mut pe = Matrix::zeros(t, d_model);
    for pos in 0..t {
        for i in 0..d_model / 2 {
            let freq = 10000f64.powf(2.0 * i as f64 / d_model as f64);
            let angle = pos as f64 / freq;
            pe[(pos, 2 * i)] = T::of(angle.sin());
            pe[(pos, 2 * i + 1)] = T::of(angle.cos());
        }
    }
    Ok(pe)
}

/// Intermediate values of one attention head kept for the backward pass.
#[derive(Clone, Debug)]
pub struct AttentionCache<T> {
    /// Attention weights, `t_q × t_k`.
    pub weights: Matrix<T>,
}

fn check_attention_shapes<T: Real>(
    q: &Matrix<T>,
    k: &Matrix<T>,
    v: &Matrix<T>,
    mask: &Mask,
) -> Result<()> {
    if q.cols() != k.cols() || k.rows() != v.rows() || mask.len() != k.rows() {
        return Err(Error::Shape(format!(
            "attention: Q {}x{}, K {}x{}, V {}x{}, mask {}",
            q.rows(),
            q.cols(),
            k.rows(),
            k.cols(),
            v.rows(),
            v.cols(),
            mask.len()
        )));
    }
    if mask.valid_count() == 0 {
        return Err(Error::AllMasked);
    }
    Ok(())
}

/// `softmax(Q·Kᵀ/√d_k)·V` with masked keys excluded.
pub fn scaled_dot_attention<T: Real>(
    q: &Matrix<T>,
    k: &Matrix<T>,
    v: &Matrix<T>,
    mask: &Mask,
) -> Result<Matrix<T>> {
    check_attention_shapes(q, k, v, mask)?;
    Ok(attention_forward(q, k, v, mask).0)
}

pub fn attention_forward<T: Real>(
    q: &Matrix<T>,
    k: &Matrix<T>,
    v: &Matrix<T>,
    mask: &Mask,
) -> (Matrix<T>, AttentionCache<T>) {
    let scale = T::one() / T::of(q.cols() as f64).sqrt();
    let mut scores = q.matmul_t(k).expect("attention scores");
    for i in 0..scores.rows() {
        for (j, s) in scores.row_mut(i).iter_mut().enumerate() {
            *s = if mask.is_valid(j) {
                *s * scale
            } else {
                T::neg_infinity()
            };
        }
    }
    let weights = softmax_rows(&scores);
    let out = weights.matmul(v).expect("attention output");
    (out, AttentionCache { weights })
}

pub struct AttentionGrads<T> {
    pub dq: Matrix<T>,
    pub dk: Matrix<T>,
    pub dv: Matrix<T>,
}

pub fn attention_backward<T: Real>(
    q: &Matrix<T>,
    k: &Matrix<T>,
    v: &Matrix<T>,
    cache: &AttentionCache<T>,
    d_out: &Matrix<T>,
) -> AttentionGrads<T> {
    let scale = T::one() / T::of(q.cols() as f64).sqrt();
    let p = &cache.weights;
    let dv = p.t_matmul(d_out).expect("attention dV");
    let dp = d_out.matmul_t(v).expect("attention dP");
    let mut ds = Matrix::zeros(p.rows(), p.cols());
    for i in 0..p.rows() {
        let row_dot = dot(p.row(i), dp.row(i));
        for j in 0..p.cols() {
            ds[(i, j)] = p[(i, j)] * (dp[(i, j)] - row_dot) * scale;
        }
    }
    AttentionGrads {
        dq: ds.matmul(k).expect("attention dQ"),
        dk: ds.t_matmul(q).expect("attention dK"),
        dv,
    }
}

/// Per-head projections plus the output mixing matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionParams<T = f32> {
    pub w_q: Vec<Matrix<T>>,
    pub w_k: Vec<Matrix<T>>,
    pub w_v: Vec<Matrix<T>>,
    /// `(heads·d_k) × d_model`.
    pub w_o: Matrix<T>,
}

impl<T: Real> AttentionParams<T> {
    pub fn heads(&self) -> usize {
        self.w_q.len()
    }

    pub fn d_model(&self) -> usize {
        self.w_o.cols()
    }

    pub fn d_k(&self) -> usize {
        self.w_q.first().map_or(0, Matrix::cols)
    }

    pub fn zeros(d_model: usize, heads: usize) -> Self {
        let d_k = d_model / heads;
        let per_head = || vec![Matrix::zeros(d_model, d_k); heads];
        AttentionParams {
            w_q: per_head(),
            w_k: per_head(),
            w_v: per_head(),
            w_o: Matrix::zeros(heads * d_k, d_model),
        }
    }

    pub fn check(&self) -> Result<()> {
        let h = self.heads();
        let d_model = self.d_model();
        if h == 0 || d_model % h != 0 {
            return Err(Error::Shape(format!(
                "d_model {d_model} not divisible by {h} heads"
            )));
        }
        let d_k = d_model / h;
        let ok = self.w_k.len() == h
            && self.w_v.len() == h
            && self
                .w_q
                .iter()
                .chain(&self.w_k)
                .chain(&self.w_v)
                .all(|w| w.shape() == (d_model, d_k))
            && self.w_o.shape() == (h * d_k, d_model);
        if !ok {
            return Err(Error::Shape(
                "inconsistent attention parameter shapes".into(),
            ));
        }
        Ok(())
    }
}

/// Cached projections and per-head caches of one multi-head attention call.
#[derive(Clone, Debug)]
pub struct MhaCache<T> {
    q: Vec<Matrix<T>>,
    k: Vec<Matrix<T>>,
    v: Vec<Matrix<T>>,
    heads: Vec<AttentionCache<T>>,
    concat: Matrix<T>,
}

/// Self-attention with `Q = K = V = x`, heads concatenated then mixed by `W_o`.
pub fn multi_head_attention<T: Real>(
    x: &Matrix<T>,
    p: &AttentionParams<T>,
    mask: &Mask,
) -> Result<Matrix<T>> {
    p.check()?;
    if x.cols() != p.d_model() || mask.len() != x.rows() {
        return Err(Error::Shape(format!(
            "attention input {}x{} with d_model {} and mask {}",
            x.rows(),
            x.cols(),
            p.d_model(),
            mask.len()
        )));
    }
    if mask.valid_count() == 0 {
        return Err(Error::AllMasked);
    }
    Ok(mha_forward(x, p, mask).0)
}

pub fn mha_forward<T: Real>(
    x: &Matrix<T>,
    p: &AttentionParams<T>,
    mask: &Mask,
) -> (Matrix<T>, MhaCache<T>) {
    let h = p.heads();
    let d_k = p.d_k();
    let mut concat = Matrix::zeros(x.rows(), h * d_k);
    let mut cache = MhaCache {
        q: Vec::with_capacity(h),
        k: Vec::with_capacity(h),
        v: Vec::with_capacity(h),
        heads: Vec::with_capacity(h),
        concat: Matrix::zeros(0, 0),
    };
    for i in 0..h {
        let q = x.matmul(&p.w_q[i]).expect("W_q");
        let k = x.matmul(&p.w_k[i]).expect("W_k");
        let v = x.matmul(&p.w_v[i]).expect("W_v");
        let (head, hc) = attention_forward(&q, &k, &v, mask);
        concat.set_col_block(i * d_k, &head);
        cache.q.push(q);
        cache.k.push(k);
        cache.v.push(v);
        cache.heads.push(hc);
    }
    let out = concat.matmul(&p.w_o).expect("W_o");
    cache.concat = concat;
    (out, cache)
}

pub fn mha_backward<T: Real>(
    x: &Matrix<T>,
    p: &AttentionParams<T>,
    cache: &MhaCache<T>,
    d_out: &Matrix<T>,
    grads: &mut AttentionParams<T>,
) -> Matrix<T> {
    let d_k = p.d_k();
    grads
        .w_o
        .add_assign(&cache.concat.t_matmul(d_out).expect("dW_o"));
    let d_concat = d_out.matmul_t(&p.w_o).expect("d concat");
    let mut dx = Matrix::zeros(x.rows(), x.cols());
    for i in 0..p.heads() {
        let d_head = d_concat.col_block(i * d_k, d_k);
        let g = attention_backward(
            &cache.q[i],
            &cache.k[i],
            &cache.v[i],
            &cache.heads[i],
            &d_head,
        );
        grads.w_q[i].add_assign(&x.t_matmul(&g.dq).expect("dW_q"));
        grads.w_k[i].add_assign(&x.t_matmul(&g.dk).expect("dW_k"));
        grads.w_v[i].add_assign(&x.t_matmul(&g.dv).expect("dW_v"));
        dx.add_assign(&g.dq.matmul_t(&p.w_q[i]).expect("dx q"));
        dx.add_assign(&g.dk.matmul_t(&p.w_k[i]).expect("dx k"));
        dx.add_assign(&g.dv.matmul_t(&p.w_v[i]).expect("dx v"));
    }
    dx
}

/// Position-wise feed-forward parameters. Biases are `1 × n`.
#[derive(Clone, Debug, PartialEq)]
pub struct FfnParams<T = f32> {
    pub w1: Matrix<T>,
    pub b1: Matrix<T>,
    pub w2: Matrix<T>,
    pub b2: Matrix<T>,
}

impl<T: Real> FfnParams<T> {
    pub fn zeros(d_model: usize, d_ff: usize) -> Self {
        FfnParams {
            w1: Matrix::zeros(d_model, d_ff),
            b1: Matrix::zeros(1, d_ff),
            w2: Matrix::zeros(d_ff, d_model),
            b2: Matrix::zeros(1, d_model),
        }
    }
}

#[derive(Clone, Debug)]
pub struct FfnCache<T> {
    pre: Matrix<T>,
    hidden: Matrix<T>,
}

impl<T> FfnCache<T> {
    /// Hidden pre-activations `x·W1 + b1`.
    pub fn pre(&self) -> &Matrix<T> {
        &self.pre
    }
}

/// `max(0, x·W1 + b1)·W2 + b2`, row by row.
pub fn ffn<T: Real>(x: &Matrix<T>, p: &FfnParams<T>) -> Result<Matrix<T>> {
    let pre = affine(x, &p.w1, p.b1.as_slice())?;
    affine(&relu(&pre), &p.w2, p.b2.as_slice())
}

pub fn ffn_forward<T: Real>(x: &Matrix<T>, p: &FfnParams<T>) -> (Matrix<T>, FfnCache<T>) {
    let pre = affine(x, &p.w1, p.b1.as_slice()).expect("ffn W1");
    let hidden = relu(&pre);
    let out = affine(&hidden, &p.w2, p.b2.as_slice()).expect("ffn W2");
    (out, FfnCache { pre, hidden })
}

pub fn ffn_backward<T: Real>(
    x: &Matrix<T>,
    p: &FfnParams<T>,
    cache: &FfnCache<T>,
    d_out: &Matrix<T>,
    grads: &mut FfnParams<T>,
) -> Matrix<T> {
    let g2 = affine_backward(&cache.hidden, &p.w2, d_out);
    grads.w2.add_assign(&g2.dw);
    add_to_row(&mut grads.b2, &g2.db);
    let d_pre = relu_backward(&cache.pre, &g2.dx);
    let g1 = affine_backward(x, &p.w1, &d_pre);
    grads.w1.add_assign(&g1.dw);
    add_to_row(&mut grads.b1, &g1.db);
    g1.dx
}

pub fn add_to_row<T: Real>(m: &mut Matrix<T>, v: &[T]) {
    for (a, &b) in m.as_mut_slice().iter_mut().zip(v) {
        *a = *a + b;
    }
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Clone, Debug)]
pub struct LayerNormCache<T> {
    normalized: Matrix<T>,
    inv_std: Vec<T>,
}

/// Per-row standardization followed by `gain ⊙ x̂ + bias`.
pub fn layer_norm<T: Real>(x: &Matrix<T>, gain: &[T], bias: &[T], eps: T) -> Result<Matrix<T>> {
    if gain.len() != x.cols() || bias.len() != x.cols() {
        return Err(Error::Shape(format!(
            "layer_norm over {} columns with gain {} and bias {}",
            x.cols(),
            gain.len(),
            bias.len()
        )));
    }
    if eps <= T::zero() {
        return Err(Error::Config("layer_norm eps must be positive".into()));
    }
    Ok(layer_norm_forward(x, gain, bias, eps).0)
}

pub fn layer_norm_forward<T: Real>(
    x: &Matrix<T>,
    gain: &[T],
    bias: &[T],
    eps: T,
) -> (Matrix<T>, LayerNormCache<T>) {
    let n = T::of(x.cols() as f64);
    let mut normalized = Matrix::zeros(x.rows(), x.cols());
    let mut out = Matrix::zeros(x.rows(), x.cols());
    let mut inv_std = Vec::with_capacity(x.rows());
    for i in 0..x.rows() {
        let row = x.row(i);
        let mean = row.iter().copied().sum::<T>() / n;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
        let inv = T::one() / (var + eps).sqrt();
        inv_std.push(inv);
        for j in 0..x.cols() {
            let z = (row[j] - mean) * inv;
            normalized[(i, j)] = z;
            out[(i, j)] = gain[j] * z + bias[j];
        }
    }
    (
        out,
        LayerNormCache {
            normalized,
            inv_std,
        },
    )
}

/// Returns `dx`; gain and bias gradients are added into `d_gain`, `d_bias`.
pub fn layer_norm_backward<T: Real>(
    gain: &[T],
    cache: &LayerNormCache<T>,
    d_out: &Matrix<T>,
    d_gain: &mut [T],
    d_bias: &mut [T],
) -> Matrix<T> {
    let cols = d_out.cols();
    let n = T::of(cols as f64);
    let mut dx = Matrix::zeros(d_out.rows(), cols);
    for i in 0..d_out.rows() {
        let dy = d_out.row(i);
        let z = cache.normalized.row(i);
        let mut mean_dz = T::zero();
        let mut mean_dz_z = T::zero();
        for j in 0..cols {
            d_gain[j] = d_gain[j] + dy[j] * z[j];
            d_bias[j] = d_bias[j] + dy[j];
            let dz = dy[j] * gain[j];
            mean_dz = mean_dz + dz;
            mean_dz_z = mean_dz_z + dz * z[j];
        }
        mean_dz = mean_dz / n;
        mean_dz_z = mean_dz_z / n;
        let inv = cache.inv_std[i];
        for j in 0..cols {
            let dz = dy[j] * gain[j];
            dx[(i, j)] = inv * (dz - mean_dz - z[j] * mean_dz_z);
        }
    }
    dx
}

/// Mean over the rows marked valid.
pub fn masked_mean_pool<T: Real>(x: &Matrix<T>, mask: &Mask) -> Result<Vec<T>> {
    if mask.len() != x.rows() {
        return Err(Error::Shape(format!(
            "pool over {} rows with a mask of {}",
            x.rows(),
            mask.len()
        )));
    }
    let count = mask.valid_count();
    if count == 0 {
        return Err(Error::AllMasked);
    }
    let mut out = vec![T::zero(); x.cols()];
    for (i, row) in x.iter_rows().enumerate() {
        if mask.is_valid(i) {
            for (o, &v) in out.iter_mut().zip(row) {
                *o = *o + v;
            }
        }
    }
    let inv = T::one() / T::of(count as f64);
    out.iter_mut().for_each(|v| *v = *v * inv);
    Ok(out)
}

pub fn masked_mean_pool_backward<T: Real>(mask: &Mask, d_out: &[T]) -> Matrix<T> {
    let inv = T::one() / T::of(mask.valid_count() as f64);
    let mut dx = Matrix::zeros(mask.len(), d_out.len());
    for i in 0..mask.len() {
        if mask.is_valid(i) {
            for (d, &g) in dx.row_mut(i).iter_mut().zip(d_out) {
                *d = g * inv;
            }
        }
    }
    dx
}

pub fn cosine_sim<T: Real>(a: &[T], b: &[T]) -> Result<T> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!(
            "cosine between lengths {} and {}",
            a.len(),
            b.len()
        )));
    }
    let (na, nb) = (norm(a), norm(b));
    if na == T::zero() || nb == T::zero() {
        return Err(Error::ZeroNorm);
    }
    // rounding can push |cos| a hair above 1
    Ok((dot(a, b) / (na * nb)).max(-T::one()).min(T::one()))
}

pub fn l2_dist<T: Real>(a: &[T], b: &[T]) -> Result<T> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!(
            "distance between lengths {} and {}",
            a.len(),
            b.len()
        )));
    }
    Ok(a.iter()
        .zip(b)
        .map(|(&x, &y)| (x - y) * (x - y))
        .sum::<T>()
        .sqrt())
}

pub const FINITE_DIFF_STEP: f64 = 1e-3;

/// Central-difference gradient of `f` at `x`, one coordinate at a time.
pub fn finite_diff_grad<F>(mut f: F, x: &[f64], h: f64) -> Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> f64,
{
    if h <= 0.0 {
        return Err(Error::Config(
            "finite-difference step must be positive".into(),
        ));
    }
    let mut probe = x.to_vec();
    let mut grad = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        probe[i] = x[i] + h;
        let up = f(&probe);
        probe[i] = x[i] - h;
        let down = f(&probe);
        probe[i] = x[i];
        if !up.is_finite() || !down.is_finite() {
            return Err(Error::Invalid(format!(
                "objective is non-finite around coordinate {i}"
            )));
        }
        grad.push((up - down) / (2.0 * h));
    }
    Ok(grad)
}

/// Relative error used by the gradient checks:
/// `|a - b| / max(1, |a|, |b|)` taken over coordinates, worst case.
pub fn max_relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| (a - n).abs() / 1f64.max(a.abs()).max(n.abs()))
        .fold(0.0, f64::max)
}
