//! Binary spherical quantization.
//!
//! A latent vector `z ∈ R^d` is projected onto the unit sphere and each
//! coordinate is replaced by `±1/√d`. The sign pattern, packed LSB-first
//! (bit `i` ↔ coordinate `i`, set when the coordinate is non-negative), is
//! the token index in `[0, 2^d)`. Codes therefore always have unit norm and
//! the codebook is implicit.
//!
//! Gradients pass through the sign step unchanged (straight-through); the
//! sphere projection is differentiated exactly. The auxiliary regularizer
//! works on soft bits `p = σ(β·u)` and is measured in nats.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Matrix;

/// Below this norm a latent is mapped to the first basis vector.
pub const SPHERE_EPS: f64 = 1e-12;

pub const MAX_CODE_DIM: usize = 24;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BsqConfig {
    /// Bits per token.
    pub dim: usize,
    pub inv_temperature: f64,
    /// Weight of the regularizer inside the training objective.
    pub entropy_weight: f64,
    /// Coefficient of the batch-level bit-balance entropy.
    pub diversity_weight: f64,
}

impl Default for BsqConfig {
    fn default() -> Self {
        Self { dim: 13, inv_temperature: 100.0, entropy_weight: 0.1, diversity_weight: 1.0 }
    }
}

impl BsqConfig {
    pub fn validate(&self) -> Result<()> {
        if !(1..=MAX_CODE_DIM).contains(&self.dim) {
            return Err(Error::config(format!("bsq.dim must be in 1..={MAX_CODE_DIM}, got {}", self.dim)));
        }
        if !(self.inv_temperature > 0.0 && self.inv_temperature.is_finite()) {
            return Err(Error::config("bsq.inv_temperature must be positive"));
        }
        if !(self.entropy_weight >= 0.0 && self.entropy_weight.is_finite()) {
            return Err(Error::config("bsq.entropy_weight must be nonnegative"));
        }
        if !(self.diversity_weight >= 0.0 && self.diversity_weight.is_finite()) {
            return Err(Error::config("bsq.diversity_weight must be nonnegative"));
        }
        Ok(())
    }

    pub fn vocab_size(&self) -> u64 {
        1u64 << self.dim
    }
}

/// One quantized slot.
#[derive(Clone, Debug, PartialEq)]
pub struct QuantizedSlot<T> {
    pub code: Vec<T>,
    pub index: u64,
}

pub fn project_sphere<T: Scalar>(z: &[T]) -> Result<Vec<T>> {
    if z.iter().any(|x| !x.is_finite()) {
        return Err(Error::numeric("non-finite latent passed to sphere projection"));
    }
    let norm = z.iter().map(|x| x.as_f64() * x.as_f64()).sum::<f64>().sqrt();
    if norm > SPHERE_EPS {
        let n = T::lit(norm);
        Ok(z.iter().map(|&x| x / n).collect())
    } else {
        let mut u = vec![T::zero(); z.len()];
        if let Some(first) = u.first_mut() {
            *first = T::one();
        }
        Ok(u)
    }
}

/// Backward pass of [`project_sphere`]: `dz = (du − u·(u·du)) / ‖z‖`.
///
/// Degenerate inputs (the ε branch) are locally constant and get zero gradient.
pub fn project_sphere_backward<T: Scalar>(z: &[T], u: &[T], du: &[T]) -> Vec<T> {
    let norm = z.iter().map(|x| x.as_f64() * x.as_f64()).sum::<f64>().sqrt();
    if norm <= SPHERE_EPS {
        return vec![T::zero(); z.len()];
    }
    let n = T::lit(norm);
    let radial: T = u.iter().zip(du).fold(T::zero(), |acc, (&a, &b)| acc + a * b);
    u.iter().zip(du).map(|(&ui, &dui)| (dui - ui * radial) / n).collect()
}

/// Sign quantization with ties (`u_i = 0`) mapped to `+`.
pub fn quantize<T: Scalar>(u: &[T]) -> QuantizedSlot<T> {
    let scale = T::one() / T::lit(u.len() as f64).sqrt();
    let mut index = 0u64;
    let code = u
        .iter()
        .enumerate()
        .map(|(i, &x)| {
            if x >= T::zero() {
                index |= 1 << i;
                scale
            } else {
                -scale
            }
        })
        .collect();
    QuantizedSlot { code, index }
}

/// Code vector for a token index.
pub fn dequantize<T: Scalar>(index: u64, dim: usize) -> Result<Vec<T>> {
    if dim == 0 || dim > MAX_CODE_DIM {
        return Err(Error::input(format!("code dimension {dim} outside 1..={MAX_CODE_DIM}")));
    }
    if index >= 1u64 << dim {
        return Err(Error::input(format!("index {index} out of range for {dim}-bit codes")));
    }
    let scale = T::one() / T::lit(dim as f64).sqrt();
    Ok((0..dim).map(|i| if index >> i & 1 == 1 { scale } else { -scale }).collect())
}

/// Straight-through contract: the sign step passes its cotangent through
/// unchanged, i.e. `∂code/∂u = I`.
pub fn straight_through_backward<T: Scalar>(d_code: &[T]) -> Vec<T> {
    d_code.to_vec()
}

fn logistic(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// `p_i = σ(β·u_i)`.
pub fn soft_bits<T: Scalar>(u: &[T], inv_temperature: f64) -> Vec<T> {
    u.iter().map(|&x| T::lit(logistic(inv_temperature * x.as_f64()))).collect()
}

/// Binary entropy in nats with `0·ln 0 = 0`.
pub fn binary_entropy(p: f64) -> f64 {
    let term = |q: f64| if q > 0.0 { -q * q.ln() } else { 0.0 };
    term(p) + term(1.0 - p)
}

/// Binary entropy of `σ(x)`, stable for large `|x|`.
fn logit_entropy(x: f64) -> f64 {
    let p = logistic(x);
    p * softplus(-x) + (1.0 - p) * softplus(x)
}

/// Regularizer value:
/// `mean_n Σ_i H(p_ni) − diversity · Σ_i H(mean_n p_ni)`.
pub fn entropy_loss<T: Scalar>(batch_u: &Matrix<T>, cfg: &BsqConfig) -> Result<f64> {
    Ok(entropy_loss_with_grad(batch_u, cfg)?.0)
}

/// Regularizer value and its gradient with respect to every row of `batch_u`.
pub fn entropy_loss_with_grad<T: Scalar>(batch_u: &Matrix<T>, cfg: &BsqConfig) -> Result<(f64, Matrix<T>)> {
    let (n, d) = batch_u.shape();
    if n == 0 {
        return Err(Error::input("entropy loss needs at least one sample"));
    }
    let beta = cfg.inv_temperature;
    let inv_n = 1.0 / n as f64;

    let mut per_sample = 0.0;
    let mut mean_p = vec![0.0f64; d];
    let mut mean_q = vec![0.0f64; d];
    for r in 0..n {
        for (i, &u) in batch_u.row(r).iter().enumerate() {
            let x = beta * u.as_f64();
            per_sample += logit_entropy(x);
            mean_p[i] += logistic(x);
            mean_q[i] += logistic(-x);
        }
    }
    per_sample *= inv_n;
    mean_p.iter_mut().for_each(|p| *p *= inv_n);
    mean_q.iter_mut().for_each(|q| *q *= inv_n);

    let term = |q: f64| if q > 0.0 { -q * q.ln() } else { 0.0 };
    let balance: f64 = mean_p.iter().zip(&mean_q).map(|(&p, &q)| term(p) + term(q)).sum();
    let loss = per_sample - cfg.diversity_weight * balance;

    // dH/dp at the batch mean; infinite slopes only occur where dp/du underflows to zero.
    let balance_slope: Vec<f64> = mean_p
        .iter()
        .zip(&mean_q)
        .map(|(&p, &q)| if p > 0.0 && q > 0.0 { q.ln() - p.ln() } else { 0.0 })
        .collect();

    let mut grad = Matrix::zeros(n, d);
    for r in 0..n {
        for (i, &u) in batch_u.row(r).iter().enumerate() {
            let x = beta * u.as_f64();
            let pq = logistic(x) * logistic(-x);
            // d/dx H(σ(x)) = −x·σ(x)σ(−x)
            let own = -x * pq;
            let shared = balance_slope[i] * pq;
            grad[(r, i)] = T::lit(beta * inv_n * (own - cfg.diversity_weight * shared));
        }
    }
    Ok((loss, grad))
}

/// Quantized codes of one chunk: `L x d` code vectors plus their indices.
#[derive(Clone, Debug, PartialEq)]
pub struct CodeMatrix<T> {
    pub codes: Matrix<T>,
    pub indices: Vec<u64>,
}

impl<T: Scalar> CodeMatrix<T> {
    /// Quantizes already sphere-projected rows.
    pub fn from_sphere(u: &Matrix<T>) -> Self {
        let mut codes = Matrix::zeros(u.rows(), u.cols());
        let mut indices = Vec::with_capacity(u.rows());
        for r in 0..u.rows() {
            let q = quantize(u.row(r));
            codes.row_mut(r).copy_from_slice(&q.code);
            indices.push(q.index);
        }
        Self { codes, indices }
    }

    pub fn from_indices(indices: &[u64], dim: usize) -> Result<Self> {
        let mut codes = Matrix::zeros(indices.len(), dim);
        for (r, &k) in indices.iter().enumerate() {
            codes.row_mut(r).copy_from_slice(&dequantize::<T>(k, dim)?);
        }
        Ok(Self { codes, indices: indices.to_vec() })
    }

    pub fn num_slots(&self) -> usize {
        self.codes.rows()
    }

    pub fn dim(&self) -> usize {
        self.codes.cols()
    }

    /// Recomputes every index from the sign pattern of its row.
    pub fn reindex(&mut self) {
        for r in 0..self.codes.rows() {
            self.indices[r] = quantize(self.codes.row(r)).index;
        }
    }

    pub fn cast<U: Scalar>(&self) -> CodeMatrix<U> {
        CodeMatrix { codes: self.codes.cast(), indices: self.indices.clone() }
    }
}

pub const CODES_MAGIC: &[u8; 4] = b"LATC";
pub const CODES_VERSION: u32 = 1;

/// Writes a codes file: magic, version, L, d, `L·d` f32 codes, `L` u64 indices.
pub fn write_codes<T: Scalar>(codes: &CodeMatrix<T>, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(CODES_MAGIC)?;
    w.write_all(&CODES_VERSION.to_le_bytes())?;
    w.write_all(&(codes.num_slots() as u32).to_le_bytes())?;
    w.write_all(&(codes.dim() as u32).to_le_bytes())?;
    for &x in codes.codes.as_slice() {
        w.write_all(&(x.as_f64() as f32).to_le_bytes())?;
    }
    for &k in &codes.indices {
        w.write_all(&k.to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_codes(path: &Path) -> Result<CodeMatrix<f32>> {
    let mut bytes = Vec::new();
    BufReader::new(File::open(path)?).read_to_end(&mut bytes)?;
    decode_codes(&bytes)
}

pub(crate) fn decode_codes(bytes: &[u8]) -> Result<CodeMatrix<f32>> {
    if bytes.len() < 16 || &bytes[..4] != CODES_MAGIC {
        return Err(Error::format("codes file: bad magic"));
    }
    let word = |at: usize| u32::from_le_bytes(bytes[at..at + 4].try_into().unwrap());
    let version = word(4);
    if version != CODES_VERSION {
        return Err(Error::format(format!("codes file: unsupported version {version}")));
    }
    let (slots, dim) = (word(8) as usize, word(12) as usize);
    if dim == 0 || dim > MAX_CODE_DIM {
        return Err(Error::format(format!("codes file: code dimension {dim} out of range")));
    }
    let expected = 16 + slots * dim * 4 + slots * 8;
    if bytes.len() != expected {
        return Err(Error::format(format!("codes file: expected {expected} bytes, found {}", bytes.len())));
    }
    let mut data = Vec::with_capacity(slots * dim);
    for c in bytes[16..16 + slots * dim * 4].chunks_exact(4) {
        let v = f32::from_le_bytes(c.try_into().unwrap());
        if !v.is_finite() {
            return Err(Error::format("codes file: non-finite code value"));
        }
        data.push(v);
    }
    let indices: Vec<u64> = bytes[16 + slots * dim * 4..]
        .chunks_exact(8)
        .map(|c| u64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    if let Some(&bad) = indices.iter().find(|&&k| k >= 1u64 << dim) {
        return Err(Error::format(format!("codes file: index {bad} out of range")));
    }
    Ok(CodeMatrix { codes: Matrix::from_vec(slots, dim, data), indices })
}
