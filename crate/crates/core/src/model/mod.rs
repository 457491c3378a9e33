//! Compressor, quantizer and decompressor.
//!
//! The compressor appends `L` learned query tokens to the projected feature
//! sequence, runs full self-attention over all `T + L` positions and keeps
//! only the query positions, projected to the code width `d`. The
//! decompressor sees nothing but the codes: `T` copies of a learned mask
//! embedding followed by the projected codes, read back from the first `T`
//! outputs.

mod checkpoint;
mod config;
pub mod layers;
mod tokenizer;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use config::{ModelConfig, POSITIONAL_CAPACITY};
pub use tokenizer::Tokenizer;

use crate::bsq::{self, BsqConfig, CodeMatrix};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Matrix;
use layers::{Block, BlockTrace, LayerNorm, LayerNormTrace, Linear, ParamSet};

const EMBED_STD: f64 = 0.02;

#[derive(Clone, Debug, PartialEq)]
pub struct Encoder<T> {
    pub input: Linear<T>,
    pub queries: Matrix<T>,
    pub pos_feat: Matrix<T>,
    pub pos_lat: Matrix<T>,
    pub blocks: Vec<Block<T>>,
    pub norm: LayerNorm<T>,
    pub output: Linear<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Decoder<T> {
    pub code_input: Linear<T>,
    pub mask: Matrix<T>,
    pub pos_mask: Matrix<T>,
    pub pos_code: Matrix<T>,
    pub blocks: Vec<Block<T>>,
    pub norm: LayerNorm<T>,
    pub output: Linear<T>,
}

/// All learned parameters. Gradients use the same type.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<T> {
    pub encoder: Encoder<T>,
    pub decoder: Decoder<T>,
}

impl<T> ParamSet<T> for Encoder<T> {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Matrix<T>)>) {
        let name = |n: &str| layers::join_name(prefix, n);
        self.input.visit(&name("input"), out);
        out.push((name("queries"), &self.queries));
        out.push((name("pos_feat"), &self.pos_feat));
        out.push((name("pos_lat"), &self.pos_lat));
        for (i, b) in self.blocks.iter().enumerate() {
            b.visit(&name(&format!("blocks.{i}")), out);
        }
        self.norm.visit(&name("norm"), out);
        self.output.visit(&name("output"), out);
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Matrix<T>)>) {
        let name = |n: &str| layers::join_name(prefix, n);
        self.input.visit_mut(&name("input"), out);
        out.push((name("queries"), &mut self.queries));
        out.push((name("pos_feat"), &mut self.pos_feat));
        out.push((name("pos_lat"), &mut self.pos_lat));
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.visit_mut(&name(&format!("blocks.{i}")), out);
        }
        self.norm.visit_mut(&name("norm"), out);
        self.output.visit_mut(&name("output"), out);
    }
}

impl<T> ParamSet<T> for Decoder<T> {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Matrix<T>)>) {
        let name = |n: &str| layers::join_name(prefix, n);
        self.code_input.visit(&name("code_input"), out);
        out.push((name("mask"), &self.mask));
        out.push((name("pos_mask"), &self.pos_mask));
        out.push((name("pos_code"), &self.pos_code));
        for (i, b) in self.blocks.iter().enumerate() {
            b.visit(&name(&format!("blocks.{i}")), out);
        }
        self.norm.visit(&name("norm"), out);
        self.output.visit(&name("output"), out);
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Matrix<T>)>) {
        let name = |n: &str| layers::join_name(prefix, n);
        self.code_input.visit_mut(&name("code_input"), out);
        out.push((name("mask"), &mut self.mask));
        out.push((name("pos_mask"), &mut self.pos_mask));
        out.push((name("pos_code"), &mut self.pos_code));
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.visit_mut(&name(&format!("blocks.{i}")), out);
        }
        self.norm.visit_mut(&name("norm"), out);
        self.output.visit_mut(&name("output"), out);
    }
}

impl<T: Scalar> ModelParams<T> {
    /// Gaussian initialization: `0.02` for embeddings and queries,
    /// `1/√fan_in` for projection weights, zero biases, unit norm gains.
    pub fn init(cfg: &ModelConfig, bsq: &BsqConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        bsq.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let slots = cfg.num_slots();
        let (we, wd) = (cfg.enc_width, cfg.dec_width);
        let encoder = Encoder {
            input: Linear::init(cfg.feature_dim, we, &mut rng),
            queries: Matrix::randn(slots, we, EMBED_STD, &mut rng),
            pos_feat: Matrix::randn(cfg.max_frames, we, EMBED_STD, &mut rng),
            pos_lat: Matrix::randn(slots, we, EMBED_STD, &mut rng),
            blocks: (0..cfg.enc_layers).map(|_| Block::init(we, cfg.heads, cfg.mlp_ratio, &mut rng)).collect(),
            norm: LayerNorm::new(we),
            output: Linear::init(we, bsq.dim, &mut rng),
        };
        let decoder = Decoder {
            code_input: Linear::init(bsq.dim, wd, &mut rng),
            mask: Matrix::randn(1, wd, EMBED_STD, &mut rng),
            pos_mask: Matrix::randn(cfg.max_frames, wd, EMBED_STD, &mut rng),
            pos_code: Matrix::randn(slots, wd, EMBED_STD, &mut rng),
            blocks: (0..cfg.dec_layers).map(|_| Block::init(wd, cfg.heads, cfg.mlp_ratio, &mut rng)).collect(),
            norm: LayerNorm::new(wd),
            output: Linear::init(wd, cfg.feature_dim, &mut rng),
        };
        Ok(Self { encoder, decoder })
    }

    pub fn tensors(&self) -> Vec<(String, &Matrix<T>)> {
        let mut out = Vec::new();
        self.encoder.visit("encoder", &mut out);
        self.decoder.visit("decoder", &mut out);
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<(String, &mut Matrix<T>)> {
        let mut out = Vec::new();
        self.encoder.visit_mut("encoder", &mut out);
        self.decoder.visit_mut("decoder", &mut out);
        out
    }

    /// Same shapes, all zeros.
    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for (_, m) in z.tensors_mut() {
            m.as_mut_slice().iter_mut().for_each(|x| *x = T::zero());
        }
        z
    }

    pub fn num_parameters(&self) -> usize {
        self.tensors().iter().map(|(_, m)| m.len()).sum()
    }

    pub fn add_assign(&mut self, other: &Self) {
        for ((_, a), (_, b)) in self.tensors_mut().into_iter().zip(other.tensors()) {
            a.add_assign(b);
        }
    }

    pub fn cast<U: Scalar>(&self) -> ModelParams<U> {
        let mut out: ModelParams<U> = ModelParams {
            encoder: Encoder {
                input: cast_linear(&self.encoder.input),
                queries: self.encoder.queries.cast(),
                pos_feat: self.encoder.pos_feat.cast(),
                pos_lat: self.encoder.pos_lat.cast(),
                blocks: Vec::new(),
                norm: LayerNorm { gamma: self.encoder.norm.gamma.cast(), beta: self.encoder.norm.beta.cast() },
                output: cast_linear(&self.encoder.output),
            },
            decoder: Decoder {
                code_input: cast_linear(&self.decoder.code_input),
                mask: self.decoder.mask.cast(),
                pos_mask: self.decoder.pos_mask.cast(),
                pos_code: self.decoder.pos_code.cast(),
                blocks: Vec::new(),
                norm: LayerNorm { gamma: self.decoder.norm.gamma.cast(), beta: self.decoder.norm.beta.cast() },
                output: cast_linear(&self.decoder.output),
            },
        };
        out.encoder.blocks = self.encoder.blocks.iter().map(cast_block).collect();
        out.decoder.blocks = self.decoder.blocks.iter().map(cast_block).collect();
        out
    }
}

fn cast_linear<T: Scalar, U: Scalar>(l: &Linear<T>) -> Linear<U> {
    Linear { weight: l.weight.cast(), bias: l.bias.cast() }
}

fn cast_block<T: Scalar, U: Scalar>(b: &Block<T>) -> Block<U> {
    Block {
        ln1: LayerNorm { gamma: b.ln1.gamma.cast(), beta: b.ln1.beta.cast() },
        attn: layers::Attention {
            heads: b.attn.heads,
            query: cast_linear(&b.attn.query),
            key: cast_linear(&b.attn.key),
            value: cast_linear(&b.attn.value),
            output: cast_linear(&b.attn.output),
        },
        ln2: LayerNorm { gamma: b.ln2.gamma.cast(), beta: b.ln2.beta.cast() },
        mlp: layers::Mlp { fc1: cast_linear(&b.mlp.fc1), fc2: cast_linear(&b.mlp.fc2) },
    }
}

fn check_frames(frames: usize, cfg: &ModelConfig) -> Result<()> {
    if frames == 0 {
        return Err(Error::input("sequence must have at least one frame"));
    }
    if frames > cfg.max_frames {
        return Err(Error::Capacity { frames, capacity: cfg.max_frames });
    }
    Ok(())
}

pub struct EncoderTrace<T> {
    features: Matrix<T>,
    pub blocks: Vec<BlockTrace<T>>,
    norm: LayerNormTrace<T>,
    normed_slots: Matrix<T>,
}

impl<T: Scalar> Encoder<T> {
    pub fn forward(&self, features: &Matrix<T>) -> (Matrix<T>, EncoderTrace<T>) {
        let frames = features.rows();
        let slots = self.queries.rows();
        let mut feat = self.input.forward(features);
        feat.add_assign(&self.pos_feat.slice_rows(0, frames));
        let mut lat = self.queries.clone();
        lat.add_assign(&self.pos_lat);
        let mut x = feat.vstack(&lat);
        let mut traces = Vec::with_capacity(self.blocks.len());
        for b in &self.blocks {
            let (y, t) = b.forward(&x);
            x = y;
            traces.push(t);
        }
        let (normed, norm) = self.norm.forward(&x.slice_rows(frames, frames + slots));
        let z = self.output.forward(&normed);
        (z, EncoderTrace { features: features.clone(), blocks: traces, norm, normed_slots: normed })
    }

    pub fn backward(&self, trace: &EncoderTrace<T>, dz: &Matrix<T>, grad: &mut Encoder<T>) {
        let frames = trace.features.rows();
        let slots = self.queries.rows();
        let width = self.queries.cols();
        let d_normed = self.output.backward(&trace.normed_slots, dz, &mut grad.output);
        let d_slots = self.norm.backward(&trace.norm, &d_normed, &mut grad.norm);
        // Frame positions only influence Z through attention; their direct
        // cotangent at the top of the stack is zero.
        let mut dx = Matrix::zeros(frames, width).vstack(&d_slots);
        for (i, (b, t)) in self.blocks.iter().zip(&trace.blocks).enumerate().rev() {
            dx = b.backward(t, &dx, &mut grad.blocks[i]);
        }
        let d_feat = dx.slice_rows(0, frames);
        let d_lat = dx.slice_rows(frames, frames + slots);
        grad.queries.add_assign(&d_lat);
        grad.pos_lat.add_assign(&d_lat);
        for i in 0..frames {
            for (g, &d) in grad.pos_feat.row_mut(i).iter_mut().zip(d_feat.row(i)) {
                *g += d;
            }
        }
        self.input.backward(&trace.features, &d_feat, &mut grad.input);
    }
}

pub struct DecoderTrace<T> {
    codes: Matrix<T>,
    frames: usize,
    pub blocks: Vec<BlockTrace<T>>,
    norm: LayerNormTrace<T>,
    normed_frames: Matrix<T>,
}

impl<T: Scalar> Decoder<T> {
    pub fn forward(&self, codes: &Matrix<T>, frames: usize) -> (Matrix<T>, DecoderTrace<T>) {
        let width = self.mask.cols();
        let mut masks = Matrix::zeros(frames, width);
        for i in 0..frames {
            for ((o, &m), &p) in masks.row_mut(i).iter_mut().zip(self.mask.row(0)).zip(self.pos_mask.row(i)) {
                *o = m + p;
            }
        }
        let mut code_tokens = self.code_input.forward(codes);
        code_tokens.add_assign(&self.pos_code);
        let mut x = masks.vstack(&code_tokens);
        let mut traces = Vec::with_capacity(self.blocks.len());
        for b in &self.blocks {
            let (y, t) = b.forward(&x);
            x = y;
            traces.push(t);
        }
        let (normed, norm) = self.norm.forward(&x.slice_rows(0, frames));
        let out = self.output.forward(&normed);
        (out, DecoderTrace { codes: codes.clone(), frames, blocks: traces, norm, normed_frames: normed })
    }

    /// Returns the cotangent of the codes.
    pub fn backward(&self, trace: &DecoderTrace<T>, d_out: &Matrix<T>, grad: &mut Decoder<T>) -> Matrix<T> {
        let frames = trace.frames;
        let slots = self.pos_code.rows();
        let width = self.mask.cols();
        let d_normed = self.output.backward(&trace.normed_frames, d_out, &mut grad.output);
        let d_frames = self.norm.backward(&trace.norm, &d_normed, &mut grad.norm);
        let mut dx = d_frames.vstack(&Matrix::zeros(slots, width));
        for (i, (b, t)) in self.blocks.iter().zip(&trace.blocks).enumerate().rev() {
            dx = b.backward(t, &dx, &mut grad.blocks[i]);
        }
        for i in 0..frames {
            let row = dx.row(i);
            for (g, &d) in grad.pos_mask.row_mut(i).iter_mut().zip(row) {
                *g += d;
            }
            for (g, &d) in grad.mask.row_mut(0).iter_mut().zip(row) {
                *g += d;
            }
        }
        let d_codes_tok = dx.slice_rows(frames, frames + slots);
        grad.pos_code.add_assign(&d_codes_tok);
        self.code_input.backward(&trace.codes, &d_codes_tok, &mut grad.code_input)
    }
}

/// How the forward pass turns sphere-projected latents into codes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum QuantMode {
    /// Sign quantization with a straight-through backward.
    Hard,
    /// Codes are a copy of the projected latents; fully smooth, used by the
    /// finite-difference gradient check.
    Surrogate,
}

/// Everything produced by one compress–quantize–decompress pass.
#[derive(Clone, Debug)]
pub struct ForwardOutput<T> {
    pub reconstruction: Matrix<T>,
    pub latents: Matrix<T>,
    pub sphere: Matrix<T>,
    pub codes: CodeMatrix<T>,
    pub bsq_loss: f64,
}

/// Loss terms for one sample.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossParts {
    pub mse: f64,
    pub bsq: f64,
    pub total: f64,
}

/// `mean((F̂ − F)²) + λ·L_BSQ` over every entry.
pub fn objective<T: Scalar>(features: &Matrix<T>, recon: &Matrix<T>, bsq_loss: f64, lambda: f64) -> Result<LossParts> {
    if features.shape() != recon.shape() {
        return Err(Error::input(format!(
            "reconstruction shape {:?} does not match features {:?}",
            recon.shape(),
            features.shape()
        )));
    }
    let n = features.len().max(1) as f64;
    let mse = features.as_slice().iter().zip(recon.as_slice()).map(|(&a, &b)| (b - a).as_f64().powi(2)).sum::<f64>() / n;
    Ok(LossParts { mse, bsq: bsq_loss, total: mse + lambda * bsq_loss })
}

fn project_rows<T: Scalar>(z: &Matrix<T>) -> Result<Matrix<T>> {
    let mut u = Matrix::zeros(z.rows(), z.cols());
    for r in 0..z.rows() {
        u.row_mut(r).copy_from_slice(&bsq::project_sphere(z.row(r))?);
    }
    Ok(u)
}

impl<T: Scalar> ModelParams<T> {
    /// Latent slot matrix `Z` (`L x d`).
    pub fn compress(&self, features: &Matrix<T>, cfg: &ModelConfig) -> Result<Matrix<T>> {
        check_frames(features.rows(), cfg)?;
        self.check_features(features, cfg)?;
        Ok(self.encoder.forward(features).0)
    }

    /// Reconstruct `frames` feature rows from a code matrix.
    pub fn decompress(&self, codes: &Matrix<T>, cfg: &ModelConfig, frames: usize) -> Result<Matrix<T>> {
        check_frames(frames, cfg)?;
        if codes.shape() != (cfg.num_slots(), self.encoder.output.weight.cols()) {
            return Err(Error::input(format!("code matrix shape {:?} does not match model", codes.shape())));
        }
        Ok(self.decoder.forward(codes, frames).0)
    }

    /// Hard-quantized latents of one chunk.
    pub fn encode(&self, features: &Matrix<T>, cfg: &ModelConfig) -> Result<CodeMatrix<T>> {
        let z = self.compress(features, cfg)?;
        Ok(CodeMatrix::from_sphere(&project_rows(&z)?))
    }

    pub fn forward(&self, features: &Matrix<T>, cfg: &ModelConfig, bsq_cfg: &BsqConfig) -> Result<ForwardOutput<T>> {
        Ok(self.forward_traced(features, cfg, bsq_cfg, QuantMode::Hard)?.0)
    }

    /// Objective value for one sample without gradients.
    pub fn loss(&self, features: &Matrix<T>, cfg: &ModelConfig, bsq_cfg: &BsqConfig, mode: QuantMode) -> Result<LossParts> {
        let (out, _) = self.forward_traced(features, cfg, bsq_cfg, mode)?;
        objective(features, &out.reconstruction, out.bsq_loss, bsq_cfg.entropy_weight)
    }

    /// Objective value and exact reverse-mode gradients for one sample.
    pub fn loss_and_grad(
        &self,
        features: &Matrix<T>,
        cfg: &ModelConfig,
        bsq_cfg: &BsqConfig,
        mode: QuantMode,
    ) -> Result<(LossParts, ModelParams<T>)> {
        let (out, trace) = self.forward_traced(features, cfg, bsq_cfg, mode)?;
        let lambda = bsq_cfg.entropy_weight;
        let parts = objective(features, &out.reconstruction, out.bsq_loss, lambda)?;
        if !parts.total.is_finite() {
            return Err(Error::numeric("non-finite loss"));
        }

        let mut grad = self.zeros_like();
        let n = T::lit(features.len() as f64);
        let two = T::lit(2.0);
        let d_recon = Matrix::from_fn(features.rows(), features.cols(), |i, j| {
            two * (out.reconstruction[(i, j)] - features[(i, j)]) / n
        });
        let d_codes = self.decoder.backward(&trace.decoder, &d_recon, &mut grad.decoder);

        let mut du = Matrix::zeros(d_codes.rows(), d_codes.cols());
        for r in 0..d_codes.rows() {
            du.row_mut(r).copy_from_slice(&bsq::straight_through_backward(d_codes.row(r)));
        }
        if lambda != 0.0 {
            let (_, d_reg) = bsq::entropy_loss_with_grad(&out.sphere, bsq_cfg)?;
            let l = T::lit(lambda);
            for (a, &b) in du.as_mut_slice().iter_mut().zip(d_reg.as_slice()) {
                *a += l * b;
            }
        }
        let mut dz = Matrix::zeros(du.rows(), du.cols());
        for r in 0..du.rows() {
            let g = bsq::project_sphere_backward(out.latents.row(r), out.sphere.row(r), du.row(r));
            dz.row_mut(r).copy_from_slice(&g);
        }
        self.encoder.backward(&trace.encoder, &dz, &mut grad.encoder);
        Ok((parts, grad))
    }

    fn check_features(&self, features: &Matrix<T>, cfg: &ModelConfig) -> Result<()> {
        if features.cols() != cfg.feature_dim {
            return Err(Error::input(format!(
                "features have width {} but the model expects {}",
                features.cols(),
                cfg.feature_dim
            )));
        }
        if !features.is_finite() {
            return Err(Error::numeric("non-finite feature values"));
        }
        Ok(())
    }

    fn forward_traced(
        &self,
        features: &Matrix<T>,
        cfg: &ModelConfig,
        bsq_cfg: &BsqConfig,
        mode: QuantMode,
    ) -> Result<(ForwardOutput<T>, ForwardTrace<T>)> {
        check_frames(features.rows(), cfg)?;
        self.check_features(features, cfg)?;
        let (latents, encoder) = self.encoder.forward(features);
        let sphere = project_rows(&latents)?;
        let hard = CodeMatrix::from_sphere(&sphere);
        let bsq_loss = bsq::entropy_loss(&sphere, bsq_cfg)?;
        let decoder_input = match mode {
            QuantMode::Hard => &hard.codes,
            QuantMode::Surrogate => &sphere,
        };
        let (reconstruction, decoder) = self.decoder.forward(decoder_input, features.rows());
        Ok((
            ForwardOutput { reconstruction, latents, sphere, codes: hard, bsq_loss },
            ForwardTrace { encoder, decoder },
        ))
    }

    /// Attention weight matrices of every compressor block (one per head).
    pub fn encoder_attention(&self, features: &Matrix<T>, cfg: &ModelConfig) -> Result<Vec<Vec<Matrix<T>>>> {
        check_frames(features.rows(), cfg)?;
        self.check_features(features, cfg)?;
        let (_, trace) = self.encoder.forward(features);
        Ok(trace.blocks.into_iter().map(|b| b.attn.probs).collect())
    }
}

struct ForwardTrace<T> {
    encoder: EncoderTrace<T>,
    decoder: DecoderTrace<T>,
}

/// Bits per second carried by the codes: `r·d`.
pub fn bitrate(cfg: &ModelConfig, bsq: &BsqConfig) -> f64 {
    cfg.token_rate * bsq.dim as f64
}
