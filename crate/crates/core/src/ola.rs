//! Overlap-add resynthesis of sequences longer than one chunk.
//!
//! Windows of `K` frames start every `h = K − overlap` frames; the input is
//! zero-padded on the right so the last window fits. Processed windows are
//! weighted by a symmetric Hann window, summed, divided by the summed
//! window envelope (clamped from below) and cropped to the input length.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ModelConfig, ModelParams};
use crate::scalar::Scalar;
use crate::tensor::Matrix;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OlaConfig {
    /// Window length K in frames.
    pub chunk_frames: usize,
    pub overlap_frames: usize,
    pub clamp_eps: f64,
}

impl OlaConfig {
    pub fn new(chunk_frames: usize) -> Self {
        Self { chunk_frames, overlap_frames: 50, clamp_eps: 1e-8 }
    }

    pub fn hop(&self) -> usize {
        self.chunk_frames - self.overlap_frames
    }

    pub fn validate(&self) -> Result<()> {
        if self.overlap_frames == 0 || self.overlap_frames >= self.chunk_frames {
            return Err(Error::config(format!(
                "ola.overlap_frames must lie in 1..{} (chunk of {} frames)",
                self.chunk_frames, self.chunk_frames
            )));
        }
        if !(self.clamp_eps > 0.0 && self.clamp_eps.is_finite()) {
            return Err(Error::config("ola.clamp_eps must be positive"));
        }
        Ok(())
    }
}

/// Frames in a chunk of `samples` audio samples at `sample_rate` Hz, for a
/// 50 Hz feature rate.
pub fn frames_for_samples(samples: usize, sample_rate: f64) -> usize {
    (samples as f64 / sample_rate * 50.0).round() as usize
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ChunkGrid {
    /// Half-open `(start, end)` frame ranges in the padded sequence.
    pub windows: Vec<(usize, usize)>,
    pub pad: usize,
}

pub fn chunk_grid(frames: usize, cfg: &OlaConfig) -> Result<ChunkGrid> {
    cfg.validate()?;
    if frames == 0 {
        return Err(Error::input("cannot chunk an empty sequence"));
    }
    let (k, h) = (cfg.chunk_frames, cfg.hop());
    let n = if frames <= k { 1 } else { 1 + (frames - k).div_ceil(h) };
    let windows: Vec<(usize, usize)> = (0..n).map(|i| (i * h, i * h + k)).collect();
    let pad = windows[n - 1].1 - frames;
    Ok(ChunkGrid { windows, pad })
}

/// Symmetric Hann window, zero at both ends.
pub fn hann<T: Scalar>(len: usize) -> Result<Vec<T>> {
    if len < 2 {
        return Err(Error::input(format!("Hann window needs at least 2 points, got {len}")));
    }
    let denom = (len - 1) as f64;
    Ok((0..len).map(|n| T::lit(0.5 * (1.0 - (2.0 * std::f64::consts::PI * n as f64 / denom).cos()))).collect())
}

/// Fuses processed windows; returns the cropped output and the accumulated
/// (unclamped) envelope per output frame. A single chunk is cropped as is.
pub fn stitch_with_envelope<T: Scalar>(chunks: &[Matrix<T>], cfg: &OlaConfig, frames: usize) -> Result<(Matrix<T>, Vec<T>)> {
    let grid = chunk_grid(frames, cfg)?;
    if chunks.len() != grid.windows.len() {
        return Err(Error::input(format!("expected {} chunks for {frames} frames, got {}", grid.windows.len(), chunks.len())));
    }
    let width = chunks[0].cols();
    for c in chunks {
        if c.shape() != (cfg.chunk_frames, width) {
            return Err(Error::input(format!("chunk of shape {:?}, expected {:?}", c.shape(), (cfg.chunk_frames, width))));
        }
    }
    if chunks.len() == 1 {
        return Ok((chunks[0].slice_rows(0, frames), vec![T::one(); frames]));
    }
    let w = hann::<T>(cfg.chunk_frames)?;
    let total = frames + grid.pad;
    let mut omega = Matrix::<T>::zeros(total, width);
    let mut envelope = vec![T::zero(); total];
    for (chunk, &(start, _)) in chunks.iter().zip(&grid.windows) {
        for (n, &wn) in w.iter().enumerate() {
            envelope[start + n] += wn;
            for (o, &x) in omega.row_mut(start + n).iter_mut().zip(chunk.row(n)) {
                *o += x * wn;
            }
        }
    }
    let eps = T::lit(cfg.clamp_eps);
    for (t, &e) in envelope.iter().enumerate().take(frames) {
        let d = e.max(eps);
        for v in omega.row_mut(t) {
            *v /= d;
        }
    }
    envelope.truncate(frames);
    Ok((omega.slice_rows(0, frames), envelope))
}

pub fn stitch<T: Scalar>(chunks: &[Matrix<T>], cfg: &OlaConfig, frames: usize) -> Result<Matrix<T>> {
    stitch_with_envelope(chunks, cfg, frames).map(|(out, _)| out)
}

/// Cuts the padded sequence into the grid's windows.
pub fn split_windows<T: Scalar>(features: &Matrix<T>, cfg: &OlaConfig) -> Result<Vec<Matrix<T>>> {
    let grid = chunk_grid(features.rows(), cfg)?;
    let padded = features.vstack(&Matrix::zeros(grid.pad, features.cols()));
    Ok(grid.windows.iter().map(|&(s, e)| padded.slice_rows(s, e)).collect())
}

/// Runs `process` on every window (in parallel) and fuses the results. A
/// sequence no longer than one window takes a single padded pass.
pub fn process_long<T, F>(features: &Matrix<T>, cfg: &OlaConfig, process: F) -> Result<(Matrix<T>, Vec<T>)>
where
    T: Scalar,
    F: Fn(&Matrix<T>) -> Result<Matrix<T>> + Sync,
{
    let windows = split_windows(features, cfg)?;
    let processed = windows.par_iter().map(&process).collect::<Result<Vec<_>>>()?;
    stitch_with_envelope(&processed, cfg, features.rows())
}

/// Encode, quantize and decode one window with a trained model.
pub fn model_processor<'a, T: Scalar>(
    params: &'a ModelParams<T>,
    model: &'a ModelConfig,
) -> impl Fn(&Matrix<T>) -> Result<Matrix<T>> + Sync + 'a {
    move |chunk| {
        let codes = params.encode(chunk, model)?;
        params.decompress(&codes.codes, model, chunk.rows())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;

    #[test]
    fn default_grid_values() {
        let k = frames_for_samples(80_000, 16_000.0);
        assert_eq!(k, 250);
        let cfg = OlaConfig::new(k);
        assert_eq!(cfg.hop(), 200);
        assert_eq!(chunk_grid(250, &cfg).unwrap(), ChunkGrid { windows: vec![(0, 250)], pad: 0 });
        assert_eq!(chunk_grid(2 * 250 - 50, &cfg).unwrap().windows.len(), 2);
        let g = chunk_grid(451, &cfg).unwrap();
        assert_eq!(g.windows.len(), 3);
        assert_eq!(g.pad, 650 - 451);
    }

    #[test]
    fn hann_values() {
        assert_eq!(hann::<f64>(3).unwrap(), vec![0.0, 1.0, 0.0]);
        let w = hann::<f64>(9).unwrap();
        assert!((w[4] - 1.0).abs() < 1e-15);
        for n in 0..9 {
            assert!((w[n] - w[8 - n]).abs() < 1e-15);
        }
        assert!(hann::<f64>(1).is_err());
    }

    #[test]
    fn bad_config_and_counts() {
        assert!(OlaConfig { overlap_frames: 20, ..OlaConfig::new(20) }.validate().is_err());
        assert!(OlaConfig { overlap_frames: 0, ..OlaConfig::new(20) }.validate().is_err());
        let cfg = OlaConfig { overlap_frames: 5, ..OlaConfig::new(20) };
        assert!(matches!(stitch::<f64>(&[Matrix::zeros(20, 2)], &cfg, 40), Err(Error::Input(_))));
    }

    #[test]
    fn short_sequence_is_cropped() {
        let cfg = OlaConfig { overlap_frames: 5, ..OlaConfig::new(20) };
        let x = Matrix::<f64>::from_fn(7, 2, |i, j| (i + j) as f64);
        let (y, _) = process_long(&x, &cfg, |c| Ok(c.clone())).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn constant_chunks_give_constant_output() {
        let cfg = OlaConfig { overlap_frames: 6, ..OlaConfig::new(16) };
        let n = chunk_grid(50, &cfg).unwrap().windows.len();
        let chunks = vec![Matrix::<f64>::filled(16, 3, 2.5); n];
        let (y, env) = stitch_with_envelope(&chunks, &cfg, 50).unwrap();
        for (t, &e) in env.iter().enumerate() {
            if e > cfg.clamp_eps {
                assert!(y.row(t).iter().all(|v| (v - 2.5).abs() < 1e-12));
            }
        }
    }

    proptest! {
        #[test]
        fn identity_processor_reconstructs(frames in 1usize..=100, seed in any::<u64>()) {
            let cfg = OlaConfig { overlap_frames: 4, ..OlaConfig::new(20) };
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let x = Matrix::<f64>::randn(frames, 3, 1.0, &mut rng);
            let (y, env) = process_long(&x, &cfg, |c| Ok(c.clone())).unwrap();
            prop_assert_eq!(y.shape(), x.shape());
            prop_assert!(y.is_finite());
            for t in 0..frames {
                if env[t] > 1e-3 {
                    for j in 0..3 {
                        prop_assert!((y[(t, j)] - x[(t, j)]).abs() <= 1e-5);
                    }
                }
            }
        }
    }
}
