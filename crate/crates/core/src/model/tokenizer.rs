use super::{ModelConfig, ModelParams};
use crate::bsq::{BsqConfig, CodeMatrix};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Matrix;

/// A trained model bound to its configuration, operating on whole
/// utterances.
///
/// Utterances are cut into non-overlapping chunks of the training length;
/// the last chunk is zero-padded on the right. Decoding runs every chunk at
/// full length and crops the concatenation back to the requested frame
/// count.
#[derive(Clone, Copy)]
pub struct Tokenizer<'a, T> {
    pub params: &'a ModelParams<T>,
    pub model: &'a ModelConfig,
    pub bsq: &'a BsqConfig,
}

impl<'a, T: Scalar> Tokenizer<'a, T> {
    pub fn new(params: &'a ModelParams<T>, model: &'a ModelConfig, bsq: &'a BsqConfig) -> Self {
        Self { params, model, bsq }
    }

    pub fn chunk_frames(&self) -> usize {
        self.model.chunk_frames()
    }

    pub fn num_chunks(&self, frames: usize) -> usize {
        frames.div_ceil(self.chunk_frames()).max(1)
    }

    fn chunk(&self, features: &Matrix<T>, index: usize) -> Matrix<T> {
        let k = self.chunk_frames();
        let start = index * k;
        let end = (start + k).min(features.rows());
        let mut chunk = Matrix::zeros(k, features.cols());
        for i in start..end {
            chunk.row_mut(i - start).copy_from_slice(features.row(i));
        }
        chunk
    }

    pub fn tokenize(&self, features: &Matrix<T>) -> Result<Vec<CodeMatrix<T>>> {
        if features.rows() == 0 {
            return Err(Error::input("cannot tokenize an empty sequence"));
        }
        (0..self.num_chunks(features.rows()))
            .map(|c| self.params.encode(&self.chunk(features, c), self.model))
            .collect()
    }

    pub fn detokenize(&self, chunks: &[CodeMatrix<T>], frames: usize) -> Result<Matrix<T>> {
        if chunks.len() != self.num_chunks(frames) {
            return Err(Error::input(format!(
                "{} code chunks cannot cover {frames} frames at {} frames per chunk",
                chunks.len(),
                self.chunk_frames()
            )));
        }
        let k = self.chunk_frames();
        let mut out = Matrix::zeros(frames, self.model.feature_dim);
        for (c, codes) in chunks.iter().enumerate() {
            let decoded = self.params.decompress(&codes.codes, self.model, k)?;
            for i in 0..k {
                let t = c * k + i;
                if t >= frames {
                    break;
                }
                out.row_mut(t).copy_from_slice(decoded.row(i));
            }
        }
        Ok(out)
    }

    /// Tokenize then decode, preserving the frame count.
    pub fn resynthesize(&self, features: &Matrix<T>) -> Result<Matrix<T>> {
        self.detokenize(&self.tokenize(features)?, features.rows())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn multi_chunk_round_trip_keeps_length() {
        let model = ModelConfig::toy();
        let bsq = BsqConfig { dim: 4, ..Default::default() };
        let params = ModelParams::<f32>::init(&model, &bsq, 1).unwrap();
        let tok = Tokenizer::new(&params, &model, &bsq);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let f = Matrix::<f32>::randn(47, 8, 1.0, &mut rng);
        let codes = tok.tokenize(&f).unwrap();
        assert_eq!(codes.len(), 3);
        let out = tok.detokenize(&codes, 47).unwrap();
        assert_eq!(out.shape(), (47, 8));
        assert!(tok.detokenize(&codes[..2], 47).is_err());

        // The first chunk decodes exactly as a standalone 20-frame pass.
        let first = params.decompress(&codes[0].codes, &model, 20).unwrap();
        assert_eq!(out.slice_rows(0, 20), first);
    }
}
