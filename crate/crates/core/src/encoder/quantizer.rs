use rand::Rng;
use rand_distr::StandardNormal;

use super::EncoderError;
use crate::diffkit::Tensor;
use crate::rng;

/// Frozen random-projection quantizer producing discrete MLM targets.
///
/// A frame `x` maps to `argmin_v ‖normalize(P x) − c_v‖` over unit-norm
/// codebook rows `c_v`. Nothing here is ever trained.
#[derive(Clone, Debug, PartialEq)]
pub struct RandomQuantizer {
    /// `d_c × F`, entries ~ N(0, 1).
    pub projection: Tensor,
    /// `V × d_c`, rows L2-normalized.
    pub codebook: Tensor,
    pub seed: u64,
}

impl RandomQuantizer {
    pub fn new(feature_dim: usize, code_dim: usize, vocab_size: usize, seed: u64) -> Self {
        let mut rng = rng::stream(seed, "quantizer", 0);
        let mut draw = |n: usize| -> Vec<f64> {
            (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
        };
        let projection = Tensor::matrix(code_dim, feature_dim, draw(code_dim * feature_dim))
            .expect("projection shape");
        let mut codebook =
            Tensor::matrix(vocab_size, code_dim, draw(vocab_size * code_dim)).expect("codebook shape");
        for v in 0..vocab_size {
            let row = codebook.row_mut(v);
            let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt();
            row.iter_mut().for_each(|x| *x /= norm);
        }
        Self {
            projection,
            codebook,
            seed,
        }
    }

    pub fn vocab_size(&self) -> usize {
        self.codebook.rows()
    }

    pub fn project(&self, frame: &[f64]) -> Vec<f64> {
        (0..self.projection.rows())
            .map(|r| self.projection.row(r).iter().zip(frame).map(|(a, b)| a * b).sum())
            .collect()
    }

    /// Code id for one frame. Ties go to the lowest code.
    ///
    /// A zero projection cannot be normalized; its code is then chosen by
    /// distance from the raw (zero) projection.
    pub fn code(&self, frame: &[f64]) -> usize {
        let mut p = self.project(frame);
        let norm = p.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 0.0 {
            p.iter_mut().for_each(|x| *x /= norm);
        }
        let mut best = 0;
        let mut best_d = f64::INFINITY;
        for v in 0..self.vocab_size() {
            let d: f64 = self
                .codebook
                .row(v)
                .iter()
                .zip(&p)
                .map(|(c, x)| (c - x) * (c - x))
                .sum();
            if d < best_d {
                best_d = d;
                best = v;
            }
        }
        best
    }

    pub fn quantize(&self, frames: &Tensor) -> Result<Vec<usize>, EncoderError> {
        if frames.cols() != self.projection.cols() {
            return Err(EncoderError::FeatureMismatch {
                expected: self.projection.cols(),
                got: frames.cols(),
            });
        }
        if !frames.is_finite() {
            return Err(EncoderError::InvalidConfig("non-finite frame".into()));
        }
        Ok((0..frames.rows()).map(|t| self.code(frames.row(t))).collect())
    }
}
