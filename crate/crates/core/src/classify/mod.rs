//! Classifier heads on pooled feature vectors.

mod adam;
mod logreg;
mod mlp;
mod search;
pub(crate) mod train;

pub use adam::{adam_step, AdamState};
pub use logreg::{
    fit_logreg, logreg_backward, logreg_logits, logreg_predict, train_logreg, LogRegCandidate,
    LogRegParams, LogRegSpace, Penalty, LOGREG_ITERATIONS,
};
pub use mlp::{mlp_backward, mlp_forward, mlp_logits, mlp_predict, MlpForward, MlpParams, HIDDEN_UNITS};
pub use search::{random_search, SearchSpace, SearchTrace};
pub use train::{train_mlp, EarlyStopping, EpochRecord, LabeledVector, TrainConfig, TrainLog};

use crate::signal::ClassLabel;

/// Lower bound applied to the true-class probability inside the log.
pub const PROBABILITY_FLOOR: f64 = 1e-12;

/// A bag of named flat parameter tensors, in a fixed order.
pub trait Parameters {
    fn tensors(&self) -> Vec<&[f64]>;
    fn tensors_mut(&mut self) -> Vec<&mut [f64]>;

    fn num_params(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    /// `self += other` tensor by tensor.
    fn accumulate(&mut self, other: &Self) {
        for (a, b) in self.tensors_mut().into_iter().zip(other.tensors()) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }

    fn scale(&mut self, factor: f64) {
        for t in self.tensors_mut() {
            t.iter_mut().for_each(|x| *x *= factor);
        }
    }

    fn all_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.iter().all(|v| v.is_finite()))
    }
}

/// `[y1, y2]`: AF and non-AF probabilities.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Prediction {
    pub y: [f64; 2],
}

impl Prediction {
    pub fn from_logits(logits: [f64; 2]) -> Self {
        Prediction { y: softmax(logits) }
    }

    /// AF probability `y1`.
    pub fn af(&self) -> f64 {
        self.y[0]
    }

    pub fn prob(&self, label: ClassLabel) -> f64 {
        self.y[label.index()]
    }

    pub fn predicted(&self, threshold: f64) -> ClassLabel {
        if self.af() > threshold {
            ClassLabel::Af
        } else {
            ClassLabel::NonAf
        }
    }
}

/// Softmax with the max logit subtracted first.
pub fn softmax(logits: [f64; 2]) -> [f64; 2] {
    let m = logits[0].max(logits[1]);
    let e = [(logits[0] - m).exp(), (logits[1] - m).exp()];
    let z = e[0] + e[1];
    [e[0] / z, e[1] / z]
}

pub fn cross_entropy_loss(y: &Prediction, label: ClassLabel) -> f64 {
    -y.prob(label).max(PROBABILITY_FLOOR).ln()
}

/// `d(−ln softmax(z)_label)/dz = y − onehot(label)`.
pub fn cross_entropy_logit_grad(y: &Prediction, label: ClassLabel) -> [f64; 2] {
    let mut g = y.y;
    g[label.index()] -= 1.0;
    g
}
