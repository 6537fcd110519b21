use rand::Rng;

use super::{
    cross_entropy_logit_grad, cross_entropy_loss, random_search, LabeledVector, Prediction,
    SearchSpace, SearchTrace,
};
use crate::error::{Result, TmfError};
use crate::eval::roc_auc;

/// Gradient-descent iterations per fitted candidate.
pub const LOGREG_ITERATIONS: usize = 500;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Penalty {
    L2,
    L1,
}

impl Penalty {
    pub fn as_str(self) -> &'static str {
        match self {
            Penalty::L2 => "l2",
            Penalty::L1 => "l1",
        }
    }
}

/// Binary logistic regression expressed as a two-logit head `[w·h + b, 0]`,
/// so it plugs into the same softmax/Grad-CAM machinery as the MLP.
#[derive(Debug, Clone, PartialEq)]
pub struct LogRegParams {
    pub weights: Vec<f64>,
    pub bias: f64,
    pub penalty: Penalty,
    pub penalty_strength: f64,
}

pub fn logreg_logits(params: &LogRegParams, h: &[f64]) -> Result<[f64; 2]> {
    if h.len() != params.weights.len() {
        return Err(TmfError::ShapeMismatch(format!(
            "feature vector has {} entries, head expects {}",
            h.len(),
            params.weights.len()
        )));
    }
    let z = params.weights.iter().zip(h).map(|(w, x)| w * x).sum::<f64>() + params.bias;
    Ok([z, 0.0])
}

pub fn logreg_predict(params: &LogRegParams, h: &[f64]) -> Result<Prediction> {
    logreg_logits(params, h).map(Prediction::from_logits)
}

/// Gradient w.r.t. `h` of a scalar whose logit gradient is `dlogits`.
pub fn logreg_backward(params: &LogRegParams, dlogits: [f64; 2]) -> Vec<f64> {
    params.weights.iter().map(|w| w * dlogits[0]).collect()
}

/// Proximal gradient descent on mean cross-entropy plus the penalty
/// (bias unpenalized). The proximal form keeps the iteration stable for
/// any penalty strength: the L2 step shrinks by `1/(1+ηλ)`, the L1 step
/// soft-thresholds by `ηλ`.
pub fn fit_logreg(
    train: &[LabeledVector],
    penalty: Penalty,
    strength: f64,
    iterations: usize,
) -> Result<LogRegParams> {
    let s = train.first().ok_or(TmfError::EmptySplit("train"))?.h.len();
    if train.iter().any(|v| v.h.len() != s) {
        return Err(TmfError::ShapeMismatch("inconsistent feature lengths".into()));
    }
    // 1/L with L = ¼·max‖[x, 1]‖², a Lipschitz bound of the mean loss gradient.
    let max_sq = train
        .iter()
        .map(|v| v.h.as_slice().iter().map(|x| x * x).sum::<f64>() + 1.0)
        .fold(0.0, f64::max);
    let step = 4.0 / max_sq;
    let n = train.len() as f64;
    let mut p = LogRegParams {
        weights: vec![0.0; s],
        bias: 0.0,
        penalty,
        penalty_strength: strength,
    };
    let mut gw = vec![0.0; s];
    for _ in 0..iterations {
        gw.iter_mut().for_each(|g| *g = 0.0);
        let mut gb = 0.0;
        for v in train {
            let y = logreg_predict(&p, v.h.as_slice())?;
            let d = cross_entropy_logit_grad(&y, v.label)[0];
            gb += d;
            for (g, x) in gw.iter_mut().zip(v.h.as_slice()) {
                *g += d * x;
            }
        }
        p.bias -= step * gb / n;
        let shrink = step * strength;
        for (w, g) in p.weights.iter_mut().zip(&gw) {
            let moved = *w - step * g / n;
            *w = match penalty {
                Penalty::L2 => moved / (1.0 + shrink),
                Penalty::L1 => moved.signum() * (moved.abs() - shrink).max(0.0),
            };
        }
    }
    Ok(p)
}

/// Penalty type uniform over {L2, L1}; strength log-uniform on
/// `[1e−4, 1e2]`.
#[derive(Debug, Clone, Copy)]
pub struct LogRegSpace {
    pub strength_min: f64,
    pub strength_max: f64,
}

impl Default for LogRegSpace {
    fn default() -> Self {
        LogRegSpace {
            strength_min: 1e-4,
            strength_max: 1e2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogRegCandidate {
    pub penalty: Penalty,
    pub strength: f64,
}

impl SearchSpace for LogRegSpace {
    type Point = LogRegCandidate;

    fn sample<R: Rng>(&self, rng: &mut R) -> LogRegCandidate {
        let penalty = if rng.random_bool(0.5) { Penalty::L2 } else { Penalty::L1 };
        let (lo, hi) = (self.strength_min.ln(), self.strength_max.ln());
        LogRegCandidate {
            penalty,
            strength: rng.random_range(lo..=hi).exp(),
        }
    }
}

fn validation_score(params: &LogRegParams, val: &[LabeledVector]) -> Result<f64> {
    let preds: Vec<Prediction> = val
        .iter()
        .map(|v| logreg_predict(params, v.h.as_slice()))
        .collect::<Result<_>>()?;
    let scores: Vec<f64> = preds.iter().map(Prediction::af).collect();
    let labels: Vec<bool> = val.iter().map(|v| v.label.is_positive()).collect();
    match roc_auc(&scores, &labels) {
        Ok(auc) => Ok(auc),
        // single-class validation data: fall back to negative mean loss
        Err(TmfError::DegenerateLabels(_)) => Ok(-preds
            .iter()
            .zip(val)
            .map(|(y, v)| cross_entropy_loss(y, v.label))
            .sum::<f64>()
            / val.len() as f64),
        Err(e) => Err(e),
    }
}

/// Random search over penalty type and strength, selecting by validation
/// ROC-AUC.
pub fn train_logreg(
    train: &[LabeledVector],
    val: &[LabeledVector],
    search_budget: usize,
    seed: u64,
) -> Result<(LogRegParams, SearchTrace<LogRegCandidate>)> {
    if train.is_empty() {
        return Err(TmfError::EmptySplit("train"));
    }
    if val.is_empty() {
        return Err(TmfError::EmptySplit("validation"));
    }
    let trace = random_search(
        &LogRegSpace::default(),
        search_budget,
        |c, _| {
            fit_logreg(train, c.penalty, c.strength, LOGREG_ITERATIONS)
                .and_then(|p| validation_score(&p, val))
                .unwrap_or(f64::NAN)
        },
        seed,
    )?;
    let best = trace.best_point();
    let params = fit_logreg(train, best.penalty, best.strength, LOGREG_ITERATIONS)?;
    Ok((params, trace))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::extractor::FeatureVector;
    use crate::signal::ClassLabel;

    fn separable(n: usize, offset: f64) -> Vec<LabeledVector> {
        (0..n)
            .map(|i| {
                let af = i % 2 == 0;
                let t = (i as f64 * 0.37 + offset).sin();
                let x = if af { 1.0 + t.abs() } else { -1.0 - t.abs() };
                LabeledVector {
                    h: FeatureVector(vec![x, t]),
                    label: if af { ClassLabel::Af } else { ClassLabel::NonAf },
                }
            })
            .collect()
    }

    #[test]
    fn budget_one_trains_one_candidate() {
        let (_, trace) = train_logreg(&separable(20, 0.0), &separable(10, 1.0), 1, 4).unwrap();
        assert_eq!(trace.evaluations.len(), 1);
    }

    #[test]
    fn separable_data_gets_perfect_auc() {
        let (p, trace) = train_logreg(&separable(40, 0.0), &separable(20, 2.0), 6, 1).unwrap();
        assert_eq!(trace.best_score(), 1.0);
        assert_eq!(validation_score(&p, &separable(20, 2.0)).unwrap(), 1.0);
    }

    #[test]
    fn huge_penalty_flattens_the_model() {
        let data = separable(40, 0.0);
        for penalty in [Penalty::L2, Penalty::L1] {
            let p = fit_logreg(&data, penalty, 1e12, 200).unwrap();
            assert!(p.weights.iter().all(|w| w.abs() < 1e-9), "{:?}", p.weights);
            let y = logreg_predict(&p, data[0].h.as_slice()).unwrap().y;
            assert!((y[0] - 0.5).abs() < 1e-6 && (y[1] - 0.5).abs() < 1e-6);
        }
    }

    #[test]
    fn empty_splits() {
        assert!(matches!(train_logreg(&[], &separable(4, 0.0), 1, 0), Err(TmfError::EmptySplit(_))));
        assert!(matches!(train_logreg(&separable(4, 0.0), &[], 1, 0), Err(TmfError::EmptySplit(_))));
    }

    #[test]
    fn search_is_deterministic() {
        let a = train_logreg(&separable(30, 0.0), &separable(10, 1.0), 4, 8).unwrap();
        let b = train_logreg(&separable(30, 0.0), &separable(10, 1.0), 4, 8).unwrap();
        assert_eq!(a, b);
    }
}
