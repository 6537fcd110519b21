use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::{
    adam_step, cross_entropy_logit_grad, cross_entropy_loss, mlp_backward, mlp_forward, AdamState,
    MlpParams, Parameters, Prediction,
};
use crate::error::{Result, TmfError};
use crate::extractor::FeatureVector;
use crate::signal::ClassLabel;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub early_stop_patience: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 0.001,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            batch_size: 64,
            max_epochs: 100,
            early_stop_patience: 10,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let unit = |v: f64| v > 0.0 && v < 1.0;
        if !(unit(self.learning_rate) && unit(self.beta1) && unit(self.beta2)) {
            return Err(TmfError::Config(
                "learning rate and betas must lie in (0, 1)".into(),
            ));
        }
        if self.epsilon <= 0.0 || self.batch_size == 0 || self.early_stop_patience == 0 {
            return Err(TmfError::Config(
                "epsilon, batch size and patience must be positive".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledVector {
    pub h: FeatureVector,
    pub label: ClassLabel,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_accuracy: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainLog {
    pub epochs: Vec<EpochRecord>,
    /// Epoch (1-based) whose parameters were returned.
    pub best_epoch: Option<usize>,
    pub stopped_early: bool,
}

impl TrainLog {
    pub fn best_val_loss(&self) -> Option<f64> {
        self.epochs.iter().map(|e| e.val_loss).reduce(f64::min)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,train_loss,val_loss,val_accuracy\n");
        for e in &self.epochs {
            s.push_str(&format!(
                "{},{},{},{}\n",
                e.epoch, e.train_loss, e.val_loss, e.val_accuracy
            ));
        }
        s
    }
}

/// Patience counter on validation loss; only strict improvements reset it.
#[derive(Debug, Clone)]
pub struct EarlyStopping {
    patience: usize,
    best: f64,
    waited: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        EarlyStopping {
            patience,
            best: f64::INFINITY,
            waited: 0,
        }
    }

    /// Records a validation loss; returns `true` if it is a new best.
    pub fn observe(&mut self, val_loss: f64) -> bool {
        if val_loss < self.best {
            self.best = val_loss;
            self.waited = 0;
            true
        } else {
            self.waited += 1;
            false
        }
    }

    pub fn should_stop(&self) -> bool {
        self.waited >= self.patience
    }
}

/// Mini-batch Adam with early stopping on validation loss.
///
/// `batch_grad` returns the gradient and loss summed over the given sample
/// indices; `validate` returns (mean loss, accuracy) on held-out data. The
/// parameters of the best validation epoch are returned.
pub(crate) fn fit<P, G, V>(
    init: P,
    n_train: usize,
    config: &TrainConfig,
    batch_grad: G,
    validate: V,
) -> Result<(P, TrainLog)>
where
    P: Parameters + Clone,
    G: Fn(&P, &[usize]) -> Result<(P, f64)>,
    V: Fn(&P) -> Result<(f64, f64)>,
{
    config.validate()?;
    let mut params = init;
    let mut best = params.clone();
    let mut log = TrainLog::default();
    let mut adam = AdamState::new(&params);
    let mut stopper = EarlyStopping::new(config.early_stop_patience);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..n_train).collect();

    for epoch in 1..=config.max_epochs {
        order.shuffle(&mut rng);
        let mut total_loss = 0.0;
        for batch in order.chunks(config.batch_size) {
            let (mut grads, loss) = batch_grad(&params, batch)?;
            grads.scale(1.0 / batch.len() as f64);
            total_loss += loss;
            adam_step(&mut adam, &mut params, &grads, config)?;
        }
        if !params.all_finite() {
            return Err(TmfError::Config(format!(
                "training diverged at epoch {epoch} (non-finite parameters)"
            )));
        }
        let (val_loss, val_accuracy) = validate(&params)?;
        log.epochs.push(EpochRecord {
            epoch,
            train_loss: total_loss / n_train as f64,
            val_loss,
            val_accuracy,
        });
        if stopper.observe(val_loss) {
            best = params.clone();
            log.best_epoch = Some(epoch);
        }
        log::debug!("epoch {epoch}: train {:.5} val {val_loss:.5} acc {val_accuracy:.4}", total_loss / n_train as f64);
        if stopper.should_stop() {
            log.stopped_early = true;
            break;
        }
    }
    Ok((best, log))
}

fn check_split(split: &[LabeledVector], name: &'static str, inputs: usize) -> Result<()> {
    if split.is_empty() {
        return Err(TmfError::EmptySplit(name));
    }
    if let Some(v) = split.iter().find(|v| v.h.len() != inputs) {
        return Err(TmfError::ShapeMismatch(format!(
            "{name} vector of length {} among length-{inputs} vectors",
            v.h.len()
        )));
    }
    Ok(())
}

/// Mean loss and accuracy (AF iff `y1 > 0.5`) of a head over a split.
pub(crate) fn evaluate_split<F>(split: &[LabeledVector], predict: F) -> Result<(f64, f64)>
where
    F: Fn(&[f64]) -> Result<Prediction> + Sync,
{
    let per: Vec<(f64, bool)> = split
        .par_iter()
        .map(|v| {
            let y = predict(v.h.as_slice())?;
            Ok((cross_entropy_loss(&y, v.label), y.predicted(0.5) == v.label))
        })
        .collect::<Result<_>>()?;
    let n = per.len() as f64;
    let loss = per.iter().map(|p| p.0).sum::<f64>() / n;
    let acc = per.iter().filter(|p| p.1).count() as f64 / n;
    Ok((loss, acc))
}

pub fn train_mlp(
    train: &[LabeledVector],
    val: &[LabeledVector],
    config: &TrainConfig,
) -> Result<(MlpParams, TrainLog)> {
    let inputs = train.first().ok_or(TmfError::EmptySplit("train"))?.h.len();
    check_split(train, "train", inputs)?;
    check_split(val, "validation", inputs)?;
    let init = MlpParams::init(inputs, config.seed);
    fit(
        init,
        train.len(),
        config,
        |p, batch| {
            let mut grads = MlpParams::zeros(inputs);
            let mut loss = 0.0;
            for &i in batch {
                let v = &train[i];
                let f = mlp_forward(p, v.h.as_slice())?;
                let y = Prediction::from_logits(f.logits);
                loss += cross_entropy_loss(&y, v.label);
                let (g, _) = mlp_backward(p, v.h.as_slice(), &f, cross_entropy_logit_grad(&y, v.label));
                grads.accumulate(&g);
            }
            Ok((grads, loss))
        },
        |p| evaluate_split(val, |h| super::mlp_predict(p, h)),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::classify::mlp_predict;
    use rand::Rng;

    fn separable(n: usize, seed: u64) -> Vec<LabeledVector> {
        // two clusters either side of the line x + y = 0, with a margin
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|i| {
                let label = if i % 2 == 0 { ClassLabel::Af } else { ClassLabel::NonAf };
                let sign = if label == ClassLabel::Af { 1.0 } else { -1.0 };
                let x = sign * rng.random_range(0.5..2.0);
                let y = sign * rng.random_range(0.5..2.0);
                LabeledVector { h: FeatureVector(vec![x, y]), label }
            })
            .collect()
    }

    #[test]
    fn separable_set_reaches_full_accuracy() {
        let train = separable(200, 1);
        let val = separable(60, 2);
        let cfg = TrainConfig {
            max_epochs: 50,
            ..TrainConfig::default()
        };
        let (p, log) = train_mlp(&train, &val, &cfg).unwrap();
        assert!(log.epochs.len() <= 50);
        let (_, acc) = evaluate_split(&val, |h| mlp_predict(&p, h)).unwrap();
        assert_eq!(acc, 1.0);
    }

    #[test]
    fn zero_epochs_returns_initial_params() {
        let train = separable(10, 1);
        let cfg = TrainConfig {
            max_epochs: 0,
            seed: 9,
            ..TrainConfig::default()
        };
        let (p, log) = train_mlp(&train, &train, &cfg).unwrap();
        assert_eq!(p, MlpParams::init(2, 9));
        assert!(log.epochs.is_empty());
    }

    #[test]
    fn constant_labels_converge() {
        let data: Vec<LabeledVector> = separable(40, 3)
            .into_iter()
            .map(|mut v| {
                v.label = ClassLabel::Af;
                v
            })
            .collect();
        let cfg = TrainConfig {
            max_epochs: 2000,
            early_stop_patience: 2000,
            ..TrainConfig::default()
        };
        let (p, _) = train_mlp(&data, &data, &cfg).unwrap();
        for v in &data {
            assert!(mlp_predict(&p, v.h.as_slice()).unwrap().af() >= 0.99);
        }
    }

    #[test]
    fn best_epoch_params_are_returned() {
        let train = separable(100, 4);
        let mut val = separable(40, 5);
        // some label noise so that validation loss eventually turns up
        for v in val.iter_mut().step_by(5) {
            v.label = if v.label == ClassLabel::Af { ClassLabel::NonAf } else { ClassLabel::Af };
        }
        let cfg = TrainConfig {
            max_epochs: 80,
            early_stop_patience: 5,
            learning_rate: 0.01,
            ..TrainConfig::default()
        };
        let (p, log) = train_mlp(&train, &val, &cfg).unwrap();
        let (loss, _) = evaluate_split(&val, |h| mlp_predict(&p, h)).unwrap();
        assert_eq!(loss, log.best_val_loss().unwrap());
        let best = log.best_epoch.unwrap();
        assert_eq!(log.epochs[best - 1].val_loss, loss);
    }

    #[test]
    fn training_is_deterministic() {
        let train = separable(80, 6);
        let val = separable(20, 7);
        let cfg = TrainConfig {
            max_epochs: 5,
            seed: 3,
            ..TrainConfig::default()
        };
        let (a, la) = train_mlp(&train, &val, &cfg).unwrap();
        let (b, lb) = train_mlp(&train, &val, &cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(la, lb);
    }

    #[test]
    fn split_errors() {
        let cfg = TrainConfig::default();
        let data = separable(4, 1);
        assert!(matches!(train_mlp(&[], &data, &cfg), Err(TmfError::EmptySplit(_))));
        assert!(matches!(train_mlp(&data, &[], &cfg), Err(TmfError::EmptySplit(_))));
        let mut odd = data.clone();
        odd[1].h = FeatureVector(vec![1.0]);
        assert!(matches!(train_mlp(&odd, &data, &cfg), Err(TmfError::ShapeMismatch(_))));
    }
}
