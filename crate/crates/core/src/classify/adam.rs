use super::{Parameters, TrainConfig};
use crate::error::{Result, TmfError};

/// First/second moment estimates for every parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new<P: Parameters>(params: &P) -> Self {
        let zeros: Vec<Vec<f64>> = params.tensors().iter().map(|t| vec![0.0; t.len()]).collect();
        AdamState {
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }
}

/// One bias-corrected Adam update of `params` in place.
pub fn adam_step<P: Parameters>(
    state: &mut AdamState,
    params: &mut P,
    grads: &P,
    config: &TrainConfig,
) -> Result<()> {
    let gs = grads.tensors();
    let ps = params.tensors_mut();
    if gs.len() != ps.len()
        || gs.len() != state.m.len()
        || gs.iter().zip(&ps).zip(&state.m).any(|((g, p), m)| g.len() != p.len() || m.len() != p.len())
    {
        return Err(TmfError::ShapeMismatch(
            "gradient, parameter and optimizer shapes differ".into(),
        ));
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (config.beta1, config.beta2);
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    for (((p, g), m), v) in ps.into_iter().zip(gs).zip(&mut state.m).zip(&mut state.v) {
        for i in 0..p.len() {
            m[i] = b1 * m[i] + (1.0 - b1) * g[i];
            v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
            let m_hat = m[i] / c1;
            let v_hat = v[i] / c2;
            p[i] -= config.learning_rate * m_hat / (v_hat.sqrt() + config.epsilon);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[derive(Clone, Debug, PartialEq)]
    struct Scalar(Vec<f64>);

    impl Parameters for Scalar {
        fn tensors(&self) -> Vec<&[f64]> {
            vec![&self.0]
        }
        fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
            vec![&mut self.0]
        }
    }

    #[test]
    fn zero_gradient_is_a_no_op() {
        let cfg = TrainConfig::default();
        let mut p = Scalar(vec![1.5, -2.0]);
        let mut st = AdamState::new(&p);
        adam_step(&mut st, &mut p, &Scalar(vec![0.0, 0.0]), &cfg).unwrap();
        assert_eq!(p.0, vec![1.5, -2.0]);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let cfg = TrainConfig::default();
        for g in [3.0, -0.02, 250.0] {
            let mut p = Scalar(vec![0.0]);
            let mut st = AdamState::new(&p);
            adam_step(&mut st, &mut p, &Scalar(vec![g]), &cfg).unwrap();
            // m̂ = g, v̂ = g², so the step is lr·g/(|g| + ε)
            let expected = -cfg.learning_rate * g / (g.abs() + cfg.epsilon);
            assert!((p.0[0] - expected).abs() < 1e-15);
            assert!((p.0[0].abs() - cfg.learning_rate).abs() < 1e-9);
        }
    }

    #[test]
    fn steps_reduce_a_quadratic() {
        let cfg = TrainConfig::default();
        let loss = |x: f64| (x - 3.0).powi(2);
        let mut p = Scalar(vec![0.0]);
        let mut st = AdamState::new(&p);
        let before = loss(p.0[0]);
        for _ in 0..2 {
            let g = 2.0 * (p.0[0] - 3.0);
            adam_step(&mut st, &mut p, &Scalar(vec![g]), &cfg).unwrap();
        }
        assert!(loss(p.0[0]) < before);
    }

    #[test]
    fn shape_mismatch() {
        let cfg = TrainConfig::default();
        let mut p = Scalar(vec![0.0]);
        let mut st = AdamState::new(&p);
        assert!(matches!(
            adam_step(&mut st, &mut p, &Scalar(vec![0.0, 1.0]), &cfg),
            Err(TmfError::ShapeMismatch(_))
        ));
    }
}
