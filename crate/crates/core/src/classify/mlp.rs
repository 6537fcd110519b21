use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Parameters, Prediction};
use crate::error::{Result, TmfError};

pub const HIDDEN_UNITS: usize = 128;

/// `y = softmax(W_o · ReLU(W·h + b) + b_o)` with a 128-unit hidden layer.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpParams {
    pub inputs: usize,
    /// `HIDDEN_UNITS × inputs`, row-major.
    pub w: Vec<f64>,
    pub b: Vec<f64>,
    /// `2 × HIDDEN_UNITS`, row-major.
    pub w_out: Vec<f64>,
    pub b_out: Vec<f64>,
}

impl MlpParams {
    pub fn zeros(inputs: usize) -> Self {
        MlpParams {
            inputs,
            w: vec![0.0; HIDDEN_UNITS * inputs],
            b: vec![0.0; HIDDEN_UNITS],
            w_out: vec![0.0; 2 * HIDDEN_UNITS],
            b_out: vec![0.0; 2],
        }
    }

    /// He-uniform weights, zero biases.
    pub fn init(inputs: usize, seed: u64) -> Self {
        let mut p = MlpParams::zeros(inputs);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let l1 = (6.0 / inputs.max(1) as f64).sqrt();
        p.w.iter_mut().for_each(|v| *v = rng.random_range(-l1..l1));
        let l2 = (6.0 / HIDDEN_UNITS as f64).sqrt();
        p.w_out.iter_mut().for_each(|v| *v = rng.random_range(-l2..l2));
        p
    }
}

impl Parameters for MlpParams {
    fn tensors(&self) -> Vec<&[f64]> {
        vec![&self.w, &self.b, &self.w_out, &self.b_out]
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        vec![&mut self.w, &mut self.b, &mut self.w_out, &mut self.b_out]
    }
}

#[derive(Debug, Clone)]
pub struct MlpForward {
    pub hidden: Vec<f64>,
    pub logits: [f64; 2],
}

fn check_len(params: &MlpParams, h: &[f64]) -> Result<()> {
    if h.len() != params.inputs {
        return Err(TmfError::ShapeMismatch(format!(
            "feature vector has {} entries, head expects {}",
            h.len(),
            params.inputs
        )));
    }
    Ok(())
}

pub fn mlp_forward(params: &MlpParams, h: &[f64]) -> Result<MlpForward> {
    check_len(params, h)?;
    let hidden: Vec<f64> = params
        .w
        .chunks_exact(params.inputs.max(1))
        .zip(&params.b)
        .map(|(row, b)| (row.iter().zip(h).map(|(w, x)| w * x).sum::<f64>() + b).max(0.0))
        .collect();
    let mut logits = [0.0; 2];
    for (k, l) in logits.iter_mut().enumerate() {
        let row = &params.w_out[k * HIDDEN_UNITS..(k + 1) * HIDDEN_UNITS];
        *l = row.iter().zip(&hidden).map(|(w, x)| w * x).sum::<f64>() + params.b_out[k];
    }
    Ok(MlpForward { hidden, logits })
}

pub fn mlp_logits(params: &MlpParams, h: &[f64]) -> Result<[f64; 2]> {
    mlp_forward(params, h).map(|f| f.logits)
}

pub fn mlp_predict(params: &MlpParams, h: &[f64]) -> Result<Prediction> {
    mlp_logits(params, h).map(Prediction::from_logits)
}

/// Gradients of a scalar w.r.t. the parameters and the input `h`, given
/// its gradient w.r.t. the two logits.
pub fn mlp_backward(
    params: &MlpParams,
    h: &[f64],
    forward: &MlpForward,
    dlogits: [f64; 2],
) -> (MlpParams, Vec<f64>) {
    let mut g = MlpParams::zeros(params.inputs);
    let mut dhidden = vec![0.0; HIDDEN_UNITS];
    for k in 0..2 {
        g.b_out[k] = dlogits[k];
        let row = &params.w_out[k * HIDDEN_UNITS..(k + 1) * HIDDEN_UNITS];
        let grow = &mut g.w_out[k * HIDDEN_UNITS..(k + 1) * HIDDEN_UNITS];
        for j in 0..HIDDEN_UNITS {
            grow[j] = dlogits[k] * forward.hidden[j];
            dhidden[j] += dlogits[k] * row[j];
        }
    }
    let mut dh = vec![0.0; params.inputs];
    for j in 0..HIDDEN_UNITS {
        if forward.hidden[j] <= 0.0 {
            continue;
        }
        let d = dhidden[j];
        g.b[j] = d;
        let wrow = &params.w[j * params.inputs..(j + 1) * params.inputs];
        let grow = &mut g.w[j * params.inputs..(j + 1) * params.inputs];
        for i in 0..params.inputs {
            grow[i] = d * h[i];
            dh[i] += d * wrow[i];
        }
    }
    (g, dh)
}
