use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nnet::model::{ModelParams, ParamGrads};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// Moment estimates shaped like the parameters they track.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    step: u64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(params: &ModelParams, config: AdamConfig) -> Self {
        let zeros: Vec<Vec<f64>> = params.tensors().map(|t| vec![0.0; t.len()]).collect();
        Self {
            config,
            step: 0,
            first: zeros.clone(),
            second: zeros,
        }
    }

    pub fn step(&self) -> u64 {
        self.step
    }
}

/// One bias-corrected Adam update, in place.
pub fn adam_step(params: &mut ModelParams, grads: &ParamGrads, state: &mut AdamState) -> Result<()> {
    let shapes_match = params.tensors().count() == state.first.len()
        && grads.tensors().count() == state.first.len()
        && params
            .tensors()
            .zip(grads.tensors())
            .zip(&state.first)
            .all(|((p, g), m)| p.len() == g.len() && p.len() == m.len());
    if !shapes_match {
        return Err(Error::ShapeMismatch(
            "parameters, gradients and optimizer state differ in shape".into(),
        ));
    }
    for (t, g) in grads.tensors().enumerate() {
        if let Some(i) = g.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!(
                "gradient tensor {t}, entry {i} is {}",
                g[i]
            )));
        }
    }

    state.step += 1;
    let AdamConfig {
        lr,
        beta1,
        beta2,
        epsilon,
    } = state.config;
    let correction1 = 1.0 - beta1.powf(state.step as f64);
    let correction2 = 1.0 - beta2.powf(state.step as f64);
    for (((p, g), m), v) in params
        .tensors_mut()
        .zip(grads.tensors())
        .zip(state.first.iter_mut())
        .zip(state.second.iter_mut())
    {
        for i in 0..p.len() {
            m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
            v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
            let m_hat = m[i] / correction1;
            let v_hat = v[i] / correction2;
            p[i] -= lr * m_hat / (v_hat.sqrt() + epsilon);
        }
    }
    params.bump_version();
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nnet::model::NetSpec;

    fn setup() -> (ModelParams, AdamState) {
        let spec = NetSpec::mlp(2, 3, 2);
        let params = ModelParams::init(&spec, 1);
        let state = AdamState::new(&params, AdamConfig::default());
        (params, state)
    }

    fn filled(like: &ModelParams, value: f64) -> ModelParams {
        let mut g = like.clone();
        g.tensors_mut().for_each(|t| t.iter_mut().for_each(|v| *v = value));
        g
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let (mut p, mut s) = setup();
        let before = p.to_flat();
        let g = filled(&p, 0.0);
        adam_step(&mut p, &g, &mut s).unwrap();
        assert_eq!(p.to_flat(), before);
        assert_eq!(s.step(), 1);
    }

    #[test]
    fn constant_gradient_descends() {
        let (mut p, mut s) = setup();
        let before = p.to_flat();
        let g = filled(&p, 0.5);
        for _ in 0..100 {
            adam_step(&mut p, &g, &mut s).unwrap();
        }
        assert!(p.to_flat().iter().zip(&before).all(|(a, b)| a < b));
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let (mut p, mut s) = setup();
        let before = p.to_flat();
        let g = filled(&p, -3.0);
        adam_step(&mut p, &g, &mut s).unwrap();
        // m̂ = g, v̂ = g², so the step is lr * g / (|g| + eps)
        let expected = 1e-3 * 3.0 / (3.0 + 1e-8);
        for (a, b) in p.to_flat().iter().zip(&before) {
            assert!((a - b - expected).abs() < 1e-15);
        }
    }

    #[test]
    fn non_finite_gradients_abort() {
        let (mut p, mut s) = setup();
        let before = p.clone();
        let mut g = filled(&p, 0.1);
        g.tensors_mut().next().unwrap()[0] = f64::NAN;
        assert!(matches!(adam_step(&mut p, &g, &mut s), Err(Error::NonFinite(_))));
        assert_eq!(p, before);
        assert_eq!(s.step(), 0);
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let (mut p, mut s) = setup();
        let other = ModelParams::init(&NetSpec::mlp(2, 4, 2), 1);
        let r = adam_step(&mut p, &other, &mut s);
        assert!(matches!(r, Err(Error::ShapeMismatch(_))));
    }
}
