//! Adam with bias correction.

use crate::ndcore::{NdError, Tensor};

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPS: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub step: u64,
}

impl AdamState {
    pub fn new(shapes: &[&Tensor]) -> Self {
        Self {
            m: shapes.iter().map(|t| t.zeros_like()).collect(),
            v: shapes.iter().map(|t| t.zeros_like()).collect(),
            step: 0,
        }
    }
}

pub fn adam_step(params: &mut [&mut Tensor], grads: &[Tensor], state: &mut AdamState, lr: f64) -> Result<(), NdError> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(NdError::Invalid {
            op: "adam_step",
            msg: format!(
                "{} params, {} grads, {} moment slots",
                params.len(),
                grads.len(),
                state.m.len()
            ),
        });
    }
    for ((p, g), m) in params.iter().zip(grads).zip(&state.m) {
        p.check_same_shape(g, "adam_step")?;
        p.check_same_shape(m, "adam_step")?;
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - BETA1.powi(t);
    let c2 = 1.0 - BETA2.powi(t);
    for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut state.m).zip(&mut state.v) {
        for (((pk, &gk), mk), vk) in p
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(m.data_mut())
            .zip(v.data_mut())
        {
            *mk = BETA1 * *mk + (1.0 - BETA1) * gk;
            *vk = BETA2 * *vk + (1.0 - BETA2) * gk * gk;
            let m_hat = *mk / c1;
            let v_hat = *vk / c2;
            *pk -= lr * m_hat / (v_hat.sqrt() + EPS);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_keeps_params() {
        let mut p = Tensor::vector(vec![1.0, -2.0]);
        let before = p.clone();
        let mut st = AdamState::new(&[&p]);
        adam_step(&mut [&mut p], &[Tensor::zeros(&[2])], &mut st, 0.1).unwrap();
        assert_eq!(p, before);
        assert_eq!(st.step, 1);
    }

    #[test]
    fn constant_gradient_step_approaches_lr() {
        let mut p = Tensor::vector(vec![0.0]);
        let mut st = AdamState::new(&[&p]);
        let g = Tensor::vector(vec![0.37]);
        let lr = 1e-3;
        let mut last = 0.0;
        for _ in 0..1000 {
            let before = p.data()[0];
            adam_step(&mut [&mut p], std::slice::from_ref(&g), &mut st, lr).unwrap();
            last = before - p.data()[0];
        }
        // with a constant gradient both corrected moments are exact
        let expected = lr * 0.37 / (0.37 + EPS);
        assert!((last - expected).abs() / expected < 1e-9);
        assert!((last - lr).abs() / lr < 0.01);
    }

    #[test]
    fn shape_mismatch_rejected() {
        let mut p = Tensor::vector(vec![0.0, 1.0]);
        let mut st = AdamState::new(&[&p]);
        assert!(adam_step(&mut [&mut p], &[Tensor::zeros(&[3])], &mut st, 0.1).is_err());
        assert!(adam_step(&mut [&mut p], &[], &mut st, 0.1).is_err());
    }

    #[test]
    fn deterministic_trajectories() {
        let run = || {
            let mut p = Tensor::vector(vec![0.5, -0.5]);
            let mut st = AdamState::new(&[&p]);
            for k in 0..50 {
                let g = Tensor::vector(vec![(k as f64).sin(), (k as f64).cos()]);
                adam_step(&mut [&mut p], &[g], &mut st, 0.01).unwrap();
            }
            p
        };
        assert_eq!(run(), run());
    }
}
