//! RMSprop over a flat parameter vector.

use serde::{Deserialize, Serialize};

use crate::error::{Result, TdmError};

pub const DEFAULT_LR: f64 = 1e-2;
pub const DEFAULT_DECAY: f64 = 0.99;
pub const DEFAULT_EPS: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RmsProp {
    pub lr: f64,
    pub decay: f64,
    pub eps: f64,
    accumulators: Vec<f64>,
}

impl RmsProp {
    pub fn new(n_params: usize, lr: f64) -> Self {
        Self::with_hyper(n_params, lr, DEFAULT_DECAY, DEFAULT_EPS)
    }

    pub fn with_hyper(n_params: usize, lr: f64, decay: f64, eps: f64) -> Self {
        Self {
            lr,
            decay,
            eps,
            accumulators: vec![0.0; n_params],
        }
    }

    pub fn accumulators(&self) -> &[f64] {
        &self.accumulators
    }

    pub fn len(&self) -> usize {
        self.accumulators.len()
    }

    pub fn is_empty(&self) -> bool {
        self.accumulators.is_empty()
    }

    /// `v <- decay v + (1 - decay) g^2; p <- p - lr g / (sqrt(v) + eps)`.
    ///
    /// Nothing is modified if any gradient is non-finite; the error names
    /// the offending parameter via `path`.
    pub fn step(&mut self, params: &mut [f64], grads: &[f64], path: impl Fn(usize) -> String) -> Result<()> {
        if params.len() != self.accumulators.len() || grads.len() != params.len() {
            return Err(TdmError::InvalidArgument(format!(
                "rmsprop state holds {} entries, got {} params and {} grads",
                self.accumulators.len(),
                params.len(),
                grads.len()
            )));
        }
        if let Some(i) = grads.iter().position(|g| !g.is_finite()) {
            return Err(TdmError::NonFinite(format!(
                "gradient {} for {}",
                grads[i],
                path(i)
            )));
        }
        for ((p, v), &g) in params.iter_mut().zip(self.accumulators.iter_mut()).zip(grads) {
            *v = self.decay * *v + (1.0 - self.decay) * g * g;
            *p -= self.lr * g / (v.sqrt() + self.eps);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn idx(i: usize) -> String {
        format!("p[{i}]")
    }

    #[test]
    fn zero_gradient_only_decays() {
        let mut opt = RmsProp::new(2, 0.01);
        let mut p = [1.0, -2.0];
        opt.step(&mut p, &[1.0, 0.0], idx).unwrap();
        let v0 = opt.accumulators()[0];
        let p_before = p;
        opt.step(&mut p, &[0.0, 0.0], idx).unwrap();
        assert_eq!(p, p_before);
        assert!((opt.accumulators()[0] - 0.99 * v0).abs() < 1e-18);
    }

    #[test]
    fn first_step_by_hand() {
        let mut opt = RmsProp::new(1, 0.01);
        let mut p = [0.0];
        opt.step(&mut p, &[1.0], idx).unwrap();
        assert!((opt.accumulators()[0] - 0.01).abs() < 1e-15);
        let expected = 0.01 / (0.1 + 1e-8);
        assert!((p[0] + expected).abs() < 1e-15);
        assert!((p[0] + 0.1).abs() < 1e-6);
    }

    #[test]
    fn opposes_gradient_sign() {
        let mut opt = RmsProp::new(4, 0.05);
        let grads = [3.0, -0.2, 1e-6, -7.0];
        let mut p = [0.0; 4];
        opt.step(&mut p, &grads, idx).unwrap();
        for (x, g) in p.iter().zip(grads) {
            assert!(x * g < 0.0);
        }
    }

    #[test]
    fn non_finite_gradient_names_parameter() {
        let mut opt = RmsProp::new(3, 0.01);
        let mut p = [0.0; 3];
        let err = opt.step(&mut p, &[0.0, f64::NAN, 1.0], idx).unwrap_err();
        assert!(err.to_string().contains("p[1]"));
        assert_eq!(p, [0.0; 3]);
        assert!(opt.step(&mut p, &[0.0], idx).is_err());
    }

    #[test]
    fn step_size_invariant_to_gradient_scale() {
        let grads: Vec<f64> = (0..500).map(|t| 1.0 + 0.5 * ((t as f64) * 0.37).sin()).collect();
        let run = |k: f64| {
            let mut opt = RmsProp::new(1, 0.01);
            let mut p = [0.0];
            let mut steps = Vec::new();
            for g in &grads {
                let before = p[0];
                opt.step(&mut p, &[k * g], idx).unwrap();
                steps.push(before - p[0]);
            }
            steps
        };
        let (a, b) = (run(1.0), run(1000.0));
        for (x, y) in a.iter().zip(&b).skip(400) {
            assert!((x - y).abs() / x.abs() < 0.01);
        }
    }
}
