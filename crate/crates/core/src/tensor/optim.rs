use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::dense::Tensor;
use super::scalar::Scalar;

/// Hyperparameters of a plain SGD update.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SgdState {
    pub learning_rate: f64,
    #[serde(default)]
    pub momentum: f64,
}

impl SgdState {
    pub fn new(learning_rate: f64, momentum: f64) -> Result<Self> {
        let s = Self {
            learning_rate,
            momentum,
        };
        s.validate("learning_rate")?;
        Ok(s)
    }

    /// `field` names the config key reported on failure.
    pub fn validate(&self, field: &str) -> Result<()> {
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::config(field, "learning rate must be finite and > 0"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::config(field, "momentum must lie in [0, 1)"));
        }
        Ok(())
    }
}

/// `p ← p − lr·grad(p)`, then clears the gradient.
///
/// With `velocity` supplied the heavy-ball form `v ← μv + g; p ← p − lr·v` is used.
/// `lr` may be zero here; positivity is a config-level rule.
pub fn apply_update<S: Scalar>(
    name: &str,
    p: &mut Tensor<S>,
    lr: f64,
    momentum: Option<(f64, &mut Vec<S>)>,
) -> Result<()> {
    let g = p
        .take_grad()
        .ok_or_else(|| Error::MissingGrad(name.to_string()))?;
    let lr = S::from_f64(lr);
    match momentum {
        Some((mu, v)) if mu > 0.0 => {
            let mu = S::from_f64(mu);
            if v.len() != g.len() {
                *v = vec![S::zero(); g.len()];
            }
            for ((pv, vv), &gv) in p.data_mut().iter_mut().zip(v.iter_mut()).zip(&g) {
                *vv = mu * *vv + gv;
                *pv -= lr * *vv;
            }
        }
        _ => {
            for (pv, &gv) in p.data_mut().iter_mut().zip(&g) {
                *pv -= lr * gv;
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn one_step_arithmetic() {
        let mut p = Tensor::<f64>::scalar(1.0).with_requires_grad(true);
        p.accumulate_grad(&[0.5]).unwrap();
        apply_update("p", &mut p, 0.1, None).unwrap();
        assert!((p.data()[0] - 0.95).abs() < 1e-15);
        assert!(p.grad().is_none());
    }

    #[test]
    fn missing_grad_is_an_error() {
        let mut p = Tensor::<f64>::scalar(1.0).with_requires_grad(true);
        match apply_update("w.conv1", &mut p, 0.1, None) {
            Err(Error::MissingGrad(n)) => assert_eq!(n, "w.conv1"),
            _ => panic!("expected MissingGrad"),
        }
    }

    #[test]
    fn zero_learning_rate_rejected_by_config() {
        assert!(SgdState::new(0.0, 0.0).is_err());
        assert!(SgdState::new(-1.0, 0.0).is_err());
        assert!(SgdState::new(0.1, 1.0).is_err());
        assert!(SgdState::new(0.1, 0.9).is_ok());
    }

    #[test]
    fn sequential_steps_reduce_quadratic() {
        // f(p) = Σ (p - c)², grad = 2(p - c)
        let c = [1.0, -2.0, 0.5];
        let f = |p: &[f64]| p.iter().zip(c).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
        let mut p = Tensor::<f64>::from_f64(vec![3], &[0.0, 0.0, 0.0])
            .unwrap()
            .with_requires_grad(true);
        let mut last = f(p.data());
        for _ in 0..2 {
            let g: Vec<f64> = p.data().iter().zip(c).map(|(a, b)| 2.0 * (a - b)).collect();
            p.accumulate_grad(&g).unwrap();
            apply_update("p", &mut p, 0.05, None).unwrap();
            let now = f(p.data());
            assert!(now < last);
            last = now;
        }
    }

    #[test]
    fn momentum_accumulates_velocity() {
        let mut p = Tensor::<f64>::scalar(0.0).with_requires_grad(true);
        let mut v = Vec::new();
        for _ in 0..2 {
            p.accumulate_grad(&[1.0]).unwrap();
            apply_update("p", &mut p, 0.1, Some((0.5, &mut v))).unwrap();
        }
        // v1 = 1, p1 = -0.1; v2 = 1.5, p2 = -0.25
        assert!((p.data()[0] + 0.25).abs() < 1e-15);
    }
}
