use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::ParameterSet;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

#[derive(Clone, Debug)]
pub struct Optimizer {
    kind: OptimizerKind,
    learning_rate: f64,
    beta1: f64,
    beta2: f64,
    epsilon: f64,
    step: u64,
    // first and second moments per parameter
    moments: BTreeMap<String, (Vec<f64>, Vec<f64>)>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, learning_rate: f64) -> Result<Self> {
        if !(learning_rate > 0.0 && learning_rate.is_finite()) {
            return Err(Error::Config(format!(
                "learning rate must be positive, got {learning_rate}"
            )));
        }
        Ok(Self {
            kind,
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            step: 0,
            moments: BTreeMap::new(),
        })
    }

    pub fn sgd(learning_rate: f64) -> Result<Self> {
        Self::new(OptimizerKind::Sgd, learning_rate)
    }

    pub fn adam(learning_rate: f64) -> Result<Self> {
        Self::new(OptimizerKind::Adam, learning_rate)
    }

    pub fn kind(&self) -> OptimizerKind {
        self.kind
    }

    pub fn learning_rate(&self) -> f64 {
        self.learning_rate
    }

    /// Updates every parameter in place from its gradient. Gradients are left
    /// as they are; the caller clears them before the next batch.
    pub fn step(&mut self, params: &mut ParameterSet) -> Result<()> {
        if let Some((name, _)) = params.iter().find(|(_, t)| t.grad().is_none()) {
            return Err(Error::Contract(format!(
                "parameter `{name}` has no gradient for the optimizer step"
            )));
        }
        self.step += 1;
        let lr = self.learning_rate;
        match self.kind {
            OptimizerKind::Sgd => {
                for (_, t) in params.iter_mut() {
                    let g = t.grad().expect("checked above").to_vec();
                    t.values_mut()
                        .iter_mut()
                        .zip(&g)
                        .for_each(|(w, g)| *w -= lr * g);
                }
            }
            OptimizerKind::Adam => {
                let (b1, b2, eps) = (self.beta1, self.beta2, self.epsilon);
                let bc1 = 1.0 - b1.powi(self.step as i32);
                let bc2 = 1.0 - b2.powi(self.step as i32);
                for (name, t) in params.iter_mut() {
                    let g = t.grad().expect("checked above").to_vec();
                    let (m, v) = self
                        .moments
                        .entry(name.to_string())
                        .or_insert_with(|| (vec![0.0; g.len()], vec![0.0; g.len()]));
                    for (((w, gi), mi), vi) in t
                        .values_mut()
                        .iter_mut()
                        .zip(&g)
                        .zip(m.iter_mut())
                        .zip(v.iter_mut())
                    {
                        *mi = b1 * *mi + (1.0 - b1) * gi;
                        *vi = b2 * *vi + (1.0 - b2) * gi * gi;
                        let m_hat = *mi / bc1;
                        let v_hat = *vi / bc2;
                        *w -= lr * m_hat / (v_hat.sqrt() + eps);
                    }
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn single(value: f64, grad: Option<f64>) -> ParameterSet {
        let mut ps = ParameterSet::new();
        ps.insert("w", Tensor::scalar(value)).unwrap();
        if let Some(g) = grad {
            ps.get_mut("w").unwrap().set_grad(vec![g]).unwrap();
        }
        ps
    }

    #[test]
    fn sgd_step() {
        let mut ps = single(1.0, Some(2.0));
        Optimizer::sgd(0.1).unwrap().step(&mut ps).unwrap();
        assert!((ps.get("w").unwrap().values()[0] - 0.8).abs() < 1e-15);
        assert_eq!(ps.get("w").unwrap().grad(), Some(&[2.0][..]));
    }

    #[test]
    fn sgd_zero_gradient_is_fixed_point() {
        let mut ps = single(0.37, Some(0.0));
        Optimizer::sgd(0.5).unwrap().step(&mut ps).unwrap();
        assert_eq!(ps.get("w").unwrap().values()[0], 0.37);
    }

    #[test]
    fn adam_first_step_moves_by_lr_times_sign() {
        // m_hat = g, v_hat = g², so the step is lr * g / (|g| + eps)
        for g in [3.0, -0.02, 1e-3] {
            let mut ps = single(1.0, Some(g));
            Optimizer::adam(0.01).unwrap().step(&mut ps).unwrap();
            let moved = ps.get("w").unwrap().values()[0] - 1.0;
            let expected = -0.01 * g / (g.abs() + 1e-8);
            assert!(
                (moved - expected).abs() < 1e-15,
                "g={g}: {moved} vs {expected}"
            );
            assert!((moved + 0.01 * g.signum()).abs() < 1e-7);
        }
    }

    #[test]
    fn adam_zero_gradient_leaves_parameter() {
        let mut ps = single(0.25, Some(0.0));
        Optimizer::adam(0.1).unwrap().step(&mut ps).unwrap();
        assert_eq!(ps.get("w").unwrap().values()[0], 0.25);
    }

    #[test]
    fn missing_gradient_names_the_parameter() {
        let mut ps = single(1.0, None);
        let err = Optimizer::sgd(0.1).unwrap().step(&mut ps).unwrap_err();
        assert!(err.to_string().contains("`w`"));
    }

    #[test]
    fn rejects_nonpositive_learning_rate() {
        assert!(Optimizer::adam(0.0).is_err());
        assert!(Optimizer::sgd(-1.0).is_err());
    }
}
