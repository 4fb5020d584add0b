use serde::{Deserialize, Serialize};

use crate::Scalar;

use super::{Tensor, TensorError};

/// Adam hyper-parameters. `lr` is the default; slots may override it.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// One parameter tensor presented to the optimizer.
pub struct ParamSlot<'a, T> {
    pub layer: i32,
    pub name: &'a str,
    pub trainable: bool,
    pub lr: f64,
    pub value: &'a mut Tensor<T>,
    pub grad: Option<&'a [T]>,
}

/// Adam with bias correction. Moment buffers are indexed by slot position,
/// so callers must present parameters in a stable order.
#[derive(Clone, Debug)]
pub struct Adam<T> {
    config: AdamConfig,
    step: u64,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(config: AdamConfig) -> Self {
        Adam {
            config,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn config(&self) -> &AdamConfig {
        &self.config
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Applies one update. Frozen slots and slots without a gradient are
    /// left bitwise untouched. A non-finite gradient aborts the whole step
    /// before any parameter changes.
    pub fn step(&mut self, slots: &mut [ParamSlot<'_, T>]) -> Result<(), TensorError> {
        for s in slots.iter() {
            if let (true, Some(g)) = (s.trainable, s.grad) {
                if g.len() != s.value.len() {
                    return Err(TensorError::ShapeMismatch {
                        op: "adam_step",
                        detail: format!(
                            "gradient len {} for `{}` of len {}",
                            g.len(),
                            s.name,
                            s.value.len()
                        ),
                    });
                }
                if g.iter().any(|x| !x.is_finite()) {
                    return Err(TensorError::NonFiniteGradient {
                        layer: s.layer,
                        param: s.name.to_string(),
                    });
                }
            }
        }
        if self.m.len() < slots.len() {
            for s in &slots[self.m.len()..] {
                self.m.push(vec![T::zero(); s.value.len()]);
                self.v.push(vec![T::zero(); s.value.len()]);
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let b1 = T::lit(self.config.beta1);
        let b2 = T::lit(self.config.beta2);
        let eps = T::lit(self.config.eps);
        let bc1 = T::one() - b1.powi(t);
        let bc2 = T::one() - b2.powi(t);
        for (i, s) in slots.iter_mut().enumerate() {
            let Some(g) = s.grad.filter(|_| s.trainable) else {
                continue;
            };
            let lr = T::lit(s.lr);
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (((w, &gi), mi), vi) in s
                .value
                .data_mut()
                .iter_mut()
                .zip(g)
                .zip(m.iter_mut())
                .zip(v.iter_mut())
            {
                *mi = b1 * *mi + (T::one() - b1) * gi;
                *vi = b2 * *vi + (T::one() - b2) * gi * gi;
                let m_hat = *mi / bc1;
                let v_hat = *vi / bc2;
                *w -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}
