use serde::{Deserialize, Serialize};

use super::Tensor;

/// First-order update rule.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Optimizer {
    Sgd { lr: f64 },
    Adam { lr: f64, beta1: f64, beta2: f64, eps: f64 },
}

impl Optimizer {
    pub fn sgd(lr: f64) -> Self {
        Self::Sgd { lr }
    }

    pub fn adam(lr: f64) -> Self {
        Self::Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn lr(&self) -> f64 {
        match *self {
            Self::Sgd { lr } | Self::Adam { lr, .. } => lr,
        }
    }

    /// Updates `param` in place from `grad`, advancing `state`.
    pub fn apply(&self, param: &mut Tensor, grad: &Tensor, state: &mut ParamState) {
        assert_eq!(param.shape(), grad.shape(), "gradient shape does not match parameter");
        let mut data = param.to_vec();
        match *self {
            Self::Sgd { lr } => {
                for (p, g) in data.iter_mut().zip(grad.data()) {
                    *p -= lr * g;
                }
            }
            Self::Adam { lr, beta1, beta2, eps } => {
                if state.m.len() != data.len() {
                    state.m = vec![0.0; data.len()];
                    state.v = vec![0.0; data.len()];
                }
                state.step += 1;
                let t = state.step as i32;
                let c1 = 1.0 - beta1.powi(t);
                let c2 = 1.0 - beta2.powi(t);
                for (((p, &g), m), v) in data
                    .iter_mut()
                    .zip(grad.data())
                    .zip(state.m.iter_mut())
                    .zip(state.v.iter_mut())
                {
                    *m = beta1 * *m + (1.0 - beta1) * g;
                    *v = beta2 * *v + (1.0 - beta2) * g * g;
                    *p -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
                }
            }
        }
        *param = Tensor::from_parts(param.shape().to_vec(), data);
    }

    /// Applies aligned gradients to a parameter list, growing `states` on first use.
    pub fn apply_all(&self, params: Vec<&mut Tensor>, grads: &[Tensor], states: &mut Vec<ParamState>) {
        assert_eq!(params.len(), grads.len(), "parameter and gradient counts differ");
        if states.len() != params.len() {
            states.resize_with(params.len(), ParamState::default);
        }
        for ((p, g), s) in params.into_iter().zip(grads).zip(states.iter_mut()) {
            self.apply(p, g, s);
        }
    }
}

/// Per-parameter optimizer moments.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamState {
    m: Vec<f64>,
    v: Vec<f64>,
    step: u64,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sgd_step() {
        let mut p = Tensor::vector(vec![1.0, 2.0]).unwrap();
        let g = Tensor::vector(vec![0.5, -1.0]).unwrap();
        Optimizer::sgd(0.1).apply(&mut p, &g, &mut ParamState::default());
        assert_eq!(p.data(), &[0.95, 2.1]);
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut p = Tensor::vector(vec![1.0]).unwrap();
        let g = Tensor::vector(vec![3.0]).unwrap();
        let mut s = ParamState::default();
        Optimizer::adam(0.01).apply(&mut p, &g, &mut s);
        assert!((p.item() - 0.99).abs() < 1e-9);
    }
}
