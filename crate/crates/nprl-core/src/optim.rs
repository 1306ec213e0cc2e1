//! Parameter update rules: SGD with momentum, RMSProp, Adam. State buffers
//! are allocated per parameter tensor and must match its shape for life.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use crate::elem::Elem;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OptimKind {
    SgdMomentum,
    Rmsprop,
    Adam,
}

#[derive(Debug, Clone, PartialEq)]
pub enum OptimError {
    NonPositiveLearningRate(f64),
    MissingGrad { param_index: usize },
    ShapeMismatch { param_index: usize, context: String },
    NonFiniteUpdate { param_index: usize },
}

impl fmt::Display for OptimError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            OptimError::NonPositiveLearningRate(lr) => write!(f, "learning rate must be > 0, got {}", lr),
            OptimError::MissingGrad { param_index } => write!(f, "parameter {} has no gradient", param_index),
            OptimError::ShapeMismatch { param_index, context } => {
                write!(f, "parameter {}: {}", param_index, context)
            }
            OptimError::NonFiniteUpdate { param_index } => {
                write!(f, "non-finite value in parameter {} after update", param_index)
            }
        }
    }
}

impl core::error::Error for OptimError {}

/// Hyperparameters of the three supported update rules. Unused fields are
/// ignored by the other kinds.
#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
pub struct OptimHyper {
    pub momentum: f64,
    pub rmsprop_decay: f64,
    pub rmsprop_eps: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
}

impl Default for OptimHyper {
    fn default() -> Self {
        OptimHyper {
            momentum: 0.9,
            rmsprop_decay: 0.99,
            rmsprop_eps: 1e-8,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
        }
    }
}

pub struct OptimizerState<E: Elem> {
    pub kind: OptimKind,
    pub learning_rate: f64,
    pub hyper: OptimHyper,
    pub step_count: u64,
    // first slot: momentum / square average / first moment,
    // second slot: Adam second moment
    slot1: Vec<Vec<E>>,
    slot2: Vec<Vec<E>>,
}

impl<E: Elem> OptimizerState<E> {
    pub fn new(kind: OptimKind, learning_rate: f64, param_shapes: &[&[usize]]) -> Result<Self, OptimError> {
        Self::with_hyper(kind, learning_rate, OptimHyper::default(), param_shapes)
    }

    pub fn with_hyper(
        kind: OptimKind,
        learning_rate: f64,
        hyper: OptimHyper,
        param_shapes: &[&[usize]],
    ) -> Result<Self, OptimError> {
        if learning_rate <= 0.0 {
            return Err(OptimError::NonPositiveLearningRate(learning_rate));
        }
        let slot1 = param_shapes.iter().map(|s| vec![E::ZERO; s.iter().product()]).collect();
        let slot2 = match kind {
            OptimKind::Adam => param_shapes.iter().map(|s| vec![E::ZERO; s.iter().product()]).collect(),
            _ => Vec::new(),
        };
        Ok(OptimizerState { kind, learning_rate, hyper, step_count: 0, slot1, slot2 })
    }

    /// Applies one update. `grads[i]` must match `params[i]` in length.
    pub fn step(&mut self, params: &mut [Tensor<E>], grads: &[Option<Vec<E>>]) -> Result<(), OptimError> {
        if params.len() != self.slot1.len() || grads.len() != params.len() {
            return Err(OptimError::ShapeMismatch {
                param_index: 0,
                context: String::from("parameter list does not match optimizer state"),
            });
        }
        self.step_count += 1;
        let lr = E::from_f64(self.learning_rate);
        for (i, (p, g)) in params.iter_mut().zip(grads.iter()).enumerate() {
            let g = g.as_ref().ok_or(OptimError::MissingGrad { param_index: i })?;
            if g.len() != p.numel() {
                return Err(OptimError::ShapeMismatch {
                    param_index: i,
                    context: String::from("gradient length does not match parameter"),
                });
            }
            match self.kind {
                OptimKind::SgdMomentum => {
                    let mu = E::from_f64(self.hyper.momentum);
                    let m = &mut self.slot1[i];
                    for ((pv, &gv), mv) in p.data_mut().iter_mut().zip(g.iter()).zip(m.iter_mut()) {
                        *mv = mu * *mv + gv;
                        *pv = *pv - lr * *mv;
                    }
                }
                OptimKind::Rmsprop => {
                    let rho = E::from_f64(self.hyper.rmsprop_decay);
                    let one_minus = E::ONE - rho;
                    let eps = E::from_f64(self.hyper.rmsprop_eps);
                    let v = &mut self.slot1[i];
                    for ((pv, &gv), vv) in p.data_mut().iter_mut().zip(g.iter()).zip(v.iter_mut()) {
                        *vv = rho * *vv + one_minus * gv * gv;
                        *pv = *pv - lr * gv / ((*vv).sqrt() + eps);
                    }
                }
                OptimKind::Adam => {
                    let b1 = E::from_f64(self.hyper.adam_beta1);
                    let b2 = E::from_f64(self.hyper.adam_beta2);
                    let eps = E::from_f64(self.hyper.adam_eps);
                    let t = self.step_count as i32;
                    let bc1 = E::ONE - b1.powi(t);
                    let bc2 = E::ONE - b2.powi(t);
                    let (m, v) = (&mut self.slot1[i], &mut self.slot2[i]);
                    for (((pv, &gv), mv), vv) in
                        p.data_mut().iter_mut().zip(g.iter()).zip(m.iter_mut()).zip(v.iter_mut())
                    {
                        *mv = b1 * *mv + (E::ONE - b1) * gv;
                        *vv = b2 * *vv + (E::ONE - b2) * gv * gv;
                        let m_hat = *mv / bc1;
                        let v_hat = *vv / bc2;
                        *pv = *pv - lr * m_hat / (v_hat.sqrt() + eps);
                    }
                }
            }
            if p.data().iter().any(|v| !v.is_finite()) {
                return Err(OptimError::NonFiniteUpdate { param_index: i });
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_param(v: f64) -> Vec<Tensor<f64>> {
        vec![Tensor::scalar(v)]
    }

    #[test]
    fn sgd_without_momentum_is_plain_descent() {
        let mut params = one_param(1.0);
        let hyper = OptimHyper { momentum: 0.0, ..OptimHyper::default() };
        let mut opt = OptimizerState::with_hyper(OptimKind::SgdMomentum, 0.1, hyper, &[&[1]]).unwrap();
        opt.step(&mut params, &[Some(vec![1.0])]).unwrap();
        assert_eq!(params[0].item(), 0.9);
        assert_eq!(opt.step_count, 1);
    }

    #[test]
    fn zero_gradient_leaves_parameters_unchanged_for_all_kinds() {
        for kind in [OptimKind::SgdMomentum, OptimKind::Rmsprop, OptimKind::Adam] {
            let mut params = one_param(0.75);
            let mut opt = OptimizerState::new(kind, 0.05, &[&[1]]).unwrap();
            opt.step(&mut params, &[Some(vec![0.0])]).unwrap();
            opt.step(&mut params, &[Some(vec![0.0])]).unwrap();
            assert_eq!(params[0].item(), 0.75, "{:?}", kind);
        }
    }

    #[test]
    fn adam_first_step_matches_hand_computed_recurrence() {
        // hand-stepped oracle with defaults beta1=0.9 beta2=0.999 eps=1e-8:
        // m1 = 0.1*g, v1 = 0.001*g^2, m_hat = g, v_hat = g^2,
        // delta = lr * g / (|g| + eps)
        let g = 0.37;
        let lr = 1e-3;
        let m1 = 0.1 * g;
        let v1: f64 = 0.001 * g * g;
        let m_hat = m1 / 0.1;
        let v_hat = v1 / 0.001;
        let expected = 1.0 - lr * m_hat / (v_hat.sqrt() + 1e-8);

        let mut params = one_param(1.0);
        let mut opt = OptimizerState::new(OptimKind::Adam, lr, &[&[1]]).unwrap();
        opt.step(&mut params, &[Some(vec![g])]).unwrap();
        assert!((params[0].item() - expected).abs() < 1e-15);
    }

    #[test]
    fn missing_grad_is_an_error() {
        let mut params = one_param(1.0);
        let mut opt = OptimizerState::new(OptimKind::Rmsprop, 0.01, &[&[1]]).unwrap();
        assert_eq!(opt.step(&mut params, &[None]), Err(OptimError::MissingGrad { param_index: 0 }));
    }

    #[test]
    fn learning_rate_must_be_positive() {
        assert!(OptimizerState::<f32>::new(OptimKind::Adam, 0.0, &[]).is_err());
        assert!(OptimizerState::<f32>::new(OptimKind::Adam, -1.0, &[]).is_err());
    }

    #[test]
    fn divergence_is_reported() {
        let mut params = one_param(1.0);
        let hyper = OptimHyper { momentum: 0.0, ..OptimHyper::default() };
        let mut opt = OptimizerState::with_hyper(OptimKind::SgdMomentum, 1e300, hyper, &[&[1]]).unwrap();
        let r = opt.step(&mut params, &[Some(vec![1e30])]);
        assert_eq!(r, Err(OptimError::NonFiniteUpdate { param_index: 0 }));
    }
}
