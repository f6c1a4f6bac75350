use serde::{Deserialize, Serialize};

use super::{ParamStore, Real};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum OptimizerKind {
    Sgd,
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl OptimizerKind {
    pub fn adam() -> Self {
        OptimizerKind::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Optimizer hyperparameters plus per-parameter moment buffers.
#[derive(Debug, Clone)]
pub struct OptimizerState<T: Real = f32> {
    pub kind: OptimizerKind,
    pub learning_rate: f64,
    pub weight_decay: f64,
    moments: Vec<(Vec<T>, Vec<T>)>,
    step: u64,
}

impl<T: Real> OptimizerState<T> {
    pub fn new(kind: OptimizerKind, learning_rate: f64, weight_decay: f64) -> Self {
        OptimizerState {
            kind,
            learning_rate,
            weight_decay,
            moments: Vec::new(),
            step: 0,
        }
    }

    pub fn sgd(learning_rate: f64, weight_decay: f64) -> Self {
        Self::new(OptimizerKind::Sgd, learning_rate, weight_decay)
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Applies one update to every parameter that requires gradients, then
    /// clears the gradients.
    pub fn apply(&mut self, params: &mut ParamStore<T>) -> Result<()> {
        if !params.grads_populated() {
            return Err(Error::MissingGradients);
        }
        self.step += 1;
        let lr = T::lit(self.learning_rate);
        let wd = T::lit(self.weight_decay);
        match self.kind {
            OptimizerKind::Sgd => {
                for t in params.tensors_mut() {
                    let Some(grad) = t.grad.as_ref() else { continue };
                    for (p, &g) in t.data.iter_mut().zip(grad) {
                        *p -= lr * (g + wd * *p);
                    }
                }
            }
            OptimizerKind::Adam { beta1, beta2, eps } => {
                if self.moments.is_empty() {
                    self.moments = params
                        .tensors_mut()
                        .map(|t| {
                            let n = if t.requires_grad() { t.numel() } else { 0 };
                            (vec![T::zero(); n], vec![T::zero(); n])
                        })
                        .collect();
                }
                let (b1, b2, eps) = (T::lit(beta1), T::lit(beta2), T::lit(eps));
                let step = self.step as i32;
                let c1 = T::one() - b1.powi(step);
                let c2 = T::one() - b2.powi(step);
                for (t, (m, v)) in params.tensors_mut().zip(self.moments.iter_mut()) {
                    let Some(grad) = t.grad.as_ref() else { continue };
                    for (((p, &g), mi), vi) in t.data.iter_mut().zip(grad).zip(m.iter_mut()).zip(v.iter_mut()) {
                        let g = g + wd * *p;
                        *mi = b1 * *mi + (T::one() - b1) * g;
                        *vi = b2 * *vi + (T::one() - b2) * g * g;
                        let mhat = *mi / c1;
                        let vhat = *vi / c2;
                        *p -= lr * mhat / (vhat.sqrt() + eps);
                    }
                }
            }
        }
        params.zero_grad();
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{Gradients, ParamId, Tensor};

    fn store(p: f32) -> ParamStore<f32> {
        let mut s = ParamStore::new();
        s.insert("p", Tensor::scalar(p).with_grad()).unwrap();
        s
    }

    fn grads(g: f32) -> Gradients<f32> {
        let mut out = Gradients::with_len(1);
        out.add(ParamId(0), &[g]);
        out
    }

    #[test]
    fn sgd_unit_step() {
        let mut s = store(0.0);
        s.accumulate(&grads(1.0));
        let mut opt = OptimizerState::sgd(1.0, 0.0);
        opt.apply(&mut s).unwrap();
        assert_eq!(s.get(ParamId(0)).data(), &[-1.0]);
        assert_eq!(s.get(ParamId(0)).grad().unwrap(), &[0.0]);
        assert_eq!(opt.steps(), 1);
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut s = store(0.75);
        s.accumulate(&grads(0.0));
        let mut opt = OptimizerState::sgd(0.1, 0.0);
        opt.apply(&mut s).unwrap();
        assert_eq!(s.get(ParamId(0)).data(), &[0.75]);
    }

    #[test]
    fn missing_gradients_error() {
        let mut s = store(1.0);
        let mut opt = OptimizerState::<f32>::sgd(0.1, 0.0);
        assert!(matches!(opt.apply(&mut s), Err(Error::MissingGradients)));
        s.accumulate(&grads(1.0));
        opt.apply(&mut s).unwrap();
        // gradients were cleared by the previous step
        assert!(matches!(opt.apply(&mut s), Err(Error::MissingGradients)));
    }

    #[test]
    fn adam_first_step_has_magnitude_lr() {
        // m̂ = g and v̂ = g² after one step, so the update is lr·g/(|g|+eps).
        for g in [1e-3f32, 0.5, 40.0] {
            let mut s = store(0.0);
            s.accumulate(&grads(g));
            let mut opt = OptimizerState::new(OptimizerKind::adam(), 0.01, 0.0);
            opt.apply(&mut s).unwrap();
            let moved = s.get(ParamId(0)).data()[0];
            assert!((moved + 0.01).abs() < 1e-6, "g={g} moved={moved}");
        }
    }

    #[test]
    fn step_counter_increments() {
        let mut s = store(1.0);
        let mut opt = OptimizerState::new(OptimizerKind::adam(), 0.01, 0.0);
        for i in 1..=3 {
            s.accumulate(&grads(1.0));
            opt.apply(&mut s).unwrap();
            assert_eq!(opt.steps(), i);
        }
    }
}
