use serde::{Deserialize, Serialize};

use super::{Element, Parameter, Result, TensorError};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OptimizerKind {
    RmsProp { decay: f64, eps: f64 },
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl OptimizerKind {
    pub fn rmsprop() -> Self {
        OptimizerKind::RmsProp { decay: 0.99, eps: 1e-8 }
    }

    /// Adam with `beta1 = 0.5`, `beta2 = 0.999`.
    pub fn adam_fewshot() -> Self {
        OptimizerKind::Adam {
            beta1: 0.5,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First-order optimizer with per-parameter moment buffers.
#[derive(Clone, Debug)]
pub struct Optimizer<T = f32> {
    pub kind: OptimizerKind,
    pub learning_rate: f64,
    step_count: u64,
    first: Vec<Vec<T>>,
    second: Vec<Vec<T>>,
}

impl<T: Element> Optimizer<T> {
    pub fn new(kind: OptimizerKind, learning_rate: f64) -> Self {
        Self {
            kind,
            learning_rate,
            step_count: 0,
            first: Vec::new(),
            second: Vec::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    /// Applies one update to every trainable parameter. Moment buffers are
    /// created on the first call and must keep matching shapes afterwards.
    pub fn step(&mut self, params: &mut [&mut Parameter<T>]) -> Result<()> {
        let trainable: Vec<&mut &mut Parameter<T>> = params.iter_mut().filter(|p| p.requires_grad).collect();
        if let Some(p) = trainable.iter().find(|p| p.grad.is_none()) {
            return Err(TensorError::MissingGrad(p.name.clone()));
        }
        if self.second.is_empty() {
            self.second = trainable.iter().map(|p| vec![T::zero(); p.value.numel()]).collect();
            if matches!(self.kind, OptimizerKind::Adam { .. }) {
                self.first = self.second.clone();
            }
        }
        if self.second.len() != trainable.len()
            || trainable.iter().zip(&self.second).any(|(p, m)| p.value.numel() != m.len())
        {
            return Err(TensorError::InvalidNetwork(
                "parameter set changed between optimizer steps".into(),
            ));
        }
        self.step_count += 1;
        let lr = T::lit(self.learning_rate);
        match self.kind {
            OptimizerKind::RmsProp { decay, eps } => {
                let (a, eps) = (T::lit(decay), T::lit(eps));
                for (p, v) in trainable.into_iter().zip(&mut self.second) {
                    let grad = p.grad.as_ref().expect("checked").data().to_vec();
                    for ((w, s), g) in p.value.data_mut().iter_mut().zip(v.iter_mut()).zip(grad) {
                        *s = a * *s + (T::one() - a) * g * g;
                        *w -= lr * g / (s.sqrt() + eps);
                    }
                }
            }
            OptimizerKind::Adam { beta1, beta2, eps } => {
                let t = self.step_count as i32;
                let c1 = T::lit(1.0 - beta1.powi(t));
                let c2 = T::lit(1.0 - beta2.powi(t));
                let (b1, b2, eps) = (T::lit(beta1), T::lit(beta2), T::lit(eps));
                for ((p, m), v) in trainable.into_iter().zip(&mut self.first).zip(&mut self.second) {
                    let grad = p.grad.as_ref().expect("checked").data().to_vec();
                    for (((w, m), v), g) in p.value.data_mut().iter_mut().zip(m.iter_mut()).zip(v.iter_mut()).zip(grad) {
                        *m = b1 * *m + (T::one() - b1) * g;
                        *v = b2 * *v + (T::one() - b2) * g * g;
                        let mh = *m / c1;
                        let vh = *v / c2;
                        *w -= lr * mh / (vh.sqrt() + eps);
                    }
                }
            }
        }
        Ok(())
    }
}
