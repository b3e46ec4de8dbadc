use std::collections::BTreeMap;

use crate::error::{Result, TensorError};
use crate::graph::Gradients;
use crate::params::ParamStore;

#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Gradients are rescaled to this global norm when it is exceeded.
    pub clip_norm: Option<f64>,
    step: u64,
    first: BTreeMap<String, Vec<f64>>,
    second: BTreeMap<String, Vec<f64>>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm: None,
            step: 0,
            first: BTreeMap::new(),
            second: BTreeMap::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, params: &mut ParamStore, grads: &Gradients) -> Result<()> {
        if !grads.iter().all(|(_, g)| g.is_finite()) {
            return Err(TensorError::NonFinite { op: "adam" });
        }
        let scale = match self.clip_norm {
            Some(max) => {
                let norm = grads.global_norm();
                if norm > max {
                    max / norm
                } else {
                    1.0
                }
            }
            None => 1.0,
        };
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (name, g) in grads.iter() {
            let trainable = params.param(name).map(|p| p.trainable);
            match trainable {
                None => return Err(TensorError::UnknownParam(name.to_string())),
                Some(false) => continue,
                Some(true) => {}
            }
            let n = g.len();
            let m = self.first.entry(name.to_string()).or_insert_with(|| vec![0.0; n]);
            let v = self.second.entry(name.to_string()).or_insert_with(|| vec![0.0; n]);
            let data = params.data_mut(name)?;
            if data.len() != n {
                return Err(TensorError::ShapeMismatch {
                    op: "adam",
                    detail: format!("`{name}` has {} entries, gradient has {n}", data.len()),
                });
            }
            for i in 0..n {
                let gi = g.data()[i] * scale;
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * gi;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * gi * gi;
                let update = self.lr * (m[i] / c1) / ((v[i] / c2).sqrt() + self.eps);
                data[i] -= update;
            }
        }
        Ok(())
    }
}
