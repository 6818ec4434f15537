use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::params::ParamStore;

/// Adam with decoupled weight decay. Moments are kept per parameter in
/// `f64`, and each parameter counts its own steps, so a tensor that sat
/// out a step (no gradient) is neither decayed nor moved.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    state: BTreeMap<String, Moments>,
}

#[derive(Debug, Clone)]
struct Moments {
    step: i32,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl AdamW {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            state: BTreeMap::new(),
        }
    }

    /// Update every parameter named in `grads`. Frozen tensors are
    /// rejected.
    pub fn step(&mut self, params: &mut ParamStore, grads: &BTreeMap<String, Vec<f32>>) -> Result<()> {
        for (name, g) in grads {
            let p = params.get_mut(name)?;
            if !p.requires_grad {
                return Err(Error::invalid(format!("optimizer asked to update frozen tensor {name}")));
            }
            if g.len() != p.numel() {
                return Err(Error::Shape {
                    op: "adamw",
                    lhs: p.shape().to_vec(),
                    rhs: vec![g.len()],
                });
            }
            let st = self.state.entry(name.clone()).or_insert_with(|| Moments {
                step: 0,
                m: vec![0.0; g.len()],
                v: vec![0.0; g.len()],
            });
            st.step += 1;
            let bc1 = 1.0 - self.beta1.powi(st.step);
            let bc2 = 1.0 - self.beta2.powi(st.step);
            let decay = 1.0 - self.lr * self.weight_decay;
            for (((pv, &gv), m), v) in p.data_mut().iter_mut().zip(g).zip(&mut st.m).zip(&mut st.v) {
                let gv = gv as f64;
                *m = self.beta1 * *m + (1.0 - self.beta1) * gv;
                *v = self.beta2 * *v + (1.0 - self.beta2) * gv * gv;
                let mhat = *m / bc1;
                let vhat = *v / bc2;
                let x = *pv as f64 * decay - self.lr * mhat / (vhat.sqrt() + self.eps);
                *pv = x as f32;
            }
        }
        Ok(())
    }
}
