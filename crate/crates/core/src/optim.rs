//! Adam.

use std::collections::HashMap;

use crate::error::{config_err, Error, Result};
use crate::tensor::{ParamId, ParamStore, Tensor};

#[derive(Debug, Clone)]
struct Moments {
    m: Vec<f32>,
    v: Vec<f32>,
    t: i32,
}

#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    state: HashMap<ParamId, Moments>,
}

impl Adam {
    pub fn new(lr: f32, beta1: f32, beta2: f32) -> Result<Self> {
        if !(lr > 0.0 && lr.is_finite()) || !(0.0..1.0).contains(&beta1) || !(0.0..1.0).contains(&beta2) {
            return Err(config_err!("invalid Adam settings lr={lr} beta1={beta1} beta2={beta2}"));
        }
        Ok(Self {
            lr,
            beta1,
            beta2,
            eps: 1e-8,
            state: HashMap::new(),
        })
    }

    /// Applies one update per gradient. Each parameter keeps its own step
    /// count, so groups may be stepped at different times.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[(ParamId, Tensor)]) -> Result<()> {
        for (id, g) in grads {
            if !g.is_finite() {
                return Err(Error::Numeric(format!("non-finite gradient for {}", store.name(*id))));
            }
        }
        for (id, g) in grads {
            let n = g.numel();
            if store.get(*id).numel() != n {
                return Err(config_err!("gradient size mismatch for {}", store.name(*id)));
            }
            let st = self.state.entry(*id).or_insert_with(|| Moments {
                m: vec![0.0; n],
                v: vec![0.0; n],
                t: 0,
            });
            st.t += 1;
            let bc1 = 1.0 - self.beta1.powi(st.t);
            let bc2 = 1.0 - self.beta2.powi(st.t);
            let step = self.lr * bc2.sqrt() / bc1;
            let eps = self.eps * bc2.sqrt();
            let p = store.get_mut(*id).data_mut();
            for i in 0..n {
                let gi = g.data()[i];
                st.m[i] = self.beta1 * st.m[i] + (1.0 - self.beta1) * gi;
                st.v[i] = self.beta2 * st.v[i] + (1.0 - self.beta2) * gi * gi;
                p[i] -= step * st.m[i] / (st.v[i].sqrt() + eps);
            }
        }
        Ok(())
    }
}
