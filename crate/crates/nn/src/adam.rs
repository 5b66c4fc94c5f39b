//! Adam optimizer plus the weight clamp used by Wasserstein critics.

use crate::store::{ParamId, VarStore};
use crate::tape::Grads;
use crate::Arr;
use std::collections::HashMap;

pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    m: HashMap<ParamId, Arr>,
    v: HashMap<ParamId, Arr>,
    params: Vec<ParamId>,
}

impl Adam {
    pub fn new(params: Vec<ParamId>, lr: f64, beta1: f64, beta2: f64) -> Self {
        Adam {
            lr,
            beta1,
            beta2,
            eps: 1e-8,
            t: 0,
            m: HashMap::new(),
            v: HashMap::new(),
            params,
        }
    }

    pub fn params(&self) -> &[ParamId] {
        &self.params
    }

    pub fn step(&mut self, store: &mut VarStore, grads: &Grads) {
        self.t += 1;
        let b1t = 1.0 - self.beta1.powi(self.t as i32);
        let b2t = 1.0 - self.beta2.powi(self.t as i32);
        for &pid in &self.params {
            let Some(g) = grads.param(pid) else { continue };
            let m = self
                .m
                .entry(pid)
                .or_insert_with(|| Arr::zeros(g.raw_dim()));
            let v = self
                .v
                .entry(pid)
                .or_insert_with(|| Arr::zeros(g.raw_dim()));
            m.zip_mut_with(g, |mv, gv| *mv = self.beta1 * *mv + (1.0 - self.beta1) * gv);
            v.zip_mut_with(g, |vv, gv| {
                *vv = self.beta2 * *vv + (1.0 - self.beta2) * gv * gv
            });
            let p = store.get_mut(pid);
            ndarray::Zip::from(&mut *p)
                .and(&*m)
                .and(&*v)
                .for_each(|pv, &mv, &vv| {
                    let mhat = mv / b1t;
                    let vhat = vv / b2t;
                    *pv -= self.lr * mhat / (vhat.sqrt() + self.eps);
                });
        }
    }
}

/// Clamp every listed parameter elementwise into [-c, c].
pub fn clamp_weights(store: &mut VarStore, params: &[ParamId], c: f64) {
    for &pid in params {
        store
            .get_mut(pid)
            .mapv_inplace(|v| v.clamp(-c, c));
    }
}

/// Scale gradients so the global norm does not exceed `max_norm`.
pub fn clip_global_norm(grads: &mut Grads, max_norm: f64) {
    let n = grads.global_norm();
    if n > max_norm && n > 0.0 {
        grads.scale(max_norm / n);
    }
}
