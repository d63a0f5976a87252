//! Adam optimizer over the trainable entries of a [`ParamStore`].

use std::collections::HashMap;

use super::graph::Gradients;
use super::store::{ParamStore, TensorD};

pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    /// Update count; drives bias correction.
    t: u64,
    m: HashMap<usize, TensorD>,
    v: HashMap<usize, TensorD>,
}

impl Adam {
    pub fn new(lr: f64, beta1: f64, beta2: f64) -> Self {
        assert!(lr >= 0.0 && (0.0..1.0).contains(&beta1) && (0.0..1.0).contains(&beta2));
        Self {
            lr,
            beta1,
            beta2,
            eps: 1e-8,
            t: 0,
            m: HashMap::new(),
            v: HashMap::new(),
        }
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    pub fn set_lr(&mut self, lr: f64) {
        assert!(lr >= 0.0);
        self.lr = lr;
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }

    /// One bias-corrected update of every trainable parameter that received
    /// a gradient.
    pub fn step(&mut self, store: &mut ParamStore, grads: &Gradients) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for id in store.trainable_ids() {
            let Some(g) = grads.get(id) else { continue };
            let m = self
                .m
                .entry(id.0)
                .or_insert_with(|| TensorD::zeros(g.raw_dim()));
            let v = self
                .v
                .entry(id.0)
                .or_insert_with(|| TensorD::zeros(g.raw_dim()));
            m.zip_mut_with(g, |mv, &gv| *mv = self.beta1 * *mv + (1.0 - self.beta1) * gv);
            v.zip_mut_with(g, |vv, &gv| *vv = self.beta2 * *vv + (1.0 - self.beta2) * gv * gv);
            let param = store.get_mut(id);
            ndarray::Zip::from(&mut *param)
                .and(&*m)
                .and(&*v)
                .for_each(|p, &mv, &vv| {
                    let m_hat = mv / bc1;
                    let v_hat = vv / bc2;
                    *p -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
                });
        }
    }

    /// Moment tensors keyed by parameter name, for exact-resume checkpoints.
    pub fn export_state(&self, store: &ParamStore) -> Vec<(String, TensorD)> {
        let mut out = Vec::new();
        for id in store.trainable_ids() {
            if let Some(m) = self.m.get(&id.0) {
                out.push((format!("adam.m.{}", store.name(id)), m.clone()));
            }
            if let Some(v) = self.v.get(&id.0) {
                out.push((format!("adam.v.{}", store.name(id)), v.clone()));
            }
        }
        out
    }

    /// Restores moments exported by [`Self::export_state`]; unknown names are
    /// ignored so partially trained models still load.
    pub fn import_state(
        &mut self,
        store: &ParamStore,
        entries: &[(String, TensorD)],
        step_count: u64,
    ) {
        self.t = step_count;
        for (name, tensor) in entries {
            let Some(rest) = name.strip_prefix("adam.") else {
                continue;
            };
            let (kind, pname) = rest.split_at(2);
            let Some(id) = store.id_of(pname) else { continue };
            match kind {
                "m." => {
                    self.m.insert(id.0, tensor.clone());
                }
                "v." => {
                    self.v.insert(id.0, tensor.clone());
                }
                _ => {}
            }
        }
    }
}
