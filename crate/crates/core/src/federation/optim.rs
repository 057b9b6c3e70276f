//! Local optimizers. SGD applies weight decay as a coupled L2 term, Adam as
//! decoupled decay. Parameters that received no gradient in the last
//! backward pass are left untouched.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::autodiff::ParamStore;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Clone)]
pub struct Optimizer {
    kind: OptimizerKind,
    lr: f64,
    weight_decay: f64,
    /// Per-parameter first and second moments plus step count (Adam only).
    moments: BTreeMap<String, (Vec<f64>, Vec<f64>, i32)>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, lr: f64, weight_decay: f64) -> Self {
        Optimizer {
            kind,
            lr,
            weight_decay,
            moments: BTreeMap::new(),
        }
    }

    pub fn step(&mut self, store: &mut ParamStore) {
        for (id, p) in store.iter_mut() {
            if !p.has_grad {
                continue;
            }
            let grad = p.grad.data();
            let value = p.value.data_mut();
            match self.kind {
                OptimizerKind::Sgd => {
                    for (v, g) in value.iter_mut().zip(grad) {
                        *v -= self.lr * (g + self.weight_decay * *v);
                    }
                }
                OptimizerKind::Adam => {
                    let (m, s, t) = self
                        .moments
                        .entry(id.to_string())
                        .or_insert_with(|| (vec![0.0; grad.len()], vec![0.0; grad.len()], 0));
                    *t += 1;
                    let c1 = 1.0 - BETA1.powi(*t);
                    let c2 = 1.0 - BETA2.powi(*t);
                    for i in 0..value.len() {
                        m[i] = BETA1 * m[i] + (1.0 - BETA1) * grad[i];
                        s[i] = BETA2 * s[i] + (1.0 - BETA2) * grad[i] * grad[i];
                        let update = (m[i] / c1) / ((s[i] / c2).sqrt() + ADAM_EPS);
                        value[i] -= self.lr * (update + self.weight_decay * value[i]);
                    }
                }
            }
        }
    }
}
