use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const EPS: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Moments {
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

/// Per-tensor optimizer state keyed by parameter name.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerState {
    pub kind: OptimizerKind,
    moments: BTreeMap<String, Moments>,
}

impl OptimizerState {
    pub fn new(kind: OptimizerKind) -> Self {
        OptimizerState {
            kind,
            moments: BTreeMap::new(),
        }
    }

    /// Applies one descent step to `param` with gradient `grad`.
    pub fn update(&mut self, name: &str, param: &mut Tensor, grad: &[f64], lr: f64) {
        debug_assert_eq!(param.numel(), grad.len());
        match self.kind {
            OptimizerKind::Sgd => {
                for (p, g) in param.data_mut().iter_mut().zip(grad) {
                    *p -= lr * g;
                }
            }
            OptimizerKind::Adam => {
                let n = grad.len();
                let st = self.moments.entry(name.to_string()).or_insert_with(|| Moments {
                    m: vec![0.0; n],
                    v: vec![0.0; n],
                    t: 0,
                });
                if st.m.len() != n {
                    *st = Moments {
                        m: vec![0.0; n],
                        v: vec![0.0; n],
                        t: 0,
                    };
                }
                st.t += 1;
                let c1 = 1.0 - BETA1.powi(st.t as i32);
                let c2 = 1.0 - BETA2.powi(st.t as i32);
                for (((p, &g), m), v) in param.data_mut().iter_mut().zip(grad).zip(&mut st.m).zip(&mut st.v) {
                    *m = BETA1 * *m + (1.0 - BETA1) * g;
                    *v = BETA2 * *v + (1.0 - BETA2) * g * g;
                    *p -= lr * (*m / c1) / ((*v / c2).sqrt() + EPS);
                }
            }
        }
    }

    /// Keeps the moment entries at `kept` positions of a vector parameter.
    pub fn remap(&mut self, name: &str, kept: &[usize]) {
        if let Some(st) = self.moments.get_mut(name) {
            st.m = kept.iter().map(|&j| st.m[j]).collect();
            st.v = kept.iter().map(|&j| st.v[j]).collect();
        }
    }

    /// Drops state for names no longer present.
    pub fn retain_names(&mut self, names: &[String]) {
        self.moments.retain(|k, _| names.contains(k));
    }

    pub fn has_state(&self, name: &str) -> bool {
        self.moments.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.moments.keys().map(String::as_str)
    }
}
