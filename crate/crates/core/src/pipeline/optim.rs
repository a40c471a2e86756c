//! First-order optimizers with decoupled weight decay.
//!
//! Parameters whose gradient is `None` (not reached by the loss) are left
//! untouched, including by weight decay.

use crate::params::{Gradients, ParamId, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum OptimizerKind {
    Sgd,
    AdamW { beta1: f64, beta2: f64, eps: f64 },
}

impl OptimizerKind {
    pub fn adamw() -> Self {
        OptimizerKind::AdamW { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

pub struct Optimizer {
    kind: OptimizerKind,
    lr: f64,
    weight_decay: f64,
    t: u32,
    moments: Vec<Option<(Tensor<f32>, Tensor<f32>)>>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, lr: f64, weight_decay: f64) -> Self {
        Self { kind, lr, weight_decay, t: 0, moments: Vec::new() }
    }

    pub fn step(&mut self, params: &mut ParamStore<f32>, grads: &Gradients<f32>) {
        self.t += 1;
        if self.moments.len() != params.len() {
            self.moments = vec![None; params.len()];
        }
        let lr = self.lr as f32;
        let decay = 1.0 - (self.lr * self.weight_decay) as f32;
        for i in 0..params.len() {
            let Some(g) = grads.get(ParamId(i)) else { continue };
            let p = params.get_mut(ParamId(i));
            match self.kind {
                OptimizerKind::Sgd => {
                    for (w, &gv) in p.data.iter_mut().zip(&g.data) {
                        *w = *w * decay - lr * gv;
                    }
                }
                OptimizerKind::AdamW { beta1, beta2, eps } => {
                    let (m, v) = self.moments[i].get_or_insert_with(|| (Tensor::zeros(g.rows, g.cols), Tensor::zeros(g.rows, g.cols)));
                    let (b1, b2) = (beta1 as f32, beta2 as f32);
                    let c1 = 1.0 - beta1.powi(self.t as i32);
                    let c2 = 1.0 - beta2.powi(self.t as i32);
                    let step = (self.lr * c2.sqrt() / c1) as f32;
                    let eps = (eps * c2.sqrt()) as f32;
                    for k in 0..p.data.len() {
                        let gv = g.data[k];
                        m.data[k] = b1 * m.data[k] + (1.0 - b1) * gv;
                        v.data[k] = b2 * v.data[k] + (1.0 - b2) * gv * gv;
                        p.data[k] = p.data[k] * decay - step * m.data[k] / (v.data[k].sqrt() + eps);
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeMap;

    fn store(v: f32) -> ParamStore<f32> {
        let mut m = BTreeMap::new();
        m.insert("a".to_string(), Tensor::filled(1, 2, v));
        m.insert("b".to_string(), Tensor::filled(1, 1, v));
        ParamStore::from_map(m)
    }

    #[test]
    fn sgd_with_decoupled_decay() {
        let mut p = store(2.0);
        let mut g = Gradients::empty(2);
        g.accumulate(ParamId(0), &Tensor::filled(1, 2, 1.0));
        Optimizer::new(OptimizerKind::Sgd, 0.1, 0.5).step(&mut p, &g);
        assert_eq!(p.get(ParamId(0)).data, vec![2.0 * 0.95 - 0.1; 2]);
        assert_eq!(p.get(ParamId(1)).data, vec![2.0], "unreached parameter must not decay");
    }

    #[test]
    fn adamw_first_step_moves_by_lr() {
        let mut p = store(1.0);
        let mut g = Gradients::empty(2);
        g.accumulate(ParamId(0), &Tensor::from_vec(1, 2, vec![3.0, -0.5]));
        Optimizer::new(OptimizerKind::adamw(), 0.01, 0.0).step(&mut p, &g);
        let d = &p.get(ParamId(0)).data;
        assert!((d[0] - 0.99).abs() < 1e-6 && (d[1] - 1.01).abs() < 1e-6, "{d:?}");
    }
}
