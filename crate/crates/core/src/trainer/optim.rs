use std::collections::BTreeMap;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::scoring::{snap_f32, Adapter, LoraPair};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Schedule {
    #[default]
    Linear,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    #[default]
    AdamW,
}

/// Linear decay from `base_lr` at step 0 to zero at `total_steps`.
pub fn linear_lr(base_lr: f64, step: u64, total_steps: u64) -> f64 {
    if total_steps == 0 {
        return base_lr;
    }
    base_lr * (1.0 - step as f64 / total_steps as f64).max(0.0)
}

/// AdamW with decoupled weight decay. Moments are keyed by parameter name.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub t: u64,
    pub m: BTreeMap<String, Array2<f64>>,
    pub v: BTreeMap<String, Array2<f64>>,
}

impl AdamW {
    pub fn new(weight_decay: f64) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            t: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    /// Starts a new step; call once before the per-parameter updates.
    pub fn tick(&mut self) {
        self.t += 1;
    }

    pub fn update(&mut self, name: &str, param: &mut Array2<f64>, grad: &Array2<f64>, lr: f64) {
        let m = self
            .m
            .entry(name.to_string())
            .or_insert_with(|| Array2::zeros(param.raw_dim()));
        let v = self
            .v
            .entry(name.to_string())
            .or_insert_with(|| Array2::zeros(param.raw_dim()));
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = 1.0 - b1.powi(self.t as i32);
        let c2 = 1.0 - b2.powi(self.t as i32);
        let decay = 1.0 - lr * self.weight_decay;
        ndarray::Zip::from(param)
            .and(grad)
            .and(m)
            .and(v)
            .for_each(|p, &g, m, v| {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                let mhat = *m / c1;
                let vhat = *v / c2;
                *p = *p * decay - lr * mhat / (vhat.sqrt() + self.eps);
            });
    }

    /// One step over every adapter factor; values are snapped back to f32.
    pub fn step_adapter(&mut self, adapter: &mut Adapter, grads: &BTreeMap<String, LoraPair>, lr: f64) {
        self.tick();
        for (name, p) in adapter.pairs.iter_mut() {
            let g = &grads[name];
            self.update(&format!("{name}.A"), &mut p.a, &g.a, lr);
            self.update(&format!("{name}.B"), &mut p.b, &g.b, lr);
            snap_f32(&mut p.a);
            snap_f32(&mut p.b);
        }
    }

    /// Flattens both moment maps, in key order, into one f64 buffer.
    pub fn state_blob(&self) -> Vec<u8> {
        let mut out = Vec::new();
        for map in [&self.m, &self.v] {
            for arr in map.values() {
                for x in arr.iter() {
                    out.extend_from_slice(&x.to_le_bytes());
                }
            }
        }
        out
    }

    pub fn shapes(&self) -> Vec<(String, (usize, usize))> {
        self.m.iter().map(|(k, a)| (k.clone(), a.dim())).collect()
    }

    pub fn restore_blob(&mut self, shapes: &[(String, (usize, usize))], blob: &[u8]) -> Option<()> {
        let total: usize = shapes.iter().map(|(_, (r, c))| r * c).sum();
        if blob.len() != total * 2 * 8 {
            return None;
        }
        let mut vals = blob
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")));
        let mut fill = |map: &mut BTreeMap<String, Array2<f64>>| {
            map.clear();
            for (name, (r, c)) in shapes {
                let data: Vec<f64> = vals.by_ref().take(r * c).collect();
                map.insert(name.clone(), Array2::from_shape_vec((*r, *c), data).expect("sized"));
            }
        };
        fill(&mut self.m);
        fill(&mut self.v);
        Some(())
    }
}
