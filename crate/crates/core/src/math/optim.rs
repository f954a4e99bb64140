use super::matrix::DenseMatrix;
use super::params::{Gradients, ParamStore};
use crate::error::{GqsError, Result};

/// Linear warmup over `warmup` steps, then cosine decay to `floor · base`.
pub fn cosine_lr(base: f64, step: usize, total: usize, warmup: usize, floor: f64) -> f64 {
    if step < warmup {
        return base * (step + 1) as f64 / warmup as f64;
    }
    let span = total.saturating_sub(warmup).max(1);
    let progress = ((step - warmup) as f64 / span as f64).min(1.0);
    base * (floor + (1.0 - floor) * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos()))
}

/// Adam with optional global-norm gradient clipping.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub clip_norm: Option<f64>,
    /// Decoupled weight decay, applied per step as `p -= lr * wd * p`.
    pub weight_decay: f64,
    step: u64,
    m: Vec<DenseMatrix>,
    v: Vec<DenseMatrix>,
}

impl Adam {
    pub fn new(store: &ParamStore, lr: f64) -> Self {
        let zeros: Vec<DenseMatrix> = store
            .ids()
            .map(|id| {
                let (r, c) = store.get(id).shape();
                DenseMatrix::zeros(r, c)
            })
            .collect();
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm: Some(1.0),
            weight_decay: 0.0,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &Gradients) -> Result<()> {
        if !grads.is_finite() {
            return Err(GqsError::Diverged("non-finite gradient".into()));
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
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for id in store.ids() {
            let Some(g) = grads.get(id) else { continue };
            let (m, v) = (&mut self.m[id.index()], &mut self.v[id.index()]);
            let p = store.get_mut(id);
            for (((pv, gv), mv), vv) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                let gs = gv * scale;
                *mv = self.beta1 * *mv + (1.0 - self.beta1) * gs;
                *vv = self.beta2 * *vv + (1.0 - self.beta2) * gs * gs;
                let mhat = *mv / bc1;
                let vhat = *vv / bc2;
                *pv -= self.lr * (mhat / (vhat.sqrt() + self.eps) + self.weight_decay * *pv);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::math::Graph;

    #[test]
    fn minimises_a_quadratic() {
        let mut store = ParamStore::new();
        let w = store.add("w", DenseMatrix::row_vector(vec![3.0, -2.0]));
        let mut opt = Adam::new(&store, 0.1);
        for _ in 0..500 {
            let grads = {
                let mut g = Graph::new(&store);
                let wn = g.param(w);
                let sq = g.mul(wn, wn).unwrap();
                let loss = g.sum(sq).unwrap();
                g.backward(loss).unwrap()
            };
            opt.step(&mut store, &grads).unwrap();
        }
        assert!(store.get(w).data().iter().all(|v| v.abs() < 1e-2));
    }

    #[test]
    fn zero_learning_rate_is_a_no_op() {
        let mut store = ParamStore::new();
        let w = store.add("w", DenseMatrix::row_vector(vec![0.5]));
        let before = store.clone();
        let mut opt = Adam::new(&store, 0.0);
        let grads = {
            let mut g = Graph::new(&store);
            let wn = g.param(w);
            let loss = g.sum(wn).unwrap();
            g.backward(loss).unwrap()
        };
        opt.step(&mut store, &grads).unwrap();
        assert_eq!(store, before);
    }
}
