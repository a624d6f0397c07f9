//! Adam optimizer over named parameter maps.

use ndarray::ArrayD;

use super::{Elem, Params};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy)]
pub struct AdamConfig<E> {
    pub lr: E,
    pub beta1: E,
    pub beta2: E,
    pub eps: E,
    pub weight_decay: E,
    /// `false` (default): classic Adam with L2 folded into the gradient.
    /// `true`: decoupled weight decay applied directly to the weights.
    pub decoupled_weight_decay: bool,
}

impl<E: Elem> AdamConfig<E> {
    pub fn new(lr: E, weight_decay: E) -> Self {
        AdamConfig {
            lr,
            beta1: E::from_f64_(0.9),
            beta2: E::from_f64_(0.999),
            eps: E::from_f64_(1e-8),
            weight_decay,
            decoupled_weight_decay: false,
        }
    }
}

impl<E: Elem> Default for AdamConfig<E> {
    /// Defaults used throughout training: lr 3e-4, weight decay 1e-4.
    fn default() -> Self {
        AdamConfig::new(E::from_f64_(3e-4), E::from_f64_(1e-4))
    }
}

/// Adam state: first/second moments per parameter plus the step count.
pub struct Adam<E: Elem> {
    pub cfg: AdamConfig<E>,
    pub step_count: u64,
    pub m: Params<E>,
    pub v: Params<E>,
}

impl<E: Elem> Adam<E> {
    pub fn new(cfg: AdamConfig<E>) -> Self {
        Adam {
            cfg,
            step_count: 0,
            m: Params::new(),
            v: Params::new(),
        }
    }

    /// One update step. Parameters without a gradient entry are skipped.
    pub fn step(&mut self, params: &mut Params<E>, grads: &Params<E>) -> Result<()> {
        self.step_count += 1;
        let t = self.step_count as i32;
        let c = self.cfg;
        let bc1 = E::one() - c.beta1.powi(t);
        let bc2 = E::one() - c.beta2.powi(t);
        for (name, w) in params.iter_mut() {
            let g = match grads.get(name) {
                Some(g) => g,
                None => continue,
            };
            if g.shape() != w.shape() {
                return Err(Error::ShapeMismatch {
                    op: "adam_step",
                    detail: format!("{name}: param {:?}, grad {:?}", w.shape(), g.shape()),
                });
            }
            let m = self
                .m
                .entry(name.clone())
                .or_insert_with(|| ArrayD::zeros(w.raw_dim()));
            let v = self
                .v
                .entry(name.clone())
                .or_insert_with(|| ArrayD::zeros(w.raw_dim()));
            let ws = w.as_slice_mut().expect("contiguous param");
            let gs = g.as_slice().expect("contiguous grad");
            let ms = m.as_slice_mut().unwrap();
            let vs = v.as_slice_mut().unwrap();
            for i in 0..ws.len() {
                let mut gi = gs[i];
                if !c.decoupled_weight_decay {
                    gi += c.weight_decay * ws[i];
                }
                ms[i] = c.beta1 * ms[i] + (E::one() - c.beta1) * gi;
                vs[i] = c.beta2 * vs[i] + (E::one() - c.beta2) * gi * gi;
                let mhat = ms[i] / bc1;
                let vhat = vs[i] / bc2;
                let mut upd = c.lr * mhat / (vhat.sqrt() + c.eps);
                if c.decoupled_weight_decay {
                    upd += c.lr * c.weight_decay * ws[i];
                }
                ws[i] = ws[i] - upd;
            }
        }
        Ok(())
    }
}
