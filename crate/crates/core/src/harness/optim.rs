//! Adam with bias correction and global-norm gradient clipping.

use crate::autodiff::{Grads, ParamStore};
use crate::tensor::Mat;

#[derive(Clone, Debug)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    m: Vec<Option<Mat>>,
    v: Vec<Option<Mat>>,
}

impl Default for Adam {
    fn default() -> Self {
        Adam::new(0.9, 0.999, 1e-8)
    }
}

impl Adam {
    pub fn new(beta1: f64, beta2: f64, eps: f64) -> Self {
        Adam {
            beta1,
            beta2,
            eps,
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    /// Updates taken so far.
    pub fn steps(&self) -> u64 {
        self.t
    }

    /// Apply one update to every trainable parameter that has a gradient.
    pub fn update(&mut self, params: &mut ParamStore, grads: &Grads, lr: f64) {
        self.t += 1;
        let n = params.len();
        self.m.resize(n, None);
        self.v.resize(n, None);
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);
        for (id, g) in grads.iter() {
            if !params.entry(id).trainable {
                continue;
            }
            let m = self.m[id.0].get_or_insert_with(|| Mat::zeros(g.rows(), g.cols()));
            let v = self.v[id.0].get_or_insert_with(|| Mat::zeros(g.rows(), g.cols()));
            let p = params.get_mut(id);
            let (pd, md, vd) = (p.data_mut(), m.data_mut(), v.data_mut());
            for (((w, mi), vi), gi) in pd.iter_mut().zip(md.iter_mut()).zip(vd.iter_mut()).zip(g.data()) {
                *mi = b1 * *mi + (1.0 - b1) * gi;
                *vi = b2 * *vi + (1.0 - b2) * gi * gi;
                *w -= lr * (*mi / c1) / ((*vi / c2).sqrt() + eps);
            }
        }
    }
}

/// Norm of the gradients of trainable parameters.
pub fn trainable_grad_norm(params: &ParamStore, grads: &Grads) -> f64 {
    grads
        .iter()
        .filter(|(id, _)| params.entry(*id).trainable)
        .map(|(_, g)| g.sq_norm())
        .sum::<f64>()
        .sqrt()
}

/// Rescale gradients so their trainable global norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm(params: &ParamStore, grads: &mut Grads, max_norm: f64) -> f64 {
    let norm = trainable_grad_norm(params, grads);
    if norm > max_norm {
        grads.scale(max_norm / norm);
    }
    norm
}
