use std::collections::HashMap;

use crate::network::ParamSet;
use crate::tensor::{Real, Tensor};

/// SGD with heavy-ball momentum and optional L2 weight decay:
/// `v ← μ·v + g + λ·θ`, `θ ← θ − η·v`.
#[derive(Clone, Debug)]
pub struct Sgd<T: Real = f32> {
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: HashMap<String, Tensor<T>>,
}

impl<T: Real> Sgd<T> {
    pub fn new(momentum: f64, weight_decay: f64) -> Self {
        Self {
            momentum,
            weight_decay,
            velocity: HashMap::new(),
        }
    }

    /// Updates every array of `params` with the same-named gradient.
    pub fn step(&mut self, params: &mut ParamSet<T>, grads: &ParamSet<T>, lr: f64) {
        let (mu, wd, lr) = (T::lit(self.momentum), T::lit(self.weight_decay), T::lit(lr));
        for (name, p) in params.iter_mut() {
            let g = grads.get(name).unwrap_or_else(|| panic!("no gradient for `{name}`"));
            let v = self.velocity.entry(name.to_string()).or_insert_with(|| Tensor::zeros(p.shape()));
            for ((pv, vv), &gv) in p.data_mut().iter_mut().zip(v.data_mut()).zip(g.data()) {
                *vv = mu * *vv + gv + wd * *pv;
                *pv -= lr * *vv;
            }
        }
    }
}

/// Scales all gradients so their joint L2 norm is at most `max_norm`;
/// returns the norm before scaling.
pub fn clip_grad_norm<T: Real>(grads: &mut [ParamSet<T>], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flat_map(|g| g.iter().map(|(_, t)| t.sq_norm().as_f64()))
        .sum::<f64>()
        .sqrt();
    if max_norm > 0.0 && norm > max_norm {
        let s = T::lit(max_norm / norm);
        for g in grads.iter_mut() {
            for (_, t) in g.iter_mut() {
                t.scale(s);
            }
        }
    }
    norm
}

/// Cosine decay from `lr` at step 0 to 0 at `total`.
pub fn cosine_lr(lr: f64, step: usize, total: usize) -> f64 {
    if total == 0 {
        return lr;
    }
    0.5 * lr * (1.0 + (std::f64::consts::PI * step as f64 / total as f64).cos())
}
