//! SGD with classical momentum.

use crate::autodiff::ParamStore;
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct Sgd {
    pub lr: f64,
    pub momentum: f64,
    velocity: Vec<Option<Tensor>>,
}

impl Sgd {
    pub fn new(lr: f64, momentum: f64) -> Self {
        Sgd {
            lr,
            momentum,
            velocity: Vec::new(),
        }
    }

    /// `v <- momentum * v + g; w <- w - lr * v` for every non-frozen parameter
    /// that has a gradient.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[Option<Tensor>]) {
        if self.velocity.len() < store.len() {
            self.velocity.resize(store.len(), None);
        }
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            if store.get(id).frozen {
                continue;
            }
            let Some(g) = grads.get(id.0).and_then(|g| g.as_ref()) else {
                continue;
            };
            let v = self.velocity[id.0].get_or_insert_with(|| Tensor::zeros(g.shape()));
            for (vv, gv) in v.data_mut().iter_mut().zip(g.data()) {
                *vv = self.momentum * *vv + gv;
            }
            if self.lr == 0.0 {
                continue;
            }
            let lr = self.lr;
            let w = store.value_mut(id);
            for (wv, vv) in w.data_mut().iter_mut().zip(v.data()) {
                *wv -= lr * vv;
            }
        }
    }
}

/// Adds `src` into `dst`, slot by slot.
pub fn accumulate_grads(dst: &mut Vec<Option<Tensor>>, src: Vec<Option<Tensor>>) {
    if dst.len() < src.len() {
        dst.resize(src.len(), None);
    }
    for (d, s) in dst.iter_mut().zip(src) {
        if let Some(s) = s {
            match d {
                Some(d) => d.add_assign(&s),
                None => *d = Some(s),
            }
        }
    }
}

pub fn scale_grads(grads: &mut [Option<Tensor>], s: f64) {
    for g in grads.iter_mut().flatten() {
        for v in g.data_mut() {
            *v *= s;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn momentum_update() {
        let mut store = ParamStore::new();
        let id = store.add("w", Tensor::from_vec(vec![1.0]));
        let mut opt = Sgd::new(0.1, 0.9);
        let g = vec![Some(Tensor::from_vec(vec![2.0]))];
        opt.step(&mut store, &g);
        assert!((store.value(id).item() - 0.8).abs() < 1e-15);
        opt.step(&mut store, &g);
        // v = 0.9 * 2 + 2 = 3.8
        assert!((store.value(id).item() - 0.42).abs() < 1e-12);
    }

    #[test]
    fn zero_learning_rate_leaves_parameters() {
        let mut store = ParamStore::new();
        let id = store.add("w", Tensor::from_vec(vec![1.5, -2.0]));
        let mut opt = Sgd::new(0.0, 0.9);
        opt.step(&mut store, &[Some(Tensor::from_vec(vec![3.0, 4.0]))]);
        assert_eq!(store.value(id).data(), &[1.5, -2.0]);
    }
}
