//! SGD with momentum and Adam over a [`ParamStore`].

use super::params::ParamStore;
use super::tensor::{Float, Tensor};

#[derive(Clone, Debug)]
pub struct Sgd<T> {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: Vec<Option<Vec<T>>>,
}

impl<T: Float> Sgd<T> {
    pub fn new(lr: f64, momentum: f64, weight_decay: f64) -> Self {
        Sgd { lr, momentum, weight_decay, velocity: Vec::new() }
    }

    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &[Option<Tensor<T>>]) {
        self.velocity.resize(store.len(), None);
        let (lr, mu, wd) = (T::c(self.lr), T::c(self.momentum), T::c(self.weight_decay));
        for (i, (id, g)) in store.ids().collect::<Vec<_>>().into_iter().zip(grads).enumerate() {
            let Some(g) = g else { continue };
            let p = store.get_mut(id).data_mut();
            let v = self.velocity[i].get_or_insert_with(|| vec![T::zero(); p.len()]);
            for ((p, v), &g) in p.iter_mut().zip(v.iter_mut()).zip(g.data()) {
                let g = g + wd * *p;
                *v = mu * *v + g;
                *p -= lr * *v;
            }
        }
    }
}

#[derive(Clone, Debug)]
pub struct Adam<T> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: i32,
    moments: Vec<Option<(Vec<T>, Vec<T>)>>,
}

impl<T: Float> Adam<T> {
    pub fn new(lr: f64, beta1: f64, beta2: f64) -> Self {
        Adam { lr, beta1, beta2, eps: 1e-8, t: 0, moments: Vec::new() }
    }

    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &[Option<Tensor<T>>]) {
        self.moments.resize(store.len(), None);
        self.t += 1;
        let (b1, b2) = (T::c(self.beta1), T::c(self.beta2));
        let c1 = T::one() - b1.powi(self.t);
        let c2 = T::one() - b2.powi(self.t);
        let (lr, eps) = (T::c(self.lr), T::c(self.eps));
        for (k, (id, g)) in store.ids().collect::<Vec<_>>().into_iter().zip(grads).enumerate() {
            let Some(g) = g else { continue };
            let p = store.get_mut(id).data_mut();
            let (m, v) = self.moments[k]
                .get_or_insert_with(|| (vec![T::zero(); p.len()], vec![T::zero(); p.len()]));
            for i in 0..p.len() {
                let gi = g.data()[i];
                m[i] = b1 * m[i] + (T::one() - b1) * gi;
                v[i] = b2 * v[i] + (T::one() - b2) * gi * gi;
                p[i] -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + eps);
            }
        }
    }
}
