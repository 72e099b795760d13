//! Layer handles. Each layer only records which store entries it owns; the
//! forward pass reads them from a [`Fwd`] context.

use std::cell::RefCell;

use rand::Rng;

use super::params::{kaiming_uniform, uniform, Bound, ParamId, ParamStore};
use super::tape::{BatchStats, Var};
use super::tensor::{Float, Tensor};

pub const BN_EPS: f64 = 1e-5;

/// Forward-pass context: bound parameters, train/eval mode and the batch
/// statistics collected by normalisation layers in train mode.
pub struct Fwd<'a, 't, T: Float> {
    pub p: &'a Bound<'t, T>,
    pub train: bool,
    stats: RefCell<Vec<(BatchNorm, BatchStats<T>)>>,
}

impl<'a, 't, T: Float> Fwd<'a, 't, T> {
    pub fn new(p: &'a Bound<'t, T>, train: bool) -> Self {
        Fwd { p, train, stats: RefCell::new(Vec::new()) }
    }

    pub fn var(&self, id: ParamId) -> Var<'t, T> {
        self.p.var(id)
    }

    /// Folds the collected batch statistics into the running buffers.
    pub fn commit_stats(&self, store: &mut ParamStore<T>, momentum: f64) {
        let m = T::c(momentum);
        for (bn, st) in self.stats.borrow_mut().drain(..) {
            let n = st.mean.len();
            let rm = store.get_mut(bn.running_mean).data_mut();
            for i in 0..n {
                rm[i] = (T::one() - m) * rm[i] + m * st.mean[i];
            }
            let rv = store.get_mut(bn.running_var).data_mut();
            for i in 0..n {
                rv[i] = (T::one() - m) * rv[i] + m * st.var[i];
            }
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn new<T: Float>(s: &mut ParamStore<T>, name: &str, fan_in: usize, fan_out: usize, rng: &mut impl Rng) -> Self {
        let w = s.add(format!("{name}.w"), kaiming_uniform(&[fan_out, fan_in], fan_in, rng));
        let b = s.add(format!("{name}.b"), uniform(&[fan_out], 1.0 / (fan_in as f64).sqrt(), rng));
        Linear { w, b }
    }

    /// `x` is `N x fan_in`.
    pub fn forward<'t, T: Float>(&self, f: &Fwd<'_, 't, T>, x: Var<'t, T>) -> Var<'t, T> {
        x.matmul_t(f.var(self.w)).add(f.var(self.b))
    }
}

#[derive(Clone, Copy, Debug)]
pub struct Conv2d {
    pub w: ParamId,
    pub b: ParamId,
    pub c_out: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Float>(
        s: &mut ParamStore<T>,
        name: &str,
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        pad: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let fan_in = c_in * k * k;
        let w = s.add(format!("{name}.w"), kaiming_uniform(&[c_out, c_in, k, k], fan_in, rng));
        let b = s.add(format!("{name}.b"), uniform(&[c_out], 1.0 / (fan_in as f64).sqrt(), rng));
        Conv2d { w, b, c_out, stride, pad }
    }

    pub fn forward<'t, T: Float>(&self, f: &Fwd<'_, 't, T>, x: Var<'t, T>) -> Var<'t, T> {
        let b = f.var(self.b).reshape(vec![1, self.c_out, 1, 1]);
        x.conv2d(f.var(self.w), self.stride, self.pad).add(b)
    }
}

/// Batch normalisation whose scale and shift are looked up per class. With a
/// single class it is ordinary affine batch norm.
#[derive(Clone, Copy, Debug)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub channels: usize,
    pub classes: usize,
}

impl BatchNorm {
    pub fn new<T: Float>(s: &mut ParamStore<T>, name: &str, channels: usize, classes: usize) -> Self {
        BatchNorm {
            gamma: s.add(format!("{name}.gamma"), Tensor::full(vec![classes, channels], T::one())),
            beta: s.add(format!("{name}.beta"), Tensor::zeros(vec![classes, channels])),
            running_mean: s.add_buffer(format!("{name}.running_mean"), Tensor::zeros(vec![channels])),
            running_var: s.add_buffer(format!("{name}.running_var"), Tensor::full(vec![channels], T::one())),
            channels,
            classes,
        }
    }

    /// `x` is NCHW; `labels` selects the affine row for each sample and may be
    /// empty for the single-class form.
    pub fn forward<'t, T: Float>(&self, f: &Fwd<'_, 't, T>, x: Var<'t, T>, labels: &[usize]) -> Var<'t, T> {
        let n = x.shape()[0];
        let c = self.channels;
        let xhat = if f.train {
            let (y, st) = x.batch_norm(BN_EPS);
            f.stats.borrow_mut().push((*self, st));
            y
        } else {
            let tape = x.tape();
            let rm = f.var(self.running_mean).value();
            let rv = f.var(self.running_var).value();
            let inv = rv.map(|v| T::one() / (v + T::c(BN_EPS)).sqrt());
            let mean = tape.constant(rm.reshape(vec![1, c, 1, 1]));
            let inv = tape.constant(inv.reshape(vec![1, c, 1, 1]));
            x.sub(mean).mul(inv)
        };
        let (g, b) = if self.classes == 1 {
            (f.var(self.gamma).reshape(vec![1, c, 1, 1]), f.var(self.beta).reshape(vec![1, c, 1, 1]))
        } else {
            assert_eq!(labels.len(), n, "conditional batch norm needs one label per sample");
            let tape = x.tape();
            (
                tape.gather_rows(f.var(self.gamma), labels).reshape(vec![n, c, 1, 1]),
                tape.gather_rows(f.var(self.beta), labels).reshape(vec![n, c, 1, 1]),
            )
        };
        xhat.mul(g).add(b)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct Embedding {
    pub table: ParamId,
}

impl Embedding {
    pub fn new<T: Float>(s: &mut ParamStore<T>, name: &str, rows: usize, dim: usize, rng: &mut impl Rng) -> Self {
        Embedding { table: s.add(format!("{name}.table"), uniform(&[rows, dim], 1.0 / (dim as f64).sqrt(), rng)) }
    }

    pub fn forward<'t, T: Float>(&self, f: &Fwd<'_, 't, T>, idx: &[usize]) -> Var<'t, T> {
        f.var(self.table).tape().gather_rows(f.var(self.table), idx)
    }
}

/// Mean cross-entropy of `N x K` logits against integer labels.
pub fn cross_entropy<'t, T: Float>(logits: Var<'t, T>, labels: &[usize]) -> Var<'t, T> {
    logits.log_softmax().select_rows(labels).mean_all().neg()
}
