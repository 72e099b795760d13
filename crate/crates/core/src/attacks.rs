//! White-box evasion attacks: FGSM, FGM, BIM, Carlini-Wagner L2 and
//! DeepFool. Every attack is batched internally; per-image entry points
//! wrap a batch of one.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::classifier::{argmax, LossSpec, TargetClassifier};
use crate::data::{self, Image, LabeledDataset};
use crate::error::{Error, Result};
use crate::nn::{Fwd, Tape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Norm {
    L2,
    Linf,
}

impl std::str::FromStr for Norm {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "l2" => Ok(Norm::L2),
            "linf" => Ok(Norm::Linf),
            _ => Err(Error::Config(format!("unknown norm {s} (expected l2 or linf)"))),
        }
    }
}

impl std::fmt::Display for Norm {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Norm::L2 => "l2",
            Norm::Linf => "linf",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Fgsm,
    Fgm,
    Bim,
    Cw,
    Deepfool,
}

impl std::str::FromStr for Method {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace(['-', '_'], "").as_str() {
            "fgsm" => Ok(Method::Fgsm),
            "fgm" => Ok(Method::Fgm),
            "bim" => Ok(Method::Bim),
            "cw" | "cwl2" => Ok(Method::Cw),
            "deepfool" => Ok(Method::Deepfool),
            _ => Err(Error::Config(format!("unknown attack {s}"))),
        }
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Method::Fgsm => "fgsm",
            Method::Fgm => "fgm",
            Method::Bim => "bim",
            Method::Cw => "cw",
            Method::Deepfool => "deepfool",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PerturbationBudget {
    pub norm: Norm,
    pub eps: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackSpec {
    pub method: Method,
    pub norm: Norm,
    /// Required for FGSM/FGM/BIM; CW and DeepFool are unbudgeted.
    pub eps: Option<f64>,
    pub steps: usize,
    /// BIM step; defaults to `1.5 * eps / steps`.
    pub step_size: Option<f64>,
    pub confidence: f64,
    pub binary_search_steps: usize,
    pub iterations: usize,
    pub initial_c: f64,
    pub learning_rate: f64,
    pub max_iterations: usize,
    pub overshoot: f64,
    pub target: Option<usize>,
}

impl AttackSpec {
    pub fn new(method: Method, norm: Norm, eps: Option<f64>) -> Self {
        AttackSpec {
            method,
            norm,
            eps,
            steps: 10,
            step_size: None,
            confidence: 0.0,
            binary_search_steps: 9,
            iterations: 1000,
            initial_c: 1e-2,
            learning_rate: 1e-2,
            max_iterations: 50,
            overshoot: 0.02,
            target: None,
        }
    }

    pub fn fgsm(eps: f64) -> Self {
        Self::new(Method::Fgsm, Norm::Linf, Some(eps))
    }

    pub fn fgm(eps: f64) -> Self {
        Self::new(Method::Fgm, Norm::L2, Some(eps))
    }

    pub fn bim(norm: Norm, eps: f64, steps: usize) -> Self {
        AttackSpec { steps, ..Self::new(Method::Bim, norm, Some(eps)) }
    }

    pub fn cw(confidence: f64, binary_search_steps: usize, iterations: usize) -> Self {
        AttackSpec { confidence, binary_search_steps, iterations, ..Self::new(Method::Cw, Norm::L2, None) }
    }

    pub fn deepfool(norm: Norm, max_iterations: usize, overshoot: f64) -> Self {
        AttackSpec { max_iterations, overshoot, ..Self::new(Method::Deepfool, norm, None) }
    }

    pub fn budget(&self) -> Option<PerturbationBudget> {
        self.eps.map(|eps| PerturbationBudget { norm: self.norm, eps })
    }

    pub fn validate(&self) -> Result<()> {
        let ok = matches!(
            (self.method, self.norm),
            (Method::Fgsm, Norm::Linf)
                | (Method::Fgm, Norm::L2)
                | (Method::Bim, _)
                | (Method::Cw, Norm::L2)
                | (Method::Deepfool, _)
        );
        if !ok {
            return Err(Error::Precondition(format!("{} does not support the {} norm", self.method, self.norm)));
        }
        match (self.method, self.eps) {
            (Method::Fgsm | Method::Fgm | Method::Bim, None) => {
                Err(Error::Precondition(format!("{} needs a perturbation budget", self.method)))
            }
            (Method::Cw | Method::Deepfool, Some(_)) => {
                Err(Error::Precondition(format!("{} is unbudgeted; bin by achieved norm instead", self.method)))
            }
            (_, Some(e)) if !(e >= 0.0 && e.is_finite()) => Err(Error::Precondition(format!("eps {e} must be >= 0"))),
            _ if self.method == Method::Bim && self.steps == 0 => Err(Error::Precondition("BIM needs steps >= 1".into())),
            _ if self.method == Method::Deepfool && self.max_iterations == 0 => {
                Err(Error::Precondition("DeepFool needs max_iterations >= 1".into()))
            }
            _ if self.confidence < 0.0 => Err(Error::Precondition("CW confidence must be >= 0".into())),
            _ => Ok(()),
        }
    }
}

/// Norms of `perturbed - original` over the flattened image. `l2_rms` is
/// `l2 / sqrt(D)`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AchievedNorms {
    pub l2: f64,
    pub l2_rms: f64,
    pub linf: f64,
}

impl AchievedNorms {
    pub fn between(a: &[f32], b: &[f32]) -> Self {
        let mut sq = 0.0f64;
        let mut mx = 0.0f64;
        for (x, y) in a.iter().zip(b) {
            let d = (*y as f64 - *x as f64).abs();
            sq += d * d;
            mx = mx.max(d);
        }
        let l2 = sq.sqrt();
        AchievedNorms { l2, l2_rms: l2 / (a.len() as f64).sqrt(), linf: mx }
    }

    pub fn get(&self, norm: Norm) -> f64 {
        match norm {
            Norm::L2 => self.l2,
            Norm::Linf => self.linf,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdversarialExample {
    pub original: Image,
    pub perturbed: Image,
    pub true_label: usize,
    pub predicted_label: usize,
    pub success: bool,
    pub norms: AchievedNorms,
}

fn sign(v: f32) -> f32 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn l2(v: &[f32]) -> f64 {
    v.iter().map(|&g| (g as f64) * (g as f64)).sum::<f64>().sqrt()
}

/// A batch being attacked: flat planar pixels of `n` images.
struct Batch<'a> {
    clf: &'a TargetClassifier,
    shape: [usize; 3],
    x: Vec<f32>,
    y: Vec<usize>,
}

impl Batch<'_> {
    fn n(&self) -> usize {
        self.y.len()
    }

    fn d(&self) -> usize {
        self.shape.iter().product()
    }

    fn tensor(&self, v: &[f32]) -> Tensor<f32> {
        let [c, h, w] = self.shape;
        Tensor::new(vec![v.len() / self.d(), c, h, w], v.to_vec())
    }

    /// Gradient of the true-label cross-entropy at `v`.
    fn ce_grad(&self, v: &[f32]) -> Result<Vec<f32>> {
        let specs: Vec<LossSpec> = self.y.iter().map(|&y| LossSpec::TrueLabel(y)).collect();
        Ok(self.clf.input_gradient_batch(&self.tensor(v), &specs)?.0.into_vec())
    }

    fn finish(&self, adv: Vec<f32>) -> Result<Vec<AdversarialExample>> {
        let pred = self.clf.predict_batch(&self.tensor(&adv))?;
        let d = self.d();
        Ok((0..self.n())
            .map(|i| {
                let orig = &self.x[i * d..(i + 1) * d];
                let pert = &adv[i * d..(i + 1) * d];
                AdversarialExample {
                    original: Image::from_planar_unchecked(self.shape, orig.to_vec()),
                    perturbed: Image::from_planar_unchecked(self.shape, pert.to_vec()),
                    true_label: self.y[i],
                    predicted_label: pred[i],
                    success: pred[i] != self.y[i],
                    norms: AchievedNorms::between(orig, pert),
                }
            })
            .collect())
    }
}

fn fgsm_step(x: &[f32], g: &[f32], eps: f32) -> Vec<f32> {
    x.iter().zip(g).map(|(&v, &gv)| (v + eps * sign(gv)).clamp(0.0, 1.0)).collect()
}

fn fgm_step(b: &Batch, x: &[f32], g: &[f32], eps: f64) -> Vec<f32> {
    let d = b.d();
    let mut out = x.to_vec();
    for i in 0..b.n() {
        let gi = &g[i * d..(i + 1) * d];
        let norm = l2(gi);
        if norm == 0.0 {
            continue;
        }
        let k = (eps / norm) as f32;
        for (o, &gv) in out[i * d..(i + 1) * d].iter_mut().zip(gi) {
            *o = (*o + k * gv).clamp(0.0, 1.0);
        }
    }
    out
}

fn run_fgsm(b: &Batch, eps: f64) -> Result<Vec<f32>> {
    let g = b.ce_grad(&b.x)?;
    Ok(fgsm_step(&b.x, &g, eps as f32))
}

fn run_fgm(b: &Batch, eps: f64) -> Result<Vec<f32>> {
    let g = b.ce_grad(&b.x)?;
    Ok(fgm_step(b, &b.x, &g, eps))
}

fn run_bim(b: &Batch, norm: Norm, eps: f64, steps: usize, alpha: f64) -> Result<Vec<f32>> {
    let d = b.d();
    let mut v = b.x.clone();
    let (e, a) = (eps as f32, alpha as f32);
    for _ in 0..steps {
        let g = b.ce_grad(&v)?;
        for i in 0..b.n() {
            let r = i * d..(i + 1) * d;
            let (xi, vi, gi) = (&b.x[r.clone()], &mut v[r.clone()], &g[r]);
            match norm {
                Norm::Linf => {
                    for ((o, &x0), &gv) in vi.iter_mut().zip(xi).zip(gi) {
                        let s = x0 - e;
                        let t = x0 + e;
                        *o = (*o + a * sign(gv)).clamp(s, t).clamp(0.0, 1.0);
                    }
                }
                Norm::L2 => {
                    let gn = l2(gi);
                    if gn > 0.0 {
                        let k = (alpha / gn) as f32;
                        for (o, &gv) in vi.iter_mut().zip(gi) {
                            *o += k * gv;
                        }
                    }
                    let delta: Vec<f32> = vi.iter().zip(xi).map(|(o, x0)| o - x0).collect();
                    let dn = l2(&delta);
                    let scale = if dn > eps { (eps / dn) as f32 } else { 1.0 };
                    for ((o, &x0), &dl) in vi.iter_mut().zip(xi).zip(&delta) {
                        *o = (x0 + dl * scale).clamp(0.0, 1.0);
                    }
                }
            }
        }
    }
    Ok(v)
}

/// Logit margin `Z_y - max_{k != y} Z_k` per row.
fn margins(z: &[f32], y: &[usize], k: usize) -> Vec<f32> {
    y.iter()
        .enumerate()
        .map(|(i, &yi)| {
            let row = &z[i * k..(i + 1) * k];
            let other = row.iter().enumerate().filter(|(j, _)| *j != yi).map(|(_, v)| *v).fold(f32::NEG_INFINITY, f32::max);
            row[yi] - other
        })
        .collect()
}

fn run_cw(b: &Batch, spec: &AttackSpec) -> Result<Vec<f32>> {
    let (n, d, k) = (b.n(), b.d(), b.clf.classes());
    let [c, h, w] = b.shape;
    let kappa = spec.confidence as f32;
    let z0 = b.clf.logits_batch(&b.tensor(&b.x))?.into_vec();
    let m0 = margins(&z0, &b.y, k);

    let to_w = |v: f32| ((2.0 * v - 1.0) * (1.0 - 1e-6)).atanh();
    let mut best = b.x.clone();
    let mut best_l2 = vec![f64::INFINITY; n];
    let mut best_fail_margin = vec![f32::INFINITY; n];
    let mut lower = vec![0.0f64; n];
    let mut upper = vec![1e10f64; n];
    let mut cst = vec![spec.initial_c; n];
    // already misclassified inputs are their own minimum-norm answer
    let done: Vec<bool> = m0.iter().map(|&m| m < 0.0 && kappa == 0.0).collect();
    for i in 0..n {
        if done[i] {
            best_l2[i] = 0.0;
        }
    }
    let mut mask = vec![0.0f32; n * k];
    for (i, &yi) in b.y.iter().enumerate() {
        mask[i * k + yi] = -1e4;
    }
    let onehot: Vec<f32> = mask.iter().map(|&m| if m != 0.0 { 1.0 } else { 0.0 }).collect();

    for _round in 0..spec.binary_search_steps {
        let mut wv: Vec<f32> = b.x.iter().map(|&v| to_w(v)).collect();
        let (mut m1, mut m2) = (vec![0.0f32; n * d], vec![0.0f32; n * d]);
        let mut succeeded = vec![false; n];
        let mut prev_loss = f64::INFINITY;
        let check_every = (spec.iterations / 10).max(1);
        for it in 0..spec.iterations {
            let tape = Tape::new();
            let bound = b.clf.store().bind_frozen(&tape);
            let wvar = tape.leaf(Tensor::new(vec![n, c, h, w], wv.clone()));
            let xadv = wvar.tanh().add_scalar(1.0).mul_scalar(0.5);
            let x0 = tape.constant(b.tensor(&b.x));
            let dist = xadv.sub(x0).sqr().sum_keep(&[1, 2, 3]).reshape(vec![n]);
            let z = b.clf.forward(&Fwd::new(&bound, false), xadv);
            let zy = z.mul(tape.constant(Tensor::new(vec![n, k], onehot.clone()))).sum_keep(&[1]).reshape(vec![n]);
            let zo = z.add(tape.constant(Tensor::new(vec![n, k], mask.clone()))).max_last();
            let f = zy.sub(zo).add_scalar(kappa).relu();
            let cvar = tape.constant(Tensor::new(vec![n], cst.iter().map(|&v| v as f32).collect()));
            let loss = dist.add(f.mul(cvar)).sum_all();
            let lv = loss.value().item() as f64;
            if !lv.is_finite() {
                return Err(Error::NonFinite("CW objective".into()));
            }
            let xa = xadv.value();
            let zv = z.value();
            let mg = margins(zv.data(), &b.y, k);
            let dv = dist.value();
            for i in 0..n {
                if done[i] {
                    continue;
                }
                let pred = argmax(&zv.data()[i * k..(i + 1) * k]);
                if pred != b.y[i] && mg[i] <= -kappa {
                    succeeded[i] = true;
                    let l = (dv.data()[i] as f64).sqrt();
                    if l < best_l2[i] {
                        best_l2[i] = l;
                        best[i * d..(i + 1) * d].copy_from_slice(&xa.data()[i * d..(i + 1) * d]);
                    }
                } else if best_l2[i].is_infinite() && mg[i] < best_fail_margin[i] {
                    best_fail_margin[i] = mg[i];
                    best[i * d..(i + 1) * d].copy_from_slice(&xa.data()[i * d..(i + 1) * d]);
                }
            }
            if it % check_every == 0 && it > 0 {
                if lv > prev_loss * 0.9999 {
                    break;
                }
                prev_loss = lv;
            }
            let g = tape.backward(loss).take(wvar).expect("w receives a gradient").into_vec();
            let t = (it + 1) as i32;
            let (b1, b2, lr) = (0.9f32, 0.999f32, spec.learning_rate as f32);
            let (c1, c2) = (1.0 - b1.powi(t), 1.0 - b2.powi(t));
            for j in 0..n * d {
                if done[j / d] {
                    continue;
                }
                m1[j] = b1 * m1[j] + (1.0 - b1) * g[j];
                m2[j] = b2 * m2[j] + (1.0 - b2) * g[j] * g[j];
                wv[j] -= lr * (m1[j] / c1) / ((m2[j] / c2).sqrt() + 1e-8);
            }
        }
        for i in 0..n {
            if succeeded[i] {
                upper[i] = upper[i].min(cst[i]);
                if upper[i] < 1e9 {
                    cst[i] = (lower[i] + upper[i]) / 2.0;
                }
            } else {
                lower[i] = lower[i].max(cst[i]);
                cst[i] = if upper[i] < 1e9 { (lower[i] + upper[i]) / 2.0 } else { cst[i] * 10.0 };
            }
        }
    }
    Ok(best)
}

fn run_deepfool(b: &Batch, norm: Norm, max_iter: usize, overshoot: f64) -> Result<Vec<f32>> {
    let (n, d, k) = (b.n(), b.d(), b.clf.classes());
    let [c, h, w] = b.shape;
    let mut r_tot = vec![0.0f64; n * d];
    let mut cur = b.x.clone();
    let mut active: Vec<usize> = (0..n).collect();
    let scale = 1.0 + overshoot;
    for _ in 0..max_iter {
        let x_act: Vec<f32> = active.iter().flat_map(|&i| cur[i * d..(i + 1) * d].iter().copied()).collect();
        let na = active.len();
        let tape = Tape::new();
        let bound = b.clf.store().bind_frozen(&tape);
        let xv = tape.leaf(Tensor::new(vec![na, c, h, w], x_act));
        let z = b.clf.forward(&Fwd::new(&bound, false), xv);
        let zv = z.value();
        let mut still = Vec::new();
        let mut need = Vec::new();
        for (a, &i) in active.iter().enumerate() {
            if argmax(&zv.data()[a * k..(a + 1) * k]) == b.y[i] {
                need.push(a);
                still.push(i);
            }
        }
        if still.is_empty() {
            break;
        }
        let grads: Vec<Vec<f32>> = (0..k)
            .map(|j| {
                let g = tape.backward(z.narrow(1, j, 1).sum_all());
                g.get(xv).expect("input gradient").data().to_vec()
            })
            .collect();
        for (&a, &i) in need.iter().zip(&still) {
            let y = b.y[i];
            let gy = &grads[y][a * d..(a + 1) * d];
            let zy = zv.data()[a * k + y] as f64;
            let mut best: Option<(f64, usize, f64)> = None;
            for j in (0..k).filter(|&j| j != y) {
                let gj = &grads[j][a * d..(a + 1) * d];
                let fk = zv.data()[a * k + j] as f64 - zy;
                let wn = match norm {
                    Norm::L2 => gj.iter().zip(gy).map(|(p, q)| ((p - q) as f64).powi(2)).sum::<f64>().sqrt(),
                    Norm::Linf => gj.iter().zip(gy).map(|(p, q)| ((p - q) as f64).abs()).sum::<f64>(),
                };
                if wn == 0.0 {
                    continue;
                }
                let dist = fk.abs() / wn;
                if best.is_none_or(|(bd, _, _)| dist < bd) {
                    best = Some((dist, j, wn));
                }
            }
            let Some((dist, j, wn)) = best else { continue };
            let gj = &grads[j][a * d..(a + 1) * d];
            let r = &mut r_tot[i * d..(i + 1) * d];
            for t in 0..d {
                let wt = (gj[t] - gy[t]) as f64;
                r[t] += match norm {
                    Norm::L2 => (dist + 1e-4) * wt / wn,
                    Norm::Linf => (dist + 1e-4) * wt.signum() * if wt == 0.0 { 0.0 } else { 1.0 },
                };
            }
            for t in 0..d {
                cur[i * d + t] = (b.x[i * d + t] as f64 + scale * r[t]).clamp(0.0, 1.0) as f32;
            }
        }
        active = still;
    }
    Ok(cur)
}

/// Runs `spec` against a batch of images (all of one shape).
pub fn attack_batch(
    clf: &TargetClassifier,
    images: &[Image],
    labels: &[usize],
    spec: &AttackSpec,
) -> Result<Vec<AdversarialExample>> {
    spec.validate()?;
    if images.is_empty() {
        return Ok(Vec::new());
    }
    if images.len() != labels.len() {
        return Err(Error::Precondition(format!("{} images but {} labels", images.len(), labels.len())));
    }
    let shape = images[0].shape();
    if shape != clf.input_shape() {
        return Err(Error::Shape { expected: clf.input_shape().to_vec(), got: shape.to_vec() });
    }
    let mut x = Vec::with_capacity(images.len() * images[0].dim());
    for im in images {
        if im.shape() != shape {
            return Err(Error::Shape { expected: shape.to_vec(), got: im.shape().to_vec() });
        }
        x.extend_from_slice(im.pixels());
    }
    for &y in labels {
        if y >= clf.classes() {
            return Err(Error::InvalidClass { label: y, classes: clf.classes() });
        }
    }
    let b = Batch { clf, shape, x, y: labels.to_vec() };
    let adv = match spec.method {
        Method::Fgsm => run_fgsm(&b, spec.eps.unwrap_or(0.0))?,
        Method::Fgm => run_fgm(&b, spec.eps.unwrap_or(0.0))?,
        Method::Bim => {
            let eps = spec.eps.unwrap_or(0.0);
            let alpha = spec.step_size.unwrap_or(1.5 * eps / spec.steps as f64);
            run_bim(&b, spec.norm, eps, spec.steps, alpha)?
        }
        Method::Cw => run_cw(&b, spec)?,
        Method::Deepfool => run_deepfool(&b, spec.norm, spec.max_iterations, spec.overshoot)?,
    };
    b.finish(adv)
}

fn single(clf: &TargetClassifier, x: &Image, y: usize, spec: &AttackSpec) -> Result<AdversarialExample> {
    Ok(attack_batch(clf, std::slice::from_ref(x), &[y], spec)?.remove(0))
}

pub fn fgsm(clf: &TargetClassifier, x: &Image, y_true: usize, eps: f64) -> Result<AdversarialExample> {
    single(clf, x, y_true, &AttackSpec::fgsm(eps))
}

pub fn fgm(clf: &TargetClassifier, x: &Image, y_true: usize, eps: f64) -> Result<AdversarialExample> {
    single(clf, x, y_true, &AttackSpec::fgm(eps))
}

pub fn bim(
    clf: &TargetClassifier,
    x: &Image,
    y_true: usize,
    budget: PerturbationBudget,
    steps: usize,
) -> Result<AdversarialExample> {
    single(clf, x, y_true, &AttackSpec::bim(budget.norm, budget.eps, steps))
}

pub fn cw_l2(
    clf: &TargetClassifier,
    x: &Image,
    y_true: usize,
    confidence: f64,
    binary_search_steps: usize,
    iterations: usize,
) -> Result<AdversarialExample> {
    single(clf, x, y_true, &AttackSpec::cw(confidence, binary_search_steps, iterations))
}

pub fn deepfool(
    clf: &TargetClassifier,
    x: &Image,
    y_true: usize,
    norm: Norm,
    max_iterations: usize,
    overshoot: f64,
) -> Result<AdversarialExample> {
    single(clf, x, y_true, &AttackSpec::deepfool(norm, max_iterations, overshoot))
}

/// Samples attacked per work item.
pub const ATTACK_CHUNK: usize = 100;

/// Attacks `n` test images chosen with `seed`. Work is split into
/// fixed-size chunks run on the rayon pool; output order follows the
/// selection order.
pub fn generate_attack_set(
    clf: &TargetClassifier,
    ds: &LabeledDataset,
    spec: &AttackSpec,
    n: usize,
    seed: u64,
) -> Result<Vec<AdversarialExample>> {
    spec.validate()?;
    if n == 0 {
        return Ok(Vec::new());
    }
    let idx = data::sample_indices(ds.len(), n, seed)?;
    attack_indices(clf, ds, spec, &idx)
}

pub fn attack_indices(
    clf: &TargetClassifier,
    ds: &LabeledDataset,
    spec: &AttackSpec,
    idx: &[usize],
) -> Result<Vec<AdversarialExample>> {
    let chunks: Vec<&[usize]> = idx.chunks(ATTACK_CHUNK).collect();
    let parts = chunks
        .par_iter()
        .map(|c| {
            let images: Vec<Image> = c.iter().map(|&i| ds.image(i)).collect();
            attack_batch(clf, &images, &ds.batch_labels(c), spec)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(parts.into_iter().flatten().collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttackRecord {
    pub true_label: usize,
    pub predicted_label: usize,
    pub success: bool,
    pub norms: AchievedNorms,
}

/// Archives an attack set: images as arrays, per-sample records, the spec and
/// free-form provenance in the header.
pub fn save_attack_set(
    path: &Path,
    set: &[AdversarialExample],
    spec: &AttackSpec,
    provenance: &serde_json::Value,
) -> Result<()> {
    let mut c = Checkpoint::new("attack_set");
    c.set("spec", spec)?;
    c.set("provenance", provenance)?;
    let records: Vec<AttackRecord> = set
        .iter()
        .map(|a| AttackRecord {
            true_label: a.true_label,
            predicted_label: a.predicted_label,
            success: a.success,
            norms: a.norms,
        })
        .collect();
    c.set("records", &records)?;
    if let Some(first) = set.first() {
        let [ch, h, w] = first.original.shape();
        c.set("shape", &[ch, h, w])?;
        let stack = |f: &dyn Fn(&AdversarialExample) -> &Image| {
            Tensor::new(vec![set.len(), ch, h, w], set.iter().flat_map(|a| f(a).pixels().to_vec()).collect())
        };
        c.arrays.insert("original".into(), stack(&|a| &a.original));
        c.arrays.insert("perturbed".into(), stack(&|a| &a.perturbed));
    }
    c.save(path)
}

pub fn load_attack_set(path: &Path) -> Result<(AttackSpec, Vec<AdversarialExample>)> {
    let c = Checkpoint::load(path)?;
    c.expect_kind("attack_set")?;
    let spec: AttackSpec = c.get("spec")?;
    let records: Vec<AttackRecord> = c.get("records")?;
    if records.is_empty() {
        return Ok((spec, Vec::new()));
    }
    let shape: [usize; 3] = c.get("shape")?;
    let get = |name: &str| {
        c.arrays.get(name).cloned().ok_or_else(|| Error::Checkpoint(format!("attack set lacks array {name}")))
    };
    let (orig, pert) = (get("original")?, get("perturbed")?);
    let d: usize = shape.iter().product();
    if orig.numel() != records.len() * d || pert.numel() != orig.numel() {
        return Err(Error::Checkpoint("attack set arrays do not match the records".into()));
    }
    let set = records
        .into_iter()
        .enumerate()
        .map(|(i, r)| AdversarialExample {
            original: Image::from_planar_unchecked(shape, orig.data()[i * d..(i + 1) * d].to_vec()),
            perturbed: Image::from_planar_unchecked(shape, pert.data()[i * d..(i + 1) * d].to_vec()),
            true_label: r.true_label,
            predicted_label: r.predicted_label,
            success: r.success,
            norms: r.norms,
        })
        .collect();
    Ok((spec, set))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn table3_norm_restrictions() {
        assert!(AttackSpec::new(Method::Fgsm, Norm::L2, Some(0.1)).validate().is_err());
        assert!(AttackSpec::new(Method::Fgm, Norm::Linf, Some(0.1)).validate().is_err());
        assert!(AttackSpec::new(Method::Cw, Norm::Linf, None).validate().is_err());
        assert!(AttackSpec::bim(Norm::L2, 0.5, 5).validate().is_ok());
        assert!(AttackSpec::deepfool(Norm::Linf, 50, 0.02).validate().is_ok());
        assert!(AttackSpec::new(Method::Fgsm, Norm::Linf, None).validate().is_err());
        assert!(AttackSpec::new(Method::Cw, Norm::L2, Some(1.0)).validate().is_err());
        assert!(AttackSpec::fgsm(-0.1).validate().is_err());
    }

    #[test]
    fn achieved_norms() {
        let n = AchievedNorms::between(&[0.0, 0.0, 0.0, 0.0], &[0.3, -0.4, 0.0, 0.0]);
        assert!((n.l2 - 0.5).abs() < 1e-6);
        assert!((n.l2_rms - 0.25).abs() < 1e-6);
        assert!((n.linf - 0.4).abs() < 1e-6);
    }

    #[test]
    fn margins_exclude_true_class() {
        let m = margins(&[1.0, 3.0, 2.0, 5.0, 0.0, 1.0], &[1, 0], 3);
        assert_eq!(m, vec![1.0, 4.0]);
    }
}
