//! Triplet-trained embedding network and the reconstruction-distance
//! detector built on it.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::classifier::TargetClassifier;
use crate::contranet::Cgan;
use crate::data::{Image, LabeledDataset};
use crate::error::{Error, Result};
use crate::nn::{Adam, Conv2d, Float, Fwd, Linear, ParamStore, Tape, Tensor, Var};
use crate::saec::{quantile_threshold, Direction};

pub const CHECKPOINT_KIND: &str = "metric";
pub const SP_FORMAT: &str = "mixdefense-sp/1";
const NORM_EPS: f64 = 1e-12;
const CHUNK: usize = 128;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricArch {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    /// Conv block widths; each block is conv3 + ReLU + 2x2 max pool.
    pub widths: Vec<usize>,
    pub embed_dim: usize,
}

impl MetricArch {
    pub fn desk(shape: [usize; 3], embed_dim: usize) -> Self {
        MetricArch { channels: shape[0], height: shape[1], width: shape[2], widths: vec![16, 32, 64], embed_dim }
    }
}

#[derive(Clone, Debug)]
pub struct MetricNetwork<T: Float> {
    arch: MetricArch,
    pub store: ParamStore<T>,
    convs: Vec<Conv2d>,
    head: Linear,
    pub history: Vec<f64>,
}

impl<T: Float> MetricNetwork<T> {
    pub fn init(arch: MetricArch, seed: u64) -> Result<Self> {
        if arch.widths.is_empty() || arch.embed_dim == 0 {
            return Err(Error::Config("metric network needs at least one block and a positive embedding size".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let (mut c, mut h, mut w) = (arch.channels, arch.height, arch.width);
        let mut convs = Vec::new();
        for (i, &cw) in arch.widths.iter().enumerate() {
            if h < 2 || w < 2 {
                return Err(Error::Config("too many pooling blocks for the input size".into()));
            }
            convs.push(Conv2d::new(&mut store, &format!("block{i}"), c, cw, 3, 1, 1, &mut rng));
            c = cw;
            h /= 2;
            w /= 2;
        }
        let head = Linear::new(&mut store, "head", c * h * w, arch.embed_dim, &mut rng);
        Ok(MetricNetwork { arch, store, convs, head, history: Vec::new() })
    }

    pub fn arch(&self) -> &MetricArch {
        &self.arch
    }

    /// Unit-norm embeddings, `N x E`.
    pub fn forward<'t>(&self, f: &Fwd<'_, 't, T>, x: Var<'t, T>) -> Var<'t, T> {
        let mut h = x;
        for c in &self.convs {
            h = c.forward(f, h).relu().max_pool2();
        }
        let e = self.head.forward(f, h.flatten());
        let norm = e.sqr().sum_keep(&[1]).add_scalar(T::c(NORM_EPS)).sqrt();
        e.div(norm)
    }

    pub fn embed_batch(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let want = [self.arch.channels, self.arch.height, self.arch.width];
        if x.shape().len() != 4 || x.shape()[1..] != want {
            return Err(Error::Shape { expected: want.to_vec(), got: x.shape().to_vec() });
        }
        let mut out = Vec::with_capacity(x.shape()[0] * self.arch.embed_dim);
        for i in (0..x.shape()[0]).step_by(CHUNK) {
            let n = CHUNK.min(x.shape()[0] - i);
            let part = Tensor::stack(&(i..i + n).map(|j| x.index0(j)).collect::<Vec<_>>());
            let tape = Tape::new();
            let b = self.store.bind_frozen(&tape);
            out.extend_from_slice(self.forward(&Fwd::new(&b, false), tape.constant(part)).value().data());
        }
        Ok(Tensor::new(vec![x.shape()[0], self.arch.embed_dim], out))
    }
}

impl MetricNetwork<f32> {
    pub fn embed(&self, x: &Image) -> Result<Vec<f32>> {
        Ok(self.embed_batch(&x.to_tensor())?.into_vec())
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let mut c = Checkpoint::new(CHECKPOINT_KIND);
        c.set("arch", &self.arch)?;
        c.set("history", &self.history)?;
        c.put_store("", &self.store);
        Ok(c)
    }

    pub fn from_checkpoint(c: &Checkpoint) -> Result<Self> {
        c.expect_kind(CHECKPOINT_KIND)?;
        let mut m = MetricNetwork::init(c.get("arch")?, 0)?;
        c.take_store("", &mut m.store)?;
        m.history = c.get("history")?;
        Ok(m)
    }
}

pub fn euclidean(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(x, y)| ((*x as f64) - (*y as f64)).powi(2)).sum::<f64>().sqrt()
}

/// `max(d(a,p) - d(a,n) + margin, 0)`.
pub fn triplet_margin_loss(a: &[f32], p: &[f32], n: &[f32], margin: f64) -> f64 {
    (euclidean(a, p) - euclidean(a, n) + margin).max(0.0)
}

/// Row-wise Euclidean distance of two `T x E` variables, shape `[T]`.
fn row_distance<'t, T: Float>(a: Var<'t, T>, b: Var<'t, T>) -> Var<'t, T> {
    let t = a.shape()[0];
    a.sub(b).sqr().sum_keep(&[1]).add_scalar(T::c(NORM_EPS)).sqrt().reshape(vec![t])
}

/// Mean triplet margin loss over rows of `T x E` anchors, positives and
/// negatives.
pub fn triplet_loss_var<'t, T: Float>(a: Var<'t, T>, p: Var<'t, T>, n: Var<'t, T>, margin: f64) -> Var<'t, T> {
    row_distance(a, p).sub(row_distance(a, n)).add_scalar(T::c(margin)).relu().mean_all()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MinerPolicy {
    AllCombinations,
    SemiHard,
}

impl std::str::FromStr for MinerPolicy {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "all_combinations" | "all" => Ok(MinerPolicy::AllCombinations),
            "semi_hard" | "semihard" => Ok(MinerPolicy::SemiHard),
            _ => Err(Error::Config(format!("unknown miner policy {s:?}"))),
        }
    }
}

/// Indices into the anchor's own candidate lists.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct TripletIndex {
    pub anchor: usize,
    pub positive: usize,
    pub negative: usize,
}

/// Candidate positives and negatives (as embeddings) for one anchor.
pub struct Candidates<'a> {
    pub anchor: &'a [f32],
    pub positives: Vec<&'a [f32]>,
    pub negatives: Vec<&'a [f32]>,
}

/// Selects triplets per anchor. Semi-hard keeps negatives with
/// `d(a,p) < d(a,n) < d(a,p) + margin`; when none qualify for a pair the
/// closest negative is used.
pub fn mine_triplets(cands: &[Candidates<'_>], policy: MinerPolicy, margin: f64) -> Result<Vec<TripletIndex>> {
    if cands.is_empty() {
        return Err(Error::Precondition("no anchors to mine".into()));
    }
    let mut out = Vec::new();
    for (ai, c) in cands.iter().enumerate() {
        if c.positives.is_empty() || c.negatives.is_empty() {
            return Err(Error::Precondition(format!("anchor {ai} lacks a positive or a negative candidate")));
        }
        let dn: Vec<f64> = c.negatives.iter().map(|n| euclidean(c.anchor, n)).collect();
        for (pi, p) in c.positives.iter().enumerate() {
            let t = |ni| TripletIndex { anchor: ai, positive: pi, negative: ni };
            match policy {
                MinerPolicy::AllCombinations => out.extend((0..dn.len()).map(t)),
                MinerPolicy::SemiHard => {
                    let dp = euclidean(c.anchor, p);
                    let before = out.len();
                    out.extend((0..dn.len()).filter(|&i| dp < dn[i] && dn[i] < dp + margin).map(t));
                    if out.len() == before {
                        let hardest = (0..dn.len()).min_by(|&i, &j| dn[i].total_cmp(&dn[j])).expect("non-empty");
                        out.push(t(hardest));
                    }
                }
            }
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MetricConfig {
    pub embed_dim: usize,
    pub margin: f64,
    pub iterations: usize,
    pub batch_size: usize,
    /// Wrong-label reconstructions per anchor.
    pub negatives: usize,
    pub lr: f64,
    pub miner: MinerPolicy,
    pub arch: Option<MetricArch>,
}

impl Default for MetricConfig {
    fn default() -> Self {
        MetricConfig {
            embed_dim: 64,
            margin: 1.0,
            iterations: 400,
            batch_size: 64,
            negatives: 2,
            lr: 1e-3,
            miner: MinerPolicy::AllCombinations,
            arch: None,
        }
    }
}

/// Mean-mode reconstructions of `x` under `labels`.
fn reconstruct_under(cgan: &Cgan<f32>, x: &Tensor<f32>, labels: &[usize]) -> Result<Tensor<f32>> {
    cgan.encode_reconstruct_batch(x, labels)
}

fn gather(t: &Tensor<f32>, rows: &[usize]) -> Tensor<f32> {
    Tensor::stack(&rows.iter().map(|&r| t.index0(r)).collect::<Vec<_>>())
}

/// Online triplet training: anchors are clean images, positives their
/// reconstructions under the true label, negatives reconstructions under
/// uniformly drawn wrong labels. `progress` receives each iteration's loss.
pub fn train_metric(
    cgan: &Cgan<f32>,
    train: &LabeledDataset,
    cfg: &MetricConfig,
    seed: u64,
    mut progress: impl FnMut(usize, f64),
) -> Result<MetricNetwork<f32>> {
    if !(cfg.margin > 0.0) || cfg.batch_size == 0 || cfg.negatives == 0 || cfg.negatives >= train.class_count {
        return Err(Error::Config("metric training needs margin > 0, batch_size > 0 and 0 < negatives < K".into()));
    }
    let arch = cfg.arch.clone().unwrap_or_else(|| MetricArch::desk(train.shape(), cfg.embed_dim));
    let mut net = MetricNetwork::<f32>::init(arch, seed)?;
    let mut opt = Adam::new(cfg.lr, 0.9, 0.999);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x7719_1e7);
    let k = train.class_count;
    let mut order: Vec<usize> = Vec::new();
    for it in 0..cfg.iterations {
        if order.len() < cfg.batch_size {
            let mut fresh: Vec<usize> = (0..train.len()).collect();
            fresh.shuffle(&mut rng);
            order.extend(fresh);
        }
        let idx: Vec<usize> = order.drain(..cfg.batch_size.min(train.len())).collect();
        let m = idx.len();
        let x = train.batch_tensor(&idx);
        let y = train.batch_labels(&idx);
        let pos = reconstruct_under(cgan, &x, &y)?;
        // one row per (anchor, negative slot)
        let mut rows = Vec::with_capacity(m * cfg.negatives);
        let mut wrong = Vec::with_capacity(m * cfg.negatives);
        for (i, &yi) in y.iter().enumerate() {
            let mut others: Vec<usize> = (0..k).filter(|&c| c != yi).collect();
            others.shuffle(&mut rng);
            for &c in &others[..cfg.negatives] {
                rows.push(i);
                wrong.push(c);
            }
        }
        let neg = reconstruct_under(cgan, &gather(&x, &rows), &wrong)?;

        let tape = Tape::new();
        let b = net.store.bind(&tape);
        let f = Fwd::new(&b, true);
        let ea = net.forward(&f, tape.constant(x));
        let ep = net.forward(&f, tape.constant(pos));
        let en = net.forward(&f, tape.constant(neg));

        let (va, vp, vn) = (ea.value(), ep.value(), en.value());
        let e = net.arch.embed_dim;
        let cands: Vec<Candidates> = (0..m)
            .map(|i| Candidates {
                anchor: &va.data()[i * e..(i + 1) * e],
                positives: vec![&vp.data()[i * e..(i + 1) * e]],
                negatives: (0..cfg.negatives).map(|s| &vn.data()[(i * cfg.negatives + s) * e..][..e]).collect(),
            })
            .collect();
        let trip = mine_triplets(&cands, cfg.miner, cfg.margin)?;
        let ai: Vec<usize> = trip.iter().map(|t| t.anchor).collect();
        let ni: Vec<usize> = trip.iter().map(|t| t.anchor * cfg.negatives + t.negative).collect();
        let loss = triplet_loss_var(tape.gather_rows(ea, &ai), tape.gather_rows(ep, &ai), tape.gather_rows(en, &ni), cfg.margin);
        let lv = loss.value().item() as f64;
        let grads = b.grads(&tape.backward(loss));
        if !lv.is_finite() || !grads.iter().flatten().all(Tensor::all_finite) {
            return Err(Error::NonFinite(format!("metric loss at iteration {it}")));
        }
        opt.step(&mut net.store, &grads);
        net.history.push(lv);
        progress(it, lv);
    }
    Ok(net)
}

/// `d(M(x), M(G(E(x), y)))` for every row of `x`, in parallel chunks.
pub fn sp_distances(metric: &MetricNetwork<f32>, cgan: &Cgan<f32>, x: &Tensor<f32>, labels: &[usize]) -> Result<Vec<f64>> {
    if labels.len() != x.shape().first().copied().unwrap_or(0) {
        return Err(Error::Precondition("one label per image required".into()));
    }
    let n = labels.len();
    let starts: Vec<usize> = (0..n).step_by(CHUNK).collect();
    let parts = starts
        .par_iter()
        .map(|&s| {
            let rows: Vec<usize> = (s..(s + CHUNK).min(n)).collect();
            let xb = gather(x, &rows);
            let yb = &labels[s..s + rows.len()];
            let r = cgan.encode_reconstruct_batch(&xb, yb)?;
            let (ex, er) = (metric.embed_batch(&xb)?, metric.embed_batch(&r)?);
            let e = metric.arch.embed_dim;
            Ok((0..rows.len()).map(|i| euclidean(&ex.data()[i * e..][..e], &er.data()[i * e..][..e])).collect::<Vec<_>>())
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(parts.concat())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpCalibration {
    pub dataset: String,
    pub target_clean_fpr: f64,
    pub n_images: usize,
    pub mean_clean_distance: f64,
}

#[derive(Clone, Debug)]
pub struct SpDetector {
    pub metric: MetricNetwork<f32>,
    pub threshold: f64,
    pub calibration: SpCalibration,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpVerdict {
    pub flagged: bool,
    pub distance: f64,
}

/// Threshold from clean distances computed against the classifier's
/// predicted labels.
pub fn calibrate_sp(
    metric: MetricNetwork<f32>,
    cgan: &Cgan<f32>,
    clf: &TargetClassifier,
    clean: &LabeledDataset,
    target_clean_fpr: f64,
) -> Result<SpDetector> {
    if !(target_clean_fpr > 0.0 && target_clean_fpr < 1.0) {
        return Err(Error::Precondition(format!("target_clean_fpr {target_clean_fpr} outside (0, 1)")));
    }
    if clean.is_empty() {
        return Err(Error::Calibration("empty calibration set".into()));
    }
    let idx: Vec<usize> = (0..clean.len()).collect();
    let x = clean.batch_tensor(&idx);
    let pred = clf.predict_batch(&x)?;
    let d = sp_distances(&metric, cgan, &x, &pred)?;
    if d.iter().any(|v| !v.is_finite()) {
        return Err(Error::Calibration("non-finite clean distance".into()));
    }
    let (lo, hi) = d.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    if !(hi > lo) {
        return Err(Error::Calibration("clean distances are all equal".into()));
    }
    Ok(SpDetector {
        threshold: sp_threshold(&d, target_clean_fpr),
        calibration: SpCalibration {
            dataset: clean.name.clone(),
            target_clean_fpr,
            n_images: d.len(),
            mean_clean_distance: d.iter().sum::<f64>() / d.len() as f64,
        },
        metric,
    })
}

/// Empirical `(1 - fpr)` quantile: at most `floor(fpr * n)` distances lie
/// strictly above it.
pub fn sp_threshold(distances: &[f64], fpr: f64) -> f64 {
    quantile_threshold(distances, fpr, Direction::FlagAbove)
}

impl SpDetector {
    pub fn flags(&self, distance: f64) -> bool {
        distance > self.threshold
    }

    pub fn detect(&self, cgan: &Cgan<f32>, x: &Image, y_pred: usize) -> Result<SpVerdict> {
        let d = sp_distances(&self.metric, cgan, &x.to_tensor(), &[y_pred])?[0];
        Ok(SpVerdict { flagged: self.flags(d), distance: d })
    }

    pub fn detect_batch(&self, cgan: &Cgan<f32>, x: &Tensor<f32>, y_pred: &[usize]) -> Result<Vec<SpVerdict>> {
        Ok(sp_distances(&self.metric, cgan, x, y_pred)?
            .into_iter()
            .map(|d| SpVerdict { flagged: self.flags(d), distance: d })
            .collect())
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let mut c = self.metric.to_checkpoint()?;
        c.set("kind", &"sp_detector")?;
        c.set("format", &SP_FORMAT)?;
        c.set("threshold", &self.threshold)?;
        c.set("calibration", &self.calibration)?;
        Ok(c)
    }

    pub fn from_checkpoint(c: &Checkpoint) -> Result<Self> {
        c.expect_kind("sp_detector")?;
        let threshold: f64 = c.get("threshold")?;
        if !threshold.is_finite() {
            return Err(Error::Checkpoint("SP threshold is not finite".into()));
        }
        let mut m = MetricNetwork::init(c.get("arch")?, 0)?;
        c.take_store("", &mut m.store)?;
        m.history = c.get("history")?;
        Ok(SpDetector { metric: m, threshold, calibration: c.get("calibration")? })
    }
}

/// Draws one wrong label uniformly from the `k - 1` other classes.
pub fn wrong_label(y: usize, k: usize, rng: &mut impl Rng) -> usize {
    let r = rng.random_range(0..k - 1);
    if r >= y {
        r + 1
    } else {
        r
    }
}
