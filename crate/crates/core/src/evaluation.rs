//! Measurement protocol: detection and robust-classification accuracy over
//! budget grids, per-layer ablations, the two adaptive case studies and
//! failure-case export.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attacks::{self, AdversarialExample, AttackSpec, Norm};
use crate::classifier::argmax;
use crate::data::{self, Image, LabeledDataset};
use crate::error::{Error, Result};
use crate::nn::{cross_entropy, Fwd, Tape, Tensor};
use crate::pipeline::{DetectorVerdict, FinalDecision, Layers, MixDefense, VerdictError};

/// Points with fewer successful AEs than this are marked censored.
pub const CENSOR_BELOW: usize = 100;
pub const CURVE_SCHEMA: &str = "# mixdefense-curve/1";
pub const CURVE_HEADER: &str = "budget,norm,scale,metric,value,n,censored";
pub const FAILURE_SCHEMA: &str = "# mixdefense-failures/1";
/// Budgets are expressed on the `[0, 1]` pixel scale.
pub const UNIT_SCALE: &str = "unit";

/// Binary confusion counts with clean images as the positive class.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    /// clean, accepted
    pub tp: u64,
    /// AE, rejected
    pub tn: u64,
    /// AE, accepted
    pub fp: u64,
    /// clean, rejected
    pub fn_: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.tn + self.fp + self.fn_
    }

    /// Tallies verdicts; `clean[i]` is the ground truth of `rejected[i]`.
    pub fn tally(clean: &[bool], rejected: &[bool]) -> Result<Self> {
        if clean.len() != rejected.len() {
            return Err(Error::Precondition(format!("{} labels for {} verdicts", clean.len(), rejected.len())));
        }
        let mut c = ConfusionCounts::default();
        for (&pos, &rej) in clean.iter().zip(rejected) {
            match (pos, rej) {
                (true, false) => c.tp += 1,
                (true, true) => c.fn_ += 1,
                (false, true) => c.tn += 1,
                (false, false) => c.fp += 1,
            }
        }
        Ok(c)
    }
}

pub fn acc_detector(c: &ConfusionCounts) -> Result<f64> {
    let total = c.total();
    if total == 0 {
        return Err(Error::Precondition("empty confusion counts".into()));
    }
    Ok((c.tp + c.tn) as f64 / total as f64)
}

/// `(#detected + #correct) / #AEs`, where `correct` counts only undetected
/// AEs still classified as their true label.
pub fn acc_rc(n_aes: u64, n_detected: u64, n_correct: u64) -> Result<f64> {
    if n_aes == 0 {
        return Err(Error::Precondition("no AEs".into()));
    }
    if n_detected + n_correct > n_aes {
        return Err(Error::Precondition(format!("{n_detected} detected + {n_correct} correct exceeds {n_aes} AEs")));
    }
    Ok((n_detected + n_correct) as f64 / n_aes as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CurveMetric {
    AccDetector,
    AccRc,
    /// Classifier accuracy on the AEs without any defense.
    AccUndefended,
}

impl CurveMetric {
    pub fn as_str(&self) -> &'static str {
        match self {
            CurveMetric::AccDetector => "acc_detector",
            CurveMetric::AccRc => "acc_rc",
            CurveMetric::AccUndefended => "acc_undefended",
        }
    }
}

impl std::str::FromStr for CurveMetric {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "acc_detector" => Ok(CurveMetric::AccDetector),
            "acc_rc" => Ok(CurveMetric::AccRc),
            "acc_undefended" => Ok(CurveMetric::AccUndefended),
            _ => Err(Error::Format(format!("unknown curve metric {s}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub budget: f64,
    pub norm: Norm,
    pub scale: String,
    pub metric: CurveMetric,
    pub value: f64,
    /// Samples the value was computed over.
    pub n: usize,
    pub n_successful: usize,
    pub censored: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PointFailure {
    pub budget: f64,
    pub message: String,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Curve {
    pub points: Vec<CurvePoint>,
    pub failures: Vec<PointFailure>,
}

impl Curve {
    pub fn metric(&self, m: CurveMetric) -> impl Iterator<Item = &CurvePoint> {
        self.points.iter().filter(move |p| p.metric == m)
    }
}

/// Budgets to sweep. Budgeted attacks get one attack run per entry;
/// minimum-norm attacks (CW, DeepFool) run once and their successful
/// outputs are binned by achieved norm into `(edges[i-1], edges[i]]`,
/// with an implicit lower edge of 0.
#[derive(Clone, Debug, PartialEq)]
pub enum BudgetGrid {
    Budgets(Vec<AttackSpec>),
    Binned { spec: AttackSpec, edges: Vec<f64> },
}

impl BudgetGrid {
    /// Budgeted grid for `base` at each of `eps`.
    pub fn budgets(base: &AttackSpec, eps: &[f64]) -> Self {
        BudgetGrid::Budgets(eps.iter().map(|&e| AttackSpec { eps: Some(e), ..base.clone() }).collect())
    }

    fn len(&self) -> usize {
        match self {
            BudgetGrid::Budgets(v) => v.len(),
            BudgetGrid::Binned { edges, .. } => edges.len(),
        }
    }
}

/// Inclusive linear spacing, as used by `start:stop:count` arguments.
pub fn linspace(start: f64, stop: f64, count: usize) -> Vec<f64> {
    match count {
        0 => Vec::new(),
        1 => vec![start],
        _ => (0..count).map(|i| start + (stop - start) * i as f64 / (count - 1) as f64).collect(),
    }
}

struct PointSet {
    budget: f64,
    norm: Norm,
    aes: Vec<AdversarialExample>,
}

/// Shared sampling for one sweep: clean half and attacked half.
struct Plan {
    clean: Vec<Image>,
    points: Vec<std::result::Result<PointSet, PointFailure>>,
}

fn plan(def: &MixDefense, grid: &BudgetGrid, ds: &LabeledDataset, n_per_point: usize, seed: u64) -> Result<Plan> {
    if grid.len() == 0 {
        return Err(Error::Precondition("empty budget grid".into()));
    }
    let n_ae = n_per_point / 2;
    let idx = data::sample_indices(ds.len(), n_per_point, seed)?;
    let (clean_idx, ae_idx) = idx.split_at(n_per_point - n_ae);
    let clean = clean_idx.iter().map(|&i| ds.image(i)).collect();
    let points = match grid {
        BudgetGrid::Budgets(specs) => specs
            .iter()
            .map(|spec| {
                let budget = spec.eps.unwrap_or(f64::NAN);
                attacks::attack_indices(def.clf, ds, spec, ae_idx)
                    .map(|aes| PointSet { budget, norm: spec.norm, aes })
                    .map_err(|e| PointFailure { budget, message: e.to_string() })
            })
            .collect(),
        BudgetGrid::Binned { spec, edges } => {
            if edges.windows(2).any(|w| w[0] >= w[1]) || edges.first().is_some_and(|&e| e <= 0.0) {
                return Err(Error::Precondition("bin edges must be positive and strictly increasing".into()));
            }
            match attacks::attack_indices(def.clf, ds, spec, ae_idx) {
                Err(e) => edges.iter().map(|&b| Err(PointFailure { budget: b, message: e.to_string() })).collect(),
                Ok(all) => {
                    let mut lo = 0.0;
                    edges
                        .iter()
                        .map(|&hi| {
                            let aes = all
                                .iter()
                                .filter(|a| a.success && a.norms.get(spec.norm) > lo && a.norms.get(spec.norm) <= hi)
                                .cloned()
                                .collect();
                            lo = hi;
                            Ok(PointSet { budget: hi, norm: spec.norm, aes })
                        })
                        .collect()
                }
            }
        }
    };
    Ok(Plan { clean, points })
}

fn rejected(v: &[std::result::Result<DetectorVerdict, VerdictError>]) -> (Vec<Option<&DetectorVerdict>>, usize) {
    let errors = v.iter().filter(|r| r.is_err()).count();
    (v.iter().map(|r| r.as_ref().ok()).collect(), errors)
}

fn evaluate_plan(def: &MixDefense, layers: Layers, plan: &Plan) -> Curve {
    let mut curve = Curve::default();
    if plan.clean.is_empty() {
        return curve;
    }
    let clean_v = def.verdict_stream_layers(&plan.clean, layers);
    let (clean_v, clean_err) = rejected(&clean_v);
    for p in &plan.points {
        let p = match p {
            Ok(p) => p,
            Err(f) => {
                curve.failures.push(f.clone());
                continue;
            }
        };
        let xs: Vec<Image> = p.aes.iter().map(|a| a.perturbed.clone()).collect();
        let ae_v = def.verdict_stream_layers(&xs, layers);
        let (ae_v, ae_err) = rejected(&ae_v);
        if clean_err + ae_err > 0 {
            curve.failures.push(PointFailure {
                budget: p.budget,
                message: format!("{} samples failed evaluation and were excluded", clean_err + ae_err),
            });
        }
        let n_successful = p.aes.iter().filter(|a| a.success).count();
        let censored = n_successful < CENSOR_BELOW;
        let point = |metric, value, n| CurvePoint {
            budget: p.budget,
            norm: p.norm,
            scale: UNIT_SCALE.into(),
            metric,
            value,
            n,
            n_successful,
            censored,
        };

        // balanced mixture: as many clean images as successful AEs
        let mut flags_clean = Vec::new();
        let mut flags_rej = Vec::new();
        let succ: Vec<&DetectorVerdict> =
            p.aes.iter().zip(&ae_v).filter(|(a, _)| a.success).filter_map(|(_, v)| *v).collect();
        let clean_ok: Vec<&DetectorVerdict> = clean_v.iter().filter_map(|v| *v).collect();
        let m = succ.len().min(clean_ok.len());
        for v in &clean_ok[..m] {
            flags_clean.push(true);
            flags_rej.push(v.decision.is_rejected());
        }
        for v in &succ[..m] {
            flags_clean.push(false);
            flags_rej.push(v.decision.is_rejected());
        }
        match ConfusionCounts::tally(&flags_clean, &flags_rej).and_then(|c| acc_detector(&c)) {
            Ok(a) => curve.points.push(point(CurveMetric::AccDetector, a, 2 * m)),
            Err(_) => curve.failures.push(PointFailure { budget: p.budget, message: "no successful AEs".into() }),
        }

        let (mut n, mut det, mut cor, mut und) = (0u64, 0u64, 0u64, 0u64);
        for (a, v) in p.aes.iter().zip(&ae_v) {
            let Some(v) = v else { continue };
            n += 1;
            match v.decision {
                FinalDecision::Accepted(l) if l == a.true_label => cor += 1,
                FinalDecision::Accepted(_) => {}
                _ => det += 1,
            }
            if a.predicted_label == a.true_label {
                und += 1;
            }
        }
        if let Ok(a) = acc_rc(n, det, cor) {
            curve.points.push(point(CurveMetric::AccRc, a, n as usize));
            curve.points.push(point(CurveMetric::AccUndefended, und as f64 / n as f64, n as usize));
        }
    }
    curve
}

/// One curve over `grid` with a single fixed pair of thresholds.
/// `n_per_point` images are drawn once: the first half stay clean, the
/// second half are attacked at every budget.
pub fn sweep_curve(
    def: &MixDefense,
    layers: Layers,
    grid: &BudgetGrid,
    ds: &LabeledDataset,
    n_per_point: usize,
    seed: u64,
) -> Result<Curve> {
    if n_per_point == 0 {
        return Ok(Curve::default());
    }
    Ok(evaluate_plan(def, layers, &plan(def, grid, ds, n_per_point, seed)?))
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LayerCurves {
    pub both: Curve,
    pub lp_only: Curve,
    pub sp_only: Curve,
}

/// Same protocol and the same AEs, evaluated with each layer alone and with
/// both.
pub fn layer_curves(
    def: &MixDefense,
    grid: &BudgetGrid,
    ds: &LabeledDataset,
    n_per_point: usize,
    seed: u64,
) -> Result<LayerCurves> {
    if n_per_point == 0 {
        return Ok(LayerCurves::default());
    }
    let p = plan(def, grid, ds, n_per_point, seed)?;
    Ok(LayerCurves {
        both: evaluate_plan(def, Layers::Both, &p),
        lp_only: evaluate_plan(def, Layers::LpOnly, &p),
        sp_only: evaluate_plan(def, Layers::SpOnly, &p),
    })
}

fn fmt_bool(b: bool) -> &'static str {
    if b {
        "true"
    } else {
        "false"
    }
}

pub fn write_curve_csv(w: &mut impl std::io::Write, points: &[CurvePoint]) -> std::io::Result<()> {
    writeln!(w, "{CURVE_SCHEMA}")?;
    writeln!(w, "{CURVE_HEADER}")?;
    for p in points {
        writeln!(w, "{},{},{},{},{},{},{}", p.budget, p.norm, p.scale, p.metric.as_str(), p.value, p.n, fmt_bool(p.censored))?;
    }
    Ok(())
}

/// Parses a curve file written by [`write_curve_csv`]. `n_successful` is
/// not part of the schema and reads back as 0.
pub fn read_curve_csv(text: &str) -> Result<Vec<CurvePoint>> {
    let mut lines = text.lines();
    if lines.next() != Some(CURVE_SCHEMA) {
        return Err(Error::Format(format!("curve file must start with {CURVE_SCHEMA}")));
    }
    if lines.next() != Some(CURVE_HEADER) {
        return Err(Error::Format("unexpected curve header".into()));
    }
    let bad = |l: &str| Error::Format(format!("bad curve row: {l}"));
    lines
        .filter(|l| !l.is_empty())
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            if f.len() != 7 {
                return Err(bad(l));
            }
            Ok(CurvePoint {
                budget: f[0].parse().map_err(|_| bad(l))?,
                norm: f[1].parse()?,
                scale: f[2].to_string(),
                metric: f[3].parse()?,
                value: f[4].parse().map_err(|_| bad(l))?,
                n: f[5].parse().map_err(|_| bad(l))?,
                n_successful: 0,
                censored: f[6].parse().map_err(|_| bad(l))?,
            })
        })
        .collect()
}

const ATTACK_CHUNK: usize = 64;

fn stack(xs: &[Image]) -> Tensor<f32> {
    Tensor::stack(&xs.iter().map(|x| x.to_tensor().index0(0)).collect::<Vec<_>>())
}

fn unstack(t: &Tensor<f32>, shape: [usize; 3]) -> Vec<Image> {
    let d: usize = shape.iter().product();
    t.data().chunks(d).map(|c| Image::from_planar_unchecked(shape, c.to_vec())).collect()
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

/// Runs `f` on fixed chunks in parallel; a failing chunk is retried one
/// sample at a time so only the offending samples carry the error.
fn chunked<O: Send>(
    n: usize,
    f: impl Fn(std::ops::Range<usize>) -> Result<Vec<O>> + Sync,
) -> Vec<std::result::Result<O, String>> {
    let starts: Vec<usize> = (0..n).step_by(ATTACK_CHUNK).collect();
    starts
        .par_iter()
        .flat_map_iter(|&s| {
            let r = s..(s + ATTACK_CHUNK).min(n);
            match f(r.clone()) {
                Ok(v) => v.into_iter().map(Ok).collect::<Vec<_>>(),
                Err(_) => r.map(|i| f(i..i + 1).map(|mut v| v.remove(0)).map_err(|e| e.to_string())).collect(),
            }
        })
        .collect()
}

/// Mean embedding distance over rows, kept on the tape.
fn mean_distance<'t>(a: crate::nn::Var<'t, f32>, b: crate::nn::Var<'t, f32>) -> crate::nn::Var<'t, f32> {
    a.sub(b).sqr().sum_keep(&[1]).add_scalar(1e-12).sqrt().mean_all()
}

/// One targeted FGSM step on the inputs against the whole defense:
/// minimises target-label cross-entropy plus the embedding distance between
/// the input and its reconstruction conditioned on the target.
fn adaptive_input_step(def: &MixDefense, x: &Tensor<f32>, targets: &[usize], eps: f64) -> Result<Tensor<f32>> {
    for &t in targets {
        if t >= def.clf.classes() {
            return Err(Error::InvalidClass { label: t, classes: def.clf.classes() });
        }
    }
    let tape = Tape::new();
    let (bc, be, bg, bm) = (
        def.clf.store().bind_frozen(&tape),
        def.cgan.enc_store.bind_frozen(&tape),
        def.cgan.gen_store.bind_frozen(&tape),
        def.sp.metric.store.bind_frozen(&tape),
    );
    let (fc, fe, fg, fm) = (Fwd::new(&bc, false), Fwd::new(&be, false), Fwd::new(&bg, false), Fwd::new(&bm, false));
    let xv = tape.leaf(x.clone());
    let ce = cross_entropy(def.clf.forward(&fc, xv), targets);
    let (mu, _) = def.cgan.encoder_fwd(&fe, xv);
    let r = def.cgan.generator_fwd(&fg, mu, targets);
    let loss = ce.add(mean_distance(def.sp.metric.forward(&fm, xv), def.sp.metric.forward(&fm, r)));
    let g = tape.backward(loss).get(xv).cloned().unwrap_or_else(|| Tensor::zeros(x.shape().to_vec()));
    if !g.all_finite() {
        return Err(Error::NonFinite("adaptive input gradient".into()));
    }
    let e = eps as f32;
    let data = x.data().iter().zip(g.data()).map(|(&v, &d)| (v - e * sign(d)).clamp(0.0, 1.0)).collect();
    Ok(Tensor::new(x.shape().to_vec(), data))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InputAttackRow {
    pub eps: f64,
    /// Samples that produced an adaptive AE and a verdict.
    pub n: usize,
    pub n_errors: usize,
    pub detection_rate: f64,
    pub lp_rate: f64,
    pub sp_rate: f64,
    /// Classifier outputs the target label.
    pub target_rate: f64,
    /// Classifier labels the target-conditioned reconstruction as the target.
    pub recon_follows_rate: f64,
    pub mean_target_distance: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct InputAttackStep {
    pub row: InputAttackRow,
    pub verdicts: Vec<std::result::Result<DetectorVerdict, VerdictError>>,
    /// First `keep` adaptive inputs and their target-conditioned
    /// reconstructions.
    pub adversarial: Vec<Image>,
    pub reconstructions: Vec<Image>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct InputAttackReport {
    pub originals: Vec<Image>,
    pub steps: Vec<InputAttackStep>,
}

fn check_grid(grid: &[f64], lo: f64, hi: f64) -> Result<()> {
    if grid.is_empty() {
        return Err(Error::Precondition("empty eps grid".into()));
    }
    match grid.iter().find(|&&e| !(e == 0.0 || (lo..=hi).contains(&e))) {
        Some(e) => Err(Error::Precondition(format!("eps {e} outside [{lo}, {hi}]"))),
        None => Ok(()),
    }
}

fn rate(k: usize, n: usize) -> f64 {
    if n == 0 {
        0.0
    } else {
        k as f64 / n as f64
    }
}

/// Adaptive attack on the defended pipeline's inputs. At `eps = 0` the
/// inputs are unchanged and verdicts equal the non-adaptive ones.
pub fn adaptive_input_attack(
    def: &MixDefense,
    xs: &[Image],
    targets: &[usize],
    eps_grid: &[f64],
    keep: usize,
) -> Result<InputAttackReport> {
    check_grid(eps_grid, 0.01, 0.1)?;
    if xs.len() != targets.len() {
        return Err(Error::Precondition(format!("{} images but {} targets", xs.len(), targets.len())));
    }
    let shape = def.clf.input_shape();
    if let Some(x) = xs.iter().find(|x| x.shape() != shape) {
        return Err(Error::Shape { expected: shape.to_vec(), got: x.shape().to_vec() });
    }
    let mut steps = Vec::new();
    for &eps in eps_grid {
        let adv = chunked(xs.len(), |r| {
            let t = adaptive_input_step(def, &stack(&xs[r.clone()]), &targets[r], eps)?;
            Ok(unstack(&t, shape))
        });
        let ok: Vec<(usize, Image)> = adv.into_iter().enumerate().filter_map(|(i, a)| a.ok().map(|a| (i, a))).collect();
        let n_errors = xs.len() - ok.len();
        let imgs: Vec<Image> = ok.iter().map(|(_, a)| a.clone()).collect();
        let tg: Vec<usize> = ok.iter().map(|&(i, _)| targets[i]).collect();
        let verdicts = def.verdict_stream(&imgs);
        let mut verdicts: Vec<_> = verdicts
            .into_iter()
            .zip(&ok)
            .map(|(v, &(i, _))| match v {
                Ok(v) => Ok(DetectorVerdict { id: i, ..v }),
                Err(e) => Err(VerdictError { id: i, ..e }),
            })
            .collect();
        for i in (0..xs.len()).filter(|i| !ok.iter().any(|(j, _)| j == i)) {
            verdicts.push(Err(VerdictError { id: i, kind: "attack".into(), message: "adaptive step failed".into() }));
        }
        verdicts.sort_by_key(|v| match v {
            Ok(v) => v.id,
            Err(e) => e.id,
        });
        let (mut n, mut det, mut lp, mut sp) = (0, 0, 0, 0);
        for v in verdicts.iter().flatten() {
            n += 1;
            match v.decision {
                FinalDecision::RejectedLp => {
                    det += 1;
                    lp += 1
                }
                FinalDecision::RejectedSp => {
                    det += 1;
                    sp += 1
                }
                FinalDecision::Accepted(_) => {}
            }
        }
        let (mut hit, mut follow, mut dist) = (0, 0, 0.0);
        let mut recon_keep = Vec::new();
        if !imgs.is_empty() {
            let x = stack(&imgs);
            let pred = def.clf.predict_batch(&x)?;
            hit = pred.iter().zip(&tg).filter(|(p, t)| p == t).count();
            let recon = def.cgan.encode_reconstruct_batch(&x, &tg)?;
            let rp = def.clf.predict_batch(&recon)?;
            follow = rp.iter().zip(&tg).filter(|(p, t)| p == t).count();
            let d = crate::metric::sp_distances(&def.sp.metric, def.cgan, &x, &tg)?;
            dist = d.iter().sum::<f64>() / d.len() as f64;
            recon_keep = unstack(&recon, shape).into_iter().take(keep).collect();
        }
        let m = imgs.len();
        steps.push(InputAttackStep {
            row: InputAttackRow {
                eps,
                n,
                n_errors,
                detection_rate: rate(det, n),
                lp_rate: rate(lp, n),
                sp_rate: rate(sp, n),
                target_rate: rate(hit, m),
                recon_follows_rate: rate(follow, m),
                mean_target_distance: dist,
            },
            verdicts,
            adversarial: imgs.into_iter().take(keep).collect(),
            reconstructions: recon_keep,
        });
    }
    Ok(InputAttackReport { originals: xs.iter().take(keep).cloned().collect(), steps })
}

/// FGSM on the latent code with the condition fixed: moves `z` to shrink
/// the embedding distance between `x` and `G(z, y)`.
fn latent_step(def: &MixDefense, x: &Tensor<f32>, labels: &[usize], eps: f64) -> Result<Tensor<f32>> {
    if let Some(&y) = labels.iter().find(|&&y| y >= def.cgan.arch().classes) {
        return Err(Error::InvalidClass { label: y, classes: def.cgan.arch().classes });
    }
    let (mu, _) = def.cgan.encode_batch(x)?;
    let tape = Tape::new();
    let (bg, bm) = (def.cgan.gen_store.bind_frozen(&tape), def.sp.metric.store.bind_frozen(&tape));
    let (fg, fm) = (Fwd::new(&bg, false), Fwd::new(&bm, false));
    let z = tape.leaf(mu.clone());
    let r = def.cgan.generator_fwd(&fg, z, labels);
    let loss = mean_distance(def.sp.metric.forward(&fm, tape.constant(x.clone())), def.sp.metric.forward(&fm, r));
    let g = tape.backward(loss).get(z).cloned().unwrap_or_else(|| Tensor::zeros(mu.shape().to_vec()));
    if !g.all_finite() {
        return Err(Error::NonFinite("latent gradient".into()));
    }
    let e = eps as f32;
    Ok(Tensor::new(mu.shape().to_vec(), mu.data().iter().zip(g.data()).map(|(&v, &d)| v - e * sign(d)).collect()))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatentAttackRow {
    pub eps: f64,
    pub n: usize,
    pub n_errors: usize,
    /// Classifier labels the reconstruction as the conditioning label.
    pub label_agreement: f64,
    pub mean_distance: f64,
    /// Share whose distance still exceeds the SP threshold.
    pub above_threshold: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LatentAttackStep {
    pub row: LatentAttackRow,
    /// Per sample; `None` where the step failed.
    pub distances: Vec<Option<f64>>,
    pub reconstructions: Vec<Image>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LatentAttackReport {
    pub originals: Vec<Image>,
    pub steps: Vec<LatentAttackStep>,
}

/// Adaptive attack on the latent code. At `eps = 0` the reconstruction is
/// the mean-mode one and distances equal the SP detector's.
pub fn adaptive_latent_attack(
    def: &MixDefense,
    x_adv: &[Image],
    fixed_labels: &[usize],
    eps_grid: &[f64],
    keep: usize,
) -> Result<LatentAttackReport> {
    check_grid(eps_grid, 0.0, f64::INFINITY)?;
    if x_adv.len() != fixed_labels.len() {
        return Err(Error::Precondition(format!("{} images but {} labels", x_adv.len(), fixed_labels.len())));
    }
    let shape = def.clf.input_shape();
    if let Some(x) = x_adv.iter().find(|x| x.shape() != shape) {
        return Err(Error::Shape { expected: shape.to_vec(), got: x.shape().to_vec() });
    }
    let e = def.sp.metric.arch().embed_dim;
    let mut steps = Vec::new();
    for &eps in eps_grid {
        let out = chunked(x_adv.len(), |r| {
            let x = stack(&x_adv[r.clone()]);
            let y = &fixed_labels[r];
            let z = latent_step(def, &x, y, eps)?;
            let recon = def.cgan.reconstruct_batch(&z, y)?;
            let (ex, er) = (def.sp.metric.embed_batch(&x)?, def.sp.metric.embed_batch(&recon)?);
            let pred = def.clf.predict_batch(&recon)?;
            let imgs = unstack(&recon, shape);
            Ok((0..y.len())
                .map(|i| {
                    let d = crate::metric::euclidean(&ex.data()[i * e..][..e], &er.data()[i * e..][..e]);
                    (d, pred[i] == y[i], imgs[i].clone())
                })
                .collect())
        });
        let ok: Vec<&(f64, bool, Image)> = out.iter().filter_map(|o| o.as_ref().ok()).collect();
        let n = ok.len();
        let agree = ok.iter().filter(|o| o.1).count();
        let above = ok.iter().filter(|o| def.sp.flags(o.0)).count();
        let mean = if n == 0 { 0.0 } else { ok.iter().map(|o| o.0).sum::<f64>() / n as f64 };
        steps.push(LatentAttackStep {
            row: LatentAttackRow {
                eps,
                n,
                n_errors: x_adv.len() - n,
                label_agreement: rate(agree, n),
                mean_distance: mean,
                above_threshold: rate(above, n),
            },
            distances: out.iter().map(|o| o.as_ref().ok().map(|o| o.0)).collect(),
            reconstructions: out.iter().filter_map(|o| o.as_ref().ok().map(|o| o.2.clone())).take(keep).collect(),
        });
    }
    Ok(LatentAttackReport { originals: x_adv.iter().take(keep).cloned().collect(), steps })
}

pub fn input_report_csv(r: &InputAttackReport) -> String {
    let mut s = String::from("# mixdefense-adaptive-input/1\n");
    s.push_str("eps,n,n_errors,detection_rate,lp_rate,sp_rate,target_rate,recon_follows_rate,mean_target_distance\n");
    for st in &r.steps {
        let w = &st.row;
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{},{}",
            w.eps,
            w.n,
            w.n_errors,
            w.detection_rate,
            w.lp_rate,
            w.sp_rate,
            w.target_rate,
            w.recon_follows_rate,
            w.mean_target_distance
        );
    }
    s
}

pub fn latent_report_csv(r: &LatentAttackReport) -> String {
    let mut s = String::from("# mixdefense-adaptive-latent/1\n");
    s.push_str("eps,n,n_errors,label_agreement,mean_distance,above_threshold\n");
    for st in &r.steps {
        let w = &st.row;
        let _ = writeln!(
            s,
            "{},{},{},{},{},{}",
            w.eps, w.n, w.n_errors, w.label_agreement, w.mean_distance, w.above_threshold
        );
    }
    s
}

/// Tiles images into a PNG; `rows[r][c]` lands at row `r`, column `c`.
/// Short rows are padded with black tiles up to `cols`.
pub fn write_grid(path: &Path, rows: &[Vec<Image>], cols: usize, shape: [usize; 3]) -> Result<()> {
    let [c, h, w] = shape;
    if c != 1 && c != 3 {
        return Err(Error::Precondition(format!("cannot render {c}-channel images")));
    }
    let (gw, gh) = ((cols * w).max(1) as u32, (rows.len() * h).max(1) as u32);
    let mut buf = vec![0u8; gw as usize * gh as usize * c];
    for (r, row) in rows.iter().enumerate() {
        for (col, im) in row.iter().take(cols).enumerate() {
            if im.shape() != shape {
                return Err(Error::Shape { expected: shape.to_vec(), got: im.shape().to_vec() });
            }
            for ch in 0..c {
                let plane = im.channel(ch);
                for y in 0..h {
                    for x in 0..w {
                        let px = ((plane[y * w + x].clamp(0.0, 1.0) * 255.0).round()) as u8;
                        let (gy, gx) = (r * h + y, col * w + x);
                        buf[(gy * gw as usize + gx) * c + ch] = px;
                    }
                }
            }
        }
    }
    let color = if c == 1 { image::ExtendedColorType::L8 } else { image::ExtendedColorType::Rgb8 };
    image::save_buffer(path, &buf, gw, gh, color).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FailureArchive {
    pub manifest: PathBuf,
    pub grids: Vec<PathBuf>,
    pub false_negatives: usize,
    pub false_positives: usize,
}

/// Writes the top-`k` false negatives (clean images rejected, largest SP
/// distance first, LP rejections after) and false positives (AEs accepted,
/// smallest distance first) as `2 x k` grids of input over reconstruction,
/// plus a manifest whose rows embed the verdict records verbatim.
pub fn export_failures(
    def: &MixDefense,
    verdicts: &[DetectorVerdict],
    images: &[Image],
    clean: &[bool],
    k: usize,
    dir: &Path,
) -> Result<FailureArchive> {
    if verdicts.len() != images.len() || images.len() != clean.len() {
        return Err(Error::Precondition("verdicts, images and ground truth must align".into()));
    }
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let key = |v: &DetectorVerdict| v.sp_distance.unwrap_or(f64::NEG_INFINITY);
    let mut fns: Vec<usize> = (0..verdicts.len()).filter(|&i| clean[i] && verdicts[i].decision.is_rejected()).collect();
    fns.sort_by(|&a, &b| key(&verdicts[b]).total_cmp(&key(&verdicts[a])).then(a.cmp(&b)));
    let mut fps: Vec<usize> = (0..verdicts.len()).filter(|&i| !clean[i] && !verdicts[i].decision.is_rejected()).collect();
    fps.sort_by(|&a, &b| key(&verdicts[a]).total_cmp(&key(&verdicts[b])).then(a.cmp(&b)));
    fns.truncate(k);
    fps.truncate(k);

    let shape = def.clf.input_shape();
    let mut manifest = format!("{FAILURE_SCHEMA}\nclass,rank,grid,{}\n", crate::pipeline::VERDICT_CSV_HEADER);
    let mut grids = Vec::new();
    for (name, sel) in [("false_negative", &fns), ("false_positive", &fps)] {
        if k == 0 {
            continue;
        }
        let file = format!("{name}s.png");
        let mut inputs = Vec::new();
        let mut recons = Vec::new();
        for (rank, &i) in sel.iter().enumerate() {
            let label = match verdicts[i].predicted_label {
                Some(l) => l,
                None => def.clf.predict(&images[i])?,
            };
            let r = def.cgan.encode_reconstruct_batch(&images[i].to_tensor(), &[label])?;
            inputs.push(images[i].clone());
            recons.push(unstack(&r, shape).remove(0));
            let _ = writeln!(manifest, "{name},{rank},{file},{}", verdicts[i].csv_row());
        }
        let path = dir.join(&file);
        write_grid(&path, &[inputs, recons], k, shape)?;
        grids.push(path);
    }
    let mpath = dir.join("manifest.csv");
    std::fs::write(&mpath, manifest).map_err(|e| Error::io(&mpath, e))?;
    Ok(FailureArchive { manifest: mpath, grids, false_negatives: fns.len(), false_positives: fps.len() })
}

/// Predicted labels of a batch, used to condition reconstructions.
pub fn predicted_labels(def: &MixDefense, xs: &[Image]) -> Result<Vec<usize>> {
    if xs.is_empty() {
        return Ok(Vec::new());
    }
    let z = def.clf.logits_batch(&stack(xs))?;
    Ok(z.data().chunks(def.clf.classes()).map(argmax).collect())
}
