//! Acceptance runner. Prints one PASS/FAIL line per criterion.
//!
//! Trained models are cached under the cargo target tmp dir, keyed by the
//! hash of their configuration, so only the first run pays for training.
//! A FAIL line does not fail the process; set MIXDEFENSE_ACCEPTANCE_STRICT=1
//! for that. Errors inside the library always exit non-zero.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

use mixdefense::attacks::{self, AttackSpec};
use mixdefense::checkpoint::{sha256_hex, Checkpoint};
use mixdefense::classifier::{train_classifier, Classifier, ClassifierArch, LossSpec, TargetClassifier};
use mixdefense::config::{RunConfig, MNIST_DIR_ENV};
use mixdefense::contranet::{kl_term, reconstruction_distance, train_cgan, Cgan, CganArch};
use mixdefense::data::{self, Image, LabeledDataset};
use mixdefense::evaluation::{
    acc_detector, acc_rc, adaptive_input_attack, adaptive_latent_attack, input_report_csv, latent_report_csv,
    layer_curves, linspace, predicted_labels, write_grid, BudgetGrid, ConfusionCounts, CurveMetric,
};
use mixdefense::metric::{calibrate_sp, train_metric, triplet_margin_loss, wrong_label, MetricNetwork, SpDetector};
use mixdefense::nn::{Fwd, Tape, Tensor};
use mixdefense::pipeline::{FinalDecision, Layers, MixDefense};
use mixdefense::saec::{add_uniform_noise, nl_score, pseudo_saturation, score_image, FeatureHistogram, SaecDetector};
use mixdefense::{Error, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{de::DeserializeOwned, Serialize};

const SEED: u64 = 1;

struct Line {
    pass: bool,
    detail: String,
}

fn line(pass: bool, detail: impl Into<String>) -> Line {
    Line { pass, detail: detail.into() }
}

#[derive(Default)]
struct Report {
    failed: usize,
    errors: usize,
}

impl Report {
    fn emit(&mut self, id: usize, name: &str, r: Result<Line>) {
        match r {
            Ok(l) => {
                self.failed += usize::from(!l.pass);
                println!("[{id:02}] {name}: {} {}", if l.pass { "PASS" } else { "FAIL" }, l.detail);
            }
            Err(e) => {
                self.failed += 1;
                if !matches!(e, Error::Precondition(ref m) if m.starts_with("skipped")) {
                    self.errors += 1;
                }
                println!("[{id:02}] {name}: FAIL error: {e}");
            }
        }
    }
}

fn skipped(why: &str) -> Error {
    Error::Precondition(format!("skipped: {why}"))
}

// ---------------------------------------------------------------- exact math

fn exact_math() -> Result<Line> {
    let t = Instant::now();
    let mut bad = Vec::new();
    let mut check = |name: &str, got: f64, want: f64, tol: f64| {
        if !((got - want).abs() <= tol) {
            bad.push(format!("{name}: {got} vs {want}"));
        }
    };
    for v in [0.0f32, 0.3, 1.0] {
        let x = Image::new(3, 1, 1, vec![v; 3])?;
        check("gray saturation", pseudo_saturation(&x, 8.0)?.values[0], 0.0, 1e-9);
    }
    let red = pseudo_saturation(&Image::new(3, 1, 1, vec![1.0, 0.0, 0.0])?, 8.0)?.values[0];
    let want = ((2.0f64 / 3.0).powi(8) + 2.0 * (1.0f64 / 3.0).powi(8)).powf(0.125);
    check("red saturation", red, want, 1e-9);
    check("red saturation (4 d.p.)", red, 0.6673, 5e-5);

    let mut counts = vec![0u64; 256];
    counts[3] = 1024;
    check("concentrated histogram", nl_score(&FeatureHistogram { counts, lo: -4.0, hi: 4.0 }), 4080.0, 0.0);
    check("uniform histogram", nl_score(&FeatureHistogram { counts: vec![7; 256], lo: -4.0, hi: 4.0 }), 0.0, 0.0);

    check("kl standard", kl_term(&[0.0; 4], &[1.0; 4])?, 0.0, 1e-9);
    check("kl unit shift", kl_term(&[1.0], &[1.0])?, 0.5, 1e-9);

    let (a, p, n) = ([0.0f32, 0.0], [3.0f32, 4.0], [0.0f32, 1.0]);
    check("triplet violated", triplet_margin_loss(&a, &p, &n, 1.0), 5.0, 1e-9);
    check("triplet satisfied", triplet_margin_loss(&a, &n, &p, 1.0), 0.0, 1e-9);
    check("triplet on margin", triplet_margin_loss(&a, &n, &[0.0, 2.0], 1.0), 0.0, 1e-9);

    let c = ConfusionCounts { tp: 450, tn: 480, fp: 50, fn_: 20 };
    check("detector accuracy", acc_detector(&c)?, 0.93, 1e-9);
    check("robust accuracy", acc_rc(1000, 800, 50)?, 0.85, 1e-9);

    let secs = t.elapsed().as_secs_f64();
    if secs >= 60.0 {
        bad.push(format!("took {secs:.1}s"));
    }
    Ok(line(bad.is_empty(), if bad.is_empty() { format!("13 cases exact, {secs:.3}s") } else { bad.join("; ") }))
}

// ----------------------------------------------------------- gradient checks

fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-8)
}

fn classifier_gradients(rng: &mut ChaCha8Rng) -> Result<f64> {
    let c: Classifier<f64> = TargetClassifier::init(ClassifierArch::lenet([1, 28, 28], 10), SEED).cast();
    let x: Vec<f64> = (0..784).map(|_| rng.random::<f64>()).collect();
    let y = 4;
    let t = |v: &[f64]| Tensor::new(vec![1, 1, 28, 28], v.to_vec());
    let (g, _) = c.input_gradient_batch(&t(&x), &[LossSpec::TrueLabel(y)])?;
    let ce = |v: &[f64]| -> Result<f64> {
        let z = c.logits_batch(&t(v))?.into_vec();
        let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        Ok(m + z.iter().map(|q| (q - m).exp()).sum::<f64>().ln() - z[y])
    };
    let mut worst = 0.0f64;
    for _ in 0..30 {
        let i = rng.random_range(0..784);
        let (mut up, mut dn) = (x.clone(), x.clone());
        up[i] += 1e-6;
        dn[i] -= 1e-6;
        let fd = (ce(&up)? - ce(&dn)?) / 2e-6;
        worst = worst.max(rel_err(g.data()[i], fd));
    }
    Ok(worst)
}

#[derive(Clone, Copy, Debug)]
enum Net {
    Encoder,
    Generator,
    Discriminator,
}

fn cgan_loss(g: &Cgan<f64>, x: &Tensor<f64>, y: &[usize], eps: &Tensor<f64>, net: Net) -> f64 {
    let tape = Tape::new();
    let (be, bg, bd) = (g.enc_store.bind(&tape), g.gen_store.bind(&tape), g.dis_store.bind(&tape));
    let (fe, fg, fd) = (Fwd::new(&be, true), Fwd::new(&bg, true), Fwd::new(&bd, true));
    let t = g.loss_terms(&fe, &fg, &fd, tape.constant(x.clone()), y, tape.constant(eps.clone()), 1.0);
    match net {
        Net::Encoder => t.encoder_loss(1.0),
        Net::Generator => t.generator_loss(1.0),
        Net::Discriminator => t.discriminator_loss(),
    }
    .value()
    .item()
}

fn cgan_gradients(rng: &mut ChaCha8Rng) -> Result<BTreeMap<String, f64>> {
    let g = Cgan::<f32>::init(CganArch::desk([1, 28, 28], 10, 8), SEED)?.cast::<f64>();
    let x = Tensor::new(vec![2, 1, 28, 28], (0..2 * 784).map(|_| rng.random::<f64>()).collect());
    let eps = Tensor::new(vec![2, 8], (0..16).map(|_| rng.random_range(-1.0..1.0)).collect());
    let y = [3, 8];
    let mut out = BTreeMap::new();
    for net in [Net::Encoder, Net::Generator, Net::Discriminator] {
        let tape = Tape::new();
        let (be, bg, bd) = (g.enc_store.bind(&tape), g.gen_store.bind(&tape), g.dis_store.bind(&tape));
        let (fe, fg, fd) = (Fwd::new(&be, true), Fwd::new(&bg, true), Fwd::new(&bd, true));
        let t = g.loss_terms(&fe, &fg, &fd, tape.constant(x.clone()), &y, tape.constant(eps.clone()), 1.0);
        let (loss, bound, store) = match net {
            Net::Encoder => (t.encoder_loss(1.0), &be, &g.enc_store),
            Net::Generator => (t.generator_loss(1.0), &bg, &g.gen_store),
            Net::Discriminator => (t.discriminator_loss(), &bd, &g.dis_store),
        };
        let grads = bound.grads(&tape.backward(loss));
        let ids = store.trainable_ids();
        let mut worst = 0.0f64;
        for _ in 0..12 {
            let id = ids[rng.random_range(0..ids.len())];
            let pos = store.ids().position(|i| i == id).expect("id from store");
            let j = rng.random_range(0..store.get(id).numel());
            let probe = |d: f64| {
                let mut gg = g.clone();
                let s = match net {
                    Net::Encoder => &mut gg.enc_store,
                    Net::Generator => &mut gg.gen_store,
                    Net::Discriminator => &mut gg.dis_store,
                };
                s.get_mut(id).data_mut()[j] += d;
                cgan_loss(&gg, &x, &y, &eps, net)
            };
            let fd = (probe(1e-6) - probe(-1e-6)) / 2e-6;
            let an = grads[pos].as_ref().map_or(0.0, |t| t.data()[j]);
            // parameters the loss does not reach have zero gradient either way
            if an.abs().max(fd.abs()) > 1e-9 {
                worst = worst.max(rel_err(an, fd));
            }
        }
        out.insert(format!("{net:?}").to_lowercase(), worst);
    }
    Ok(out)
}

fn gradient_checks() -> Result<Line> {
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(SEED);
    let clf = classifier_gradients(&mut rng)?;
    let cg = cgan_gradients(&mut rng)?;
    let secs = t.elapsed().as_secs_f64();
    let worst = cg.values().cloned().fold(clf, f64::max);
    let detail = format!(
        "max rel err classifier {clf:.2e}, {} ({secs:.1}s, limit 1e-3 / 300s)",
        cg.iter().map(|(k, v)| format!("{k} {v:.2e}")).collect::<Vec<_>>().join(", ")
    );
    Ok(line(worst < 1e-3 && secs < 300.0, detail))
}

// ------------------------------------------------------------------- caching

struct Cache {
    dir: PathBuf,
    timings: BTreeMap<String, f64>,
}

impl Cache {
    fn open() -> Result<Self> {
        let dir = Path::new(env!("CARGO_TARGET_TMPDIR")).join("mixdefense-acceptance");
        std::fs::create_dir_all(&dir).map_err(|e| Error::Io { path: dir.clone(), source: e })?;
        let timings = std::fs::read_to_string(dir.join("timings.json"))
            .ok()
            .and_then(|s| serde_json::from_str(&s).ok())
            .unwrap_or_default();
        Ok(Cache { dir, timings })
    }

    fn key(name: &str, parts: &impl Serialize) -> String {
        let text = serde_json::to_string(parts).expect("config serialises");
        format!("{name}-{}", &sha256_hex(text.as_bytes())[..12])
    }

    /// Loads `key` or trains it, returning the model and its training time.
    fn get<M>(
        &mut self,
        key: &str,
        train: impl FnOnce() -> Result<M>,
        save: impl Fn(&M) -> Result<Checkpoint>,
        load: impl Fn(&Checkpoint) -> Result<M>,
    ) -> Result<(M, f64, bool)> {
        let p = self.dir.join(format!("{key}.ckpt"));
        if let (true, Some(&secs)) = (p.exists(), self.timings.get(key)) {
            return Ok((load(&Checkpoint::load(&p)?)?, secs, true));
        }
        eprintln!("training {key}");
        let t = Instant::now();
        let m = train()?;
        let secs = t.elapsed().as_secs_f64();
        save(&m)?.save(&p)?;
        self.timings.insert(key.to_string(), secs);
        let tp = self.dir.join("timings.json");
        std::fs::write(&tp, serde_json::to_string_pretty(&self.timings).expect("map serialises"))
            .map_err(|e| Error::Io { path: tp, source: e })?;
        Ok((m, secs, false))
    }

    fn path(&self, key: &str) -> PathBuf {
        self.dir.join(format!("{key}.ckpt"))
    }
}

fn cached_note(cached: bool) -> &'static str {
    if cached {
        " (cached)"
    } else {
        ""
    }
}

fn json_of<T: Serialize + DeserializeOwned>(v: &T) -> serde_json::Value {
    serde_json::to_value(v).expect("serialisable")
}

// ------------------------------------------------------------------- helpers

fn images(ds: &LabeledDataset, idx: &[usize]) -> Vec<Image> {
    idx.iter().map(|&i| ds.image(i)).collect()
}

fn verdicts(def: &MixDefense, xs: &[Image], layers: Layers) -> Result<Vec<FinalDecision>> {
    def.verdict_stream_layers(xs, layers)
        .into_iter()
        .map(|v| v.map(|v| v.decision).map_err(|e| Error::Precondition(format!("sample {}: {}", e.id, e.message))))
        .collect()
}

/// Equal numbers of clean images and AEs; returns the tally.
fn balanced(clean_rejected: &[bool], ae_rejected: &[bool]) -> Result<ConfusionCounts> {
    let m = clean_rejected.len().min(ae_rejected.len());
    let clean: Vec<bool> = (0..2 * m).map(|i| i < m).collect();
    let rej: Vec<bool> = clean_rejected[..m].iter().chain(&ae_rejected[..m]).copied().collect();
    ConfusionCounts::tally(&clean, &rej)
}

fn pct(v: f64) -> String {
    format!("{:.2}%", 100.0 * v)
}

// ------------------------------------------------------------------ criteria

fn saec_large(saec: &SaecDetector, clf: &TargetClassifier, test: &LabeledDataset, calib_secs: f64) -> Result<Line> {
    let t = Instant::now();
    let flags: Vec<bool> =
        (0..test.len()).map(|i| saec.detect(&test.image(i)).map(|v| v.flagged)).collect::<Result<_>>()?;
    let fpr = flags.iter().filter(|&&f| f).count() as f64 / flags.len() as f64;
    let idx = data::sample_indices(test.len(), 2000, SEED)?;
    let (ci, ai) = idx.split_at(1000);
    let aes = attacks::attack_indices(clf, test, &AttackSpec::fgsm(0.3), ai)?;
    let ae_rej: Vec<bool> =
        aes.iter().filter(|a| a.success).map(|a| saec.detect(&a.perturbed).map(|v| v.flagged)).collect::<Result<_>>()?;
    let clean_rej: Vec<bool> = ci.iter().map(|&i| flags[i]).collect();
    let acc = acc_detector(&balanced(&clean_rej, &ae_rej)?)?;
    let secs = t.elapsed().as_secs_f64() + calib_secs;
    Ok(line(
        acc >= 0.95 && fpr <= 0.015 && secs < 600.0,
        format!(
            "Acc_Detector {} on {} AEs + as many clean (>= 95%), clean FPR {} (<= 1.5%), {secs:.0}s",
            pct(acc),
            ae_rej.len(),
            pct(fpr)
        ),
    ))
}

fn saec_monotone(saec: &SaecDetector, test: &LabeledDataset) -> Result<Line> {
    let idx = data::sample_indices(test.len(), 500, SEED + 1)?;
    let xs = images(test, &idx);
    let mean = |v: &[Image]| -> Result<f64> {
        Ok(v.iter().map(|x| score_image(x, &saec.params)).collect::<Result<Vec<_>>>()?.iter().sum::<f64>()
            / v.len() as f64)
    };
    let clean = mean(&xs)?;
    let mut rng = ChaCha8Rng::seed_from_u64(SEED);
    let mut gaps = Vec::new();
    for amp in [0.05, 0.1, 0.2, 0.3] {
        let noisy: Vec<Image> = xs.iter().map(|x| add_uniform_noise(x, amp, &mut rng)).collect();
        gaps.push((clean - mean(&noisy)?).abs());
    }
    let inv = gaps.windows(2).filter(|w| w[1] < w[0]).count();
    Ok(line(inv <= 1, format!("gaps {:?}, {inv} inversion(s) (<= 1)", gaps.iter().map(|g| g.round()).collect::<Vec<_>>())))
}

fn condition_sensitivity(cgan: &Cgan<f32>, test: &LabeledDataset, secs: f64, cached: bool) -> Result<Line> {
    let idx = data::sample_indices(test.len(), 1000, SEED + 2)?;
    let x = test.batch_tensor(&idx);
    let y = test.batch_labels(&idx);
    let mut rng = ChaCha8Rng::seed_from_u64(SEED);
    let wrong: Vec<usize> = y.iter().map(|&l| wrong_label(l, test.class_count, &mut rng)).collect();
    let rt = cgan.encode_reconstruct_batch(&x, &y)?;
    let rw = cgan.encode_reconstruct_batch(&x, &wrong)?;
    let [c, h, w] = test.shape();
    let d = c * h * w;
    let img = |t: &Tensor<f32>, i: usize| Image::new(c, h, w, t.data()[i * d..(i + 1) * d].to_vec());
    let mut wins = 0;
    for i in 0..idx.len() {
        let xi = img(&x, i)?;
        let lambda = cgan.meta.config.as_ref().map_or(1.0, |c| c.ssim_lambda);
        wins += usize::from(
            reconstruction_distance(&xi, &img(&rt, i)?, lambda)? < reconstruction_distance(&xi, &img(&rw, i)?, lambda)?,
        );
    }
    let s = wins as f64 / idx.len() as f64;
    Ok(line(
        s >= 0.85 && secs <= 7200.0,
        format!("{} of 1000 held-out images closer under the true label (>= 85%), trained in {secs:.0}s{}", pct(s), cached_note(cached)),
    ))
}

fn sp_small(def: &MixDefense, clf: &TargetClassifier, saec: &SaecDetector, test: &LabeledDataset) -> Result<Line> {
    const L2_EDGE: f64 = 2.0;
    let idx = data::sample_indices(test.len(), 800, SEED + 3)?;
    let (ci, ai) = idx.split_at(400);
    let mut spec = AttackSpec::cw(0.0, 5, 200);
    spec.learning_rate = 1e-2;
    spec.initial_c = 1e-1;
    let aes = attacks::attack_indices(clf, test, &spec, ai)?;
    let small: Vec<Image> =
        aes.iter().filter(|a| a.success && a.norms.l2 <= L2_EDGE).map(|a| a.perturbed.clone()).collect();
    let lp_rate = small.iter().filter(|x| saec.detect(x).map_or(false, |v| v.flagged)).count() as f64
        / small.len().max(1) as f64;
    let ae_rej: Vec<bool> = verdicts(def, &small, Layers::SpOnly)?.iter().map(|d| d.is_rejected()).collect();
    let clean_rej: Vec<bool> = verdicts(def, &images(test, ci), Layers::SpOnly)?.iter().map(|d| d.is_rejected()).collect();
    if ae_rej.is_empty() {
        return Ok(line(false, "no successful CW AEs below the L2 edge"));
    }
    let acc = acc_detector(&balanced(&clean_rej, &ae_rej)?)?;
    let fpr = clean_rej.iter().filter(|&&r| r).count() as f64 / clean_rej.len() as f64;
    Ok(line(
        acc >= 0.80,
        format!(
            "SP Acc_Detector {} on {} CW-L2 AEs with L2 <= {L2_EDGE} (>= 80%); SAEC flags {} of them; clean SP FPR {}",
            pct(acc),
            ae_rej.len(),
            pct(lp_rate),
            pct(fpr)
        ),
    ))
}

fn clean_preservation(def: &MixDefense, clf: &TargetClassifier, test: &LabeledDataset) -> Result<Line> {
    let all: Vec<usize> = (0..test.len()).collect();
    let xs = images(test, &all);
    let und = clf.accuracy(test)?;
    let decisions = verdicts(def, &xs, Layers::Both)?;
    let ok = decisions.iter().zip(&all).filter(|(d, &i)| **d == FinalDecision::Accepted(test.label(i))).count();
    let rate = ok as f64 / xs.len() as f64;
    let share = |d: FinalDecision| decisions.iter().filter(|&&x| x == d).count() as f64 / xs.len() as f64;
    Ok(line(
        rate >= und - 0.01,
        format!(
            "accepted-and-correct {} vs undefended {} (>= undefended - 1pp); rejected by LP {}, by SP {}",
            pct(rate),
            pct(und),
            pct(share(FinalDecision::RejectedLp)),
            pct(share(FinalDecision::RejectedSp))
        ),
    ))
}

fn complementarity(def: &MixDefense, test: &LabeledDataset) -> Result<Line> {
    let grid = BudgetGrid::budgets(&AttackSpec::fgsm(0.0), &linspace(0.03, 0.3, 10));
    let lc = layer_curves(def, &grid, test, 400, SEED + 4)?;
    let det = |c: &mixdefense::evaluation::Curve| c.metric(CurveMetric::AccDetector).map(|p| (p.budget, p.value)).collect::<Vec<_>>();
    let (b, l, s) = (det(&lc.both), det(&lc.lp_only), det(&lc.sp_only));
    if b.len() != 10 || l.len() != 10 || s.len() != 10 {
        return Ok(line(false, format!("expected 10 points per curve, got {} / {} / {}", b.len(), l.len(), s.len())));
    }
    let mut worst = f64::INFINITY;
    let mut cells = Vec::new();
    for i in 0..10 {
        let margin = b[i].1 - l[i].1.max(s[i].1);
        worst = worst.min(margin);
        cells.push(format!("{:.2}:{:.1}/{:.1}/{:.1}", b[i].0, 100.0 * b[i].1, 100.0 * l[i].1, 100.0 * s[i].1));
    }
    Ok(line(
        worst >= -0.02,
        format!("min(both - max(lp, sp)) {:+.2}pp (>= -2pp); eps:both/lp/sp {}", 100.0 * worst, cells.join(" ")),
    ))
}

fn adaptive(def: &MixDefense, clf: &TargetClassifier, sp: &SpDetector, cgan: &Cgan<f32>, test: &LabeledDataset, out: &Path) -> Result<Line> {
    let keep = 8;
    let idx = data::sample_indices(test.len(), 40, SEED + 5)?;
    let xs = images(test, &idx);
    let mut rng = ChaCha8Rng::seed_from_u64(SEED);
    let targets: Vec<usize> = idx.iter().map(|&i| wrong_label(test.label(i), test.class_count, &mut rng)).collect();
    let input = adaptive_input_attack(def, &xs, &targets, &[0.0, 0.01, 0.03, 0.05, 0.1], keep)?;
    let plain = def.verdict_stream(&xs);
    let input_ok = input.steps[0].verdicts == plain;
    write_file(&out.join("adaptive-input.csv"), &input_report_csv(&input))?;
    let mut rows = vec![input.originals.clone()];
    for s in &input.steps {
        rows.push(s.adversarial.clone());
        rows.push(s.reconstructions.clone());
    }
    write_grid(&out.join("adaptive-input.png"), &rows, keep, test.shape())?;

    let fgsm = attacks::attack_indices(clf, test, &AttackSpec::fgsm(0.15), &idx)?;
    let adv: Vec<Image> = fgsm.iter().filter(|a| a.success).map(|a| a.perturbed.clone()).collect();
    let labels = predicted_labels(def, &adv)?;
    let latent = adaptive_latent_attack(def, &adv, &labels, &[0.0, 0.5, 1.0, 2.0], keep)?;
    let mut latent_ok = true;
    for (i, d) in latent.steps[0].distances.iter().enumerate() {
        latent_ok &= *d == Some(sp.detect(cgan, &adv[i], labels[i])?.distance);
    }
    write_file(&out.join("adaptive-latent.csv"), &latent_report_csv(&latent))?;
    let mut rows = vec![latent.originals.clone()];
    rows.extend(latent.steps.iter().map(|s| s.reconstructions.clone()));
    write_grid(&out.join("adaptive-latent.png"), &rows, keep, test.shape())?;
    Ok(line(
        input_ok && latent_ok,
        format!(
            "eps=0 identical to the plain pipeline: input {input_ok}, latent {latent_ok}; {} input and {} latent steps; reports in {}",
            input.steps.len(),
            latent.steps.len(),
            out.display()
        ),
    ))
}

fn write_file(p: &Path, text: &str) -> Result<()> {
    std::fs::write(p, text).map_err(|e| Error::Io { path: p.to_path_buf(), source: e })
}

fn csv_files(dir: &Path) -> Result<BTreeMap<String, Vec<u8>>> {
    let mut m = BTreeMap::new();
    for e in std::fs::read_dir(dir).map_err(|e| Error::Io { path: dir.to_path_buf(), source: e })? {
        let p = e.map_err(|e| Error::Io { path: dir.to_path_buf(), source: e })?.path();
        if p.extension().is_some_and(|x| x == "csv") {
            let bytes = std::fs::read(&p).map_err(|e| Error::Io { path: p.clone(), source: e })?;
            m.insert(p.file_name().expect("file").to_string_lossy().into_owned(), bytes);
        }
    }
    Ok(m)
}

fn determinism(models: &BTreeMap<&str, PathBuf>, data_dir: &Path, work: &Path) -> Result<Line> {
    let _ = std::fs::remove_dir_all(work);
    let cfg = work.join("run.toml");
    std::fs::create_dir_all(work).map_err(|e| Error::Io { path: work.to_path_buf(), source: e })?;
    write_file(&cfg, &format!("[run]\nseed = {SEED}\n\n[attack]\nmethod = \"fgsm\"\nnorm = \"linf\"\neps = \"0.1:0.3:3\"\nn_per_point = 200\n\n[adaptive]\nn = 10\ninput_eps = [0.0, 0.1]\nlatent_eps = [0.0, 0.5]\nkeep = 4\n"))?;
    let mut failures = Vec::new();
    let mut compared = 0;
    for sub in ["saec-score", "evaluate", "layer-curves", "adaptive-case-study"] {
        let (a, b) = (work.join(format!("{sub}-a")), work.join(format!("{sub}-b")));
        let invoke = |config: &Path, out: &Path| -> Result<()> {
            let mut cmd = Command::new(env!("CARGO_BIN_EXE_mixdefense"));
            cmd.arg(sub).arg("--config").arg(config).arg("--out").arg(out).arg("--data-dir").arg(data_dir);
            for (flag, p) in models {
                if *flag != "metric" {
                    cmd.arg(format!("--{flag}")).arg(p);
                }
            }
            let o = cmd.output().map_err(|e| Error::Io { path: PathBuf::from("mixdefense"), source: e })?;
            if !o.status.success() {
                return Err(Error::Precondition(format!("{sub} failed: {}", String::from_utf8_lossy(&o.stderr).trim())));
            }
            Ok(())
        };
        invoke(&cfg, &a)?;
        invoke(&a.join(format!("manifest-{sub}.json")), &b)?;
        let (fa, fb) = (csv_files(&a)?, csv_files(&b)?);
        if fa.is_empty() || fa != fb {
            failures.push(sub);
        }
        compared += fa.len();
    }
    Ok(line(
        failures.is_empty(),
        if failures.is_empty() {
            format!("{compared} CSV files byte-identical after replaying each manifest")
        } else {
            format!("CSV mismatch after replay: {}", failures.join(", "))
        },
    ))
}

// ---------------------------------------------------------------------- main

struct Trained {
    clf: TargetClassifier,
    clf_secs: f64,
    clf_cached: bool,
    saec: SaecDetector,
    saec_secs: f64,
    cgan: Option<(Cgan<f32>, f64, bool)>,
    sp: Option<SpDetector>,
    paths: BTreeMap<&'static str, PathBuf>,
}

fn train_all(cache: &mut Cache, cfg: &RunConfig, sets: &(LabeledDataset, LabeledDataset, LabeledDataset)) -> Result<Trained> {
    let (train, val, test) = sets;
    let ck = Cache::key("classifier", &(json_of(&cfg.classifier), SEED));
    let (clf, clf_secs, clf_cached) = cache.get(
        &ck,
        || train_classifier(train, Some(test), &cfg.classifier, SEED, |m| eprintln!("{m}")),
        |m| m.to_checkpoint(),
        TargetClassifier::from_checkpoint,
    )?;
    let t = Instant::now();
    let s = &cfg.saec;
    let saec = SaecDetector::calibrate(val, s.params(), &s.noise, s.fpr, SEED)?;
    let saec_secs = t.elapsed().as_secs_f64();
    let saec_path = cache.dir.join("saec.json");
    saec.save(&saec_path)?;
    let mut paths = BTreeMap::from([("classifier", cache.path(&ck)), ("saec", saec_path)]);

    let gk = Cache::key("cgan", &(json_of(&cfg.cgan), SEED));
    let cgan = cache.get(
        &gk,
        || {
            let every = (cfg.cgan.iterations / 20).max(1);
            train_cgan(train, &cfg.cgan, SEED, |l| {
                if l.iteration % every == 0 {
                    eprintln!("cgan {} E {:.4} G {:.4} D {:.4}", l.iteration, l.encoder, l.generator, l.discriminator);
                }
            })
            .map_err(|a| a.error)
        },
        |m| m.to_checkpoint(),
        Cgan::from_checkpoint,
    );
    let cgan = match cgan {
        Ok(c) => Some(c),
        Err(e) => {
            eprintln!("cgan training failed: {e}");
            None
        }
    };
    let mut sp = None;
    if let Some((g, _, _)) = &cgan {
        paths.insert("cgan", cache.path(&gk));
        let mk = Cache::key("metric", &(json_of(&cfg.metric), SEED, &gk));
        let (m, _, _) = cache.get(
            &mk,
            || train_metric(g, train, &cfg.metric, SEED, |_, _| {}),
            |m| m.to_checkpoint(),
            MetricNetwork::from_checkpoint,
        )?;
        paths.insert("metric", cache.path(&mk));
        let d = calibrate_sp(m, g, &clf, val, cfg.sp.fpr)?;
        let sp_path = cache.dir.join("sp.ckpt");
        d.to_checkpoint()?.save(&sp_path)?;
        paths.insert("sp", sp_path);
        sp = Some(d);
    }
    Ok(Trained { clf, clf_secs, clf_cached, saec, saec_secs, cgan, sp, paths })
}

fn main() {
    let mut report = Report::default();
    report.emit(1, "exact-math oracles", exact_math());
    report.emit(2, "gradient checks", gradient_checks());

    let data_dir = std::env::var_os(MNIST_DIR_ENV)
        .map(PathBuf::from)
        .unwrap_or_else(|| Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/mnist"));
    let mut cfg = RunConfig::default();
    cfg.data.dir = Some(data_dir.clone());
    cfg.run.seed = SEED;

    let sets = cfg.load_data();
    let trained = match (&sets, Cache::open()) {
        (Ok(s), Ok(mut cache)) => train_all(&mut cache, &cfg, s).map_err(|e| e.to_string()),
        (Err(e), _) => Err(format!("MNIST unavailable at {}: {e}", data_dir.display())),
        (_, Err(e)) => Err(e.to_string()),
    };
    if let Err(e) = &trained {
        eprintln!("{e}");
        report.errors += usize::from(sets.is_ok());
    }
    let t = trained.as_ref().ok();
    let test = sets.as_ref().ok().map(|s| &s.2);
    let need = |what: &str| skipped(&format!("{what} unavailable"));

    report.emit(
        3,
        "classifier baseline",
        t.zip(test).ok_or_else(|| need("classifier")).and_then(|(t, test)| {
            let acc = t.clf.accuracy(test)?;
            Ok(line(
                acc >= 0.98 && t.clf_secs <= 600.0,
                format!("test accuracy {} (>= 98%), trained in {:.0}s{}", pct(acc), t.clf_secs, cached_note(t.clf_cached)),
            ))
        }),
    );
    report.emit(
        4,
        "SAEC large-perturbation detection",
        t.zip(test).ok_or_else(|| need("classifier")).and_then(|(t, test)| saec_large(&t.saec, &t.clf, test, t.saec_secs)),
    );
    report.emit(
        5,
        "SAEC monotone separation",
        t.zip(test).ok_or_else(|| need("SAEC")).and_then(|(t, test)| saec_monotone(&t.saec, test)),
    );
    let cg = t.and_then(|t| t.cgan.as_ref());
    report.emit(
        6,
        "cGAN condition sensitivity",
        cg.zip(test).ok_or_else(|| need("cGAN")).and_then(|((g, secs, cached), test)| condition_sensitivity(g, test, *secs, *cached)),
    );

    let full = t.and_then(|t| Some((t, t.cgan.as_ref()?, t.sp.as_ref()?)));
    let def = full.map(|(t, (g, _, _), sp)| MixDefense::new(&t.saec, &t.clf, sp, g));
    let def = match def {
        Some(Ok(d)) => Some(d),
        Some(Err(e)) => {
            eprintln!("pipeline: {e}");
            None
        }
        None => None,
    };
    let pipe = def.as_ref().zip(full).zip(test);
    report.emit(
        7,
        "SP small-perturbation detection",
        pipe.ok_or_else(|| need("pipeline")).and_then(|((d, (t, _, _)), test)| sp_small(d, &t.clf, &t.saec, test)),
    );
    report.emit(
        8,
        "clean accuracy preservation",
        pipe.ok_or_else(|| need("pipeline")).and_then(|((d, (t, _, _)), test)| clean_preservation(d, &t.clf, test)),
    );
    report.emit(
        9,
        "layer complementarity",
        pipe.ok_or_else(|| need("pipeline")).and_then(|((d, _), test)| complementarity(d, test)),
    );
    let out = Path::new(env!("CARGO_TARGET_TMPDIR")).join("mixdefense-acceptance").join("reports");
    report.emit(
        10,
        "adaptive case studies",
        pipe.ok_or_else(|| need("pipeline")).and_then(|((d, (t, (g, _, _), sp)), test)| {
            std::fs::create_dir_all(&out).map_err(|e| Error::Io { path: out.clone(), source: e })?;
            adaptive(d, &t.clf, sp, g, test, &out)
        }),
    );
    report.emit(
        11,
        "CLI determinism",
        full.ok_or_else(|| need("pipeline")).and_then(|(t, _, _)| {
            determinism(&t.paths, &data_dir, &Path::new(env!("CARGO_TARGET_TMPDIR")).join("mixdefense-acceptance").join("cli"))
        }),
    );

    println!("acceptance: {} of 11 passed", 11 - report.failed);
    let strict = std::env::var("MIXDEFENSE_ACCEPTANCE_STRICT").is_ok_and(|v| v == "1");
    if report.errors > 0 || (strict && report.failed > 0) {
        std::process::exit(1);
    }
}
