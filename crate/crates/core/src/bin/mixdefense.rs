use std::collections::BTreeMap;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use serde_json::json;

use mixdefense::attacks::{self, AttackSpec, Method};
use mixdefense::checkpoint::{sha256_file, Checkpoint};
use mixdefense::classifier::{train_classifier, TargetClassifier};
use mixdefense::config::RunConfig;
use mixdefense::contranet::{train_cgan, Cgan};
use mixdefense::data::{self, Image};
use mixdefense::evaluation::{self as ev, BudgetGrid, CurveMetric, CurvePoint};
use mixdefense::metric::{self, calibrate_sp, train_metric, MetricNetwork, SpDetector};
use mixdefense::pipeline::{self, Layers, MixDefense};
use mixdefense::saec::{self, SaecDetector};
use mixdefense::{Error, Result};

#[derive(Parser)]
#[command(name = "mixdefense", version, about = "Two-layer adversarial example detection")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args, Clone, Default)]
struct Common {
    /// TOML run config, or a previous run's manifest (.json)
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory [env: MIXDEFENSE_OUT, default: runs]
    #[arg(long)]
    out: Option<PathBuf>,
    /// mnist or cifar10
    #[arg(long)]
    dataset: Option<String>,
    #[arg(long)]
    data_dir: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Worker thread cap (0 = all cores)
    #[arg(long)]
    jobs: Option<usize>,
}

#[derive(Args, Clone, Default)]
struct Models {
    /// Defaults to <out>/classifier.ckpt
    #[arg(long)]
    classifier: Option<PathBuf>,
    /// Defaults to <out>/cgan.ckpt
    #[arg(long)]
    cgan: Option<PathBuf>,
    /// Defaults to <out>/metric.ckpt
    #[arg(long)]
    metric: Option<PathBuf>,
    /// Defaults to <out>/saec.json
    #[arg(long)]
    saec: Option<PathBuf>,
    /// Defaults to <out>/sp.ckpt
    #[arg(long)]
    sp: Option<PathBuf>,
}

#[derive(Args, Clone, Default)]
struct AttackArgs {
    /// fgsm, fgm, bim, cw or deepfool
    #[arg(long)]
    attack: Option<String>,
    /// l2 or linf
    #[arg(long)]
    norm: Option<String>,
    /// start:stop:count (budgets, or achieved-norm bin edges for cw/deepfool)
    #[arg(long)]
    eps: Option<String>,
    #[arg(long)]
    n_per_point: Option<usize>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train the target classifier
    TrainClassifier {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Train the conditional reconstruction model
    TrainContranet {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        iterations: Option<usize>,
    },
    /// Train the triplet metric network on a trained cGAN
    TrainMetric {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        models: Models,
        #[arg(long)]
        iterations: Option<usize>,
    },
    /// Calibrate the noise-statistics detector
    CalibrateSaec {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        fpr: Option<f64>,
    },
    /// Calibrate the reconstruction-distance threshold
    CalibrateSp {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        models: Models,
        #[arg(long)]
        fpr: Option<f64>,
    },
    /// Score test images with the noise-statistics detector
    SaecScore {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        models: Models,
        #[arg(long, default_value_t = 1000)]
        n: usize,
    },
    /// Generate and archive attack sets
    Attack {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        models: Models,
        #[command(flatten)]
        attack: AttackArgs,
        #[arg(long)]
        n: Option<usize>,
    },
    /// Detection and robust accuracy curves for the full pipeline
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        models: Models,
        #[command(flatten)]
        attack: AttackArgs,
        /// both, lp or sp
        #[arg(long, default_value = "both")]
        layers: String,
    },
    /// Curves for each layer alone and for both
    LayerCurves {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        models: Models,
        #[command(flatten)]
        attack: AttackArgs,
    },
    /// Adaptive attacks on the defense inputs and on the latent code
    AdaptiveCaseStudy {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        models: Models,
        #[arg(long)]
        n: Option<usize>,
    },
    /// Image grids of false negatives and false positives
    ExportFailures {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        models: Models,
        #[arg(long)]
        k: Option<usize>,
        /// FGSM budget of the AE half
        #[arg(long)]
        eps: Option<f64>,
    },
    /// Render curve CSVs as an SVG chart
    Plot {
        #[command(flatten)]
        common: Common,
        /// Curve CSV files
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
        #[arg(long, default_value = "acc_detector")]
        metric: String,
        /// Defaults to <out>/plot.svg
        #[arg(long)]
        output: Option<PathBuf>,
    },
}

/// Resolved configuration plus the bookkeeping for the run manifest.
struct Run {
    cfg: RunConfig,
    out: PathBuf,
    command: &'static str,
    inputs: BTreeMap<String, PathBuf>,
    outputs: BTreeMap<String, PathBuf>,
}

impl Run {
    fn new(command: &'static str, c: &Common) -> Result<Self> {
        let mut cfg = match &c.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        if let Some(v) = &c.out {
            cfg.run.out = Some(v.clone());
        }
        if let Some(v) = &c.dataset {
            cfg.data.dataset = v.clone();
        }
        if let Some(v) = &c.data_dir {
            cfg.data.dir = Some(v.clone());
        }
        if let Some(v) = c.seed {
            cfg.run.seed = v;
        }
        if let Some(v) = c.jobs {
            cfg.run.jobs = v;
        }
        if cfg.run.jobs > 0 {
            // only fails if a pool already exists, which cannot happen here
            let _ = rayon::ThreadPoolBuilder::new().num_threads(cfg.run.jobs).build_global();
        }
        let out = cfg.out_dir();
        std::fs::create_dir_all(&out).map_err(|e| Error::Io { path: out.clone(), source: e })?;
        Ok(Run { cfg, out, command, inputs: BTreeMap::new(), outputs: BTreeMap::new() })
    }

    fn path(&self, given: &Option<PathBuf>, default: &str) -> PathBuf {
        given.clone().unwrap_or_else(|| self.out.join(default))
    }

    fn input(&mut self, name: &str, path: &Path) {
        self.inputs.insert(name.into(), path.to_path_buf());
    }

    fn output(&mut self, name: &str, path: &Path) {
        self.outputs.insert(name.into(), path.to_path_buf());
    }

    fn write(&mut self, name: &str, file: &str, text: &str) -> Result<PathBuf> {
        let p = self.out.join(file);
        std::fs::write(&p, text).map_err(|e| Error::Io { path: p.clone(), source: e })?;
        self.output(name, &p);
        Ok(p)
    }

    fn checkpoint(&mut self, name: &str, file: &str, c: &Checkpoint) -> Result<()> {
        let p = self.out.join(file);
        c.save(&p)?;
        self.output(name, &p);
        Ok(())
    }

    fn load_ckpt(&mut self, name: &str, path: PathBuf) -> Result<Checkpoint> {
        let c = Checkpoint::load(&path)?;
        self.input(name, &path);
        Ok(c)
    }

    fn classifier(&mut self, m: &Models) -> Result<TargetClassifier> {
        let p = self.path(&m.classifier, "classifier.ckpt");
        TargetClassifier::from_checkpoint(&self.load_ckpt("classifier", p)?)
    }

    fn cgan(&mut self, m: &Models) -> Result<Cgan<f32>> {
        let p = self.path(&m.cgan, "cgan.ckpt");
        Cgan::from_checkpoint(&self.load_ckpt("cgan", p)?)
    }

    fn metric(&mut self, m: &Models) -> Result<MetricNetwork<f32>> {
        let p = self.path(&m.metric, "metric.ckpt");
        MetricNetwork::from_checkpoint(&self.load_ckpt("metric", p)?)
    }

    fn saec(&mut self, m: &Models) -> Result<SaecDetector> {
        let p = self.path(&m.saec, "saec.json");
        let d = SaecDetector::load(&p)?;
        self.input("saec", &p);
        Ok(d)
    }

    fn sp(&mut self, m: &Models) -> Result<SpDetector> {
        let p = self.path(&m.sp, "sp.ckpt");
        SpDetector::from_checkpoint(&self.load_ckpt("sp", p)?)
    }

    fn components(&mut self, m: &Models) -> Result<Components> {
        Ok(Components { clf: self.classifier(m)?, cgan: self.cgan(m)?, saec: self.saec(m)?, sp: self.sp(m)? })
    }

    fn apply_attack(&mut self, a: &AttackArgs) {
        let s = &mut self.cfg.attack;
        if let Some(v) = &a.attack {
            s.method = v.clone();
        }
        if let Some(v) = &a.norm {
            s.norm = v.clone();
        }
        if let Some(v) = &a.eps {
            s.eps = v.clone();
        }
        if let Some(v) = a.n_per_point {
            s.n_per_point = v;
        }
    }

    fn grid(&self) -> Result<BudgetGrid> {
        let eps = self.cfg.attack.grid()?;
        let method: Method = self.cfg.attack.method.parse()?;
        Ok(match method {
            Method::Cw | Method::Deepfool => BudgetGrid::Binned { spec: self.cfg.attack.spec(None)?, edges: eps },
            _ => BudgetGrid::Budgets(eps.iter().map(|&e| self.cfg.attack.spec(Some(e))).collect::<Result<_>>()?),
        })
    }

    /// Writes `manifest-<command>.json`: resolved config, seed and hashes of
    /// every checkpoint read and artifact written.
    fn finish(self, summary: serde_json::Value) -> Result<()> {
        let hashes = |m: &BTreeMap<String, PathBuf>| -> Result<serde_json::Value> {
            let mut o = serde_json::Map::new();
            for (k, p) in m {
                o.insert(k.clone(), json!({ "path": p, "sha256": sha256_file(p)? }));
            }
            Ok(serde_json::Value::Object(o))
        };
        let manifest = json!({
            "tool": "mixdefense",
            "version": env!("CARGO_PKG_VERSION"),
            "command": self.command,
            "seed": self.cfg.run.seed,
            "config": self.cfg,
            "inputs": hashes(&self.inputs)?,
            "outputs": hashes(&self.outputs)?,
            "summary": summary,
        });
        let p = self.out.join(format!("manifest-{}.json", self.command));
        let text = serde_json::to_string_pretty(&manifest).expect("manifest serialises");
        std::fs::write(&p, text + "\n").map_err(|e| Error::Io { path: p.clone(), source: e })?;
        println!("{}", json!({ "command": self.command, "manifest": p, "summary": summary }));
        Ok(())
    }
}

struct Components {
    clf: TargetClassifier,
    cgan: Cgan<f32>,
    saec: SaecDetector,
    sp: SpDetector,
}

impl Components {
    fn defense(&self) -> Result<MixDefense<'_>> {
        MixDefense::new(&self.saec, &self.clf, &self.sp, &self.cgan)
    }
}

fn log(msg: &str) {
    eprintln!("{msg}");
}

fn curve_text(points: &[CurvePoint]) -> String {
    let mut buf = Vec::new();
    ev::write_curve_csv(&mut buf, points).expect("writing to memory");
    String::from_utf8(buf).expect("ascii")
}

fn curve_summary(c: &ev::Curve) -> serde_json::Value {
    let pick = |m: CurveMetric| c.metric(m).map(|p| json!([p.budget, p.value, p.censored])).collect::<Vec<_>>();
    json!({
        "acc_detector": pick(CurveMetric::AccDetector),
        "acc_rc": pick(CurveMetric::AccRc),
        "acc_undefended": pick(CurveMetric::AccUndefended),
        "failures": c.failures.len(),
    })
}

fn run(cmd: Cmd) -> Result<()> {
    match cmd {
        Cmd::TrainClassifier { common, epochs } => {
            let mut r = Run::new("train-classifier", &common)?;
            if let Some(e) = epochs {
                r.cfg.classifier.epochs = e;
            }
            let (train, _, test) = r.cfg.load_data()?;
            let clf = train_classifier(&train, Some(&test), &r.cfg.classifier, r.cfg.run.seed, log)?;
            r.checkpoint("classifier", "classifier.ckpt", &clf.to_checkpoint()?)?;
            let acc = clf.meta.test_accuracy;
            r.finish(json!({ "test_accuracy": acc }))
        }
        Cmd::TrainContranet { common, iterations } => {
            let mut r = Run::new("train-contranet", &common)?;
            if let Some(i) = iterations {
                r.cfg.cgan.iterations = i;
            }
            let (train, _, _) = r.cfg.load_data()?;
            let every = (r.cfg.cgan.iterations / 20).max(1);
            let cgan = train_cgan(&train, &r.cfg.cgan, r.cfg.run.seed, |l| {
                if l.iteration % every == 0 {
                    log(&format!(
                        "cgan iteration {} encoder {:.4} generator {:.4} discriminator {:.4}",
                        l.iteration, l.encoder, l.generator, l.discriminator
                    ))
                }
            });
            let cgan = match cgan {
                Ok(c) => c,
                Err(abort) => {
                    if let Some(m) = &abort.last_good {
                        r.checkpoint("cgan_last_good", "cgan.last-good.ckpt", &m.to_checkpoint()?)?;
                    }
                    return Err(abort.error);
                }
            };
            r.checkpoint("cgan", "cgan.ckpt", &cgan.to_checkpoint()?)?;
            let last = cgan.meta.history.last().cloned();
            let it = r.cfg.cgan.iterations;
            r.finish(json!({ "iterations": it, "last": last }))
        }
        Cmd::TrainMetric { common, models, iterations } => {
            let mut r = Run::new("train-metric", &common)?;
            if let Some(i) = iterations {
                r.cfg.metric.iterations = i;
            }
            let cgan = r.cgan(&models)?;
            let (train, _, _) = r.cfg.load_data()?;
            let every = (r.cfg.metric.iterations / 20).max(1);
            let m = train_metric(&cgan, &train, &r.cfg.metric, r.cfg.run.seed, |i, l| {
                if i % every == 0 {
                    log(&format!("metric iteration {i} loss {l:.4}"))
                }
            })?;
            r.checkpoint("metric", "metric.ckpt", &m.to_checkpoint()?)?;
            let last = m.history.last().copied();
            let it = r.cfg.metric.iterations;
            r.finish(json!({ "iterations": it, "last_loss": last }))
        }
        Cmd::CalibrateSaec { common, fpr } => {
            let mut r = Run::new("calibrate-saec", &common)?;
            if let Some(f) = fpr {
                r.cfg.saec.fpr = f;
            }
            let (_, val, _) = r.cfg.load_data()?;
            let s = &r.cfg.saec;
            let d = SaecDetector::calibrate(&val, s.params(), &s.noise, s.fpr, r.cfg.run.seed)?;
            let p = r.out.join("saec.json");
            d.save(&p)?;
            r.output("saec", &p);
            r.finish(json!({ "threshold": d.threshold, "direction": d.direction }))
        }
        Cmd::CalibrateSp { common, models, fpr } => {
            let mut r = Run::new("calibrate-sp", &common)?;
            if let Some(f) = fpr {
                r.cfg.sp.fpr = f;
            }
            let (clf, cgan, m) = (r.classifier(&models)?, r.cgan(&models)?, r.metric(&models)?);
            let (_, val, _) = r.cfg.load_data()?;
            let sp = calibrate_sp(m, &cgan, &clf, &val, r.cfg.sp.fpr)?;
            r.checkpoint("sp", "sp.ckpt", &sp.to_checkpoint()?)?;
            r.finish(json!({ "threshold": sp.threshold, "mean_clean_distance": sp.calibration.mean_clean_distance }))
        }
        Cmd::SaecScore { common, models, n } => {
            let mut r = Run::new("saec-score", &common)?;
            let d = r.saec(&models)?;
            let (_, _, test) = r.cfg.load_data()?;
            let idx = data::sample_indices(test.len(), n.min(test.len()), r.cfg.run.seed)?;
            let mut text = String::from("# mixdefense-saec-scores/1\nindex,label,score,flagged\n");
            let mut flagged = 0;
            for &i in &idx {
                let s = saec::score_image(&test.image(i), &d.params)?;
                let f = d.flags(s);
                flagged += f as usize;
                text.push_str(&format!("{i},{},{s},{f}\n", test.label(i)));
            }
            r.write("scores", "saec-scores.csv", &text)?;
            r.finish(json!({ "n": idx.len(), "flag_rate": flagged as f64 / idx.len().max(1) as f64 }))
        }
        Cmd::Attack { common, models, attack, n } => {
            let mut r = Run::new("attack", &common)?;
            r.apply_attack(&attack);
            if let Some(n) = n {
                r.cfg.attack.n = n;
            }
            let clf = r.classifier(&models)?;
            let (_, _, test) = r.cfg.load_data()?;
            let method: Method = r.cfg.attack.method.parse()?;
            let budgets: Vec<Option<f64>> = match method {
                Method::Cw | Method::Deepfool => vec![None],
                _ => r.cfg.attack.grid()?.into_iter().map(Some).collect(),
            };
            let mut text = String::from("# mixdefense-attack/1\nbudget,n,success_rate,mean_l2,mean_linf,file\n");
            for b in budgets {
                let spec = r.cfg.attack.spec(b)?;
                let set = attacks::generate_attack_set(&clf, &test, &spec, r.cfg.attack.n.min(test.len()), r.cfg.run.seed)?;
                let tag = b.map(|e| format!("{e}")).unwrap_or_else(|| "min".into());
                let file = format!("attack-{}-{}-{tag}.ckpt", spec.method, spec.norm);
                let p = r.out.join(&file);
                attacks::save_attack_set(&p, &set, &spec, &json!({ "seed": r.cfg.run.seed, "dataset": test.name }))?;
                r.output(&file, &p);
                let k = set.len().max(1) as f64;
                let succ = set.iter().filter(|a| a.success).count() as f64 / k;
                let l2 = set.iter().map(|a| a.norms.l2).sum::<f64>() / k;
                let li = set.iter().map(|a| a.norms.linf).sum::<f64>() / k;
                text.push_str(&format!("{tag},{},{succ},{l2},{li},{file}\n", set.len()));
            }
            let p = r.write("summary", "attack-summary.csv", &text)?;
            r.finish(json!({ "summary": p }))
        }
        Cmd::Evaluate { common, models, attack, layers } => {
            let mut r = Run::new("evaluate", &common)?;
            r.apply_attack(&attack);
            let layers = match layers.as_str() {
                "both" => Layers::Both,
                "lp" => Layers::LpOnly,
                "sp" => Layers::SpOnly,
                other => return Err(Error::Config(format!("unknown layers {other} (expected both, lp or sp)"))),
            };
            let c = r.components(&models)?;
            let (_, _, test) = r.cfg.load_data()?;
            let grid = r.grid()?;
            let curve = ev::sweep_curve(&c.defense()?, layers, &grid, &test, r.cfg.attack.n_per_point, r.cfg.run.seed)?;
            let a = &r.cfg.attack;
            let file = format!("curve-{}-{}.csv", a.method, a.norm);
            r.write("curve", &file, &curve_text(&curve.points))?;
            r.finish(curve_summary(&curve))
        }
        Cmd::LayerCurves { common, models, attack } => {
            let mut r = Run::new("layer-curves", &common)?;
            r.apply_attack(&attack);
            let c = r.components(&models)?;
            let (_, _, test) = r.cfg.load_data()?;
            let grid = r.grid()?;
            let lc = ev::layer_curves(&c.defense()?, &grid, &test, r.cfg.attack.n_per_point, r.cfg.run.seed)?;
            let (m, n) = (r.cfg.attack.method.clone(), r.cfg.attack.norm.clone());
            for (tag, curve) in [("both", &lc.both), ("lp", &lc.lp_only), ("sp", &lc.sp_only)] {
                r.write(&format!("curve_{tag}"), &format!("curve-{m}-{n}-{tag}.csv"), &curve_text(&curve.points))?;
            }
            r.finish(json!({
                "both": curve_summary(&lc.both),
                "lp": curve_summary(&lc.lp_only),
                "sp": curve_summary(&lc.sp_only),
            }))
        }
        Cmd::AdaptiveCaseStudy { common, models, n } => {
            let mut r = Run::new("adaptive-case-study", &common)?;
            if let Some(n) = n {
                r.cfg.adaptive.n = n;
            }
            let c = r.components(&models)?;
            let def = c.defense()?;
            let (_, _, test) = r.cfg.load_data()?;
            let a = r.cfg.adaptive.clone();
            let idx = data::sample_indices(test.len(), a.n.min(test.len()), r.cfg.run.seed)?;
            let xs: Vec<Image> = idx.iter().map(|&i| test.image(i)).collect();
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(r.cfg.run.seed);
            let k = test.class_count;
            let targets: Vec<usize> = idx.iter().map(|&i| metric::wrong_label(test.label(i), k, &mut rng)).collect();
            let input = ev::adaptive_input_attack(&def, &xs, &targets, &a.input_eps, a.keep)?;
            r.write("input_table", "adaptive-input.csv", &ev::input_report_csv(&input))?;
            let mut rows = vec![input.originals.clone()];
            for s in &input.steps {
                rows.push(s.adversarial.clone());
                rows.push(s.reconstructions.clone());
            }
            let p = r.out.join("adaptive-input.png");
            ev::write_grid(&p, &rows, a.keep, test.shape())?;
            r.output("input_grid", &p);

            let fgsm = attacks::attack_indices(&c.clf, &test, &AttackSpec::fgsm(a.source_eps), &idx)?;
            let adv: Vec<Image> = fgsm.iter().filter(|e| e.success).map(|e| e.perturbed.clone()).collect();
            let fixed = ev::predicted_labels(&def, &adv)?;
            let latent = ev::adaptive_latent_attack(&def, &adv, &fixed, &a.latent_eps, a.keep)?;
            r.write("latent_table", "adaptive-latent.csv", &ev::latent_report_csv(&latent))?;
            let mut rows = vec![latent.originals.clone()];
            rows.extend(latent.steps.iter().map(|s| s.reconstructions.clone()));
            let p = r.out.join("adaptive-latent.png");
            ev::write_grid(&p, &rows, a.keep, test.shape())?;
            r.output("latent_grid", &p);
            r.finish(json!({
                "input": input.steps.iter().map(|s| &s.row).collect::<Vec<_>>(),
                "latent": latent.steps.iter().map(|s| &s.row).collect::<Vec<_>>(),
            }))
        }
        Cmd::ExportFailures { common, models, k, eps } => {
            let mut r = Run::new("export-failures", &common)?;
            if let Some(k) = k {
                r.cfg.failures.k = k;
            }
            if let Some(e) = eps {
                r.cfg.failures.eps = e;
            }
            let c = r.components(&models)?;
            let def = c.defense()?;
            let (_, _, test) = r.cfg.load_data()?;
            let f = r.cfg.failures.clone();
            let idx = data::sample_indices(test.len(), f.n.min(test.len()), r.cfg.run.seed)?;
            let (ci, ai) = idx.split_at(idx.len() - idx.len() / 2);
            let aes = attacks::attack_indices(&c.clf, &test, &AttackSpec::fgsm(f.eps), ai)?;
            let mut images: Vec<Image> = ci.iter().map(|&i| test.image(i)).collect();
            let mut clean = vec![true; images.len()];
            for a in aes.iter().filter(|a| a.success) {
                images.push(a.perturbed.clone());
                clean.push(false);
            }
            let verdicts = def
                .verdict_stream(&images)
                .into_iter()
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|e| Error::Precondition(format!("sample {}: {}", e.id, e.message)))?;
            let mut log_csv = Vec::new();
            pipeline::write_verdicts_csv(&mut log_csv, &verdicts).expect("in memory");
            r.write("verdicts", "failures-verdicts.csv", &String::from_utf8(log_csv).expect("ascii"))?;
            let arch = ev::export_failures(&def, &verdicts, &images, &clean, f.k, &r.out.join("failures"))?;
            r.output("manifest", &arch.manifest);
            for g in &arch.grids {
                r.output(&g.file_name().expect("file").to_string_lossy(), g);
            }
            r.finish(json!({ "false_negatives": arch.false_negatives, "false_positives": arch.false_positives }))
        }
        Cmd::Plot { common, inputs, metric, output } => {
            let mut r = Run::new("plot", &common)?;
            let metric: CurveMetric = metric.parse()?;
            let mut series = Vec::new();
            for p in &inputs {
                let text = std::fs::read_to_string(p).map_err(|e| Error::Io { path: p.clone(), source: e })?;
                let pts = ev::read_curve_csv(&text)?;
                r.input(&p.display().to_string(), p);
                let name = p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
                series.push((name, pts.into_iter().filter(|q| q.metric == metric).collect::<Vec<_>>()));
            }
            let svg = plot_svg(&series, metric.as_str());
            let p = output.unwrap_or_else(|| r.out.join("plot.svg"));
            std::fs::write(&p, svg).map_err(|e| Error::Io { path: p.clone(), source: e })?;
            r.output("plot", &p);
            r.finish(json!({ "series": series.len() }))
        }
    }
}

const COLORS: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b"];

/// Minimal line chart: budget on x, metric in [0, 1] on y. Censored points
/// are drawn hollow.
fn plot_svg(series: &[(String, Vec<CurvePoint>)], label: &str) -> String {
    let (w, h, m) = (640.0, 400.0, 50.0);
    let xs = series.iter().flat_map(|(_, p)| p.iter().map(|q| q.budget));
    let (lo, hi) = xs.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), x| (a.min(x), b.max(x)));
    let (lo, hi) = if lo.is_finite() && hi > lo { (lo, hi) } else { (0.0, 1.0) };
    let px = |x: f64| m + (x - lo) / (hi - lo) * (w - 2.0 * m);
    let py = |y: f64| h - m - y * (h - 2.0 * m);
    let mut s = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" font-family=\"sans-serif\" font-size=\"12\">\n"
    );
    s += &format!(
        "<rect width=\"{w}\" height=\"{h}\" fill=\"white\"/>\n<line x1=\"{m}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"black\"/>\n<line x1=\"{m}\" y1=\"{m}\" x2=\"{m}\" y2=\"{}\" stroke=\"black\"/>\n",
        h - m,
        w - m,
        h - m,
        h - m
    );
    for t in 0..=4 {
        let y = t as f64 / 4.0;
        s += &format!("<text x=\"{}\" y=\"{}\" text-anchor=\"end\">{y:.2}</text>\n", m - 6.0, py(y) + 4.0);
        let x = lo + (hi - lo) * t as f64 / 4.0;
        s += &format!("<text x=\"{}\" y=\"{}\" text-anchor=\"middle\">{x:.3}</text>\n", px(x), h - m + 18.0);
    }
    s += &format!("<text x=\"{}\" y=\"20\" text-anchor=\"middle\">{label}</text>\n", w / 2.0);
    for (i, (name, pts)) in series.iter().enumerate() {
        let c = COLORS[i % COLORS.len()];
        let path: Vec<String> = pts.iter().map(|p| format!("{:.2},{:.2}", px(p.budget), py(p.value))).collect();
        s += &format!("<polyline fill=\"none\" stroke=\"{c}\" stroke-width=\"2\" points=\"{}\"/>\n", path.join(" "));
        for p in pts {
            let fill = if p.censored { "white" } else { c };
            s += &format!(
                "<circle cx=\"{:.2}\" cy=\"{:.2}\" r=\"3\" fill=\"{fill}\" stroke=\"{c}\"/>\n",
                px(p.budget),
                py(p.value)
            );
        }
        s += &format!("<text x=\"{}\" y=\"{}\" fill=\"{c}\">{name}</text>\n", w - m - 150.0, m + 16.0 * i as f64);
    }
    s + "</svg>\n"
}

fn error_line(kind: &str, message: &str) -> String {
    json!({ "error": kind, "message": message.replace('\n', " ").trim() }).to_string()
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = e.print();
                return ExitCode::SUCCESS;
            }
            if e.kind() == ErrorKind::DisplayHelpOnMissingArgumentOrSubcommand {
                let _ = e.print();
                eprintln!("{}", error_line("usage", "missing subcommand"));
                return ExitCode::from(2);
            }
            let msg = e.render().to_string();
            let first = msg.lines().find(|l| !l.trim().is_empty()).unwrap_or("usage error");
            eprintln!("{}", error_line("usage", first.trim_start_matches("error: ")));
            return ExitCode::from(2);
        }
    };
    match run(cli.cmd) {
        Ok(()) => {
            let _ = std::io::stdout().flush();
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("{}", error_line(e.kind(), &e.to_string()));
            ExitCode::from(1)
        }
    }
}
