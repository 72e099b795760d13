//! Run configuration shared by the CLI subcommands. Files are TOML with one
//! table per component; every key has a default and unknown keys are
//! rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::attacks::{AttackSpec, Method, Norm};
use crate::classifier::ClassifierConfig;
use crate::contranet::CganConfig;
use crate::data::{self, LabeledDataset};
use crate::error::{Error, Result};
use crate::metric::MetricConfig;
use crate::saec::SaecParams;

pub const MNIST_DIR_ENV: &str = "MIXDEFENSE_MNIST_DIR";
pub const OUT_ENV: &str = "MIXDEFENSE_OUT";

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub data: DataConfig,
    pub run: RunSection,
    pub classifier: ClassifierConfig,
    pub cgan: CganConfig,
    pub metric: MetricConfig,
    pub saec: SaecSection,
    pub sp: SpSection,
    pub attack: AttackSection,
    pub adaptive: AdaptiveSection,
    pub failures: FailureSection,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// `mnist` or `cifar10`.
    pub dataset: String,
    /// Defaults to `$MIXDEFENSE_MNIST_DIR` or `data/mnist` for MNIST and
    /// `data/cifar10` for CIFAR-10.
    pub dir: Option<PathBuf>,
    /// Training images held back for detector calibration.
    pub validation: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig { dataset: "mnist".into(), dir: None, validation: 5000 }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunSection {
    pub seed: u64,
    /// Defaults to `$MIXDEFENSE_OUT` or `runs`.
    pub out: Option<PathBuf>,
    /// Worker threads; 0 uses every core.
    pub jobs: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SaecSection {
    pub p: f64,
    pub bins: usize,
    pub lo: f64,
    pub hi: f64,
    pub noise: Vec<f64>,
    pub fpr: f64,
}

impl Default for SaecSection {
    fn default() -> Self {
        let d = SaecParams::default();
        SaecSection { p: d.p, bins: d.bins, lo: d.lo, hi: d.hi, noise: vec![0.05, 0.1, 0.2, 0.3], fpr: 0.01 }
    }
}

impl SaecSection {
    pub fn params(&self) -> SaecParams {
        SaecParams { p: self.p, bins: self.bins, lo: self.lo, hi: self.hi }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SpSection {
    pub fpr: f64,
}

impl Default for SpSection {
    fn default() -> Self {
        SpSection { fpr: 0.05 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AttackSection {
    pub method: String,
    pub norm: String,
    /// `start:stop:count`; budgets for FGSM/FGM/BIM, bin edges for CW and
    /// DeepFool.
    pub eps: String,
    pub n_per_point: usize,
    /// Images attacked by the `attack` subcommand.
    pub n: usize,
    pub steps: usize,
    pub cw_confidence: f64,
    pub cw_binary_steps: usize,
    pub cw_iterations: usize,
    pub cw_learning_rate: f64,
    pub cw_initial_c: f64,
    pub deepfool_iterations: usize,
    pub deepfool_overshoot: f64,
}

impl Default for AttackSection {
    fn default() -> Self {
        AttackSection {
            method: "fgsm".into(),
            norm: "linf".into(),
            eps: "0.05:0.4:10".into(),
            n_per_point: 500,
            n: 500,
            steps: 10,
            cw_confidence: 0.0,
            cw_binary_steps: 9,
            cw_iterations: 1000,
            cw_learning_rate: 1e-2,
            cw_initial_c: 1e-2,
            deepfool_iterations: 50,
            deepfool_overshoot: 0.02,
        }
    }
}

impl AttackSection {
    /// Spec for one budget (`None` for unbudgeted attacks).
    pub fn spec(&self, eps: Option<f64>) -> Result<AttackSpec> {
        let method: Method = self.method.parse()?;
        let norm: Norm = self.norm.parse()?;
        let mut s = AttackSpec::new(method, norm, eps);
        s.steps = self.steps;
        s.confidence = self.cw_confidence;
        s.binary_search_steps = self.cw_binary_steps;
        s.iterations = self.cw_iterations;
        s.learning_rate = self.cw_learning_rate;
        s.initial_c = self.cw_initial_c;
        s.max_iterations = self.deepfool_iterations;
        s.overshoot = self.deepfool_overshoot;
        if matches!(method, Method::Cw | Method::Deepfool) {
            s.eps = None;
        }
        s.validate()?;
        Ok(s)
    }

    pub fn grid(&self) -> Result<Vec<f64>> {
        parse_grid(&self.eps)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdaptiveSection {
    pub n: usize,
    pub input_eps: Vec<f64>,
    pub latent_eps: Vec<f64>,
    /// Samples shown in the image grids.
    pub keep: usize,
    /// Perturbation of the FGSM AEs fed to the latent attack.
    pub source_eps: f64,
}

impl Default for AdaptiveSection {
    fn default() -> Self {
        AdaptiveSection {
            n: 200,
            input_eps: vec![0.0, 0.01, 0.02, 0.05, 0.1],
            latent_eps: vec![0.0, 0.05, 0.1, 0.2, 0.3],
            keep: 8,
            source_eps: 0.1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FailureSection {
    pub k: usize,
    pub eps: f64,
    pub n: usize,
}

impl Default for FailureSection {
    fn default() -> Self {
        FailureSection { k: 8, eps: 0.1, n: 500 }
    }
}

/// `start:stop:count`, inclusive linear spacing.
pub fn parse_grid(s: &str) -> Result<Vec<f64>> {
    let bad = || Error::Config(format!("bad grid {s:?} (expected start:stop:count)"));
    let parts: Vec<&str> = s.split(':').collect();
    if parts.len() != 3 {
        return Err(bad());
    }
    let start: f64 = parts[0].trim().parse().map_err(|_| bad())?;
    let stop: f64 = parts[1].trim().parse().map_err(|_| bad())?;
    let count: usize = parts[2].trim().parse().map_err(|_| bad())?;
    if count == 0 || !start.is_finite() || !stop.is_finite() {
        return Err(bad());
    }
    Ok(crate::evaluation::linspace(start, stop, count))
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.message().to_string()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }

    /// Reads a TOML config, or the config snapshot inside a run manifest
    /// (`.json`).
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        if path.extension().is_some_and(|e| e == "json") {
            let v: serde_json::Value =
                serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
            let cfg = v.get("config").ok_or_else(|| Error::Config(format!("{} has no config", path.display())))?;
            return serde_json::from_value(cfg.clone()).map_err(|e| Error::Config(e.to_string()));
        }
        Self::from_toml(&text)
    }

    pub fn out_dir(&self) -> PathBuf {
        self.run
            .out
            .clone()
            .or_else(|| std::env::var_os(OUT_ENV).map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from("runs"))
    }

    pub fn data_dir(&self) -> PathBuf {
        if let Some(d) = &self.data.dir {
            return d.clone();
        }
        match self.data.dataset.as_str() {
            "mnist" => std::env::var_os(MNIST_DIR_ENV).map(PathBuf::from).unwrap_or_else(|| "data/mnist".into()),
            other => PathBuf::from("data").join(other),
        }
    }

    /// `(train, validation, test)`; validation is the tail of the training
    /// split.
    pub fn load_data(&self) -> Result<(LabeledDataset, LabeledDataset, LabeledDataset)> {
        let dir = self.data_dir();
        let (train, test) = match self.data.dataset.as_str() {
            "mnist" => (
                data::load_mnist_idx(&dir.join("train-images-idx3-ubyte"), &dir.join("train-labels-idx1-ubyte"))?,
                data::load_mnist_idx(&dir.join("t10k-images-idx3-ubyte"), &dir.join("t10k-labels-idx1-ubyte"))?,
            ),
            "cifar10" => {
                let batches: Vec<PathBuf> = (1..=5).map(|i| dir.join(format!("data_batch_{i}.bin"))).collect();
                (data::load_cifar_binary(&batches)?, data::load_cifar_binary(&[dir.join("test_batch.bin")])?)
            }
            other => return Err(Error::Config(format!("unknown dataset {other} (expected mnist or cifar10)"))),
        };
        let (train, val) = train.split_tail(self.data.validation.min(train.len()))?;
        Ok((train, val, test))
    }
}
