//! Large-perturbation catcher: pseudo-saturation map, high-pass residual,
//! histogram of residuals and the variance of its bin counts.

use serde::{Deserialize, Serialize};

use crate::data::{Image, LabeledDataset};
use crate::error::{Error, Result};

/// The 3x3 "KB" high-pass kernel.
pub const KB_KERNEL: [[f64; 3]; 3] = [[-0.25, 0.5, -0.25], [0.5, -1.0, 0.5], [-0.25, 0.5, -0.25]];

/// A row-major `height x width` array of reals.
#[derive(Clone, Debug, PartialEq)]
pub struct Plane {
    pub height: usize,
    pub width: usize,
    pub values: Vec<f64>,
}

impl Plane {
    pub fn new(height: usize, width: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != height * width {
            return Err(Error::Shape { expected: vec![height, width], got: vec![values.len()] });
        }
        Ok(Plane { height, width, values })
    }

    pub fn at(&self, y: usize, x: usize) -> f64 {
        self.values[y * self.width + x]
    }
}

/// Per-pixel `(sum_c |x_c - mean_c(x)|^p)^(1/p)`.
pub fn pseudo_saturation(x: &Image, p: f64) -> Result<Plane> {
    if p < 1.0 || !p.is_finite() {
        return Err(Error::Precondition(format!("p = {p} must be >= 1")));
    }
    if x.pixels().iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("image pixels".into()));
    }
    let (c, hw) = (x.channels(), x.height() * x.width());
    let mut out = vec![0.0; hw];
    for (i, o) in out.iter_mut().enumerate() {
        let mean = (0..c).map(|ch| x.channel(ch)[i] as f64).sum::<f64>() / c as f64;
        let s: f64 = (0..c).map(|ch| (x.channel(ch)[i] as f64 - mean).abs().powf(p)).sum();
        *o = s.powf(1.0 / p);
    }
    Plane::new(x.height(), x.width(), out)
}

/// Symmetric (edge-mirroring, `d c b | a b c d | c b a`) index.
fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    let mut i = i.rem_euclid(period);
    if i >= n {
        i = period - i;
    }
    i as usize
}

/// Same-size 2-D cross-correlation with [`KB_KERNEL`] and reflect padding.
pub fn residual_filter(m: &Plane) -> Plane {
    let (h, w) = (m.height, m.width);
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (ky, row) in KB_KERNEL.iter().enumerate() {
                let sy = reflect(y as isize + ky as isize - 1, h);
                for (kx, &k) in row.iter().enumerate() {
                    let sx = reflect(x as isize + kx as isize - 1, w);
                    acc += k * m.values[sy * w + sx];
                }
            }
            out[y * w + x] = acc;
        }
    }
    Plane { height: h, width: w, values: out }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FeatureHistogram {
    pub counts: Vec<u64>,
    pub lo: f64,
    pub hi: f64,
}

/// Clamps into `[lo, hi]` and bins into `bins` equal-width bins; `hi` lands in
/// the last bin.
pub fn feature_histogram(f: &Plane, bins: usize, lo: f64, hi: f64) -> Result<FeatureHistogram> {
    if bins < 2 || lo >= hi || !lo.is_finite() || !hi.is_finite() {
        return Err(Error::Precondition(format!("histogram needs L >= 2 and lo < hi (got {bins}, [{lo}, {hi}])")));
    }
    let mut counts = vec![0u64; bins];
    let width = (hi - lo) / bins as f64;
    for &v in &f.values {
        let v = v.clamp(lo, hi);
        let b = (((v - lo) / width).floor() as usize).min(bins - 1);
        counts[b] += 1;
    }
    Ok(FeatureHistogram { counts, lo, hi })
}

/// Population variance of the bin counts.
pub fn nl_score(h: &FeatureHistogram) -> f64 {
    let l = h.counts.len() as f64;
    let mu = h.counts.iter().map(|&c| c as f64).sum::<f64>() / l;
    h.counts.iter().map(|&c| (c as f64 - mu).powi(2)).sum::<f64>() / l
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    FlagBelow,
    FlagAbove,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SaecCalibration {
    pub dataset: String,
    pub noise_amplitudes: Vec<f64>,
    pub target_clean_fpr: f64,
    pub seed: u64,
    pub n_images: usize,
    pub mean_clean_score: f64,
    pub mean_noisy_score: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SaecParams {
    pub p: f64,
    pub bins: usize,
    pub lo: f64,
    pub hi: f64,
}

impl Default for SaecParams {
    fn default() -> Self {
        SaecParams { p: 8.0, bins: 256, lo: -4.0, hi: 4.0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SaecDetector {
    pub format: String,
    pub params: SaecParams,
    pub kernel: [[f64; 3]; 3],
    pub threshold: f64,
    pub direction: Direction,
    pub calibration: SaecCalibration,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SaecVerdict {
    pub flagged: bool,
    pub score: f64,
}

const FORMAT: &str = "mixdefense-saec/1";

/// NL score of one image. Single-channel images skip the saturation map.
pub fn score_image(x: &Image, params: &SaecParams) -> Result<f64> {
    let plane = if x.channels() == 1 {
        if x.pixels().iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("image pixels".into()));
        }
        Plane::new(x.height(), x.width(), x.pixels().iter().map(|&v| v as f64).collect())?
    } else {
        pseudo_saturation(x, params.p)?
    };
    let f = residual_filter(&plane);
    Ok(nl_score(&feature_histogram(&f, params.bins, params.lo, params.hi)?))
}

/// Adds seeded uniform noise in `[-amp, amp]` and clips to [0,1].
pub fn add_uniform_noise(x: &Image, amp: f64, rng: &mut impl rand::Rng) -> Image {
    let noisy: Vec<f32> = x.pixels().iter().map(|&v| v + rng.random_range(-amp..=amp) as f32).collect();
    x.with_pixels_clamped(&noisy)
}

/// Threshold allowing at most `floor(fpr * n)` of `scores` strictly beyond it.
pub fn quantile_threshold(scores: &[f64], fpr: f64, dir: Direction) -> f64 {
    let mut s = scores.to_vec();
    s.sort_by(|a, b| a.total_cmp(b));
    let n = s.len();
    let allowed = (fpr * n as f64).floor() as usize;
    match dir {
        // flagged iff score > t; choose t = s[n-1-allowed]
        Direction::FlagAbove => s[n - 1 - allowed.min(n - 1)],
        // flagged iff score < t; choose t = s[allowed]
        Direction::FlagBelow => s[allowed.min(n - 1)],
    }
}

impl SaecDetector {
    /// Calibrates direction and threshold on clean images and their noisy
    /// copies. One noisy copy per image, amplitudes cycled over
    /// `noise_amplitudes`.
    pub fn calibrate(
        train: &LabeledDataset,
        params: SaecParams,
        noise_amplitudes: &[f64],
        target_clean_fpr: f64,
        seed: u64,
    ) -> Result<Self> {
        use rand::SeedableRng;
        if !(target_clean_fpr > 0.0 && target_clean_fpr < 1.0) {
            return Err(Error::Precondition(format!("target clean FPR {target_clean_fpr} outside (0,1)")));
        }
        if noise_amplitudes.is_empty() {
            return Err(Error::Precondition("no noise amplitudes".into()));
        }
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let mut clean = Vec::with_capacity(train.len());
        let mut noisy = Vec::with_capacity(train.len());
        for i in 0..train.len() {
            let x = train.image(i);
            clean.push(score_image(&x, &params)?);
            let amp = noise_amplitudes[i % noise_amplitudes.len()];
            noisy.push(score_image(&add_uniform_noise(&x, amp, &mut rng), &params)?);
        }
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        let (mc, mn) = (mean(&clean), mean(&noisy));
        let var = clean.iter().map(|s| (s - mc).powi(2)).sum::<f64>() / clean.len() as f64;
        if var == 0.0 {
            return Err(Error::Calibration("clean NL scores have zero variance".into()));
        }
        let direction = if mn < mc { Direction::FlagBelow } else { Direction::FlagAbove };
        let threshold = quantile_threshold(&clean, target_clean_fpr, direction);
        Ok(SaecDetector {
            format: FORMAT.into(),
            params,
            kernel: KB_KERNEL,
            threshold,
            direction,
            calibration: SaecCalibration {
                dataset: train.name.clone(),
                noise_amplitudes: noise_amplitudes.to_vec(),
                target_clean_fpr,
                seed,
                n_images: train.len(),
                mean_clean_score: mc,
                mean_noisy_score: mn,
            },
        })
    }

    /// Flags strictly beyond the threshold in the calibrated direction.
    pub fn flags(&self, score: f64) -> bool {
        match self.direction {
            Direction::FlagBelow => score < self.threshold,
            Direction::FlagAbove => score > self.threshold,
        }
    }

    pub fn detect(&self, x: &Image) -> Result<SaecVerdict> {
        let score = score_image(x, &self.params)?;
        Ok(SaecVerdict { flagged: self.flags(score), score })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("detector serializes")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let d: SaecDetector = serde_json::from_str(s).map_err(|e| Error::Format(format!("SAEC detector: {e}")))?;
        if d.format != FORMAT {
            return Err(Error::Format(format!("unsupported SAEC detector format {}", d.format)));
        }
        if d.kernel != KB_KERNEL {
            return Err(Error::Format("SAEC detector kernel differs from the built-in residual kernel".into()));
        }
        if !d.threshold.is_finite() {
            return Err(Error::Format("SAEC threshold is not finite".into()));
        }
        Ok(d)
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        std::fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&s)
    }
}
