#![allow(dead_code)]

use mixdefense::classifier::{ClassifierArch, TargetClassifier};
use mixdefense::contranet::{Cgan, CganArch};
use mixdefense::data::{Image, LabeledDataset, LabeledExample, Split};
use mixdefense::metric::{calibrate_sp, MetricArch, MetricNetwork, SpDetector};
use mixdefense::pipeline::MixDefense;
use mixdefense::saec::{SaecDetector, SaecParams};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const SHAPE: [usize; 3] = [1, 28, 28];

/// Blobs on a dark background, roughly digit-like in intensity statistics.
pub fn blob_set(n: usize, seed: u64, split: Split) -> LabeledDataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ex = (0..n)
        .map(|i| {
            let (cy, cx, r) = (rng.random_range(8.0..20.0f32), rng.random_range(8.0..20.0f32), rng.random_range(3.0..8.0f32));
            let px = (0..784)
                .map(|j| {
                    let (y, x) = ((j / 28) as f32, (j % 28) as f32);
                    let d = ((y - cy).powi(2) + (x - cx).powi(2)).sqrt();
                    (1.0 - (d - r).max(0.0) / 2.0).clamp(0.0, 1.0)
                })
                .collect();
            LabeledExample { image: Image::new(1, 28, 28, px).unwrap(), label: i % 10 }
        })
        .collect();
    LabeledDataset::from_examples("blobs", split, 10, ex).unwrap()
}

pub struct Components {
    pub clf: TargetClassifier,
    pub cgan: Cgan<f32>,
    pub saec: SaecDetector,
    pub sp: SpDetector,
}

impl Components {
    /// Untrained networks with detectors calibrated on `calib`.
    pub fn random(calib: &LabeledDataset, seed: u64) -> Self {
        let clf = TargetClassifier::init(ClassifierArch::lenet(SHAPE, 10), seed);
        let cgan = Cgan::<f32>::init(CganArch::desk(SHAPE, 10, 8), seed + 1).unwrap();
        let metric = MetricNetwork::<f32>::init(MetricArch::desk(SHAPE, 8), seed + 2).unwrap();
        let saec = SaecDetector::calibrate(calib, SaecParams::default(), &[0.1, 0.3], 0.1, seed + 3).unwrap();
        let sp = calibrate_sp(metric, &cgan, &clf, calib, 0.2).unwrap();
        Components { clf, cgan, saec, sp }
    }

    pub fn defense(&self) -> MixDefense<'_> {
        MixDefense::new(&self.saec, &self.clf, &self.sp, &self.cgan).unwrap()
    }
}
