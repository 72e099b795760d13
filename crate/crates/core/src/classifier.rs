//! Target classifiers: a LeNet-style convnet for 28x28 grayscale data and a
//! compact residual network for 32x32 RGB data.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::data::{self, Image, LabeledDataset};
use crate::error::{Error, Result};
use crate::nn::{cross_entropy, BatchNorm, Conv2d, Float, Fwd, Linear, ParamStore, Sgd, Tape, Tensor, Var};

pub const CHECKPOINT_KIND: &str = "classifier";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "lowercase")]
pub enum ClassifierArch {
    Lenet { channels: usize, height: usize, width: usize, classes: usize, conv: [usize; 2], hidden: usize },
    Resnet { channels: usize, height: usize, width: usize, classes: usize, widths: Vec<usize> },
}

impl ClassifierArch {
    pub fn lenet(shape: [usize; 3], classes: usize) -> Self {
        ClassifierArch::Lenet { channels: shape[0], height: shape[1], width: shape[2], classes, conv: [16, 32], hidden: 128 }
    }

    pub fn resnet(shape: [usize; 3], classes: usize) -> Self {
        ClassifierArch::Resnet { channels: shape[0], height: shape[1], width: shape[2], classes, widths: vec![32, 64, 128] }
    }

    pub fn input_shape(&self) -> [usize; 3] {
        match self {
            ClassifierArch::Lenet { channels, height, width, .. } | ClassifierArch::Resnet { channels, height, width, .. } => {
                [*channels, *height, *width]
            }
        }
    }

    pub fn classes(&self) -> usize {
        match self {
            ClassifierArch::Lenet { classes, .. } | ClassifierArch::Resnet { classes, .. } => *classes,
        }
    }
}

#[derive(Clone, Debug)]
struct ResBlock {
    conv1: Conv2d,
    bn1: BatchNorm,
    conv2: Conv2d,
    bn2: BatchNorm,
    shortcut: Option<Conv2d>,
}

#[derive(Clone, Debug)]
enum Net {
    Lenet { c1: Conv2d, c2: Conv2d, fc1: Linear, fc2: Linear },
    Resnet { stem: Conv2d, stem_bn: BatchNorm, blocks: Vec<ResBlock>, fc: Linear },
}

fn build<T: Float>(arch: &ClassifierArch, s: &mut ParamStore<T>, rng: &mut ChaCha8Rng) -> Net {
    match arch {
        ClassifierArch::Lenet { channels, height, width, classes, conv, hidden } => {
            let c1 = Conv2d::new(s, "conv1", *channels, conv[0], 5, 1, 2, rng);
            let c2 = Conv2d::new(s, "conv2", conv[0], conv[1], 5, 1, 2, rng);
            let flat = conv[1] * (height / 4) * (width / 4);
            let fc1 = Linear::new(s, "fc1", flat, *hidden, rng);
            let fc2 = Linear::new(s, "fc2", *hidden, *classes, rng);
            Net::Lenet { c1, c2, fc1, fc2 }
        }
        ClassifierArch::Resnet { channels, classes, widths, .. } => {
            let stem = Conv2d::new(s, "stem", *channels, widths[0], 3, 1, 1, rng);
            let stem_bn = BatchNorm::new(s, "stem_bn", widths[0], 1);
            let mut blocks = Vec::new();
            let mut c_in = widths[0];
            for (i, &w) in widths.iter().enumerate() {
                let stride = if i == 0 { 1 } else { 2 };
                let name = format!("block{i}");
                let conv1 = Conv2d::new(s, &format!("{name}.conv1"), c_in, w, 3, stride, 1, rng);
                let bn1 = BatchNorm::new(s, &format!("{name}.bn1"), w, 1);
                let conv2 = Conv2d::new(s, &format!("{name}.conv2"), w, w, 3, 1, 1, rng);
                let bn2 = BatchNorm::new(s, &format!("{name}.bn2"), w, 1);
                let shortcut =
                    (stride != 1 || c_in != w).then(|| Conv2d::new(s, &format!("{name}.short"), c_in, w, 1, stride, 0, rng));
                blocks.push(ResBlock { conv1, bn1, conv2, bn2, shortcut });
                c_in = w;
            }
            let fc = Linear::new(s, "fc", c_in, *classes, rng);
            Net::Resnet { stem, stem_bn, blocks, fc }
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainMeta {
    pub seed: u64,
    pub epochs: usize,
    pub test_accuracy: Option<f64>,
    pub loss_history: Vec<f64>,
}

/// Which scalar of the logits an input gradient is taken of.
#[derive(Clone, Debug, PartialEq)]
pub enum LossSpec {
    /// Cross-entropy against the given (true) label.
    TrueLabel(usize),
    /// Cross-entropy against a target label.
    Targeted(usize),
    /// `sum_k w[k] * z[k]` over the raw logits.
    Logits(Vec<f64>),
}

#[derive(Clone, Debug)]
pub struct Classifier<T: Float> {
    arch: ClassifierArch,
    store: ParamStore<T>,
    net: Net,
    pub meta: TrainMeta,
}

pub type TargetClassifier = Classifier<f32>;

const INFER_CHUNK: usize = 256;

impl<T: Float> Classifier<T> {
    pub fn init(arch: ClassifierArch, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let net = build(&arch, &mut store, &mut rng);
        Classifier { arch, store, net, meta: TrainMeta { seed, ..TrainMeta::default() } }
    }

    pub fn arch(&self) -> &ClassifierArch {
        &self.arch
    }

    pub fn classes(&self) -> usize {
        self.arch.classes()
    }

    pub fn input_shape(&self) -> [usize; 3] {
        self.arch.input_shape()
    }

    pub fn store(&self) -> &ParamStore<T> {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.store
    }

    pub fn cast<U: Float>(&self) -> Classifier<U> {
        Classifier { arch: self.arch.clone(), store: self.store.cast(), net: self.net.clone(), meta: self.meta.clone() }
    }

    /// Logits for an `N x C x H x W` input on an existing tape.
    pub fn forward<'t>(&self, f: &Fwd<'_, 't, T>, x: Var<'t, T>) -> Var<'t, T> {
        match &self.net {
            Net::Lenet { c1, c2, fc1, fc2 } => {
                let h = c1.forward(f, x).relu().max_pool2();
                let h = c2.forward(f, h).relu().max_pool2().flatten();
                fc2.forward(f, fc1.forward(f, h).relu())
            }
            Net::Resnet { stem, stem_bn, blocks, fc } => {
                let mut h = stem_bn.forward(f, stem.forward(f, x), &[]).relu();
                for b in blocks {
                    let o = b.bn1.forward(f, b.conv1.forward(f, h), &[]).relu();
                    let o = b.bn2.forward(f, b.conv2.forward(f, o), &[]);
                    let s = match &b.shortcut {
                        Some(c) => c.forward(f, h),
                        None => h,
                    };
                    h = o.add(s).relu();
                }
                let n = h.shape()[0];
                let c = h.shape()[1];
                fc.forward(f, h.mean_keep(&[2, 3]).reshape(vec![n, c]))
            }
        }
    }

    fn check_shape(&self, shape: &[usize]) -> Result<()> {
        let want = self.input_shape();
        if shape.len() != 4 || shape[1..] != want {
            let mut expected = vec![shape.first().copied().unwrap_or(0)];
            expected.extend(want);
            return Err(Error::Shape { expected, got: shape.to_vec() });
        }
        Ok(())
    }

    /// `N x K` logits, evaluated in chunks.
    pub fn logits_batch(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_shape(x.shape())?;
        let n = x.shape()[0];
        let d = x.numel() / n.max(1);
        let k = self.classes();
        let mut out = Vec::with_capacity(n * k);
        for start in (0..n).step_by(INFER_CHUNK) {
            let m = INFER_CHUNK.min(n - start);
            let mut shape = x.shape().to_vec();
            shape[0] = m;
            let chunk = Tensor::new(shape, x.data()[start * d..(start + m) * d].to_vec());
            let tape = Tape::new();
            let bound = self.store.bind_frozen(&tape);
            let z = self.forward(&Fwd::new(&bound, false), tape.constant(chunk));
            out.extend_from_slice(z.value().data());
        }
        let z = Tensor::new(vec![n, k], out);
        if !z.all_finite() {
            return Err(Error::NonFinite("classifier logits".into()));
        }
        Ok(z)
    }

    pub fn predict_batch(&self, x: &Tensor<T>) -> Result<Vec<usize>> {
        let z = self.logits_batch(x)?;
        Ok(z.data().chunks(self.classes()).map(argmax).collect())
    }

    /// Gradient with respect to the input of `sum_i loss_i(x_i)`; samples do
    /// not interact in inference mode, so row `i` is the gradient of
    /// `loss_i`. Also returns the logits.
    pub fn input_gradient_batch(&self, x: &Tensor<T>, specs: &[LossSpec]) -> Result<(Tensor<T>, Tensor<T>)> {
        self.check_shape(x.shape())?;
        let n = x.shape()[0];
        if specs.len() != n {
            return Err(Error::Precondition(format!("{} loss specs for {n} inputs", specs.len())));
        }
        let k = self.classes();
        let mut a = vec![T::zero(); n * k];
        let mut b = vec![T::zero(); n * k];
        for (i, s) in specs.iter().enumerate() {
            match s {
                LossSpec::TrueLabel(y) | LossSpec::Targeted(y) => {
                    if *y >= k {
                        return Err(Error::InvalidClass { label: *y, classes: k });
                    }
                    a[i * k + y] = -T::one();
                }
                LossSpec::Logits(w) => {
                    if w.len() != k {
                        return Err(Error::Precondition(format!("logit weights of length {} for K = {k}", w.len())));
                    }
                    for (j, &wj) in w.iter().enumerate() {
                        b[i * k + j] = T::c(wj);
                    }
                }
            }
        }
        let tape = Tape::new();
        let bound = self.store.bind_frozen(&tape);
        let xv = tape.leaf(x.clone());
        let z = self.forward(&Fwd::new(&bound, false), xv);
        let ca = tape.constant(Tensor::new(vec![n, k], a));
        let cb = tape.constant(Tensor::new(vec![n, k], b));
        let loss = z.log_softmax().mul(ca).sum_all().add(z.mul(cb).sum_all());
        let grads = tape.backward(loss);
        let g = grads.get(xv).cloned().unwrap_or_else(|| Tensor::zeros(x.shape().to_vec()));
        if !g.all_finite() {
            return Err(Error::NonFinite("input gradient".into()));
        }
        Ok((g, z.value()))
    }

    /// Fraction of `ds` classified correctly.
    pub fn accuracy(&self, ds: &LabeledDataset) -> Result<f64> {
        let idx: Vec<usize> = (0..ds.len()).collect();
        let x = ds.batch_tensor(&idx).cast::<T>();
        let pred = self.predict_batch(&x)?;
        let correct = pred.iter().zip(ds.labels()).filter(|(p, y)| p == y).count();
        Ok(correct as f64 / ds.len() as f64)
    }
}

impl TargetClassifier {
    pub fn logits(&self, x: &Image) -> Result<Vec<f32>> {
        Ok(self.logits_batch(&x.to_tensor())?.into_vec())
    }

    pub fn predict(&self, x: &Image) -> Result<usize> {
        Ok(argmax(&self.logits(x)?))
    }

    pub fn input_gradient(&self, x: &Image, spec: &LossSpec) -> Result<Image> {
        let (g, _) = self.input_gradient_batch(&x.to_tensor(), std::slice::from_ref(spec))?;
        Ok(Image::from_planar_unchecked(x.shape(), g.into_vec()))
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let mut c = Checkpoint::new(CHECKPOINT_KIND);
        c.set("arch", &self.arch)?;
        c.set("seed", &self.meta.seed)?;
        c.set("meta", &self.meta)?;
        c.put_store("", &self.store);
        Ok(c)
    }

    pub fn from_checkpoint(c: &Checkpoint) -> Result<Self> {
        c.expect_kind(CHECKPOINT_KIND)?;
        let arch: ClassifierArch = c.get("arch")?;
        let mut clf = Classifier::init(arch, 0);
        c.take_store("", &mut clf.store)?;
        clf.meta = c.get("meta")?;
        Ok(clf)
    }
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax<T: PartialOrd + Copy>(v: &[T]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClassifierConfig {
    /// `lenet` or `resnet`.
    pub arch: String,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Multiply the learning rate by `lr_gamma` every `lr_step` epochs.
    pub lr_step: usize,
    pub lr_gamma: f64,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        ClassifierConfig {
            arch: "lenet".into(),
            epochs: 4,
            batch_size: 64,
            lr: 0.02,
            momentum: 0.9,
            weight_decay: 5e-4,
            lr_step: 2,
            lr_gamma: 0.2,
        }
    }
}

/// SGD with momentum and step decay on mean cross-entropy. When `test` is
/// given its accuracy is stored in the metadata.
pub fn train_classifier(
    train: &LabeledDataset,
    test: Option<&LabeledDataset>,
    cfg: &ClassifierConfig,
    seed: u64,
    mut progress: impl FnMut(&str),
) -> Result<TargetClassifier> {
    if train.is_empty() {
        return Err(Error::Precondition("empty training set".into()));
    }
    let arch = match cfg.arch.as_str() {
        "lenet" => ClassifierArch::lenet(train.shape(), train.class_count),
        "resnet" => ClassifierArch::resnet(train.shape(), train.class_count),
        other => return Err(Error::Config(format!("unknown classifier arch {other}"))),
    };
    let mut clf = TargetClassifier::init(arch, seed);
    let mut opt = Sgd::new(cfg.lr, cfg.momentum, cfg.weight_decay);
    let bs = cfg.batch_size.min(train.len());
    for epoch in 0..cfg.epochs {
        if cfg.lr_step > 0 && epoch > 0 && epoch % cfg.lr_step == 0 {
            opt.lr *= cfg.lr_gamma;
        }
        let mut total = 0.0;
        let order = data::batches(train, bs, seed.wrapping_add(epoch as u64 + 1), true)?;
        for idx in &order {
            let x = train.batch_tensor(idx);
            let y = train.batch_labels(idx);
            let tape = Tape::new();
            let bound = clf.store.bind(&tape);
            let f = Fwd::new(&bound, true);
            let loss = cross_entropy(clf.forward(&f, tape.constant(x)), &y);
            let lv = loss.value().item() as f64;
            if !lv.is_finite() {
                return Err(Error::NonFinite(format!("training loss at epoch {epoch}")));
            }
            total += lv * idx.len() as f64;
            let grads = bound.grads(&tape.backward(loss));
            f.commit_stats(&mut clf.store, 0.1);
            opt.step(&mut clf.store, &grads);
        }
        let mean = total / train.len() as f64;
        clf.meta.loss_history.push(mean);
        progress(&format!("classifier epoch {} loss {mean:.4}", epoch + 1));
    }
    clf.meta.epochs = cfg.epochs;
    if let Some(t) = test {
        clf.meta.test_accuracy = Some(clf.accuracy(t)?);
    }
    Ok(clf)
}
