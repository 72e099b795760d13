//! Alternating generator / encoder / discriminator updates.

use std::fmt;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{losses, Cgan, CganArch, LossRecord};
use crate::data::{index_batches, LabeledDataset};
use crate::error::{Error, Result};
use crate::nn::{Adam, Fwd, Tape, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CganConfig {
    pub latent: usize,
    pub iterations: usize,
    pub batch_size: usize,
    pub lr_encoder: f64,
    pub lr_generator: f64,
    pub lr_discriminator: f64,
    pub beta1: f64,
    pub beta2: f64,
    /// Discriminator updates per generator/encoder update.
    pub dis_steps: usize,
    /// SSIM weight inside the reconstruction distance.
    pub ssim_lambda: f64,
    pub kl_weight: f64,
    pub adv_weight: f64,
    pub bn_momentum: f64,
    /// Batches used to re-estimate generator normalisation statistics after
    /// training; 0 keeps the running averages.
    pub bn_refresh_batches: usize,
    pub arch: Option<CganArch>,
}

impl Default for CganConfig {
    fn default() -> Self {
        CganConfig {
            latent: 128,
            iterations: 3000,
            batch_size: 64,
            lr_encoder: 1e-3,
            lr_generator: 1e-3,
            lr_discriminator: 2e-4,
            beta1: 0.5,
            beta2: 0.999,
            dis_steps: 2,
            ssim_lambda: 1.0,
            kl_weight: 1.0,
            adv_weight: 0.01,
            bn_momentum: 0.1,
            bn_refresh_batches: 40,
            arch: None,
        }
    }
}

impl CganConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.into()));
        if self.latent == 0 || self.batch_size < 2 || self.dis_steps == 0 {
            return bad("latent, batch_size (>= 2) and dis_steps must be positive");
        }
        for (name, v) in [
            ("lr_encoder", self.lr_encoder),
            ("lr_generator", self.lr_generator),
            ("lr_discriminator", self.lr_discriminator),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return bad(&format!("{name} must be positive"));
            }
        }
        if self.ssim_lambda < 0.0 || self.kl_weight < 0.0 || self.adv_weight < 0.0 {
            return bad("loss weights must be non-negative");
        }
        Ok(())
    }
}

/// Training stopped. After a non-finite loss or gradient `last_good` holds
/// the parameters from before the failing iteration; it is `None` when setup
/// failed.
#[derive(Debug)]
pub struct TrainAbort {
    pub error: Error,
    pub last_good: Option<Box<Cgan<f32>>>,
}

impl fmt::Display for TrainAbort {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.error)
    }
}

impl std::error::Error for TrainAbort {}

impl From<TrainAbort> for Error {
    fn from(a: TrainAbort) -> Self {
        a.error
    }
}

/// Endless stream of full shuffled batches, reshuffled every pass.
struct Sampler {
    n: usize,
    bs: usize,
    seed: u64,
    pass: u64,
    queue: Vec<Vec<usize>>,
}

impl Sampler {
    fn next(&mut self) -> Result<Vec<usize>> {
        loop {
            if let Some(b) = self.queue.pop() {
                if b.len() == self.bs {
                    return Ok(b);
                }
                continue;
            }
            self.pass += 1;
            let mut q = index_batches(self.n, self.bs, self.seed.wrapping_add(self.pass), true)?;
            q.reverse();
            self.queue = q;
        }
    }
}

fn normal(rng: &mut ChaCha8Rng, shape: Vec<usize>) -> Tensor<f32> {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| StandardNormal.sample(rng)).collect())
}

fn all_finite(g: &[Option<Tensor<f32>>]) -> bool {
    g.iter().flatten().all(Tensor::all_finite)
}

/// Stateful trainer; each `step` performs one generator/encoder update and
/// `dis_steps` discriminator updates.
pub struct CganTrainer<'d> {
    pub model: Cgan<f32>,
    data: &'d LabeledDataset,
    cfg: CganConfig,
    sampler: Sampler,
    rng: ChaCha8Rng,
    opt_e: Adam<f32>,
    opt_g: Adam<f32>,
    opt_d: Adam<f32>,
    iteration: usize,
}

impl<'d> CganTrainer<'d> {
    pub fn new(train: &'d LabeledDataset, cfg: &CganConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        if train.len() < cfg.batch_size {
            return Err(Error::Precondition(format!(
                "training set of {} is smaller than batch_size {}",
                train.len(),
                cfg.batch_size
            )));
        }
        let arch = cfg.arch.clone().unwrap_or_else(|| CganArch::desk(train.shape(), train.class_count, cfg.latent));
        if [arch.channels, arch.height, arch.width] != train.shape() || arch.classes != train.class_count {
            return Err(Error::Config("cGAN architecture does not match the training data".into()));
        }
        let mut model = Cgan::init(arch, seed)?;
        model.meta.config = Some(cfg.clone());
        Ok(CganTrainer {
            model,
            data: train,
            sampler: Sampler { n: train.len(), bs: cfg.batch_size, seed, pass: 0, queue: Vec::new() },
            rng: ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_c0de),
            opt_e: Adam::new(cfg.lr_encoder, cfg.beta1, cfg.beta2),
            opt_g: Adam::new(cfg.lr_generator, cfg.beta1, cfg.beta2),
            opt_d: Adam::new(cfg.lr_discriminator, cfg.beta1, cfg.beta2),
            cfg: cfg.clone(),
            iteration: 0,
        })
    }

    /// One training iteration: generator, then encoder, then the
    /// discriminator steps against the updated generator. On a non-finite
    /// loss or gradient the model is left exactly as it was before the call.
    pub fn step(&mut self) -> Result<LossRecord> {
        let idx = self.sampler.next()?;
        let x = self.data.batch_tensor(&idx);
        let y = self.data.batch_labels(&idx);
        let eps = normal(&mut self.rng, vec![idx.len(), self.cfg.latent]);
        let mut staged = self.model.clone();
        let (mut opt_e, mut opt_g, mut opt_d) = (self.opt_e.clone(), self.opt_g.clone(), self.opt_d.clone());

        let (lg, le) = {
            let m = &self.model;
            let tape = Tape::new();
            let (be, bg, bd) = (m.enc_store.bind(&tape), m.gen_store.bind(&tape), m.dis_store.bind_frozen(&tape));
            let (fe, fg, fd) = (Fwd::new(&be, true), Fwd::new(&bg, true), Fwd::new(&bd, false));
            let t = m.loss_terms(&fe, &fg, &fd, tape.constant(x.clone()), &y, tape.constant(eps), self.cfg.ssim_lambda);
            let loss_g = t.generator_loss(self.cfg.adv_weight);
            let loss_e = t.encoder_loss(self.cfg.kl_weight);
            let (lg, le) = (loss_g.value().item() as f64, loss_e.value().item() as f64);
            let grads_g = bg.grads(&tape.backward(loss_g));
            let grads_e = be.grads(&tape.backward(loss_e));
            if !(lg.is_finite() && le.is_finite() && all_finite(&grads_g) && all_finite(&grads_e)) {
                return Err(Error::NonFinite(format!("generator/encoder loss at iteration {}", self.iteration)));
            }
            fg.commit_stats(&mut staged.gen_store, self.cfg.bn_momentum);
            opt_g.step(&mut staged.gen_store, &grads_g);
            opt_e.step(&mut staged.enc_store, &grads_e);
            (lg, le)
        };

        let mut ld_sum = 0.0;
        for k in 0..self.cfg.dis_steps {
            let (xd, yd) = if k == 0 {
                (x.clone(), y.clone())
            } else {
                let i = self.sampler.next()?;
                (self.data.batch_tensor(&i), self.data.batch_labels(&i))
            };
            let epsd = normal(&mut self.rng, vec![yd.len(), self.cfg.latent]);
            let (ld, gd) = dis_step(&staged, &xd, &yd, &epsd);
            if !(ld.is_finite() && all_finite(&gd)) {
                return Err(Error::NonFinite(format!("discriminator loss at iteration {}", self.iteration)));
            }
            opt_d.step(&mut staged.dis_store, &gd);
            ld_sum += ld;
        }

        let rec = LossRecord {
            iteration: self.iteration,
            encoder: le,
            generator: lg,
            discriminator: ld_sum / self.cfg.dis_steps as f64,
        };
        staged.meta.history.push(rec.clone());
        self.model = staged;
        (self.opt_e, self.opt_g, self.opt_d) = (opt_e, opt_g, opt_d);
        self.iteration += 1;
        Ok(rec)
    }

    /// Re-estimates the generator's normalisation statistics from
    /// mean-mode latents as a cumulative average over `batches` batches.
    pub fn refresh_bn(&mut self, batches: usize) -> Result<()> {
        if batches == 0 {
            return Ok(());
        }
        let seed = self.model.meta.seed.wrapping_add(0xb17);
        let order = index_batches(self.data.len(), self.cfg.batch_size, seed, true)?;
        let mut gen_store = self.model.gen_store.clone();
        for (i, idx) in order.iter().filter(|b| b.len() == self.cfg.batch_size).take(batches).enumerate() {
            let x = self.data.batch_tensor(idx);
            let y = self.data.batch_labels(idx);
            let (mu, _) = self.model.encode_batch(&x)?;
            let tape = Tape::new();
            let b = self.model.gen_store.bind_frozen(&tape);
            let f = Fwd::new(&b, true);
            self.model.generator_fwd(&f, tape.constant(mu), &y);
            f.commit_stats(&mut gen_store, 1.0 / (i + 1) as f64);
        }
        self.model.gen_store = gen_store;
        Ok(())
    }

    pub fn iteration(&self) -> usize {
        self.iteration
    }
}

fn dis_step(m: &Cgan<f32>, x: &Tensor<f32>, y: &[usize], eps: &Tensor<f32>) -> (f64, Vec<Option<Tensor<f32>>>) {
    let tape = Tape::new();
    let (be, bg, bd) = (m.enc_store.bind_frozen(&tape), m.gen_store.bind_frozen(&tape), m.dis_store.bind(&tape));
    let (fe, fg, fd) = (Fwd::new(&be, true), Fwd::new(&bg, true), Fwd::new(&bd, true));
    let xv = tape.constant(x.clone());
    let (mu, lv) = m.encoder_fwd(&fe, xv);
    let z = mu.add(lv.mul_scalar(0.5).exp().mul(tape.constant(eps.clone())));
    let recon = tape.constant(m.generator_fwd(&fg, z, y).value());
    let loss = losses::dis_var(m.discriminator_fwd(&fd, xv, y), m.discriminator_fwd(&fd, recon, y)).mean_all();
    let l = loss.value().item() as f64;
    (l, bd.grads(&tape.backward(loss)))
}

/// Runs `cfg.iterations` iterations then refreshes normalisation statistics.
/// `progress` receives every loss record.
pub fn train_cgan(
    train: &LabeledDataset,
    cfg: &CganConfig,
    seed: u64,
    mut progress: impl FnMut(&LossRecord),
) -> std::result::Result<Cgan<f32>, TrainAbort> {
    let mut tr = CganTrainer::new(train, cfg, seed).map_err(|error| TrainAbort { error, last_good: None })?;
    for _ in 0..cfg.iterations {
        match tr.step() {
            Ok(r) => progress(&r),
            Err(error) => return Err(TrainAbort { error, last_good: Some(Box::new(tr.model)) }),
        }
    }
    if let Err(error) = tr.refresh_bn(cfg.bn_refresh_batches) {
        return Err(TrainAbort { error, last_good: Some(Box::new(tr.model)) });
    }
    Ok(tr.model)
}
