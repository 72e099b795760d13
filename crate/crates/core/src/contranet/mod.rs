//! Class-conditional reconstruction model: a Gaussian encoder, a generator
//! whose residual up-blocks use class-conditional batch norm, and a
//! projection discriminator.

pub mod losses;
pub mod train;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::data::Image;
use crate::error::{Error, Result};
use crate::nn::{BatchNorm, Conv2d, Embedding, Float, Fwd, Linear, ParamStore, Tape, Tensor, Var};

pub use losses::{kl_term, reconstruction_distance, ssim};
pub use train::{train_cgan, CganConfig};

pub const CHECKPOINT_KIND: &str = "cgan";
const LEAK: f64 = 0.2;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CganArch {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub classes: usize,
    pub latent: usize,
    /// Encoder conv widths; the first conv keeps resolution, the rest halve it.
    pub enc_widths: Vec<usize>,
    /// Generator widths: the first is the seed feature map, each further
    /// entry is one up-block that doubles resolution.
    pub gen_widths: Vec<usize>,
    /// Discriminator block widths and whether each block halves resolution.
    pub dis_widths: Vec<usize>,
    pub dis_down: Vec<bool>,
}

impl CganArch {
    /// Desk-scale layout for 28x28 (two up-blocks from 7x7) or 32x32 (three
    /// up-blocks from 4x4) inputs.
    pub fn desk(shape: [usize; 3], classes: usize, latent: usize) -> Self {
        let [c, h, w] = shape;
        let mut dis_down = Vec::new();
        let mut s = h;
        for _ in 0..4 {
            let down = s % 2 == 0 && s / 2 >= 4;
            if down {
                s /= 2;
            }
            dis_down.push(down);
        }
        let gen_widths = if h % 4 == 0 && (h / 4) % 2 == 1 { vec![32, 16, 8] } else { vec![64, 32, 16, 8] };
        CganArch {
            channels: c,
            height: h,
            width: w,
            classes,
            latent,
            enc_widths: vec![8, 16, 32, 32],
            gen_widths,
            dis_widths: vec![8, 16, 32, 32],
            dis_down,
        }
    }

    fn seed_size(&self) -> (usize, usize) {
        let ups = self.gen_widths.len() - 1;
        (self.height >> ups, self.width >> ups)
    }

    pub fn validate(&self) -> Result<()> {
        let ups = self.gen_widths.len().saturating_sub(1);
        if self.gen_widths.is_empty() || (self.height >> ups) << ups != self.height || (self.width >> ups) << ups != self.width {
            return Err(Error::Config(format!(
                "{}x{} images cannot be generated by {ups} doubling blocks",
                self.height, self.width
            )));
        }
        if self.enc_widths.is_empty() || self.dis_widths.is_empty() || self.dis_widths.len() != self.dis_down.len() {
            return Err(Error::Config("encoder and discriminator need at least one block".into()));
        }
        if self.latent == 0 || self.classes < 2 {
            return Err(Error::Config("latent size and class count must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
struct EncoderNet {
    convs: Vec<Conv2d>,
    head: Linear,
}

#[derive(Clone, Debug)]
struct UpBlock {
    bn1: BatchNorm,
    conv1: Conv2d,
    bn2: BatchNorm,
    conv2: Conv2d,
    short: Conv2d,
}

#[derive(Clone, Debug)]
struct GeneratorNet {
    fc: Linear,
    blocks: Vec<UpBlock>,
    bn_out: BatchNorm,
    conv_out: Conv2d,
}

#[derive(Clone, Debug)]
struct DownBlock {
    conv1: Conv2d,
    conv2: Conv2d,
    short: Conv2d,
    down: bool,
    pre_act: bool,
}

#[derive(Clone, Debug)]
struct DiscriminatorNet {
    blocks: Vec<DownBlock>,
    head: Linear,
    embed: Embedding,
}

fn conv_out(h: usize) -> usize {
    (h - 1) / 2 + 1
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub iteration: usize,
    pub encoder: f64,
    pub generator: f64,
    pub discriminator: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CganMeta {
    pub seed: u64,
    pub config: Option<CganConfig>,
    pub history: Vec<LossRecord>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EncodeMode {
    Mean,
    Sample(u64),
}

#[derive(Clone, Debug, PartialEq)]
pub struct LatentVector {
    pub z: Vec<f32>,
    pub mu: Vec<f32>,
    /// Per-coordinate variance.
    pub sigma: Vec<f32>,
}

pub struct LossTerms<'t, T: Float> {
    pub kl: Var<'t, T>,
    pub dist: Var<'t, T>,
    pub adv: Var<'t, T>,
    pub dis: Var<'t, T>,
    pub recon: Var<'t, T>,
}

impl<'t, T: Float> LossTerms<'t, T> {
    pub fn encoder_loss(&self, kl_weight: f64) -> Var<'t, T> {
        self.kl.mul_scalar(T::c(kl_weight)).add(self.dist).mean_all()
    }

    pub fn generator_loss(&self, adv_weight: f64) -> Var<'t, T> {
        self.dist.add(self.adv.mul_scalar(T::c(adv_weight))).mean_all()
    }

    pub fn discriminator_loss(&self) -> Var<'t, T> {
        self.dis.mean_all()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BatchLosses {
    pub encoder: f64,
    pub generator: f64,
    pub discriminator: f64,
}

/// Encoder, generator and discriminator with separate parameter stores.
#[derive(Clone, Debug)]
pub struct Cgan<T: Float> {
    arch: CganArch,
    pub enc_store: ParamStore<T>,
    pub gen_store: ParamStore<T>,
    pub dis_store: ParamStore<T>,
    enc: EncoderNet,
    gen: GeneratorNet,
    dis: DiscriminatorNet,
    pub meta: CganMeta,
}

impl<T: Float> Cgan<T> {
    pub fn init(arch: CganArch, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (mut es, mut gs, mut ds) = (ParamStore::new(), ParamStore::new(), ParamStore::new());

        let mut convs = Vec::new();
        let (mut c_in, mut h, mut w) = (arch.channels, arch.height, arch.width);
        for (i, &cw) in arch.enc_widths.iter().enumerate() {
            let stride = if i == 0 { 1 } else { 2 };
            convs.push(Conv2d::new(&mut es, &format!("enc.conv{i}"), c_in, cw, 3, stride, 1, &mut rng));
            if stride == 2 {
                h = conv_out(h);
                w = conv_out(w);
            }
            c_in = cw;
        }
        let head = Linear::new(&mut es, "enc.head", c_in * h * w, 2 * arch.latent, &mut rng);
        let enc = EncoderNet { convs, head };

        let (sh, sw) = arch.seed_size();
        let g0 = arch.gen_widths[0];
        let fc = Linear::new(&mut gs, "gen.fc", arch.latent, g0 * sh * sw, &mut rng);
        let mut blocks = Vec::new();
        for (i, pair) in arch.gen_widths.windows(2).enumerate() {
            let (a, b) = (pair[0], pair[1]);
            let n = format!("gen.block{i}");
            blocks.push(UpBlock {
                bn1: BatchNorm::new(&mut gs, &format!("{n}.cbn1"), a, arch.classes),
                conv1: Conv2d::new(&mut gs, &format!("{n}.conv1"), a, b, 3, 1, 1, &mut rng),
                bn2: BatchNorm::new(&mut gs, &format!("{n}.cbn2"), b, arch.classes),
                conv2: Conv2d::new(&mut gs, &format!("{n}.conv2"), b, b, 3, 1, 1, &mut rng),
                short: Conv2d::new(&mut gs, &format!("{n}.short"), a, b, 1, 1, 0, &mut rng),
            });
        }
        let last = *arch.gen_widths.last().expect("validated non-empty");
        let bn_out = BatchNorm::new(&mut gs, "gen.bn_out", last, 1);
        let conv_out_ = Conv2d::new(&mut gs, "gen.conv_out", last, arch.channels, 3, 1, 1, &mut rng);
        let gen = GeneratorNet { fc, blocks, bn_out, conv_out: conv_out_ };

        let mut dblocks = Vec::new();
        let mut c_in = arch.channels;
        for (i, (&cw, &down)) in arch.dis_widths.iter().zip(&arch.dis_down).enumerate() {
            let n = format!("dis.block{i}");
            dblocks.push(DownBlock {
                conv1: Conv2d::new(&mut ds, &format!("{n}.conv1"), c_in, cw, 3, 1, 1, &mut rng),
                conv2: Conv2d::new(&mut ds, &format!("{n}.conv2"), cw, cw, 3, 1, 1, &mut rng),
                short: Conv2d::new(&mut ds, &format!("{n}.short"), c_in, cw, 1, 1, 0, &mut rng),
                down,
                pre_act: i > 0,
            });
            c_in = cw;
        }
        let dhead = Linear::new(&mut ds, "dis.head", c_in, 1, &mut rng);
        let embed = Embedding::new(&mut ds, "dis.embed", arch.classes, c_in, &mut rng);
        let dis = DiscriminatorNet { blocks: dblocks, head: dhead, embed };

        Ok(Cgan {
            arch,
            enc_store: es,
            gen_store: gs,
            dis_store: ds,
            enc,
            gen,
            dis,
            meta: CganMeta { seed, ..CganMeta::default() },
        })
    }

    pub fn arch(&self) -> &CganArch {
        &self.arch
    }

    pub fn cast<U: Float>(&self) -> Cgan<U> {
        Cgan {
            arch: self.arch.clone(),
            enc_store: self.enc_store.cast(),
            gen_store: self.gen_store.cast(),
            dis_store: self.dis_store.cast(),
            enc: self.enc.clone(),
            gen: self.gen.clone(),
            dis: self.dis.clone(),
            meta: self.meta.clone(),
        }
    }

    /// `(mu, logvar)`, each `N x J`.
    pub fn encoder_fwd<'t>(&self, f: &Fwd<'_, 't, T>, x: Var<'t, T>) -> (Var<'t, T>, Var<'t, T>) {
        let mut h = x;
        for c in &self.enc.convs {
            h = c.forward(f, h).leaky_relu(LEAK);
        }
        let out = self.enc.head.forward(f, h.flatten());
        let j = self.arch.latent;
        (out.narrow(1, 0, j), out.narrow(1, j, j))
    }

    /// Images in [0,1] from `N x J` latents and one label per row.
    pub fn generator_fwd<'t>(&self, f: &Fwd<'_, 't, T>, z: Var<'t, T>, labels: &[usize]) -> Var<'t, T> {
        let n = z.shape()[0];
        let (sh, sw) = self.arch.seed_size();
        let mut h = self.gen.fc.forward(f, z).reshape(vec![n, self.arch.gen_widths[0], sh, sw]);
        for b in &self.gen.blocks {
            let o = b.bn1.forward(f, h, labels).relu().upsample2();
            let o = b.conv1.forward(f, o);
            let o = b.conv2.forward(f, b.bn2.forward(f, o, labels).relu());
            h = o.add(b.short.forward(f, h.upsample2()));
        }
        let h = self.gen.bn_out.forward(f, h, &[]).relu();
        self.gen.conv_out.forward(f, h).sigmoid()
    }

    /// Unconditional head plus class-projection term, shape `[N]`.
    pub fn discriminator_fwd<'t>(&self, f: &Fwd<'_, 't, T>, x: Var<'t, T>, labels: &[usize]) -> Var<'t, T> {
        let n = x.shape()[0];
        let mut h = x;
        for b in &self.dis.blocks {
            let inp = if b.pre_act { h.relu() } else { h };
            let mut o = b.conv2.forward(f, b.conv1.forward(f, inp).relu());
            let mut s = b.short.forward(f, h);
            if b.down {
                o = o.avg_pool(2);
                s = s.avg_pool(2);
            }
            h = o.add(s);
        }
        let c = h.shape()[1];
        let feat = h.relu().sum_keep(&[2, 3]).reshape(vec![n, c]);
        let uncond = self.dis.head.forward(f, feat).reshape(vec![n]);
        let e = self.dis.embed.forward(f, labels);
        uncond.add(e.mul(feat).sum_keep(&[1]).reshape(vec![n]))
    }

    /// Per-sample loss terms on one batch, with `z = mu + exp(lv/2) * eps`.
    /// `fd` may bind the discriminator frozen or trainable.
    pub fn loss_terms<'t>(
        &self,
        fe: &Fwd<'_, 't, T>,
        fg: &Fwd<'_, 't, T>,
        fd: &Fwd<'_, 't, T>,
        x: Var<'t, T>,
        labels: &[usize],
        eps: Var<'t, T>,
        lambda: f64,
    ) -> LossTerms<'t, T> {
        let (mu, lv) = self.encoder_fwd(fe, x);
        let z = mu.add(lv.mul_scalar(T::c(0.5)).exp().mul(eps));
        let recon = self.generator_fwd(fg, z, labels);
        let s_fake = self.discriminator_fwd(fd, recon, labels);
        let s_real = self.discriminator_fwd(fd, x, labels);
        LossTerms {
            kl: losses::kl_var(mu, lv),
            dist: losses::distance_var(x, recon, lambda),
            adv: losses::gen_adv_var(s_fake),
            dis: losses::dis_var(s_real, s_fake),
            recon,
        }
    }

    /// Inference-mode encoder, generator and discriminator losses for a
    /// batch, given the standard-normal draw `eps` (`N x J`).
    pub fn batch_losses(&self, x: &Tensor<T>, labels: &[usize], eps: &Tensor<T>, lambda: f64) -> Result<BatchLosses> {
        self.check_input(x.shape())?;
        self.check_labels(labels)?;
        if labels.len() != x.shape()[0] || eps.shape() != [labels.len(), self.arch.latent] {
            return Err(Error::Precondition("one label and one latent draw per image required".into()));
        }
        let tape = Tape::new();
        let (be, bg, bd) =
            (self.enc_store.bind_frozen(&tape), self.gen_store.bind_frozen(&tape), self.dis_store.bind_frozen(&tape));
        let (fe, fg, fd) = (Fwd::new(&be, false), Fwd::new(&bg, false), Fwd::new(&bd, false));
        let t = self.loss_terms(&fe, &fg, &fd, tape.constant(x.clone()), labels, tape.constant(eps.clone()), lambda);
        Ok(BatchLosses {
            encoder: t.encoder_loss(1.0).value().item().as_f64(),
            generator: t.generator_loss(1.0).value().item().as_f64(),
            discriminator: t.discriminator_loss().value().item().as_f64(),
        })
    }

    fn check_input(&self, shape: &[usize]) -> Result<()> {
        let want = [self.arch.channels, self.arch.height, self.arch.width];
        if shape.len() != 4 || shape[1..] != want {
            return Err(Error::Shape { expected: want.to_vec(), got: shape.to_vec() });
        }
        Ok(())
    }

    fn check_labels(&self, labels: &[usize]) -> Result<()> {
        match labels.iter().find(|&&y| y >= self.arch.classes) {
            Some(&y) => Err(Error::InvalidClass { label: y, classes: self.arch.classes }),
            None => Ok(()),
        }
    }

    /// Inference-mode `(mu, logvar)` for a batch.
    pub fn encode_batch(&self, x: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
        self.check_input(x.shape())?;
        let tape = Tape::new();
        let b = self.enc_store.bind_frozen(&tape);
        let (mu, lv) = self.encoder_fwd(&Fwd::new(&b, false), tape.constant(x.clone()));
        Ok((mu.value(), lv.value()))
    }

    /// Inference-mode reconstructions.
    pub fn reconstruct_batch(&self, z: &Tensor<T>, labels: &[usize]) -> Result<Tensor<T>> {
        self.check_labels(labels)?;
        if z.shape() != [labels.len(), self.arch.latent] {
            return Err(Error::Shape { expected: vec![labels.len(), self.arch.latent], got: z.shape().to_vec() });
        }
        let tape = Tape::new();
        let b = self.gen_store.bind_frozen(&tape);
        Ok(self.generator_fwd(&Fwd::new(&b, false), tape.constant(z.clone()), labels).value())
    }

    /// Mean-mode encode followed by conditional reconstruction.
    pub fn encode_reconstruct_batch(&self, x: &Tensor<T>, labels: &[usize]) -> Result<Tensor<T>> {
        let (mu, _) = self.encode_batch(x)?;
        self.reconstruct_batch(&mu, labels)
    }

    pub fn discriminate_batch(&self, x: &Tensor<T>, labels: &[usize]) -> Result<Vec<T>> {
        self.check_input(x.shape())?;
        self.check_labels(labels)?;
        if labels.len() != x.shape()[0] {
            return Err(Error::Precondition("one label per image required".into()));
        }
        let tape = Tape::new();
        let b = self.dis_store.bind_frozen(&tape);
        Ok(self.discriminator_fwd(&Fwd::new(&b, false), tape.constant(x.clone()), labels).value().into_vec())
    }
}

impl Cgan<f32> {
    pub fn encode(&self, x: &Image, mode: EncodeMode) -> Result<LatentVector> {
        let (mu, lv) = self.encode_batch(&x.to_tensor())?;
        let mu = mu.into_vec();
        let sigma: Vec<f32> = lv.data().iter().map(|v| v.exp()).collect();
        let z = match mode {
            EncodeMode::Mean => mu.clone(),
            EncodeMode::Sample(seed) => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                mu.iter()
                    .zip(&sigma)
                    .map(|(m, s)| {
                        let e: f64 = StandardNormal.sample(&mut rng);
                        m + s.sqrt() * e as f32
                    })
                    .collect()
            }
        };
        Ok(LatentVector { z, mu, sigma })
    }

    pub fn reconstruct(&self, z: &[f32], y: usize) -> Result<Image> {
        let t = self.reconstruct_batch(&Tensor::new(vec![1, z.len()], z.to_vec()), &[y])?;
        Ok(Image::from_planar_unchecked([self.arch.channels, self.arch.height, self.arch.width], t.into_vec()))
    }

    pub fn discriminate(&self, x: &Image, y: usize) -> Result<f64> {
        Ok(self.discriminate_batch(&x.to_tensor(), &[y])?[0] as f64)
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let mut c = Checkpoint::new(CHECKPOINT_KIND);
        c.set("arch", &self.arch)?;
        c.set("seed", &self.meta.seed)?;
        c.set("meta", &self.meta)?;
        c.put_store("encoder/", &self.enc_store);
        c.put_store("generator/", &self.gen_store);
        c.put_store("discriminator/", &self.dis_store);
        Ok(c)
    }

    pub fn from_checkpoint(c: &Checkpoint) -> Result<Self> {
        c.expect_kind(CHECKPOINT_KIND)?;
        let mut g = Cgan::init(c.get("arch")?, 0)?;
        c.take_store("encoder/", &mut g.enc_store)?;
        c.take_store("generator/", &mut g.gen_store)?;
        c.take_store("discriminator/", &mut g.dis_store)?;
        g.meta = c.get("meta")?;
        Ok(g)
    }
}
