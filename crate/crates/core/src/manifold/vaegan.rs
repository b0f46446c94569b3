//! VAE-GAN manifold models: an encoder predicting `q(z|x)`, a deterministic
//! decoder and an optional discriminator.

use rand::seq::SliceRandom;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::Decoder;
use crate::autodiff::{Tape, Var};
use crate::error::{bail, Error, Result};
use crate::nn::{step_network, Layer, Mode, Network};
use crate::optim::{AdamConfig, AdamState};
use crate::rng;
use crate::serialize::Container;
use crate::tensor::Tensor;

/// Lower bound on discriminator probabilities inside logarithms.
pub const DIS_PROB_FLOOR: f64 = 1e-7;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Scope {
    ClassSpecific { class_id: usize },
    ClassAgnostic,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ManifoldArch {
    /// Three 4x4 stride-2 convolutions with ReLU and batch norm, mirrored by
    /// transposed convolutions in the decoder. Requires 28x28 images.
    Conv { channels: [usize; 3], hidden: usize },
    /// Two hidden fully connected layers in every network.
    Mlp { hidden: usize },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ManifoldConfig {
    pub latent_dim: usize,
    /// Weight of the L1 reconstruction term.
    pub lambda: f64,
    /// Weight of the adversarial term; 0 trains a plain VAE without
    /// discriminator.
    pub adversarial_weight: f64,
    /// Latent codes are constrained to `[-latent_bound, latent_bound]^d`.
    pub latent_bound: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub lr_decay: f64,
    pub weight_decay: f64,
    pub arch: ManifoldArch,
    pub seed: u64,
}

impl Default for ManifoldConfig {
    fn default() -> Self {
        Self {
            latent_dim: 10,
            lambda: 3.0,
            adversarial_weight: 1.0,
            latent_bound: 2.0,
            epochs: 10,
            batch_size: 100,
            learning_rate: 0.005,
            lr_decay: 0.9,
            weight_decay: 1e-4,
            arch: ManifoldArch::Conv { channels: [16, 32, 64], hidden: 128 },
            seed: 0,
        }
    }
}

/// Analytic `KL(N(mu, diag(exp(logvar))) || N(0, I))`.
pub fn kl_divergence(mu: &[f64], logvar: &[f64]) -> f64 {
    0.5 * mu
        .iter()
        .zip(logvar)
        .map(|(m, lv)| m * m + lv.exp() - 1.0 - lv)
        .sum::<f64>()
}

/// Monte-Carlo estimate of the same divergence: `(mean, standard error)`
/// of `log q(z) - log p(z)` over `samples` draws from `q`.
pub fn kl_monte_carlo(mu: &[f64], logvar: &[f64], samples: usize, rng: &mut rng::Rng) -> (f64, f64) {
    let (mut sum, mut sum2) = (0.0, 0.0);
    for _ in 0..samples {
        let mut v = 0.0;
        for (m, lv) in mu.iter().zip(logvar) {
            let e: f64 = StandardNormal.sample(rng);
            let z = m + (0.5 * lv).exp() * e;
            v += -0.5 * lv - 0.5 * e * e + 0.5 * z * z;
        }
        sum += v;
        sum2 += v * v;
    }
    let n = samples as f64;
    let mean = sum / n;
    let var = (sum2 / n - mean * mean).max(0.0) * n / (n - 1.0);
    (mean, (var / n).sqrt())
}

fn encoder_layers(arch: &ManifoldArch, shape: &[usize], outputs: usize) -> Result<Vec<Layer>> {
    let mut layers = Vec::new();
    match arch {
        ManifoldArch::Conv { channels, hidden } => {
            let mut c = shape[0];
            for &out in channels {
                layers.push(Layer::Conv2d { in_channels: c, out_channels: out, kernel: 4, stride: 2, padding: 1 });
                layers.push(Layer::Relu);
                layers.push(Layer::BatchNorm { features: out });
                c = out;
            }
            layers.push(Layer::Flatten);
            let mut s = shape.to_vec();
            for l in &layers {
                s = l.output_shape(&s)?;
            }
            layers.push(Layer::Linear { inputs: s[0], outputs: *hidden });
            layers.push(Layer::Relu);
            layers.push(Layer::Linear { inputs: *hidden, outputs });
        }
        ManifoldArch::Mlp { hidden } => {
            let n = shape.iter().product();
            layers.extend([
                Layer::Flatten,
                Layer::Linear { inputs: n, outputs: *hidden },
                Layer::Relu,
                Layer::Linear { inputs: *hidden, outputs: *hidden },
                Layer::Relu,
                Layer::Linear { inputs: *hidden, outputs },
            ]);
        }
    }
    Ok(layers)
}

fn decoder_layers(arch: &ManifoldArch, latent: usize, shape: &[usize]) -> Result<Vec<Layer>> {
    match arch {
        ManifoldArch::Conv { channels, hidden } => {
            if shape[1..] != [28, 28] {
                bail!(Shape, "the convolutional manifold architecture needs 28x28 images, got {:?}", shape);
            }
            let [c1, c2, c3] = *channels;
            Ok(vec![
                Layer::Linear { inputs: latent, outputs: *hidden },
                Layer::Relu,
                Layer::BatchNorm { features: *hidden },
                Layer::Linear { inputs: *hidden, outputs: c3 * 9 },
                Layer::Relu,
                Layer::BatchNorm { features: c3 * 9 },
                Layer::Reshape { shape: vec![c3, 3, 3] },
                Layer::ConvTranspose2d { in_channels: c3, out_channels: c2, kernel: 3, stride: 2, padding: 0 },
                Layer::Relu,
                Layer::BatchNorm { features: c2 },
                Layer::ConvTranspose2d { in_channels: c2, out_channels: c1, kernel: 4, stride: 2, padding: 1 },
                Layer::Relu,
                Layer::BatchNorm { features: c1 },
                Layer::ConvTranspose2d { in_channels: c1, out_channels: shape[0], kernel: 4, stride: 2, padding: 1 },
                Layer::Sigmoid,
            ])
        }
        ManifoldArch::Mlp { hidden } => Ok(vec![
            Layer::Linear { inputs: latent, outputs: *hidden },
            Layer::Relu,
            Layer::Linear { inputs: *hidden, outputs: *hidden },
            Layer::Relu,
            Layer::Linear { inputs: *hidden, outputs: shape.iter().product() },
            Layer::Sigmoid,
            Layer::Reshape { shape: shape.to_vec() },
        ]),
    }
}

/// Loss values recorded on a tape.
pub struct VaeGanLosses {
    pub encoder: Var,
    pub decoder: Var,
    pub discriminator: Option<Var>,
    /// Batch mean of the analytic KL term.
    pub kl: Var,
    /// Batch mean of the per-image L1 reconstruction error.
    pub reconstruction: Var,
}

/// Parameters of all sub-networks placed on one tape.
pub struct Bound {
    pub encoder: Vec<Var>,
    pub decoder: Vec<Var>,
    pub discriminator: Vec<Var>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ManifoldModel {
    pub encoder: Network,
    pub decoder: Network,
    pub discriminator: Option<Network>,
    pub scope: Scope,
    pub config: ManifoldConfig,
}

#[derive(Serialize, Deserialize)]
struct Meta {
    kind: String,
    scope: Scope,
    image_shape: Vec<usize>,
    config: ManifoldConfig,
}

impl ManifoldModel {
    pub fn new(image_shape: &[usize], scope: Scope, config: ManifoldConfig) -> Result<Self> {
        if config.latent_dim == 0 || !(config.latent_bound > 0.0) || !(config.lambda > 0.0) {
            bail!(InvalidArgument, "latent_dim, latent_bound and lambda must be positive");
        }
        if !(config.adversarial_weight >= 0.0) {
            bail!(InvalidArgument, "adversarial_weight must be non-negative");
        }
        let d = config.latent_dim;
        let s = config.seed;
        let encoder = Network::new(encoder_layers(&config.arch, image_shape, 2 * d)?, image_shape, rng::derive_seed(s, "encoder", 0))?;
        let decoder = Network::new(decoder_layers(&config.arch, d, image_shape)?, &[d], rng::derive_seed(s, "decoder", 0))?;
        if decoder.output_shape() != image_shape {
            bail!(Shape, "decoder produces {:?}, expected {:?}", decoder.output_shape(), image_shape);
        }
        let discriminator = if config.adversarial_weight > 0.0 {
            Some(Network::new(
                encoder_layers(&config.arch, image_shape, 1)?,
                image_shape,
                rng::derive_seed(s, "discriminator", 0),
            )?)
        } else {
            None
        };
        Ok(Self { encoder, decoder, discriminator, scope, config })
    }

    pub fn latent_dim(&self) -> usize {
        self.config.latent_dim
    }

    pub fn image_shape(&self) -> &[usize] {
        self.encoder.input_shape()
    }

    fn set_mode(&mut self, mode: Mode) {
        self.encoder.set_mode(mode);
        self.decoder.set_mode(mode);
        if let Some(d) = &mut self.discriminator {
            d.set_mode(mode);
        }
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Bound {
        Bound {
            encoder: self.encoder.bind(tape, trainable),
            decoder: self.decoder.bind(tape, trainable),
            discriminator: self.discriminator.as_ref().map(|d| d.bind(tape, trainable)).unwrap_or_default(),
        }
    }

    /// Encoder mean and log-variance on the tape, using the networks' modes.
    fn encode_on_tape(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<(Var, Var, Vec<crate::autodiff::BatchStats>)> {
        let d = self.config.latent_dim;
        let f = self.encoder.forward(tape, &p.encoder, x)?;
        let mu = tape.columns(f.output, 0, d)?;
        let logvar = tape.columns(f.output, d, d)?;
        Ok((mu, logvar, f.batch_stats))
    }

    /// Record all three losses for `batch` with reparameterization noise
    /// `eps: [B, d]`. Returns the losses and batch-norm statistics of the
    /// encoder, decoder and (real-image) discriminator passes.
    pub fn losses(
        &self,
        tape: &mut Tape,
        p: &Bound,
        batch: Var,
        eps: &Tensor,
    ) -> Result<(VaeGanLosses, [Vec<crate::autodiff::BatchStats>; 3])> {
        let x = tape.value(batch);
        if x.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
            bail!(InvalidArgument, "manifold training images must lie in [0, 1]");
        }
        let (mu, logvar, enc_stats) = self.encode_on_tape(tape, p, batch)?;
        // z = mu + exp(logvar / 2) * eps
        let half = tape.scale(logvar, 0.5);
        let sigma = tape.exp(half);
        let e = tape.constant(eps.clone());
        let noise = tape.mul(sigma, e)?;
        let z = tape.add(mu, noise)?;
        let dec = self.decoder.forward(tape, &p.decoder, z)?;
        let diff = tape.sub(batch, dec.output)?;
        let abs = tape.abs(diff);
        let per_image = tape.sum_rows(abs);
        let reconstruction = tape.mean(per_image);
        let mu2 = tape.square(mu);
        let var = tape.exp(logvar);
        let t = tape.add(mu2, var)?;
        let t = tape.sub(t, logvar)?;
        let t = tape.add_scalar(t, -1.0);
        let kl_rows = tape.sum_rows(t);
        let kl_mean = tape.mean(kl_rows);
        let kl = tape.scale(kl_mean, 0.5);
        let weighted = tape.scale(reconstruction, self.config.lambda);
        let encoder = tape.add(weighted, kl)?;
        let mut dis_stats = Vec::new();
        let (decoder, discriminator) = match &self.discriminator {
            None => (weighted, None),
            Some(dis) => {
                let real = dis.forward(tape, &p.discriminator, batch)?;
                dis_stats = real.batch_stats;
                let fake = dis.forward(tape, &p.discriminator, dec.output)?;
                let log_p = |tape: &mut Tape, logits: Var, flip: bool| {
                    let l = if flip { tape.neg(logits) } else { logits };
                    let prob = tape.sigmoid(l);
                    let lg = tape.ln_floored(prob, DIS_PROB_FLOOR);
                    tape.mean(lg)
                };
                let fake_real = log_p(tape, fake.output, false);
                let adv = tape.scale(fake_real, -self.config.adversarial_weight);
                let decoder = tape.add(weighted, adv)?;
                let real_real = log_p(tape, real.output, false);
                let fake_fake = log_p(tape, fake.output, true);
                let s = tape.add(real_real, fake_fake)?;
                (decoder, Some(tape.neg(s)))
            }
        };
        Ok((
            VaeGanLosses { encoder, decoder, discriminator, kl, reconstruction },
            [enc_stats, dec.batch_stats, dis_stats],
        ))
    }

    /// Encoder means `[B, d]` in evaluation mode.
    pub fn encode_mean(&self, images: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let p = self.encoder.bind(&mut tape, false);
        let x = tape.constant(images.clone());
        let f = self.encoder.forward_in(&mut tape, &p, x, Mode::Eval)?;
        let mu = tape.columns(f.output, 0, self.config.latent_dim)?;
        Ok(tape.value(mu).clone())
    }

    /// Encoder means clamped into the latent box.
    pub fn encode_clamped(&self, images: &Tensor) -> Result<Tensor> {
        let b = self.config.latent_bound;
        Ok(self.encode_mean(images)?.map(|v| v.clamp(-b, b)))
    }

    /// Mean per-pixel L1 error of `dec(mu(x))` in evaluation mode.
    pub fn reconstruction_error(&self, images: &Tensor) -> Result<f64> {
        if images.is_empty() {
            bail!(InvalidArgument, "no images to reconstruct");
        }
        let z = self.encode_mean(images)?;
        let rec = self.decode_values(&z)?;
        let total: f64 = rec.data().iter().zip(images.data()).map(|(a, b)| (a - b).abs()).sum();
        Ok(total / images.len() as f64)
    }

    pub fn to_container(&self) -> Container {
        let meta = Meta {
            kind: "manifold".into(),
            scope: self.scope,
            image_shape: self.image_shape().to_vec(),
            config: self.config.clone(),
        };
        let mut c = Container::new(serde_json::to_string(&meta).expect("metadata serializes"));
        for (prefix, net) in [("encoder", Some(&self.encoder)), ("decoder", Some(&self.decoder)), ("discriminator", self.discriminator.as_ref())] {
            if let Some(net) = net {
                for (name, t) in net.blocks() {
                    c.push(format!("{prefix}.{name}"), t);
                }
            }
        }
        c
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        let meta: Meta = serde_json::from_str(&c.metadata)?;
        if meta.kind != "manifold" {
            bail!(Format, "container holds a {:?}, not a manifold model", meta.kind);
        }
        let mut m = Self::new(&meta.image_shape, meta.scope, meta.config)?;
        let strip = |prefix: &str| -> Vec<(String, Tensor)> {
            c.blocks
                .iter()
                .filter_map(|(n, t)| n.strip_prefix(prefix).map(|s| (s.to_string(), t.clone())))
                .collect()
        };
        m.encoder.load_blocks(&strip("encoder."))?;
        m.decoder.load_blocks(&strip("decoder."))?;
        if let Some(d) = &mut m.discriminator {
            d.load_blocks(&strip("discriminator."))?;
        }
        m.set_mode(Mode::Eval);
        Ok(m)
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        self.to_container().save(path)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        Self::from_container(&Container::load(path)?)
    }
}

impl Decoder for ManifoldModel {
    fn latent_dim(&self) -> usize {
        self.config.latent_dim
    }

    fn bounds(&self) -> (Vec<f64>, Vec<f64>) {
        let b = self.config.latent_bound;
        (vec![-b; self.config.latent_dim], vec![b; self.config.latent_dim])
    }

    fn output_shape(&self) -> &[usize] {
        self.decoder.output_shape()
    }

    fn decode(&self, tape: &mut Tape, z: Var) -> Result<Var> {
        let p = self.decoder.bind(tape, false);
        Ok(self.decoder.forward_in(tape, &p, z, Mode::Eval)?.output)
    }

    fn select(&self, _rows: &[usize]) -> Result<Box<dyn Decoder>> {
        Ok(Box::new(self.clone()))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainingReport {
    /// Held-out mean per-pixel L1 reconstruction error before training.
    pub initial_reconstruction: f64,
    pub final_reconstruction: f64,
    /// Batch-mean KL term of the last epoch.
    pub final_kl: f64,
    pub epoch_losses: Vec<f64>,
}

/// Train a manifold model on `images` (already filtered to the scope) and
/// measure reconstruction on `held_out`.
pub fn train_manifold(images: &Tensor, held_out: &Tensor, scope: Scope, config: &ManifoldConfig) -> Result<(ManifoldModel, TrainingReport)> {
    let n = images.rows();
    if n < 2 {
        bail!(InvalidArgument, "manifold training needs at least two images, got {n}");
    }
    if config.batch_size < 2 || config.epochs == 0 {
        bail!(InvalidArgument, "batch_size must be >= 2 and epochs >= 1");
    }
    let mut model = ManifoldModel::new(&images.shape()[1..], scope, config.clone())?;
    model.set_mode(Mode::Eval);
    let initial_reconstruction = model.reconstruction_error(held_out)?;
    model.set_mode(Mode::Train);
    let adam_cfg = AdamConfig::new(config.learning_rate)
        .with_weight_decay(config.weight_decay)
        .with_lr_decay(config.lr_decay);
    let mut adam_enc = AdamState::for_tensors(adam_cfg, model.encoder.params().iter().map(|p| &p.value));
    let mut adam_dec = AdamState::for_tensors(adam_cfg, model.decoder.params().iter().map(|p| &p.value));
    let mut adam_dis = model
        .discriminator
        .as_ref()
        .map(|d| AdamState::for_tensors(adam_cfg, d.params().iter().map(|p| &p.value)));
    let d = config.latent_dim;
    let mut order: Vec<usize> = (0..n).collect();
    let mut epoch_losses = Vec::new();
    let mut final_kl = 0.0;
    let mut step = 0u64;
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng::stream(config.seed, "manifold-shuffle", epoch as u64));
        let (mut loss_sum, mut kl_sum, mut batches) = (0.0, 0.0, 0usize);
        for chunk in order.chunks(config.batch_size) {
            if chunk.len() < 2 {
                continue;
            }
            let mut r = rng::stream(config.seed, "manifold-eps", step);
            step += 1;
            let eps = Tensor::from_parts(vec![chunk.len(), d], (0..chunk.len() * d).map(|_| StandardNormal.sample(&mut r)).collect());
            let mut tape = Tape::new();
            let p = model.bind(&mut tape, true);
            let x = tape.constant(images.select_rows(chunk));
            let (l, stats) = model.losses(&mut tape, &p, x, &eps)?;
            let enc_v = tape.value(l.encoder).item();
            if !enc_v.is_finite() || !tape.value(l.decoder).item().is_finite() {
                return Err(Error::Diverged(format!("manifold loss became non-finite in epoch {epoch}")));
            }
            loss_sum += enc_v;
            kl_sum += tape.value(l.kl).item();
            batches += 1;
            match (l.discriminator, &mut adam_dis) {
                (Some(ld), Some(adam_d)) => {
                    if !tape.value(ld).item().is_finite() {
                        return Err(Error::Diverged(format!("discriminator loss became non-finite in epoch {epoch}")));
                    }
                    let ge = tape.backward(l.encoder)?;
                    let gd = tape.backward(l.decoder)?;
                    let gs = tape.backward(ld)?;
                    step_network(&mut model.encoder, &mut adam_enc, &ge, &p.encoder)?;
                    step_network(&mut model.decoder, &mut adam_dec, &gd, &p.decoder)?;
                    let dis = model.discriminator.as_mut().expect("discriminator present");
                    step_network(dis, adam_d, &gs, &p.discriminator)?;
                }
                _ => {
                    // Without a discriminator the decoder loss is the
                    // reconstruction part of the encoder loss.
                    let g = tape.backward(l.encoder)?;
                    step_network(&mut model.encoder, &mut adam_enc, &g, &p.encoder)?;
                    step_network(&mut model.decoder, &mut adam_dec, &g, &p.decoder)?;
                }
            }
            model.encoder.update_running_stats(&stats[0]);
            model.decoder.update_running_stats(&stats[1]);
            if let Some(dis) = &mut model.discriminator {
                dis.update_running_stats(&stats[2]);
            }
        }
        adam_enc.end_epoch();
        adam_dec.end_epoch();
        if let Some(a) = &mut adam_dis {
            a.end_epoch();
        }
        epoch_losses.push(loss_sum / batches.max(1) as f64);
        final_kl = kl_sum / batches.max(1) as f64;
    }
    model.set_mode(Mode::Eval);
    let final_reconstruction = model.reconstruction_error(held_out)?;
    Ok((
        model,
        TrainingReport { initial_reconstruction, final_reconstruction, final_kl, epoch_losses },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kl_of_standard_normal_is_zero() {
        assert_eq!(kl_divergence(&[0.0; 10], &[0.0; 10]), 0.0);
    }

    #[test]
    fn kl_matches_monte_carlo() {
        let mu = [0.3, -1.2, 0.8];
        let lv = [-0.5, 0.4, 0.1];
        let (m, se) = kl_monte_carlo(&mu, &lv, 200_000, &mut rng::seeded(4));
        assert!((m - kl_divergence(&mu, &lv)).abs() < 3.0 * se);
    }

    #[test]
    fn half_probability_discriminator_loss_is_two_ln_two() {
        let cfg = ManifoldConfig { arch: ManifoldArch::Mlp { hidden: 8 }, latent_dim: 2, ..Default::default() };
        let mut m = ManifoldModel::new(&[1, 4, 4], Scope::ClassAgnostic, cfg).unwrap();
        let dis = m.discriminator.as_mut().unwrap();
        let k = dis.params().len();
        for p in &mut dis.params_mut()[k - 2..] {
            p.value = Tensor::zeros(p.value.shape());
        }
        let mut tape = Tape::new();
        let p = m.bind(&mut tape, true);
        let x = tape.constant(Tensor::full(&[3, 1, 4, 4], 0.5));
        let (l, _) = m.losses(&mut tape, &p, x, &Tensor::zeros(&[3, 2])).unwrap();
        let v = tape.value(l.discriminator.unwrap()).item();
        assert!((v - 2.0 * std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn decoder_outputs_in_unit_interval() {
        let cfg = ManifoldConfig { arch: ManifoldArch::Conv { channels: [4, 4, 4], hidden: 8 }, ..Default::default() };
        let m = ManifoldModel::new(&[1, 28, 28], Scope::ClassSpecific { class_id: 1 }, cfg).unwrap();
        let z = Tensor::new(vec![2, 10], (0..20).map(|i| (i as f64 - 10.0) * 0.4).collect()).unwrap();
        let x = m.decode_values(&z).unwrap();
        assert_eq!(x.shape(), &[2, 1, 28, 28]);
        assert!(x.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn container_round_trip() {
        let cfg = ManifoldConfig { arch: ManifoldArch::Mlp { hidden: 6 }, latent_dim: 3, ..Default::default() };
        let m = ManifoldModel::new(&[1, 5, 5], Scope::ClassSpecific { class_id: 2 }, cfg).unwrap();
        let mut back = ManifoldModel::from_container(&m.to_container()).unwrap();
        back.set_mode(m.encoder.mode());
        assert_eq!(back, m);
    }
}
