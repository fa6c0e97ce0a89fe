//! Adversarial training: losses, Adam, the alternating discriminator and
//! generator steps, and the epoch loop with metric logging and checkpoints.
//!
//! Every source of randomness (initialization, shuffling, latent draws and
//! dropout masks) comes from one seeded ChaCha8 stream owned by the
//! [`Trainer`], so a run is a pure function of its config and dataset and a
//! resumed run continues bit for bit.

mod adam;
mod checkpoint;
mod metrics;

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{self, Bound, LayerHyper, Model, ModelSpec, LATENT_DIM};
use crate::tensor::{Element, Graph, Tensor};

pub use adam::{adam_update, AdamConfig, AdamState};
pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, NamedTensor, RngState, CHECKPOINT_VERSION};
pub use metrics::{EpochSummary, MetricRow, MetricsWriter, METRICS_HEADER};

/// Generator objective.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GeneratorLoss {
    /// Minimize `BCE(D(G(z)), 1)`.
    #[default]
    NonSaturating,
    /// Minimize `mean log(1 - D(G(z)))`, which flattens once the
    /// discriminator wins.
    Saturating,
}

/// How real and fake samples reach the discriminator.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DiscBatching {
    /// Separate forward passes and losses for the real and the fake batch,
    /// averaged.
    #[default]
    Split,
    /// One forward pass over the concatenated batch, so batch normalization
    /// sees real and fake statistics mixed together.
    Combined,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: u64,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_epsilon: f64,
    pub latent_dim: usize,
    pub seed: u64,
    /// Write a checkpoint every this many epochs; 0 writes only the last.
    pub checkpoint_every: u64,
    pub scale_factor: usize,
    pub dropout_p: f64,
    pub bn_eps: f64,
    pub bn_momentum: f64,
    pub leaky_slope: f64,
    pub generator_loss: GeneratorLoss,
    pub disc_batching: DiscBatching,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let hyper = LayerHyper::default();
        Self {
            epochs: 1000,
            batch_size: 32,
            learning_rate: 0.002,
            beta1: 0.5,
            beta2: 0.999,
            adam_epsilon: 1e-8,
            latent_dim: LATENT_DIM,
            seed: 0,
            checkpoint_every: 50,
            scale_factor: 1,
            dropout_p: hyper.dropout_p,
            bn_eps: hyper.bn_eps,
            bn_momentum: hyper.bn_momentum,
            leaky_slope: hyper.leaky_slope,
            generator_loss: GeneratorLoss::NonSaturating,
            disc_batching: DiscBatching::Split,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if !(self.beta1 > 0.0 && self.beta1 < self.beta2 && self.beta2 < 1.0) {
            return fail(format!(
                "need 0 < beta1 < beta2 < 1, got beta1 = {}, beta2 = {}",
                self.beta1, self.beta2
            ));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return fail(format!("learning_rate must be positive, got {}", self.learning_rate));
        }
        if !(self.adam_epsilon > 0.0) {
            return fail(format!("adam_epsilon must be positive, got {}", self.adam_epsilon));
        }
        if self.batch_size < 2 {
            return fail(format!(
                "batch_size must be at least 2 for batch normalization, got {}",
                self.batch_size
            ));
        }
        if self.latent_dim != LATENT_DIM {
            return fail(format!(
                "latent_dim is fixed at {LATENT_DIM} by the architecture, got {}",
                self.latent_dim
            ));
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return fail(format!("dropout_p must lie in [0, 1), got {}", self.dropout_p));
        }
        if !(self.bn_eps > 0.0) || !(self.bn_momentum > 0.0 && self.bn_momentum <= 1.0) {
            return fail("bn_eps must be positive and bn_momentum in (0, 1]".into());
        }
        model::image_size(self.scale_factor).map_err(|e| Error::Config(e.to_string()))?;
        Ok(())
    }

    pub fn hyper(&self) -> LayerHyper {
        LayerHyper {
            dropout_p: self.dropout_p,
            bn_eps: self.bn_eps,
            bn_momentum: self.bn_momentum,
            leaky_slope: self.leaky_slope,
        }
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.learning_rate,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.adam_epsilon,
        }
    }

    pub fn generator_spec(&self) -> Result<ModelSpec> {
        ModelSpec::generator(self.scale_factor, &self.hyper())
    }

    pub fn discriminator_spec(&self) -> Result<ModelSpec> {
        ModelSpec::discriminator(self.scale_factor, &self.hyper())
    }

    pub fn image_size(&self) -> Result<usize> {
        model::image_size(self.scale_factor)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        Ok(cfg)
    }
}

/// Mean clamped binary cross-entropy of probabilities against labels.
pub fn bce_loss<T: Element>(predictions: &[T], labels: &[T]) -> Result<f64> {
    if predictions.len() != labels.len() || predictions.is_empty() {
        return Err(Error::shape("bce_loss", &[predictions.len()], &[labels.len()]));
    }
    let total: f64 = predictions
        .iter()
        .zip(labels)
        .map(|(&p, &y)| crate::tensor::graph::bce_prob_term(p.as_f64(), y.as_f64()))
        .sum();
    Ok(total / predictions.len() as f64)
}

/// `[batch, dim]` latent codes drawn i.i.d. from `Uniform(-1, 1)`.
pub fn sample_noise<T: Element>(batch: usize, dim: usize, rng: &mut dyn RngCore) -> Result<Tensor<T>> {
    if batch == 0 || dim == 0 {
        return Err(Error::invalid("sample_noise needs batch and dim > 0"));
    }
    let data = (0..batch * dim)
        .map(|_| T::from_f64_lossy(rng.gen_range(-1.0..1.0)))
        .collect();
    Tensor::new([batch, dim], data)
}

fn sigmoid_mean<T: Element>(logits: &[T]) -> f64 {
    logits.iter().map(|&l| 1.0 / (1.0 + (-l.as_f64()).exp())).sum::<f64>() / logits.len() as f64
}

/// A recorded discriminator objective.
pub struct DiscriminatorPass<T> {
    /// Scalar loss node to differentiate.
    pub loss: crate::tensor::Var,
    pub loss_d: T,
    pub loss_real: T,
    pub loss_fake: T,
    pub d_real_mean: f64,
    pub d_fake_mean: f64,
    /// One binding per discriminator forward pass.
    pub bounds: Vec<Bound>,
}

/// Records `(BCE(D(real), 1) + BCE(D(fake), 0)) / 2` on `g`. `fake` enters
/// as a constant, so nothing flows back into the generator.
pub fn discriminator_objective<T: Element>(
    g: &mut Graph<T>,
    disc: &mut Model<T>,
    real: &Tensor<T>,
    fake: &Tensor<T>,
    batching: DiscBatching,
    rng: &mut dyn RngCore,
) -> Result<DiscriminatorPass<T>> {
    let nr = real.shape().first().copied().unwrap_or(0);
    let nf = fake.shape().first().copied().unwrap_or(0);
    let half = T::from_f64_lossy(0.5);
    match batching {
        DiscBatching::Split => {
            let xr = g.constant(real.clone());
            let br = disc.forward_logits(g, xr, rng, true)?;
            let lr = g.bce_with_logits(br.output, &vec![T::one(); nr])?;
            let xf = g.constant(fake.clone());
            let bf = disc.forward_logits(g, xf, rng, true)?;
            let lf = g.bce_with_logits(bf.output, &vec![T::zero(); nf])?;
            let sum = g.add(lr, lf)?;
            let loss = g.scale(sum, half);
            Ok(DiscriminatorPass {
                loss,
                loss_d: g.value(loss).item()?,
                loss_real: g.value(lr).item()?,
                loss_fake: g.value(lf).item()?,
                d_real_mean: sigmoid_mean(g.value(br.output).data()),
                d_fake_mean: sigmoid_mean(g.value(bf.output).data()),
                bounds: vec![br, bf],
            })
        }
        DiscBatching::Combined => {
            if nr != nf {
                return Err(Error::invalid("combined batching needs equal real and fake batch sizes"));
            }
            let x = g.constant(Tensor::concat_batch(&[real, fake])?);
            let b = disc.forward_logits(g, x, rng, true)?;
            let mut targets = vec![T::one(); nr];
            targets.resize(nr + nf, T::zero());
            // equal halves, so the mean over the joint batch is the mean of the two losses
            let loss = g.bce_with_logits(b.output, &targets)?;
            let logits = g.value(b.output).data();
            let part = |ls: &[T], y: f64| {
                let s: f64 = ls
                    .iter()
                    .map(|&l| crate::tensor::graph::bce_logit_term(l.as_f64(), y))
                    .sum();
                T::from_f64_lossy(s / ls.len() as f64)
            };
            let loss_real = part(&logits[..nr], 1.0);
            let loss_fake = part(&logits[nr..], 0.0);
            let d_real_mean = sigmoid_mean(&logits[..nr]);
            let d_fake_mean = sigmoid_mean(&logits[nr..]);
            Ok(DiscriminatorPass {
                loss,
                loss_d: (loss_real + loss_fake) * half,
                loss_real,
                loss_fake,
                d_real_mean,
                d_fake_mean,
                bounds: vec![b],
            })
        }
    }
}

/// A recorded generator objective.
pub struct GeneratorPass<T> {
    pub loss: crate::tensor::Var,
    pub loss_g: T,
    pub d_fake_mean: f64,
    pub bound: Bound,
}

/// Records the generator loss for latent batch `z` on `g`. The
/// discriminator's parameters enter as constants.
pub fn generator_objective<T: Element>(
    g: &mut Graph<T>,
    gen: &mut Model<T>,
    disc: &mut Model<T>,
    z: &Tensor<T>,
    kind: GeneratorLoss,
    rng: &mut dyn RngCore,
) -> Result<GeneratorPass<T>> {
    let zv = g.constant(z.clone());
    let bound = gen.forward(g, zv, rng, true)?;
    let logits = disc.forward_logits(g, bound.output, rng, false)?.output;
    let n = g.value(logits).numel();
    let loss = match kind {
        GeneratorLoss::NonSaturating => g.bce_with_logits(logits, &vec![T::one(); n])?,
        GeneratorLoss::Saturating => {
            let l = g.bce_with_logits(logits, &vec![T::zero(); n])?;
            g.neg(l)
        }
    };
    Ok(GeneratorPass {
        loss,
        loss_g: g.value(loss).item()?,
        d_fake_mean: sigmoid_mean(g.value(logits).data()),
        bound,
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DiscriminatorStep {
    pub loss_d: f64,
    pub loss_d_real: f64,
    pub loss_d_fake: f64,
    pub d_real_mean: f64,
    pub d_fake_mean: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GeneratorStep {
    pub loss_g: f64,
    pub d_fake_mean: f64,
}

fn non_finite(what: &str) -> Error {
    Error::NonFinite {
        what: what.into(),
        epoch: 0,
        step: 0,
        diagnostic: None,
    }
}

/// One discriminator update. Fakes come from a fresh latent batch pushed
/// through the generator in its current mode; only the discriminator's
/// parameters change.
pub fn discriminator_step<T: Element>(
    disc: &mut Model<T>,
    gen: &mut Model<T>,
    real: &Tensor<T>,
    rng: &mut dyn RngCore,
    adam: &mut AdamState<T>,
    config: &TrainConfig,
) -> Result<DiscriminatorStep> {
    let batch = real.shape().first().copied().unwrap_or(0);
    let z = sample_noise::<T>(batch, config.latent_dim, rng)?;
    let fake = {
        let mut g = Graph::new();
        let zv = g.constant(z);
        let out = gen.forward(&mut g, zv, rng, false)?.output;
        g.value(out).clone()
    };
    let mut g = Graph::new();
    let pass = discriminator_objective(&mut g, disc, real, &fake, config.disc_batching, rng)?;
    let step = DiscriminatorStep {
        loss_d: pass.loss_d.as_f64(),
        loss_d_real: pass.loss_real.as_f64(),
        loss_d_fake: pass.loss_fake.as_f64(),
        d_real_mean: pass.d_real_mean,
        d_fake_mean: pass.d_fake_mean,
    };
    if ![step.loss_d, step.loss_d_real, step.loss_d_fake].iter().all(|v| v.is_finite()) {
        return Err(non_finite("discriminator loss"));
    }
    let grads = g.backward(pass.loss)?;
    disc.zero_grad();
    for b in &pass.bounds {
        disc.accumulate_grads(&grads, b)?;
    }
    adam_update(disc.parameters_mut(), adam, &config.adam())?;
    Ok(step)
}

/// One generator update on a fresh latent batch of `batch` codes.
pub fn generator_step<T: Element>(
    disc: &mut Model<T>,
    gen: &mut Model<T>,
    batch: usize,
    rng: &mut dyn RngCore,
    adam: &mut AdamState<T>,
    config: &TrainConfig,
) -> Result<GeneratorStep> {
    let z = sample_noise::<T>(batch, config.latent_dim, rng)?;
    generator_step_on(disc, gen, &z, rng, adam, config)
}

/// Generator update on a given latent batch. The reported loss is the one
/// measured before the update.
pub fn generator_step_on<T: Element>(
    disc: &mut Model<T>,
    gen: &mut Model<T>,
    z: &Tensor<T>,
    rng: &mut dyn RngCore,
    adam: &mut AdamState<T>,
    config: &TrainConfig,
) -> Result<GeneratorStep> {
    let mut g = Graph::new();
    let pass = generator_objective(&mut g, gen, disc, z, config.generator_loss, rng)?;
    let loss_g = pass.loss_g.as_f64();
    if !loss_g.is_finite() {
        return Err(non_finite("generator loss"));
    }
    let grads = g.backward(pass.loss)?;
    gen.zero_grad();
    gen.accumulate_grads(&grads, &pass.bound)?;
    adam_update(gen.parameters_mut(), adam, &config.adam())?;
    Ok(GeneratorStep {
        loss_g,
        d_fake_mean: pass.d_fake_mean,
    })
}

/// Gathers the listed samples of a `[n, ...]` tensor into a new batch.
pub fn gather_batch<T: Element>(data: &Tensor<T>, indices: &[usize]) -> Result<Tensor<T>> {
    let n = data.shape().first().copied().unwrap_or(0);
    let per: usize = data.shape()[1..].iter().product();
    let mut out = Vec::with_capacity(indices.len() * per);
    for &i in indices {
        if i >= n {
            return Err(Error::invalid(format!("sample index {i} out of range for {n} samples")));
        }
        out.extend_from_slice(&data.data()[i * per..(i + 1) * per]);
    }
    let mut shape = vec![indices.len()];
    shape.extend_from_slice(&data.shape()[1..]);
    Tensor::new(shape, out)
}

/// Where and how often a run writes its artifacts.
#[derive(Clone, Debug, Default)]
pub struct RunOutput {
    /// Directory for `metrics.csv` and checkpoints; `None` keeps everything
    /// in memory.
    pub dir: Option<PathBuf>,
}

/// Full training state: both models, both optimizers, the random stream
/// and progress counters.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub config: TrainConfig,
    pub generator: Model<f32>,
    pub discriminator: Model<f32>,
    pub adam_g: AdamState<f32>,
    pub adam_d: AdamState<f32>,
    pub rng: ChaCha8Rng,
    /// Completed epochs.
    pub epoch: u64,
    /// Completed steps across all epochs.
    pub step: u64,
}

impl Trainer {
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let generator = Model::new(config.generator_spec()?, &mut rng)?;
        let discriminator = Model::new(config.discriminator_spec()?, &mut rng)?;
        Ok(Self {
            adam_g: AdamState::for_params(generator.parameters().map(|(_, t)| t)),
            adam_d: AdamState::for_params(discriminator.parameters().map(|(_, t)| t)),
            config,
            generator,
            discriminator,
            rng,
            epoch: 0,
            step: 0,
        })
    }

    pub fn from_checkpoint(cp: &Checkpoint) -> Result<Self> {
        cp.config.validate()?;
        Ok(Self {
            config: cp.config.clone(),
            generator: cp.generator_model()?,
            discriminator: cp.discriminator_model()?,
            adam_g: cp.adam_g.clone(),
            adam_d: cp.adam_d.clone(),
            rng: cp.rng.restore(),
            epoch: cp.epoch,
            step: cp.step,
        })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint::capture(self)
    }

    fn check_dataset(&self, data: &Tensor<f32>) -> Result<usize> {
        let side = self.config.image_size()?;
        let want = [3, side, side];
        if data.rank() != 4 || data.shape()[1..] != want {
            return Err(Error::shape("training dataset", data.shape(), &[0, 3, side, side]));
        }
        let n = data.shape()[0];
        if n < self.config.batch_size {
            return Err(Error::invalid(format!(
                "dataset of {n} images is smaller than one batch of {}",
                self.config.batch_size
            )));
        }
        Ok(n)
    }

    /// Runs one epoch: a seeded shuffle, then for every full batch one
    /// discriminator step followed by one generator step. A trailing
    /// partial batch is skipped.
    pub fn train_epoch(&mut self, data: &Tensor<f32>) -> Result<Vec<MetricRow>> {
        let n = self.check_dataset(data)?;
        let epoch = self.epoch + 1;
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut self.rng);
        let bs = self.config.batch_size;
        let mut rows = Vec::with_capacity(n / bs);
        for chunk in order.chunks_exact(bs) {
            let real = gather_batch(data, chunk)?;
            let step = self.step + 1;
            let d = discriminator_step(
                &mut self.discriminator,
                &mut self.generator,
                &real,
                &mut self.rng,
                &mut self.adam_d,
                &self.config,
            )
            .map_err(|e| locate(e, epoch, step))?;
            let gs = generator_step(
                &mut self.discriminator,
                &mut self.generator,
                bs,
                &mut self.rng,
                &mut self.adam_g,
                &self.config,
            )
            .map_err(|e| locate(e, epoch, step))?;
            self.step = step;
            rows.push(MetricRow {
                epoch,
                step,
                loss_g: gs.loss_g,
                loss_d: d.loss_d,
                loss_d_real: d.loss_d_real,
                loss_d_fake: d.loss_d_fake,
                d_real_mean: d.d_real_mean,
                d_fake_mean: d.d_fake_mean,
            });
        }
        self.epoch = epoch;
        Ok(rows)
    }

    /// Trains until `config.epochs` epochs are complete. With an output
    /// directory, appends to `metrics.csv`, writes
    /// `checkpoint_epoch_NNNNN.mdcg` every `checkpoint_every` epochs and
    /// `last.mdcg` at the end. On a non-finite loss the pre-step state is
    /// saved to `diagnostic.mdcg` and the error is returned.
    pub fn run(
        &mut self,
        data: &Tensor<f32>,
        out: &RunOutput,
        on_epoch: &mut dyn FnMut(&EpochSummary),
    ) -> Result<Vec<MetricRow>> {
        self.check_dataset(data)?;
        let mut writer = match &out.dir {
            Some(dir) => {
                fs::create_dir_all(dir)?;
                Some(MetricsWriter::open(&dir.join("metrics.csv"), self.step == 0)?)
            }
            None => None,
        };
        let mut all = Vec::new();
        while self.epoch < self.config.epochs {
            let before = self.clone();
            let rows = match self.train_epoch(data) {
                Ok(rows) => rows,
                Err(Error::NonFinite {
                    what, epoch, step, ..
                }) => {
                    let diagnostic = match &out.dir {
                        Some(dir) => {
                            let path = dir.join("diagnostic.mdcg");
                            // rewind to the epoch start, then replay to the failing step
                            *self = before;
                            self.replay_until(data, step)?;
                            save_checkpoint(&self.checkpoint(), &path)?;
                            Some(path)
                        }
                        None => None,
                    };
                    return Err(Error::NonFinite {
                        what,
                        epoch,
                        step,
                        diagnostic,
                    });
                }
                Err(e) => return Err(e),
            };
            if let Some(w) = writer.as_mut() {
                for r in &rows {
                    w.write(r)?;
                }
                w.flush()?;
            }
            on_epoch(&EpochSummary::from_rows(self.epoch, &rows));
            if let Some(dir) = &out.dir {
                let every = self.config.checkpoint_every;
                if every > 0 && self.epoch % every == 0 {
                    save_checkpoint(&self.checkpoint(), &dir.join(format!("checkpoint_epoch_{:05}.mdcg", self.epoch)))?;
                }
            }
            all.extend(rows);
        }
        if let Some(dir) = &out.dir {
            save_checkpoint(&self.checkpoint(), &dir.join("last.mdcg"))?;
        }
        Ok(all)
    }

    /// Re-runs the current epoch up to, but not including, global step
    /// `stop`.
    fn replay_until(&mut self, data: &Tensor<f32>, stop: u64) -> Result<()> {
        let n = data.shape()[0];
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut self.rng);
        let bs = self.config.batch_size;
        for chunk in order.chunks_exact(bs) {
            if self.step + 1 >= stop {
                break;
            }
            let real = gather_batch(data, chunk)?;
            discriminator_step(
                &mut self.discriminator,
                &mut self.generator,
                &real,
                &mut self.rng,
                &mut self.adam_d,
                &self.config,
            )?;
            generator_step(
                &mut self.discriminator,
                &mut self.generator,
                bs,
                &mut self.rng,
                &mut self.adam_g,
                &self.config,
            )?;
            self.step += 1;
        }
        Ok(())
    }
}

fn locate(e: Error, epoch: u64, step: u64) -> Error {
    match e {
        Error::NonFinite { what, diagnostic, .. } => Error::NonFinite {
            what,
            epoch,
            step,
            diagnostic,
        },
        other => other,
    }
}

/// Trains from scratch on `data` (`[n, 3, H, W]` in model range).
pub fn train(config: TrainConfig, data: &Tensor<f32>, out: &RunOutput) -> Result<(Trainer, Vec<MetricRow>)> {
    let mut trainer = Trainer::new(config)?;
    let rows = trainer.run(data, out, &mut |_| {})?;
    Ok((trainer, rows))
}

/// Path of the final checkpoint written by [`Trainer::run`].
pub fn last_checkpoint_path(dir: &Path) -> PathBuf {
    dir.join("last.mdcg")
}
