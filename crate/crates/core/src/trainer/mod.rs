//! Reward-feedback domain fine-tuning: ground-truth latents are noised at a
//! timestep drawn from the loss window, the denoiser predicts the clean
//! latent, the decoded image is scored by an alignment model, and only the
//! attention adapters receive gradients.

pub mod adam;
pub mod checkpoint;

pub use adam::AdamState;
pub use checkpoint::{Checkpoint, CheckpointMeta};

use std::path::Path;

use candle_core::{DType, Tensor, Var};
use image::RgbImage;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::conditioning::{condition_embeddings, EmbeddingSequence, WeightVector};
use crate::diffusion::{attach_lora, seeded_normal, TinyDenoiser};
use crate::zoo::dense::mix_seed;
use crate::zoo::{AlignmentScorer, LatentAutoencoder};
use crate::{Error, Result};

/// Maps per-sample rewards to the scalar loss.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum LossMapping {
    /// `-mean(reward)`.
    NegatedReward,
    /// `mean(relu(margin - reward))`.
    Hinge { margin: f64 },
}

impl LossMapping {
    pub fn apply(&self, rewards: &Tensor) -> Result<Tensor> {
        Ok(match self {
            LossMapping::NegatedReward => rewards.mean_all()?.neg()?,
            LossMapping::Hinge { margin } => {
                rewards.neg()?.affine(1.0, *margin)?.relu()?.mean_all()?
            }
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: u64,
    pub scheduler_timesteps: usize,
    pub loss_timestep_range: (usize, usize),
    pub adapter_rank: usize,
    pub adapter_alpha: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub scale_exp: i64,
    pub cross_attention_only: bool,
    /// 0 = single-shot clean-sample estimate; n > 0 = n-step DDIM rollout.
    pub rollout_steps: usize,
    /// Steps between checkpoints (0 = only at the end).
    pub checkpoint_every: u64,
    pub renormalize: bool,
    pub loss: LossMapping,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 5e-5,
            epochs: 300,
            scheduler_timesteps: 100,
            loss_timestep_range: (40, 99),
            adapter_rank: 8,
            adapter_alpha: 8.0,
            batch_size: 4,
            seed: 42,
            scale_exp: 2,
            cross_attention_only: false,
            rollout_steps: 0,
            checkpoint_every: 0,
            renormalize: false,
            loss: LossMapping::NegatedReward,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            errs.push(format!(
                "train.learning_rate must be >= 0, got {}",
                self.learning_rate
            ));
        }
        let (lo, hi) = self.loss_timestep_range;
        if lo > hi || hi >= self.scheduler_timesteps {
            errs.push(format!(
                "train.loss_window {lo}:{hi} must lie within [0, {})",
                self.scheduler_timesteps
            ));
        }
        if self.adapter_rank == 0 {
            errs.push("train.rank must be >= 1".into());
        }
        if self.batch_size == 0 {
            errs.push("train.batch_size must be >= 1".into());
        }
        if !(0..=4).contains(&self.scale_exp) {
            errs.push(format!(
                "train.scale_exp must be in 0..=4, got {}",
                self.scale_exp
            ));
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(errs))
        }
    }
}

/// Handles to one adapted site. `a`/`b` share storage with the denoiser.
#[derive(Debug, Clone)]
pub struct AdapterParam {
    pub site: String,
    pub a: Var,
    pub b: Var,
}

#[derive(Debug, Clone)]
pub struct TrainState {
    pub adapter_params: Vec<AdapterParam>,
    pub frozen_base_fingerprint: String,
    pub optimizer: AdamState,
    pub epoch: u64,
    pub global_step: u64,
    pub reward_history: Vec<(u64, f64)>,
    pub skipped_nonfinite: u64,
}

impl TrainState {
    pub fn vars(&self) -> Vec<&Var> {
        self.adapter_params
            .iter()
            .flat_map(|p| [&p.a, &p.b])
            .collect()
    }

    pub fn trainable_parameter_count(&self) -> usize {
        self.vars().iter().map(|v| v.as_tensor().elem_count()).sum()
    }
}

fn collect_params(denoiser: &TinyDenoiser) -> Vec<AdapterParam> {
    denoiser
        .layers()
        .iter()
        .filter_map(|l| {
            l.adapter.as_ref().map(|a| AdapterParam {
                site: l.name.clone(),
                a: a.a.clone(),
                b: a.b.clone(),
            })
        })
        .collect()
}

/// Adds zero-initialized low-rank adapters to the attention projections.
pub fn attach_adapters(denoiser: &mut TinyDenoiser, config: &TrainConfig) -> Result<TrainState> {
    let frozen_base_fingerprint = denoiser.base_fingerprint()?;
    attach_lora(
        denoiser,
        config.adapter_rank,
        config.adapter_alpha,
        config.cross_attention_only,
        mix_seed(config.seed, 7),
    )?;
    let adapter_params = collect_params(denoiser);
    let vars: Vec<&Var> = adapter_params.iter().flat_map(|p| [&p.a, &p.b]).collect();
    let optimizer = AdamState::new(&vars)?;
    Ok(TrainState {
        adapter_params,
        frozen_base_fingerprint,
        optimizer,
        epoch: 0,
        global_step: 0,
        reward_history: Vec::new(),
        skipped_nonfinite: 0,
    })
}

/// Encodes the ground-truth image and noises it to level `t` with noise from
/// `noise_seed`.
pub fn init_latent_from_ground_truth(
    image: &RgbImage,
    autoencoder: &dyn LatentAutoencoder,
    denoiser: &TinyDenoiser,
    t: usize,
    noise_seed: u64,
) -> Result<Tensor> {
    if t >= denoiser.schedule().timesteps() {
        return Err(Error::InvalidArgument(format!(
            "timestep {t} outside the schedule"
        )));
    }
    let clean = autoencoder.encode(image, denoiser.dtype())?;
    let noise = seeded_normal(noise_seed, clean.dims2()?, denoiser.dtype())?;
    denoiser.schedule().add_noise(&clean, &noise, t)
}

/// Uniform integer draw from the inclusive `range`.
pub fn sample_loss_timestep<R: Rng + ?Sized>(range: (usize, usize), rng: &mut R) -> usize {
    rng.random_range(range.0..=range.1)
}

/// One training example with precomputed encodings.
#[derive(Debug, Clone)]
pub struct TrainSample {
    pub record_id: String,
    pub caption: String,
    /// Clean latent tokens of the ground-truth image.
    pub latent: Tensor,
    pub grid: (usize, usize),
    pub embedding: EmbeddingSequence,
    pub weights: WeightVector,
}

impl TrainSample {
    pub fn new(
        record_id: &str,
        caption: &str,
        image: &RgbImage,
        autoencoder: &dyn LatentAutoencoder,
        dtype: DType,
        embedding: EmbeddingSequence,
        weights: WeightVector,
    ) -> Result<Self> {
        let f = crate::zoo::autoencoder::LATENT_FACTOR;
        Ok(TrainSample {
            record_id: record_id.to_string(),
            caption: caption.to_string(),
            latent: autoencoder.encode(image, dtype)?,
            grid: ((image.height() / f) as usize, (image.width() / f) as usize),
            embedding,
            weights,
        })
    }
}

/// Per-sample randomness of one step: loss timestep and noise.
#[derive(Debug, Clone)]
pub struct StepDraw {
    pub t: usize,
    pub noise: Tensor,
}

/// Draws are a pure function of `(seed, global_step)` so a resumed run
/// replays the exact sequence.
pub fn draw_step(
    config: &TrainConfig,
    global_step: u64,
    batch: &[&TrainSample],
    dtype: DType,
) -> Result<Vec<StepDraw>> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(global_step);
    batch
        .iter()
        .map(|s| {
            let t = sample_loss_timestep(config.loss_timestep_range, &mut rng);
            let noise = seeded_normal(rng.random(), s.latent.dims2()?, dtype)?;
            Ok(StepDraw { t, noise })
        })
        .collect()
}

/// Differentiable loss of a batch and the per-sample rewards.
pub fn batch_loss(
    denoiser: &TinyDenoiser,
    autoencoder: &dyn LatentAutoencoder,
    reward_model: &dyn AlignmentScorer,
    config: &TrainConfig,
    batch: &[&TrainSample],
    draws: &[StepDraw],
) -> Result<(Tensor, Vec<f64>)> {
    let dtype = denoiser.dtype();
    let schedule = denoiser.schedule();
    let mut rewards = Vec::with_capacity(batch.len());
    for (sample, draw) in batch.iter().zip(draws) {
        let cond = condition_embeddings(&sample.embedding, &sample.weights, config.renormalize)?
            .to_tensor(dtype)?;
        let clean = sample.latent.to_dtype(dtype)?;
        let mut x = schedule.add_noise(&clean, &draw.noise, draw.t)?;
        let predicted = if config.rollout_steps == 0 {
            let eps = denoiser.forward(&x, draw.t, &cond, sample.grid)?;
            schedule.predict_clean(&x, &eps, draw.t)?
        } else {
            let n = config.rollout_steps.min(draw.t.max(1));
            let levels: Vec<usize> = (0..n).map(|i| draw.t * (n - i) / n).collect();
            let mut clean_est = x.clone();
            for (i, &t) in levels.iter().enumerate() {
                let eps = denoiser.forward(&x, t, &cond, sample.grid)?;
                clean_est = schedule.predict_clean(&x, &eps, t)?;
                let prev = levels
                    .get(i + 1)
                    .map(|&p| schedule.alpha_bar(p))
                    .unwrap_or(1.0);
                x = ((&clean_est * prev.sqrt())? + (eps * (1.0 - prev).sqrt())?)?;
            }
            clean_est
        };
        let image = autoencoder.decode(&predicted, sample.grid)?;
        rewards.push(
            reward_model
                .score_tensor(&image, &sample.caption)?
                .reshape(1)?,
        );
    }
    let rewards = Tensor::cat(&rewards, 0)?;
    let values: Vec<f64> = rewards.to_dtype(DType::F64)?.to_vec1()?;
    Ok((config.loss.apply(&rewards)?, values))
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    pub loss: f64,
    pub mean_reward: f64,
    pub skipped: bool,
}

/// One optimizer step on `batch`. Non-finite losses skip the update and bump
/// `skipped_nonfinite`; the step counter advances either way.
pub fn train_step(
    state: &mut TrainState,
    denoiser: &TinyDenoiser,
    batch: &[&TrainSample],
    autoencoder: &dyn LatentAutoencoder,
    reward_model: &dyn AlignmentScorer,
    config: &TrainConfig,
) -> Result<StepOutcome> {
    let draws = draw_step(config, state.global_step, batch, denoiser.dtype())?;
    let (loss, rewards) = batch_loss(denoiser, autoencoder, reward_model, config, batch, &draws)?;
    let loss_value = loss.to_dtype(DType::F64)?.to_scalar::<f64>()?;
    let mean_reward = rewards.iter().sum::<f64>() / rewards.len().max(1) as f64;
    let step = state.global_step;
    state.global_step += 1;
    if !loss_value.is_finite() {
        state.skipped_nonfinite += 1;
        return Ok(StepOutcome {
            loss: loss_value,
            mean_reward,
            skipped: true,
        });
    }
    let grads = loss.backward()?;
    let vars = state.vars();
    let g: Vec<Option<Tensor>> = vars
        .iter()
        .map(|v| grads.get(v.as_tensor()).cloned())
        .collect();
    let vars: Vec<Var> = vars.into_iter().cloned().collect();
    let refs: Vec<&Var> = vars.iter().collect();
    state.optimizer.update(&refs, &g, config.learning_rate)?;
    state.reward_history.push((step, mean_reward));
    Ok(StepOutcome {
        loss: loss_value,
        mean_reward,
        skipped: false,
    })
}

pub fn steps_per_epoch(samples: usize, batch_size: usize) -> u64 {
    samples.div_ceil(batch_size.max(1)) as u64
}

/// Sample order of `epoch`, seeded by `(seed, epoch)`.
pub fn epoch_order(n: usize, seed: u64, epoch: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(mix_seed(seed, epoch)));
    order
}

pub fn make_checkpoint(
    state: &TrainState,
    denoiser: &TinyDenoiser,
    config: &TrainConfig,
) -> Checkpoint {
    let mut tensors = Vec::new();
    for (i, p) in state.adapter_params.iter().enumerate() {
        tensors.push((format!("adapter.{}.a", p.site), p.a.as_tensor().clone()));
        tensors.push((format!("adapter.{}.b", p.site), p.b.as_tensor().clone()));
        tensors.push((
            format!("adam.m.{}.a", p.site),
            state.optimizer.m[2 * i].clone(),
        ));
        tensors.push((
            format!("adam.m.{}.b", p.site),
            state.optimizer.m[2 * i + 1].clone(),
        ));
        tensors.push((
            format!("adam.v.{}.a", p.site),
            state.optimizer.v[2 * i].clone(),
        ));
        tensors.push((
            format!("adam.v.{}.b", p.site),
            state.optimizer.v[2 * i + 1].clone(),
        ));
    }
    Checkpoint {
        meta: CheckpointMeta {
            format: checkpoint::FORMAT.to_string(),
            backbone_id: denoiser.id().to_string(),
            base_fingerprint: state.frozen_base_fingerprint.clone(),
            config: config.clone(),
            epoch: state.epoch,
            global_step: state.global_step,
            adam_step: state.optimizer.step,
            skipped_nonfinite: state.skipped_nonfinite,
            reward_history: state.reward_history.clone(),
            sites: state
                .adapter_params
                .iter()
                .map(|p| p.site.clone())
                .collect(),
            payload_sha256: String::new(),
        },
        tensors,
    }
}

/// Installs the adapters of `checkpoint` into an un-adapted `denoiser` after
/// checking that it was trained on this exact base.
pub fn load_adapters(denoiser: &mut TinyDenoiser, checkpoint: &Checkpoint) -> Result<()> {
    if denoiser.base_fingerprint()? != checkpoint.meta.base_fingerprint {
        return Err(Error::CheckpointIncompatible);
    }
    let dtype = denoiser.dtype();
    let scale = checkpoint.meta.config.adapter_alpha / checkpoint.meta.config.adapter_rank as f64;
    for site in &checkpoint.meta.sites {
        let get = |k: &str| {
            checkpoint
                .tensor(&format!("adapter.{site}.{k}"))
                .ok_or_else(|| Error::CheckpointIntegrity(format!("missing tensor for {site}")))
        };
        let (a, b) = (get("a")?.to_dtype(dtype)?, get("b")?.to_dtype(dtype)?);
        let layer = denoiser
            .layers_mut()
            .iter_mut()
            .find(|l| &l.name == site)
            .ok_or(Error::CheckpointIncompatible)?;
        if a.dims() != [a.dims()[0], layer.in_dim()] || b.dims() != [layer.out_dim(), a.dims()[0]] {
            return Err(Error::CheckpointIncompatible);
        }
        layer.adapter = Some(crate::diffusion::Adapter {
            a: Var::from_tensor(&a)?,
            b: Var::from_tensor(&b)?,
            scale,
        });
    }
    Ok(())
}

/// Restores a training state from a checkpoint onto a fresh base.
pub fn resume_state(
    denoiser: &mut TinyDenoiser,
    checkpoint: &Checkpoint,
    config: &TrainConfig,
) -> Result<TrainState> {
    if denoiser.base_fingerprint()? != checkpoint.meta.base_fingerprint {
        return Err(Error::CheckpointIncompatible);
    }
    if checkpoint.meta.config.adapter_rank != config.adapter_rank
        || checkpoint.meta.config.adapter_alpha != config.adapter_alpha
        || checkpoint.meta.config.cross_attention_only != config.cross_attention_only
    {
        return Err(Error::CheckpointIncompatible);
    }
    load_adapters(denoiser, checkpoint)?;
    let adapter_params = collect_params(denoiser);
    let dtype = denoiser.dtype();
    let moment = |kind: &str, site: &str, k: &str| -> Result<Tensor> {
        Ok(checkpoint
            .tensor(&format!("adam.{kind}.{site}.{k}"))
            .ok_or_else(|| {
                Error::CheckpointIntegrity(format!("missing optimizer moment for {site}"))
            })?
            .to_dtype(dtype)?)
    };
    let mut m = Vec::new();
    let mut v = Vec::new();
    for p in &adapter_params {
        for k in ["a", "b"] {
            m.push(moment("m", &p.site, k)?);
            v.push(moment("v", &p.site, k)?);
        }
    }
    Ok(TrainState {
        adapter_params,
        frozen_base_fingerprint: checkpoint.meta.base_fingerprint.clone(),
        optimizer: AdamState {
            step: checkpoint.meta.adam_step,
            m,
            v,
        },
        epoch: checkpoint.meta.epoch,
        global_step: checkpoint.meta.global_step,
        reward_history: checkpoint.meta.reward_history.clone(),
        skipped_nonfinite: checkpoint.meta.skipped_nonfinite,
    })
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub state: TrainState,
    pub checkpoint: Checkpoint,
}

/// Epochs x batches of [`train_step`], stopping at `config.epochs` or at
/// `stop_at_step` if given. With `resume`, continues from that checkpoint.
/// Checkpoints go to `checkpoint_path` every `checkpoint_every` steps and at
/// the end.
#[allow(clippy::too_many_arguments)]
pub fn run_training(
    samples: &[TrainSample],
    config: &TrainConfig,
    denoiser: &mut TinyDenoiser,
    autoencoder: &dyn LatentAutoencoder,
    reward_model: &dyn AlignmentScorer,
    checkpoint_path: Option<&Path>,
    resume: Option<&Path>,
    stop_at_step: Option<u64>,
) -> Result<TrainOutcome> {
    config.validate()?;
    if samples.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let mut state = match resume {
        Some(path) => resume_state(denoiser, &Checkpoint::load(path)?, config)?,
        None => attach_adapters(denoiser, config)?,
    };
    let per_epoch = steps_per_epoch(samples.len(), config.batch_size);
    let total = config.epochs * per_epoch;
    let end = stop_at_step.map_or(total, |s| s.min(total));
    while state.global_step < end {
        let epoch = state.global_step / per_epoch;
        let within = (state.global_step % per_epoch) as usize;
        state.epoch = epoch;
        let order = epoch_order(samples.len(), config.seed, epoch);
        let batch: Vec<&TrainSample> = order
            .iter()
            .skip(within * config.batch_size)
            .take(config.batch_size)
            .map(|&i| &samples[i])
            .collect();
        let outcome = train_step(
            &mut state,
            denoiser,
            &batch,
            autoencoder,
            reward_model,
            config,
        )?;
        log::debug!(
            "step {} loss {:.6} reward {:.6}",
            state.global_step,
            outcome.loss,
            outcome.mean_reward
        );
        if let Some(path) = checkpoint_path {
            if config.checkpoint_every > 0 && state.global_step % config.checkpoint_every == 0 {
                make_checkpoint(&state, denoiser, config).save(path)?;
            }
        }
    }
    state.epoch = state.global_step / per_epoch;
    let mut checkpoint = make_checkpoint(&state, denoiser, config);
    if let Some(path) = checkpoint_path {
        checkpoint.save(path)?;
    }
    if denoiser.base_fingerprint()? != state.frozen_base_fingerprint {
        return Err(Error::InvalidArgument(
            "base weights changed during training".into(),
        ));
    }
    Ok(TrainOutcome { state, checkpoint })
}
