//! Maximum-likelihood training: loss, optimizer, parameter averaging,
//! checkpointing and evaluation in bits per dimension.

pub mod adam;
pub mod checkpoint;
pub mod ema;

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::data::ImageDataset;
use crate::likelihood::{bits_per_dim, dlm_log_prob, LikelihoodError};
use crate::model::{self, Forward, ModelConfig, ModelError, ModelParams};
use crate::tensor::{Graph, Real, TensorError, Var};

pub use adam::{AdamConfig, AdamState};
pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CheckpointError, RngState};
pub use ema::EmaState;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("non-finite loss at step {step}")]
    NonFiniteLoss { step: u64 },
    #[error("non-finite gradient for parameter {0}")]
    NonFiniteGradient(String),
    #[error("state mismatch: {0}")]
    Mismatch(String),
    #[error("invalid option: {0}")]
    Option(String),
    #[error("dataset does not match model: {0}")]
    Dataset(String),
}

impl From<LikelihoodError> for TrainError {
    fn from(e: LikelihoodError) -> Self {
        TrainError::Model(e.into())
    }
}

impl From<TensorError> for TrainError {
    fn from(e: TensorError) -> Self {
        TrainError::Model(e.into())
    }
}

/// Stream carrying parameter initialization.
const INIT_STREAM: u64 = u64::MAX;
/// Stream carrying dropout masks during training.
const DROPOUT_STREAM: u64 = 0;

/// A ChaCha8 generator for `seed` positioned at the start of `stream`.
pub fn seeded_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Initializes parameters from `cfg.seed`.
pub fn initial_params<T: Real>(cfg: &ModelConfig) -> Result<ModelParams<T>, ModelError> {
    model::init_params(cfg, &mut seeded_rng(cfg.seed, INIT_STREAM))
}

/// Appends the mean per-image negative log-likelihood (nats) of `pixels`
/// under `head` to `graph`.
pub fn nll_from_head<T: Real>(
    graph: &mut Graph<T>,
    head: Var,
    pixels: &[u8],
    cfg: &ModelConfig,
) -> Result<Var, TrainError> {
    let n = graph.shape(head)[0];
    let lp = dlm_log_prob(graph, head, pixels, cfg.layout(), cfg.alphabet())?;
    let total = graph.sum(lp)?;
    Ok(graph.scale(total, T::lit(-1.0 / n as f64))?)
}

/// A forward pass ending in the scalar training loss.
pub struct LossPass<T: Real> {
    pub forward: Forward<T>,
    pub loss: Var,
}

impl<T: Real> LossPass<T> {
    /// Mean negative log-likelihood in nats per image.
    pub fn value(&self) -> f64 {
        self.forward.graph.values(self.loss)[0].to_f64().unwrap()
    }

    /// Runs the backward pass and returns one gradient per parameter tensor.
    pub fn gradients(&mut self) -> Result<Vec<Vec<T>>, TrainError> {
        let g = &mut self.forward.graph;
        g.zero_grad();
        g.backward(self.loss)?;
        Ok(self
            .forward
            .params
            .all
            .iter()
            .map(|&v| match g.grad(v) {
                Some(gr) => gr.to_vec(),
                None => vec![T::zero(); g.tensor(v).len()],
            })
            .collect())
    }
}

/// Negative log-likelihood of a batch, differentiable in the parameters.
pub fn nll_loss<T: Real, R: Rng + ?Sized>(
    pixels: &[u8],
    params: &ModelParams<T>,
    cfg: &ModelConfig,
    training: bool,
    rng: &mut R,
) -> Result<LossPass<T>, TrainError> {
    let mut forward = model::forward(pixels, params, cfg, training, rng)?;
    let loss = nll_from_head(&mut forward.graph, forward.head, pixels, cfg)?;
    Ok(LossPass { forward, loss })
}

/// Options of a training run that are not part of the model.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainOptions {
    pub adam: AdamConfig,
    pub ema_decay: f64,
    pub batch: usize,
    /// Global step at which training stops.
    pub steps: u64,
    /// Save every this many steps; 0 disables periodic checkpoints.
    pub checkpoint_every: u64,
    pub checkpoint_path: Option<PathBuf>,
}

impl Default for TrainOptions {
    fn default() -> Self {
        TrainOptions {
            adam: AdamConfig::default(),
            ema_decay: 0.9995,
            batch: 8,
            steps: 1000,
            checkpoint_every: 0,
            checkpoint_path: None,
        }
    }
}

/// One logged training step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepRecord {
    /// Global step after the update, starting at 1.
    pub step: u64,
    pub loss_nats: f64,
    pub bpd: f64,
}

/// Mutable training state.
#[derive(Debug, Clone, PartialEq)]
pub struct Trainer<T> {
    pub config: ModelConfig,
    pub params: ModelParams<T>,
    pub ema: EmaState<T>,
    pub optimizer: AdamState<T>,
    pub step: u64,
    rng: ChaCha8Rng,
}

impl<T: Real> Trainer<T> {
    pub fn new(config: ModelConfig, adam: AdamConfig, ema_decay: f64) -> Result<Self, TrainError> {
        let params = initial_params(&config)?;
        Self::with_params(config, params, adam, ema_decay)
    }

    pub fn with_params(
        config: ModelConfig,
        params: ModelParams<T>,
        adam: AdamConfig,
        ema_decay: f64,
    ) -> Result<Self, TrainError> {
        config.validate()?;
        params.check(&config)?;
        Ok(Trainer {
            ema: EmaState::new(&params, ema_decay)?,
            optimizer: AdamState::new(&params, adam),
            rng: seeded_rng(config.seed, DROPOUT_STREAM),
            step: 0,
            config,
            params,
        })
    }

    pub fn from_checkpoint(ck: Checkpoint<T>) -> Self {
        Trainer {
            config: ck.config,
            params: ck.params,
            ema: ck.ema,
            optimizer: ck.optimizer,
            step: ck.step,
            rng: ck.rng.restore(),
        }
    }

    pub fn checkpoint(&self) -> Checkpoint<T> {
        Checkpoint {
            config: self.config.clone(),
            params: self.params.clone(),
            ema: self.ema.clone(),
            optimizer: self.optimizer.clone(),
            step: self.step,
            rng: RngState::capture(&self.rng),
        }
    }

    /// Dataset indices of the minibatch used at global step `step` (0-based).
    /// Each epoch is a fresh permutation; the last partial batch is kept.
    pub fn batch_indices(&self, step: u64, n: usize, batch: usize) -> Vec<usize> {
        let per_epoch = n.div_ceil(batch) as u64;
        let epoch = step / per_epoch;
        let slot = (step % per_epoch) as usize;
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut seeded_rng(self.config.seed, epoch + 1));
        order[slot * batch..((slot + 1) * batch).min(n)].to_vec()
    }

    /// One optimizer step on the next minibatch.
    pub fn train_step(
        &mut self,
        data: &ImageDataset,
        batch: usize,
    ) -> Result<StepRecord, TrainError> {
        let indices = self.batch_indices(self.step, data.n, batch);
        let pixels = data.gather(&indices);
        let mut pass = nll_loss(&pixels, &self.params, &self.config, true, &mut self.rng).map_err(
            |e| match e {
                TrainError::Model(ModelError::Tensor(TensorError::NonFinite { .. })) => {
                    TrainError::NonFiniteLoss {
                        step: self.step + 1,
                    }
                }
                other => other,
            },
        )?;
        let loss = pass.value();
        if !loss.is_finite() {
            return Err(TrainError::NonFiniteLoss {
                step: self.step + 1,
            });
        }
        let grads = pass.gradients()?;
        self.optimizer.step(&mut self.params, &grads)?;
        self.ema.update(&self.params)?;
        self.step += 1;
        let c = &self.config;
        Ok(StepRecord {
            step: self.step,
            loss_nats: loss,
            bpd: bits_per_dim(loss, 1, c.channels, c.height, c.width)?,
        })
    }
}

/// Checks that `data` holds images the model was built for.
pub fn check_dataset(cfg: &ModelConfig, data: &ImageDataset) -> Result<(), TrainError> {
    let ok = data.channels == cfg.channels
        && data.height == cfg.height
        && data.width == cfg.width
        && data.depth as u32 == cfg.depth;
    if !ok {
        return Err(TrainError::Dataset(format!(
            "dataset is {}x{}x{} depth {}, model expects {}x{}x{} depth {}",
            data.channels,
            data.height,
            data.width,
            data.depth,
            cfg.channels,
            cfg.height,
            cfg.width,
            cfg.depth
        )));
    }
    Ok(())
}

fn emergency_path(path: &Path) -> PathBuf {
    let mut p = path.as_os_str().to_owned();
    p.push(".emergency");
    PathBuf::from(p)
}

/// Trains until `opts.steps`, calling `log` after every step. On a
/// numerical failure the pre-step state is saved next to the checkpoint
/// path with an `.emergency` suffix before the error is returned.
pub fn train<T: Real>(
    trainer: &mut Trainer<T>,
    data: &ImageDataset,
    opts: &TrainOptions,
    mut log: impl FnMut(&StepRecord),
) -> Result<Vec<StepRecord>, TrainError> {
    check_dataset(&trainer.config, data)?;
    if data.n == 0 || opts.batch == 0 {
        return Err(TrainError::Option(
            "training needs at least one image and batch >= 1".into(),
        ));
    }
    let mut records = Vec::new();
    while trainer.step < opts.steps {
        let record = match trainer.train_step(data, opts.batch) {
            Ok(r) => r,
            Err(e) => {
                if let (
                    Some(path),
                    TrainError::NonFiniteLoss { .. } | TrainError::NonFiniteGradient(_),
                ) = (&opts.checkpoint_path, &e)
                {
                    save_checkpoint(&emergency_path(path), &trainer.checkpoint())?;
                }
                return Err(e);
            }
        };
        log(&record);
        records.push(record);
        if let Some(path) = &opts.checkpoint_path {
            if opts.checkpoint_every > 0 && trainer.step.is_multiple_of(opts.checkpoint_every) {
                save_checkpoint(path, &trainer.checkpoint())?;
            }
        }
    }
    if let Some(path) = &opts.checkpoint_path {
        save_checkpoint(path, &trainer.checkpoint())?;
    }
    Ok(records)
}

/// Anything that assigns a log-probability to whole images.
pub trait DensityModel {
    /// Log-probability in nats of each image in a flat `[N,C,H,W]` batch.
    fn image_log_probs(&self, pixels: &[u8]) -> Result<Vec<f64>, TrainError>;

    /// `(C, H, W)` of the images this model scores.
    fn geometry(&self) -> (usize, usize, usize);
}

/// A PixelSNAIL network evaluated with `training = false`.
pub struct PixelSnail<'a, T> {
    pub config: &'a ModelConfig,
    pub params: &'a ModelParams<T>,
}

impl<T: Real> DensityModel for PixelSnail<'_, T> {
    fn image_log_probs(&self, pixels: &[u8]) -> Result<Vec<f64>, TrainError> {
        let mut rng = seeded_rng(0, 0);
        let mut fwd = model::forward(pixels, self.params, self.config, false, &mut rng)?;
        let lp = dlm_log_prob(
            &mut fwd.graph,
            fwd.head,
            pixels,
            self.config.layout(),
            self.config.alphabet(),
        )?;
        let dims = self.config.dims();
        Ok(fwd
            .graph
            .values(lp)
            .chunks(dims)
            .map(|img| img.iter().map(|v| v.to_f64().unwrap()).sum())
            .collect())
    }

    fn geometry(&self) -> (usize, usize, usize) {
        (self.config.channels, self.config.height, self.config.width)
    }
}

/// Assigns every level probability `1/D` independently.
#[derive(Debug, Clone, Copy)]
pub struct UniformModel {
    pub depth: u32,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl DensityModel for UniformModel {
    fn image_log_probs(&self, pixels: &[u8]) -> Result<Vec<f64>, TrainError> {
        let dims = self.channels * self.height * self.width;
        let per_image = -(dims as f64) * (self.depth as f64).ln();
        Ok(vec![per_image; pixels.len() / dims])
    }

    fn geometry(&self) -> (usize, usize, usize) {
        (self.channels, self.height, self.width)
    }
}

/// Mean bits per dimension of `model` over `data`, in batches of `batch`.
pub fn evaluate_model<M: DensityModel + ?Sized>(
    model: &M,
    data: &ImageDataset,
    batch: usize,
) -> Result<f64, TrainError> {
    let (c, h, w) = model.geometry();
    if (data.channels, data.height, data.width) != (c, h, w) {
        return Err(TrainError::Dataset(format!(
            "geometry {}x{}x{}",
            data.channels, data.height, data.width
        )));
    }
    if data.n == 0 || batch == 0 {
        return Err(TrainError::Option(
            "evaluation needs at least one image and batch >= 1".into(),
        ));
    }
    let mut total = 0.0;
    let indices: Vec<usize> = (0..data.n).collect();
    for chunk in indices.chunks(batch) {
        total -= model
            .image_log_probs(&data.gather(chunk))?
            .iter()
            .sum::<f64>();
    }
    Ok(bits_per_dim(total, data.n, c, h, w)?)
}

/// Bits per dimension of `data` under a checkpoint, optionally with the
/// averaged parameters.
pub fn evaluate<T: Real>(
    ck: &Checkpoint<T>,
    data: &ImageDataset,
    use_ema: bool,
    batch: usize,
) -> Result<f64, TrainError> {
    check_dataset(&ck.config, data)?;
    let params = if use_ema { &ck.ema.shadow } else { &ck.params };
    evaluate_model(
        &PixelSnail {
            config: &ck.config,
            params,
        },
        data,
        batch,
    )
}
