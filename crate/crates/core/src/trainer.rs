//! Minibatch training of [`DmfaNetwork`] on complete data with simulated
//! patch masks, checkpointing and exact resume.

use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value as Json};

use crate::dmfa::{ArchConfig, ArchKind, DmfaNetwork, LossMode};
use crate::error::{Error, Result};
use crate::masking::{apply_mask, random_patch_mask, sample_rng, MaskedSample};
use crate::optim::{Adam, AdamConfig};
use crate::tensorio::{self, Container, Dataset, ImageShape, Tensor};

/// Random stream index reserved for network initialization.
const INIT_STREAM: u64 = u64::MAX - 1;
/// Sample index reserved for the per-epoch shuffle.
const SHUFFLE_INDEX: u64 = u64::MAX;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f32,
    pub epochs: usize,
    pub batch: usize,
    pub seed: u64,
    /// Epochs at the start that train on NLL plus squared error.
    pub warmup_epochs: usize,
    pub patch: (usize, usize),
    pub arch: ArchKind,
    /// Overrides the architecture's default widths.
    pub widths: Option<Vec<usize>>,
    pub latent: usize,
    pub mse_weight: f32,
    /// Write a checkpoint after every this many epochs (0 disables).
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 4e-5,
            epochs: 50,
            batch: 64,
            seed: 0,
            warmup_epochs: 0,
            patch: (14, 14),
            arch: ArchKind::ConvDense,
            widths: None,
            latent: 4,
            mse_weight: 1.0,
            checkpoint_every: 10,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, shape: ImageShape) -> Result<()> {
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return Err(Error::Config(format!("learning rate must be finite and non-negative, got {}", self.lr)));
        }
        if self.epochs == 0 || self.batch == 0 {
            return Err(Error::Config("epochs and batch must be at least 1".into()));
        }
        if self.warmup_epochs > self.epochs {
            return Err(Error::Config(format!(
                "warmup_epochs ({}) exceeds epochs ({})",
                self.warmup_epochs, self.epochs
            )));
        }
        let (ph, pw) = self.patch;
        if ph == 0 || pw == 0 || ph > shape.height || pw > shape.width {
            return Err(Error::Config(format!(
                "{ph}x{pw} patch does not fit a {}x{} image",
                shape.height, shape.width
            )));
        }
        if !(self.mse_weight.is_finite() && self.mse_weight >= 0.0) {
            return Err(Error::Config("mse_weight must be finite and non-negative".into()));
        }
        self.arch_config(shape).layers().map(|_| ())
    }

    pub fn arch_config(&self, shape: ImageShape) -> ArchConfig {
        let arch = ArchConfig::new(self.arch, shape, self.latent);
        match &self.widths {
            Some(w) => arch.with_widths(w.clone()),
            None => arch,
        }
    }

    pub fn loss_mode(&self, epoch: usize) -> LossMode {
        if epoch < self.warmup_epochs {
            LossMode::NllPlusMse
        } else {
            LossMode::Nll
        }
    }
}

/// One line of the JSON-lines training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub loss_mode: LossMode,
    pub mean_loss: f64,
    pub mean_nll: f64,
    pub seconds: f64,
    /// Set on the first epoch after the warmup schedule ends.
    #[serde(default)]
    pub mode_switch: bool,
}

/// Everything needed to continue training exactly where it stopped.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub net: DmfaNetwork,
    pub adam: Adam,
    pub epochs_done: usize,
}

impl TrainState {
    pub fn init(data: &Dataset, config: &TrainConfig) -> Result<Self> {
        config.validate(data.shape())?;
        let mut rng = sample_rng(config.seed, INIT_STREAM, 0);
        let net = DmfaNetwork::for_data(config.arch_config(data.shape()), data, &mut rng)?;
        let adam = Adam::new(AdamConfig::with_lr(config.lr), net.params().len());
        Ok(Self {
            net,
            adam,
            epochs_done: 0,
        })
    }

    pub fn to_container(&self, config: &TrainConfig) -> Container {
        let mut c = self.net.to_container(json!({
            "train": {
                "epochs_done": self.epochs_done,
                "adam_step": self.adam.step,
                "adam": self.adam.config,
                "config": config,
            }
        }));
        let len = self.adam.m.len();
        c.tensors.push(Tensor::new("adam_m", vec![len], self.adam.m.clone()));
        c.tensors.push(Tensor::new("adam_v", vec![len], self.adam.v.clone()));
        c
    }

    /// Restores a state written by [`TrainState::to_container`] together with
    /// the configuration it was trained under.
    pub fn from_container(c: &Container) -> Result<(Self, TrainConfig)> {
        let net = DmfaNetwork::from_container(c)?;
        let train = c
            .meta
            .get("train")
            .ok_or_else(|| Error::Format("container is not a training checkpoint".into()))?;
        let field = |name: &str| -> Result<Json> {
            train
                .get(name)
                .cloned()
                .ok_or_else(|| Error::Format(format!("checkpoint is missing {name:?}")))
        };
        let bad = |e: serde_json::Error| Error::Format(format!("bad checkpoint metadata: {e}"));
        let epochs_done: usize = serde_json::from_value(field("epochs_done")?).map_err(bad)?;
        let step: u64 = serde_json::from_value(field("adam_step")?).map_err(bad)?;
        let adam_config: AdamConfig = serde_json::from_value(field("adam")?).map_err(bad)?;
        let config: TrainConfig = serde_json::from_value(field("config")?).map_err(bad)?;
        let m = c.get("adam_m")?.data.clone();
        let v = c.get("adam_v")?.data.clone();
        if m.len() != net.params().len() || v.len() != net.params().len() {
            return Err(Error::Format("optimizer state does not match the network".into()));
        }
        let adam = Adam {
            config: adam_config,
            step,
            m,
            v,
        };
        Ok((
            Self {
                net,
                adam,
                epochs_done,
            },
            config,
        ))
    }

    pub fn save(&self, path: impl AsRef<Path>, config: &TrainConfig) -> Result<()> {
        tensorio::save_container(path, &self.to_container(config))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<(Self, TrainConfig)> {
        Self::from_container(&tensorio::load_container(path)?)
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub net: DmfaNetwork,
    pub log: Vec<EpochLog>,
}

/// Where periodic and last-good checkpoints go.
pub fn checkpoint_path(dir: &Path, epochs_done: usize) -> PathBuf {
    dir.join(format!("checkpoint-epoch{epochs_done:04}.dmfa"))
}

pub fn last_good_path(dir: &Path) -> PathBuf {
    dir.join("last-good.dmfa")
}

/// Trains from scratch for `config.epochs` epochs without writing files.
pub fn train_dmfa(data: &Dataset, config: &TrainConfig) -> Result<TrainOutcome> {
    let mut state = TrainState::init(data, config)?;
    let log = run_epochs(data, config, &mut state, config.epochs, None, &mut |_| Ok(()))?;
    Ok(TrainOutcome { net: state.net, log })
}

/// The masked training copy of sample `index` in `epoch`.
pub fn training_sample(data: &Dataset, config: &TrainConfig, epoch: usize, index: usize) -> Result<MaskedSample> {
    let mut rng = sample_rng(config.seed, epoch as u64, index as u64);
    let (ph, pw) = config.patch;
    let mask = random_patch_mask(data.shape(), ph, pw, &mut rng)?;
    apply_mask(data.sample(index), &mask)
}

/// Continues `state` up to `until` epochs in total. Writes periodic
/// checkpoints into `checkpoint_dir` when given, and on divergence writes the
/// last good state there before returning the error. `on_epoch` sees every
/// log record as soon as its epoch finishes.
pub fn run_epochs(
    data: &Dataset,
    config: &TrainConfig,
    state: &mut TrainState,
    until: usize,
    checkpoint_dir: Option<&Path>,
    on_epoch: &mut dyn FnMut(&EpochLog) -> Result<()>,
) -> Result<Vec<EpochLog>> {
    config.validate(data.shape())?;
    if data.is_empty() {
        return Err(Error::Config("training set is empty".into()));
    }
    if state.net.shape() != data.shape() {
        return Err(Error::Shape(format!(
            "network expects {:?}, data has {:?}",
            state.net.shape(),
            data.shape()
        )));
    }
    let until = until.min(config.epochs);
    let mut log = Vec::new();
    let mut order: Vec<usize> = (0..data.count()).collect();
    for epoch in state.epochs_done..until {
        let start = Instant::now();
        let mode = config.loss_mode(epoch);
        order.sort_unstable();
        order.shuffle(&mut sample_rng(config.seed, epoch as u64, SHUFFLE_INDEX));
        let (mut loss_sum, mut nll_sum) = (0.0f64, 0.0f64);
        for batch in order.chunks(config.batch) {
            let samples = batch
                .iter()
                .map(|&i| training_sample(data, config, epoch, i))
                .collect::<Result<Vec<_>>>()?;
            let refs: Vec<&MaskedSample> = samples.iter().collect();
            let step = state.net.loss_gradients(&refs, mode, config.mse_weight);
            let bg = match step {
                Ok(bg) => bg,
                Err(e) => {
                    let mut reason = match e {
                        Error::Diverged { reason, .. } => reason,
                        other => other.to_string(),
                    };
                    if let Some(dir) = checkpoint_dir {
                        if let Err(save) = state.save(last_good_path(dir), config) {
                            reason = format!("{reason}; last-good checkpoint not written: {save}");
                        }
                    }
                    return Err(Error::Diverged { epoch, reason });
                }
            };
            loss_sum += bg.loss_sum;
            nll_sum += bg.nll_sum;
            state.adam.update(state.net.params_mut(), &bg.grads);
        }
        state.epochs_done = epoch + 1;
        let count = data.count() as f64;
        let record = EpochLog {
            epoch,
            loss_mode: mode,
            mean_loss: loss_sum / count,
            mean_nll: nll_sum / count,
            seconds: start.elapsed().as_secs_f64(),
            mode_switch: config.warmup_epochs > 0 && epoch == config.warmup_epochs,
        };
        on_epoch(&record)?;
        log.push(record);
        if let Some(dir) = checkpoint_dir {
            if config.checkpoint_every > 0 && state.epochs_done.is_multiple_of(config.checkpoint_every) {
                state.save(checkpoint_path(dir, state.epochs_done), config)?;
            }
        }
    }
    Ok(log)
}
