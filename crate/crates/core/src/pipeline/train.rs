//! Plain networks trained from scratch at a fixed NEV.

use std::path::Path;

use log::info;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::arch::{ArchError, ArchTemplate, Nev};
use crate::model::{self, LayerTensors, LayerVars, NormPlan};
use crate::stream_rng;
use crate::tensorcore::{sgd_step, Checkpoint, ParamId, ParamStore, Real, Schedule, Tape, Tensor, TensorError};

use super::Split;

/// Checkpoint entry name prefix identifying the template and NEV.
pub const NETWORK_MANIFEST: &str = "@network";

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("training diverged at epoch {epoch}, batch {batch}: {detail}")]
    Diverged { epoch: usize, batch: usize, detail: String },
    #[error("dataset images are {data:?} but template `{template}` expects {expected:?}")]
    InputShape { template: String, data: (usize, usize, usize), expected: (usize, usize, usize) },
    #[error("empty dataset split")]
    Empty,
    #[error("network checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Arch(#[from] ArchError),
}

#[derive(Debug, Clone, Copy)]
struct LayerIds {
    weight: ParamId,
    gamma: Option<ParamId>,
    beta: Option<ParamId>,
    bias: Option<ParamId>,
}

/// A template network at one NEV with its own parameters.
#[derive(Debug, Clone)]
pub struct Network {
    template: ArchTemplate,
    nev: Nev,
    params: ParamStore,
    layers: Vec<LayerIds>,
}

impl Network {
    /// Weights uniform in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`, unit scale,
    /// zero shift and bias.
    pub fn init<R: Rng + ?Sized>(template: &ArchTemplate, nev: &Nev, rng: &mut R) -> Result<Self, ArchError> {
        let channels = template.channel_counts(nev)?;
        let mut params = ParamStore::new();
        let mut layers = Vec::new();
        for (layer, shape) in template.layers().iter().zip(model::layer_shapes(template, &channels)) {
            let bound = 1.0 / (shape.fan_in() as Real).sqrt();
            let weight = params.push(format!("{}.w", layer.name), Tensor::uniform(&shape.weight, bound, rng));
            let gamma = shape.norm.map(|c| params.push(format!("{}.gamma", layer.name), Tensor::full(&[c], 1.0)));
            let beta = shape.norm.map(|c| params.push(format!("{}.beta", layer.name), Tensor::zeros(&[c])));
            let bias = shape.bias.map(|c| params.push(format!("{}.b", layer.name), Tensor::zeros(&[c])));
            layers.push(LayerIds { weight, gamma, beta, bias });
        }
        Ok(Self { template: template.clone(), nev: nev.clone(), params, layers })
    }

    pub fn nev(&self) -> &Nev {
        &self.nev
    }

    pub fn template(&self) -> &ArchTemplate {
        &self.template
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn layer_tensors(&self) -> Vec<LayerTensors> {
        let p = &self.params;
        self.layers
            .iter()
            .map(|l| LayerTensors {
                weight: p.value(l.weight).clone(),
                gamma: l.gamma.map(|id| p.value(id).clone()),
                beta: l.beta.map(|id| p.value(id).clone()),
                bias: l.bias.map(|id| p.value(id).clone()),
            })
            .collect()
    }

    fn check_input(&self, split: &Split) -> Result<(), TrainError> {
        if split.is_empty() {
            return Err(TrainError::Empty);
        }
        if split.image_shape() != self.template.input_shape() {
            return Err(TrainError::InputShape {
                template: self.template.name().to_string(),
                data: split.image_shape(),
                expected: self.template.input_shape(),
            });
        }
        Ok(())
    }

    /// One pass over `train` in shuffled minibatches. Returns the mean loss.
    /// Parameters are left as they were before the failing step if the loss
    /// or a gradient goes non-finite.
    pub fn train_epoch(&mut self, train: &Split, batch: usize, schedule: &Schedule, epoch: usize, seed: u64) -> Result<f64, TrainError> {
        self.check_input(train)?;
        let mut rng = stream_rng(seed, epoch as u64);
        let batches = train.shuffled_batches(batch, &mut rng);
        let mut total = 0.0;
        for (b, rows) in batches.iter().enumerate() {
            let (images, labels) = train.batch(rows);
            let mut tape = Tape::new();
            let vars = self.params.bind(&mut tape);
            let lv: Vec<LayerVars> = self
                .layers
                .iter()
                .map(|l| {
                    let v = |id: ParamId| vars[id.index()];
                    LayerVars { weight: v(l.weight), gamma: l.gamma.map(v), beta: l.beta.map(v), bias: l.bias.map(v) }
                })
                .collect();
            let x = tape.constant(images);
            let out = model::forward(&mut tape, &self.template, &lv, x, NormPlan::Batch)?;
            let loss = tape.softmax_cross_entropy(out.logits, &labels)?;
            let value = tape.value(loss).item() as f64;
            if !value.is_finite() {
                return Err(TrainError::Diverged { epoch, batch: b, detail: format!("loss is {value}") });
            }
            total += value;
            tape.backward(loss)?;
            self.params.collect_grads(&tape, &vars);
            sgd_step(&mut self.params, schedule, epoch).map_err(|e| match e {
                TensorError::NonFiniteGradient(_) => TrainError::Diverged { epoch, batch: b, detail: e.to_string() },
                other => other.into(),
            })?;
        }
        self.params.clear_grads();
        Ok(total / batches.len() as f64)
    }

    /// Logits on `split` with normalization statistics calibrated on
    /// `calibration` images.
    pub fn logits(&self, calibration: &Tensor, split: &Split, batch: usize) -> Result<Tensor, TrainError> {
        self.check_input(split)?;
        let layers = self.layer_tensors();
        let stats = model::calibrate(&self.template, &layers, calibration)?;
        Ok(model::predict(&self.template, &layers, &stats, split.images(), batch)?)
    }

    fn manifest(&self) -> String {
        format!("{NETWORK_MANIFEST} template={} nev={}", self.template.name(), self.nev)
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = self.params.to_checkpoint();
        ck.entries.insert(0, (self.manifest(), Tensor::scalar(0.0)));
        ck
    }

    pub fn from_checkpoint(template: &ArchTemplate, nev: &Nev, ck: &Checkpoint) -> Result<Self, TrainError> {
        let mut net = Self::init(template, nev, &mut stream_rng(0, 0))?;
        match ck.entries.first() {
            Some((m, _)) if *m == net.manifest() => {}
            Some((m, _)) => return Err(TrainError::Checkpoint(format!("checkpoint has `{m}`, expected `{}`", net.manifest()))),
            None => return Err(TrainError::Checkpoint("empty checkpoint".into())),
        }
        let stored = ParamStore::from_checkpoint(ck, |n| !n.starts_with(NETWORK_MANIFEST));
        net.params.load_values(&stored).map_err(|e| TrainError::Checkpoint(e.to_string()))?;
        Ok(net)
    }

    pub fn save(&self, path: &Path) -> Result<(), TrainError> {
        Ok(self.to_checkpoint().save(path)?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrainConfig {
    pub epochs: usize,
    pub batch: usize,
    pub schedule: Schedule,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainEpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub mean_loss: f64,
}

/// Trains `net` for epochs `start_epoch..cfg.epochs`. Epoch `e` shuffles with
/// a generator derived from `(cfg.seed, e)`, so resuming at an epoch
/// boundary reproduces an uninterrupted run. `on_epoch` may stop early by
/// returning `false`.
pub fn train(
    net: &mut Network,
    train: &Split,
    cfg: &RetrainConfig,
    start_epoch: usize,
    mut on_epoch: impl FnMut(&Network, &TrainEpochLog) -> bool,
) -> Result<Vec<TrainEpochLog>, TrainError> {
    cfg.schedule.validate()?;
    let mut log = Vec::new();
    for epoch in start_epoch..cfg.epochs {
        let mean_loss = net.train_epoch(train, cfg.batch, &cfg.schedule, epoch, cfg.seed)?;
        let entry = TrainEpochLog { epoch, lr: cfg.schedule.lr(epoch), mean_loss };
        info!("retrain {} epoch {epoch}: loss {mean_loss:.4}", net.nev);
        let go_on = on_epoch(net, &entry);
        log.push(entry);
        if !go_on {
            break;
        }
    }
    Ok(log)
}

/// Fresh initialization from `(cfg.seed)` and full training.
pub fn retrain(template: &ArchTemplate, nev: &Nev, train_split: &Split, cfg: &RetrainConfig) -> Result<(Network, Vec<TrainEpochLog>), TrainError> {
    let mut net = Network::init(template, nev, &mut init_rng(cfg.seed))?;
    let log = train(&mut net, train_split, cfg, 0, |_, _| true)?;
    Ok((net, log))
}

/// Generator used for the initial weights of a retrained network.
pub fn init_rng(seed: u64) -> rand_chacha::ChaCha8Rng {
    stream_rng(seed, u64::MAX)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pipeline::{synthetic, Dataset};

    fn setup() -> (ArchTemplate, Dataset) {
        (ArchTemplate::builtin("mininet").unwrap(), Dataset::holdout(&synthetic(400, 10, 2), 0.25).unwrap())
    }

    #[test]
    fn shapes_match_channel_counts() {
        let (t, _) = setup();
        let nev = Nev::new(vec![3, 17, 30, 0]).unwrap();
        let net = Network::init(&t, &nev, &mut init_rng(0)).unwrap();
        assert_eq!(net.params().numel() as u64, t.params_of(&nev).unwrap());
    }

    #[test]
    fn training_reduces_loss_and_replays() {
        let (t, d) = setup();
        let cfg = RetrainConfig { epochs: 3, batch: 32, schedule: Schedule::constant(0.1), seed: 9 };
        let (a, log) = retrain(&t, &t.full_width_nev(), &d.train, &cfg).unwrap();
        assert!(log[2].mean_loss < log[0].mean_loss, "{log:?}");
        let (b, log2) = retrain(&t, &t.full_width_nev(), &d.train, &cfg).unwrap();
        assert_eq!(log, log2);
        assert_eq!(a.params().checksum(), b.params().checksum());
    }

    #[test]
    fn resume_from_checkpoint_matches() {
        let (t, d) = setup();
        let nev = Nev::new(vec![10, 20, 5, 30]).unwrap();
        let cfg = RetrainConfig { epochs: 2, batch: 50, schedule: Schedule::constant(0.1), seed: 1 };
        let (full, _) = retrain(&t, &nev, &d.train, &cfg).unwrap();
        let mut half = Network::init(&t, &nev, &mut init_rng(1)).unwrap();
        train(&mut half, &d.train, &cfg, 0, |_, _| false).unwrap();
        let mut resumed = Network::from_checkpoint(&t, &nev, &half.to_checkpoint()).unwrap();
        train(&mut resumed, &d.train, &cfg, 1, |_, _| true).unwrap();
        assert_eq!(resumed.params().checksum(), full.params().checksum());
        assert!(Network::from_checkpoint(&t, &t.full_width_nev(), &half.to_checkpoint()).is_err());
    }

    #[test]
    fn divergence_is_reported() {
        let (t, d) = setup();
        let cfg = RetrainConfig { epochs: 1, batch: 32, schedule: Schedule::constant(1e300), seed: 1 };
        let err = retrain(&t, &t.full_width_nev(), &d.train, &cfg).unwrap_err();
        assert!(matches!(err, TrainError::Diverged { epoch: 0, .. }), "{err}");
    }
}
