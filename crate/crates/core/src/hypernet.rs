//! NEV-conditioned weight generation.
//!
//! Every layer owns a generator of two fully-connected stages. Each
//! generator reads the whole normalized NEV and emits one flat vector laid
//! out as `[weight | gamma | beta | bias]` at full width. The subnetwork a
//! NEV selects takes the leading block of each part (output channels first,
//! then input channels), so gradients of a loss on the sliced model flow
//! straight back into the generator parameters.

use std::path::Path;

use log::info;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::arch::{ArchError, ArchTemplate, Nev, ScaleGrid, SlotRange};
use crate::evosearch::{Fitness, FitnessError};
use crate::model::{self, LayerShape, LayerTensors, LayerVars, NormPlan};
use crate::pipeline::Split;
use crate::stream_rng;
use crate::tensorcore::{sgd_step, Checkpoint, ParamId, ParamStore, Real, Schedule, Tape, Tensor, TensorError, Var};

/// Width of the hidden stage of every generator.
pub const HIDDEN: usize = 64;

/// Checkpoint entry name prefix carrying the template and grid identity.
pub const MANIFEST_PREFIX: &str = "@manifest";

#[derive(Debug, Error)]
pub enum HyperError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Arch(#[from] ArchError),
    #[error("validation set is empty")]
    EmptyValidation,
    #[error("dataset images are {data:?} but template `{template}` expects {expected:?}")]
    InputShape { template: String, data: (usize, usize, usize), expected: (usize, usize, usize) },
    #[error("hypernet checkpoint: {0}")]
    Manifest(String),
}

/// Slot indices mapped to their grid fractions.
pub fn normalize_nev(nev: &Nev) -> Vec<f64> {
    nev.fractions()
}

#[derive(Debug, Clone)]
struct Generator {
    fc1_w: ParamId,
    fc1_b: ParamId,
    fc2_w: ParamId,
    fc2_b: ParamId,
    full: LayerShape,
}

/// Weight views of one NEV's subnetwork, recorded on a tape.
#[derive(Debug, Clone)]
pub struct SlicedModel {
    pub nev: Nev,
    pub channels: Vec<usize>,
    pub layers: Vec<LayerVars>,
}

#[derive(Debug, Clone)]
pub struct HyperNet {
    template: ArchTemplate,
    params: ParamStore,
    generators: Vec<Generator>,
}

impl HyperNet {
    /// Generators initialized uniformly in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`.
    pub fn new<R: Rng + ?Sized>(template: &ArchTemplate, rng: &mut R) -> Self {
        let slots = template.nev_len();
        let channels = template.channel_counts(&template.full_width_nev()).expect("full-width NEV");
        let mut params = ParamStore::new();
        let mut generators = Vec::new();
        for (layer, full) in template.layers().iter().zip(model::layer_shapes(template, &channels)) {
            let out = full.numel();
            let b1 = 1.0 / (slots as Real).sqrt();
            let b2 = 1.0 / (HIDDEN as Real).sqrt();
            let fc1_w = params.push(format!("{}.fc1.w", layer.name), Tensor::uniform(&[HIDDEN, slots], b1, rng));
            let fc1_b = params.push(format!("{}.fc1.b", layer.name), Tensor::uniform(&[HIDDEN], b1, rng));
            let fc2_w = params.push(format!("{}.fc2.w", layer.name), Tensor::uniform(&[out, HIDDEN], b2, rng));
            let fc2_b = params.push(format!("{}.fc2.b", layer.name), Tensor::uniform(&[out], b2, rng));
            generators.push(Generator { fc1_w, fc1_b, fc2_w, fc2_b, full });
        }
        Self { template: template.clone(), params, generators }
    }

    pub fn template(&self) -> &ArchTemplate {
        &self.template
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    /// Full-width output length of each layer's generator.
    pub fn output_lengths(&self) -> Vec<usize> {
        self.generators.iter().map(|g| g.full.numel()).collect()
    }

    /// Records generation and cropping for `nev` on `tape`. `vars` are the
    /// generator parameters bound on the same tape, indexed like
    /// [`HyperNet::params`].
    pub fn generate(&self, tape: &mut Tape, vars: &[Var], nev: &Nev) -> Result<SlicedModel, HyperError> {
        let channels = self.template.channel_counts(nev)?;
        let shapes = model::layer_shapes(&self.template, &channels);
        let z: Vec<Real> = normalize_nev(nev).into_iter().map(|v| v as Real).collect();
        let z = tape.constant(Tensor::new(vec![1, z.len()], z)?);
        let v = |id: ParamId| vars[id.index()];
        let mut layers = Vec::with_capacity(shapes.len());
        for (g, slice) in self.generators.iter().zip(&shapes) {
            let h = tape.dense(z, v(g.fc1_w), Some(v(g.fc1_b)))?;
            let flat = tape.dense(h, v(g.fc2_w), Some(v(g.fc2_b)))?;
            let weight = tape.crop(flat, 0, &g.full.weight, &slice.weight)?;
            let mut offset = g.full.weight_numel();
            let (mut gamma, mut beta, mut bias) = (None, None, None);
            if let (Some(full_c), Some(c)) = (g.full.norm, slice.norm) {
                let raw = tape.crop(flat, offset, &[full_c], &[c])?;
                gamma = Some(tape.add_scalar(raw, 1.0));
                beta = Some(tape.crop(flat, offset + full_c, &[full_c], &[c])?);
                offset += 2 * full_c;
            }
            if let (Some(full_c), Some(c)) = (g.full.bias, slice.bias) {
                bias = Some(tape.crop(flat, offset, &[full_c], &[c])?);
            }
            layers.push(LayerVars { weight, gamma, beta, bias });
        }
        Ok(SlicedModel { nev: nev.clone(), channels, layers })
    }

    /// Generated weights of `nev` as plain tensors.
    pub fn weights(&self, nev: &Nev) -> Result<Vec<LayerTensors>, HyperError> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = self.params.ids().map(|id| tape.constant(self.params.value(id).clone())).collect();
        let sliced = self.generate(&mut tape, &vars, nev)?;
        Ok(sliced.layers.iter().map(|l| LayerTensors::from_vars(&tape, l)).collect())
    }

    /// Accuracy of `nev`'s subnetwork on `validation`, without fine-tuning.
    /// Normalization statistics come from one batch-mode pass over
    /// `calibration` images. Read-only.
    pub fn evaluate_nev(&self, nev: &Nev, calibration: &Tensor, validation: &Split, batch: usize) -> Result<f64, HyperError> {
        if validation.is_empty() {
            return Err(HyperError::EmptyValidation);
        }
        self.check_input(validation)?;
        let layers = self.weights(nev)?;
        let stats = model::calibrate(&self.template, &layers, calibration)?;
        let logits = model::predict(&self.template, &layers, &stats, validation.images(), batch)?;
        let correct = model::argmax_rows(&logits).iter().zip(validation.labels()).filter(|(p, l)| p == l).count();
        Ok(correct as f64 / validation.len() as f64)
    }

    fn check_input(&self, split: &Split) -> Result<(), HyperError> {
        if split.image_shape() != self.template.input_shape() {
            return Err(HyperError::InputShape {
                template: self.template.name().to_string(),
                data: split.image_shape(),
                expected: self.template.input_shape(),
            });
        }
        Ok(())
    }

    fn manifest(&self) -> String {
        format!("{MANIFEST_PREFIX} template={} grid={} hidden={HIDDEN}", self.template.name(), ScaleGrid.fingerprint())
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = self.params.to_checkpoint();
        ck.entries.insert(0, (self.manifest(), Tensor::scalar(0.0)));
        ck
    }

    /// Restores generator parameters; the checkpoint must come from the
    /// same template and grid.
    pub fn from_checkpoint(template: &ArchTemplate, ck: &Checkpoint) -> Result<Self, HyperError> {
        let mut net = Self::new(template, &mut stream_rng(0, 0));
        let manifest = ck
            .entries
            .iter()
            .find(|(n, _)| n.starts_with(MANIFEST_PREFIX))
            .map(|(n, _)| n.as_str())
            .ok_or_else(|| HyperError::Manifest("no manifest entry".into()))?;
        if manifest != net.manifest() {
            return Err(HyperError::Manifest(format!("checkpoint has `{manifest}`, expected `{}`", net.manifest())));
        }
        let stored = ParamStore::from_checkpoint(ck, |n| !n.starts_with(MANIFEST_PREFIX));
        net.params.load_values(&stored).map_err(|e| HyperError::Manifest(e.to_string()))?;
        Ok(net)
    }

    pub fn save(&self, path: &Path) -> Result<(), HyperError> {
        Ok(self.to_checkpoint().save(path)?)
    }

    pub fn load(template: &ArchTemplate, path: &Path) -> Result<Self, HyperError> {
        Self::from_checkpoint(template, &Checkpoint::load(path)?)
    }
}

fn default_monitor_nevs() -> usize {
    2
}
fn default_calibration() -> usize {
    512
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetaTrainConfig {
    pub epochs: usize,
    pub batch: usize,
    pub schedule: Schedule,
    pub seed: u64,
    /// Random NEVs scored on the validation split after each epoch, for the
    /// progress log only.
    #[serde(default = "default_monitor_nevs")]
    pub monitor_nevs: usize,
    /// Training images used to calibrate normalization statistics.
    #[serde(default = "default_calibration")]
    pub calibration: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetaEpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub mean_loss: f64,
    /// Mean validation accuracy of the monitor NEVs.
    pub monitor_accuracy: Option<f64>,
}

/// Stochastic meta-training: every minibatch draws a fresh uniform random
/// NEV over the full grid, trains the generators through that slice and
/// takes one SGD step.
///
/// Epochs `start_epoch..cfg.epochs` are run; each uses generators derived
/// from `(cfg.seed, epoch)` so a run resumed from an epoch boundary is
/// identical to an uninterrupted one. `on_epoch` sees the network after
/// each epoch and stops training early by returning `false`.
pub fn meta_train(
    net: &mut HyperNet,
    train: &Split,
    validation: Option<&Split>,
    cfg: &MetaTrainConfig,
    start_epoch: usize,
    mut on_epoch: impl FnMut(&HyperNet, &MetaEpochLog) -> bool,
) -> Result<Vec<MetaEpochLog>, HyperError> {
    cfg.schedule.validate()?;
    if train.is_empty() {
        return Err(TensorError::Shape { op: "meta_train", detail: "empty training split".into() }.into());
    }
    net.check_input(train)?;
    let mut log = Vec::new();
    for epoch in start_epoch..cfg.epochs {
        let mut rng = stream_rng(cfg.seed, epoch as u64);
        let mut total = 0.0;
        let batches = train.shuffled_batches(cfg.batch, &mut rng);
        for rows in &batches {
            let nev = net.template.random_nev(&mut rng, SlotRange::full());
            let (images, labels) = train.batch(rows);
            let mut tape = Tape::new();
            let vars = net.params.bind(&mut tape);
            let sliced = net.generate(&mut tape, &vars, &nev)?;
            let x = tape.constant(images);
            let out = model::forward(&mut tape, &net.template, &sliced.layers, x, NormPlan::Batch)?;
            let loss = tape.softmax_cross_entropy(out.logits, &labels)?;
            total += tape.value(loss).item() as f64;
            tape.backward(loss)?;
            net.params.collect_grads(&tape, &vars);
            sgd_step(&mut net.params, &cfg.schedule, epoch)?;
        }
        net.params.clear_grads();
        let monitor_accuracy = match validation {
            Some(val) if cfg.monitor_nevs > 0 => {
                let mut mrng = stream_rng(cfg.seed, (1 << 40) | epoch as u64);
                let calib = train.head(cfg.calibration);
                let mut sum = 0.0;
                for _ in 0..cfg.monitor_nevs {
                    let nev = net.template.random_nev(&mut mrng, SlotRange::full());
                    sum += net.evaluate_nev(&nev, &calib, val, cfg.batch.max(256))?;
                }
                Some(sum / cfg.monitor_nevs as f64)
            }
            _ => None,
        };
        let entry = MetaEpochLog { epoch, lr: cfg.schedule.lr(epoch), mean_loss: total / batches.len() as f64, monitor_accuracy };
        info!("meta-train epoch {epoch}: loss {:.4}, monitor accuracy {:?}", entry.mean_loss, entry.monitor_accuracy);
        let go_on = on_epoch(net, &entry);
        log.push(entry);
        if !go_on {
            break;
        }
    }
    Ok(log)
}

/// Search fitness backed by a trained hypernetwork.
pub struct HyperFitness<'a> {
    pub net: &'a HyperNet,
    pub calibration: Tensor,
    pub validation: &'a Split,
    pub batch: usize,
}

impl Fitness for HyperFitness<'_> {
    fn accuracy(&self, nev: &Nev, _rng: &mut ChaCha8Rng) -> Result<f64, FitnessError> {
        self.net
            .evaluate_nev(nev, &self.calibration, self.validation, self.batch)
            .map_err(|e| FitnessError(e.to_string()))
    }
}
