//! Forward pass of a template network over explicit per-layer weights.
//!
//! Both the hypernetwork (generated, cropped weights) and retraining (plain
//! parameters) run their networks through [`forward`], so the two phases
//! share one definition of the architecture.

use crate::arch::{ArchTemplate, LayerKind, LayerSpec, Source};
use crate::tensorcore::{shape_err, NormMode, NormStats, Real, Tape, Tensor, TensorError, Var};

/// Weight, normalization and bias shapes of one layer at given widths.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerShape {
    pub weight: Vec<usize>,
    /// Channels of the affine normalization, if the layer has one.
    pub norm: Option<usize>,
    pub bias: Option<usize>,
}

impl LayerShape {
    pub fn new(layer: &LayerSpec, c_out: usize, c_in: usize) -> Self {
        let weight = match layer.kind {
            LayerKind::Dense => vec![c_out, c_in],
            _ => layer.weight_shape(c_out, c_in).to_vec(),
        };
        Self {
            weight,
            norm: layer.norm.then_some(c_out),
            bias: layer.bias.then_some(c_out),
        }
    }

    pub fn weight_numel(&self) -> usize {
        self.weight.iter().product()
    }

    /// Values in the flat `[weight | gamma | beta | bias]` layout.
    pub fn numel(&self) -> usize {
        self.weight_numel() + 2 * self.norm.unwrap_or(0) + self.bias.unwrap_or(0)
    }

    /// Fan-in of one output unit.
    pub fn fan_in(&self) -> usize {
        self.weight[1..].iter().product()
    }
}

/// Layer shapes for the given output channel counts.
pub fn layer_shapes(template: &ArchTemplate, channels: &[usize]) -> Vec<LayerShape> {
    let inputs = template.input_channels(channels);
    template
        .layers()
        .iter()
        .zip(channels.iter().zip(&inputs))
        .map(|(l, (&c_out, &c_in))| LayerShape::new(l, c_out, c_in))
        .collect()
}

#[derive(Debug, Clone, Copy)]
pub struct LayerVars {
    pub weight: Var,
    pub gamma: Option<Var>,
    pub beta: Option<Var>,
    pub bias: Option<Var>,
}

/// Concrete weights of one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerTensors {
    pub weight: Tensor,
    pub gamma: Option<Tensor>,
    pub beta: Option<Tensor>,
    pub bias: Option<Tensor>,
}

impl LayerTensors {
    pub fn bind_constants(&self, tape: &mut Tape) -> LayerVars {
        LayerVars {
            weight: tape.constant(self.weight.clone()),
            gamma: self.gamma.clone().map(|t| tape.constant(t)),
            beta: self.beta.clone().map(|t| tape.constant(t)),
            bias: self.bias.clone().map(|t| tape.constant(t)),
        }
    }

    pub fn from_vars(tape: &Tape, vars: &LayerVars) -> Self {
        Self {
            weight: tape.value(vars.weight).clone(),
            gamma: vars.gamma.map(|v| tape.value(v).clone()),
            beta: vars.beta.map(|v| tape.value(v).clone()),
            bias: vars.bias.map(|v| tape.value(v).clone()),
        }
    }
}

/// Where normalization layers take their statistics from.
#[derive(Debug, Clone, Copy)]
pub enum NormPlan<'a> {
    Batch,
    /// Calibrated statistics indexed by layer.
    Fixed(&'a [Option<NormStats>]),
}

#[derive(Debug, Clone)]
pub struct ModelOutput {
    pub logits: Var,
    /// Normalization node of each layer, if any.
    pub norms: Vec<Option<Var>>,
}

/// "Same" padding for odd kernels.
pub fn padding(layer: &LayerSpec) -> (usize, usize) {
    ((layer.kernel.0 - 1) / 2, (layer.kernel.1 - 1) / 2)
}

/// Runs the network on `input` (`[N, C, H, W]`). The last layer's output is
/// returned as the logits.
pub fn forward(
    tape: &mut Tape,
    template: &ArchTemplate,
    vars: &[LayerVars],
    input: Var,
    plan: NormPlan<'_>,
) -> Result<ModelOutput, TensorError> {
    let layers = template.layers();
    if vars.len() != layers.len() {
        return Err(shape_err("model", format!("{} layer weights for {} layers", vars.len(), layers.len())));
    }
    let mut outputs: Vec<Var> = Vec::with_capacity(layers.len());
    let mut norms = Vec::with_capacity(layers.len());
    for (i, (layer, lv)) in layers.iter().zip(vars).enumerate() {
        if layer.input_pool > 1 {
            return Err(shape_err("model", format!("layer `{}`: input pooling is not supported for execution", layer.name)));
        }
        let x = match layer.source {
            Source::Input => input,
            Source::Layer(j) => outputs[j],
        };
        let mut y = match layer.kind {
            LayerKind::Dense => {
                let x = if tape.value(x).shape().len() == 4 { tape.global_avg_pool(x)? } else { x };
                tape.dense(x, lv.weight, lv.bias)?
            }
            LayerKind::DepthwiseConv => tape.depthwise_conv2d(x, lv.weight, layer.stride, padding(layer))?,
            LayerKind::StandardConv | LayerKind::PointwiseConv => tape.conv2d(x, lv.weight, layer.stride, padding(layer))?,
        };
        if layer.kind.is_conv() {
            let s = tape.value(y).shape();
            if (s[2], s[3]) != layer.spatial_out {
                return Err(shape_err(
                    "model",
                    format!("layer `{}` produced {}x{}, template says {:?}", layer.name, s[2], s[3], layer.spatial_out),
                ));
            }
        }
        let mut norm = None;
        if let (Some(g), Some(b)) = (lv.gamma, lv.beta) {
            let mode = match plan {
                NormPlan::Batch => NormMode::Batch,
                NormPlan::Fixed(stats) => match stats.get(i).and_then(Option::as_ref) {
                    Some(s) => NormMode::Fixed(s),
                    None => return Err(shape_err("model", format!("no calibrated statistics for layer `{}`", layer.name))),
                },
            };
            y = tape.channel_norm(y, g, b, mode)?;
            norm = Some(y);
        }
        if let Some(r) = layer.residual {
            y = tape.add(y, outputs[r])?;
        }
        if layer.relu {
            y = tape.relu(y);
        }
        outputs.push(y);
        norms.push(norm);
    }
    let logits = *outputs.last().ok_or_else(|| shape_err("model", "template has no layers"))?;
    Ok(ModelOutput { logits, norms })
}

/// Per-layer normalization statistics of one batch-mode pass over `images`.
pub fn calibrate(template: &ArchTemplate, layers: &[LayerTensors], images: &Tensor) -> Result<Vec<Option<NormStats>>, TensorError> {
    let mut tape = Tape::new();
    let vars: Vec<LayerVars> = layers.iter().map(|l| l.bind_constants(&mut tape)).collect();
    let x = tape.constant(images.clone());
    let out = forward(&mut tape, template, &vars, x, NormPlan::Batch)?;
    Ok(out.norms.iter().map(|n| n.and_then(|v| tape.norm_stats(v).cloned())).collect())
}

/// Logits for every image, computed `batch` images at a time with fixed
/// normalization statistics.
pub fn predict(
    template: &ArchTemplate,
    layers: &[LayerTensors],
    stats: &[Option<NormStats>],
    images: &Tensor,
    batch: usize,
) -> Result<Tensor, TensorError> {
    let n = images.shape()[0];
    let mut all: Vec<Real> = Vec::new();
    let mut classes = 0;
    for start in (0..n).step_by(batch.max(1)) {
        let rows: Vec<usize> = (start..(start + batch.max(1)).min(n)).collect();
        let mut tape = Tape::new();
        let vars: Vec<LayerVars> = layers.iter().map(|l| l.bind_constants(&mut tape)).collect();
        let x = tape.constant(images.gather_rows(&rows));
        let out = forward(&mut tape, template, &vars, x, NormPlan::Fixed(stats))?;
        let logits = tape.value(out.logits);
        classes = logits.shape()[1];
        all.extend_from_slice(logits.data());
    }
    Tensor::new(vec![n, classes], all)
}

/// Index of the largest logit in each row; ties go to the lower index.
pub fn argmax_rows(logits: &Tensor) -> Vec<usize> {
    let k = logits.shape()[1];
    logits
        .data()
        .chunks(k)
        .map(|row| {
            row.iter()
                .enumerate()
                .fold((0, Real::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
                .0
        })
        .collect()
}
