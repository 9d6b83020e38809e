//! Architecture templates and analytic cost accounting.
//!
//! A template describes a CNN family as data: an ordered list of layers, the
//! NEV slot each prunable layer reads its width from, and the shortcut groups
//! that must share a width so residual adds stay shape compatible. Given a
//! [`Nev`], the template yields exact per-layer channel counts, multiply
//! accumulate counts and parameter counts without building the network.
//!
//! Cost conventions:
//! - one multiply-accumulate counts as one FLOP;
//! - normalization, activation, pooling and residual adds cost nothing;
//! - parameters count conv kernels, dense matrices and biases, and one
//!   (scale, shift) pair per normalized output channel.

use std::collections::{BTreeSet, HashMap};
use std::fmt;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

/// Number of width levels in the channel-scale grid.
pub const GRID_LEVELS: usize = 31;
/// Largest valid slot index.
pub const MAX_INDEX: u8 = (GRID_LEVELS - 1) as u8;

#[derive(Debug, Error)]
pub enum ArchError {
    #[error("layer index {index} out of range (template has {len} layers)")]
    LayerOutOfRange { index: usize, len: usize },
    #[error("NEV has {got} slots but template `{template}` expects {expected}")]
    NevLength { template: String, expected: usize, got: usize },
    #[error("slot index {0} outside the scale grid [0, {MAX_INDEX}]")]
    IndexOutOfGrid(u8),
    #[error("empty slot-index range {lo}..={hi}")]
    EmptyRange { lo: u8, hi: u8 },
    #[error("invalid template `{template}`: {reason}")]
    InvalidTemplate { template: String, reason: String },
    #[error("unknown built-in template `{0}`")]
    UnknownBuiltin(String),
    #[error("template parse error: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("template io error: {0}")]
    Io(#[from] std::io::Error),
}

/// The 31-point grid of fractional widths, 0.10 to 1.00 in steps of 0.03.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct ScaleGrid;

impl ScaleGrid {
    pub fn len(&self) -> usize {
        GRID_LEVELS
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Width fraction for a slot index. Indices past the grid are clamped by the
    /// caller's validation; here they panic in debug builds.
    pub fn level(&self, index: u8) -> f64 {
        debug_assert!(index <= MAX_INDEX);
        f64::from(10 + 3 * u32::from(index)) / 100.0
    }

    pub fn levels(&self) -> Vec<f64> {
        (0..=MAX_INDEX).map(|i| self.level(i)).collect()
    }

    /// `round(base * level)` with halves rounded up, never below one channel.
    ///
    /// Computed in integers (level = (10 + 3i) / 100) so no float rounding can
    /// move a value across a .5 boundary.
    pub fn scale_channels(&self, base: usize, index: u8) -> usize {
        let numer = base * (10 + 3 * index as usize);
        ((numer + 50) / 100).max(1)
    }

    /// Stable fingerprint of the grid levels, recorded in checkpoints.
    pub fn fingerprint(&self) -> String {
        let mut hasher = Sha256::new();
        for level in self.levels() {
            hasher.update(level.to_le_bytes());
        }
        let digest = hasher.finalize();
        digest[..8].iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Network encoding vector: one scale index per template slot.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "Vec<u8>", into = "Vec<u8>")]
pub struct Nev(Vec<u8>);

impl Nev {
    pub fn new(slots: Vec<u8>) -> Result<Self, ArchError> {
        if let Some(&bad) = slots.iter().find(|&&i| i > MAX_INDEX) {
            return Err(ArchError::IndexOutOfGrid(bad));
        }
        Ok(Self(slots))
    }

    /// All slots at the given index.
    pub fn uniform(len: usize, index: u8) -> Result<Self, ArchError> {
        Self::new(vec![index; len])
    }

    pub fn slots(&self) -> &[u8] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Width fractions of every slot.
    pub fn fractions(&self) -> Vec<f64> {
        self.0.iter().map(|&i| ScaleGrid.level(i)).collect()
    }

    /// Parses `"30,12,7"`.
    pub fn parse(text: &str) -> Result<Self, ArchError> {
        let slots = text
            .split(',')
            .map(|s| s.trim().parse::<u8>())
            .collect::<Result<Vec<_>, _>>()
            .map_err(|e| ArchError::InvalidTemplate {
                template: "<nev>".into(),
                reason: format!("cannot parse NEV `{text}`: {e}"),
            })?;
        Self::new(slots)
    }
}

impl TryFrom<Vec<u8>> for Nev {
    type Error = ArchError;

    fn try_from(value: Vec<u8>) -> Result<Self, Self::Error> {
        Nev::new(value)
    }
}

impl From<Nev> for Vec<u8> {
    fn from(nev: Nev) -> Self {
        nev.0
    }
}

impl fmt::Display for Nev {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.0.iter().map(u8::to_string).collect();
        write!(f, "[{}]", parts.join(","))
    }
}

/// Inclusive range of slot indices used when drawing random NEVs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "(u8, u8)", into = "(u8, u8)")]
pub struct SlotRange {
    lo: u8,
    hi: u8,
}

impl SlotRange {
    pub fn new(lo: u8, hi: u8) -> Result<Self, ArchError> {
        if lo > hi {
            return Err(ArchError::EmptyRange { lo, hi });
        }
        if hi > MAX_INDEX {
            return Err(ArchError::IndexOutOfGrid(hi));
        }
        Ok(Self { lo, hi })
    }

    pub fn full() -> Self {
        Self { lo: 0, hi: MAX_INDEX }
    }

    pub fn lo(&self) -> u8 {
        self.lo
    }

    pub fn hi(&self) -> u8 {
        self.hi
    }

    pub fn len(&self) -> usize {
        usize::from(self.hi - self.lo) + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn contains(&self, index: u8) -> bool {
        (self.lo..=self.hi).contains(&index)
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> u8 {
        rng.gen_range(self.lo..=self.hi)
    }

    /// Parses `"lo:hi"` or a single index.
    pub fn parse(text: &str) -> Result<Self, ArchError> {
        let bad = |e: std::num::ParseIntError| ArchError::InvalidTemplate {
            template: "<range>".into(),
            reason: format!("cannot parse slot range `{text}`: {e}"),
        };
        match text.split_once(':') {
            Some((lo, hi)) => Self::new(lo.trim().parse().map_err(bad)?, hi.trim().parse().map_err(bad)?),
            None => {
                let i = text.trim().parse().map_err(bad)?;
                Self::new(i, i)
            }
        }
    }
}

impl Default for SlotRange {
    fn default() -> Self {
        Self::full()
    }
}

impl TryFrom<(u8, u8)> for SlotRange {
    type Error = ArchError;

    fn try_from((lo, hi): (u8, u8)) -> Result<Self, Self::Error> {
        SlotRange::new(lo, hi)
    }
}

impl From<SlotRange> for (u8, u8) {
    fn from(r: SlotRange) -> Self {
        (r.lo, r.hi)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LayerKind {
    StandardConv,
    DepthwiseConv,
    PointwiseConv,
    Dense,
}

impl LayerKind {
    pub fn is_conv(self) -> bool {
        !matches!(self, LayerKind::Dense)
    }
}

/// Where a layer reads its input from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Source {
    Input,
    Layer(usize),
}

/// How a layer's output width is decided.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Width {
    /// Scaled by the grid level of the given NEV slot.
    Slot(usize),
    /// Always the base width (e.g. the classifier).
    Fixed,
    /// Same as the producing layer (depthwise convolutions).
    FollowInput,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerSpec {
    pub name: String,
    pub kind: LayerKind,
    pub kernel: (usize, usize),
    pub stride: usize,
    pub source: Source,
    /// Downsampling applied to the input before this layer (e.g. a stem
    /// max-pool). Free in the cost model.
    pub input_pool: usize,
    pub spatial_out: (usize, usize),
    pub base_width: usize,
    pub width: Width,
    /// Layer whose output is added to this layer's normalized output.
    pub residual: Option<usize>,
    pub norm: bool,
    pub relu: bool,
    pub bias: bool,
}

impl LayerSpec {
    pub fn prunable(&self) -> bool {
        matches!(self.width, Width::Slot(_))
    }

    /// Weight tensor shape at the given channel counts, `(out, in, kh, kw)`.
    /// Depthwise kernels use `in = 1`.
    pub fn weight_shape(&self, c_out: usize, c_in: usize) -> [usize; 4] {
        match self.kind {
            LayerKind::DepthwiseConv => [c_out, 1, self.kernel.0, self.kernel.1],
            LayerKind::Dense => [c_out, c_in, 1, 1],
            _ => [c_out, c_in, self.kernel.0, self.kernel.1],
        }
    }
}

/// One NEV slot. Several layers can read the same slot.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SlotSpec {
    pub name: String,
}

/// Static description of a CNN family.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ArchTemplate {
    name: String,
    notes: String,
    input_shape: (usize, usize, usize),
    slots: Vec<SlotSpec>,
    layers: Vec<LayerSpec>,
    shortcut_groups: Vec<Vec<usize>>,
}

// On-disk layout; see templates/README.md for the schema.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TemplateFile {
    name: String,
    #[serde(default)]
    notes: String,
    input_shape: [usize; 3],
    slots: Vec<SlotSpec>,
    layers: Vec<LayerFile>,
    #[serde(default)]
    shortcut_groups: Vec<Vec<String>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct LayerFile {
    name: String,
    kind: LayerKind,
    kernel: [usize; 2],
    stride: usize,
    input: String,
    spatial_out: [usize; 2],
    base_width: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    slot: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    input_pool: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    residual: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    norm: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    relu: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    bias: Option<bool>,
}

const BUILTINS: &[(&str, &str)] = &[
    ("resnet50", include_str!("../../../templates/resnet50.json")),
    ("mobilenetv1", include_str!("../../../templates/mobilenetv1.json")),
    ("mobilenetv2", include_str!("../../../templates/mobilenetv2.json")),
    ("mininet", include_str!("../../../templates/mininet.json")),
];

impl ArchTemplate {
    pub fn builtin_names() -> impl Iterator<Item = &'static str> {
        BUILTINS.iter().map(|(n, _)| *n)
    }

    pub fn builtin(name: &str) -> Result<Self, ArchError> {
        let (_, text) = BUILTINS
            .iter()
            .find(|(n, _)| *n == name)
            .ok_or_else(|| ArchError::UnknownBuiltin(name.to_string()))?;
        Self::from_json(text)
    }

    /// Loads a template from a path, or a built-in when `spec` names one and no
    /// such file exists.
    pub fn load(spec: &str) -> Result<Self, ArchError> {
        let path = Path::new(spec);
        if path.exists() {
            Self::from_path(path)
        } else {
            Self::builtin(spec)
        }
    }

    pub fn from_path(path: &Path) -> Result<Self, ArchError> {
        let text = std::fs::read_to_string(path)?;
        Self::from_json(&text)
    }

    pub fn from_json(text: &str) -> Result<Self, ArchError> {
        let file: TemplateFile = serde_json::from_str(text)?;
        Self::from_file(file)
    }

    pub fn to_json(&self) -> String {
        let file = TemplateFile {
            name: self.name.clone(),
            notes: self.notes.clone(),
            input_shape: [self.input_shape.0, self.input_shape.1, self.input_shape.2],
            slots: self.slots.clone(),
            layers: self
                .layers
                .iter()
                .map(|l| LayerFile {
                    name: l.name.clone(),
                    kind: l.kind,
                    kernel: [l.kernel.0, l.kernel.1],
                    stride: l.stride,
                    input: match l.source {
                        Source::Input => "input".into(),
                        Source::Layer(i) => self.layers[i].name.clone(),
                    },
                    spatial_out: [l.spatial_out.0, l.spatial_out.1],
                    base_width: l.base_width,
                    slot: match l.width {
                        Width::Slot(s) => Some(self.slots[s].name.clone()),
                        _ => None,
                    },
                    input_pool: (l.input_pool != 1).then_some(l.input_pool),
                    residual: l.residual.map(|i| self.layers[i].name.clone()),
                    norm: Some(l.norm),
                    relu: Some(l.relu),
                    bias: Some(l.bias),
                })
                .collect(),
            shortcut_groups: self
                .shortcut_groups
                .iter()
                .map(|g| g.iter().map(|&i| self.layers[i].name.clone()).collect())
                .collect(),
        };
        serde_json::to_string_pretty(&file).expect("template serializes")
    }

    fn from_file(file: TemplateFile) -> Result<Self, ArchError> {
        let invalid = |reason: String| ArchError::InvalidTemplate { template: file.name.clone(), reason };

        let [c, h, w] = file.input_shape;
        if c == 0 || h == 0 || w == 0 {
            return Err(invalid(format!("input_shape {:?} has a zero dimension", file.input_shape)));
        }
        if file.layers.is_empty() {
            return Err(invalid("no layers".into()));
        }

        let mut slot_index = HashMap::new();
        for (i, s) in file.slots.iter().enumerate() {
            if slot_index.insert(s.name.as_str(), i).is_some() {
                return Err(invalid(format!("duplicate slot `{}`", s.name)));
            }
        }

        let mut layer_index: HashMap<&str, usize> = HashMap::new();
        let mut layers: Vec<LayerSpec> = Vec::with_capacity(file.layers.len());
        // (channels, spatial) produced by each layer at full width
        let mut produced: Vec<(usize, (usize, usize))> = Vec::new();

        for (idx, lf) in file.layers.iter().enumerate() {
            if lf.name == "input" || layer_index.contains_key(lf.name.as_str()) {
                return Err(invalid(format!("duplicate or reserved layer name `{}`", lf.name)));
            }
            let lookup = |name: &str, what: &str| -> Result<usize, ArchError> {
                layer_index
                    .get(name)
                    .copied()
                    .ok_or_else(|| invalid(format!("layer `{}`: {what} `{name}` is not an earlier layer", lf.name)))
            };
            let source = if lf.input == "input" {
                Source::Input
            } else {
                Source::Layer(lookup(&lf.input, "input")?)
            };
            let (in_channels, in_spatial) = match source {
                Source::Input => (c, (h, w)),
                Source::Layer(i) => produced[i],
            };

            if lf.stride == 0 || lf.base_width == 0 || lf.kernel.contains(&0) {
                return Err(invalid(format!("layer `{}` has a zero stride, kernel or width", lf.name)));
            }
            let input_pool = lf.input_pool.unwrap_or(1);
            if input_pool == 0 {
                return Err(invalid(format!("layer `{}` has input_pool 0", lf.name)));
            }

            let width = match (&lf.slot, lf.kind) {
                (Some(_), LayerKind::DepthwiseConv) => {
                    return Err(invalid(format!("depthwise layer `{}` cannot own a slot", lf.name)))
                }
                (Some(s), _) => Width::Slot(
                    *slot_index
                        .get(s.as_str())
                        .ok_or_else(|| invalid(format!("layer `{}` references unknown slot `{s}`", lf.name)))?,
                ),
                (None, LayerKind::DepthwiseConv) => Width::FollowInput,
                (None, _) => Width::Fixed,
            };

            let expected_spatial = match lf.kind {
                LayerKind::Dense => (1, 1),
                _ => {
                    let pooled = (in_spatial.0.div_ceil(input_pool), in_spatial.1.div_ceil(input_pool));
                    (pooled.0.div_ceil(lf.stride), pooled.1.div_ceil(lf.stride))
                }
            };
            let spatial_out = (lf.spatial_out[0], lf.spatial_out[1]);
            if spatial_out != expected_spatial {
                return Err(invalid(format!(
                    "layer `{}` declares spatial_out {:?} but the stride chain gives {:?}",
                    lf.name, spatial_out, expected_spatial
                )));
            }

            match lf.kind {
                LayerKind::PointwiseConv if lf.kernel != [1, 1] => {
                    return Err(invalid(format!("pointwise layer `{}` must have a 1x1 kernel", lf.name)))
                }
                LayerKind::Dense if lf.stride != 1 => {
                    return Err(invalid(format!("dense layer `{}` must have stride 1", lf.name)))
                }
                LayerKind::DepthwiseConv if lf.base_width != in_channels => {
                    return Err(invalid(format!(
                        "depthwise layer `{}` has base_width {} but its input has {} channels",
                        lf.name, lf.base_width, in_channels
                    )))
                }
                _ => {}
            }

            let residual = match &lf.residual {
                Some(r) => {
                    let ri = lookup(r, "residual")?;
                    if produced[ri].1 != spatial_out || layers[ri].base_width != lf.base_width {
                        return Err(invalid(format!(
                            "layer `{}` adds residual `{r}` with a different shape",
                            lf.name
                        )));
                    }
                    Some(ri)
                }
                None => None,
            };

            let is_conv = lf.kind.is_conv();
            layers.push(LayerSpec {
                name: lf.name.clone(),
                kind: lf.kind,
                kernel: (lf.kernel[0], lf.kernel[1]),
                stride: lf.stride,
                source,
                input_pool,
                spatial_out,
                base_width: lf.base_width,
                width,
                residual,
                norm: lf.norm.unwrap_or(is_conv),
                relu: lf.relu.unwrap_or(is_conv),
                bias: lf.bias.unwrap_or(!is_conv),
            });
            produced.push((lf.base_width, spatial_out));
            layer_index.insert(lf.name.as_str(), idx);
        }

        // every slot drives at least one layer
        let used: BTreeSet<usize> = layers
            .iter()
            .filter_map(|l| match l.width {
                Width::Slot(s) => Some(s),
                _ => None,
            })
            .collect();
        if let Some(unused) = (0..file.slots.len()).find(|s| !used.contains(s)) {
            return Err(invalid(format!("slot `{}` is not used by any layer", file.slots[unused].name)));
        }

        let mut shortcut_groups = Vec::new();
        for group in &file.shortcut_groups {
            let mut members = Vec::new();
            for name in group {
                let i = *layer_index
                    .get(name.as_str())
                    .ok_or_else(|| invalid(format!("shortcut group references unknown layer `{name}`")))?;
                members.push(i);
            }
            let widths: BTreeSet<_> = members.iter().map(|&i| layers[i].width).collect();
            if widths.len() > 1 || !matches!(widths.iter().next(), Some(Width::Slot(_)) | None) {
                return Err(invalid(format!("shortcut group {group:?} does not share one slot")));
            }
            shortcut_groups.push(members);
        }

        // a residual add needs both operands on the same slot (or both fixed)
        for l in &layers {
            if let Some(r) = l.residual {
                let a = Self::width_root(&layers, l);
                let b = Self::width_root(&layers, &layers[r]);
                if a != b {
                    return Err(invalid(format!(
                        "layer `{}` adds `{}` but their widths come from different slots",
                        l.name, layers[r].name
                    )));
                }
            }
        }

        Ok(Self {
            name: file.name,
            notes: file.notes,
            input_shape: (c, h, w),
            slots: file.slots,
            layers,
            shortcut_groups,
        })
    }

    // The width decision a layer ultimately inherits (chasing depthwise layers).
    fn width_root<'a>(layers: &'a [LayerSpec], mut layer: &'a LayerSpec) -> Option<Width> {
        loop {
            match layer.width {
                Width::FollowInput => match layer.source {
                    Source::Layer(i) => layer = &layers[i],
                    Source::Input => return None,
                },
                w => return Some(w),
            }
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn notes(&self) -> &str {
        &self.notes
    }

    /// `(channels, height, width)`.
    pub fn input_shape(&self) -> (usize, usize, usize) {
        self.input_shape
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    pub fn slots(&self) -> &[SlotSpec] {
        &self.slots
    }

    pub fn shortcut_groups(&self) -> &[Vec<usize>] {
        &self.shortcut_groups
    }

    pub fn nev_len(&self) -> usize {
        self.slots.len()
    }

    pub fn full_width_nev(&self) -> Nev {
        Nev(vec![MAX_INDEX; self.nev_len()])
    }

    pub fn check_nev(&self, nev: &Nev) -> Result<(), ArchError> {
        if nev.len() != self.nev_len() {
            return Err(ArchError::NevLength {
                template: self.name.clone(),
                expected: self.nev_len(),
                got: nev.len(),
            });
        }
        Ok(())
    }

    /// Output channels of one layer under `nev`.
    pub fn channels_of(&self, nev: &Nev, layer: usize) -> Result<usize, ArchError> {
        self.check_nev(nev)?;
        if layer >= self.layers.len() {
            return Err(ArchError::LayerOutOfRange { index: layer, len: self.layers.len() });
        }
        Ok(self.channel_counts_unchecked(nev)[layer])
    }

    /// Output channels of every layer under `nev`.
    pub fn channel_counts(&self, nev: &Nev) -> Result<Vec<usize>, ArchError> {
        self.check_nev(nev)?;
        Ok(self.channel_counts_unchecked(nev))
    }

    fn channel_counts_unchecked(&self, nev: &Nev) -> Vec<usize> {
        let mut out: Vec<usize> = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let c = match layer.width {
                Width::Slot(s) => ScaleGrid.scale_channels(layer.base_width, nev.0[s]),
                Width::Fixed => layer.base_width,
                Width::FollowInput => match layer.source {
                    Source::Input => self.input_shape.0,
                    Source::Layer(i) => out[i],
                },
            };
            out.push(c);
        }
        out
    }

    /// Input channels of each layer given the output channel counts.
    pub fn input_channels(&self, channels: &[usize]) -> Vec<usize> {
        self.layers
            .iter()
            .map(|l| match l.source {
                Source::Input => self.input_shape.0,
                Source::Layer(i) => channels[i],
            })
            .collect()
    }

    /// Multiply-accumulate count of each layer.
    pub fn layer_flops(&self, nev: &Nev) -> Result<Vec<u64>, ArchError> {
        let channels = self.channel_counts(nev)?;
        let inputs = self.input_channels(&channels);
        Ok(self
            .layers
            .iter()
            .zip(channels.iter().zip(&inputs))
            .map(|(l, (&c_out, &c_in))| {
                let (kh, kw) = l.kernel;
                let hw = (l.spatial_out.0 * l.spatial_out.1) as u64;
                let (kh, kw, c_in, c_out) = (kh as u64, kw as u64, c_in as u64, c_out as u64);
                match l.kind {
                    LayerKind::StandardConv | LayerKind::PointwiseConv => kh * kw * c_in * c_out * hw,
                    LayerKind::DepthwiseConv => kh * kw * c_in * hw,
                    LayerKind::Dense => c_in * c_out,
                }
            })
            .collect())
    }

    /// Multiply-accumulate count of one forward pass on one sample.
    pub fn flops_of(&self, nev: &Nev) -> Result<u64, ArchError> {
        Ok(self.layer_flops(nev)?.iter().sum())
    }

    /// Parameter count of each layer.
    pub fn layer_params(&self, nev: &Nev) -> Result<Vec<u64>, ArchError> {
        let channels = self.channel_counts(nev)?;
        let inputs = self.input_channels(&channels);
        Ok(self
            .layers
            .iter()
            .zip(channels.iter().zip(&inputs))
            .map(|(l, (&c_out, &c_in))| {
                let w: usize = l.weight_shape(c_out, c_in).iter().product();
                let affine = if l.norm { 2 * c_out } else { 0 };
                let bias = if l.bias { c_out } else { 0 };
                (w + affine + bias) as u64
            })
            .collect())
    }

    pub fn params_of(&self, nev: &Nev) -> Result<u64, ArchError> {
        Ok(self.layer_params(nev)?.iter().sum())
    }

    pub fn full_width_flops(&self) -> u64 {
        self.flops_of(&self.full_width_nev()).expect("full-width NEV is valid")
    }

    pub fn full_width_params(&self) -> u64 {
        self.params_of(&self.full_width_nev()).expect("full-width NEV is valid")
    }

    /// Draws every slot uniformly and independently from `range`.
    pub fn random_nev<R: Rng + ?Sized>(&self, rng: &mut R, range: SlotRange) -> Nev {
        Nev((0..self.nev_len()).map(|_| range.sample(rng)).collect())
    }
}
