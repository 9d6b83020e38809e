//! Run configuration file.
//!
//! A JSON document holding every hyperparameter of an end-to-end run. All
//! fields but `template` and `dataset` have defaults, so a minimal file is
//!
//! ```json
//! { "template": "mininet", "dataset": { "format": "synthetic" } }
//! ```

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::arch::{ArchTemplate, SlotRange};
use crate::evosearch::SearchConfig;
use crate::pipeline::DataConfig;
use crate::reward::RewardParams;
use crate::tensorcore::Schedule;
use crate::JSON_SCHEMA_VERSION;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("invalid config:\n  - {}", .0.join("\n  - "))]
    Invalid(Vec<String>),
    #[error("config parse error: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("config io error on {path}: {source}")]
    Io { path: String, source: std::io::Error },
}

fn schema_version() -> u32 {
    JSON_SCHEMA_VERSION
}

/// Baseline accuracy and FLOPs of the reward. `b_f` defaults to the
/// template's full-width FLOPs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RewardConfig {
    pub b_a: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub b_f: Option<f64>,
}

impl Default for RewardConfig {
    fn default() -> Self {
        Self { b_a: 0.99, b_f: None }
    }
}

fn default_window() -> (f64, f64) {
    (0.3, 0.7)
}

/// Search hyperparameters. The FLOPs window is either given in MACs or as
/// fractions of the template's full-width FLOPs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SearchOptions {
    #[serde(default = "defaults::population")]
    pub population: usize,
    #[serde(default = "defaults::population")]
    pub elite_archive: usize,
    #[serde(default = "defaults::breeders")]
    pub breeders: usize,
    #[serde(default = "defaults::mutation_rate")]
    pub mutation_rate: f64,
    #[serde(default = "defaults::patience")]
    pub patience: usize,
    #[serde(default = "defaults::carried")]
    pub elites_carried: usize,
    #[serde(default = "defaults::mutants")]
    pub mutants: usize,
    #[serde(default = "defaults::crossovers")]
    pub crossovers: usize,
    #[serde(default = "defaults::retries")]
    pub retries: usize,
    #[serde(default)]
    pub slot_range: SlotRange,
    #[serde(default = "default_window")]
    pub window: (f64, f64),
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub min_flops: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_flops: Option<u64>,
}

mod defaults {
    pub fn population() -> usize {
        50
    }
    pub fn breeders() -> usize {
        10
    }
    pub fn mutation_rate() -> f64 {
        0.10
    }
    pub fn patience() -> usize {
        5
    }
    pub fn carried() -> usize {
        2
    }
    pub fn mutants() -> usize {
        24
    }
    pub fn crossovers() -> usize {
        14
    }
    pub fn retries() -> usize {
        100
    }
}

impl Default for SearchOptions {
    fn default() -> Self {
        serde_json::from_str("{}").expect("all fields have defaults")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Schedules {
    pub meta_train: Schedule,
    pub retrain: Schedule,
}

impl Default for Schedules {
    fn default() -> Self {
        Self {
            meta_train: Schedule::MilestoneDecay { initial_lr: 0.05, gamma: 0.1, milestones: vec![40, 56] },
            retrain: Schedule::MilestoneDecay { initial_lr: 0.1, gamma: 0.1, milestones: vec![20, 26] },
        }
    }
}

/// Epoch budget of each phase.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Epochs {
    /// Meta-training epochs.
    pub max_training: usize,
    /// Search generations.
    pub max_iter: usize,
    /// Retraining epochs.
    pub max_tuning: usize,
}

impl Default for Epochs {
    fn default() -> Self {
        Self { max_training: 64, max_iter: 20, max_tuning: 30 }
    }
}

fn default_seed() -> u64 {
    1
}
fn default_out() -> PathBuf {
    PathBuf::from("runs/default")
}
fn default_workers() -> usize {
    1
}
fn default_batch() -> usize {
    64
}
fn default_eval_batch() -> usize {
    500
}
fn default_calibration() -> usize {
    512
}
fn default_monitor() -> usize {
    2
}
fn default_repeats() -> usize {
    1
}
fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default = "schema_version")]
    pub schema_version: u32,
    /// Built-in template name or path to a template JSON file.
    pub template: String,
    pub dataset: DataConfig,
    #[serde(default)]
    pub reward: RewardConfig,
    #[serde(default)]
    pub search: SearchOptions,
    #[serde(default)]
    pub schedules: Schedules,
    #[serde(default)]
    pub epochs: Epochs,
    #[serde(default = "default_seed")]
    pub seed: u64,
    #[serde(default = "default_out")]
    pub out: PathBuf,
    /// Concurrent fitness evaluations during search.
    #[serde(default = "default_workers")]
    pub workers: usize,
    /// Training minibatch size.
    #[serde(default = "default_batch")]
    pub batch: usize,
    #[serde(default = "default_eval_batch")]
    pub eval_batch: usize,
    /// Training images used to calibrate normalization statistics.
    #[serde(default = "default_calibration")]
    pub calibration: usize,
    /// Random NEVs scored on validation after each meta-training epoch.
    #[serde(default = "default_monitor")]
    pub monitor_nevs: usize,
    /// Also retrain the full-width network for comparison.
    #[serde(default = "default_true")]
    pub compare_full_width: bool,
    /// Independent retrain seeds per network.
    #[serde(default = "default_repeats")]
    pub retrain_repeats: usize,
}

/// Derives the seed of one phase from the run seed.
pub fn phase_seed(seed: u64, phase: u64) -> u64 {
    seed ^ phase.wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

impl RunConfig {
    pub fn new(template: &str, dataset: DataConfig) -> Self {
        Self {
            schema_version: JSON_SCHEMA_VERSION,
            template: template.to_string(),
            dataset,
            reward: RewardConfig::default(),
            search: SearchOptions::default(),
            schedules: Schedules::default(),
            epochs: Epochs::default(),
            seed: default_seed(),
            out: default_out(),
            workers: default_workers(),
            batch: default_batch(),
            eval_batch: default_eval_batch(),
            calibration: default_calibration(),
            monitor_nevs: default_monitor(),
            compare_full_width: true,
            retrain_repeats: default_repeats(),
        }
    }

    pub fn from_json(text: &str) -> Result<Self, ConfigError> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io { path: path.display().to_string(), source })?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn load_template(&self) -> Result<ArchTemplate, ConfigError> {
        ArchTemplate::load(&self.template).map_err(|e| ConfigError::Invalid(vec![format!("template: {e}")]))
    }

    /// Every violated field at once.
    pub fn validate(&self) -> Result<(), ConfigError> {
        let mut errs = Vec::new();
        if self.schema_version != JSON_SCHEMA_VERSION {
            errs.push(format!("schema_version {} is not supported (expected {JSON_SCHEMA_VERSION})", self.schema_version));
        }
        let template = match ArchTemplate::load(&self.template) {
            Ok(t) => Some(t),
            Err(e) => {
                errs.push(format!("template: {e}"));
                None
            }
        };
        errs.extend(self.dataset.validate());
        if !(self.reward.b_a > 0.0 && self.reward.b_a < 1.0) {
            errs.push(format!("reward.b_a {} must lie in (0, 1)", self.reward.b_a));
        }
        if let Some(b_f) = self.reward.b_f {
            if !(b_f > 0.0 && b_f.is_finite()) {
                errs.push(format!("reward.b_f {b_f} must be positive"));
            }
        }
        let (lo, hi) = self.search.window;
        if self.search.min_flops.is_none() || self.search.max_flops.is_none() {
            if !(lo > 0.0 && lo <= hi && hi <= 1.0) {
                errs.push(format!("search.window ({lo}, {hi}) must satisfy 0 < lo <= hi <= 1"));
            }
        }
        if let Some(t) = &template {
            if let Ok(sc) = self.search_config(t) {
                if let Err(e) = sc.validate(Some(self.baseline_flops(t))) {
                    errs.extend(e.into_iter().map(|m| format!("search: {m}")));
                }
            }
        }
        for (name, s) in [("meta_train", &self.schedules.meta_train), ("retrain", &self.schedules.retrain)] {
            if let Err(e) = s.validate() {
                errs.push(format!("schedules.{name}: {e}"));
            }
        }
        if self.epochs.max_iter == 0 {
            errs.push("epochs.max_iter must be positive".to_string());
        }
        for (name, v) in [("workers", self.workers), ("batch", self.batch), ("eval_batch", self.eval_batch), ("calibration", self.calibration), ("retrain_repeats", self.retrain_repeats)] {
            if v == 0 {
                errs.push(format!("{name} must be positive"));
            }
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(ConfigError::Invalid(errs))
        }
    }

    pub fn baseline_flops(&self, template: &ArchTemplate) -> f64 {
        self.reward.b_f.unwrap_or(template.full_width_flops() as f64)
    }

    pub fn reward_params(&self, template: &ArchTemplate) -> Result<RewardParams, ConfigError> {
        RewardParams::new(self.reward.b_a, self.baseline_flops(template)).map_err(|e| ConfigError::Invalid(vec![format!("reward: {e}")]))
    }

    pub fn search_config(&self, template: &ArchTemplate) -> Result<SearchConfig, ConfigError> {
        let full = template.full_width_flops() as f64;
        let s = &self.search;
        Ok(SearchConfig {
            population: s.population,
            elite_archive: s.elite_archive,
            breeders: s.breeders,
            mutation_rate: s.mutation_rate,
            epochs: self.epochs.max_iter,
            min_flops: s.min_flops.unwrap_or((s.window.0 * full).ceil() as u64),
            max_flops: s.max_flops.unwrap_or((s.window.1 * full).floor() as u64),
            patience: s.patience,
            seed: phase_seed(self.seed, 2),
            elites_carried: s.elites_carried,
            mutants: s.mutants,
            crossovers: s.crossovers,
            retries: s.retries,
            slot_range: s.slot_range,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pipeline::DataFormat;

    fn minimal() -> RunConfig {
        RunConfig::from_json(r#"{"template":"mininet","dataset":{"format":"synthetic"}}"#).unwrap()
    }

    #[test]
    fn minimal_file_gets_defaults() {
        let c = minimal();
        assert_eq!(c.epochs, Epochs { max_training: 64, max_iter: 20, max_tuning: 30 });
        assert_eq!(c.dataset.samples, 10_000);
        assert_eq!(c.search.population, 50);
        assert_eq!(c, RunConfig::new("mininet", DataConfig::synthetic(10_000, 0)));
        c.validate().unwrap();
        let t = c.load_template().unwrap();
        let s = c.search_config(&t).unwrap();
        assert!(s.min_flops as f64 >= 0.3 * t.full_width_flops() as f64);
        assert!(s.max_flops as f64 <= 0.7 * t.full_width_flops() as f64);
    }

    #[test]
    fn round_trip_is_identical() {
        let mut c = minimal();
        c.reward.b_f = Some(1e6);
        c.search.min_flops = Some(10);
        c.dataset.path = Some("data".into());
        let again = RunConfig::from_json(&c.to_json()).unwrap();
        assert_eq!(again, c);
        assert_eq!(RunConfig::from_json(&again.to_json()).unwrap().to_json(), c.to_json());
    }

    #[test]
    fn validation_lists_every_problem() {
        let mut c = minimal();
        c.template = "nope".into();
        c.reward.b_a = 1.5;
        c.dataset.format = DataFormat::Idx;
        c.workers = 0;
        c.schedules.retrain = Schedule::PerEpochDecay { initial_lr: -1.0, gamma: 0.1 };
        c.search.window = (0.8, 0.2);
        let ConfigError::Invalid(errs) = c.validate().unwrap_err() else { panic!() };
        assert_eq!(errs.len(), 6, "{errs:#?}");
        for needle in ["template", "b_a", "dataset.path", "workers", "schedules.retrain", "window"] {
            assert!(errs.iter().any(|e| e.contains(needle)), "{needle} missing in {errs:#?}");
        }
    }

    #[test]
    fn unknown_fields_are_rejected() {
        assert!(RunConfig::from_json(r#"{"template":"mininet","dataset":{"format":"synthetic"},"sead":3}"#).is_err());
    }
}
