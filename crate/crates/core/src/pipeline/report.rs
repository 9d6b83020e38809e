//! Evaluation metrics and the run report.

use serde::{Deserialize, Serialize};

use crate::arch::{ArchError, ArchTemplate, Nev};
use crate::evosearch::Gene;
use crate::reward::param_ratio;
use crate::tensorcore::Tensor;
use crate::JSON_SCHEMA_VERSION;

/// Fraction of rows whose label is not among the `k` highest logits. A
/// label's rank counts the strictly larger logits plus equal logits at a
/// lower class index, so ties never help.
pub fn topk_error(logits: &Tensor, labels: &[usize], k: usize) -> f64 {
    let (n, classes) = (logits.shape()[0], logits.shape()[1]);
    assert_eq!(n, labels.len(), "one label per row");
    if n == 0 {
        return 0.0;
    }
    let data = logits.data();
    let misses = labels
        .iter()
        .enumerate()
        .filter(|&(i, &y)| {
            let row = &data[i * classes..(i + 1) * classes];
            let target = row[y];
            let rank = row.iter().enumerate().filter(|&(j, &v)| v > target || (v == target && j < y)).count();
            rank >= k
        })
        .count();
    misses as f64 / n as f64
}

/// Error rates and cost of one network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub nev: Nev,
    pub top1_error: f64,
    /// Top-`top_k` error, `top_k = min(5, classes)`.
    pub topk_error: f64,
    pub top_k: usize,
    pub flops: u64,
    pub params: u64,
    /// Parameters as a percentage of the full-width network.
    pub param_ratio: f64,
}

impl Metrics {
    pub fn new(template: &ArchTemplate, nev: &Nev, logits: &Tensor, labels: &[usize]) -> Result<Self, ArchError> {
        let top_k = logits.shape()[1].min(5);
        let params = template.params_of(nev)?;
        Ok(Self {
            nev: nev.clone(),
            top1_error: topk_error(logits, labels, 1),
            topk_error: topk_error(logits, labels, top_k),
            top_k,
            flops: template.flops_of(nev)?,
            params,
            param_ratio: param_ratio(params, template.full_width_params()).expect("templates have parameters"),
        })
    }
}

/// Wall-clock seconds spent in each phase by the process that finished it.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Timings {
    pub meta_train_s: f64,
    pub search_s: f64,
    pub retrain_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub schema_version: u32,
    pub template: String,
    pub seed: u64,
    pub full_width_flops: u64,
    pub full_width_params: u64,
    /// Search winner with its hypernetwork accuracy and reward.
    pub best: Gene,
    pub search_epochs: usize,
    pub unique_genes_evaluated: usize,
    pub meta_train_final_loss: Option<f64>,
    /// The winner retrained from scratch once per repeat, scored on the
    /// validation split.
    pub retrained: Vec<Metrics>,
    /// The full-width network trained the same way, if requested.
    pub full_width: Vec<Metrics>,
    pub timings: Timings,
}

impl RunReport {
    pub fn new(template: &ArchTemplate, seed: u64, best: Gene, retrained: Vec<Metrics>) -> Self {
        Self {
            schema_version: JSON_SCHEMA_VERSION,
            template: template.name().to_string(),
            seed,
            full_width_flops: template.full_width_flops(),
            full_width_params: template.full_width_params(),
            best,
            search_epochs: 0,
            unique_genes_evaluated: 0,
            meta_train_final_loss: None,
            retrained,
            full_width: Vec::new(),
            timings: Timings::default(),
        }
    }

    /// Equality of everything but the timings.
    pub fn same_outcome(&self, other: &RunReport) -> bool {
        Self { timings: Timings::default(), ..self.clone() } == Self { timings: Timings::default(), ..other.clone() }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn from_json(text: &str) -> serde_json::Result<Self> {
        serde_json::from_str(text)
    }

    /// A few human-readable lines.
    pub fn summary(&self) -> String {
        let b = &self.best;
        let mut s = format!(
            "template {} seed {}\nbest NEV {}\n  flops {} ({:.1}% of full width), hypernet accuracy {:.4}, reward {:.4}\n",
            self.template,
            self.seed,
            b.nev,
            b.flops,
            100.0 * b.flops as f64 / self.full_width_flops as f64,
            b.accuracy.unwrap_or(f64::NAN),
            b.reward.unwrap_or(f64::NAN),
        );
        let mut line = |label: &str, m: &Metrics| {
            s += &format!(
                "{label}: top-1 error {:.2}%, top-{} error {:.2}%, params {} ({:.1}%)\n",
                100.0 * m.top1_error,
                m.top_k,
                100.0 * m.topk_error,
                m.params,
                m.param_ratio
            );
        };
        for (i, m) in self.retrained.iter().enumerate() {
            line(&format!("retrained #{i}"), m);
        }
        for (i, m) in self.full_width.iter().enumerate() {
            line(&format!("full width #{i}"), m);
        }
        s
    }
}
