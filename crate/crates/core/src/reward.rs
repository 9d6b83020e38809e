//! Accuracy/efficiency reward.
//!
//! `reward = alpha * psi` where
//!
//! ```text
//! alpha(A) = (b_a / (b_a - A))^2      accuracy coefficient, >= 1 on [0, b_a)
//! psi(F)   = ln(b_f / F)              efficiency coefficient, > 0 on (0, b_f)
//! ```
//!
//! Accuracies are fractions in `[0, 1)`, FLOPs are multiply-accumulate counts.
//! Points outside either coefficient's domain are hard errors: clamping near
//! the pole of `alpha` would let a single gene swamp the ranking.

use std::io::Write;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::CSV_SCHEMA;

#[derive(Debug, Clone, PartialEq, Error, Serialize, Deserialize)]
pub enum RewardError {
    #[error("baseline accuracy {0} must lie in (0, 1)")]
    BaselineAccuracy(f64),
    #[error("baseline FLOPs {0} must be positive")]
    BaselineFlops(f64),
    #[error("accuracy {accuracy} is outside [0, b_a = {baseline}); the baseline accuracy looks miscalibrated")]
    AccuracyDomain { accuracy: f64, baseline: f64 },
    #[error("FLOPs {flops} is outside (0, b_f = {baseline}); the gene should have been rejected by the FLOPs window")]
    FlopsDomain { flops: f64, baseline: f64 },
    #[error("baseline parameter count is zero")]
    ZeroBaselineParams,
}

/// Baseline accuracy `b_a` and baseline FLOPs `b_f`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawParams", into = "RawParams")]
pub struct RewardParams {
    baseline_accuracy: f64,
    baseline_flops: f64,
}

#[derive(Serialize, Deserialize)]
struct RawParams {
    b_a: f64,
    b_f: f64,
}

impl TryFrom<RawParams> for RewardParams {
    type Error = RewardError;

    fn try_from(raw: RawParams) -> Result<Self, Self::Error> {
        RewardParams::new(raw.b_a, raw.b_f)
    }
}

impl From<RewardParams> for RawParams {
    fn from(p: RewardParams) -> Self {
        RawParams { b_a: p.baseline_accuracy, b_f: p.baseline_flops }
    }
}

impl RewardParams {
    pub fn new(baseline_accuracy: f64, baseline_flops: f64) -> Result<Self, RewardError> {
        if !(baseline_accuracy > 0.0 && baseline_accuracy < 1.0) {
            return Err(RewardError::BaselineAccuracy(baseline_accuracy));
        }
        if !(baseline_flops > 0.0 && baseline_flops.is_finite()) {
            return Err(RewardError::BaselineFlops(baseline_flops));
        }
        Ok(Self { baseline_accuracy, baseline_flops })
    }

    pub fn baseline_accuracy(&self) -> f64 {
        self.baseline_accuracy
    }

    pub fn baseline_flops(&self) -> f64 {
        self.baseline_flops
    }
}

/// Both coefficients and their product.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewardValue {
    pub alpha: f64,
    pub psi: f64,
    pub reward: f64,
}

impl RewardValue {
    pub fn new(alpha: f64, psi: f64) -> Self {
        Self { alpha, psi, reward: alpha * psi }
    }
}

/// Maps a gene's measured accuracy and FLOPs to a reward.
///
/// The search only ever sees this trait, so other coefficient combinations
/// (latency, energy, prune rate) can be plugged in without touching it.
pub trait RewardFn: Sync {
    fn evaluate(&self, accuracy: f64, flops: f64) -> Result<RewardValue, RewardError>;
}

impl RewardFn for RewardParams {
    fn evaluate(&self, accuracy: f64, flops: f64) -> Result<RewardValue, RewardError> {
        reward(accuracy, flops, self)
    }
}

/// Accuracy coefficient `(b_a / (b_a - A))^2`.
pub fn alpha(accuracy: f64, params: &RewardParams) -> Result<f64, RewardError> {
    let b_a = params.baseline_accuracy;
    if !(0.0..b_a).contains(&accuracy) {
        return Err(RewardError::AccuracyDomain { accuracy, baseline: b_a });
    }
    let ratio = b_a / (b_a - accuracy);
    Ok(ratio * ratio)
}

/// Efficiency coefficient `ln(b_f / F)`.
pub fn psi(flops: f64, params: &RewardParams) -> Result<f64, RewardError> {
    let b_f = params.baseline_flops;
    if !(flops > 0.0 && flops < b_f) {
        return Err(RewardError::FlopsDomain { flops, baseline: b_f });
    }
    Ok((b_f / flops).ln())
}

pub fn reward(accuracy: f64, flops: f64, params: &RewardParams) -> Result<RewardValue, RewardError> {
    Ok(RewardValue::new(alpha(accuracy, params)?, psi(flops, params)?))
}

/// Parameter ratio `P_m / P_b * 100`, in percent.
pub fn param_ratio(pruned_params: u64, baseline_params: u64) -> Result<f64, RewardError> {
    if baseline_params == 0 {
        return Err(RewardError::ZeroBaselineParams);
    }
    Ok(pruned_params as f64 / baseline_params as f64 * 100.0)
}

/// Reward evaluated over an accuracy x FLOPs grid. Out-of-domain cells keep
/// their error instead of failing the whole surface.
#[derive(Debug, Clone)]
pub struct RewardSurface {
    pub accuracies: Vec<f64>,
    pub flops: Vec<f64>,
    /// `cells[i][j]` is the reward at `(accuracies[i], flops[j])`.
    pub cells: Vec<Vec<Result<RewardValue, RewardError>>>,
}

pub fn reward_surface(params: &RewardParams, accuracies: &[f64], flops: &[f64]) -> RewardSurface {
    let cells = accuracies
        .iter()
        .map(|&a| flops.iter().map(|&f| reward(a, f, params)).collect())
        .collect();
    RewardSurface { accuracies: accuracies.to_vec(), flops: flops.to_vec(), cells }
}

/// `n` evenly spaced points from `lo` to `hi` inclusive.
pub fn linspace(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    match n {
        0 => Vec::new(),
        1 => vec![lo],
        _ => (0..n).map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64).collect(),
    }
}

impl RewardSurface {
    /// Number of cells that fell outside the coefficient domains.
    pub fn flagged(&self) -> usize {
        self.cells.iter().flatten().filter(|c| c.is_err()).count()
    }

    /// CSV: a schema comment line, then a header row holding the FLOPs grid
    /// (first cell `accuracy`), then one row per accuracy. Flagged cells are
    /// written as `NaN`.
    pub fn write_csv<W: Write>(&self, out: W) -> csv::Result<()> {
        let mut out = out;
        writeln!(out, "{CSV_SCHEMA}")?;
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["accuracy".to_string()];
        header.extend(self.flops.iter().map(|f| f.to_string()));
        w.write_record(&header)?;
        for (a, row) in self.accuracies.iter().zip(&self.cells) {
            let mut record = vec![a.to_string()];
            record.extend(row.iter().map(|c| match c {
                Ok(v) => v.reward.to_string(),
                Err(_) => "NaN".to_string(),
            }));
            w.write_record(&record)?;
        }
        w.flush()?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn table1() -> RewardParams {
        RewardParams::new(0.766, 4110e6).unwrap()
    }

    fn close(a: f64, b: f64, rel: f64) -> bool {
        ((a - b) / b).abs() < rel
    }

    #[test]
    fn alpha_examples() {
        let p = table1();
        assert_eq!(alpha(0.0, &p).unwrap(), 1.0);
        assert!((alpha(0.383, &p).unwrap() - 4.0).abs() < 1e-12);
        // (0.766 / 0.0084)^2
        let expected = (0.766f64 / (0.766 - 0.7576)).powi(2);
        assert!(close(alpha(0.7576, &p).unwrap(), 8316.0, 1e-3));
        assert_eq!(alpha(0.7576, &p).unwrap(), expected);
        assert!(matches!(alpha(0.766, &p), Err(RewardError::AccuracyDomain { .. })));
        assert!(matches!(alpha(0.9, &p), Err(RewardError::AccuracyDomain { .. })));
        assert!(matches!(alpha(-0.1, &p), Err(RewardError::AccuracyDomain { .. })));
    }

    #[test]
    fn psi_examples() {
        let p = table1();
        assert!(close(psi(1950e6, &p).unwrap(), 0.7457, 1e-3));
        assert!((psi(4110e6 / std::f64::consts::E, &p).unwrap() - 1.0).abs() < 1e-12);
        assert!(psi(4110e6 * (1.0 - 1e-12), &p).unwrap() < 1e-11);
        assert!(matches!(psi(4110e6, &p), Err(RewardError::FlopsDomain { .. })));
        assert!(matches!(psi(0.0, &p), Err(RewardError::FlopsDomain { .. })));
    }

    #[test]
    fn reward_examples() {
        let p = table1();
        let v = reward(0.7576, 1950e6, &p).unwrap();
        assert_eq!(v.reward, v.alpha * v.psi);
        assert!(close(v.reward, 6202.0, 1e-3), "{}", v.reward);
        let unit = reward(0.0, 4110e6 / std::f64::consts::E, &p).unwrap();
        assert!((unit.reward - 1.0).abs() < 1e-12);
    }

    #[test]
    fn param_ratio_examples() {
        assert_eq!(param_ratio(25_500_000, 25_500_000).unwrap(), 100.0);
        assert_eq!(param_ratio(0, 25_500_000).unwrap(), 0.0);
        assert_eq!(param_ratio(12_750_000, 25_500_000).unwrap(), 50.0);
        assert_eq!(param_ratio(1, 0), Err(RewardError::ZeroBaselineParams));
    }

    #[test]
    fn params_validation() {
        assert!(RewardParams::new(1.0, 1.0).is_err());
        assert!(RewardParams::new(0.0, 1.0).is_err());
        assert!(RewardParams::new(0.5, 0.0).is_err());
        assert!(serde_json::from_str::<RewardParams>(r#"{"b_a":1.5,"b_f":10}"#).is_err());
        let p: RewardParams = serde_json::from_str(r#"{"b_a":0.5,"b_f":10}"#).unwrap();
        assert_eq!(p.baseline_flops(), 10.0);
    }

    #[test]
    fn surface_single_cell_and_monotone() {
        let p = table1();
        let one = reward_surface(&p, &[0.5], &[2000e6]);
        assert_eq!(one.cells[0][0].as_ref().unwrap(), &reward(0.5, 2000e6, &p).unwrap());

        let s = reward_surface(&p, &linspace(0.0, 0.76, 20), &linspace(100e6, 4100e6, 25));
        assert_eq!(s.flagged(), 0);
        for row in &s.cells {
            let r: Vec<f64> = row.iter().map(|c| c.as_ref().unwrap().reward).collect();
            assert!(r.windows(2).all(|w| w[1] < w[0]), "decreasing along FLOPs");
        }
        for j in 0..s.flops.len() {
            let col: Vec<f64> = s.cells.iter().map(|row| row[j].as_ref().unwrap().reward).collect();
            assert!(col.windows(2).all(|w| w[1] > w[0]), "increasing along accuracy");
        }
    }

    #[test]
    fn surface_flags_out_of_domain_cells() {
        let p = table1();
        let s = reward_surface(&p, &[0.5, 0.8], &[1000e6, 5000e6]);
        assert_eq!(s.flagged(), 3);
        let mut buf = Vec::new();
        s.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], CSV_SCHEMA);
        assert_eq!(lines[1], "accuracy,1000000000,5000000000");
        assert!(lines[2].starts_with("0.5,") && lines[2].ends_with(",NaN"));
        assert_eq!(lines[3], "0.8,NaN,NaN");
    }

    proptest! {
        #[test]
        fn reward_monotone(a in 0.0f64..0.75, f in 1e6f64..4.0e9, da in 1e-6f64..0.01, df in 1e3f64..1e8) {
            let p = table1();
            let base = reward(a, f, &p).unwrap();
            prop_assert!(base.alpha >= 1.0 && base.psi > 0.0 && base.reward > 0.0);
            if a + da < p.baseline_accuracy() {
                prop_assert!(reward(a + da, f, &p).unwrap().reward > base.reward);
            }
            if f + df < p.baseline_flops() {
                prop_assert!(reward(a, f + df, &p).unwrap().reward < base.reward);
            }
        }
    }
}
