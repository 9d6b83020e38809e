//! The end-to-end run: meta-train, search, retrain, report.
//!
//! Every phase persists its state in the output directory after each epoch
//! and picks up from there when started again:
//!
//! | file | written by |
//! |---|---|
//! | `config.json` | every phase, checked on restart |
//! | `hypernet.ckpt`, `meta_train.json` | meta-train |
//! | `search_state.json`, `search_history.csv` | search |
//! | `retrain/<job>.ckpt`, `retrain/<job>.json` | retrain |
//! | `model.ckpt`, `report.json` | retrain |

use std::path::{Path, PathBuf};
use std::time::Instant;

use log::info;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::arch::{ArchTemplate, Nev};
use crate::config::{phase_seed, ConfigError, RunConfig};
use crate::evosearch::{write_history_csv, Search, SearchError, SearchState};
use crate::hypernet::{meta_train, HyperError, HyperFitness, HyperNet, MetaEpochLog, MetaTrainConfig};
use crate::stream_rng;
use crate::tensorcore::Checkpoint;
use crate::JSON_SCHEMA_VERSION;

use super::{ingest, init_rng, train, DataError, Dataset, Metrics, Network, RetrainConfig, RunReport, Timings, TrainEpochLog, TrainError};

pub const CONFIG_FILE: &str = "config.json";
pub const HYPERNET_FILE: &str = "hypernet.ckpt";
pub const META_PROGRESS_FILE: &str = "meta_train.json";
pub const SEARCH_STATE_FILE: &str = "search_state.json";
pub const SEARCH_HISTORY_FILE: &str = "search_history.csv";
pub const RETRAIN_DIR: &str = "retrain";
pub const MODEL_FILE: &str = "model.ckpt";
pub const REPORT_FILE: &str = "report.json";

#[derive(Debug, Error)]
pub enum RunError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("{path}: output directory holds a run with a different config; use a fresh --out")]
    ConfigChanged { path: String },
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("meta-train: {0}")]
    Hyper(#[from] HyperError),
    #[error("search: {0}")]
    Search(#[from] SearchError),
    #[error("retrain `{job}`: {source} (last checkpoint: {checkpoint})")]
    Retrain { job: String, checkpoint: String, source: TrainError },
    #[error("{phase} has not finished; run it first")]
    MissingPhase { phase: Phase },
    #[error("{path}: {detail}")]
    Artifact { path: String, detail: String },
    #[error("io error on {path}: {source}")]
    Io { path: String, source: std::io::Error },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    MetaTrain,
    Search,
    Retrain,
}

impl std::fmt::Display for Phase {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Phase::MetaTrain => "meta-train",
            Phase::Search => "search",
            Phase::Retrain => "retrain",
        })
    }
}

/// Stops a phase once it has completed `epochs` epochs in total, as if the
/// process had been killed right after saving. Retrain counts the epochs of
/// each job separately.
#[derive(Debug, Clone, Copy, Default)]
pub struct RunControl {
    pub halt: Option<(Phase, usize)>,
}

impl RunControl {
    fn halts(&self, phase: Phase, epochs_done: usize) -> bool {
        self.halt == Some((phase, epochs_done))
    }
}

/// Result of one phase invocation.
#[derive(Debug)]
pub enum Progress<T> {
    Done(T),
    Halted { phase: Phase, epochs_done: usize },
}

/// Per-epoch progress of a trained phase, saved next to its checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainProgress<L> {
    pub schema_version: u32,
    pub epochs_done: usize,
    /// Checksum of the parameters saved with this progress record.
    pub checksum: u64,
    pub log: Vec<L>,
    pub elapsed_s: f64,
}

/// Bookkeeping of one retrain job.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrainRecord {
    pub nev: Nev,
    pub seed: u64,
    pub progress: TrainProgress<TrainEpochLog>,
    /// Validation metrics once training has finished.
    pub metrics: Option<Metrics>,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> RunError + '_ {
    move |source| RunError::Io { path: path.display().to_string(), source }
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), RunError> {
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, bytes).map_err(io_err(&tmp))?;
    std::fs::rename(&tmp, path).map_err(io_err(path))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), RunError> {
    write_atomic(path, serde_json::to_string_pretty(value).expect("serializable").as_bytes())
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<Option<T>, RunError> {
    match std::fs::read_to_string(path) {
        Ok(text) => serde_json::from_str(&text)
            .map(Some)
            .map_err(|e| RunError::Artifact { path: path.display().to_string(), detail: e.to_string() }),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
        Err(e) => Err(io_err(path)(e)),
    }
}

fn median(mut v: Vec<f64>) -> Option<f64> {
    if v.is_empty() {
        return None;
    }
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    Some(if v.len() % 2 == 1 { v[m] } else { (v[m - 1] + v[m]) / 2.0 })
}

/// Median top-1 error over retrain repeats.
pub fn median_top1(runs: &[Metrics]) -> Option<f64> {
    median(runs.iter().map(|m| m.top1_error).collect())
}

/// A configured run bound to its output directory.
pub struct Run {
    cfg: RunConfig,
    template: ArchTemplate,
    data: Dataset,
    dir: PathBuf,
}

impl Run {
    /// Validates the config, loads the template and data and claims the
    /// output directory. A directory from an earlier run is accepted only if
    /// its config matches (apart from `out` and `workers`).
    pub fn prepare(cfg: RunConfig) -> Result<Self, RunError> {
        cfg.validate()?;
        let template = cfg.load_template()?;
        let dir = cfg.out.clone();
        std::fs::create_dir_all(dir.join(RETRAIN_DIR)).map_err(io_err(&dir))?;
        let path = dir.join(CONFIG_FILE);
        if let Some(stored) = read_json::<RunConfig>(&path)? {
            let comparable = |c: &RunConfig| RunConfig { out: PathBuf::new(), workers: 1, ..c.clone() };
            if comparable(&stored) != comparable(&cfg) {
                return Err(RunError::ConfigChanged { path: path.display().to_string() });
            }
        }
        write_json(&path, &cfg)?;
        let data = ingest(&cfg.dataset)?;
        info!("dataset: {} train / {} validation images, {} classes", data.train.len(), data.validation.len(), data.classes());
        Ok(Self { cfg, template, data, dir })
    }

    pub fn config(&self) -> &RunConfig {
        &self.cfg
    }

    pub fn template(&self) -> &ArchTemplate {
        &self.template
    }

    pub fn dataset(&self) -> &Dataset {
        &self.data
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    fn meta_config(&self) -> MetaTrainConfig {
        MetaTrainConfig {
            epochs: self.cfg.epochs.max_training,
            batch: self.cfg.batch,
            schedule: self.cfg.schedules.meta_train.clone(),
            seed: phase_seed(self.cfg.seed, 1),
            monitor_nevs: self.cfg.monitor_nevs,
            calibration: self.cfg.calibration,
        }
    }

    pub fn meta_progress(&self) -> Result<Option<TrainProgress<MetaEpochLog>>, RunError> {
        read_json(&self.path(META_PROGRESS_FILE))
    }

    fn load_hypernet(&self, progress: &TrainProgress<MetaEpochLog>) -> Result<HyperNet, RunError> {
        let path = self.path(HYPERNET_FILE);
        let net = HyperNet::load(&self.template, &path)?;
        if net.params().checksum() != progress.checksum {
            return Err(RunError::Artifact {
                path: path.display().to_string(),
                detail: format!("checkpoint does not match {META_PROGRESS_FILE}; the run was interrupted while saving"),
            });
        }
        Ok(net)
    }

    /// Trains the hypernetwork, continuing from the last saved epoch.
    pub fn meta_train(&self, ctl: &RunControl) -> Result<Progress<HyperNet>, RunError> {
        let cfg = self.meta_config();
        let (mut net, mut progress) = match self.meta_progress()? {
            Some(p) => (self.load_hypernet(&p)?, p),
            None => {
                let net = HyperNet::new(&self.template, &mut stream_rng(cfg.seed, u64::MAX));
                let p = TrainProgress { schema_version: JSON_SCHEMA_VERSION, epochs_done: 0, checksum: net.params().checksum(), log: Vec::new(), elapsed_s: 0.0 };
                (net, p)
            }
        };
        if progress.epochs_done >= cfg.epochs {
            return Ok(Progress::Done(net));
        }
        if progress.epochs_done == 0 {
            net.save(&self.path(HYPERNET_FILE))?;
            write_json(&self.path(META_PROGRESS_FILE), &progress)?;
        }
        info!("meta-train: epochs {}..{}", progress.epochs_done, cfg.epochs);
        let mut clock = Instant::now();
        let mut failure = None;
        let mut halted = false;
        meta_train(&mut net, &self.data.train, Some(&self.data.validation), &cfg, progress.epochs_done, |net, entry| {
            progress.epochs_done = entry.epoch + 1;
            progress.checksum = net.params().checksum();
            progress.log.push(entry.clone());
            progress.elapsed_s += clock.elapsed().as_secs_f64();
            clock = Instant::now();
            let saved = net.save(&self.path(HYPERNET_FILE)).map_err(RunError::from).and_then(|_| write_json(&self.path(META_PROGRESS_FILE), &progress));
            if let Err(e) = saved {
                failure = Some(e);
                return false;
            }
            halted = ctl.halts(Phase::MetaTrain, progress.epochs_done);
            !halted
        })?;
        if let Some(e) = failure {
            return Err(e);
        }
        if halted && progress.epochs_done < cfg.epochs {
            return Ok(Progress::Halted { phase: Phase::MetaTrain, epochs_done: progress.epochs_done });
        }
        Ok(Progress::Done(net))
    }

    fn finished_hypernet(&self) -> Result<HyperNet, RunError> {
        match self.meta_progress()? {
            Some(p) if p.epochs_done >= self.cfg.epochs.max_training => self.load_hypernet(&p),
            _ => Err(RunError::MissingPhase { phase: Phase::MetaTrain }),
        }
    }

    fn save_search(&self, state: &SearchState) -> Result<(), RunError> {
        write_json(&self.path(SEARCH_STATE_FILE), &StoredSearch { schema_version: JSON_SCHEMA_VERSION, state: state.clone() })?;
        let mut csv = Vec::new();
        write_history_csv(&state.history, &mut csv).map_err(|e| RunError::Artifact { path: SEARCH_HISTORY_FILE.into(), detail: e.to_string() })?;
        write_atomic(&self.path(SEARCH_HISTORY_FILE), &csv)
    }

    /// Evolutionary search scored by the trained hypernetwork.
    pub fn search(&self, ctl: &RunControl) -> Result<Progress<SearchState>, RunError> {
        let stored: Option<StoredSearch> = read_json(&self.path(SEARCH_STATE_FILE))?;
        if let Some(s) = &stored {
            if s.state.finished {
                return Ok(Progress::Done(s.state.clone()));
            }
        }
        let net = self.finished_hypernet()?;
        let search_cfg = self.cfg.search_config(&self.template)?;
        let reward = self.cfg.reward_params(&self.template)?;
        let fitness = HyperFitness {
            net: &net,
            calibration: self.data.train.head(self.cfg.calibration),
            validation: &self.data.validation,
            batch: self.cfg.eval_batch,
        };
        let search = match stored {
            Some(s) => Search::resume(&self.template, &search_cfg, s.state, &fitness, &reward)?,
            None => Search::new(&self.template, search_cfg, &fitness, &reward)?,
        };
        let mut search = search.with_workers(self.cfg.workers);
        let started = Instant::now();
        let mut failure = None;
        let mut halted = false;
        search.run(|state| {
            let rec = state.history.last().expect("one epoch ran");
            info!(
                "search epoch {}: best reward {:.4} (accuracy {:.4}, flops {}), {} unique genes",
                rec.epoch, rec.best_reward, rec.best_accuracy, rec.best_flops, rec.unique_genes_evaluated
            );
            if let Err(e) = self.save_search(state) {
                failure = Some(e);
                return false;
            }
            halted = ctl.halts(Phase::Search, state.epoch);
            !halted
        })?;
        if let Some(e) = failure {
            return Err(e);
        }
        let state = search.into_state();
        let mut timing: SearchTiming = read_json(&self.path(SEARCH_TIMING_FILE))?.unwrap_or_default();
        timing.elapsed_s += started.elapsed().as_secs_f64();
        write_json(&self.path(SEARCH_TIMING_FILE), &timing)?;
        if halted && !state.finished {
            return Ok(Progress::Halted { phase: Phase::Search, epochs_done: state.epoch });
        }
        Ok(Progress::Done(state))
    }

    fn finished_search(&self) -> Result<SearchState, RunError> {
        match self.search_state()? {
            Some(s) if s.finished => Ok(s),
            _ => Err(RunError::MissingPhase { phase: Phase::Search }),
        }
    }

    pub fn search_state(&self) -> Result<Option<SearchState>, RunError> {
        Ok(read_json::<StoredSearch>(&self.path(SEARCH_STATE_FILE))?.map(|s| s.state))
    }

    fn retrain_config(&self, repeat: usize) -> RetrainConfig {
        RetrainConfig {
            epochs: self.cfg.epochs.max_tuning,
            batch: self.cfg.batch,
            schedule: self.cfg.schedules.retrain.clone(),
            seed: phase_seed(self.cfg.seed, 3 + repeat as u64),
        }
    }

    /// Names of the retrain jobs: the winner and, if requested, the full
    /// width network, once per repeat.
    pub fn retrain_jobs(&self, best: &Nev) -> Vec<(String, Nev, usize)> {
        let mut jobs = Vec::new();
        for r in 0..self.cfg.retrain_repeats {
            jobs.push((format!("best-{r}"), best.clone(), r));
            if self.cfg.compare_full_width {
                jobs.push((format!("full-{r}"), self.template.full_width_nev(), r));
            }
        }
        jobs
    }

    fn job_paths(&self, job: &str) -> (PathBuf, PathBuf) {
        let d = self.dir.join(RETRAIN_DIR);
        (d.join(format!("{job}.ckpt")), d.join(format!("{job}.json")))
    }

    /// Trains `nev` from scratch as retrain job `job` and scores it on the
    /// validation split. Only the train split feeds the weights.
    pub fn retrain_job(&self, job: &str, nev: &Nev, repeat: usize, ctl: &RunControl) -> Result<Progress<RetrainRecord>, RunError> {
        let cfg = self.retrain_config(repeat);
        let (ckpt, record_path) = self.job_paths(job);
        let wrap = |source: TrainError| RunError::Retrain { job: job.to_string(), checkpoint: ckpt.display().to_string(), source };
        let stored: Option<RetrainRecord> = read_json(&record_path)?;
        let (mut net, mut record) = match stored {
            Some(r) if r.nev == *nev && r.seed == cfg.seed => {
                if r.metrics.is_some() {
                    return Ok(Progress::Done(r));
                }
                let net = Network::from_checkpoint(&self.template, nev, &Checkpoint::load(&ckpt).map_err(|e| wrap(e.into()))?).map_err(wrap)?;
                if net.params().checksum() != r.progress.checksum {
                    return Err(RunError::Artifact { path: ckpt.display().to_string(), detail: "checkpoint does not match its progress record".into() });
                }
                (net, r)
            }
            Some(_) => return Err(RunError::ConfigChanged { path: record_path.display().to_string() }),
            None => {
                let net = Network::init(&self.template, nev, &mut init_rng(cfg.seed)).map_err(|e| wrap(e.into()))?;
                let progress = TrainProgress { schema_version: JSON_SCHEMA_VERSION, epochs_done: 0, checksum: net.params().checksum(), log: Vec::new(), elapsed_s: 0.0 };
                net.save(&ckpt).map_err(wrap)?;
                let r = RetrainRecord { nev: nev.clone(), seed: cfg.seed, progress, metrics: None };
                write_json(&record_path, &r)?;
                (net, r)
            }
        };
        info!("retrain {job} ({nev}): epochs {}..{}", record.progress.epochs_done, cfg.epochs);
        let mut clock = Instant::now();
        let mut failure = None;
        let mut halted = false;
        let start = record.progress.epochs_done;
        train(&mut net, &self.data.train, &cfg, start, |net, entry| {
            let p = &mut record.progress;
            p.epochs_done = entry.epoch + 1;
            p.checksum = net.params().checksum();
            p.log.push(entry.clone());
            p.elapsed_s += clock.elapsed().as_secs_f64();
            clock = Instant::now();
            let saved = net.save(&ckpt).map_err(wrap).and_then(|_| write_json(&record_path, &record));
            if let Err(e) = saved {
                failure = Some(e);
                return false;
            }
            halted = ctl.halts(Phase::Retrain, record.progress.epochs_done);
            !halted
        })
        .map_err(wrap)?;
        if let Some(e) = failure {
            return Err(e);
        }
        if halted && record.progress.epochs_done < cfg.epochs {
            return Ok(Progress::Halted { phase: Phase::Retrain, epochs_done: record.progress.epochs_done });
        }
        let calibration = self.data.train.head(self.cfg.calibration);
        let logits = net.logits(&calibration, &self.data.validation, self.cfg.eval_batch).map_err(wrap)?;
        let metrics = Metrics::new(&self.template, nev, &logits, self.data.validation.labels()).map_err(|e| wrap(e.into()))?;
        info!("retrain {job}: top-1 error {:.4}, top-{} error {:.4}", metrics.top1_error, metrics.top_k, metrics.topk_error);
        record.metrics = Some(metrics);
        write_json(&record_path, &record)?;
        if job == "best-0" {
            std::fs::copy(&ckpt, self.path(MODEL_FILE)).map_err(io_err(&ckpt))?;
        }
        Ok(Progress::Done(record))
    }

    /// Runs every retrain job, then writes the report.
    pub fn retrain(&self, ctl: &RunControl) -> Result<Progress<RunReport>, RunError> {
        let state = self.finished_search()?;
        let best = state.best().ok_or(RunError::Search(SearchError::NoViableGene))?;
        for (job, nev, repeat) in self.retrain_jobs(&best.nev) {
            if let Progress::Halted { phase, epochs_done } = self.retrain_job(&job, &nev, repeat, ctl)? {
                return Ok(Progress::Halted { phase, epochs_done });
            }
        }
        let report = self.assemble_report()?;
        write_atomic(&self.path(REPORT_FILE), report.to_json().as_bytes())?;
        Ok(Progress::Done(report))
    }

    /// Rebuilds the report from the saved phase artifacts.
    pub fn assemble_report(&self) -> Result<RunReport, RunError> {
        let meta = self.meta_progress()?.ok_or(RunError::MissingPhase { phase: Phase::MetaTrain })?;
        let state = self.finished_search()?;
        let best = state.best().cloned().ok_or(RunError::Search(SearchError::NoViableGene))?;
        let mut retrained = Vec::new();
        let mut full = Vec::new();
        let mut retrain_s = 0.0;
        for (job, nev, _) in self.retrain_jobs(&best.nev) {
            let (_, path) = self.job_paths(&job);
            let record: RetrainRecord = read_json(&path)?.ok_or(RunError::MissingPhase { phase: Phase::Retrain })?;
            let metrics = record.metrics.ok_or(RunError::MissingPhase { phase: Phase::Retrain })?;
            if metrics.nev != nev {
                return Err(RunError::Artifact { path: path.display().to_string(), detail: format!("holds {}, expected {nev}", metrics.nev) });
            }
            retrain_s += record.progress.elapsed_s;
            if job.starts_with("best") {
                retrained.push(metrics);
            } else {
                full.push(metrics);
            }
        }
        let timing: SearchTiming = read_json(&self.path(SEARCH_TIMING_FILE))?.unwrap_or_default();
        let mut report = RunReport::new(&self.template, self.cfg.seed, best, retrained);
        report.search_epochs = state.epoch;
        report.unique_genes_evaluated = state.cache.len();
        report.meta_train_final_loss = meta.log.last().map(|l| l.mean_loss);
        report.full_width = full;
        report.timings = Timings { meta_train_s: meta.elapsed_s, search_s: timing.elapsed_s, retrain_s };
        Ok(report)
    }

    /// All phases in order, each resuming from its saved state.
    pub fn run_all(&self, ctl: &RunControl) -> Result<Progress<RunReport>, RunError> {
        if let Progress::Halted { phase, epochs_done } = self.meta_train(ctl)? {
            return Ok(Progress::Halted { phase, epochs_done });
        }
        if let Progress::Halted { phase, epochs_done } = self.search(ctl)? {
            return Ok(Progress::Halted { phase, epochs_done });
        }
        self.retrain(ctl)
    }
}

const SEARCH_TIMING_FILE: &str = "search_timing.json";

#[derive(Debug, Default, Serialize, Deserialize)]
struct SearchTiming {
    elapsed_s: f64,
}

#[derive(Debug, Serialize, Deserialize)]
struct StoredSearch {
    schema_version: u32,
    #[serde(flatten)]
    state: SearchState,
}

/// Prepares `cfg` and runs every phase.
pub fn run_all(cfg: RunConfig, ctl: &RunControl) -> Result<Progress<RunReport>, RunError> {
    Run::prepare(cfg)?.run_all(ctl)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::Epochs;
    use crate::pipeline::DataConfig;

    fn smoke(dir: &Path) -> RunConfig {
        let mut cfg = RunConfig::new("mininet", DataConfig::synthetic(300, 4));
        cfg.epochs = Epochs { max_training: 1, max_iter: 1, max_tuning: 1 };
        cfg.search.population = 8;
        cfg.search.elite_archive = 8;
        cfg.search.breeders = 4;
        cfg.search.elites_carried = 1;
        cfg.search.mutants = 3;
        cfg.search.crossovers = 2;
        cfg.calibration = 64;
        cfg.monitor_nevs = 1;
        cfg.out = dir.to_path_buf();
        cfg
    }

    #[test]
    fn smoke_run_writes_all_artifacts() {
        let dir = tempfile::tempdir().unwrap();
        let Progress::Done(report) = run_all(smoke(dir.path()), &RunControl::default()).unwrap() else { panic!("halted") };
        for f in [CONFIG_FILE, HYPERNET_FILE, META_PROGRESS_FILE, SEARCH_STATE_FILE, SEARCH_HISTORY_FILE, MODEL_FILE, REPORT_FILE] {
            assert!(dir.path().join(f).is_file(), "{f} missing");
        }
        let t = ArchTemplate::builtin("mininet").unwrap();
        let r = &report.retrained[0];
        assert_eq!(r.flops, t.flops_of(&report.best.nev).unwrap());
        assert!(r.topk_error <= r.top1_error);
        assert_eq!(report.full_width.len(), 1);
        assert!(report.unique_genes_evaluated <= 8);
        let stored = RunReport::from_json(&std::fs::read_to_string(dir.path().join(REPORT_FILE)).unwrap()).unwrap();
        assert_eq!(stored, report);

        let again = Run::prepare(smoke(dir.path())).unwrap();
        assert_eq!(again.assemble_report().unwrap(), report);
    }

    #[test]
    fn changed_config_is_refused() {
        let dir = tempfile::tempdir().unwrap();
        Run::prepare(smoke(dir.path())).unwrap();
        let mut other = smoke(dir.path());
        other.workers = 3;
        Run::prepare(other.clone()).unwrap();
        other.seed = 99;
        assert!(matches!(Run::prepare(other), Err(RunError::ConfigChanged { .. })));
    }

    #[test]
    fn phases_require_their_inputs() {
        let dir = tempfile::tempdir().unwrap();
        let run = Run::prepare(smoke(dir.path())).unwrap();
        assert!(matches!(run.search(&RunControl::default()), Err(RunError::MissingPhase { phase: Phase::MetaTrain })));
        assert!(matches!(run.retrain(&RunControl::default()), Err(RunError::MissingPhase { phase: Phase::Search })));
    }

    #[test]
    fn interrupted_run_resumes_to_the_same_report() {
        let whole = tempfile::tempdir().unwrap();
        let parts = tempfile::tempdir().unwrap();
        let cfg = |d: &Path| RunConfig { epochs: Epochs { max_training: 2, max_iter: 2, max_tuning: 2 }, ..smoke(d) };
        let Progress::Done(expected) = run_all(cfg(whole.path()), &RunControl::default()).unwrap() else { panic!() };
        for halt in [(Phase::MetaTrain, 1), (Phase::Search, 1), (Phase::Retrain, 1)] {
            let out = run_all(cfg(parts.path()), &RunControl { halt: Some(halt) }).unwrap();
            assert!(matches!(out, Progress::Halted { phase, epochs_done: 1 } if phase == halt.0), "{out:?}");
        }
        let Progress::Done(resumed) = run_all(cfg(parts.path()), &RunControl::default()).unwrap() else { panic!() };
        assert!(resumed.same_outcome(&expected), "{resumed:#?}\n{expected:#?}");
    }

    #[test]
    fn median_of_even_and_odd() {
        assert_eq!(median(vec![3.0, 1.0, 2.0]), Some(2.0));
        assert_eq!(median(vec![4.0, 1.0]), Some(2.5));
        assert_eq!(median(vec![]), None);
    }
}
