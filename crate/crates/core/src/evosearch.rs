//! Evolutionary search over NEVs.
//!
//! Each epoch ranks the current population by reward, merges it into a
//! bounded elite archive and breeds the next population from the best
//! elites: a few are carried over unchanged, the rest are mutants, crossover
//! children and fresh random genes. Every gene ever evaluated lies inside the
//! FLOPs window.
//!
//! All randomness is derived from `(seed, epoch)` for the breeding operators
//! and `(seed, epoch, index)` for fitness calls, so a run is reproducible
//! regardless of worker count and can be resumed from a serialized
//! [`SearchState`].

use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::io::Write;

use log::{debug, warn};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::arch::{ArchError, ArchTemplate, Nev, SlotRange};
use crate::reward::RewardFn;
use crate::{stream_rng, CSV_SCHEMA};

#[derive(Debug, Error)]
pub enum SearchError {
    #[error("no gene with FLOPs in [{min_flops}, {max_flops}] found after {attempts} attempts")]
    WindowInfeasible { min_flops: u64, max_flops: u64, attempts: usize },
    #[error("invalid search config: {0}")]
    Config(String),
    #[error("resumed state was produced with a different search config")]
    ConfigMismatch,
    #[error("every gene failed evaluation; nothing to return")]
    NoViableGene,
    #[error(transparent)]
    Arch(#[from] ArchError),
}

/// Failure of one fitness evaluation. The gene is dropped, the run goes on.
#[derive(Debug, Clone, Error)]
#[error("{0}")]
pub struct FitnessError(pub String);

/// Measures the accuracy of the subnetwork a NEV describes.
///
/// `rng` is private to this call and derived from the run seed, the epoch
/// and the gene's position, so implementations may use it freely.
pub trait Fitness: Sync {
    fn accuracy(&self, nev: &Nev, rng: &mut ChaCha8Rng) -> Result<f64, FitnessError>;
}

impl<F> Fitness for F
where
    F: Fn(&Nev) -> Result<f64, FitnessError> + Sync,
{
    fn accuracy(&self, nev: &Nev, _rng: &mut ChaCha8Rng) -> Result<f64, FitnessError> {
        self(nev)
    }
}

/// A candidate NEV with its cached cost and, once ranked, its score.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Gene {
    pub nev: Nev,
    pub flops: u64,
    pub accuracy: Option<f64>,
    pub reward: Option<f64>,
}

impl Gene {
    pub fn new(template: &ArchTemplate, nev: Nev) -> Result<Self, ArchError> {
        let flops = template.flops_of(&nev)?;
        Ok(Self { nev, flops, accuracy: None, reward: None })
    }
}

/// Descending reward, then lower FLOPs, then lexicographic NEV.
pub fn rank_order(a: &Gene, b: &Gene) -> Ordering {
    let ra = a.reward.unwrap_or(f64::NEG_INFINITY);
    let rb = b.reward.unwrap_or(f64::NEG_INFINITY);
    rb.total_cmp(&ra).then(a.flops.cmp(&b.flops)).then_with(|| a.nev.cmp(&b.nev))
}

fn default_population() -> usize {
    50
}
fn default_archive() -> usize {
    50
}
fn default_breeders() -> usize {
    10
}
fn default_mutation_rate() -> f64 {
    0.10
}
fn default_epochs() -> usize {
    20
}
fn default_patience() -> usize {
    5
}
fn default_carried() -> usize {
    2
}
fn default_mutants() -> usize {
    24
}
fn default_crossovers() -> usize {
    14
}
fn default_retries() -> usize {
    100
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SearchConfig {
    #[serde(default = "default_population")]
    pub population: usize,
    #[serde(default = "default_archive")]
    pub elite_archive: usize,
    #[serde(default = "default_breeders")]
    pub breeders: usize,
    #[serde(default = "default_mutation_rate")]
    pub mutation_rate: f64,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    pub min_flops: u64,
    pub max_flops: u64,
    /// Epochs without best-reward improvement before stopping early.
    #[serde(default = "default_patience")]
    pub patience: usize,
    #[serde(default)]
    pub seed: u64,
    /// Top elites copied unchanged into the next population.
    #[serde(default = "default_carried")]
    pub elites_carried: usize,
    #[serde(default = "default_mutants")]
    pub mutants: usize,
    #[serde(default = "default_crossovers")]
    pub crossovers: usize,
    /// Attempts per operator before falling back to a random gene.
    #[serde(default = "default_retries")]
    pub retries: usize,
    /// Indices that random draws and mutations may produce.
    #[serde(default)]
    pub slot_range: SlotRange,
}

impl SearchConfig {
    pub fn new(min_flops: u64, max_flops: u64, seed: u64) -> Self {
        Self {
            population: default_population(),
            elite_archive: default_archive(),
            breeders: default_breeders(),
            mutation_rate: default_mutation_rate(),
            epochs: default_epochs(),
            min_flops,
            max_flops,
            patience: default_patience(),
            seed,
            elites_carried: default_carried(),
            mutants: default_mutants(),
            crossovers: default_crossovers(),
            retries: default_retries(),
            slot_range: SlotRange::full(),
        }
    }

    /// Random genes per generation after carry-over, mutants and crossovers.
    pub fn random_refill(&self) -> usize {
        self.population - self.elites_carried - self.mutants - self.crossovers
    }

    /// Every problem with the config, or `Ok` if there are none.
    /// `baseline_flops` adds the `max_flops <= b_f` check.
    pub fn validate(&self, baseline_flops: Option<f64>) -> Result<(), Vec<String>> {
        let mut errs = Vec::new();
        if self.population == 0 {
            errs.push("population must be positive".to_string());
        }
        if self.min_flops == 0 || self.min_flops > self.max_flops {
            errs.push(format!(
                "FLOPs window [{}, {}] must satisfy 0 < min_flops <= max_flops",
                self.min_flops, self.max_flops
            ));
        }
        if let Some(b_f) = baseline_flops {
            if self.max_flops as f64 > b_f {
                errs.push(format!("max_flops {} exceeds the baseline FLOPs {b_f}", self.max_flops));
            }
        }
        if self.breeders > self.elite_archive {
            errs.push(format!("breeders {} exceed the elite archive {}", self.breeders, self.elite_archive));
        }
        if !(self.mutation_rate >= 0.0 && self.mutation_rate < 1.0) {
            errs.push(format!("mutation_rate {} must lie in [0, 1)", self.mutation_rate));
        }
        if self.elites_carried + self.mutants + self.crossovers > self.population {
            errs.push(format!(
                "carried {} + mutants {} + crossovers {} exceed the population {}",
                self.elites_carried, self.mutants, self.crossovers, self.population
            ));
        }
        if self.elites_carried > self.elite_archive {
            errs.push(format!("elites_carried {} exceed the elite archive {}", self.elites_carried, self.elite_archive));
        }
        if self.epochs == 0 {
            errs.push("epochs must be positive".to_string());
        }
        if self.retries == 0 {
            errs.push("retries must be positive".to_string());
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(errs)
        }
    }

    fn in_window(&self, flops: u64) -> bool {
        (self.min_flops..=self.max_flops).contains(&flops)
    }
}

/// Generator for the breeding operators of one epoch.
pub fn epoch_rng(seed: u64, epoch: usize) -> ChaCha8Rng {
    stream_rng(seed, epoch as u64)
}

/// Generator handed to the fitness call for one gene.
pub fn gene_rng(seed: u64, epoch: usize, index: usize) -> ChaCha8Rng {
    stream_rng(seed, ((epoch as u64 + 1) << 32) | index as u64)
}

/// Resamples each slot from `range` with probability `rate`. The draw may
/// return the current value.
pub fn mutate_nev<R: Rng + ?Sized>(nev: &Nev, rate: f64, range: SlotRange, rng: &mut R) -> Nev {
    let slots = nev
        .slots()
        .iter()
        .map(|&s| if rng.gen_bool(rate) { range.sample(rng) } else { s })
        .collect();
    Nev::new(slots).expect("sampled indices lie on the grid")
}

/// Takes each slot from either parent with equal probability.
pub fn crossover_nev<R: Rng + ?Sized>(a: &Nev, b: &Nev, rng: &mut R) -> Nev {
    assert_eq!(a.len(), b.len(), "crossover parents differ in length");
    let slots = a
        .slots()
        .iter()
        .zip(b.slots())
        .map(|(&x, &y)| if rng.gen_bool(0.5) { x } else { y })
        .collect();
    Nev::new(slots).expect("parent indices lie on the grid")
}

/// A random gene inside the window: rejection sampling first, then a greedy
/// walk from a random start that nudges one slot at a time towards the
/// window.
pub fn random_gene<R: Rng + ?Sized>(template: &ArchTemplate, config: &SearchConfig, rng: &mut R) -> Result<Gene, SearchError> {
    for _ in 0..config.retries {
        let gene = Gene::new(template, template.random_nev(rng, config.slot_range))?;
        if config.in_window(gene.flops) {
            return Ok(gene);
        }
    }
    repair(template, config, template.random_nev(rng, config.slot_range), rng)
}

fn repair<R: Rng + ?Sized>(template: &ArchTemplate, config: &SearchConfig, nev: Nev, rng: &mut R) -> Result<Gene, SearchError> {
    let (lo, hi) = (config.slot_range.lo(), config.slot_range.hi());
    let mut slots = nev.slots().to_vec();
    let steps = slots.len() * config.slot_range.len() * 4;
    let infeasible = || SearchError::WindowInfeasible {
        min_flops: config.min_flops,
        max_flops: config.max_flops,
        attempts: config.retries + steps,
    };
    for _ in 0..steps {
        let gene = Gene::new(template, Nev::new(slots.clone())?)?;
        if config.in_window(gene.flops) {
            return Ok(gene);
        }
        let too_big = gene.flops > config.max_flops;
        let movable: Vec<usize> = (0..slots.len())
            .filter(|&i| if too_big { slots[i] > lo } else { slots[i] < hi })
            .collect();
        let Some(&i) = movable.choose(rng) else { return Err(infeasible()) };
        if too_big {
            slots[i] -= 1;
        } else {
            slots[i] += 1;
        }
    }
    Err(infeasible())
}

/// Exactly `config.population` random genes inside the window.
pub fn seed_population<R: Rng + ?Sized>(template: &ArchTemplate, config: &SearchConfig, rng: &mut R) -> Result<Vec<Gene>, SearchError> {
    (0..config.population).map(|_| random_gene(template, config, rng)).collect()
}

fn retry_in_window<R: Rng + ?Sized>(
    template: &ArchTemplate,
    config: &SearchConfig,
    rng: &mut R,
    mut draw: impl FnMut(&mut R) -> Nev,
) -> Result<Gene, SearchError> {
    for _ in 0..config.retries {
        let gene = Gene::new(template, draw(rng))?;
        if config.in_window(gene.flops) {
            return Ok(gene);
        }
    }
    debug!("operator retries exhausted; falling back to a random gene");
    random_gene(template, config, rng)
}

pub fn mutate<R: Rng + ?Sized>(gene: &Gene, config: &SearchConfig, rng: &mut R, template: &ArchTemplate) -> Result<Gene, SearchError> {
    retry_in_window(template, config, rng, |r| mutate_nev(&gene.nev, config.mutation_rate, config.slot_range, r))
}

pub fn crossover<R: Rng + ?Sized>(
    a: &Gene,
    b: &Gene,
    config: &SearchConfig,
    rng: &mut R,
    template: &ArchTemplate,
) -> Result<Gene, SearchError> {
    retry_in_window(template, config, rng, |r| crossover_nev(&a.nev, &b.nev, r))
}

/// How a generation was assembled.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct GenerationMix {
    pub carried: usize,
    pub mutated: usize,
    pub crossed: usize,
    pub random: usize,
}

impl GenerationMix {
    pub fn total(&self) -> usize {
        self.carried + self.mutated + self.crossed + self.random
    }
}

/// Breeds the next population from the elite archive. Operators that need
/// breeders are skipped (and their share refilled with random genes) when
/// the archive is empty.
pub fn next_generation<R: Rng + ?Sized>(
    elites: &[Gene],
    config: &SearchConfig,
    template: &ArchTemplate,
    rng: &mut R,
) -> Result<(Vec<Gene>, GenerationMix), SearchError> {
    let mut out = Vec::with_capacity(config.population);
    let mut mix = GenerationMix::default();
    let fresh = |g: &Gene| Gene { accuracy: None, reward: None, ..g.clone() };

    for g in elites.iter().take(config.elites_carried) {
        out.push(g.clone());
        mix.carried += 1;
    }
    let breeders = &elites[..config.breeders.min(elites.len())];
    if !breeders.is_empty() {
        for i in 0..config.mutants {
            out.push(mutate(&breeders[i % breeders.len()], config, rng, template)?);
            mix.mutated += 1;
        }
        for _ in 0..config.crossovers {
            let a = rng.gen_range(0..breeders.len());
            let mut b = rng.gen_range(0..breeders.len());
            if breeders.len() > 1 {
                while b == a {
                    b = rng.gen_range(0..breeders.len());
                }
            }
            out.push(crossover(&breeders[a], &breeders[b], config, rng, template)?);
            mix.crossed += 1;
        }
    }
    while out.len() < config.population {
        out.push(random_gene(template, config, rng)?);
        mix.random += 1;
    }
    for g in out.iter_mut().skip(mix.carried) {
        *g = fresh(g);
    }
    Ok((out, mix))
}

/// Per-epoch summary. `best_*` describe the all-time best elite.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub best_reward: f64,
    pub mean_reward: f64,
    pub best_accuracy: f64,
    pub best_flops: u64,
    pub unique_genes_evaluated: usize,
}

pub fn write_history_csv<W: Write>(history: &[EpochRecord], out: W) -> csv::Result<()> {
    let mut out = out;
    writeln!(out, "{CSV_SCHEMA}")?;
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["epoch", "best_reward", "mean_reward", "best_accuracy", "best_flops", "unique_genes_evaluated"])?;
    for r in history {
        w.write_record(&[
            r.epoch.to_string(),
            r.best_reward.to_string(),
            r.mean_reward.to_string(),
            r.best_accuracy.to_string(),
            r.best_flops.to_string(),
            r.unique_genes_evaluated.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

mod cache_serde {
    use super::*;
    use serde::{Deserializer, Serializer};

    pub fn serialize<S: Serializer>(map: &BTreeMap<Nev, Option<f64>>, s: S) -> Result<S::Ok, S::Error> {
        s.collect_seq(map.iter())
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<BTreeMap<Nev, Option<f64>>, D::Error> {
        let pairs: Vec<(Nev, Option<f64>)> = Vec::deserialize(d)?;
        Ok(pairs.into_iter().collect())
    }
}

/// Everything needed to continue a search exactly where it stopped.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchState {
    pub config: SearchConfig,
    /// Completed epochs.
    pub epoch: usize,
    /// Population awaiting evaluation in the next epoch.
    pub candidates: Vec<Gene>,
    /// Elite archive, best first.
    pub elites: Vec<Gene>,
    pub history: Vec<EpochRecord>,
    pub stale_epochs: usize,
    pub finished: bool,
    pub last_mix: Option<GenerationMix>,
    /// Accuracy of every NEV evaluated so far; `None` marks a failed call.
    #[serde(with = "cache_serde")]
    pub cache: BTreeMap<Nev, Option<f64>>,
}

impl SearchState {
    pub fn best(&self) -> Option<&Gene> {
        self.elites.first()
    }
}

/// Scores `candidates`, drops failures and sorts the survivors best first.
/// Each distinct NEV is evaluated at most once; results already in `cache`
/// are reused.
#[allow(clippy::too_many_arguments)]
fn score(
    candidates: &[Gene],
    fitness: &dyn Fitness,
    reward: &dyn RewardFn,
    cache: &mut BTreeMap<Nev, Option<f64>>,
    seed: u64,
    epoch: usize,
    pool: Option<&rayon::ThreadPool>,
) -> Vec<Gene> {
    let mut pending: Vec<(usize, &Nev)> = Vec::new();
    let mut seen = std::collections::BTreeSet::new();
    for (i, g) in candidates.iter().enumerate() {
        if !cache.contains_key(&g.nev) && seen.insert(&g.nev) {
            pending.push((i, &g.nev));
        }
    }
    let eval = |&(i, nev): &(usize, &Nev)| {
        let mut rng = gene_rng(seed, epoch, i);
        match fitness.accuracy(nev, &mut rng) {
            Ok(a) if a.is_finite() => Some(a),
            Ok(a) => {
                warn!("gene {nev}: fitness returned non-finite accuracy {a}; discarded");
                None
            }
            Err(e) => {
                warn!("gene {nev}: fitness failed: {e}; discarded");
                None
            }
        }
    };
    let results: Vec<Option<f64>> = match pool {
        Some(pool) => pool.install(|| pending.par_iter().map(eval).collect()),
        None => pending.iter().map(eval).collect(),
    };
    for ((_, nev), acc) in pending.iter().zip(results) {
        cache.insert((*nev).clone(), acc);
    }

    let mut seen = std::collections::BTreeSet::new();
    let mut ranked = Vec::new();
    for g in candidates {
        if !seen.insert(&g.nev) {
            continue;
        }
        let Some(acc) = cache[&g.nev] else { continue };
        match reward.evaluate(acc, g.flops as f64) {
            Ok(v) => ranked.push(Gene { accuracy: Some(acc), reward: Some(v.reward), ..g.clone() }),
            Err(e) => warn!("gene {}: {e}; discarded", g.nev),
        }
    }
    ranked.sort_by(rank_order);
    ranked
}

/// Ranks genes with a fresh cache on the calling thread.
pub fn rank(candidates: &[Gene], fitness: &dyn Fitness, reward: &dyn RewardFn) -> Vec<Gene> {
    score(candidates, fitness, reward, &mut BTreeMap::new(), 0, 0, None)
}

/// A search in progress.
pub struct Search<'a> {
    template: &'a ArchTemplate,
    fitness: &'a dyn Fitness,
    reward: &'a dyn RewardFn,
    pool: Option<rayon::ThreadPool>,
    state: SearchState,
}

impl<'a> Search<'a> {
    pub fn new(
        template: &'a ArchTemplate,
        config: SearchConfig,
        fitness: &'a dyn Fitness,
        reward: &'a dyn RewardFn,
    ) -> Result<Self, SearchError> {
        config.validate(None).map_err(|e| SearchError::Config(e.join("; ")))?;
        let candidates = seed_population(template, &config, &mut epoch_rng(config.seed, 0))?;
        let state = SearchState {
            config,
            epoch: 0,
            candidates,
            elites: Vec::new(),
            history: Vec::new(),
            stale_epochs: 0,
            finished: false,
            last_mix: None,
            cache: BTreeMap::new(),
        };
        Ok(Self { template, fitness, reward, pool: None, state })
    }

    /// Continues from a saved state. The config must match the saved one.
    pub fn resume(
        template: &'a ArchTemplate,
        config: &SearchConfig,
        state: SearchState,
        fitness: &'a dyn Fitness,
        reward: &'a dyn RewardFn,
    ) -> Result<Self, SearchError> {
        if &state.config != config {
            return Err(SearchError::ConfigMismatch);
        }
        for g in state.candidates.iter().chain(&state.elites) {
            template.check_nev(&g.nev)?;
        }
        Ok(Self { template, fitness, reward, pool: None, state })
    }

    /// Evaluates fitness on `workers` threads (1 keeps everything on the
    /// calling thread). Results do not depend on the worker count.
    pub fn with_workers(mut self, workers: usize) -> Self {
        self.pool = (workers > 1).then(|| {
            rayon::ThreadPoolBuilder::new().num_threads(workers).build().expect("thread pool")
        });
        self
    }

    pub fn state(&self) -> &SearchState {
        &self.state
    }

    pub fn into_state(self) -> SearchState {
        self.state
    }

    pub fn is_finished(&self) -> bool {
        self.state.finished
    }

    /// Runs one epoch: rank, update the archive, record history and breed.
    pub fn step(&mut self) -> Result<&EpochRecord, SearchError> {
        let st = &mut self.state;
        let cfg = st.config.clone();
        let ranked = score(&st.candidates, self.fitness, self.reward, &mut st.cache, cfg.seed, st.epoch, self.pool.as_ref());
        let previous_best = st.elites.first().and_then(|g| g.reward);

        let mut merged = std::mem::take(&mut st.elites);
        merged.extend(ranked.iter().cloned());
        merged.sort_by(rank_order);
        merged.dedup_by(|a, b| a.nev == b.nev);
        merged.truncate(cfg.elite_archive);
        st.elites = merged;

        let best = st.elites.first().ok_or(SearchError::NoViableGene)?;
        let improved = previous_best.map_or(true, |p| best.reward.unwrap_or(f64::NEG_INFINITY) > p);
        st.stale_epochs = if improved { 0 } else { st.stale_epochs + 1 };
        let mean_reward = if ranked.is_empty() {
            f64::NAN
        } else {
            ranked.iter().filter_map(|g| g.reward).sum::<f64>() / ranked.len() as f64
        };
        st.history.push(EpochRecord {
            epoch: st.epoch,
            best_reward: best.reward.expect("ranked"),
            mean_reward,
            best_accuracy: best.accuracy.expect("ranked"),
            best_flops: best.flops,
            unique_genes_evaluated: st.cache.len(),
        });
        st.epoch += 1;

        if st.epoch >= cfg.epochs || st.stale_epochs >= cfg.patience {
            st.finished = true;
            st.candidates.clear();
        } else {
            let (next, mix) = next_generation(&st.elites, &cfg, self.template, &mut epoch_rng(cfg.seed, st.epoch))?;
            st.candidates = next;
            st.last_mix = Some(mix);
        }
        Ok(st.history.last().expect("just pushed"))
    }

    /// Steps until finished. `on_epoch` sees the state after every epoch and
    /// may stop the run early by returning `false`.
    pub fn run(&mut self, mut on_epoch: impl FnMut(&SearchState) -> bool) -> Result<(), SearchError> {
        while !self.state.finished {
            self.step()?;
            if !on_epoch(&self.state) {
                break;
            }
        }
        Ok(())
    }

    pub fn best(&self) -> Option<&Gene> {
        self.state.best()
    }
}

/// Runs a full search and returns the all-time best gene with the history.
pub fn run_search(
    template: &ArchTemplate,
    config: &SearchConfig,
    fitness: &dyn Fitness,
    reward: &dyn RewardFn,
) -> Result<(Gene, Vec<EpochRecord>), SearchError> {
    let mut search = Search::new(template, config.clone(), fitness, reward)?;
    search.run(|_| true)?;
    let state = search.into_state();
    let best = state.elites.first().cloned().ok_or(SearchError::NoViableGene)?;
    Ok((best, state.history))
}

/// Fixed-width histogram of FLOPs values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub bin_low: Vec<f64>,
    pub bin_high: Vec<f64>,
    pub counts: Vec<u64>,
    pub mean: f64,
}

impl Histogram {
    /// Buckets `values` into `bins` equal bins spanning their range. A
    /// degenerate range collapses to a single bin.
    pub fn from_values(values: &[u64], bins: usize) -> Self {
        assert!(!values.is_empty() && bins > 0);
        let lo = *values.iter().min().expect("non-empty") as f64;
        let hi = *values.iter().max().expect("non-empty") as f64;
        let mean = values.iter().map(|&v| v as f64).sum::<f64>() / values.len() as f64;
        if lo == hi {
            return Self { bin_low: vec![lo], bin_high: vec![hi], counts: vec![values.len() as u64], mean };
        }
        let width = (hi - lo) / bins as f64;
        let mut counts = vec![0u64; bins];
        for &v in values {
            let b = (((v as f64 - lo) / width) as usize).min(bins - 1);
            counts[b] += 1;
        }
        let bin_low = (0..bins).map(|i| lo + width * i as f64).collect();
        let bin_high = (0..bins).map(|i| if i + 1 == bins { hi } else { lo + width * (i + 1) as f64 }).collect();
        Self { bin_low, bin_high, counts, mean }
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// True unless some bin sits significantly below a bin on each side:
    /// `c[j] - c[i]` and `c[k] - c[i]` both above three Poisson standard
    /// deviations of the difference, for some `j < i < k`.
    pub fn is_unimodal(&self) -> bool {
        let c = &self.counts;
        let sig = |a: u64, b: u64| a > b && (a - b) as f64 > 3.0 * ((a + b) as f64).sqrt();
        (1..c.len()).all(|i| {
            let left = c[..i].iter().any(|&l| sig(l, c[i]));
            let right = c[i + 1..].iter().any(|&r| sig(r, c[i]));
            !(left && right)
        })
    }

    pub fn write_csv<W: Write>(&self, out: W) -> csv::Result<()> {
        let mut out = out;
        writeln!(out, "{CSV_SCHEMA}")?;
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["bin_low", "bin_high", "count"])?;
        for ((lo, hi), n) in self.bin_low.iter().zip(&self.bin_high).zip(&self.counts) {
            w.write_record(&[lo.to_string(), hi.to_string(), n.to_string()])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// FLOPs of `n` random NEVs drawn from `range`.
pub fn flops_samples<R: Rng + ?Sized>(template: &ArchTemplate, n: usize, range: SlotRange, rng: &mut R) -> Vec<u64> {
    (0..n)
        .map(|_| template.flops_of(&template.random_nev(rng, range)).expect("template NEV"))
        .collect()
}

pub fn flops_distribution(template: &ArchTemplate, n: usize, range: SlotRange, bins: usize, seed: u64) -> Histogram {
    assert!(n > 0, "need at least one sample");
    let values = flops_samples(template, n, range, &mut ChaCha8Rng::seed_from_u64(seed));
    Histogram::from_values(&values, bins)
}
