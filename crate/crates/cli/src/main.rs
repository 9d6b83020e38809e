use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context, Result};
use clap::{Args, Parser, Subcommand};
use metaprune::arch::{ArchTemplate, Nev, SlotRange};
use metaprune::config::{ConfigError, RunConfig};
use metaprune::evosearch::{flops_distribution, Histogram};
use metaprune::pipeline::{DataConfig, DataFormat, Progress, Run, RunControl, RunError, RunReport, CONFIG_FILE};
use metaprune::reward::{linspace, reward_surface, RewardParams};

/// Reward-driven channel pruning: meta-train a weight-generating
/// hypernetwork, search channel widths, retrain the winner.
#[derive(Parser)]
#[command(name = "metaprune", version)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Run configuration (JSON). Defaults to <out>/config.json when present.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Concurrent fitness evaluations during search.
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// Output directory.
    #[arg(long, global = true, env = "METAPRUNE_OUT")]
    out: Option<PathBuf>,
    /// Built-in template name or template JSON path.
    #[arg(long, global = true)]
    template: Option<String>,
    /// Dataset directory (IDX format).
    #[arg(long, global = true)]
    dataset: Option<PathBuf>,
    #[arg(long, global = true, value_parser = ["idx", "synthetic"])]
    format: Option<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Train the hypernetwork.
    MetaTrain {
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Evolutionary search scored by the trained hypernetwork.
    Search {
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Retrain the search winner from scratch and write the report.
    Retrain {
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// All three phases, resuming whatever is already done.
    RunAll {
        #[arg(long)]
        meta_epochs: Option<usize>,
        #[arg(long)]
        search_epochs: Option<usize>,
        #[arg(long)]
        retrain_epochs: Option<usize>,
    },
    /// Analytic FLOPs and parameter count of a template at one NEV.
    Flops {
        /// Comma-separated slot indices; full width when omitted.
        #[arg(long)]
        nev: Option<String>,
    },
    /// Reward over an accuracy x FLOPs grid, written as CSV.
    RewardSurface {
        #[arg(long)]
        b_a: f64,
        /// Baseline FLOPs; the template's full width when omitted.
        #[arg(long)]
        b_f: Option<f64>,
        #[arg(long, default_value_t = 0.5)]
        acc_min: f64,
        #[arg(long)]
        acc_max: Option<f64>,
        #[arg(long, default_value_t = 20)]
        acc_steps: usize,
        #[arg(long)]
        flops_min: Option<f64>,
        #[arg(long)]
        flops_max: Option<f64>,
        #[arg(long, default_value_t = 20)]
        flops_steps: usize,
    },
    /// FLOPs histogram of random NEVs, written as CSV.
    Distribution {
        #[arg(long, default_value_t = 1000)]
        samples: usize,
        #[arg(long, default_value_t = 20)]
        bins: usize,
        /// Inclusive slot-index range `lo:hi`.
        #[arg(long, default_value = "0:30")]
        range: String,
    },
    /// Print the run report rebuilt from the output directory.
    Report {
        /// Human-readable summary instead of JSON.
        #[arg(long)]
        summary: bool,
    },
}

impl Common {
    fn out_dir(&self) -> Option<PathBuf> {
        self.out.clone()
    }

    /// Config file, then flags on top.
    fn run_config(&self) -> Result<RunConfig> {
        let stored = self.out_dir().map(|o| o.join(CONFIG_FILE)).filter(|p| p.is_file());
        let mut cfg = match self.config.as_ref().or(stored.as_ref()) {
            Some(path) => RunConfig::load(path)?,
            None => {
                let template = self.template.clone().ok_or_else(|| anyhow!("need --config or --template"))?;
                RunConfig::new(&template, DataConfig::synthetic(10_000, 0))
            }
        };
        if let Some(t) = &self.template {
            cfg.template = t.clone();
        }
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(w) = self.workers {
            cfg.workers = w;
        }
        if let Some(o) = self.out_dir() {
            cfg.out = o;
        }
        if let Some(d) = &self.dataset {
            cfg.dataset.path = Some(d.clone());
            cfg.dataset.format = DataFormat::Idx;
        }
        if let Some(f) = &self.format {
            cfg.dataset.format = f.parse().map_err(|e: String| anyhow!(e))?;
        }
        Ok(cfg)
    }

    /// Template for the analysis subcommands, which need no dataset.
    fn template(&self) -> Result<ArchTemplate> {
        let name = match &self.template {
            Some(t) => t.clone(),
            None => self.run_config().context("no --template given")?.template,
        };
        Ok(ArchTemplate::load(&name)?)
    }

    fn analysis_out(&self) -> Result<PathBuf> {
        let out = match self.out_dir() {
            Some(o) => o,
            None => self.run_config().map(|c| c.out).context("no --out given")?,
        };
        std::fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
        Ok(out)
    }
}

fn finish(progress: Progress<RunReport>) -> Result<()> {
    match progress {
        Progress::Done(report) => {
            println!("{}", report.summary().trim_end());
            Ok(())
        }
        Progress::Halted { phase, epochs_done } => {
            println!("{phase} stopped after {epochs_done} epochs");
            Ok(())
        }
    }
}

fn write_csv_file(path: &Path, write: impl FnOnce(&mut Vec<u8>) -> Result<()>) -> Result<()> {
    let mut buf = Vec::new();
    write(&mut buf)?;
    std::fs::write(path, buf).with_context(|| format!("writing {}", path.display()))?;
    println!("wrote {}", path.display());
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let ctl = RunControl::default();
    let common = &cli.common;
    match cli.command {
        Command::MetaTrain { epochs } => {
            let mut cfg = common.run_config()?;
            if let Some(e) = epochs {
                cfg.epochs.max_training = e;
            }
            match Run::prepare(cfg)?.meta_train(&ctl)? {
                Progress::Done(_) => println!("meta-train finished"),
                Progress::Halted { epochs_done, .. } => println!("meta-train stopped after {epochs_done} epochs"),
            }
        }
        Command::Search { epochs } => {
            let mut cfg = common.run_config()?;
            if let Some(e) = epochs {
                cfg.epochs.max_iter = e;
            }
            match Run::prepare(cfg)?.search(&ctl)? {
                Progress::Done(state) => {
                    let best = state.best().ok_or_else(|| anyhow!("search produced no gene"))?;
                    println!(
                        "best NEV {} flops {} accuracy {:.4} reward {:.4} ({} unique genes)",
                        best.nev,
                        best.flops,
                        best.accuracy.unwrap_or(f64::NAN),
                        best.reward.unwrap_or(f64::NAN),
                        state.cache.len()
                    );
                }
                Progress::Halted { epochs_done, .. } => println!("search stopped after {epochs_done} epochs"),
            }
        }
        Command::Retrain { epochs } => {
            let mut cfg = common.run_config()?;
            if let Some(e) = epochs {
                cfg.epochs.max_tuning = e;
            }
            finish(Run::prepare(cfg)?.retrain(&ctl)?)?;
        }
        Command::RunAll { meta_epochs, search_epochs, retrain_epochs } => {
            let mut cfg = common.run_config()?;
            if let Some(e) = meta_epochs {
                cfg.epochs.max_training = e;
            }
            if let Some(e) = search_epochs {
                cfg.epochs.max_iter = e;
            }
            if let Some(e) = retrain_epochs {
                cfg.epochs.max_tuning = e;
            }
            finish(Run::prepare(cfg)?.run_all(&ctl)?)?;
        }
        Command::Flops { nev } => {
            let t = common.template()?;
            let nev = match nev {
                Some(text) => Nev::parse(&text)?,
                None => t.full_width_nev(),
            };
            let flops = t.flops_of(&nev)?;
            let params = t.params_of(&nev)?;
            println!("template {}", t.name());
            println!("nev {nev}");
            println!("flops {flops} ({:.1}M, {:.1}% of full width)", flops as f64 / 1e6, 100.0 * flops as f64 / t.full_width_flops() as f64);
            println!("params {params} ({:.2}M, {:.1}% of full width)", params as f64 / 1e6, 100.0 * params as f64 / t.full_width_params() as f64);
        }
        Command::RewardSurface { b_a, b_f, acc_min, acc_max, acc_steps, flops_min, flops_max, flops_steps } => {
            let b_f = match b_f {
                Some(f) => f,
                None => common.template()?.full_width_flops() as f64,
            };
            let params = RewardParams::new(b_a, b_f)?;
            let accs = linspace(acc_min, acc_max.unwrap_or(b_a * 0.99), acc_steps);
            let flops = linspace(flops_min.unwrap_or(0.1 * b_f), flops_max.unwrap_or(0.99 * b_f), flops_steps);
            let surface = reward_surface(&params, &accs, &flops);
            let out = common.analysis_out()?;
            write_csv_file(&out.join("reward_surface.csv"), |buf| Ok(surface.write_csv(buf)?))?;
        }
        Command::Distribution { samples, bins, range } => {
            let t = common.template()?;
            let range = SlotRange::parse(&range)?;
            let seed = common.seed.unwrap_or(0);
            let hist: Histogram = flops_distribution(&t, samples, range, bins, seed);
            println!(
                "template {} range {}:{} mean flops {:.1}M, unimodal: {}",
                t.name(),
                range.lo(),
                range.hi(),
                hist.mean / 1e6,
                hist.is_unimodal()
            );
            let out = common.analysis_out()?;
            write_csv_file(&out.join(format!("distribution_{}_{}-{}.csv", t.name(), range.lo(), range.hi())), |buf| Ok(hist.write_csv(buf)?))?;
        }
        Command::Report { summary } => {
            let cfg = common.run_config()?;
            let report = Run::prepare(cfg)?.assemble_report()?;
            if summary {
                print!("{}", report.summary());
            } else {
                println!("{}", report.to_json());
            }
        }
    }
    Ok(())
}

/// One JSON object on stderr: the error kind, its message and, for config
/// errors, every violation.
fn report_error(err: &anyhow::Error) -> u8 {
    let (kind, details, code) = match err.downcast_ref::<ConfigError>().or_else(|| match err.downcast_ref::<RunError>() {
        Some(RunError::Config(c)) => Some(c),
        _ => None,
    }) {
        Some(ConfigError::Invalid(list)) => ("config", list.clone(), 2),
        Some(_) => ("config", Vec::new(), 2),
        None if err.downcast_ref::<RunError>().is_some() => ("run", Vec::new(), 1),
        None => ("error", Vec::new(), 1),
    };
    let body = serde_json::json!({ "error": kind, "message": format!("{err:#}"), "details": details });
    eprintln!("{body}");
    code
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).format_timestamp_secs().init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => ExitCode::from(report_error(&e)),
    }
}
