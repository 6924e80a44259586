//! `cellsearch`: search, train, evaluate and ablate from the command line.
//!
//! Exit codes: 0 success, 2 usage, 3 data, 4 numerical failure, 1 other.

mod config;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand};
use cellsearch::data::{split_for_search, CsvSchema, SynthConfig};
use cellsearch::genotype::Genotype;
use cellsearch::pipeline::{
    ablate, eval_stage, load_weights, prepare, search_stage, train_stage, DataSource, Real, RunConfig, RunManifest,
};
use cellsearch::search::{resume_search, Tier};
use cellsearch::Error;

#[derive(Parser, Debug)]
#[command(name = "cellsearch", version, about = "Per-cell differentiable architecture search for multi-channel time series")]
struct Cli {
    /// TOML file with run settings; flags take precedence over it.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,

    /// Start from the minutes-scale CPU settings instead of the full protocol.
    #[arg(long, global = true)]
    desk: bool,

    /// More log output (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct DataArgs {
    /// CSV file with subject, session and channel columns.
    #[arg(long, value_name = "CSV", conflicts_with = "synthetic")]
    data: Option<PathBuf>,

    /// Use the seeded synthetic cohort.
    #[arg(long)]
    synthetic: bool,

    /// Sampling rate of the CSV input in Hz (sets the gap threshold).
    #[arg(long, requires = "data")]
    sampling_rate: Option<f64>,

    /// Number of synthetic subjects.
    #[arg(long, requires = "synthetic")]
    subjects: Option<usize>,

    #[arg(long)]
    seed: Option<u64>,

    /// Output directory; must not already hold a run.
    #[arg(long, value_name = "DIR")]
    out: PathBuf,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Search an architecture on session-1 data and write genotype.json.
    Search {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        tier: Option<Tier>,
        /// Unrolling step of the architecture gradient; 0 is first order.
        #[arg(long)]
        xi: Option<f64>,
        /// Sum of the two input gate coefficients (2, or 1 for a plain softmax).
        #[arg(long)]
        gate_scale: Option<f64>,
        /// Gate coefficients below this prune their input.
        #[arg(long)]
        threshold: Option<f64>,
        /// Continue a run from a checkpoint written by an earlier search.
        #[arg(long, value_name = "CHECKPOINT")]
        resume: Option<PathBuf>,
    },
    /// Train the discrete network of a genotype from scratch.
    Train {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long, value_name = "FILE")]
        genotype: PathBuf,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        drop_path: Option<f64>,
    },
    /// Verification metrics of trained weights on session-2 data.
    Eval {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long, value_name = "FILE")]
        weights: PathBuf,
    },
    /// Search, train and evaluate every tier on the same data.
    Ablate {
        #[command(flatten)]
        data: DataArgs,
        /// Seeds to run, comma separated.
        #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
        seeds: Vec<u64>,
        #[arg(long)]
        search_epochs: Option<usize>,
        #[arg(long)]
        train_epochs: Option<usize>,
    },
}

/// A failure with the exit code it maps to.
struct Failure {
    code: u8,
    error: anyhow::Error,
}

impl From<anyhow::Error> for Failure {
    fn from(error: anyhow::Error) -> Self {
        let code = match error.chain().find_map(|e| e.downcast_ref::<Error>()) {
            Some(e) if e.is_numerical() => 4,
            Some(e) if e.is_data() => 3,
            Some(Error::Metrics(_)) => 3,
            Some(Error::InvalidArgument(_) | Error::TemporalUnderflow { .. }) => 2,
            _ => 1,
        };
        Failure { code, error }
    }
}

fn usage(msg: String) -> Failure {
    Failure {
        code: 2,
        error: anyhow!(msg),
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        anyhow::Error::new(e).into()
    }
}

fn resolve(cli: &Cli, data: &DataArgs, apply: impl FnOnce(&mut RunConfig)) -> Result<RunConfig, Failure> {
    let base = if cli.desk { RunConfig::desk() } else { RunConfig::default() };
    let mut cfg = match &cli.config {
        Some(path) => config::apply_file(&base, path).map_err(|e| usage(format!("{e:#}")))?,
        None => base,
    };
    if let Some(path) = &data.data {
        let mut schema = match &cfg.data.source {
            DataSource::Csv { schema, .. } => schema.clone(),
            DataSource::Synthetic(_) => CsvSchema::default(),
        };
        if let Some(rate) = data.sampling_rate {
            schema.sampling_rate = rate;
        }
        cfg.data.source = DataSource::Csv { path: path.clone(), schema };
    } else if data.synthetic {
        let mut synth = match &cfg.data.source {
            DataSource::Synthetic(s) => s.clone(),
            DataSource::Csv { .. } => SynthConfig::default(),
        };
        if let Some(n) = data.subjects {
            synth.num_subjects = n;
        }
        cfg.data.source = DataSource::Synthetic(synth);
    } else if !cli.config.as_deref().is_some_and(config::file_sets_source) {
        return Err(usage("no input: pass --data <CSV> or --synthetic (or set [data.source] in --config)".into()));
    }
    if let Some(seed) = data.seed {
        cfg = cfg.with_seed(seed);
    }
    apply(&mut cfg);
    Ok(cfg)
}

fn start_run(cli: &Cli, command: &str, cfg: &RunConfig, data: &DataArgs, inputs: &[(&str, &Path)], outputs: &[&str]) -> Result<(), Failure> {
    let mut manifest = RunManifest::new(command, cfg, outputs);
    if let DataSource::Csv { path, .. } = &cfg.data.source {
        manifest.hash_file("data", path).with_context(|| format!("reading --data {}", path.display()))?;
    }
    if let Some(path) = &cli.config {
        manifest.hash_file("config", path).with_context(|| format!("reading --config {}", path.display()))?;
    }
    for (label, path) in inputs {
        manifest.hash_file(label, path).with_context(|| format!("reading --{label} {}", path.display()))?;
    }
    manifest.write(&data.out)?;
    Ok(())
}

fn run(cli: &Cli) -> Result<(), Failure> {
    match &cli.command {
        Command::Search {
            data,
            epochs,
            tier,
            xi,
            gate_scale,
            threshold,
            resume,
        } => {
            let cfg = resolve(cli, data, |c| {
                if let Some(v) = epochs {
                    c.search.epochs = *v;
                }
                if let Some(v) = tier {
                    c.search.tier = *v;
                }
                if let Some(v) = xi {
                    c.search.optimizer.xi = *v;
                }
                if let Some(v) = gate_scale {
                    c.search.supernet.gate_scale = *v;
                }
                if let Some(v) = threshold {
                    c.search.supernet.gate_threshold = *v;
                }
            })?;
            cfg.search.validate()?;
            let inputs: Vec<(&str, &Path)> = resume.iter().map(|p| ("resume", p.as_path())).collect();
            start_run(cli, "search", &cfg, data, &inputs, &["config.json", "log.csv", "genotype.json", "genotype.dot", "checkpoints/"])?;
            let prepared = prepare(&cfg.data)?;
            let genotype = match resume {
                Some(ck) => {
                    let (train, val) = split_for_search(&prepared.session1, cfg.search.split_ratio, cfg.search.seed)?;
                    resume_search::<Real>(ck, &train, &val, Some(&data.out))?
                }
                None => search_stage(&cfg, &prepared, Some(&data.out))?,
            };
            let pruned: usize = genotype.cells.iter().map(|c| c.gates.pruned.iter().filter(|&&p| p).count()).sum();
            println!(
                "genotype: {} cells, {pruned} pruned inputs -> {}",
                genotype.cells.len(),
                data.out.join("genotype.json").display()
            );
        }
        Command::Train {
            data,
            genotype,
            epochs,
            drop_path,
        } => {
            let cfg = resolve(cli, data, |c| {
                if let Some(v) = epochs {
                    c.train.epochs = *v;
                }
                if let Some(v) = drop_path {
                    c.train.drop_path = *v;
                }
            })?;
            cfg.train.validate()?;
            start_run(cli, "train", &cfg, data, &[("genotype", genotype)], &["weights.json", "log.csv"])?;
            let g = Genotype::load(genotype)?;
            let prepared = prepare(&cfg.data)?;
            let (_, report) = train_stage(&cfg, &g, &prepared, Some(&data.out))?;
            println!(
                "trained {} epochs, best training accuracy {:.4} -> {}",
                report.log.len(),
                report.best_accuracy.max(0.0),
                data.out.join("weights.json").display()
            );
        }
        Command::Eval { data, weights } => {
            let cfg = resolve(cli, data, |_| {})?;
            start_run(cli, "eval", &cfg, data, &[("weights", weights)], &["metrics.json", "det.csv"])?;
            let net = load_weights(weights)?;
            let prepared = prepare(&cfg.data)?;
            let m = eval_stage(&net, &cfg.eval, &prepared, Some(&data.out))?;
            println!("EER {:.4}", m.eer);
            for (far, frr) in &m.frr_at_far {
                let flag = if m.under_resolved.contains(far) { " (under-resolved)" } else { "" };
                println!("FRR@FAR={far} {frr:.4}{flag}");
            }
        }
        Command::Ablate {
            data,
            seeds,
            search_epochs,
            train_epochs,
        } => {
            let cfg = resolve(cli, data, |c| {
                if let Some(v) = search_epochs {
                    c.search.epochs = *v;
                }
                if let Some(v) = train_epochs {
                    c.train.epochs = *v;
                }
            })?;
            if seeds.is_empty() {
                return Err(usage("--seeds needs at least one value".into()));
            }
            cfg.search.validate()?;
            cfg.train.validate()?;
            start_run(cli, "ablate", &cfg, data, &[], &["report.json", "report.txt", "seed*/<tier>/"])?;
            let report = ablate(&cfg, seeds, Some(&data.out))?;
            print!("{}", std::fs::read_to_string(data.out.join("report.txt")).context("reading report.txt")?);
            if !report.ordering_holds {
                log::warn!("tier ordering inverted beyond the tolerance band");
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    env_logger::Builder::new().filter_level(level).parse_default_env().init();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {:#}", f.error);
            ExitCode::from(f.code)
        }
    }
}
