//! End-to-end runs: data preparation, search, retraining, verification and
//! the three-tier ablation, each writing a self-describing run directory.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::checkpoint::{encode_store, load_into_store, read_json, write_json, Header, TensorRecord};
use crate::data::{ingest_csv, make_windows, split_for_search, synth_generate, CsvSchema, DatasetManifest, SequenceRecord, SynthConfig, WindowSet};
use crate::discrete::{instantiate_discrete, DiscreteNet};
use crate::error::{Error, Result};
use crate::genotype::Genotype;
use crate::layers::RunningStats;
use crate::metrics::{det_curve, embed, score_protocol, write_det_csv, write_table, MetricsReport};
use crate::search::{run_search, SearchRunConfig, Tier};
use crate::supernet::SupernetConfig;
use crate::train::{train_final, TrainConfig, TrainReport};

/// Element type used by every pipeline stage.
pub type Real = f32;

pub const ENGINE_VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum DataSource {
    Synthetic(SynthConfig),
    Csv {
        path: PathBuf,
        #[serde(default)]
        schema: CsvSchema,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    pub source: DataSource,
    pub window_length: usize,
    pub window_stride: usize,
    pub z_normalize: bool,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            source: DataSource::Synthetic(SynthConfig::default()),
            window_length: 128,
            window_stride: 64,
            z_normalize: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub batch_size: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig { batch_size: 256 }
    }
}

/// Every setting of a run, after flags, config file and defaults are merged.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub data: DataConfig,
    pub search: SearchRunConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

impl RunConfig {
    /// Settings for minutes-scale CPU runs on the synthetic cohort.
    pub fn desk() -> Self {
        let mut cfg = RunConfig::default();
        cfg.search.epochs = 10;
        cfg.train.epochs = 30;
        cfg
    }

    /// Seeds every stochastic component from one value.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.search.seed = seed;
        self.train.seed = seed;
        if let DataSource::Synthetic(s) = &mut self.data.source {
            s.seed = seed;
        }
        self
    }
}

/// Windows of one dataset, split by session.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub records: Vec<SequenceRecord>,
    pub windows: WindowSet,
    pub session1: WindowSet,
    pub session2: WindowSet,
    pub manifest: DatasetManifest,
}

pub fn prepare(cfg: &DataConfig) -> Result<Prepared> {
    let (records, source) = match &cfg.source {
        DataSource::Synthetic(s) => (synth_generate(s)?, format!("synthetic(seed={})", s.seed)),
        DataSource::Csv { path, schema } => (ingest_csv(path, schema)?, path.display().to_string()),
    };
    let windows = make_windows(&records, cfg.window_length, cfg.window_stride, cfg.z_normalize)?;
    let session1 = windows.session(1);
    let session2 = windows.session(2);
    if session1.is_empty() {
        return Err(Error::Data("no session-1 windows".into()));
    }
    let manifest = DatasetManifest::new(&source, &records, &windows);
    Ok(Prepared {
        records,
        windows,
        session1,
        session2,
        manifest,
    })
}

/// Fills in the data-dependent network dimensions.
pub fn fit_network(cfg: &mut RunConfig, data: &WindowSet) {
    cfg.search.supernet.num_classes = data.num_classes();
    cfg.search.supernet.input_channels = data.channels;
}

/// Record of how a run directory was produced. Written before any compute.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config: RunConfig,
    pub engine_version: String,
    pub seed: u64,
    pub input_hashes: BTreeMap<String, String>,
    pub outputs: Vec<String>,
    /// Seconds since the Unix epoch when the run started.
    pub started_at: u64,
}

impl RunManifest {
    pub fn new(command: &str, config: &RunConfig, outputs: &[&str]) -> Self {
        RunManifest {
            command: command.to_string(),
            config: config.clone(),
            engine_version: ENGINE_VERSION.to_string(),
            seed: config.search.seed,
            input_hashes: BTreeMap::new(),
            outputs: outputs.iter().map(|s| s.to_string()).collect(),
            started_at: SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs()),
        }
    }

    pub fn hash_file(&mut self, label: &str, path: &Path) -> Result<()> {
        let bytes = std::fs::read(path)?;
        self.input_hashes.insert(label.to_string(), sha256_hex(&bytes));
        Ok(())
    }

    /// Writes `manifest.json`, refusing to replace an existing one.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let path = dir.join("manifest.json");
        if path.exists() {
            return Err(Error::InvalidArgument(format!("{} already exists", path.display())));
        }
        write_json(self, &path)
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

const WEIGHTS_FORMAT: &str = "cellsearch-weights";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct WeightsCheckpoint {
    #[serde(flatten)]
    header: Header,
    network: SupernetConfig,
    genotype: Genotype,
    seed: u64,
    running: RunningStats,
    report: Option<TrainReport>,
    params: Vec<TensorRecord>,
}

pub fn save_weights(net: &DiscreteNet<Real>, seed: u64, report: Option<&TrainReport>, path: &Path) -> Result<()> {
    let ck = WeightsCheckpoint {
        header: Header::new::<Real>(WEIGHTS_FORMAT),
        network: net.config().clone(),
        genotype: net.genotype().clone(),
        seed,
        running: net.running().clone(),
        report: report.cloned(),
        params: encode_store(net.store()),
    };
    write_json(&ck, path)
}

pub fn load_weights(path: &Path) -> Result<DiscreteNet<Real>> {
    let ck: WeightsCheckpoint = read_json(path)?;
    ck.header.check::<Real>(WEIGHTS_FORMAT)?;
    let mut net = instantiate_discrete::<Real>(&ck.genotype, &ck.network, ck.seed)?;
    if ck.running.len() != net.running().len() {
        return Err(Error::Checkpoint("running statistics do not match the network".into()));
    }
    load_into_store(&ck.params, net.store_mut())?;
    *net.running_mut() = ck.running;
    Ok(net)
}

/// Architecture search on session-1 data. Writes the search run directory
/// under `out` when given.
pub fn search_stage(cfg: &RunConfig, data: &Prepared, out: Option<&Path>) -> Result<Genotype> {
    let (train, val) = split_for_search(&data.session1, cfg.search.split_ratio, cfg.search.seed)?;
    let mut search = cfg.search.clone();
    search.supernet.num_classes = data.session1.num_classes();
    search.supernet.input_channels = data.session1.channels;
    run_search::<Real>(&search, &train, &val, out)
}

/// Trains the discrete network from scratch on all session-1 windows.
pub fn train_stage(cfg: &RunConfig, genotype: &Genotype, data: &Prepared, out: Option<&Path>) -> Result<(DiscreteNet<Real>, TrainReport)> {
    let mut network = cfg.search.resolved_supernet();
    network.num_classes = data.session1.num_classes();
    network.input_channels = data.session1.channels;
    // The derived layout and gate usage are properties of the genotype.
    network.layout = genotype.kinds();
    network.num_cells = genotype.cells.len();
    if let Some(v) = genotype.meta.get("use_gates").and_then(|v| v.as_bool()) {
        network.use_gates = v;
    }
    let mut net = instantiate_discrete::<Real>(genotype, &network, cfg.train.seed)?;
    let report = train_final(&mut net, &data.session1, &cfg.train)?;
    if let Some(dir) = out {
        std::fs::create_dir_all(dir)?;
        save_weights(&net, cfg.train.seed, Some(&report), &dir.join("weights.json"))?;
        let mut w = csv::Writer::from_path(dir.join("log.csv"))?;
        for row in &report.log {
            w.serialize(row)?;
        }
        w.flush()?;
    }
    Ok((net, report))
}

/// Session-1 enrollment, session-2 probes, cosine scoring.
pub fn eval_stage(net: &DiscreteNet<Real>, cfg: &EvalConfig, data: &Prepared, out: Option<&Path>) -> Result<MetricsReport> {
    if data.session2.is_empty() {
        return Err(Error::Data("no session-2 windows to evaluate".into()));
    }
    let enroll = embed(net, &data.session1, cfg.batch_size)?;
    let probe = embed(net, &data.session2, cfg.batch_size)?;
    let scores = score_protocol(&enroll, &data.session1.labels, &probe, &data.session2.labels)?;
    let report = MetricsReport::compute(&scores)?;
    if let Some(dir) = out {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("metrics.json"), report.to_json()?)?;
        write_det_csv(&det_curve(&scores)?, &dir.join("det.csv"))?;
    }
    Ok(report)
}

/// Search, train and evaluate in one go; stage directories go under `out`.
pub fn full_pipeline(cfg: &RunConfig, data: &Prepared, out: Option<&Path>) -> Result<(Genotype, MetricsReport)> {
    let sub = |name: &str| out.map(|o| o.join(name));
    let genotype = search_stage(cfg, data, sub("search").as_deref())?;
    let (net, _) = train_stage(cfg, &genotype, data, sub("train").as_deref())?;
    let metrics = eval_stage(&net, &cfg.eval, data, sub("eval").as_deref())?;
    Ok((genotype, metrics))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRun {
    pub tier: Tier,
    pub seed: u64,
    pub split_fingerprint: String,
    pub metrics: MetricsReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub runs: Vec<AblationRun>,
    /// Per tier, the run whose EER is the median over seeds.
    pub rows: Vec<(String, MetricsReport)>,
    /// True when the median EERs satisfy relax <= alpha <= darts + band.
    pub ordering_holds: bool,
}

pub const ORDERING_BAND: f64 = 0.05;

fn median_run<'a>(runs: &[&'a AblationRun]) -> &'a AblationRun {
    let mut v = runs.to_vec();
    v.sort_by(|a, b| a.metrics.eer.total_cmp(&b.metrics.eer).then(a.seed.cmp(&b.seed)));
    v[(v.len() - 1) / 2]
}

/// Runs the full pipeline for every tier and seed on identical data.
pub fn ablate(cfg: &RunConfig, seeds: &[u64], out: Option<&Path>) -> Result<AblationReport> {
    if seeds.is_empty() {
        return Err(Error::InvalidArgument("ablation needs at least one seed".into()));
    }
    let data = prepare(&cfg.data)?;
    let mut runs = Vec::new();
    for &seed in seeds {
        for tier in Tier::ALL {
            let mut c = cfg.clone();
            c.search.tier = tier;
            c.search.seed = seed;
            c.train.seed = seed;
            let (train, val) = split_for_search(&data.session1, c.search.split_ratio, seed)?;
            let fingerprint = sha256_hex(format!("{}{}", train.fingerprint(), val.fingerprint()).as_bytes());
            let dir = out.map(|o| o.join(format!("seed{seed}")).join(tier.name()));
            let (_, metrics) = full_pipeline(&c, &data, dir.as_deref())?;
            log::info!("ablation seed {seed} tier {tier}: EER {:.4}", metrics.eer);
            runs.push(AblationRun {
                tier,
                seed,
                split_fingerprint: fingerprint,
                metrics,
            });
        }
    }
    let rows: Vec<(String, MetricsReport)> = Tier::ALL
        .iter()
        .map(|&t| {
            let of_tier: Vec<&AblationRun> = runs.iter().filter(|r| r.tier == t).collect();
            (t.name().to_string(), median_run(&of_tier).metrics.clone())
        })
        .collect();
    let (darts, alpha, relax) = (rows[0].1.eer, rows[1].1.eer, rows[2].1.eer);
    let report = AblationReport {
        runs,
        rows,
        ordering_holds: relax <= alpha + ORDERING_BAND && alpha <= darts + ORDERING_BAND,
    };
    if let Some(dir) = out {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("report.json"), serde_json::to_string_pretty(&report)? + "\n")?;
        let mut table = Vec::new();
        write_table(&report.rows, &mut table)?;
        std::fs::write(dir.join("report.txt"), table)?;
    }
    Ok(report)
}
