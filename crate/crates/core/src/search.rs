//! The search loop: alternating architecture and weight steps over epochs,
//! logging, checkpointing, resumption and final derivation.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::checkpoint::{encode_store, load_into_store, read_json, write_json, Header, TensorRecord};
use crate::data::WindowSet;
use crate::error::{Error, Result};
use crate::genotype::Genotype;
use crate::optim::{cosine_lr, triple_step, OptimizerConfig, TripleState};
use crate::supernet::{Supernet, SupernetConfig};
use crate::tensor::Scalar;
use crate::train::epoch_batches;

const FORMAT: &str = "cellsearch-search";

/// Ablation level of the search.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Tier {
    /// One shared logit matrix per cell kind, no gates.
    Darts,
    /// Independent logits per cell, no gates.
    Alpha,
    /// Independent logits per cell and learnable input gates.
    Relax,
}

impl Tier {
    pub const ALL: [Tier; 3] = [Tier::Darts, Tier::Alpha, Tier::Relax];

    pub fn name(self) -> &'static str {
        match self {
            Tier::Darts => "darts",
            Tier::Alpha => "alpha",
            Tier::Relax => "relax",
        }
    }

    pub fn apply(self, cfg: &mut SupernetConfig) {
        cfg.independent_alpha = self != Tier::Darts;
        cfg.use_gates = self == Tier::Relax;
    }
}

impl fmt::Display for Tier {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Tier {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Tier::ALL
            .into_iter()
            .find(|t| t.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown tier {s:?} (expected darts, alpha or relax)")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SearchRunConfig {
    pub epochs: usize,
    pub train_batch: usize,
    pub val_batch: usize,
    pub seed: u64,
    pub tier: Tier,
    /// Fraction of each subject's session-1 windows used for weight steps.
    pub split_ratio: f64,
    pub supernet: SupernetConfig,
    pub optimizer: OptimizerConfig,
}

impl Default for SearchRunConfig {
    fn default() -> Self {
        SearchRunConfig {
            epochs: 50,
            train_batch: 32,
            val_batch: 32,
            seed: 0,
            tier: Tier::Relax,
            split_ratio: 0.5,
            supernet: SupernetConfig::default(),
            optimizer: OptimizerConfig::default(),
        }
    }
}

impl SearchRunConfig {
    /// The supernet configuration with the tier's flags applied.
    pub fn resolved_supernet(&self) -> SupernetConfig {
        let mut cfg = self.supernet.clone();
        self.tier.apply(&mut cfg);
        cfg
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::InvalidArgument("search needs at least one epoch".into()));
        }
        if self.train_batch < 2 || self.val_batch < 2 {
            return Err(Error::InvalidArgument("search batch sizes must be at least 2".into()));
        }
        self.resolved_supernet().validate()?;
        self.optimizer.validate()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SearchLogRow {
    pub step: u64,
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub lr: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct SearchCheckpoint {
    #[serde(flatten)]
    header: Header,
    config: SearchRunConfig,
    epochs_done: usize,
    best_val: Option<f64>,
    state: TripleState,
    log: Vec<SearchLogRow>,
    params: Vec<TensorRecord>,
}

/// A search run that can be advanced epoch by epoch, saved and resumed.
#[derive(Clone, Debug)]
pub struct SearchSession<F: Scalar> {
    config: SearchRunConfig,
    net: Supernet<F>,
    state: TripleState,
    log: Vec<SearchLogRow>,
    epochs_done: usize,
    best_val: Option<f64>,
}

/// Per-step callback: the network after the step and the step's log row.
pub type StepObserver<'a, F> = dyn FnMut(&Supernet<F>, &SearchLogRow) + 'a;

impl<F: Scalar> SearchSession<F> {
    pub fn new(config: SearchRunConfig) -> Result<Self> {
        config.validate()?;
        let net = Supernet::new(config.resolved_supernet(), config.seed)?;
        Ok(SearchSession {
            config,
            net,
            state: TripleState::default(),
            log: Vec::new(),
            epochs_done: 0,
            best_val: None,
        })
    }

    /// Restores a session saved by [`SearchSession::save`]. Nothing is
    /// returned unless the whole file validates.
    pub fn resume(path: &Path) -> Result<Self> {
        let ck: SearchCheckpoint = read_json(path)?;
        ck.header.check::<F>(FORMAT)?;
        let mut session = Self::new(ck.config)?;
        load_into_store(&ck.params, session.net.store_mut())?;
        if ck.epochs_done > session.config.epochs {
            return Err(Error::Checkpoint(format!(
                "checkpoint records {} epochs of a {}-epoch run",
                ck.epochs_done, session.config.epochs
            )));
        }
        session.state = ck.state;
        session.log = ck.log;
        session.epochs_done = ck.epochs_done;
        session.best_val = ck.best_val;
        Ok(session)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let ck = SearchCheckpoint {
            header: Header::new::<F>(FORMAT),
            config: self.config.clone(),
            epochs_done: self.epochs_done,
            best_val: self.best_val,
            state: self.state.clone(),
            log: self.log.clone(),
            params: encode_store(self.net.store()),
        };
        write_json(&ck, path)
    }

    pub fn config(&self) -> &SearchRunConfig {
        &self.config
    }

    pub fn net(&self) -> &Supernet<F> {
        &self.net
    }

    pub fn net_mut(&mut self) -> &mut Supernet<F> {
        &mut self.net
    }

    pub fn log(&self) -> &[SearchLogRow] {
        &self.log
    }

    pub fn epochs_done(&self) -> usize {
        self.epochs_done
    }

    pub fn is_finished(&self) -> bool {
        self.epochs_done >= self.config.epochs
    }

    fn check_data(&self, train: &WindowSet, val: &WindowSet) -> Result<()> {
        let cfg = self.net.config();
        for (name, set) in [("training", train), ("validation", val)] {
            if set.len() < 2 {
                return Err(Error::Data(format!("{name} split has {} windows", set.len())));
            }
            if set.channels != cfg.input_channels {
                return Err(Error::Data(format!(
                    "{name} windows have {} channels, network expects {}",
                    set.channels, cfg.input_channels
                )));
            }
            if set.num_classes() != cfg.num_classes {
                return Err(Error::Data(format!(
                    "{name} split has {} subjects, network head has {} classes",
                    set.num_classes(),
                    cfg.num_classes
                )));
            }
            if set.sessions.iter().any(|&s| s != 1) {
                return Err(Error::Data(format!("{name} split contains windows outside session 1")));
            }
        }
        Ok(())
    }

    /// Runs one epoch and returns the mean validation loss of its steps.
    pub fn run_epoch(&mut self, train: &WindowSet, val: &WindowSet, observer: &mut StepObserver<'_, F>) -> Result<f64> {
        self.check_data(train, val)?;
        let epoch = self.epochs_done;
        let cfg = &self.config;
        let lr = cosine_lr(epoch as f64, cfg.epochs as f64, cfg.optimizer.w_lr0);
        let train_batches = epoch_batches(train.len(), cfg.train_batch, cfg.seed, epoch);
        let val_batches = epoch_batches(val.len(), cfg.val_batch, cfg.seed ^ 0x7a1, epoch);
        let steps = train_batches.len().max(val_batches.len());
        let mut val_sum = 0.0;
        for k in 0..steps {
            let tb = train.batch::<F>(&train_batches[k % train_batches.len()]);
            let vb = val.batch::<F>(&val_batches[k % val_batches.len()]);
            let losses = triple_step(&mut self.net, &tb, &vb, &mut self.state, &self.config.optimizer, lr)?;
            let row = SearchLogRow {
                step: self.state.step,
                epoch,
                train_loss: losses.train,
                val_loss: losses.val,
                lr,
            };
            observer(&self.net, &row);
            val_sum += losses.val;
            self.log.push(row);
        }
        self.epochs_done += 1;
        self.state.epoch = self.epochs_done;
        let mean = val_sum / steps as f64;
        log::info!("search epoch {epoch}: mean validation loss {mean:.4}");
        Ok(mean)
    }

    /// Runs the remaining epochs (or up to `stop_after` total epochs) and
    /// derives the genotype. With a checkpoint directory, `last.json` is
    /// written after every epoch and `best.json` whenever the epoch's mean
    /// validation loss improves; on failure the last good `last.json` stays.
    pub fn run(
        &mut self,
        train: &WindowSet,
        val: &WindowSet,
        checkpoints: Option<&Path>,
        stop_after: Option<usize>,
        observer: &mut StepObserver<'_, F>,
    ) -> Result<Genotype> {
        let stop = stop_after.unwrap_or(self.config.epochs).min(self.config.epochs);
        if let Some(dir) = checkpoints {
            std::fs::create_dir_all(dir)?;
            if self.epochs_done == 0 {
                self.save(&dir.join("last.json"))?;
            }
        }
        while self.epochs_done < stop {
            let mean = self.run_epoch(train, val, observer)?;
            let improved = self.best_val.is_none_or(|b| mean < b);
            if improved {
                self.best_val = Some(mean);
            }
            if let Some(dir) = checkpoints {
                self.save(&dir.join("last.json"))?;
                if improved {
                    self.save(&dir.join("best.json"))?;
                }
            }
        }
        self.genotype()
    }

    /// Derives the current architecture with run metadata attached.
    pub fn genotype(&self) -> Result<Genotype> {
        let mut g = self.net.derive()?;
        let cfg = self.net.config();
        let meta = [
            ("tier", serde_json::json!(self.config.tier.name())),
            ("seed", serde_json::json!(self.config.seed)),
            ("epochs", serde_json::json!(self.epochs_done)),
            ("gate_scale", serde_json::json!(cfg.gate_scale)),
            ("gate_threshold", serde_json::json!(cfg.gate_threshold)),
            ("independent_alpha", serde_json::json!(cfg.independent_alpha)),
            ("use_gates", serde_json::json!(cfg.use_gates)),
        ];
        g.meta.extend(meta.into_iter().map(|(k, v)| (k.to_string(), v)));
        Ok(g)
    }
}

/// Paths of a search run directory.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SearchPaths {
    pub root: PathBuf,
}

impl SearchPaths {
    pub fn new(root: &Path) -> Self {
        SearchPaths { root: root.to_path_buf() }
    }

    pub fn config(&self) -> PathBuf {
        self.root.join("config.json")
    }

    pub fn log(&self) -> PathBuf {
        self.root.join("log.csv")
    }

    pub fn genotype(&self) -> PathBuf {
        self.root.join("genotype.json")
    }

    pub fn dot(&self) -> PathBuf {
        self.root.join("genotype.dot")
    }

    pub fn checkpoints(&self) -> PathBuf {
        self.root.join("checkpoints")
    }
}

pub fn write_search_log(rows: &[SearchLogRow], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

/// Searches from scratch on pre-split session-1 windows and writes the run
/// directory: config, per-step log, genotype (JSON and DOT), checkpoints.
pub fn run_search<F: Scalar>(config: &SearchRunConfig, train: &WindowSet, val: &WindowSet, out: Option<&Path>) -> Result<Genotype> {
    let mut session = SearchSession::<F>::new(config.clone())?;
    finish_search(&mut session, train, val, out)
}

/// Continues a saved session to completion; the same files as
/// [`run_search`] are written.
pub fn resume_search<F: Scalar>(checkpoint: &Path, train: &WindowSet, val: &WindowSet, out: Option<&Path>) -> Result<Genotype> {
    let mut session = SearchSession::<F>::resume(checkpoint)?;
    finish_search(&mut session, train, val, out)
}

fn finish_search<F: Scalar>(session: &mut SearchSession<F>, train: &WindowSet, val: &WindowSet, out: Option<&Path>) -> Result<Genotype> {
    let paths = out.map(SearchPaths::new);
    if let Some(p) = &paths {
        std::fs::create_dir_all(&p.root)?;
        write_json(session.config(), &p.config())?;
    }
    let result = session.run(train, val, paths.as_ref().map(|p| p.checkpoints()).as_deref(), None, &mut |_, _| {});
    if let Some(p) = &paths {
        write_search_log(session.log(), &p.log())?;
    }
    let genotype = result?;
    if let Some(p) = &paths {
        genotype.save(&p.genotype())?;
        std::fs::write(p.dot(), genotype.to_dot())?;
    }
    Ok(genotype)
}
