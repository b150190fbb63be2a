//! End-to-end runs shared by the command line and the acceptance suite:
//! pretraining, conversion, adapter training with periodic evaluation,
//! held-out comparison and the ablation sweep.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use crate::checkpoint;
use crate::config::RunConfig;
use crate::data::{fixed_batches, heldout_passages, Batch, ByteCorpus};
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::recurrence::{is_trainable_name, OuroborosConfig, OuroborosModel, Variant};
use crate::report::{ReportRow, RowStatus, RunReport};
use crate::surgery::{self, ConvertedModel, LoraBasisSet};
use crate::tensor::Element;
use crate::training::{loss_only, mean_loss, train_loop, LogRow, TrainOutcome, Trainable};
use crate::transformer::Transformer;

/// Seed of the synthetic corpus. Kept apart from run seeds so every run sees the same bytes.
pub const CORPUS_SEED: u64 = 0x00c0_ffee;
/// Seed of the fixed evaluation batches.
pub const EVAL_SEED: u64 = 0x0e7a_1000;

pub fn load_corpus(cfg: &RunConfig) -> Result<ByteCorpus> {
    match &cfg.corpus {
        Some(p) => ByteCorpus::from_path(p),
        None => ByteCorpus::synthetic(cfg.corpus_bytes, CORPUS_SEED),
    }
}

/// Loss of one passage, split into windows of at most `max_seq` inputs and
/// weighted by the number of predicted bytes.
pub fn passage_loss<T: Element, M: Trainable<T>>(model: &M, bytes: &[u8], max_seq: usize) -> Result<f64> {
    if bytes.len() < 2 {
        return Err(Error::Config("passage needs at least two bytes".into()));
    }
    let mut start = 0;
    let mut total = 0.0;
    let mut count = 0usize;
    while start + 1 < bytes.len() {
        let len = (bytes.len() - 1 - start).min(max_seq);
        let batch = Batch::at_offsets(bytes, &[start], len)?;
        total += loss_only(model, &batch)? * len as f64;
        count += len;
        start += len;
    }
    Ok(total / count as f64)
}

/// Fixed evaluation material: batches from the training stream and the held-out passages.
#[derive(Clone, Debug)]
pub struct Evaluator {
    pub batches: Vec<Batch>,
    pub passages: Vec<Vec<u8>>,
    pub max_seq: usize,
}

impl Evaluator {
    pub fn new(corpus: &ByteCorpus, cfg: &RunConfig) -> Result<Self> {
        Ok(Self {
            batches: fixed_batches(&corpus.train, cfg.eval_batches, cfg.train.batch, cfg.train.seq_len, EVAL_SEED)?,
            passages: corpus.heldout.clone(),
            max_seq: cfg.model.max_seq,
        })
    }

    pub fn train_loss<T: Element, M: Trainable<T>>(&self, model: &M) -> Result<f64> {
        mean_loss(model, &self.batches)
    }

    pub fn heldout<T: Element, M: Trainable<T>>(&self, model: &M) -> Result<Vec<f64>> {
        self.passages.iter().map(|p| passage_loss(model, p, self.max_seq)).collect()
    }

    pub fn heldout_mean<T: Element, M: Trainable<T>>(&self, model: &M) -> Result<f64> {
        let v = self.heldout(model)?;
        Ok(v.iter().sum::<f64>() / v.len() as f64)
    }
}

/// Trains a base model from scratch on the corpus.
pub fn pretrain<T: Element>(
    cfg: &RunConfig,
    corpus: &ByteCorpus,
    observer: &mut dyn FnMut(&LogRow, &Transformer<T>) -> Result<()>,
) -> Result<(Transformer<T>, TrainOutcome)> {
    cfg.validate()?;
    let mut model = Transformer::init(cfg.model.clone(), cfg.train.seed)?;
    let outcome = train_loop(&mut model, &corpus.train, &cfg.train, observer)?;
    Ok((model, outcome))
}

pub fn convert<T: Element>(base: &Transformer<T>, cfg: &RunConfig) -> Result<(ConvertedModel<T>, LoraBasisSet<T>)> {
    if base.config != cfg.model {
        return Err(Error::Config("base checkpoint and run configuration disagree on the model".into()));
    }
    surgery::convert(base, &cfg.surgery)
}

/// Adds the configured variant's trainables to a converted model.
pub fn build<T: Element>(converted: &ConvertedModel<T>, cfg: &RunConfig) -> Result<OuroborosModel<T>> {
    OuroborosModel::build(converted.clone(), cfg.ouro.clone(), cfg.train.seed)
}

/// The prelude, one recurrent pass and the coda of `model`, without modulation.
pub fn baseline17_of<T: Element>(model: &OuroborosModel<T>) -> Result<OuroborosModel<T>> {
    let mut params = ParamStore::new();
    for (name, p) in model.params.iter() {
        if !is_trainable_name(name) {
            params.insert(name, p.tensor.clone(), true);
        }
    }
    let ouro = OuroborosConfig {
        variant: Variant::Baseline17,
        depth: 1,
        ..model.ouro.clone()
    };
    OuroborosModel::from_params(model.config.clone(), model.surgery.clone(), ouro, params)
}

fn eval_row<T: Element>(
    model: &OuroborosModel<T>,
    cfg: &RunConfig,
    eval: &Evaluator,
    step: usize,
    started: Instant,
) -> Result<ReportRow> {
    let train_loss = eval.train_loss(model)?;
    let heldout_loss = eval.heldout_mean(model)?;
    let finite = train_loss.is_finite() && heldout_loss.is_finite();
    Ok(ReportRow {
        variant: cfg.ouro.variant,
        depth: cfg.ouro.depth,
        rank: cfg.surgery.rank,
        lr: cfg.train.lr_peak,
        seed: cfg.train.seed,
        step,
        train_loss,
        heldout_loss,
        wall_seconds: started.elapsed().as_secs_f64(),
        status: if finite { RowStatus::Ok } else { RowStatus::Nan },
    })
}

/// Trains the adapters, reporting evaluation rows before training, every
/// `log_every` updates and after the last one. A row's `step` counts the
/// updates applied so far. A non-finite abort adds a final flagged row.
pub fn train_reported<T: Element>(
    model: &mut OuroborosModel<T>,
    cfg: &RunConfig,
    corpus: &ByteCorpus,
    eval: &Evaluator,
    on_row: &mut dyn FnMut(&ReportRow),
    observer: &mut dyn FnMut(&LogRow, &OuroborosModel<T>) -> Result<()>,
) -> Result<(RunReport, TrainOutcome)> {
    cfg.validate()?;
    let started = Instant::now();
    let mut report = RunReport::default();
    let first = eval_row(model, cfg, eval, 0, started)?;
    on_row(&first);
    report.push(first);
    let total = cfg.train.total_steps;
    let outcome = train_loop(model, &corpus.train, &cfg.train, &mut |row, m| {
        observer(row, m)?;
        let done = row.step + 1;
        if done % cfg.log_every == 0 || done == total {
            let r = eval_row(m, cfg, eval, done, started)?;
            on_row(&r);
            report.push(r);
        }
        Ok(())
    })?;
    if let Some(Error::NonFinite { step, .. }) = &outcome.aborted {
        let r = ReportRow {
            step: *step,
            train_loss: f64::NAN,
            heldout_loss: f64::NAN,
            wall_seconds: started.elapsed().as_secs_f64(),
            status: RowStatus::Nan,
            ..report.rows[0].clone()
        };
        on_row(&r);
        report.push(r);
    }
    Ok((report, outcome))
}

/// Runs every cell of `cfg.sweep` from one base model. Conversion happens once
/// per rank. Cells that go non-finite are flagged and the sweep continues.
/// Baseline cells only exist at depth 1.
pub fn ablate<T: Element>(
    base: &Transformer<T>,
    cfg: &RunConfig,
    corpus: &ByteCorpus,
    on_row: &mut dyn FnMut(&ReportRow),
) -> Result<RunReport> {
    let eval = Evaluator::new(corpus, cfg)?;
    let mut parts = Vec::new();
    for &rank in &cfg.sweep.ranks {
        let mut rank_cfg = cfg.clone();
        rank_cfg.surgery.rank = rank;
        let (converted, _) = convert(base, &rank_cfg)?;
        for &variant in &cfg.sweep.variants {
            let depths = if variant == Variant::Baseline17 { vec![1] } else { cfg.sweep.depths.clone() };
            for &depth in &depths {
                for &lr in &cfg.sweep.lrs {
                    for &seed in &cfg.sweep.seeds {
                        let mut cell = rank_cfg.clone();
                        cell.ouro.variant = variant;
                        cell.ouro.depth = depth;
                        cell.train.lr_peak = lr;
                        cell.train.seed = seed;
                        let mut model = build(&converted, &cell)?;
                        let (report, _) = train_reported(&mut model, &cell, corpus, &eval, on_row, &mut |_, _| Ok(()))?;
                        parts.push(report);
                    }
                }
            }
        }
    }
    Ok(RunReport::merge(parts))
}

/// Per-passage comparison of a trained model with its 17-layer-style baseline
/// and, optionally, the full base model.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalRow {
    pub passage: usize,
    pub bytes: usize,
    pub model: f64,
    pub baseline: f64,
    pub full: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct EvalReport {
    pub rows: Vec<EvalRow>,
}

fn mean(v: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    s / n as f64
}

impl EvalReport {
    pub fn mean_model(&self) -> f64 {
        mean(self.rows.iter().map(|r| r.model))
    }

    pub fn mean_baseline(&self) -> f64 {
        mean(self.rows.iter().map(|r| r.baseline))
    }

    pub fn mean_full(&self) -> Option<f64> {
        self.rows.iter().map(|r| r.full).collect::<Option<Vec<_>>>().map(|v| mean(v.into_iter()))
    }

    pub fn beats_baseline(&self) -> usize {
        self.rows.iter().filter(|r| r.model < r.baseline).count()
    }

    pub fn beats_full(&self) -> Option<usize> {
        self.mean_full()?;
        Some(self.rows.iter().filter(|r| r.full.is_some_and(|f| r.model < f)).count())
    }

    pub fn render(&self) -> String {
        let mut out = String::from("passage\tbytes\tmodel\tbaseline\tfull\n");
        for r in &self.rows {
            let full = r.full.map(|f| format!("{f:.6}")).unwrap_or_else(|| "-".into());
            let _ = writeln!(out, "{}\t{}\t{:.6}\t{:.6}\t{full}", r.passage, r.bytes, r.model, r.baseline);
        }
        let n = self.rows.len();
        let _ = writeln!(out, "# mean model {:.6} baseline {:.6}", self.mean_model(), self.mean_baseline());
        let _ = writeln!(out, "# beats baseline on {}/{n}", self.beats_baseline());
        if let (Some(f), Some(b)) = (self.mean_full(), self.beats_full()) {
            let _ = writeln!(out, "# mean full {f:.6}; beats full on {b}/{n}");
        }
        out
    }
}

pub fn eval_heldout<T: Element>(
    model: &OuroborosModel<T>,
    full: Option<&Transformer<T>>,
    passages: &[Vec<u8>],
) -> Result<EvalReport> {
    let baseline = baseline17_of(model)?;
    let max_seq = model.config.max_seq;
    let mut rows = Vec::with_capacity(passages.len());
    for (i, p) in passages.iter().enumerate() {
        rows.push(EvalRow {
            passage: i,
            bytes: p.len(),
            model: passage_loss(model, p, max_seq)?,
            baseline: passage_loss(&baseline, p, max_seq)?,
            full: full.map(|f| passage_loss(f, p, max_seq)).transpose()?,
        });
    }
    Ok(EvalReport { rows })
}

/// The built-in held-out passages.
pub fn default_passages() -> Vec<Vec<u8>> {
    heldout_passages()
}

/// Path of the configuration written next to a checkpoint.
pub fn sidecar(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".cfg");
    PathBuf::from(s)
}

/// Writes the checkpoint and its configuration sidecar.
pub fn save_with_config<T: Element>(path: &Path, store: &ParamStore<T>, cfg: &RunConfig) -> Result<()> {
    checkpoint::save(path, store)?;
    fs::write(sidecar(path), cfg.to_text())?;
    Ok(())
}

/// Reads the configuration stored next to a checkpoint.
pub fn read_sidecar(path: &Path) -> Result<RunConfig> {
    for p in [path.to_path_buf(), sidecar(path)] {
        if !p.exists() {
            return Err(Error::Io(std::io::Error::new(
                std::io::ErrorKind::NotFound,
                format!("{} not found", p.display()),
            )));
        }
    }
    RunConfig::from_file(&sidecar(path))
}

pub fn load_base<T: Element>(path: &Path) -> Result<(RunConfig, Transformer<T>)> {
    let cfg = read_sidecar(path)?;
    let params = checkpoint::load_as(path)?;
    Ok((cfg.clone(), Transformer::from_params(cfg.model, params)?))
}

pub fn load_ouroboros<T: Element>(path: &Path) -> Result<(RunConfig, OuroborosModel<T>)> {
    let cfg = read_sidecar(path)?;
    let params = checkpoint::load_as(path)?;
    let model = OuroborosModel::from_params(cfg.model.clone(), cfg.surgery.clone(), cfg.ouro.clone(), params)?;
    Ok((cfg, model))
}
