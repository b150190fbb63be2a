//! Flat `key=value` run configuration. One key per line, `#` starts a comment,
//! unknown or repeated keys are errors.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use indexmap::IndexMap;

use crate::error::{Error, Result};
use crate::recurrence::{OuroborosConfig, Variant};
use crate::surgery::{SplitSpec, SurgeryConfig};
use crate::training::TrainConfig;
use crate::transformer::ModelConfig;

/// Parses `key=value` lines into an ordered map.
pub fn parse_kv(text: &str) -> Result<IndexMap<String, String>> {
    let mut out = IndexMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected key=value, got `{line}`", i + 1)))?;
        let (k, v) = (k.trim(), v.trim());
        if k.is_empty() {
            return Err(Error::Config(format!("line {}: empty key", i + 1)));
        }
        if out.insert(k.to_string(), v.to_string()).is_some() {
            return Err(Error::Config(format!("line {}: duplicate key `{k}`", i + 1)));
        }
    }
    Ok(out)
}

/// Axes of an ablation sweep.
#[derive(Clone, Debug, PartialEq)]
pub struct SweepSpec {
    pub variants: Vec<Variant>,
    pub depths: Vec<usize>,
    pub ranks: Vec<usize>,
    pub lrs: Vec<f64>,
    pub seeds: Vec<u64>,
}

impl Default for SweepSpec {
    fn default() -> Self {
        Self {
            variants: vec![Variant::Controller, Variant::Static],
            depths: vec![1, 2, 4, 8, 16],
            ranks: vec![8, 32, 64],
            lrs: vec![3e-4, 1e-3],
            seeds: vec![0, 1, 2],
        }
    }
}

impl SweepSpec {
    pub fn cells(&self) -> usize {
        self.variants.len() * self.depths.len() * self.ranks.len() * self.lrs.len() * self.seeds.len()
    }
}

/// Everything a command needs, with toy defaults.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub surgery: SurgeryConfig,
    pub ouro: OuroborosConfig,
    pub train: TrainConfig,
    pub sweep: SweepSpec,
    /// Training bytes; a synthetic corpus is generated when absent.
    pub corpus: Option<PathBuf>,
    pub corpus_bytes: usize,
    /// Fixed batches used for the reported training loss.
    pub eval_batches: usize,
    /// Report and log cadence in optimizer steps.
    pub log_every: usize,
    /// Checkpoint cadence in optimizer steps; 0 writes only the final checkpoint.
    pub checkpoint_every: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::toy(),
            surgery: SurgeryConfig {
                split: SplitSpec::toy(),
                rank: 32,
                alpha: 16.0,
            },
            ouro: OuroborosConfig::toy(Variant::Controller, 4),
            train: TrainConfig::default(),
            sweep: SweepSpec::default(),
            corpus: None,
            corpus_bytes: 1 << 20,
            eval_batches: 8,
            log_every: 100,
            checkpoint_every: 0,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("`{key}`: cannot parse `{value}`")))
}

fn parse_list<T: FromStr>(key: &str, value: &str) -> Result<Vec<T>> {
    let items: Vec<T> = value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| parse(key, s))
        .collect::<Result<_>>()?;
    if items.is_empty() {
        return Err(Error::Config(format!("`{key}` needs at least one value")));
    }
    Ok(items)
}

fn join<T: ToString>(v: &[T]) -> String {
    v.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}

impl RunConfig {
    pub const KEYS: &'static [&'static str] = &[
        "n_layers", "d_model", "n_heads", "n_kv_heads", "ffn_dim", "vocab", "max_seq", "rope_theta",
        "prelude", "recurrent", "coda", "rank", "alpha",
        "variant", "depth", "n_max", "controller_width",
        "lr", "lr_min_ratio", "beta1", "beta2", "adam_eps", "weight_decay", "clip_norm",
        "warmup_steps", "total_steps", "batch", "accum", "seq_len", "seed",
        "sweep_variants", "sweep_depths", "sweep_ranks", "sweep_lrs", "sweep_seeds",
        "corpus", "corpus_bytes", "eval_batches", "log_every", "checkpoint_every",
    ];

    /// Sets one key. Unknown keys are rejected with the key name.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value;
        match key {
            "n_layers" => {
                self.model.n_layers = parse(key, v)?;
                self.surgery.split.n_layers = self.model.n_layers;
            }
            "d_model" => self.model.d_model = parse(key, v)?,
            "n_heads" => self.model.n_heads = parse(key, v)?,
            "n_kv_heads" => self.model.n_kv_heads = parse(key, v)?,
            "ffn_dim" => self.model.ffn_dim = parse(key, v)?,
            "vocab" => self.model.vocab = parse(key, v)?,
            "max_seq" => self.model.max_seq = parse(key, v)?,
            "rope_theta" => self.model.rope_theta = parse(key, v)?,
            "prelude" => self.surgery.split.prelude = parse(key, v)?,
            "recurrent" => self.surgery.split.recurrent = parse(key, v)?,
            "coda" => self.surgery.split.coda = parse(key, v)?,
            "rank" => self.surgery.rank = parse(key, v)?,
            "alpha" => self.surgery.alpha = parse(key, v)?,
            "variant" => self.ouro.variant = v.parse()?,
            "depth" => self.ouro.depth = parse(key, v)?,
            "n_max" => self.ouro.n_max = parse(key, v)?,
            "controller_width" => self.ouro.controller_width = parse(key, v)?,
            "lr" => self.train.lr_peak = parse(key, v)?,
            "lr_min_ratio" => self.train.lr_min_ratio = parse(key, v)?,
            "beta1" => self.train.beta1 = parse(key, v)?,
            "beta2" => self.train.beta2 = parse(key, v)?,
            "adam_eps" => self.train.eps = parse(key, v)?,
            "weight_decay" => self.train.weight_decay = parse(key, v)?,
            "clip_norm" => self.train.clip_norm = parse(key, v)?,
            "warmup_steps" => self.train.warmup_steps = parse(key, v)?,
            "total_steps" => self.train.total_steps = parse(key, v)?,
            "batch" => self.train.batch = parse(key, v)?,
            "accum" => self.train.accum = parse(key, v)?,
            "seq_len" => self.train.seq_len = parse(key, v)?,
            "seed" => self.train.seed = parse(key, v)?,
            "sweep_variants" => self.sweep.variants = parse_list(key, v)?,
            "sweep_depths" => self.sweep.depths = parse_list(key, v)?,
            "sweep_ranks" => self.sweep.ranks = parse_list(key, v)?,
            "sweep_lrs" => self.sweep.lrs = parse_list(key, v)?,
            "sweep_seeds" => self.sweep.seeds = parse_list(key, v)?,
            "corpus" => self.corpus = if v.is_empty() { None } else { Some(PathBuf::from(v)) },
            "corpus_bytes" => self.corpus_bytes = parse(key, v)?,
            "eval_batches" => self.eval_batches = parse(key, v)?,
            "log_every" => self.log_every = parse(key, v)?,
            "checkpoint_every" => self.checkpoint_every = parse(key, v)?,
            _ => return Err(Error::Config(format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (k, v) in parse_kv(text)? {
            self.set(&k, &v)?;
        }
        Ok(())
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut c = Self::default();
        c.apply_text(text)?;
        Ok(c)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        Self::from_text(&fs::read_to_string(path)?)
    }

    /// Serializes every key; [`RunConfig::from_text`] reads it back unchanged.
    pub fn to_text(&self) -> String {
        let m = &self.model;
        let s = &self.surgery;
        let o = &self.ouro;
        let t = &self.train;
        let w = &self.sweep;
        let pairs: Vec<(&str, String)> = vec![
            ("n_layers", m.n_layers.to_string()),
            ("d_model", m.d_model.to_string()),
            ("n_heads", m.n_heads.to_string()),
            ("n_kv_heads", m.n_kv_heads.to_string()),
            ("ffn_dim", m.ffn_dim.to_string()),
            ("vocab", m.vocab.to_string()),
            ("max_seq", m.max_seq.to_string()),
            ("rope_theta", m.rope_theta.to_string()),
            ("prelude", s.split.prelude.to_string()),
            ("recurrent", s.split.recurrent.to_string()),
            ("coda", s.split.coda.to_string()),
            ("rank", s.rank.to_string()),
            ("alpha", s.alpha.to_string()),
            ("variant", o.variant.to_string()),
            ("depth", o.depth.to_string()),
            ("n_max", o.n_max.to_string()),
            ("controller_width", o.controller_width.to_string()),
            ("lr", t.lr_peak.to_string()),
            ("lr_min_ratio", t.lr_min_ratio.to_string()),
            ("beta1", t.beta1.to_string()),
            ("beta2", t.beta2.to_string()),
            ("adam_eps", t.eps.to_string()),
            ("weight_decay", t.weight_decay.to_string()),
            ("clip_norm", t.clip_norm.to_string()),
            ("warmup_steps", t.warmup_steps.to_string()),
            ("total_steps", t.total_steps.to_string()),
            ("batch", t.batch.to_string()),
            ("accum", t.accum.to_string()),
            ("seq_len", t.seq_len.to_string()),
            ("seed", t.seed.to_string()),
            ("sweep_variants", join(&w.variants)),
            ("sweep_depths", join(&w.depths)),
            ("sweep_ranks", join(&w.ranks)),
            ("sweep_lrs", join(&w.lrs)),
            ("sweep_seeds", join(&w.seeds)),
            ("corpus", self.corpus.as_ref().map(|p| p.display().to_string()).unwrap_or_default()),
            ("corpus_bytes", self.corpus_bytes.to_string()),
            ("eval_batches", self.eval_batches.to_string()),
            ("log_every", self.log_every.to_string()),
            ("checkpoint_every", self.checkpoint_every.to_string()),
        ];
        debug_assert_eq!(pairs.len(), Self::KEYS.len());
        let mut out = String::new();
        for (k, v) in pairs {
            let _ = writeln!(out, "{k}={v}");
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.surgery.split.n_layers != self.model.n_layers {
            return Err(Error::Config("split and model disagree on n_layers".into()));
        }
        self.surgery.split.validate()?;
        if self.surgery.rank == 0 || !(self.surgery.alpha > 0.0) {
            return Err(Error::Config("rank and alpha must be positive".into()));
        }
        self.ouro.validate()?;
        self.train.validate()?;
        if self.train.seq_len > self.model.max_seq {
            return Err(Error::Config(format!(
                "seq_len {} exceeds max_seq {}",
                self.train.seq_len, self.model.max_seq
            )));
        }
        if self.model.vocab != crate::data::BYTE_VOCAB {
            return Err(Error::Config("byte-level corpora need vocab=256".into()));
        }
        if self.eval_batches == 0 || self.log_every == 0 {
            return Err(Error::Config("eval_batches and log_every must be positive".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests;
