//! Byte-level corpora and batch sampling. Every byte is a token, so the
//! vocabulary is fixed at 256.

use std::fs;
use std::path::Path;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

pub const BYTE_VOCAB: usize = 256;

const HELDOUT_TEXT: &str = include_str!("../data/heldout.txt");

/// The twelve built-in evaluation passages.
pub fn heldout_passages() -> Vec<Vec<u8>> {
    HELDOUT_TEXT
        .split("\n\n")
        .map(|p| p.trim().as_bytes().to_vec())
        .filter(|p| !p.is_empty())
        .collect()
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ByteCorpus {
    pub train: Vec<u8>,
    pub heldout: Vec<Vec<u8>>,
}

impl ByteCorpus {
    /// Pairs training bytes with the built-in passages, rejecting any overlap.
    pub fn new(train: Vec<u8>) -> Result<Self> {
        Self::with_heldout(train, heldout_passages())
    }

    pub fn with_heldout(train: Vec<u8>, heldout: Vec<Vec<u8>>) -> Result<Self> {
        for (i, p) in heldout.iter().enumerate() {
            if !p.is_empty() && p.len() <= train.len() && train.windows(p.len()).any(|w| w == p.as_slice()) {
                return Err(Error::Config(format!("held-out passage {i} also appears in the training bytes")));
            }
        }
        Ok(Self { train, heldout })
    }

    pub fn synthetic(n_bytes: usize, seed: u64) -> Result<Self> {
        Self::new(synthetic_text(n_bytes, seed))
    }

    /// Reads a file, or every regular file of a directory concatenated in
    /// lexicographic filename order.
    pub fn from_path(path: &Path) -> Result<Self> {
        Self::new(read_bytes(path)?)
    }
}

pub fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    if !path.is_dir() {
        return Ok(fs::read(path)?);
    }
    let mut files: Vec<_> = fs::read_dir(path)?
        .collect::<std::io::Result<Vec<_>>>()?
        .into_iter()
        .filter(|e| e.file_type().map(|t| t.is_file()).unwrap_or(false))
        .map(|e| e.file_name())
        .collect();
    files.sort();
    let mut out = Vec::new();
    for f in files {
        out.extend(fs::read(path.join(f))?);
    }
    Ok(out)
}

const NOUNS: &[&str] = &[
    "river", "garden", "engine", "village", "teacher", "window", "harbor", "market", "forest", "letter",
    "signal", "bridge", "kitchen", "planet", "station", "record", "painter", "valley", "tower", "lantern",
    "farmer", "museum", "storm", "ladder", "island", "circuit", "pilot", "meadow", "compass", "orchard",
];
const ADJECTIVES: &[&str] = &[
    "quiet", "old", "bright", "narrow", "heavy", "silver", "careful", "distant", "small", "green",
    "broken", "early", "patient", "hollow", "warm", "steady", "curious", "plain",
];
const VERBS: &[&str] = &[
    "carries", "watches", "repairs", "follows", "paints", "measures", "finds", "builds", "crosses", "opens",
    "remembers", "guards", "counts", "lifts", "visits", "describes",
];
const PREPOSITIONS: &[&str] = &["near", "behind", "under", "beyond", "beside", "toward", "across", "inside"];
const NUMBERS: &[&str] = &["two", "three", "four", "seven", "twelve", "forty", "a hundred"];

fn noun_phrase(rng: &mut ChaCha8Rng, out: &mut String) {
    if rng.random_bool(0.2) {
        out.push_str(NUMBERS.choose(rng).expect("nonempty"));
        out.push(' ');
        out.push_str(ADJECTIVES.choose(rng).expect("nonempty"));
        out.push(' ');
        out.push_str(NOUNS.choose(rng).expect("nonempty"));
        out.push('s');
        return;
    }
    out.push_str("the ");
    if rng.random_bool(0.5) {
        out.push_str(ADJECTIVES.choose(rng).expect("nonempty"));
        out.push(' ');
    }
    out.push_str(NOUNS.choose(rng).expect("nonempty"));
}

/// Deterministic English-like filler built from a small grammar, at least `n_bytes` long.
pub fn synthetic_text(n_bytes: usize, seed: u64) -> Vec<u8> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut text = String::with_capacity(n_bytes + 256);
    while text.len() < n_bytes {
        let mut s = String::new();
        noun_phrase(&mut rng, &mut s);
        s.push(' ');
        s.push_str(VERBS.choose(&mut rng).expect("nonempty"));
        s.push(' ');
        noun_phrase(&mut rng, &mut s);
        if rng.random_bool(0.6) {
            s.push(' ');
            s.push_str(PREPOSITIONS.choose(&mut rng).expect("nonempty"));
            s.push(' ');
            noun_phrase(&mut rng, &mut s);
        }
        if rng.random_bool(0.25) {
            s.push_str(", and ");
            noun_phrase(&mut rng, &mut s);
            s.push(' ');
            s.push_str(VERBS.choose(&mut rng).expect("nonempty"));
            s.push_str(" it");
        }
        let mut chars = s.chars();
        if let Some(c) = chars.next() {
            text.extend(c.to_uppercase());
            text.push_str(chars.as_str());
        }
        text.push_str(if rng.random_bool(0.1) { "?" } else { "." });
        text.push_str(if rng.random_bool(0.15) { "\n\n" } else { " " });
    }
    text.into_bytes()
}

/// `batch` rows of `seq` inputs with next-byte targets.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Batch {
    pub inputs: Vec<usize>,
    pub targets: Vec<usize>,
    pub batch: usize,
    pub seq: usize,
    pub offsets: Vec<usize>,
}

impl Batch {
    /// Window starting at each offset: inputs `data[o..o+T]`, targets `data[o+1..o+T+1]`.
    pub fn at_offsets(data: &[u8], offsets: &[usize], seq: usize) -> Result<Self> {
        if seq == 0 || offsets.is_empty() {
            return Err(Error::Config("batch and sequence length must be positive".into()));
        }
        let mut inputs = Vec::with_capacity(offsets.len() * seq);
        let mut targets = Vec::with_capacity(offsets.len() * seq);
        for &o in offsets {
            if o + seq + 1 > data.len() {
                return Err(Error::Index { op: "batch offset", index: o + seq + 1, bound: data.len() + 1 });
            }
            inputs.extend(data[o..o + seq].iter().map(|&b| b as usize));
            targets.extend(data[o + 1..o + seq + 1].iter().map(|&b| b as usize));
        }
        Ok(Self {
            inputs,
            targets,
            batch: offsets.len(),
            seq,
            offsets: offsets.to_vec(),
        })
    }

    /// Next-byte pairs for one whole passage.
    pub fn passage(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 2 {
            return Err(Error::Config("passage needs at least two bytes".into()));
        }
        Self::at_offsets(bytes, &[0], bytes.len() - 1)
    }
}

/// Samples offsets uniformly from `[0, len − T − 1]`.
pub fn next_batch(data: &[u8], batch: usize, seq: usize, rng: &mut ChaCha8Rng) -> Result<Batch> {
    if data.len() <= seq + 1 {
        return Err(Error::Config(format!(
            "corpus of {} bytes is too small for sequence length {seq}",
            data.len()
        )));
    }
    if batch == 0 {
        return Err(Error::Config("batch must be positive".into()));
    }
    let hi = data.len() - seq - 1;
    let offsets: Vec<usize> = (0..batch).map(|_| rng.random_range(0..=hi)).collect();
    Batch::at_offsets(data, &offsets, seq)
}

/// A fixed set of batches drawn from its own seed, used to compare losses before and after training.
pub fn fixed_batches(data: &[u8], count: usize, batch: usize, seq: usize, seed: u64) -> Result<Vec<Batch>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count).map(|_| next_batch(data, batch, seq, &mut rng)).collect()
}
