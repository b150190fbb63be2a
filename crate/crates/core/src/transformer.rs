//! Decoder-only base transformer: RMSNorm pre-norms, causal grouped-query
//! attention with rotary positions, SwiGLU feed-forward, untied LM head.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{Binder, ParamStore};
use crate::tensor::{Element, Tape, Tensor, Var};

/// RMSNorm epsilon used by every norm in the model.
pub const NORM_EPS: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub n_kv_heads: usize,
    pub ffn_dim: usize,
    pub vocab: usize,
    pub max_seq: usize,
    pub rope_theta: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::toy()
    }
}

impl ModelConfig {
    /// Desk-scale default: 8 layers, d=64, 4 query heads over 2 KV heads, byte vocabulary.
    pub fn toy() -> Self {
        Self {
            n_layers: 8,
            d_model: 64,
            n_heads: 4,
            n_kv_heads: 2,
            ffn_dim: 256,
            vocab: 256,
            max_seq: 256,
            rope_theta: 10_000.0,
        }
    }

    /// Qwen2.5-3B extents, for parameter accounting only.
    pub fn qwen25_3b() -> Self {
        Self {
            n_layers: 36,
            d_model: 2048,
            n_heads: 16,
            n_kv_heads: 2,
            ffn_dim: 11_008,
            vocab: 151_936,
            max_seq: 2048,
            rope_theta: 1_000_000.0,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads.max(1)
    }

    pub fn kv_dim(&self) -> usize {
        self.n_kv_heads * self.head_dim()
    }

    pub fn validate(&self) -> Result<()> {
        let extents = [
            ("n_layers", self.n_layers),
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("n_kv_heads", self.n_kv_heads),
            ("ffn_dim", self.ffn_dim),
            ("vocab", self.vocab),
            ("max_seq", self.max_seq),
        ];
        if let Some((name, _)) = extents.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        if !self.n_heads.is_multiple_of(self.n_kv_heads) {
            return Err(Error::Config(format!(
                "n_heads {} is not divisible by n_kv_heads {}",
                self.n_heads, self.n_kv_heads
            )));
        }
        if self.head_dim() * self.n_heads != self.d_model {
            return Err(Error::Config(format!(
                "d_model {} is not n_heads {} x head_dim",
                self.d_model, self.n_heads
            )));
        }
        if !self.head_dim().is_multiple_of(2) {
            return Err(Error::Config(format!(
                "rotary embedding needs an even head_dim, got {}",
                self.head_dim()
            )));
        }
        if !(self.rope_theta > 0.0) {
            return Err(Error::Config("rope_theta must be positive".into()));
        }
        Ok(())
    }
}

/// The seven projections of a layer that carry LoRA bases.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Target {
    Q,
    K,
    V,
    O,
    Gate,
    Up,
    Down,
}

impl Target {
    pub const ALL: [Target; 7] = [
        Target::Q,
        Target::K,
        Target::V,
        Target::O,
        Target::Gate,
        Target::Up,
        Target::Down,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Target::Q => "q",
            Target::K => "k",
            Target::V => "v",
            Target::O => "o",
            Target::Gate => "gate",
            Target::Up => "up",
            Target::Down => "down",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }

    /// `(out, in)` extents of the projection's weight.
    pub fn shape(self, cfg: &ModelConfig) -> (usize, usize) {
        let d = cfg.d_model;
        match self {
            Target::Q | Target::O => (d, d),
            Target::K | Target::V => (cfg.kv_dim(), d),
            Target::Gate | Target::Up => (cfg.ffn_dim, d),
            Target::Down => (d, cfg.ffn_dim),
        }
    }
}

pub const NORM_ATTN: &str = "norm_attn";
pub const NORM_FFN: &str = "norm_ffn";

/// Parameter names of one layer, relative to its prefix.
pub fn layer_param_names() -> impl Iterator<Item = &'static str> {
    Target::ALL
        .iter()
        .map(|t| t.name())
        .chain([NORM_ATTN, NORM_FFN])
}

pub fn layer_numel(cfg: &ModelConfig) -> usize {
    Target::ALL
        .iter()
        .map(|t| {
            let (o, i) = t.shape(cfg);
            o * i
        })
        .sum::<usize>()
        + 2 * cfg.d_model
}

/// Random layer weights: N(0, 0.02) inputs, output projections scaled by 1/sqrt(2L).
pub fn init_layer<T: Element>(
    store: &mut ParamStore<T>,
    prefix: &str,
    cfg: &ModelConfig,
    rng: &mut ChaCha8Rng,
    frozen: bool,
) {
    let std = 0.02;
    let out_std = std / (2.0 * cfg.n_layers as f64).sqrt();
    for t in Target::ALL {
        let (o, i) = t.shape(cfg);
        let s = if matches!(t, Target::O | Target::Down) { out_std } else { std };
        store.insert(format!("{prefix}.{}", t.name()), Tensor::randn(&[o, i], s, rng), frozen);
    }
    store.insert(format!("{prefix}.{NORM_ATTN}"), Tensor::ones(&[cfg.d_model]), frozen);
    store.insert(format!("{prefix}.{NORM_FFN}"), Tensor::ones(&[cfg.d_model]), frozen);
}

/// Tape handles for one layer's weights.
#[derive(Clone, Copy, Debug)]
pub struct LayerVars {
    pub proj: [Var; 7],
    pub norm_attn: Var,
    pub norm_ffn: Var,
}

impl LayerVars {
    pub fn bind<T: Element>(tape: &mut Tape<T>, binder: &mut Binder<'_, T>, prefix: &str) -> Result<Self> {
        let mut proj = Vec::with_capacity(7);
        for t in Target::ALL {
            proj.push(binder.var(tape, &format!("{prefix}.{}", t.name()))?);
        }
        Ok(Self {
            proj: proj.try_into().expect("seven targets"),
            norm_attn: binder.var(tape, &format!("{prefix}.{NORM_ATTN}"))?,
            norm_ffn: binder.var(tape, &format!("{prefix}.{NORM_FFN}"))?,
        })
    }
}

/// Adds a term to a projection's output (used for LoRA modulation).
pub trait ProjectionHook<T: Element> {
    fn apply(&self, tape: &mut Tape<T>, target: Target, input: Var, projected: Var) -> Result<Var>;
}

fn project<T: Element>(
    tape: &mut Tape<T>,
    layer: &LayerVars,
    target: Target,
    x: Var,
    hook: Option<&dyn ProjectionHook<T>>,
) -> Result<Var> {
    let y = tape.linear(x, layer.proj[target.index()])?;
    match hook {
        Some(h) => h.apply(tape, target, x, y),
        None => Ok(y),
    }
}

/// One pre-norm decoder block over `h[B×T×d]`:
/// `h + Attn(norm(h))`, then `+ FFN(norm(·))`.
pub fn layer_forward<T: Element>(
    tape: &mut Tape<T>,
    cfg: &ModelConfig,
    h: Var,
    layer: &LayerVars,
    hook: Option<&dyn ProjectionHook<T>>,
) -> Result<Var> {
    let shape = tape.shape(h).to_vec();
    if shape.len() != 3 || shape[2] != cfg.d_model {
        return Err(Error::dim("layer_forward", &shape, &[cfg.d_model]));
    }
    if shape[1] > cfg.max_seq {
        return Err(Error::Config(format!(
            "sequence length {} exceeds max_seq {}",
            shape[1], cfg.max_seq
        )));
    }
    let eps = T::from_f64_lossy(NORM_EPS);
    let x = tape.rms_norm(h, layer.norm_attn, eps)?;
    let q = project(tape, layer, Target::Q, x, hook)?;
    let k = project(tape, layer, Target::K, x, hook)?;
    let v = project(tape, layer, Target::V, x, hook)?;
    let q = tape.rope(q, cfg.n_heads, cfg.rope_theta)?;
    let k = tape.rope(k, cfg.n_kv_heads, cfg.rope_theta)?;
    let a = tape.attention(q, k, v, cfg.n_heads, cfg.n_kv_heads)?;
    let o = project(tape, layer, Target::O, a, hook)?;
    let h = tape.add(h, o)?;

    let x = tape.rms_norm(h, layer.norm_ffn, eps)?;
    let g = project(tape, layer, Target::Gate, x, hook)?;
    let u = project(tape, layer, Target::Up, x, hook)?;
    let g = tape.silu(g);
    let m = tape.mul(g, u)?;
    let down = project(tape, layer, Target::Down, m, hook)?;
    tape.add(h, down)
}

/// Token ids for one batch: `batch` rows of `seq` ids each, row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Tokens<'a> {
    pub ids: &'a [usize],
    pub batch: usize,
}

impl<'a> Tokens<'a> {
    pub fn new(ids: &'a [usize], batch: usize) -> Result<Self> {
        if batch == 0 || ids.is_empty() || !ids.len().is_multiple_of(batch) {
            return Err(Error::dim("tokens", &[ids.len()], &[batch]));
        }
        Ok(Self { ids, batch })
    }

    pub fn seq(&self) -> usize {
        self.ids.len() / self.batch
    }

    pub fn check_vocab(&self, vocab: usize) -> Result<()> {
        match self.ids.iter().find(|&&t| t >= vocab) {
            Some(&bad) => Err(Error::Index { op: "tokens", index: bad, bound: vocab }),
            None => Ok(()),
        }
    }
}

/// Embedding lookup for the shared token table.
pub fn embed<T: Element>(tape: &mut Tape<T>, binder: &mut Binder<'_, T>, tokens: &Tokens<'_>) -> Result<Var> {
    let table = binder.var(tape, "embed")?;
    tape.embedding(table, tokens.ids, tokens.batch)
}

/// Final norm and LM head.
pub fn lm_head<T: Element>(tape: &mut Tape<T>, binder: &mut Binder<'_, T>, h: Var) -> Result<Var> {
    let gamma = binder.var(tape, "final_norm")?;
    let x = tape.rms_norm(h, gamma, T::from_f64_lossy(NORM_EPS))?;
    let head = binder.var(tape, "head")?;
    tape.linear(x, head)
}

pub fn init_embeddings<T: Element>(store: &mut ParamStore<T>, cfg: &ModelConfig, rng: &mut ChaCha8Rng, frozen: bool) {
    store.insert("embed", Tensor::randn(&[cfg.vocab, cfg.d_model], 0.02, rng), frozen);
    store.insert("final_norm", Tensor::ones(&[cfg.d_model]), frozen);
    store.insert("head", Tensor::randn(&[cfg.vocab, cfg.d_model], 0.02, rng), frozen);
}

/// Dense base model with layers named `layers.{i}.*`.
#[derive(Clone, Debug, PartialEq)]
pub struct Transformer<T> {
    pub config: ModelConfig,
    pub params: ParamStore<T>,
}

impl<T: Element> Transformer<T> {
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        init_embeddings(&mut params, &config, &mut rng, false);
        for i in 0..config.n_layers {
            init_layer(&mut params, &format!("layers.{i}"), &config, &mut rng, false);
        }
        Ok(Self { config, params })
    }

    /// Wraps an existing store after checking every expected tensor is present with the right shape.
    pub fn from_params(config: ModelConfig, params: ParamStore<T>) -> Result<Self> {
        config.validate()?;
        let d = config.d_model;
        let mut expect: Vec<(String, Vec<usize>)> = vec![
            ("embed".into(), vec![config.vocab, d]),
            ("final_norm".into(), vec![d]),
            ("head".into(), vec![config.vocab, d]),
        ];
        for i in 0..config.n_layers {
            for t in Target::ALL {
                let (o, inp) = t.shape(&config);
                expect.push((format!("layers.{i}.{}", t.name()), vec![o, inp]));
            }
            expect.push((format!("layers.{i}.{NORM_ATTN}"), vec![d]));
            expect.push((format!("layers.{i}.{NORM_FFN}"), vec![d]));
        }
        for (name, shape) in expect {
            let t = params.get(&name)?;
            if t.shape() != shape.as_slice() {
                return Err(Error::dim("Transformer::from_params", t.shape(), &shape));
            }
        }
        Ok(Self { config, params })
    }

    pub fn layer_prefix(i: usize) -> String {
        format!("layers.{i}")
    }

    /// Records the forward pass and returns the logits `[B×T×V]`.
    pub fn forward(&self, tape: &mut Tape<T>, binder: &mut Binder<'_, T>, tokens: &Tokens<'_>) -> Result<Var> {
        tokens.check_vocab(self.config.vocab)?;
        let mut h = embed(tape, binder, tokens)?;
        for i in 0..self.config.n_layers {
            let layer = LayerVars::bind(tape, binder, &Self::layer_prefix(i))?;
            h = layer_forward(tape, &self.config, h, &layer, None)?;
        }
        lm_head(tape, binder, h)
    }

    /// Logits without gradient tracking.
    pub fn logits(&self, tokens: &Tokens<'_>) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let mut binder = Binder::new(&self.params, false);
        let out = self.forward(&mut tape, &mut binder, tokens)?;
        Ok(tape.value(out).clone())
    }
}

/// Mean next-token cross-entropy over every position.
pub fn next_token_loss<T: Element>(tape: &mut Tape<T>, logits: Var, targets: &[usize]) -> Result<Var> {
    let keep = vec![true; targets.len()];
    tape.cross_entropy(logits, targets, &keep)
}
