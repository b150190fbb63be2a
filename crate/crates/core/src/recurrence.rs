//! Looped forward pass over a converted model: prelude, `N` modulated and
//! gated applications of the shared recurrent layer, coda.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::modulation::{self, ControllerDims, Deltas, LoraAdapters};
use crate::params::{Binder, ParamStore};
use crate::surgery::{coda_prefix, lora_name, prelude_prefix, ConvertedModel, SplitSpec, SurgeryConfig, RECURRENT_PREFIX};
use crate::tensor::{Element, Tape, Tensor, Var};
use crate::transformer::{embed, layer_forward, lm_head, LayerVars, ModelConfig, Target, Tokens, NORM_EPS};

pub const GATE_W: &str = "gate.W";
pub const GATE_B: &str = "gate.b";
pub const GATE_BIAS_INIT: f64 = -2.0;

pub fn stepnorm_name(t: usize) -> String {
    format!("stepnorm.{t}")
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    /// Input-conditioned controller, gated.
    Controller,
    /// Step-indexed table, gated.
    Static,
    /// Controller with the gate replaced by `h ← h_new`.
    NogateController,
    /// Prelude, one bare recurrent pass, coda. Nothing trainable.
    Baseline17,
}

impl Variant {
    pub const ALL: [Variant; 4] = [
        Variant::Controller,
        Variant::Static,
        Variant::NogateController,
        Variant::Baseline17,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Controller => "controller",
            Variant::Static => "static",
            Variant::NogateController => "nogate-controller",
            Variant::Baseline17 => "baseline17",
        }
    }

    pub fn gated(self) -> bool {
        matches!(self, Variant::Controller | Variant::Static)
    }

    pub fn uses_controller(self) -> bool {
        matches!(self, Variant::Controller | Variant::NogateController)
    }

    pub fn uses_step_norm(self) -> bool {
        self != Variant::Baseline17
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown variant `{s}`")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OuroborosConfig {
    pub variant: Variant,
    /// Recurrence depth `N`.
    pub depth: usize,
    pub n_max: usize,
    /// Controller width `s`.
    pub controller_width: usize,
}

impl OuroborosConfig {
    pub fn toy(variant: Variant, depth: usize) -> Self {
        Self {
            variant,
            depth,
            n_max: 16,
            controller_width: 32,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_max == 0 || self.controller_width == 0 {
            return Err(Error::Config("n_max and controller_width must be positive".into()));
        }
        check_depth(self.depth, self.n_max)?;
        if self.variant == Variant::Baseline17 && self.depth != 1 {
            return Err(Error::Config(format!("baseline17 runs at depth 1, got {}", self.depth)));
        }
        Ok(())
    }
}

fn check_depth(depth: usize, n_max: usize) -> Result<()> {
    if depth == 0 {
        return Err(Error::Contract("recurrence depth must be at least 1".into()));
    }
    if depth > n_max {
        return Err(Error::Config(format!("depth {depth} exceeds N_max {n_max}")));
    }
    Ok(())
}

/// `W_g [d × 2d]` at zero and `b_g` at −2 in every coordinate.
pub fn init_gate<T: Element>(store: &mut ParamStore<T>, d: usize) {
    store.insert(GATE_W, Tensor::zeros(&[d, 2 * d]), false);
    store.insert(GATE_B, Tensor::full(&[d], T::from_f64_lossy(GATE_BIAS_INIT)), false);
}

pub fn init_step_norms<T: Element>(store: &mut ParamStore<T>, d: usize, n_max: usize) {
    for t in 0..n_max {
        store.insert(stepnorm_name(t), Tensor::ones(&[d]), false);
    }
}

/// `g = σ(W_g [h_new; h_old] + b_g)`, output `g ⊙ h_new + (1 − g) ⊙ h_old`.
pub fn gated_mix<T: Element>(tape: &mut Tape<T>, h_new: Var, h_old: Var, w: Var, b: Var) -> Result<Var> {
    if tape.shape(h_new) != tape.shape(h_old) {
        return Err(Error::dim("gated_mix", tape.shape(h_new), tape.shape(h_old)));
    }
    let z = tape.concat(h_new, h_old)?;
    let pre = tape.linear(z, w)?;
    let pre = tape.add_bias(pre, b)?;
    let g = tape.sigmoid(pre);
    let ones = tape.constant(Tensor::ones(tape.shape(g)));
    let keep = tape.sub(ones, g)?;
    let a = tape.mul(g, h_new)?;
    let c = tape.mul(keep, h_old)?;
    tape.add(a, c)
}

/// Hidden states of one recurrence step.
#[derive(Clone, Copy, Debug)]
pub struct StepTrace {
    pub h_in: Var,
    /// Recurrent-layer output after the step norm.
    pub h_new: Var,
    pub h_out: Var,
}

#[derive(Clone, Debug)]
pub struct ForwardTrace {
    pub logits: Var,
    /// Prelude output `h^(0)`.
    pub h0: Var,
    /// State entering the coda `h^(N)`.
    pub h_final: Var,
    pub steps: Vec<StepTrace>,
}

#[derive(Clone, Debug, Default)]
pub struct ForwardOptions {
    /// Overrides the configured depth.
    pub depth: Option<usize>,
    /// Skips the modulation source and LoRA terms entirely.
    pub disable_lora: bool,
    /// Positions that take part in mean pooling; all by default.
    pub mask: Option<Vec<bool>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct OuroborosModel<T> {
    pub config: ModelConfig,
    pub surgery: SurgeryConfig,
    pub ouro: OuroborosConfig,
    pub params: ParamStore<T>,
}

/// Trainable tensors are exactly the controller or table, the gate and the step norms.
pub fn is_trainable_name(name: &str) -> bool {
    ["controller.", "static.", "gate.", "stepnorm."]
        .iter()
        .any(|p| name.starts_with(p))
}

impl<T: Element> OuroborosModel<T> {
    /// Adds the variant's trainable components to a converted model.
    pub fn build(converted: ConvertedModel<T>, ouro: OuroborosConfig, seed: u64) -> Result<Self> {
        ouro.validate()?;
        let ConvertedModel { config, surgery, mut params } = converted;
        let d = config.d_model;
        let dims = controller_dims(&config, &surgery, &ouro);
        match ouro.variant {
            Variant::Controller | Variant::NogateController => modulation::init_controller(&mut params, &dims, seed)?,
            Variant::Static => modulation::init_static_table(&mut params, ouro.n_max, surgery.rank),
            Variant::Baseline17 => {}
        }
        if ouro.variant.gated() {
            init_gate(&mut params, d);
        }
        if ouro.variant.uses_step_norm() {
            init_step_norms(&mut params, d, ouro.n_max);
        }
        Self::from_params(config, surgery, ouro, params)
    }

    /// Wraps a loaded store, setting frozen flags from the namespace and
    /// checking that every tensor the variant needs is present with the right shape.
    pub fn from_params(config: ModelConfig, surgery: SurgeryConfig, ouro: OuroborosConfig, mut params: ParamStore<T>) -> Result<Self> {
        config.validate()?;
        surgery.split.validate()?;
        ouro.validate()?;
        let expected = expected_shapes(&config, &surgery, &ouro);
        for (name, shape) in &expected {
            let t = params.get(name)?;
            if t.shape() != shape.as_slice() {
                return Err(Error::dim("OuroborosModel::from_params", t.shape(), shape));
            }
        }
        let names: Vec<String> = params.names().map(str::to_string).collect();
        for n in names {
            if !expected.iter().any(|(e, _)| *e == n) {
                return Err(Error::Config(format!("unexpected tensor `{n}` for variant {}", ouro.variant)));
            }
            params.set_frozen(&n, !is_trainable_name(&n))?;
        }
        Ok(Self { config, surgery, ouro, params })
    }

    pub fn controller_dims(&self) -> ControllerDims {
        controller_dims(&self.config, &self.surgery, &self.ouro)
    }

    pub fn scaling(&self) -> f64 {
        self.surgery.alpha / self.surgery.rank as f64
    }

    fn modulation(&self, tape: &mut Tape<T>, binder: &mut Binder<'_, T>, h: Var, t: usize, mask: &[bool]) -> Result<Deltas> {
        let batch = tape.shape(h)[0];
        match self.ouro.variant {
            Variant::Controller | Variant::NogateController => {
                let pooled = tape.mean_pool(h, mask)?;
                modulation::controller_forward(tape, binder, pooled, t)
            }
            Variant::Static => modulation::static_forward(tape, binder, t, batch),
            Variant::Baseline17 => Err(Error::Contract("baseline17 has no modulation source".into())),
        }
    }

    /// Records the forward pass: embed → prelude → N × {pool → δ →
    /// recurrent layer with LoRA → step norm → gate} → coda → head.
    pub fn forward(
        &self,
        tape: &mut Tape<T>,
        binder: &mut Binder<'_, T>,
        tokens: &Tokens<'_>,
        opts: &ForwardOptions,
    ) -> Result<ForwardTrace> {
        let depth = opts.depth.unwrap_or(self.ouro.depth);
        check_depth(depth, self.ouro.n_max)?;
        let variant = self.ouro.variant;
        if variant == Variant::Baseline17 && depth != 1 {
            return Err(Error::Config("baseline17 runs at depth 1".into()));
        }
        tokens.check_vocab(self.config.vocab)?;
        let all = vec![true; tokens.ids.len()];
        let mask = opts.mask.as_deref().unwrap_or(&all);

        let cfg = &self.config;
        let mut h = embed(tape, binder, tokens)?;
        for i in 0..self.surgery.split.prelude {
            let layer = LayerVars::bind(tape, binder, &prelude_prefix(i))?;
            h = layer_forward(tape, cfg, h, &layer, None)?;
        }
        let h0 = h;
        let rec = LayerVars::bind(tape, binder, RECURRENT_PREFIX)?;
        let gate = if variant.gated() {
            Some((binder.var(tape, GATE_W)?, binder.var(tape, GATE_B)?))
        } else {
            None
        };
        let eps = T::from_f64_lossy(NORM_EPS);
        let mut steps = Vec::with_capacity(depth);
        for t in 0..depth {
            let h_in = h;
            let hook = if opts.disable_lora || variant == Variant::Baseline17 {
                None
            } else {
                let deltas = self.modulation(tape, binder, h, t, mask)?;
                Some(LoraAdapters::bind(tape, binder, deltas, self.scaling())?)
            };
            let out = layer_forward(tape, cfg, h, &rec, hook.as_ref().map(|x| x as _))?;
            let h_new = if variant.uses_step_norm() {
                let gamma = binder.var(tape, &stepnorm_name(t))?;
                tape.rms_norm(out, gamma, eps)?
            } else {
                out
            };
            h = match gate {
                Some((w, b)) => gated_mix(tape, h_new, h, w, b)?,
                None => h_new,
            };
            steps.push(StepTrace { h_in, h_new, h_out: h });
        }
        let h_final = h;
        for j in 0..self.surgery.split.coda {
            let layer = LayerVars::bind(tape, binder, &coda_prefix(j))?;
            h = layer_forward(tape, cfg, h, &layer, None)?;
        }
        let logits = lm_head(tape, binder, h)?;
        Ok(ForwardTrace { logits, h0, h_final, steps })
    }

    pub fn logits(&self, tokens: &Tokens<'_>, opts: &ForwardOptions) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let mut binder = Binder::new(&self.params, false);
        let trace = self.forward(&mut tape, &mut binder, tokens, opts)?;
        Ok(tape.value(trace.logits).clone())
    }

    pub fn census(&self) -> Census {
        Census::of_store(&self.params)
    }
}

fn controller_dims(cfg: &ModelConfig, surgery: &SurgeryConfig, ouro: &OuroborosConfig) -> ControllerDims {
    ControllerDims {
        d_model: cfg.d_model,
        width: ouro.controller_width,
        rank: surgery.rank,
        n_max: ouro.n_max,
    }
}

/// Every tensor a variant carries, with its shape.
pub fn expected_shapes(cfg: &ModelConfig, surgery: &SurgeryConfig, ouro: &OuroborosConfig) -> Vec<(String, Vec<usize>)> {
    let d = cfg.d_model;
    let r = surgery.rank;
    let split = &surgery.split;
    let mut v: Vec<(String, Vec<usize>)> = vec![
        ("embed".into(), vec![cfg.vocab, d]),
        ("final_norm".into(), vec![d]),
        ("head".into(), vec![cfg.vocab, d]),
    ];
    let layer = |v: &mut Vec<(String, Vec<usize>)>, prefix: String| {
        for t in Target::ALL {
            let (o, i) = t.shape(cfg);
            v.push((format!("{prefix}.{}", t.name()), vec![o, i]));
        }
        v.push((format!("{prefix}.{}", crate::transformer::NORM_ATTN), vec![d]));
        v.push((format!("{prefix}.{}", crate::transformer::NORM_FFN), vec![d]));
    };
    for i in 0..split.prelude {
        layer(&mut v, prelude_prefix(i));
    }
    layer(&mut v, RECURRENT_PREFIX.to_string());
    for j in 0..split.coda {
        layer(&mut v, coda_prefix(j));
    }
    for t in Target::ALL {
        let (o, i) = t.shape(cfg);
        v.push((lora_name(t, 'A'), vec![r, i]));
        v.push((lora_name(t, 'B'), vec![o, r]));
    }
    if ouro.variant.uses_controller() {
        v.extend(controller_dims(cfg, surgery, ouro).shapes());
    }
    if ouro.variant == Variant::Static {
        v.push((modulation::STATIC_TABLE.into(), vec![ouro.n_max, modulation::K, r]));
    }
    if ouro.variant.gated() {
        v.push((GATE_W.into(), vec![d, 2 * d]));
        v.push((GATE_B.into(), vec![d]));
    }
    if ouro.variant.uses_step_norm() {
        v.extend((0..ouro.n_max).map(|t| (stepnorm_name(t), vec![d])));
    }
    v
}

/// Parameter counts grouped by component.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct CensusRow {
    pub group: &'static str,
    pub count: usize,
    pub trainable: bool,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct Census {
    pub rows: Vec<CensusRow>,
}

const GROUPS: [(&str, bool); 10] = [
    ("controller", true),
    ("static_table", true),
    ("gate_weights", true),
    ("gate_bias", true),
    ("step_norms", true),
    ("lora_bases", false),
    ("prelude", false),
    ("recurrent", false),
    ("coda", false),
    ("embeddings", false),
];

fn group_of(name: &str) -> &'static str {
    let head = name.split('.').next().unwrap_or("");
    match (head, name) {
        ("controller", _) => "controller",
        ("static", _) => "static_table",
        (_, GATE_W) => "gate_weights",
        (_, GATE_B) => "gate_bias",
        ("stepnorm", _) => "step_norms",
        ("lora", _) => "lora_bases",
        ("prelude", _) => "prelude",
        ("recurrent", _) => "recurrent",
        ("coda", _) => "coda",
        _ => "embeddings",
    }
}

impl Census {
    fn from_counts(counts: impl IntoIterator<Item = (&'static str, usize)>) -> Self {
        let mut rows: Vec<CensusRow> = GROUPS
            .iter()
            .map(|&(group, trainable)| CensusRow { group, count: 0, trainable })
            .collect();
        for (g, c) in counts {
            let row = rows.iter_mut().find(|r| r.group == g).expect("known group");
            row.count += c;
        }
        Self { rows }
    }

    pub fn of_store<T: Element>(store: &ParamStore<T>) -> Self {
        Self::from_counts(store.iter().map(|(n, p)| (group_of(n), p.tensor.numel())))
    }

    /// Counts from dimensions alone, without allocating any weights.
    pub fn analytic(cfg: &ModelConfig, surgery: &SurgeryConfig, ouro: &OuroborosConfig) -> Self {
        Self::from_counts(
            expected_shapes(cfg, surgery, ouro)
                .into_iter()
                .map(|(n, s)| (group_of(&n), s.iter().product::<usize>())),
        )
    }

    pub fn get(&self, group: &str) -> usize {
        self.rows.iter().find(|r| r.group == group).map_or(0, |r| r.count)
    }

    pub fn trainable_total(&self) -> usize {
        self.rows.iter().filter(|r| r.trainable).map(|r| r.count).sum()
    }

    pub fn frozen_total(&self) -> usize {
        self.rows.iter().filter(|r| !r.trainable).map(|r| r.count).sum()
    }

    pub fn render(&self) -> String {
        let mut out = String::from("component\tparams\ttrainable\n");
        for r in &self.rows {
            out.push_str(&format!("{}\t{}\t{}\n", r.group, r.count, if r.trainable { "yes" } else { "no" }));
        }
        out.push_str(&format!("trainable_total\t{}\tyes\n", self.trainable_total()));
        out.push_str(&format!("frozen_total\t{}\tno\n", self.frozen_total()));
        out
    }
}

/// Analytic census for the 36-layer, d=2048 base at r=32, s=128, N_max=64.
pub fn qwen25_3b_census(variant: Variant) -> Census {
    let surgery = SurgeryConfig {
        split: SplitSpec::qwen25_3b(),
        rank: 32,
        alpha: 16.0,
    };
    let ouro = OuroborosConfig {
        variant,
        depth: 1,
        n_max: 64,
        controller_width: 128,
    };
    Census::analytic(&ModelConfig::qwen25_3b(), &surgery, &ouro)
}
