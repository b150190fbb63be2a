//! Per-step diagonal modulation of the frozen low-rank bases.
//!
//! A modulation source yields one `δ_k ∈ ℝ^r` per example and target. The
//! update to target `k` is `(α/r) · B_k diag(δ_k) A_k`, applied in factored
//! form so that `ΔW` is never built.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{Binder, ParamStore};
use crate::surgery::lora_name;
use crate::tensor::{Element, Tape, Tensor, Var};
use crate::transformer::{ProjectionHook, Target};

/// Number of modulated projections.
pub const K: usize = 7;

pub const PROJ: &str = "controller.proj";
pub const STYLE1: &str = "controller.style1";
pub const STYLE2: &str = "controller.style2";
pub const STEP_TABLE: &str = "controller.step_table";
pub const STATIC_TABLE: &str = "static.table";

pub fn head_name(k: usize) -> String {
    format!("controller.head.{k}")
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ControllerDims {
    pub d_model: usize,
    /// Controller width `s`.
    pub width: usize,
    pub rank: usize,
    pub n_max: usize,
}

impl ControllerDims {
    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.width == 0 || self.rank == 0 || self.n_max == 0 {
            return Err(Error::Config(format!("controller dims must be positive: {self:?}")));
        }
        Ok(())
    }

    /// `(name, shape)` of every controller tensor.
    pub fn shapes(&self) -> Vec<(String, Vec<usize>)> {
        let (d, s, r) = (self.d_model, self.width, self.rank);
        let mut v = vec![
            (format!("{PROJ}.W"), vec![2 * s, d]),
            (format!("{PROJ}.b"), vec![2 * s]),
            (format!("{STYLE1}.W"), vec![2 * s, 3 * s]),
            (format!("{STYLE1}.b"), vec![2 * s]),
            (format!("{STYLE2}.W"), vec![s, 2 * s]),
            (format!("{STYLE2}.b"), vec![s]),
        ];
        v.extend((0..K).map(|k| (head_name(k), vec![r, s])));
        v.push((STEP_TABLE.to_string(), vec![self.n_max, s]));
        v
    }

    pub fn numel(&self) -> usize {
        self.shapes().iter().map(|(_, s)| s.iter().product::<usize>()).sum()
    }
}

/// Inserts freshly initialized, trainable controller parameters. Linear
/// weights are `N(0, 1/fan_in)`; biases, heads and step embeddings start at zero.
pub fn init_controller<T: Element>(store: &mut ParamStore<T>, dims: &ControllerDims, seed: u64) -> Result<()> {
    dims.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for (name, shape) in dims.shapes() {
        let t = if name.ends_with(".W") {
            Tensor::randn(&shape, 1.0 / (shape[1] as f64).sqrt(), &mut rng)
        } else {
            Tensor::zeros(&shape)
        };
        store.insert(name, t, false);
    }
    Ok(())
}

/// Zero-initialized `[N_max × K × r]` table of per-step diagonals.
pub fn init_static_table<T: Element>(store: &mut ParamStore<T>, n_max: usize, rank: usize) {
    store.insert(STATIC_TABLE, Tensor::zeros(&[n_max, K, rank]), false);
}

/// One `[B × r]` diagonal per target, in [`Target::ALL`] order.
#[derive(Clone, Copy, Debug)]
pub struct Deltas(pub [Var; K]);

fn check_step(t: usize, n_max: usize) -> Result<()> {
    if t >= n_max {
        return Err(Error::Config(format!("step {t} is outside the step table (N_max = {n_max})")));
    }
    Ok(())
}

fn affine<T: Element>(tape: &mut Tape<T>, binder: &mut Binder<'_, T>, x: Var, prefix: &str) -> Result<Var> {
    let w = binder.var(tape, &format!("{prefix}.W"))?;
    let b = binder.var(tape, &format!("{prefix}.b"))?;
    let y = tape.linear(x, w)?;
    tape.add_bias(y, b)
}

/// `δ_k = W_k · StyleNet([SiLU(Proj h̄); e_t])` for `h̄ [B × d]`.
pub fn controller_forward<T: Element>(
    tape: &mut Tape<T>,
    binder: &mut Binder<'_, T>,
    h_bar: Var,
    t: usize,
) -> Result<Deltas> {
    let table = binder.var(tape, STEP_TABLE)?;
    check_step(t, tape.shape(table)[0])?;
    let batch = match tape.shape(h_bar) {
        [b, _] => *b,
        s => return Err(Error::dim("controller_forward", s, &[0, 0])),
    };
    let p = affine(tape, binder, h_bar, PROJ)?;
    let p = tape.silu(p);
    let e = tape.select_row(table, t)?;
    let e = tape.broadcast_rows(e, batch)?;
    let c = tape.concat(p, e)?;
    let z = affine(tape, binder, c, STYLE1)?;
    let z = tape.silu(z);
    let z = affine(tape, binder, z, STYLE2)?;
    let mut out = Vec::with_capacity(K);
    for k in 0..K {
        let w = binder.var(tape, &head_name(k))?;
        out.push(tape.linear(z, w)?);
    }
    Ok(Deltas(out.try_into().expect("K heads")))
}

/// Row `t` of the static table, broadcast over the batch.
pub fn static_forward<T: Element>(
    tape: &mut Tape<T>,
    binder: &mut Binder<'_, T>,
    t: usize,
    batch: usize,
) -> Result<Deltas> {
    let table = binder.var(tape, STATIC_TABLE)?;
    let (n_max, k, r) = match tape.shape(table) {
        [n, k, r] => (*n, *k, *r),
        s => return Err(Error::dim("static_forward", s, &[0, K, 0])),
    };
    check_step(t, n_max)?;
    let flat = tape.reshape(table, &[n_max * k, r])?;
    let mut out = Vec::with_capacity(K);
    for j in 0..K {
        let row = tape.select_row(flat, t * k + j)?;
        out.push(tape.broadcast_rows(row, batch)?);
    }
    Ok(Deltas(out.try_into().expect("K rows")))
}

/// Additive LoRA term `scale · ((x Aᵀ) ⊙ δ) Bᵀ` for `x [B × T × in]`,
/// `A [r × in]`, `B [out × r]`, `δ [B × r]`.
pub fn lora_apply<T: Element>(tape: &mut Tape<T>, x: Var, a: Var, b: Var, delta: Var, scale: T) -> Result<Var> {
    let (sa, sb, sd) = (tape.shape(a).to_vec(), tape.shape(b).to_vec(), tape.shape(delta).to_vec());
    if sa.len() != 2 || sb.len() != 2 || sb[1] != sa[0] || sd.len() != 2 || sd[1] != sa[0] {
        return Err(Error::dim("lora_apply", &sa, &sd));
    }
    let u = tape.linear(x, a)?;
    let u = tape.mul_seq(u, delta)?;
    let y = tape.linear(u, b)?;
    Ok(tape.scale(y, scale))
}

/// Bound factors and diagonals for one recurrence step.
pub struct LoraAdapters<T> {
    pub a: [Var; K],
    pub b: [Var; K],
    pub deltas: Deltas,
    pub scale: T,
}

impl<T: Element> LoraAdapters<T> {
    pub fn bind(tape: &mut Tape<T>, binder: &mut Binder<'_, T>, deltas: Deltas, scale: f64) -> Result<Self> {
        let mut a = Vec::with_capacity(K);
        let mut b = Vec::with_capacity(K);
        for t in Target::ALL {
            a.push(binder.var(tape, &lora_name(t, 'A'))?);
            b.push(binder.var(tape, &lora_name(t, 'B'))?);
        }
        Ok(Self {
            a: a.try_into().expect("K"),
            b: b.try_into().expect("K"),
            deltas,
            scale: T::from_f64_lossy(scale),
        })
    }
}

impl<T: Element> ProjectionHook<T> for LoraAdapters<T> {
    fn apply(&self, tape: &mut Tape<T>, target: Target, input: Var, projected: Var) -> Result<Var> {
        let k = target.index();
        let extra = lora_apply(tape, input, self.a[k], self.b[k], self.deltas.0[k], self.scale)?;
        tape.add(projected, extra)
    }
}
