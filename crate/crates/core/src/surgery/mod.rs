//! Prelude/Recurrent/Coda split of a trained base model and the frozen
//! low-rank bases distilled from the removed layers.
//!
//! For every projection of the recurrent layer the removed layers' residuals
//! against it are averaged, `Δ̄ = mean_l (W_l − W_R)`, and factorized by a
//! truncated SVD `Δ̄ ≈ U_r S_r V_rᵀ`. The bases are `A = V_rᵀ` and
//! `B = U_r S_r`; both are frozen.

pub mod svd;

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

pub use svd::{jacobi_eigen, truncated_svd, Matrix, Svd};

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::{Element, Tensor};
use crate::transformer::{layer_param_names, ModelConfig, Target, Transformer};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub n_layers: usize,
    /// Prelude is layers `[0, prelude)`.
    pub prelude: usize,
    /// Index of the looped layer.
    pub recurrent: usize,
    /// Coda is layers `[n_layers − coda, n_layers)`.
    pub coda: usize,
}

impl SplitSpec {
    pub fn new(n_layers: usize, prelude: usize, recurrent: usize, coda: usize) -> Result<Self> {
        let spec = Self {
            n_layers,
            prelude,
            recurrent,
            coda,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// 8-layer toy split: prelude {0,1}, recurrent 4, coda {6,7}, removed {2,3,5}.
    pub fn toy() -> Self {
        Self {
            n_layers: 8,
            prelude: 2,
            recurrent: 4,
            coda: 2,
        }
    }

    /// 36-layer split that keeps 17 layers: prelude 0–7, recurrent 18, coda 28–35.
    pub fn qwen25_3b() -> Self {
        Self {
            n_layers: 36,
            prelude: 8,
            recurrent: 18,
            coda: 8,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.prelude + self.coda >= self.n_layers {
            return Err(Error::Config(format!(
                "prelude {} + coda {} leaves no room for a recurrent layer in {} layers",
                self.prelude, self.coda, self.n_layers
            )));
        }
        if self.recurrent < self.prelude || self.recurrent >= self.n_layers - self.coda {
            return Err(Error::Config(format!(
                "recurrent layer {} must lie in [{}, {})",
                self.recurrent,
                self.prelude,
                self.n_layers - self.coda
            )));
        }
        Ok(())
    }

    pub fn coda_start(&self) -> usize {
        self.n_layers - self.coda
    }

    pub fn removed(&self) -> Vec<usize> {
        (self.prelude..self.coda_start())
            .filter(|&l| l != self.recurrent)
            .collect()
    }

    pub fn kept(&self) -> usize {
        self.prelude + 1 + self.coda
    }
}

/// `Δ̄ = (1/|removed|) Σ_{l ∈ removed} (W_l − W_R)` for one target, in f64.
pub fn average_residual<T: Element>(base: &Transformer<T>, spec: &SplitSpec, target: Target) -> Result<Matrix> {
    spec.validate()?;
    if spec.n_layers != base.config.n_layers {
        return Err(Error::Config(format!(
            "split is for {} layers but the model has {}",
            spec.n_layers, base.config.n_layers
        )));
    }
    let removed = spec.removed();
    if removed.is_empty() {
        return Err(Error::Config("split removes no layers; nothing to distill".into()));
    }
    let name = |l: usize| format!("{}.{}", Transformer::<T>::layer_prefix(l), target.name());
    let w_r = base.params.get(&name(spec.recurrent))?;
    let (rows, cols) = (w_r.shape()[0], w_r.shape()[1]);
    let mut acc = vec![0.0f64; rows * cols];
    for &l in &removed {
        let w_l = base.params.get(&name(l))?;
        if w_l.shape() != w_r.shape() {
            return Err(Error::dim("average_residual", w_l.shape(), w_r.shape()));
        }
        for ((a, x), y) in acc.iter_mut().zip(w_l.data()).zip(w_r.data()) {
            *a += x.as_f64() - y.as_f64();
        }
    }
    let n = removed.len() as f64;
    acc.iter_mut().for_each(|a| *a /= n);
    Matrix::from_vec(rows, cols, acc)
}

/// Frozen factors for one target: `A [r × in]`, `B [out × r]`.
#[derive(Clone, Debug, PartialEq)]
pub struct TargetBasis<T> {
    pub a: Tensor<T>,
    pub b: Tensor<T>,
    /// Number of leading rank slots backed by singular directions; the rest are zero padding.
    pub effective_rank: usize,
    pub singular_values: Vec<f64>,
    /// `‖Δ̄ − BA‖_F / ‖Δ̄‖_F` (zero when `Δ̄ = 0`).
    pub tail_energy: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LoraBasisSet<T> {
    pub rank: usize,
    pub alpha: f64,
    pub targets: Vec<(Target, TargetBasis<T>)>,
}

impl<T: Element> LoraBasisSet<T> {
    /// LoRA scaling `α / r`.
    pub fn scaling(&self) -> f64 {
        self.alpha / self.rank as f64
    }

    pub fn get(&self, target: Target) -> &TargetBasis<T> {
        &self.targets[target.index()].1
    }

    pub fn numel(&self) -> usize {
        self.targets.iter().map(|(_, b)| b.a.numel() + b.b.numel()).sum()
    }
}

/// Factorizes `Δ̄` into `A = V_rᵀ`, `B = U_r S_r`. When `rank` exceeds the
/// matrix's smaller extent the trailing slots are zero-padded.
pub fn factorize<T: Element>(delta: &Matrix, rank: usize) -> Result<TargetBasis<T>> {
    if rank == 0 {
        return Err(Error::Config("LoRA rank must be positive".into()));
    }
    let (out, inp) = (delta.rows, delta.cols);
    let eff = rank.min(out).min(inp);
    let svd = truncated_svd(delta, eff)?;
    let mut a = vec![T::zero(); rank * inp];
    let mut b = vec![T::zero(); out * rank];
    for j in 0..eff {
        for i in 0..inp {
            a[j * inp + i] = T::from_f64_lossy(svd.v.at(i, j));
        }
        for i in 0..out {
            b[i * rank + j] = T::from_f64_lossy(svd.u.at(i, j) * svd.s[j]);
        }
    }
    let norm = delta.frobenius();
    let tail = delta.sub(&svd.reconstruct()).frobenius();
    Ok(TargetBasis {
        a: Tensor::new(vec![rank, inp], a)?,
        b: Tensor::new(vec![out, rank], b)?,
        effective_rank: eff,
        singular_values: svd.s,
        tail_energy: if norm > 0.0 { tail / norm } else { 0.0 },
    })
}

pub fn build_bases<T: Element>(base: &Transformer<T>, spec: &SplitSpec, rank: usize, alpha: f64) -> Result<LoraBasisSet<T>> {
    if !(alpha.is_finite() && alpha > 0.0) {
        return Err(Error::Config(format!("alpha must be positive, got {alpha}")));
    }
    let mut targets = Vec::with_capacity(Target::ALL.len());
    for t in Target::ALL {
        let delta = average_residual(base, spec, t)?;
        targets.push((t, factorize(&delta, rank)?));
    }
    Ok(LoraBasisSet { rank, alpha, targets })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SurgeryConfig {
    pub split: SplitSpec,
    pub rank: usize,
    pub alpha: f64,
}

/// Base model reorganized into prelude / recurrent / coda with frozen bases.
/// Every tensor is frozen.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvertedModel<T> {
    pub config: ModelConfig,
    pub surgery: SurgeryConfig,
    pub params: ParamStore<T>,
}

pub fn prelude_prefix(i: usize) -> String {
    format!("prelude.{i}")
}

pub const RECURRENT_PREFIX: &str = "recurrent";

pub fn coda_prefix(j: usize) -> String {
    format!("coda.{j}")
}

pub fn lora_name(target: Target, factor: char) -> String {
    format!("lora.{}.{factor}", target.name())
}

/// Runs surgery on `base`. Returns the converted model and its manifest text.
pub fn convert<T: Element>(
    base: &Transformer<T>,
    surgery: &SurgeryConfig,
) -> Result<(ConvertedModel<T>, LoraBasisSet<T>)> {
    let spec = &surgery.split;
    spec.validate()?;
    let bases = build_bases(base, spec, surgery.rank, surgery.alpha)?;
    let mut params = ParamStore::new();
    for name in ["embed", "final_norm", "head"] {
        params.insert(name, base.params.get(name)?.clone(), true);
    }
    let mut copy_layer = |from: usize, to: &str| -> Result<()> {
        for p in layer_param_names() {
            let t = base.params.get(&format!("{}.{p}", Transformer::<T>::layer_prefix(from)))?;
            params.insert(format!("{to}.{p}"), t.clone(), true);
        }
        Ok(())
    };
    for i in 0..spec.prelude {
        copy_layer(i, &prelude_prefix(i))?;
    }
    copy_layer(spec.recurrent, RECURRENT_PREFIX)?;
    for j in 0..spec.coda {
        copy_layer(spec.coda_start() + j, &coda_prefix(j))?;
    }
    for (t, basis) in &bases.targets {
        params.insert(lora_name(*t, 'A'), basis.a.clone(), true);
        params.insert(lora_name(*t, 'B'), basis.b.clone(), true);
    }
    Ok((
        ConvertedModel {
            config: base.config.clone(),
            surgery: surgery.clone(),
            params,
        },
        bases,
    ))
}

/// Plain-text manifest: split, per-target effective rank and relative tail energy.
pub fn manifest<T: Element>(surgery: &SurgeryConfig, bases: &LoraBasisSet<T>) -> String {
    let spec = &surgery.split;
    let removed: Vec<String> = spec.removed().iter().map(|l| l.to_string()).collect();
    let mut out = String::new();
    let _ = writeln!(out, "n_layers={}", spec.n_layers);
    let _ = writeln!(out, "prelude={}", spec.prelude);
    let _ = writeln!(out, "recurrent={}", spec.recurrent);
    let _ = writeln!(out, "coda={}", spec.coda);
    let _ = writeln!(out, "removed={}", removed.join(","));
    let _ = writeln!(out, "kept={}", spec.kept());
    let _ = writeln!(out, "rank={}", bases.rank);
    let _ = writeln!(out, "alpha={}", bases.alpha);
    let _ = writeln!(out, "scaling={}", bases.scaling());
    let _ = writeln!(out, "basis_params={}", bases.numel());
    let _ = writeln!(out, "target\trank\ttail_energy\ttop_singular_value");
    for (t, b) in &bases.targets {
        let top = b.singular_values.first().copied().unwrap_or(0.0);
        let _ = writeln!(out, "{}\t{}\t{:.6e}\t{:.6e}", t.name(), b.effective_rank, b.tail_energy, top);
    }
    out
}

#[cfg(test)]
mod tests;
