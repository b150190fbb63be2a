//! Optimizer, schedule, clipping, the training loop and the finite-difference checker.

use std::f64::consts::PI;
use std::time::Instant;

use indexmap::IndexMap;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{next_batch, Batch};
use crate::error::{Error, Result};
use crate::params::{Binder, GradMap, ParamStore};
use crate::recurrence::{is_trainable_name, ForwardOptions, OuroborosModel};
use crate::tensor::{Element, Tape, Tensor, Var};
use crate::transformer::{next_token_loss, Tokens, Transformer};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr_peak: f64,
    /// Cosine floor as a fraction of `lr_peak`.
    pub lr_min_ratio: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub clip_norm: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
    /// Micro-batch size.
    pub batch: usize,
    /// Micro-batches per optimizer step.
    pub accum: usize,
    pub seq_len: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr_peak: 3e-4,
            lr_min_ratio: 0.1,
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
            weight_decay: 0.05,
            clip_norm: 1.0,
            warmup_steps: 100,
            total_steps: 2000,
            batch: 2,
            accum: 16,
            seq_len: 256,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if !(self.lr_peak > 0.0 && self.lr_peak.is_finite()) {
            return bad("lr must be positive");
        }
        if !(0.0..=1.0).contains(&self.lr_min_ratio) {
            return bad("lr_min_ratio must lie in [0, 1]");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("betas must lie in [0, 1)");
        }
        if !(self.eps > 0.0) || self.weight_decay < 0.0 || !(self.clip_norm > 0.0) {
            return bad("eps and clip_norm must be positive, weight_decay non-negative");
        }
        if self.batch == 0 || self.accum == 0 || self.seq_len == 0 {
            return bad("batch, accum and seq_len must be positive");
        }
        if self.total_steps > 0 && self.warmup_steps >= self.total_steps {
            return Err(Error::Config(format!(
                "warmup_steps {} must be below total_steps {}",
                self.warmup_steps, self.total_steps
            )));
        }
        Ok(())
    }

    pub fn lr_min(&self) -> f64 {
        self.lr_peak * self.lr_min_ratio
    }
}

/// Linear warmup from 0, then cosine decay to `lr_min`; clamped past the end.
pub fn lr_at(step: usize, cfg: &TrainConfig) -> f64 {
    let (peak, floor) = (cfg.lr_peak, cfg.lr_min());
    if step < cfg.warmup_steps {
        return peak * step as f64 / cfg.warmup_steps as f64;
    }
    let span = cfg.total_steps.saturating_sub(cfg.warmup_steps);
    if span == 0 {
        return peak;
    }
    let p = ((step - cfg.warmup_steps) as f64 / span as f64).min(1.0);
    floor + 0.5 * (peak - floor) * (1.0 + (PI * p).cos())
}

/// Global L2 norm of all gradients, in f64.
pub fn global_norm<T: Element>(grads: &GradMap<T>) -> f64 {
    grads.values().map(|g| g.sum_sq()).sum::<f64>().sqrt()
}

/// Rescales all gradients so their joint norm is at most `max_norm`. Returns the pre-clip norm.
pub fn clip_global_norm<T: Element>(grads: &mut GradMap<T>, max_norm: f64) -> Result<f64> {
    let norm = global_norm(grads);
    if !norm.is_finite() {
        let name = grads
            .iter()
            .find(|(_, g)| !g.all_finite())
            .map_or("?", |(n, _)| n.as_str());
        return Err(Error::NonFinite {
            step: 0,
            what: format!("gradient of `{name}`"),
        });
    }
    if norm > max_norm {
        let s = T::from_f64_lossy(max_norm / norm);
        for g in grads.values_mut() {
            g.data_mut().iter_mut().for_each(|x| *x = *x * s);
        }
    }
    Ok(norm)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamHyper {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl From<&TrainConfig> for AdamHyper {
    fn from(c: &TrainConfig) -> Self {
        Self {
            beta1: c.beta1,
            beta2: c.beta2,
            eps: c.eps,
            weight_decay: c.weight_decay,
        }
    }
}

/// AdamW with bias correction and decoupled weight decay. Moments are kept in `T`;
/// each element update is evaluated in f64.
#[derive(Clone, Debug, Default)]
pub struct AdamW<T> {
    pub step: u64,
    moments: IndexMap<String, (Vec<T>, Vec<T>)>,
}

impl<T: Element> AdamW<T> {
    pub fn new() -> Self {
        Self {
            step: 0,
            moments: IndexMap::new(),
        }
    }

    pub fn moments(&self, name: &str) -> Option<(&[T], &[T])> {
        self.moments.get(name).map(|(m, v)| (m.as_slice(), v.as_slice()))
    }

    /// Updates every parameter that has a gradient. A gradient on a frozen
    /// tensor is a hard error and leaves the store untouched.
    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &GradMap<T>, lr: f64, hp: &AdamHyper) -> Result<()> {
        for (name, g) in grads {
            let p = store.param(name)?;
            if p.frozen {
                return Err(Error::FreezingViolation(name.clone()));
            }
            if p.tensor.shape() != g.shape() {
                return Err(Error::dim("adamw_step", p.tensor.shape(), g.shape()));
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - hp.beta1.powi(t);
        let bc2 = 1.0 - hp.beta2.powi(t);
        for (name, g) in grads {
            let n = g.numel();
            let (m, v) = self
                .moments
                .entry(name.clone())
                .or_insert_with(|| (vec![T::zero(); n], vec![T::zero(); n]));
            let p = store.get_mut(name)?;
            for (((pi, mi), vi), &gi) in p.data_mut().iter_mut().zip(m.iter_mut()).zip(v.iter_mut()).zip(g.data()) {
                let gi = gi.as_f64();
                let m1 = hp.beta1 * mi.as_f64() + (1.0 - hp.beta1) * gi;
                let v1 = hp.beta2 * vi.as_f64() + (1.0 - hp.beta2) * gi * gi;
                let m_hat = m1 / bc1;
                let v_hat = v1 / bc2;
                let old = pi.as_f64();
                let new = old - lr * m_hat / (v_hat.sqrt() + hp.eps) - lr * hp.weight_decay * old;
                *mi = T::from_f64_lossy(m1);
                *vi = T::from_f64_lossy(v1);
                *pi = T::from_f64_lossy(new);
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Base,
    Ouroboros,
}

/// A model the loop can optimize: a named store plus a scalar loss.
pub trait Trainable<T: Element> {
    fn phase(&self) -> Phase;
    fn params(&self) -> &ParamStore<T>;
    fn params_mut(&mut self) -> &mut ParamStore<T>;
    fn loss(&self, tape: &mut Tape<T>, binder: &mut Binder<'_, T>, batch: &Batch) -> Result<Var>;
}

impl<T: Element> Trainable<T> for Transformer<T> {
    fn phase(&self) -> Phase {
        Phase::Base
    }

    fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    fn loss(&self, tape: &mut Tape<T>, binder: &mut Binder<'_, T>, batch: &Batch) -> Result<Var> {
        let logits = self.forward(tape, binder, &Tokens::new(&batch.inputs, batch.batch)?)?;
        next_token_loss(tape, logits, &batch.targets)
    }
}

impl<T: Element> Trainable<T> for OuroborosModel<T> {
    fn phase(&self) -> Phase {
        Phase::Ouroboros
    }

    fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    fn loss(&self, tape: &mut Tape<T>, binder: &mut Binder<'_, T>, batch: &Batch) -> Result<Var> {
        let tokens = Tokens::new(&batch.inputs, batch.batch)?;
        let trace = self.forward(tape, binder, &tokens, &ForwardOptions::default())?;
        next_token_loss(tape, trace.logits, &batch.targets)
    }
}

/// Loss and name-keyed gradients for one batch.
pub fn loss_and_grads<T: Element, M: Trainable<T>>(model: &M, batch: &Batch) -> Result<(f64, GradMap<T>)> {
    let mut tape = Tape::new();
    let mut binder = Binder::new(model.params(), true);
    let loss = model.loss(&mut tape, &mut binder, batch)?;
    let value = tape.value(loss).item().as_f64();
    let grads = tape.backward(loss)?;
    Ok((value, binder.gradients(&grads)))
}

pub fn loss_only<T: Element, M: Trainable<T>>(model: &M, batch: &Batch) -> Result<f64> {
    let mut tape = Tape::new();
    let mut binder = Binder::new(model.params(), false);
    let loss = model.loss(&mut tape, &mut binder, batch)?;
    Ok(tape.value(loss).item().as_f64())
}

/// Mean loss over a fixed list of batches.
pub fn mean_loss<T: Element, M: Trainable<T>>(model: &M, batches: &[Batch]) -> Result<f64> {
    if batches.is_empty() {
        return Err(Error::Config("no batches to evaluate".into()));
    }
    let mut total = 0.0;
    for b in batches {
        total += loss_only(model, b)?;
    }
    Ok(total / batches.len() as f64)
}

/// One logged optimizer step. `loss` is measured before the update.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
    pub grad_norm: f64,
    pub wall_ms: u64,
}

impl LogRow {
    pub const HEADER: &'static str = "step\tlr\tloss\tgrad_norm\twall_ms";

    pub fn tsv(&self) -> String {
        format!("{}\t{:.6e}\t{:.6}\t{:.6e}\t{}", self.step, self.lr, self.loss, self.grad_norm, self.wall_ms)
    }
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub trajectory: Vec<LogRow>,
    /// Set when the run stopped on a non-finite loss or gradient. The model
    /// then holds the parameters of the last good step.
    pub aborted: Option<Error>,
}

impl TrainOutcome {
    pub fn losses(&self) -> Vec<f64> {
        self.trajectory.iter().map(|r| r.loss).collect()
    }
}

/// Checks that the model's frozen flags match its phase before any update.
pub fn check_freezing<T: Element, M: Trainable<T>>(model: &M) -> Result<()> {
    if model.phase() == Phase::Ouroboros {
        for (name, p) in model.params().iter() {
            if p.frozen == is_trainable_name(name) {
                return Err(Error::Contract(format!(
                    "`{name}` is {} but the Ouroboros phase requires otherwise",
                    if p.frozen { "frozen" } else { "trainable" }
                )));
            }
        }
    }
    Ok(())
}

/// Runs `cfg.total_steps` optimizer steps, each over `cfg.accum` micro-batches
/// of `cfg.batch` sequences. `observer` sees every row and the updated model.
pub fn train_loop<T: Element, M: Trainable<T>>(
    model: &mut M,
    data: &[u8],
    cfg: &TrainConfig,
    observer: &mut dyn FnMut(&LogRow, &M) -> Result<()>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    check_freezing(model)?;
    let hp = AdamHyper::from(cfg);
    let mut opt = AdamW::new();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut trajectory = Vec::with_capacity(cfg.total_steps);
    let inv = T::from_f64_lossy(1.0 / cfg.accum as f64);
    for step in 0..cfg.total_steps {
        let started = Instant::now();
        let mut loss_sum = 0.0;
        let mut acc: GradMap<T> = IndexMap::new();
        for _ in 0..cfg.accum {
            let batch = next_batch(data, cfg.batch, cfg.seq_len, &mut rng)?;
            let (loss, grads) = loss_and_grads(model, &batch)?;
            loss_sum += loss;
            for (name, g) in grads {
                match acc.get_mut(&name) {
                    Some(a) => a.data_mut().iter_mut().zip(g.data()).for_each(|(x, &y)| *x = *x + y * inv),
                    None => {
                        let scaled = g.data().iter().map(|&y| y * inv).collect();
                        acc.insert(name, Tensor::new(g.shape().to_vec(), scaled)?);
                    }
                }
            }
        }
        let loss = loss_sum / cfg.accum as f64;
        if !loss.is_finite() {
            return Ok(TrainOutcome {
                trajectory,
                aborted: Some(Error::NonFinite { step, what: "loss".into() }),
            });
        }
        let grad_norm = match clip_global_norm(&mut acc, cfg.clip_norm) {
            Ok(n) => n,
            Err(Error::NonFinite { what, .. }) => {
                return Ok(TrainOutcome {
                    trajectory,
                    aborted: Some(Error::NonFinite { step, what }),
                })
            }
            Err(e) => return Err(e),
        };
        let lr = lr_at(step + 1, cfg);
        opt.step(model.params_mut(), &acc, lr, &hp)?;
        let row = LogRow {
            step,
            lr,
            loss,
            grad_norm,
            wall_ms: started.elapsed().as_millis() as u64,
        };
        observer(&row, model)?;
        trajectory.push(row);
    }
    Ok(TrainOutcome { trajectory, aborted: None })
}

/// Adds N(0, scale²) noise to every trainable tensor. Fresh adapters have
/// zero heads, which hides most gradient paths from a finite-difference probe.
pub fn perturb_trainables<T: Element>(params: &mut ParamStore<T>, scale: f64, seed: u64) -> Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for name in params.trainable_names() {
        let t = params.get_mut(&name)?;
        let noise = Tensor::<T>::randn(t.shape(), scale, &mut rng);
        t.data_mut().iter_mut().zip(noise.data()).for_each(|(x, &n)| *x = *x + n);
    }
    Ok(())
}

/// One probed coordinate.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckEntry {
    pub name: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct GradCheckReport {
    pub entries: Vec<GradCheckEntry>,
}

impl GradCheckReport {
    pub fn worst(&self) -> Option<&GradCheckEntry> {
        self.entries
            .iter()
            .max_by(|a, b| a.rel_err.partial_cmp(&b.rel_err).unwrap_or(std::cmp::Ordering::Greater))
    }

    pub fn max_rel_err(&self) -> f64 {
        self.worst().map_or(0.0, |e| e.rel_err)
    }

    /// Worst relative error per tensor, in probe order.
    pub fn per_tensor(&self) -> Vec<(String, f64)> {
        let mut out: IndexMap<String, f64> = IndexMap::new();
        for e in &self.entries {
            let w = out.entry(e.name.clone()).or_insert(0.0);
            *w = w.max(e.rel_err);
        }
        out.into_iter().collect()
    }
}

/// `|a − n| / max(|a|, |n|, floor)`.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

pub const GRAD_CHECK_FLOOR: f64 = 1e-6;
/// Default finite-difference step for [`grad_check`].
pub const GRAD_CHECK_STEP: f64 = 1e-3;

/// Five-point central differences against autodiff for up to `per_tensor`
/// sampled coordinates of each named tensor. Truncation error is O(h⁴), so a
/// step near 1e-3 keeps cancellation error small even for tiny gradients.
pub fn grad_check<M: Trainable<f64> + Clone>(
    model: &M,
    batch: &Batch,
    names: &[String],
    per_tensor: usize,
    h: f64,
    seed: u64,
) -> Result<GradCheckReport> {
    let (_, grads) = loss_and_grads(model, batch)?;
    let mut probe = model.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut entries = Vec::new();
    for name in names {
        let n = model.params().get(name)?.numel();
        let coords: Vec<usize> = if n <= per_tensor {
            (0..n).collect()
        } else {
            (0..per_tensor).map(|_| rng.random_range(0..n)).collect()
        };
        for i in coords {
            let orig = probe.params().get(name)?.data()[i];
            let mut at = |offset: f64| -> Result<f64> {
                probe.params_mut().get_mut(name)?.data_mut()[i] = orig + offset;
                loss_only(&probe, batch)
            };
            let (p1, m1, p2, m2) = (at(h)?, at(-h)?, at(2.0 * h)?, at(-2.0 * h)?);
            probe.params_mut().get_mut(name)?.data_mut()[i] = orig;
            let numeric = (8.0 * (p1 - m1) - (p2 - m2)) / (12.0 * h);
            let analytic = grads.get(name).map_or(0.0, |g| g.data()[i]);
            entries.push(GradCheckEntry {
                name: name.clone(),
                index: i,
                analytic,
                numeric,
                rel_err: relative_error(analytic, numeric, GRAD_CHECK_FLOOR),
            });
        }
    }
    Ok(GradCheckReport { entries })
}
