//! Experiment rows, their text encodings and the variant × depth pivot.

use std::fmt::Write as _;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::recurrence::Variant;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RowStatus {
    Ok,
    /// A loss or gradient went non-finite; the cell stopped early.
    Nan,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub variant: Variant,
    pub depth: usize,
    pub rank: usize,
    pub lr: f64,
    pub seed: u64,
    pub step: usize,
    pub train_loss: f64,
    pub heldout_loss: f64,
    pub wall_seconds: f64,
    pub status: RowStatus,
}

pub const COLUMNS: [&str; 10] = [
    "variant",
    "depth",
    "rank",
    "lr",
    "seed",
    "step",
    "train_loss",
    "heldout_loss",
    "wall_seconds",
    "status",
];

/// Identifies one sweep cell.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CellKey {
    pub variant: Variant,
    pub depth: usize,
    pub rank: usize,
    pub lr: f64,
    pub seed: u64,
}

fn fmt_loss(x: f64) -> String {
    if x.is_finite() {
        format!("{x:.6}")
    } else {
        "nan".into()
    }
}

impl ReportRow {
    pub fn key(&self) -> CellKey {
        CellKey {
            variant: self.variant,
            depth: self.depth,
            rank: self.rank,
            lr: self.lr,
            seed: self.seed,
        }
    }

    pub fn tsv(&self) -> String {
        format!(
            "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{:.3}\t{}",
            self.variant,
            self.depth,
            self.rank,
            self.lr,
            self.seed,
            self.step,
            fmt_loss(self.train_loss),
            fmt_loss(self.heldout_loss),
            self.wall_seconds,
            match self.status {
                RowStatus::Ok => "ok",
                RowStatus::Nan => "nan",
            }
        )
    }

    /// One JSON object; non-finite losses become `null`.
    pub fn json(&self) -> String {
        serde_json::to_string(self).expect("rows serialize")
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunReport {
    pub rows: Vec<ReportRow>,
}

fn same_cell(a: &CellKey, b: &CellKey) -> bool {
    a.variant == b.variant && a.depth == b.depth && a.rank == b.rank && a.lr.to_bits() == b.lr.to_bits() && a.seed == b.seed
}

impl RunReport {
    pub fn push(&mut self, row: ReportRow) {
        self.rows.push(row);
    }

    /// Concatenates reports and orders rows by (variant, depth, rank, lr, seed, step).
    pub fn merge(parts: impl IntoIterator<Item = RunReport>) -> Self {
        let mut rows: Vec<ReportRow> = parts.into_iter().flat_map(|r| r.rows).collect();
        let order = |v: Variant| Variant::ALL.iter().position(|&x| x == v).unwrap_or(usize::MAX);
        rows.sort_by(|a, b| {
            (order(a.variant), a.depth, a.rank)
                .cmp(&(order(b.variant), b.depth, b.rank))
                .then(a.lr.total_cmp(&b.lr))
                .then((a.seed, a.step).cmp(&(b.seed, b.step)))
        });
        Self { rows }
    }

    pub fn tsv(&self) -> String {
        let mut out = COLUMNS.join("\t");
        out.push('\n');
        for r in &self.rows {
            out.push_str(&r.tsv());
            out.push('\n');
        }
        out
    }

    pub fn jsonl(&self) -> String {
        self.rows.iter().map(|r| r.json() + "\n").collect()
    }

    /// The last row of each cell, in first-appearance order.
    pub fn results(&self) -> Vec<&ReportRow> {
        let mut out: Vec<&ReportRow> = Vec::new();
        for r in &self.rows {
            match out.iter_mut().find(|x| same_cell(&x.key(), &r.key())) {
                Some(slot) => {
                    if r.step >= slot.step {
                        *slot = r;
                    }
                }
                None => out.push(r),
            }
        }
        out
    }

    /// Rows at step 0 keyed by cell.
    pub fn initial(&self) -> Vec<&ReportRow> {
        self.rows.iter().filter(|r| r.step == 0).collect()
    }

    /// Per-configuration means of the final rows over seeds. A configuration
    /// with any non-finite seed is flagged.
    pub fn seed_means(&self) -> Vec<SeedMean> {
        let mut groups: IndexMap<(Variant, usize, usize, u64), Vec<&ReportRow>> = IndexMap::new();
        for r in self.results() {
            groups.entry((r.variant, r.depth, r.rank, r.lr.to_bits())).or_default().push(r);
        }
        groups
            .into_iter()
            .map(|((variant, depth, rank, lr), rows)| {
                let n = rows.len() as f64;
                let flagged = rows.iter().any(|r| r.status == RowStatus::Nan || !r.train_loss.is_finite());
                SeedMean {
                    variant,
                    depth,
                    rank,
                    lr: f64::from_bits(lr),
                    seeds: rows.len(),
                    train_loss: rows.iter().map(|r| r.train_loss).sum::<f64>() / n,
                    heldout_loss: rows.iter().map(|r| r.heldout_loss).sum::<f64>() / n,
                    flagged,
                }
            })
            .collect()
    }

    pub fn seed_means_tsv(&self) -> String {
        let mut out = String::from("variant\tdepth\trank\tlr\tseeds\ttrain_loss\theldout_loss\tstatus\n");
        for m in self.seed_means() {
            let _ = writeln!(
                out,
                "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
                m.variant,
                m.depth,
                m.rank,
                m.lr,
                m.seeds,
                fmt_loss(m.train_loss),
                fmt_loss(m.heldout_loss),
                if m.flagged { "nan" } else { "ok" }
            );
        }
        out
    }

    /// One variant × depth table of mean final training loss per (rank, lr).
    /// Flagged cells print as `nan*`; cells that were not run print as `-`.
    pub fn pivot(&self) -> String {
        let means = self.seed_means();
        let mut depths: Vec<usize> = means.iter().map(|m| m.depth).collect();
        depths.sort_unstable();
        depths.dedup();
        let mut variants: Vec<Variant> = means.iter().map(|m| m.variant).collect();
        variants.sort_by_key(|v| Variant::ALL.iter().position(|x| x == v));
        variants.dedup();
        let mut groups: Vec<(usize, u64)> = means.iter().map(|m| (m.rank, m.lr.to_bits())).collect();
        groups.sort_by(|a, b| a.0.cmp(&b.0).then(f64::from_bits(a.1).total_cmp(&f64::from_bits(b.1))));
        groups.dedup();

        let mut out = String::new();
        for (rank, lr_bits) in groups {
            let lr = f64::from_bits(lr_bits);
            let _ = writeln!(out, "# rank={rank} lr={lr} (mean final train loss)");
            out.push_str("variant");
            for d in &depths {
                let _ = write!(out, "\tdepth={d}");
            }
            out.push('\n');
            for v in &variants {
                out.push_str(v.name());
                for d in &depths {
                    let cell = means
                        .iter()
                        .find(|m| m.variant == *v && m.depth == *d && m.rank == rank && m.lr.to_bits() == lr_bits);
                    let text = match cell {
                        None => "-".to_string(),
                        Some(m) if m.flagged => "nan*".to_string(),
                        Some(m) => format!("{:.4}", m.train_loss),
                    };
                    let _ = write!(out, "\t{text}");
                }
                out.push('\n');
            }
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SeedMean {
    pub variant: Variant,
    pub depth: usize,
    pub rank: usize,
    pub lr: f64,
    pub seeds: usize,
    pub train_loss: f64,
    pub heldout_loss: f64,
    pub flagged: bool,
}

#[cfg(test)]
mod tests;
