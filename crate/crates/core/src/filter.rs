//! Signed-max-lambda statistics, knockoff / knockoff+ thresholds and scoring.

use std::collections::BTreeSet;
use std::fmt;
use std::io::Write;

use ndarray::{Array1, ArrayView1};
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FilterMode {
    Knockoff,
    KnockoffPlus,
}

impl FilterMode {
    pub fn name(self) -> &'static str {
        match self {
            FilterMode::Knockoff => "knockoff",
            FilterMode::KnockoffPlus => "knockoff_plus",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "knockoff" => Ok(FilterMode::Knockoff),
            "knockoff_plus" | "knockoff+" => Ok(FilterMode::KnockoffPlus),
            other => Err(Error::Config(format!("unknown filter mode `{other}`"))),
        }
    }

    pub fn offset(self) -> f64 {
        match self {
            FilterMode::Knockoff => 0.0,
            FilterMode::KnockoffPlus => 1.0,
        }
    }
}

impl fmt::Display for FilterMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureStats {
    pub w: Array1<f64>,
    pub z: Array1<f64>,
    pub z_knockoff: Array1<f64>,
}

/// `W_j = max(Z_j, Z~_j) * sign(Z_j - Z~_j)`, with `sign(0) = 0`.
pub fn signed_max_lambda(z: ArrayView1<'_, f64>, z_knockoff: ArrayView1<'_, f64>) -> Result<FeatureStats> {
    check_dim("knockoff statistic length", z.len(), z_knockoff.len())?;
    let w = ndarray::Zip::from(z).and(z_knockoff).map_collect(|&a, &b| {
        if a > b {
            a.max(b)
        } else if a < b {
            -a.max(b)
        } else {
            0.0
        }
    });
    Ok(FeatureStats {
        w,
        z: z.to_owned(),
        z_knockoff: z_knockoff.to_owned(),
    })
}

/// Splits entry penalties of `[X, X~]` (length `2p`) into the two halves.
pub fn from_entry_lambdas(entries: ArrayView1<'_, f64>) -> Result<FeatureStats> {
    if !entries.len().is_multiple_of(2) {
        return Err(Error::Dimension {
            context: "augmented entry penalties (must be even)",
            expected: entries.len() + 1,
            actual: entries.len(),
        });
    }
    let p = entries.len() / 2;
    signed_max_lambda(entries.slice(ndarray::s![..p]), entries.slice(ndarray::s![p..]))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Selection {
    /// `+inf` when nothing is selected.
    pub threshold: f64,
    /// Zero-based indices with `W_j >= threshold`, ascending.
    pub selected: Vec<usize>,
    pub mode: FilterMode,
    pub q: f64,
}

/// Smallest `t` among the nonzero `|W_j|` with
/// `(offset + #{W <= -t}) / max(1, #{W >= t}) <= q`.
pub fn threshold(w: ArrayView1<'_, f64>, q: f64, mode: FilterMode) -> Result<Selection> {
    if !(q > 0.0 && q < 1.0) {
        return Err(Error::Config(format!("FDR level must lie in (0, 1), got {q}")));
    }
    let mut candidates: Vec<f64> = w.iter().filter(|v| **v != 0.0).map(|v| v.abs()).collect();
    candidates.sort_by(f64::total_cmp);
    candidates.dedup();
    let mut pos: Vec<f64> = w.iter().copied().filter(|&v| v > 0.0).collect();
    let mut neg: Vec<f64> = w.iter().filter(|&&v| v < 0.0).map(|v| -v).collect();
    pos.sort_by(f64::total_cmp);
    neg.sort_by(f64::total_cmp);
    let count_at_least = |sorted: &[f64], t: f64| sorted.len() - sorted.partition_point(|&v| v < t);

    let tau = candidates
        .into_iter()
        .find(|&t| {
            let num = mode.offset() + count_at_least(&neg, t) as f64;
            let den = count_at_least(&pos, t).max(1) as f64;
            num / den <= q
        })
        .unwrap_or(f64::INFINITY);
    let selected = if tau.is_finite() {
        (0..w.len()).filter(|&j| w[j] >= tau).collect()
    } else {
        Vec::new()
    };
    Ok(Selection {
        threshold: tau,
        selected,
        mode,
        q,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Score {
    pub fdp: f64,
    pub power: f64,
    pub false_discoveries: usize,
    pub true_discoveries: usize,
    pub selected: usize,
}

/// False discovery proportion `|S^ \ S| / max(1, |S^|)` and power `|S^ & S| / |S|`.
/// Power is 0 when the true set is empty.
pub fn score(selected: &[usize], truth: &[usize]) -> Score {
    let truth: BTreeSet<usize> = truth.iter().copied().collect();
    let chosen: BTreeSet<usize> = selected.iter().copied().collect();
    let true_hits = chosen.intersection(&truth).count();
    let false_hits = chosen.len() - true_hits;
    Score {
        fdp: false_hits as f64 / chosen.len().max(1) as f64,
        power: if truth.is_empty() {
            0.0
        } else {
            true_hits as f64 / truth.len() as f64
        },
        false_discoveries: false_hits,
        true_discoveries: true_hits,
        selected: chosen.len(),
    }
}

/// FDR bound for approximate knockoffs: `q * exp(8 n a^2 + 8 sqrt(n ln p) a)`.
pub fn fdr_bound(q: f64, n: usize, p: usize, a: f64) -> Result<f64> {
    if n < 1 || p < 2 || !(a >= 0.0) {
        return Err(Error::Config(format!(
            "fdr bound needs n >= 1, p >= 2, a >= 0 (got {n}, {p}, {a})"
        )));
    }
    let n = n as f64;
    Ok(q * (8.0 * n * a * a + 8.0 * (n * (p as f64).ln()).sqrt() * a).exp())
}

/// One row per variable: id, W, selected flag, threshold, mode, q.
pub fn write_selection_csv<W: Write>(
    out: W,
    names: &[String],
    stats: &FeatureStats,
    selection: &Selection,
) -> Result<()> {
    check_dim("selection names", stats.w.len(), names.len())?;
    let chosen: BTreeSet<usize> = selection.selected.iter().copied().collect();
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["variable", "w", "selected", "threshold", "mode", "q"])?;
    for (j, name) in names.iter().enumerate() {
        w.write_record([
            name.clone(),
            stats.w[j].to_string(),
            u8::from(chosen.contains(&j)).to_string(),
            selection.threshold.to_string(),
            selection.mode.to_string(),
            selection.q.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}
