//! Clustering metrics: ACC under the optimal label matching, NMI, ARI.

mod hungarian;

pub use hungarian::min_cost_assignment;

use std::fmt::Write;

use crate::error::{Error, Result};

/// Counts `table[p][t]` of samples with predicted label `p` and true label `t`.
pub fn contingency(pred: &[usize], truth: &[usize]) -> Result<Vec<Vec<u64>>> {
    if pred.len() != truth.len() {
        return Err(Error::Input(format!(
            "label lists differ in length: {} predicted vs {} true",
            pred.len(),
            truth.len()
        )));
    }
    let rows = pred.iter().max().map_or(0, |m| m + 1);
    let cols = truth.iter().max().map_or(0, |m| m + 1);
    let mut table = vec![vec![0u64; cols]; rows];
    for (&p, &t) in pred.iter().zip(truth) {
        table[p][t] += 1;
    }
    Ok(table)
}

/// Fraction of samples correct under the best one-to-one relabeling of
/// the predictions.
pub fn acc_hungarian(pred: &[usize], truth: &[usize]) -> Result<f64> {
    let table = contingency(pred, truth)?;
    if pred.is_empty() {
        return Ok(0.0);
    }
    let n = table.len().max(table[0].len());
    let cost: Vec<Vec<i64>> = (0..n)
        .map(|p| {
            (0..n)
                .map(|t| -(table.get(p).and_then(|r| r.get(t)).copied().unwrap_or(0) as i64))
                .collect()
        })
        .collect();
    let assign = min_cost_assignment(&cost);
    let matched: i64 = assign.iter().enumerate().map(|(p, &t)| -cost[p][t]).sum();
    Ok(matched as f64 / pred.len() as f64)
}

fn entropy(counts: impl Iterator<Item = u64>, n: f64) -> f64 {
    counts
        .filter(|&c| c > 0)
        .map(|c| {
            let p = c as f64 / n;
            -p * p.ln()
        })
        .sum()
}

/// Mutual information normalized by the geometric mean of the entropies.
pub fn nmi(pred: &[usize], truth: &[usize]) -> Result<f64> {
    let table = contingency(pred, truth)?;
    let n = pred.len() as f64;
    if pred.is_empty() {
        return Ok(0.0);
    }
    let row_sums: Vec<u64> = table.iter().map(|r| r.iter().sum()).collect();
    let col_sums: Vec<u64> = (0..table[0].len()).map(|t| table.iter().map(|r| r[t]).sum()).collect();
    let hp = entropy(row_sums.iter().copied(), n);
    let ht = entropy(col_sums.iter().copied(), n);
    if hp == 0.0 || ht == 0.0 {
        return Ok(if hp == ht { 1.0 } else { 0.0 });
    }
    let mut mi = 0.0;
    for (p, row) in table.iter().enumerate() {
        for (t, &c) in row.iter().enumerate() {
            if c > 0 {
                let c = c as f64;
                mi += c / n * (c * n / (row_sums[p] as f64 * col_sums[t] as f64)).ln();
            }
        }
    }
    Ok((mi / (hp * ht).sqrt()).clamp(0.0, 1.0))
}

/// Adjusted Rand index with a flag for the degenerate case.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Ari {
    pub value: f64,
    /// The expected and maximum index coincide (both partitions are all
    /// singletons, or both a single cluster); `value` is then 1 by convention.
    pub degenerate: bool,
}

fn pairs(c: u64) -> i128 {
    let c = c as i128;
    c * (c - 1) / 2
}

/// ARI from the contingency table, computed exactly in integers and
/// converted to a float once.
pub fn ari_detailed(pred: &[usize], truth: &[usize]) -> Result<Ari> {
    let table = contingency(pred, truth)?;
    if pred.len() < 2 {
        return Err(Error::Input("ARI needs at least 2 samples".into()));
    }
    let index: i128 = table.iter().flatten().map(|&c| pairs(c)).sum();
    let sa: i128 = table.iter().map(|r| pairs(r.iter().sum())).sum();
    let sb: i128 = (0..table[0].len())
        .map(|t| pairs(table.iter().map(|r| r[t]).sum()))
        .sum();
    let total = pairs(pred.len() as u64);
    let num = 2 * index * total - 2 * sa * sb;
    let den = (sa + sb) * total - 2 * sa * sb;
    if den == 0 {
        return Ok(Ari {
            value: 1.0,
            degenerate: true,
        });
    }
    Ok(Ari {
        value: num as f64 / den as f64,
        degenerate: false,
    })
}

pub fn ari(pred: &[usize], truth: &[usize]) -> Result<f64> {
    ari_detailed(pred, truth).map(|a| a.value)
}

/// All three metrics and the contingency table (`k_pred × k_true`).
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsReport {
    pub n: usize,
    pub acc: f64,
    pub nmi: f64,
    pub ari: f64,
    pub ari_degenerate: bool,
    pub contingency: Vec<Vec<u64>>,
}

impl MetricsReport {
    pub fn compute(pred: &[usize], truth: &[usize]) -> Result<Self> {
        let a = ari_detailed(pred, truth)?;
        Ok(MetricsReport {
            n: pred.len(),
            acc: acc_hungarian(pred, truth)?,
            nmi: nmi(pred, truth)?,
            ari: a.value,
            ari_degenerate: a.degenerate,
            contingency: contingency(pred, truth)?,
        })
    }

    /// `key=value` lines.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        writeln!(s, "n={}", self.n).unwrap();
        writeln!(s, "acc={:.6}", self.acc).unwrap();
        writeln!(s, "nmi={:.6}", self.nmi).unwrap();
        writeln!(s, "ari={:.6}", self.ari).unwrap();
        writeln!(s, "ari_degenerate={}", self.ari_degenerate).unwrap();
        s
    }

    /// Rows are predicted clusters, columns true classes.
    pub fn contingency_csv(&self) -> String {
        let cols = self.contingency.first().map_or(0, Vec::len);
        let mut s = String::from("pred");
        for t in 0..cols {
            write!(s, ",true{t}").unwrap();
        }
        s.push('\n');
        for (p, row) in self.contingency.iter().enumerate() {
            write!(s, "{p}").unwrap();
            for c in row {
                write!(s, ",{c}").unwrap();
            }
            s.push('\n');
        }
        s
    }
}
