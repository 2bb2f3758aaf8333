//! Agreement and classifier-comparison statistics.

use std::collections::BTreeMap;
use std::hash::Hash;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::CodeLabel;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum StatsError {
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("input is empty")]
    Empty,
    #[error("{0}")]
    Input(String),
}

/// A statistic that may be undefined for degenerate inputs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Stat {
    Value(f64),
    Undefined,
}

impl Stat {
    pub fn value(self) -> Option<f64> {
        match self {
            Stat::Value(v) => Some(v),
            Stat::Undefined => None,
        }
    }

    /// The value, or NaN when undefined.
    pub fn or_nan(self) -> f64 {
        self.value().unwrap_or(f64::NAN)
    }
}

/// κ from observed and chance agreement. `invariant` is set when each
/// coder used a single label throughout; two such coders that disagree give
/// no information to correct for chance, so κ is undefined.
fn kappa_from(p_o: f64, p_e: f64, invariant: bool) -> Stat {
    if invariant && p_o < 1.0 {
        return Stat::Undefined;
    }
    if p_e >= 1.0 {
        if p_o >= 1.0 {
            Stat::Value(1.0)
        } else {
            Stat::Undefined
        }
    } else {
        Stat::Value((p_o - p_e) / (1.0 - p_e))
    }
}

/// Cohen's κ between two aligned label sequences.
pub fn cohens_kappa<L: Ord + Clone>(reference: &[L], candidate: &[L]) -> Result<Stat, StatsError> {
    if reference.len() != candidate.len() {
        return Err(StatsError::LengthMismatch(reference.len(), candidate.len()));
    }
    if reference.is_empty() {
        return Err(StatsError::Empty);
    }
    let n = reference.len() as f64;
    let mut ref_marg: BTreeMap<&L, usize> = BTreeMap::new();
    let mut cand_marg: BTreeMap<&L, usize> = BTreeMap::new();
    let mut agree = 0usize;
    for (r, c) in reference.iter().zip(candidate) {
        *ref_marg.entry(r).or_default() += 1;
        *cand_marg.entry(c).or_default() += 1;
        if r == c {
            agree += 1;
        }
    }
    let p_o = agree as f64 / n;
    let p_e: f64 = ref_marg
        .iter()
        .map(|(l, &a)| a as f64 * *cand_marg.get(l).unwrap_or(&0) as f64)
        .sum::<f64>()
        / (n * n);
    Ok(kappa_from(p_o, p_e, ref_marg.len() == 1 && cand_marg.len() == 1))
}

/// κ for a square contingency table (rows reference, columns candidate).
pub fn kappa_from_table(table: &[Vec<u64>]) -> Result<Stat, StatsError> {
    let k = table.len();
    if table.iter().any(|row| row.len() != k) {
        return Err(StatsError::Input("contingency table must be square".into()));
    }
    let n: u64 = table.iter().flatten().sum();
    if n == 0 {
        return Err(StatsError::Empty);
    }
    let n = n as f64;
    let diag: u64 = (0..k).map(|i| table[i][i]).sum();
    let rows: Vec<u64> = table.iter().map(|r| r.iter().sum()).collect();
    let cols: Vec<u64> = (0..k).map(|i| table.iter().map(|r| r[i]).sum()).collect();
    let p_e: f64 = rows
        .iter()
        .zip(&cols)
        .map(|(&r, &c)| r as f64 * c as f64)
        .sum::<f64>()
        / (n * n);
    let invariant = rows.iter().filter(|&&r| r > 0).count() == 1
        && cols.iter().filter(|&&c| c > 0).count() == 1;
    Ok(kappa_from(diag as f64 / n, p_e, invariant))
}

/// 8×8 counts; `cells[i][j]` = messages reference-coded `i`, candidate-coded `j`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AgreementMatrix {
    pub cells: [[u64; 8]; 8],
}

impl AgreementMatrix {
    pub fn total(&self) -> u64 {
        self.cells.iter().flatten().sum()
    }

    pub fn row_sums(&self) -> [u64; 8] {
        std::array::from_fn(|i| self.cells[i].iter().sum())
    }

    pub fn col_sums(&self) -> [u64; 8] {
        std::array::from_fn(|j| self.cells.iter().map(|r| r[j]).sum())
    }

    pub fn kappa(&self) -> Stat {
        let table: Vec<Vec<u64>> = self.cells.iter().map(|r| r.to_vec()).collect();
        kappa_from_table(&table).unwrap_or(Stat::Undefined)
    }
}

pub fn agreement_matrix(
    reference: &[CodeLabel],
    candidate: &[CodeLabel],
) -> Result<AgreementMatrix, StatsError> {
    if reference.len() != candidate.len() {
        return Err(StatsError::LengthMismatch(reference.len(), candidate.len()));
    }
    if reference.is_empty() {
        return Err(StatsError::Empty);
    }
    let mut cells = [[0u64; 8]; 8];
    for (r, c) in reference.iter().zip(candidate) {
        cells[r.index()][c.index()] += 1;
    }
    Ok(AgreementMatrix { cells })
}

/// One-vs-rest κ per label.
pub fn per_label_kappa(matrix: &AgreementMatrix) -> BTreeMap<CodeLabel, Stat> {
    let rows = matrix.row_sums();
    let cols = matrix.col_sums();
    let n = matrix.total();
    CodeLabel::ALL
        .iter()
        .map(|&l| {
            let i = l.index();
            let both = matrix.cells[i][i];
            let ref_only = rows[i] - both;
            let cand_only = cols[i] - both;
            let neither = n - both - ref_only - cand_only;
            let table = vec![vec![both, ref_only], vec![cand_only, neither]];
            (l, kappa_from_table(&table).unwrap_or(Stat::Undefined))
        })
        .collect()
}

/// Upper tail of the chi-square distribution, `Q(df/2, x/2)`.
pub fn chi_square_sf(x: f64, df: f64) -> f64 {
    if x <= 0.0 {
        return 1.0;
    }
    statrs::function::gamma::gamma_ur(df / 2.0, x / 2.0).clamp(0.0, 1.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum McNemarVariant {
    /// (b − c)² / (b + c), no continuity correction.
    #[default]
    ChiSquare,
    /// Two-sided exact binomial test on the discordant pairs.
    ExactBinomial,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct McNemarResult {
    /// Items only the first classifier got right.
    pub b: u64,
    /// Items only the second classifier got right.
    pub c: u64,
    pub chi_square: Stat,
    pub p_value: Stat,
}

pub fn mcnemar(
    correct_a: &[bool],
    correct_b: &[bool],
    variant: McNemarVariant,
) -> Result<McNemarResult, StatsError> {
    if correct_a.len() != correct_b.len() {
        return Err(StatsError::LengthMismatch(correct_a.len(), correct_b.len()));
    }
    let b = correct_a.iter().zip(correct_b).filter(|(a, b)| **a && !**b).count() as u64;
    let c = correct_a.iter().zip(correct_b).filter(|(a, b)| !**a && **b).count() as u64;
    Ok(mcnemar_counts(b, c, variant))
}

pub fn mcnemar_counts(b: u64, c: u64, variant: McNemarVariant) -> McNemarResult {
    if b + c == 0 {
        return McNemarResult {
            b,
            c,
            chi_square: Stat::Undefined,
            p_value: Stat::Undefined,
        };
    }
    let diff = b as f64 - c as f64;
    let chi = diff * diff / (b + c) as f64;
    let p = match variant {
        McNemarVariant::ChiSquare => chi_square_sf(chi, 1.0),
        McNemarVariant::ExactBinomial => exact_binomial_two_sided(b.min(c), b + c),
    };
    McNemarResult {
        b,
        c,
        chi_square: Stat::Value(chi),
        p_value: Stat::Value(p),
    }
}

/// `min(1, 2 · P[X ≤ k])` for X ~ Binomial(n, 1/2).
fn exact_binomial_two_sided(k: u64, n: u64) -> f64 {
    use statrs::distribution::{Binomial, DiscreteCDF};
    let dist = Binomial::new(0.5, n).expect("valid binomial");
    (2.0 * dist.cdf(k)).min(1.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CochranQResult {
    pub q: Stat,
    pub df: u64,
    pub p_value: Stat,
}

/// Cochran's Q over `k` classifiers (rows) × `n` items (columns).
pub fn cochran_q(correct: &[Vec<bool>]) -> Result<CochranQResult, StatsError> {
    let k = correct.len();
    if k < 2 {
        return Err(StatsError::Input(format!(
            "Cochran's Q needs at least 2 classifiers, got {k}"
        )));
    }
    let n = correct[0].len();
    if let Some(row) = correct.iter().find(|r| r.len() != n) {
        return Err(StatsError::LengthMismatch(n, row.len()));
    }
    let col_totals: Vec<u64> = correct
        .iter()
        .map(|r| r.iter().filter(|&&x| x).count() as u64)
        .collect();
    let row_totals: Vec<u64> = (0..n)
        .map(|j| correct.iter().filter(|r| r[j]).count() as u64)
        .collect();
    let total: u64 = col_totals.iter().sum();
    let kf = k as f64;
    let num = (kf - 1.0)
        * (kf * col_totals.iter().map(|&c| (c * c) as f64).sum::<f64>() - (total * total) as f64);
    let den = kf * total as f64 - row_totals.iter().map(|&r| (r * r) as f64).sum::<f64>();
    let df = (k - 1) as u64;
    if den == 0.0 {
        return Ok(CochranQResult {
            q: Stat::Undefined,
            df,
            p_value: Stat::Undefined,
        });
    }
    let q = num / den;
    Ok(CochranQResult {
        q: Stat::Value(q),
        df,
        p_value: Stat::Value(chi_square_sf(q, df as f64)),
    })
}

/// Mean and population standard deviation; `(0, 0)` for an empty slice.
pub fn mean_sd(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (0.0, 0.0);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Counts of a hashable key, used by several report builders.
pub fn counts<K: Hash + Ord + Clone>(items: impl IntoIterator<Item = K>) -> BTreeMap<K, usize> {
    let mut m = BTreeMap::new();
    for k in items {
        *m.entry(k).or_insert(0) += 1;
    }
    m
}
