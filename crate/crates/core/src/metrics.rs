//! Evaluation metrics: dictionary recovery score (shift-invariant atom
//! matching), mask F1, and ROC AUC.

use crate::error::{Error, Result};
use crate::robust::OutlierMask;
use crate::tensor::Dictionary;

/// Full 1-D cross-correlation of `a` and `b` over every overlapping shift.
/// Output index `t` holds `sum_l a[l] * b[l + t - (len(a) - 1)]`, so the
/// result has `len(a) + len(b) - 1` entries.
pub fn full_correlation_1d(a: &[f64], b: &[f64]) -> Vec<f64> {
    let la = a.len() as isize;
    let lb = b.len() as isize;
    let mut out = vec![0.0; (la + lb - 1) as usize];
    for (t, o) in out.iter_mut().enumerate() {
        let s = t as isize - (la - 1);
        let lo = (-s).max(0);
        let hi = la.min(lb - s);
        let mut acc = 0.0;
        for l in lo..hi {
            acc += a[l as usize] * b[(l + s) as usize];
        }
        *o = acc;
    }
    out
}

fn normalized_atom(d: &Dictionary, k: usize) -> Vec<f64> {
    let atom = d.atom(k);
    let ns: f64 = atom.iter().map(|v| v * v).sum();
    if ns == 0.0 {
        return atom.to_vec();
    }
    let inv = 1.0 / ns.sqrt();
    atom.iter().map(|v| v * inv).collect()
}

/// Best correlation magnitude between unit-normalized atoms `i` of `d` and
/// `j` of `dh` over all relative shifts, channels aligned at a common lag.
/// Magnitude because signed codes make `d` and `-d` interchangeable.
fn best_shift_correlation(d: &Dictionary, i: usize, dh: &Dictionary, j: usize) -> f64 {
    let a = normalized_atom(d, i);
    let b = normalized_atom(dh, j);
    let la = d.atom_len();
    let lb = dh.atom_len();
    let mut total = vec![0.0; la + lb - 1];
    for p in 0..d.channels() {
        let corr = full_correlation_1d(&a[p * la..(p + 1) * la], &b[p * lb..(p + 1) * lb]);
        for (t, c) in total.iter_mut().zip(&corr) {
            *t += c;
        }
    }
    total.into_iter().fold(0.0, |m, v| m.max(v.abs()))
}

/// Maximum-weight assignment of each row to a distinct column
/// (`rows <= cols`). Returns the matched column per row.
///
/// O(n^2 m) Hungarian algorithm with row/column potentials.
pub fn max_weight_assignment(weights: &[Vec<f64>]) -> Result<Vec<usize>> {
    let n = weights.len();
    if n == 0 {
        return Err(Error::OutOfRange("assignment needs at least one row".into()));
    }
    let m = weights[0].len();
    if weights.iter().any(|r| r.len() != m) {
        return Err(Error::DimensionMismatch("weight matrix rows have unequal lengths".into()));
    }
    if n > m {
        return Err(Error::DimensionMismatch(format!(
            "assignment needs rows <= cols, got {n} rows and {m} cols"
        )));
    }
    if weights.iter().flatten().any(|w| !w.is_finite()) {
        return Err(Error::Numeric("weight matrix contains non-finite values".into()));
    }
    // minimize negated weights; indices are 1-based with 0 as scratch
    let cost = |i: usize, j: usize| -weights[i - 1][j - 1];
    let mut u = vec![0.0f64; n + 1];
    let mut v = vec![0.0f64; m + 1];
    let mut p = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![f64::INFINITY; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0usize;
            for j in 1..=m {
                if !used[j] {
                    let cur = cost(i0, j) - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=m {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut ans = vec![0usize; n];
    for j in 1..=m {
        if p[j] != 0 {
            ans[p[j] - 1] = j - 1;
        }
    }
    Ok(ans)
}

/// How well `learned` recovers the atoms of `truth`; shift-, sign-, and
/// permutation-invariant.
#[derive(Debug, Clone)]
pub struct RecoveryScore {
    /// Mean matched correlation, at most 1.
    pub score: f64,
    /// `(true_atom, learned_atom)` pairs of the optimal matching.
    pub assignment: Vec<(usize, usize)>,
    /// Correlation matrix, `truth.n_atoms() x learned.n_atoms()`.
    pub matrix: Vec<Vec<f64>>,
}

/// Matches every true atom to a distinct learned atom maximizing the summed
/// best-shift correlation of unit-normalized atoms, and averages the
/// matched correlations. The learned dictionary may have extra atoms.
pub fn recovery_score(truth: &Dictionary, learned: &Dictionary) -> Result<RecoveryScore> {
    if truth.channels() != learned.channels() {
        return Err(Error::DimensionMismatch(format!(
            "true dictionary has {} channels, learned has {}",
            truth.channels(),
            learned.channels()
        )));
    }
    if learned.n_atoms() < truth.n_atoms() {
        return Err(Error::DimensionMismatch(format!(
            "learned dictionary has {} atoms, fewer than the {} true atoms",
            learned.n_atoms(),
            truth.n_atoms()
        )));
    }
    let k = truth.n_atoms();
    let kh = learned.n_atoms();
    let mut matrix = vec![vec![0.0; kh]; k];
    for (i, row) in matrix.iter_mut().enumerate() {
        for (j, cell) in row.iter_mut().enumerate() {
            *cell = best_shift_correlation(truth, i, learned, j);
        }
    }
    let cols = max_weight_assignment(&matrix)?;
    let assignment: Vec<(usize, usize)> = cols.iter().copied().enumerate().collect();
    let score = assignment.iter().map(|(i, j)| matrix[*i][*j]).sum::<f64>() / k as f64;
    Ok(RecoveryScore { score, assignment, matrix })
}

/// F1 score of boolean predictions against truth. Both all-negative
/// counts as a perfect 1.0.
pub fn binary_f1(predicted: &[bool], truth: &[bool]) -> Result<f64> {
    if predicted.len() != truth.len() {
        return Err(Error::DimensionMismatch(format!(
            "prediction has {} entries, truth has {}",
            predicted.len(),
            truth.len()
        )));
    }
    if predicted.is_empty() {
        return Err(Error::InsufficientData("empty prediction".into()));
    }
    let mut tp = 0usize;
    let mut fp = 0usize;
    let mut fun = 0usize;
    for (p, t) in predicted.iter().zip(truth) {
        match (p, t) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fun += 1,
            (false, false) => {}
        }
    }
    if tp + fp + fun == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * tp as f64 / (2.0 * tp as f64 + fp as f64 + fun as f64))
}

/// F1 of two patch masks on the same grid.
pub fn mask_f1(predicted: &OutlierMask, truth: &OutlierMask) -> Result<f64> {
    if predicted.patch_width() != truth.patch_width()
        || predicted.signal_len() != truth.signal_len()
    {
        return Err(Error::DimensionMismatch(format!(
            "mask grids differ: width {} over {} vs width {} over {}",
            predicted.patch_width(),
            predicted.signal_len(),
            truth.patch_width(),
            truth.signal_len()
        )));
    }
    binary_f1(predicted.flags(), truth.flags())
}

/// Area under the ROC curve by the rank statistic (ties get midranks).
/// Undefined when either class is absent.
pub fn roc_auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} scores but {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::Numeric("scores contain non-finite values".into()));
    }
    let n_pos = labels.iter().filter(|l| **l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::UndefinedMetric(format!(
            "ROC AUC needs both classes, got {n_pos} positives and {n_neg} negatives"
        )));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // ranks are 1-based; tied block [i, j] shares the midrank
        let midrank = (i + j) as f64 / 2.0 + 1.0;
        for &idx in &order[i..=j] {
            if labels[idx] {
                rank_sum_pos += midrank;
            }
        }
        i = j + 1;
    }
    let n_pos = n_pos as f64;
    Ok((rank_sum_pos - n_pos * (n_pos + 1.0) / 2.0) / (n_pos * n_neg as f64))
}
