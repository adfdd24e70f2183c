//! Connectionist temporal classification: collapsing, the forward-backward
//! loss, greedy decoding, and prefix token counts.
//!
//! All CTC heads in the engine share the vocabulary convention of
//! [`crate::vocab`]: the blank symbol is id [`BLANK`].

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numerics::Tensor;
pub use crate::vocab::BLANK;

#[derive(Debug, Error, PartialEq)]
pub enum CtcError {
    #[error("row {row} is not a probability distribution (sum {sum}, min {min})")]
    NotDistribution { row: usize, sum: f64, min: f64 },
    #[error("blank id {blank} outside vocabulary of size {vocab}")]
    BlankOutOfRange { blank: usize, vocab: usize },
}

/// The collapsing function: merge consecutive repeats, then drop blanks.
pub fn collapse(z: &[usize], blank: usize) -> Vec<usize> {
    let mut out = Vec::new();
    let mut prev = None;
    for &t in z {
        if Some(t) != prev && t != blank {
            out.push(t);
        }
        prev = Some(t);
    }
    out
}

/// Minimum number of frames needed to emit `target` (one blank between repeats).
pub fn min_frames(target: &[usize]) -> usize {
    target.len() + target.windows(2).filter(|w| w[0] == w[1]).count()
}

fn lse2(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let m = a.max(b);
    m + ((a - m).exp() + (b - m).exp()).ln()
}

/// Log-space forward recursion over the blank-interleaved target.
///
/// Returns `−log p(target | log_probs)` and, when requested, its gradient
/// with respect to each entry of `log_probs` (treated as free inputs).
/// Infeasible targets give `+∞` and an all-zero gradient.
pub(crate) fn forward_backward(
    log_probs: &Tensor,
    target: &[usize],
    blank: usize,
    want_grad: bool,
) -> (f64, Option<Vec<f64>>) {
    let t_len = log_probs.rows();
    let v = log_probs.cols();
    let s_len = 2 * target.len() + 1;
    let label = |s: usize| if s.is_multiple_of(2) { blank } else { target[s / 2] };
    let lp = |t: usize, k: usize| log_probs.data()[t * v + k];
    let skip_ok = |s: usize| s >= 2 && label(s) != blank && label(s) != label(s - 2);

    if t_len == 0 {
        let loss = if target.is_empty() { 0.0 } else { f64::INFINITY };
        return (loss, want_grad.then(Vec::new));
    }
    if t_len < min_frames(target) {
        return (f64::INFINITY, want_grad.then(|| vec![0.0; t_len * v]));
    }

    let ninf = f64::NEG_INFINITY;
    let mut alpha = vec![ninf; t_len * s_len];
    alpha[0] = lp(0, blank);
    if s_len > 1 {
        alpha[1] = lp(0, label(1));
    }
    for t in 1..t_len {
        for s in 0..s_len {
            let mut acc = alpha[(t - 1) * s_len + s];
            if s >= 1 {
                acc = lse2(acc, alpha[(t - 1) * s_len + s - 1]);
            }
            if skip_ok(s) {
                acc = lse2(acc, alpha[(t - 1) * s_len + s - 2]);
            }
            alpha[t * s_len + s] = acc + lp(t, label(s));
        }
    }
    let last = (t_len - 1) * s_len;
    let log_z = if s_len > 1 {
        lse2(alpha[last + s_len - 1], alpha[last + s_len - 2])
    } else {
        alpha[last]
    };
    if log_z == ninf {
        return (f64::INFINITY, want_grad.then(|| vec![0.0; t_len * v]));
    }
    if !want_grad {
        return (-log_z, None);
    }

    let mut beta = vec![ninf; t_len * s_len];
    beta[last + s_len - 1] = lp(t_len - 1, label(s_len - 1));
    if s_len > 1 {
        beta[last + s_len - 2] = lp(t_len - 1, label(s_len - 2));
    }
    for t in (0..t_len - 1).rev() {
        for s in 0..s_len {
            let mut acc = beta[(t + 1) * s_len + s];
            if s + 1 < s_len {
                acc = lse2(acc, beta[(t + 1) * s_len + s + 1]);
            }
            if s + 2 < s_len && skip_ok(s + 2) {
                acc = lse2(acc, beta[(t + 1) * s_len + s + 2]);
            }
            beta[t * s_len + s] = acc + lp(t, label(s));
        }
    }

    let mut grad = vec![0.0; t_len * v];
    for t in 0..t_len {
        for s in 0..s_len {
            let occ = alpha[t * s_len + s] + beta[t * s_len + s] - lp(t, label(s));
            if occ > ninf {
                grad[t * v + label(s)] -= (occ - log_z).exp();
            }
        }
    }
    (-log_z, Some(grad))
}

/// Negative log-likelihood of `target` under the log-probabilities
/// `log_probs: [T, V]`, without gradient bookkeeping. Returns `+∞` when no
/// alignment exists.
pub fn ctc_nll(log_probs: &Tensor, target: &[usize], blank: usize) -> f64 {
    forward_backward(log_probs, target, blank, false).0
}

/// Per-position probability rows over a vocabulary that includes the blank.
#[derive(Debug, Clone, PartialEq)]
pub struct CtcDistribution {
    probs: Tensor,
    blank: usize,
}

impl CtcDistribution {
    pub fn new(probs: Tensor, blank: usize) -> Result<Self, CtcError> {
        if blank >= probs.cols() {
            return Err(CtcError::BlankOutOfRange {
                blank,
                vocab: probs.cols(),
            });
        }
        for r in 0..probs.rows() {
            let row = probs.row(r);
            let sum: f64 = row.iter().sum();
            let min = row.iter().copied().fold(f64::INFINITY, f64::min);
            if (sum - 1.0).abs() > 1e-9 || min < 0.0 {
                return Err(CtcError::NotDistribution { row: r, sum, min });
            }
        }
        Ok(Self { probs, blank })
    }

    /// Builds from log-probabilities (e.g. a log-softmax output).
    pub fn from_log_probs(log_probs: &Tensor, blank: usize) -> Result<Self, CtcError> {
        let data = log_probs.data().iter().map(|v| v.exp()).collect();
        Self::new(Tensor::from_parts(log_probs.shape().to_vec(), data), blank)
    }

    pub fn len(&self) -> usize {
        self.probs.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn blank(&self) -> usize {
        self.blank
    }

    pub fn probs(&self) -> &Tensor {
        &self.probs
    }

    /// Per-position argmax labels; ties go to the lowest id.
    pub fn argmax_path(&self) -> Vec<usize> {
        self.probs.argmax_rows()
    }

    /// Argmax path followed by collapsing.
    pub fn greedy_decode(&self) -> Vec<usize> {
        collapse(&self.argmax_path(), self.blank)
    }

    /// Expected number of emitted tokens in each prefix:
    /// `N_j = Σ_{m≤j} (1 − p(blank|m) − Σ_{v≠blank} p(v|m)·p(v|m−1))`, with
    /// `p(·|0) = 0`.
    pub fn expected_prefix_counts(&self) -> PrefixCounts {
        let v = self.probs.cols();
        let mut counts = Vec::with_capacity(self.len());
        let mut acc = 0.0;
        for m in 0..self.len() {
            let cur = self.probs.row(m);
            let mut repeat = 0.0;
            if m > 0 {
                let prev = self.probs.row(m - 1);
                for k in (0..v).filter(|&k| k != self.blank) {
                    repeat += cur[k] * prev[k];
                }
            }
            acc += 1.0 - cur[self.blank] - repeat;
            counts.push(acc);
        }
        PrefixCounts(counts)
    }

    /// `|collapse(argmax[..j])|` for every prefix length `j`.
    pub fn discrete_prefix_counts(&self) -> PrefixCounts {
        let path = self.argmax_path();
        let mut counts = Vec::with_capacity(path.len());
        let mut n = 0usize;
        let mut prev = None;
        for &t in &path {
            if Some(t) != prev && t != self.blank {
                n += 1;
            }
            prev = Some(t);
            counts.push(n as f64);
        }
        PrefixCounts(counts)
    }
}

/// `N_1..N_T`: tokens attributable to each input prefix. Index `j − 1` holds `N_j`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrefixCounts(pub Vec<f64>);

impl PrefixCounts {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// `N_j` for 1-based `j`; `N_0 = 0`.
    pub fn at(&self, j: usize) -> f64 {
        if j == 0 {
            0.0
        } else {
            self.0[j - 1]
        }
    }

    pub fn last(&self) -> f64 {
        self.0.last().copied().unwrap_or(0.0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Graph;

    const A: usize = 3;
    const B: usize = 4;

    #[test]
    fn collapse_examples() {
        assert_eq!(collapse(&[A, A, BLANK, A, B], BLANK), vec![A, A, B]);
        assert_eq!(collapse(&[BLANK, BLANK, BLANK], BLANK), Vec::<usize>::new());
        assert_eq!(collapse(&[A, BLANK, A], BLANK), vec![A, A]);
    }

    fn uniform_log(t: usize, v: usize) -> Tensor {
        Tensor::full(&[t, v], (1.0 / v as f64).ln())
    }

    #[test]
    fn two_frame_uniform_matches_enumeration() {
        // Vocabulary {φ, a}: blank at column 0, 'a' at column 1.
        // Valid paths for [a]: (a,a), (a,φ), (φ,a) → p = 3/4.
        let loss = ctc_nll(&uniform_log(2, 2), &[1], 0);
        assert!((loss - (-(0.75f64).ln())).abs() < 1e-12);
        assert!((loss - 0.28768).abs() < 1e-5);
    }

    #[test]
    fn one_hot_valid_path_has_zero_loss() {
        // path [a, φ, a, b] spells [a, a, b]
        let mut lp = Tensor::full(&[4, 5], f64::NEG_INFINITY);
        for (t, &k) in [A, BLANK, A, B].iter().enumerate() {
            lp.row_mut(t)[k] = 0.0;
        }
        assert_eq!(ctc_nll(&lp, &[A, A, B], BLANK), 0.0);
    }

    #[test]
    fn infeasible_is_infinite() {
        assert_eq!(ctc_nll(&uniform_log(2, 5), &[A, A], BLANK), f64::INFINITY);
        assert_eq!(ctc_nll(&uniform_log(2, 5), &[A, B, A], BLANK), f64::INFINITY);
        let mut g = Graph::new();
        let x = g.leaf(uniform_log(1, 5), true);
        let l = g.ctc_loss(x, &[A, B], BLANK).unwrap();
        assert_eq!(g.value(l).item(), f64::INFINITY);
        let grads = g.backward(l).unwrap();
        assert!(grads.get(x).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn empty_target_is_all_blank() {
        let loss = ctc_nll(&uniform_log(3, 4), &[], BLANK);
        assert!((loss - 3.0 * 4f64.ln()).abs() < 1e-12);
    }

    fn one_hot(path: &[usize], v: usize) -> CtcDistribution {
        let mut p = Tensor::zeros(&[path.len(), v]);
        for (t, &k) in path.iter().enumerate() {
            p.row_mut(t)[k] = 1.0;
        }
        CtcDistribution::new(p, BLANK).unwrap()
    }

    #[test]
    fn greedy_examples() {
        assert_eq!(one_hot(&[A, A, BLANK, B], 5).greedy_decode(), vec![A, B]);
        assert!(one_hot(&[BLANK, BLANK], 5).greedy_decode().is_empty());
        let tie = CtcDistribution::new(Tensor::from_rows(&[vec![0.0, 0.0, 0.2, 0.4, 0.4]]), BLANK).unwrap();
        assert_eq!(tie.greedy_decode(), vec![A]);
    }

    #[test]
    fn expected_counts_one_hot() {
        let d = one_hot(&[A, BLANK, A, A, B], 5);
        assert_eq!(d.expected_prefix_counts().0, vec![1.0, 1.0, 2.0, 2.0, 3.0]);
        assert_eq!(d.discrete_prefix_counts().0, vec![1.0, 1.0, 2.0, 2.0, 3.0]);
        let blank = one_hot(&[BLANK; 4], 5);
        assert!(blank.expected_prefix_counts().0.iter().all(|&n| n == 0.0));
    }

    #[test]
    fn rejects_non_distribution() {
        let bad = Tensor::from_rows(&[vec![0.5, 0.6, 0.0]]);
        assert!(matches!(
            CtcDistribution::new(bad, BLANK),
            Err(CtcError::NotDistribution { row: 0, .. })
        ));
    }
}
