//! Corpus-level BLEU over token sequences.

use std::collections::HashMap;
use std::hash::Hash;

use super::EvalError;

/// Highest n-gram order used by [`corpus_bleu`].
pub const BLEU_ORDER: usize = 4;

fn ngram_counts<T: Eq + Hash>(tokens: &[T], n: usize) -> HashMap<&[T], usize> {
    let mut counts = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *counts.entry(w).or_insert(0) += 1;
        }
    }
    counts
}

/// Corpus BLEU in `[0, 100]` with a brevity penalty.
///
/// Clipped n-gram matches and hypothesis n-gram totals are summed over the
/// corpus for orders 1 to 4. A zero match count for orders 2 and above is
/// smoothed to `1 / (total + 1)`; a zero unigram match gives a score of 0.
/// Every reference must be non-empty.
pub fn corpus_bleu<T: Eq + Hash>(hypotheses: &[Vec<T>], references: &[Vec<T>]) -> Result<f64, EvalError> {
    if hypotheses.len() != references.len() {
        return Err(EvalError::LengthMismatch {
            hypotheses: hypotheses.len(),
            references: references.len(),
        });
    }
    if let Some(i) = references.iter().position(Vec::is_empty) {
        return Err(EvalError::EmptyReference(i));
    }
    let mut matches = [0usize; BLEU_ORDER];
    let mut totals = [0usize; BLEU_ORDER];
    let mut hyp_len = 0;
    let mut ref_len = 0;
    for (hyp, reference) in hypotheses.iter().zip(references) {
        hyp_len += hyp.len();
        ref_len += reference.len();
        for n in 1..=BLEU_ORDER {
            let ref_counts = ngram_counts(reference, n);
            for (gram, count) in ngram_counts(hyp, n) {
                matches[n - 1] += count.min(ref_counts.get(gram).copied().unwrap_or(0));
                totals[n - 1] += count;
            }
        }
    }
    if hyp_len == 0 || matches[0] == 0 {
        return Ok(0.0);
    }
    let mut log_precision = 0.0;
    for n in 0..BLEU_ORDER {
        let p = if n > 0 && matches[n] == 0 {
            1.0 / (totals[n] as f64 + 1.0)
        } else {
            matches[n] as f64 / totals[n] as f64
        };
        log_precision += p.ln();
    }
    let brevity = if hyp_len > ref_len {
        1.0
    } else {
        (1.0 - ref_len as f64 / hyp_len as f64).exp()
    };
    Ok(100.0 * brevity * (log_precision / BLEU_ORDER as f64).exp())
}
