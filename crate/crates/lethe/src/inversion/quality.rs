//! Inversion quality: whitespace-token F1 and corpus BLEU (uniform 1–4-gram
//! weights with brevity penalty, no smoothing).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::token_f1;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct QualityReport {
    pub token_f1: f64,
    pub bleu: f64,
}

/// Mean per-pair token F1 and corpus BLEU over (reference, hypothesis) pairs.
pub fn inversion_quality(pairs: &[(String, String)]) -> Result<QualityReport> {
    if pairs.is_empty() {
        return Err(Error::Contract("inversion_quality: no pairs".into()));
    }
    let f1 = pairs
        .iter()
        .map(|(x, x_hat)| token_f1(x, x_hat))
        .sum::<f64>()
        / pairs.len() as f64;
    Ok(QualityReport {
        token_f1: f1,
        bleu: corpus_bleu(pairs),
    })
}

fn ngram_counts(tokens: &[&str], n: usize) -> std::collections::BTreeMap<Vec<String>, usize> {
    let mut counts = std::collections::BTreeMap::new();
    if tokens.len() < n {
        return counts;
    }
    for w in tokens.windows(n) {
        let key: Vec<String> = w.iter().map(|s| s.to_string()).collect();
        *counts.entry(key).or_insert(0) += 1;
    }
    counts
}

/// Corpus-level BLEU with uniform 1–4-gram weights: clipped n-gram matches
/// pooled over the corpus, geometric mean, brevity penalty. Any empty
/// precision bucket zeroes the score.
pub fn corpus_bleu(pairs: &[(String, String)]) -> f64 {
    const MAX_N: usize = 4;
    let mut matches = [0usize; MAX_N];
    let mut totals = [0usize; MAX_N];
    let mut ref_len = 0usize;
    let mut hyp_len = 0usize;

    for (reference, hypothesis) in pairs {
        let ref_tokens: Vec<&str> = reference.split_whitespace().collect();
        let hyp_tokens: Vec<&str> = hypothesis.split_whitespace().collect();
        ref_len += ref_tokens.len();
        hyp_len += hyp_tokens.len();
        for n in 1..=MAX_N {
            let ref_counts = ngram_counts(&ref_tokens, n);
            let hyp_counts = ngram_counts(&hyp_tokens, n);
            for (gram, &c) in &hyp_counts {
                totals[n - 1] += c;
                if let Some(&r) = ref_counts.get(gram) {
                    matches[n - 1] += c.min(r);
                }
            }
        }
    }

    if hyp_len == 0 {
        return 0.0;
    }
    let mut log_sum = 0.0f64;
    for n in 0..MAX_N {
        if totals[n] == 0 || matches[n] == 0 {
            return 0.0;
        }
        log_sum += (matches[n] as f64 / totals[n] as f64).ln() / MAX_N as f64;
    }
    let bp = if hyp_len >= ref_len {
        1.0
    } else {
        (1.0 - ref_len as f64 / hyp_len as f64).exp()
    };
    bp * log_sum.exp()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_reconstruction_scores_one() {
        let pairs = vec![
            ("the quick brown fox jumps".to_string(), "the quick brown fox jumps".to_string()),
            ("over the lazy dog today".to_string(), "over the lazy dog today".to_string()),
        ];
        let q = inversion_quality(&pairs).unwrap();
        assert_eq!(q.token_f1, 1.0);
        assert!((q.bleu - 1.0).abs() < 1e-12);
    }

    #[test]
    fn disjoint_vocabulary_scores_zero() {
        let pairs = vec![("a b c d".to_string(), "w x y z".to_string())];
        let q = inversion_quality(&pairs).unwrap();
        assert_eq!(q.token_f1, 0.0);
        assert_eq!(q.bleu, 0.0);
    }

    #[test]
    fn f1_spec_example_and_bleu_oracle() {
        // x = "a b c d", x̂ = "a b c e": multiset precision = recall = 3/4.
        let pairs = vec![("a b c d".to_string(), "a b c e".to_string())];
        let q = inversion_quality(&pairs).unwrap();
        assert!((q.token_f1 - 0.75).abs() < 1e-12);
        // Hand n-gram oracle: p1 = 3/4, p2 = 2/3, p3 = 1/2, p4 = 0/1 → BLEU 0.
        assert_eq!(q.bleu, 0.0);

        // Longer pair with all buckets non-empty:
        // ref "a b c d e", hyp "a b c d x":
        // p1 = 4/5, p2 = 3/4, p3 = 2/3, p4 = 1/2, BP = 1 (equal length)
        let pairs = vec![("a b c d e".to_string(), "a b c d x".to_string())];
        let expect = (0.8f64 * 0.75 * (2.0 / 3.0) * 0.5).powf(0.25);
        let q = inversion_quality(&pairs).unwrap();
        assert!((q.bleu - expect).abs() < 1e-12, "{} vs {expect}", q.bleu);
    }

    #[test]
    fn brevity_penalty_applies_to_short_hypotheses() {
        // hyp is a strict prefix: precisions are 1, BP = exp(1 − r/c).
        let pairs = vec![("a b c d e f g h".to_string(), "a b c d e f".to_string())];
        let q = inversion_quality(&pairs).unwrap();
        let expect = (1.0f64 - 8.0 / 6.0).exp();
        assert!((q.bleu - expect).abs() < 1e-12);
    }
}
