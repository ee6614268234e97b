//! Corpus-level BLEU-4 and ROUGE-L.
//!
//! BLEU follows the original corpus-level definition: modified n-gram
//! precision with clipping, geometric mean over n = 1..4, brevity penalty
//! `exp(1 − r/c)` when the hypothesis corpus is shorter than the reference,
//! and no smoothing (any zero corpus-level n-gram count gives 0). ROUGE-L is
//! the LCS-based F-score with a β²-weighted harmonic mean, averaged over
//! pairs. Tokens are compared as given: whitespace-split, case-preserved.

use crate::error::{Error, Result};
use std::collections::HashMap;

/// Default β of the ROUGE-L F-score, matching the historical reference
/// implementation.
pub const ROUGE_BETA: f64 = 1.2;

/// One hypothesis/reference pair (single reference).
#[derive(Clone, Debug)]
pub struct EvalPair {
    pub hypothesis: Vec<String>,
    pub reference: Vec<String>,
}

impl EvalPair {
    pub fn new(hypothesis: &str, reference: &str) -> Self {
        EvalPair {
            hypothesis: hypothesis.split_whitespace().map(str::to_string).collect(),
            reference: reference.split_whitespace().map(str::to_string).collect(),
        }
    }
}

fn ngram_counts(tokens: &[String], n: usize) -> HashMap<&[String], usize> {
    let mut counts = HashMap::new();
    if tokens.len() >= n {
        for window in tokens.windows(n) {
            *counts.entry(window).or_insert(0) += 1;
        }
    }
    counts
}

/// Corpus-level BLEU in [0, 100].
pub fn bleu(corpus: &[EvalPair], max_n: usize) -> Result<f64> {
    if corpus.is_empty() {
        return Err(Error::Input("BLEU over an empty corpus".into()));
    }
    if max_n == 0 {
        return Err(Error::Config("BLEU needs max_n >= 1".into()));
    }
    let mut log_precision_sum = 0.0;
    for n in 1..=max_n {
        let mut matched = 0usize;
        let mut total = 0usize;
        for pair in corpus {
            let hyp = ngram_counts(&pair.hypothesis, n);
            let reference = ngram_counts(&pair.reference, n);
            for (gram, &count) in &hyp {
                total += count;
                matched += count.min(reference.get(gram).copied().unwrap_or(0));
            }
        }
        if matched == 0 || total == 0 {
            return Ok(0.0);
        }
        log_precision_sum += (matched as f64 / total as f64).ln();
    }
    let c: usize = corpus.iter().map(|p| p.hypothesis.len()).sum();
    let r: usize = corpus.iter().map(|p| p.reference.len()).sum();
    let brevity = if c < r { (1.0 - r as f64 / c as f64).exp() } else { 1.0 };
    Ok(100.0 * brevity * (log_precision_sum / max_n as f64).exp())
}

/// Corpus-level BLEU-4.
pub fn bleu4(corpus: &[EvalPair]) -> Result<f64> {
    bleu(corpus, 4)
}

fn lcs_len(a: &[String], b: &[String]) -> usize {
    let (n, m) = (a.len(), b.len());
    let mut prev = vec![0usize; m + 1];
    let mut cur = vec![0usize; m + 1];
    for i in 1..=n {
        for j in 1..=m {
            cur[j] = if a[i - 1] == b[j - 1] { prev[j - 1] + 1 } else { prev[j].max(cur[j - 1]) };
        }
        std::mem::swap(&mut prev, &mut cur);
        cur.fill(0);
    }
    prev[m]
}

/// Corpus-averaged ROUGE-L F-score in [0, 100]. An empty hypothesis scores 0
/// for its pair.
pub fn rouge_l(corpus: &[EvalPair], beta: f64) -> Result<f64> {
    if corpus.is_empty() {
        return Err(Error::Input("ROUGE-L over an empty corpus".into()));
    }
    let beta_sq = beta * beta;
    let mut sum = 0.0;
    for pair in corpus {
        if pair.hypothesis.is_empty() || pair.reference.is_empty() {
            continue;
        }
        let lcs = lcs_len(&pair.hypothesis, &pair.reference) as f64;
        let p = lcs / pair.hypothesis.len() as f64;
        let r = lcs / pair.reference.len() as f64;
        let denom = r + beta_sq * p;
        if denom > 0.0 {
            sum += (1.0 + beta_sq) * p * r / denom;
        }
    }
    Ok(100.0 * sum / corpus.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha20Rng;

    #[test]
    fn identical_corpus_scores_100() {
        let corpus = vec![
            EvalPair::new("the cat sat on the mat", "the cat sat on the mat"),
            EvalPair::new("a b c d e", "a b c d e"),
        ];
        assert_eq!(bleu4(&corpus).unwrap(), 100.0);
        assert_eq!(rouge_l(&corpus, ROUGE_BETA).unwrap(), 100.0);
    }

    #[test]
    fn disjoint_vocabulary_scores_0() {
        let corpus = vec![EvalPair::new("x y z w", "a b c d")];
        assert_eq!(bleu4(&corpus).unwrap(), 0.0);
        assert_eq!(rouge_l(&corpus, ROUGE_BETA).unwrap(), 0.0);
    }

    #[test]
    fn bleu_brevity_penalty_oracle() {
        // hyp "a b c d" vs ref "a b c d e": precisions all 1, BP = exp(−1/4)
        let corpus = vec![EvalPair::new("a b c d", "a b c d e")];
        let want = 100.0 * (1.0f64 - 5.0 / 4.0).exp();
        let got = bleu4(&corpus).unwrap();
        assert!((got - want).abs() < 1e-9);
        assert!((got - 77.88).abs() < 0.01);
    }

    #[test]
    fn bleu_no_smoothing_zero_ngram_gives_zero() {
        // shares unigrams but no 4-gram
        let corpus = vec![EvalPair::new("a b x c d", "a b c d e")];
        assert_eq!(bleu4(&corpus).unwrap(), 0.0);
    }

    #[test]
    fn bleu_is_permutation_invariant_over_corpus_order() {
        let mut rng = ChaCha20Rng::seed_from_u64(80);
        let vocab = ["a", "b", "c", "d", "e", "f"];
        let mut corpus: Vec<EvalPair> = (0..12)
            .map(|_| {
                let sent = |rng: &mut ChaCha20Rng| {
                    (0..rng.random_range(4..9))
                        .map(|_| vocab[rng.random_range(0..vocab.len())])
                        .collect::<Vec<_>>()
                        .join(" ")
                };
                let h = sent(&mut rng);
                let r = sent(&mut rng);
                EvalPair::new(&h, &r)
            })
            .collect();
        let forward = bleu4(&corpus).unwrap();
        corpus.reverse();
        corpus.swap(1, 7);
        assert_eq!(bleu4(&corpus).unwrap(), forward);
    }

    #[test]
    fn appending_junk_strictly_decreases_bleu() {
        let base: Vec<EvalPair> = vec![
            EvalPair::new("a b c d e", "a b c d e"),
            EvalPair::new("b c d e f", "b c d e f"),
        ];
        let appended: Vec<EvalPair> = base
            .iter()
            .map(|p| EvalPair {
                hypothesis: p.hypothesis.iter().cloned().chain(["zzz".to_string()]).collect(),
                reference: p.reference.clone(),
            })
            .collect();
        assert!(bleu4(&appended).unwrap() < bleu4(&base).unwrap());
    }

    #[test]
    fn rouge_l_direct_lcs_oracle() {
        // hyp "a b c", ref "a c d", β=1: LCS=2, P=R=2/3 → 66.67
        let corpus = vec![EvalPair::new("a b c", "a c d")];
        let got = rouge_l(&corpus, 1.0).unwrap();
        assert!((got - 100.0 * (2.0 / 3.0)).abs() < 1e-9);
        assert!((got - 66.67).abs() < 0.01);
    }

    #[test]
    fn rouge_l_empty_hypothesis_counts_zero() {
        let corpus = vec![
            EvalPair { hypothesis: vec![], reference: vec!["a".into(), "b".into()] },
            EvalPair::new("a b", "a b"),
        ];
        assert_eq!(rouge_l(&corpus, ROUGE_BETA).unwrap(), 50.0);
    }

    #[test]
    fn rouge_l_bounded_and_monotone_under_reference_copy() {
        let mut rng = ChaCha20Rng::seed_from_u64(81);
        let vocab = ["a", "b", "c", "d"];
        for _ in 0..20 {
            let sent = |rng: &mut ChaCha20Rng| {
                (0..rng.random_range(3..8))
                    .map(|_| vocab[rng.random_range(0..vocab.len())])
                    .collect::<Vec<_>>()
                    .join(" ")
            };
            let mut corpus: Vec<EvalPair> = (0..5)
                .map(|_| {
                    let h = sent(&mut rng);
                    let r = sent(&mut rng);
                    EvalPair::new(&h, &r)
                })
                .collect();
            let before = rouge_l(&corpus, ROUGE_BETA).unwrap();
            assert!((0.0..=100.0).contains(&before));
            let idx = rng.random_range(0..corpus.len());
            corpus[idx].hypothesis = corpus[idx].reference.clone();
            let after = rouge_l(&corpus, ROUGE_BETA).unwrap();
            assert!(after >= before - 1e-12);
        }
    }

    #[test]
    fn empty_corpus_is_an_error() {
        assert!(bleu4(&[]).is_err());
        assert!(rouge_l(&[], ROUGE_BETA).is_err());
    }
}
