//! Greedy and beam-search generation with GNMT-style length penalty.
//!
//! Decoding is driven through a [`ScoreModel`]: anything that maps a decoder
//! prefix (starting with `<bos>`) to next-token log-probabilities. Beam
//! widths 0 and 1 both mean greedy search; ties are broken deterministically
//! toward the lexicographically smaller token sequence.

use crate::data::{BOS, EOS, PAD};
use crate::error::{Error, Result};

/// Next-token scorer: log-probabilities over the vocabulary given a prefix.
pub trait ScoreModel {
    fn next_log_probs(&mut self, prefix: &[u32]) -> Result<Vec<f64>>;
}

impl<T: FnMut(&[u32]) -> Result<Vec<f64>>> ScoreModel for T {
    fn next_log_probs(&mut self, prefix: &[u32]) -> Result<Vec<f64>> {
        self(prefix)
    }
}

/// `((5 + length)/6)^α`; 1.0 at α = 0 or length 1.
pub fn length_penalty(length: usize, alpha: f64) -> f64 {
    debug_assert!(length >= 1, "length penalty needs length >= 1");
    ((5.0 + length as f64) / 6.0).powf(alpha)
}

/// A partial or complete decoded sequence.
#[derive(Clone, Debug)]
pub struct Hypothesis {
    /// Token ids including the leading `<bos>` (and trailing `<eos>` once
    /// finished).
    pub tokens: Vec<u32>,
    pub log_prob: f64,
    pub finished: bool,
}

impl Hypothesis {
    /// Generated length: tokens after `<bos>`, including `<eos>`.
    pub fn gen_len(&self) -> usize {
        self.tokens.len().saturating_sub(1)
    }

    /// Length-penalized score.
    pub fn score(&self, alpha: f64) -> f64 {
        self.log_prob / length_penalty(self.gen_len().max(1), alpha)
    }
}

/// Decoding result: the translation without any reserved tokens, plus the
/// winning hypothesis' raw log-probability and penalized score. `truncated`
/// is set when no hypothesis finished within `max_len`.
#[derive(Clone, Debug, PartialEq)]
pub struct DecodeResult {
    pub tokens: Vec<u32>,
    pub log_prob: f64,
    pub score: f64,
    pub truncated: bool,
}

fn strip_specials(tokens: &[u32]) -> Vec<u32> {
    tokens.iter().copied().filter(|&t| t != PAD && t != BOS && t != EOS).collect()
}

/// Greedy search: append the argmax token (ties to the lowest id) until
/// `<eos>` or `max_len` generated tokens.
pub fn greedy_decode<M: ScoreModel>(model: &mut M, max_len: usize) -> Result<DecodeResult> {
    if max_len == 0 {
        return Err(Error::Config("max_len must be at least 1".into()));
    }
    let mut hyp = Hypothesis { tokens: vec![BOS], log_prob: 0.0, finished: false };
    for _ in 0..max_len {
        let lp = model.next_log_probs(&hyp.tokens)?;
        let mut best: Option<(usize, f64)> = None;
        for (tok, &l) in lp.iter().enumerate() {
            if tok as u32 == PAD || tok as u32 == BOS {
                continue;
            }
            // strict greater-than keeps the lowest token id on ties
            if best.map_or(true, |(_, bl)| l > bl) {
                best = Some((tok, l));
            }
        }
        let (tok, l) = best.ok_or_else(|| Error::Input("vocabulary too small to decode".into()))?;
        hyp.tokens.push(tok as u32);
        hyp.log_prob += l;
        if tok as u32 == EOS {
            hyp.finished = true;
            break;
        }
    }
    Ok(DecodeResult {
        tokens: strip_specials(&hyp.tokens),
        log_prob: hyp.log_prob,
        score: hyp.score(0.0),
        truncated: !hyp.finished,
    })
}

/// Beam search over cumulative log-probabilities with length-penalized final
/// selection. Finished hypotheses are parked; of each step's candidates the
/// top `width` survive. Widths 0 and 1 both reduce to greedy search. If no
/// hypothesis finishes within `max_len`, the best unfinished one is returned
/// with the truncation flag set.
pub fn beam_search<M: ScoreModel>(
    model: &mut M,
    width: usize,
    alpha: f64,
    max_len: usize,
) -> Result<DecodeResult> {
    if max_len == 0 {
        return Err(Error::Config("max_len must be at least 1".into()));
    }
    if alpha < 0.0 {
        return Err(Error::Config(format!("length penalty alpha must be >= 0, got {alpha}")));
    }
    let width = width.max(1);
    let mut live = vec![Hypothesis { tokens: vec![BOS], log_prob: 0.0, finished: false }];
    let mut finished: Vec<Hypothesis> = Vec::new();

    for _ in 0..max_len {
        let mut candidates: Vec<Hypothesis> = Vec::new();
        for hyp in &live {
            let lp = model.next_log_probs(&hyp.tokens)?;
            for (tok, &l) in lp.iter().enumerate() {
                let tok = tok as u32;
                if tok == PAD || tok == BOS {
                    continue;
                }
                let mut tokens = hyp.tokens.clone();
                tokens.push(tok);
                candidates.push(Hypothesis {
                    tokens,
                    log_prob: hyp.log_prob + l,
                    finished: tok == EOS,
                });
            }
        }
        candidates.sort_by(|a, b| {
            b.log_prob
                .partial_cmp(&a.log_prob)
                .expect("finite log-probs")
                .then_with(|| a.tokens.cmp(&b.tokens))
        });
        live = Vec::with_capacity(width);
        for hyp in candidates.into_iter().take(width) {
            if hyp.finished {
                finished.push(hyp);
            } else {
                live.push(hyp);
            }
        }
        if live.is_empty() {
            break;
        }
    }

    let pick = |pool: &[Hypothesis]| -> Hypothesis {
        let mut best = &pool[0];
        for h in &pool[1..] {
            let (hs, bs) = (h.score(alpha), best.score(alpha));
            if hs > bs || (hs == bs && h.tokens < best.tokens) {
                best = h;
            }
        }
        best.clone()
    };

    let (winner, truncated) =
        if finished.is_empty() { (pick(&live), true) } else { (pick(&finished), false) };
    Ok(DecodeResult {
        tokens: strip_specials(&winner.tokens),
        log_prob: winner.log_prob,
        score: winner.score(alpha),
        truncated,
    })
}

// ── model-backed translation ─────────────────────────────────────────

use crate::data::{single_batch, MultiChannelSample, Vocabulary};
use crate::model::Model;
use crate::tensor::Scalar;
use rayon::prelude::*;

/// Translate one sample: encode once, then beam-search (widths 0 and 1 are
/// greedy). Returns the decoded tokens.
pub fn translate_sample<F: Scalar>(
    model: &Model<F>,
    sample: &MultiChannelSample<F>,
    vocab: &Vocabulary,
    width: usize,
    alpha: f64,
    max_len: usize,
) -> Result<Vec<String>> {
    let batch = single_batch(sample, vocab);
    let enc = model.encode_for_inference(&batch)?;
    let mut scorer = |prefix: &[u32]| model.score_step(&enc, prefix);
    let result = beam_search(&mut scorer, width, alpha, max_len)?;
    result.tokens.iter().map(|&id| vocab.decode(id).map(str::to_string)).collect()
}

/// Translate a corpus in manifest order, decoding samples in parallel.
pub fn translate_corpus<F: Scalar>(
    model: &Model<F>,
    samples: &[MultiChannelSample<F>],
    vocab: &Vocabulary,
    width: usize,
    alpha: f64,
    max_len: usize,
) -> Result<Vec<Vec<String>>> {
    samples
        .par_iter()
        .map(|s| translate_sample(model, s, vocab, width, alpha, max_len))
        .collect()
}
