//! Beam search with unigram-repeat blocking, attention-based UNK
//! replacement, and the Jaccard-distance protocol for selecting three
//! diverse distractors.

use crate::corpus::{EOS, UNK};
use crate::error::{DgError, Result};
use serde::{Deserialize, Serialize};
use std::collections::HashSet;

/// One decoding step of any sequence model usable under beam search.
pub struct BeamStep<S> {
    pub log_probs: Vec<f64>,
    /// Attention over article tokens at this step (may be empty for models
    /// without attention).
    pub attention: Vec<f64>,
    pub state: S,
}

pub trait BeamModel {
    type State: Clone;
    fn step(&mut self, state: &Self::State, input_token: usize) -> BeamStep<Self::State>;
}

/// A finished hypothesis.
#[derive(Debug, Clone)]
pub struct BeamHypothesis {
    pub tokens: Vec<usize>,
    pub log_likelihood: f64,
    /// One combined-attention vector per emitted token.
    pub attention: Vec<Vec<f64>>,
}

struct LiveBeam<S> {
    tokens: Vec<usize>,
    log_likelihood: f64,
    attention: Vec<Vec<f64>>,
    state: S,
    next_input: usize,
}

/// Length-bounded beam search. Expansions that would repeat a token already
/// in the hypothesis (including the question-derived first input) are
/// pruned; hypotheses finish at EOS or `max_len`. Results are sorted by
/// decreasing cumulative log-likelihood.
pub fn beam_search<M: BeamModel>(
    model: &mut M,
    initial_state: M::State,
    first_input: usize,
    k: usize,
    max_len: usize,
) -> Result<Vec<BeamHypothesis>> {
    if k < 1 {
        return Err(DgError::config("beam size must be at least 1"));
    }
    let mut live = vec![LiveBeam {
        tokens: Vec::new(),
        log_likelihood: 0.0,
        attention: Vec::new(),
        state: initial_state,
        next_input: first_input,
    }];
    let mut finished: Vec<BeamHypothesis> = Vec::new();

    for _ in 0..max_len {
        if live.is_empty() {
            break;
        }
        let steps: Vec<BeamStep<M::State>> = live
            .iter()
            .map(|b| model.step(&b.state, b.next_input))
            .collect();

        // (cumulative score, live index, token)
        let mut candidates: Vec<(f64, usize, usize)> = Vec::new();
        for (bi, (beam, step)) in live.iter().zip(&steps).enumerate() {
            for (token, &lp) in step.log_probs.iter().enumerate() {
                let repeated =
                    token == first_input || beam.tokens.contains(&token);
                if token != EOS && repeated {
                    continue;
                }
                candidates.push((beam.log_likelihood + lp, bi, token));
            }
        }
        candidates.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap());
        candidates.truncate(k);

        let mut next_live = Vec::new();
        for (score, bi, token) in candidates {
            let beam = &live[bi];
            let step = &steps[bi];
            let mut tokens = beam.tokens.clone();
            let mut attention = beam.attention.clone();
            attention.push(step.attention.clone());
            if token == EOS {
                finished.push(BeamHypothesis {
                    tokens,
                    log_likelihood: score,
                    attention,
                });
            } else {
                tokens.push(token);
                next_live.push(LiveBeam {
                    tokens,
                    log_likelihood: score,
                    attention,
                    state: step.state.clone(),
                    next_input: token,
                });
            }
        }
        live = next_live;
        // once k hypotheses have finished, nothing still live can do better
        // than its current score plus a non-positive increment, but scores
        // are compared globally at the end, so keep expanding until k live
        // beams are exhausted or the length bound is reached.
        if live.len() > k {
            live.truncate(k);
        }
    }

    // length-bounded leftovers count as hypotheses too
    for beam in live {
        if !beam.tokens.is_empty() {
            finished.push(BeamHypothesis {
                tokens: beam.tokens,
                log_likelihood: beam.log_likelihood,
                attention: beam.attention,
            });
        }
    }
    finished.sort_by(|a, b| b.log_likelihood.partial_cmp(&a.log_likelihood).unwrap());
    Ok(finished)
}

/// Replace each UNK output token by the article token with the largest
/// combined-attention weight at that step; exact ties go to the earliest
/// article position. Other ids are decoded through the vocabulary.
pub fn replace_unk(
    hyp: &BeamHypothesis,
    article_tokens: &[String],
    vocab: &crate::corpus::Vocabulary,
) -> Vec<String> {
    hyp.tokens
        .iter()
        .enumerate()
        .map(|(step, &token)| {
            if token == UNK && !hyp.attention[step].is_empty() {
                let mut best = 0;
                for (pos, &w) in hyp.attention[step].iter().enumerate() {
                    if w > hyp.attention[step][best] {
                        best = pos;
                    }
                }
                article_tokens
                    .get(best)
                    .cloned()
                    .unwrap_or_else(|| vocab.token(UNK).to_string())
            } else {
                vocab.token(token).to_string()
            }
        })
        .collect()
}

/// Jaccard distance over unique tokens: `1 − |A∩B| / |A∪B|`; the distance
/// between two empty sets is defined as 0.
pub fn jaccard_distance(a: &[String], b: &[String]) -> f64 {
    let sa: HashSet<&str> = a.iter().map(|s| s.as_str()).collect();
    let sb: HashSet<&str> = b.iter().map(|s| s.as_str()).collect();
    let union = sa.union(&sb).count();
    if union == 0 {
        return 0.0;
    }
    let inter = sa.intersection(&sb).count();
    1.0 - inter as f64 / union as f64
}

/// Three diverse distractors with per-slot bookkeeping.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GenerationResult {
    pub distractors: Vec<Vec<String>>,
    pub log_likelihoods: Vec<f64>,
    /// True when the slot honored the pairwise Jaccard-distance > 0.5 rule;
    /// false marks a fallback pick from an exhausted pool.
    pub diversity_flags: Vec<bool>,
}

/// Pick d1 = best hypothesis; d2, d3 = highest-likelihood hypotheses whose
/// Jaccard distance to every earlier pick exceeds 0.5. When the pool runs
/// out, fall back to the best unused hypothesis and clear that slot's flag.
pub fn select_diverse(ranked: &[(Vec<String>, f64)]) -> Result<GenerationResult> {
    if ranked.is_empty() {
        return Err(DgError::contract("empty hypothesis pool"));
    }
    let mut used: Vec<usize> = vec![0];
    let mut flags = vec![true];
    for _slot in 1..3 {
        let picked: Vec<&Vec<String>> = used.iter().map(|&i| &ranked[i].0).collect();
        let diverse = (0..ranked.len()).find(|i| {
            !used.contains(i)
                && picked
                    .iter()
                    .all(|p| jaccard_distance(&ranked[*i].0, p) > 0.5)
        });
        match diverse {
            Some(i) => {
                used.push(i);
                flags.push(true);
            }
            None => match (0..ranked.len()).find(|i| !used.contains(i)) {
                Some(i) => {
                    used.push(i);
                    flags.push(false);
                }
                None => break,
            },
        }
    }
    Ok(GenerationResult {
        distractors: used.iter().map(|&i| ranked[i].0.clone()).collect(),
        log_likelihoods: used.iter().map(|&i| ranked[i].1).collect(),
        diversity_flags: flags,
    })
}
