//! Distractor decoder: question-based initialization, dynamic hierarchical
//! attention modulated by the static distribution, and the per-step output
//! projection.

use crate::autodiff::{Tape, Var};
use crate::encoder::{bind_lstm, lstm_step, run_lstm, EncodedVars, LstmVars};
use crate::error::{DgError, Result};
use crate::params::{Binder, Variant};
use ndarray::{Array1, ArrayD};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub struct DecoderVars {
    pub embed: Var,
    pub qinit: Vec<LstmVars>,
    pub dec: Vec<LstmVars>,
    pub w_dyn_sent: Var,
    pub w_dyn_word: Var,
    pub w_attn: Var,
    pub w_vocab: Var,
    pub b_vocab: Var,
}

pub fn bind_decoder(
    tape: &mut Tape,
    binder: &mut Binder<'_>,
    embed: Var,
    layers: usize,
) -> DecoderVars {
    DecoderVars {
        embed,
        qinit: (0..layers)
            .map(|l| bind_lstm(tape, binder, &format!("qinit.l{l}")))
            .collect(),
        dec: (0..layers)
            .map(|l| bind_lstm(tape, binder, &format!("dec.l{l}")))
            .collect(),
        w_dyn_sent: binder.leaf(tape, "dyn.w_sent"),
        w_dyn_word: binder.leaf(tape, "dyn.w_word"),
        w_attn: binder.leaf(tape, "out.w_attn"),
        w_vocab: binder.leaf(tape, "out.w_vocab"),
        b_vocab: binder.leaf(tape, "out.b_vocab"),
    }
}

/// Recurrent decoder state: per-layer (hidden, cell) plus the previous
/// output token fed at the next step.
#[derive(Clone)]
pub struct DecoderState {
    pub layers: Vec<(Var, Var)>,
    pub prev_token: usize,
}

/// Source of the static gate for a decoding step.
#[derive(Clone, Copy)]
pub enum GammaMode {
    /// Learned static attention distribution.
    Static(Var),
    /// Uniform over valid sentences (the HRED ablation).
    Uniform,
}

/// Inverted dropout applied during training only.
pub struct DropoutCtx<'a> {
    pub p: f64,
    pub rng: &'a mut ChaCha8Rng,
}

fn apply_dropout(tape: &mut Tape, v: Var, ctx: &mut Option<DropoutCtx<'_>>) -> Var {
    match ctx {
        Some(d) if d.p > 0.0 => {
            let keep = 1.0 - d.p;
            let shape = tape.val(v).shape().to_vec();
            let mask = ArrayD::from_shape_fn(ndarray::IxDyn(&shape), |_| {
                if d.rng.gen::<f64>() < keep {
                    1.0 / keep
                } else {
                    0.0
                }
            });
            tape.mul_const(v, mask)
        }
        _ => v,
    }
}

/// Run the 2-layer unidirectional question encoder and seed the decoder from
/// its per-layer final states; the first decoder input is the question's
/// last token, replacing the begin-of-sequence symbol.
pub fn init_from_question(
    tape: &mut Tape,
    dv: &DecoderVars,
    question_ids: &[usize],
) -> Result<DecoderState> {
    if question_ids.is_empty() {
        return Err(DgError::contract("empty question for decoder initializer"));
    }
    let mut inputs: Vec<Var> = question_ids
        .iter()
        .map(|&i| tape.row(dv.embed, i))
        .collect();
    let mut layers = Vec::with_capacity(dv.qinit.len());
    for w in &dv.qinit {
        let (states, (h_last, c_last)) = run_lstm(tape, w, &inputs);
        layers.push((h_last, c_last));
        inputs = states;
    }
    Ok(DecoderState {
        layers,
        prev_token: *question_ids.last().unwrap(),
    })
}

/// Sentence-level and word-level dynamic attention for the current decoder
/// hidden state. Raw bilinear scores are softmax-normalized: the sentence
/// scores over sentences, the word scores within each sentence.
pub fn dynamic_attention_vars(
    tape: &mut Tape,
    dv: &DecoderVars,
    enc: &EncodedVars,
    dec_hidden: Var,
) -> (Var, Vec<Var>) {
    let v_sent = tape.matvec(dv.w_dyn_sent, dec_hidden);
    let beta_raw = tape.rows_dot(&enc.sentence_states, v_sent);
    let mask = vec![true; enc.sentences.len()];
    let beta = tape.softmax_masked(beta_raw, &mask);

    let v_word = tape.matvec(dv.w_dyn_word, dec_hidden);
    let alpha = enc
        .sentences
        .iter()
        .map(|s| {
            let raw = tape.rows_dot(&s.word_states, v_word);
            let m = vec![true; s.word_states.len()];
            tape.softmax_masked(raw, &m)
        })
        .collect();
    (beta, alpha)
}

/// Combined attention `α̃_{i,j} = α_{i,j} β_i γ_i / Σ α β γ`, flattened in
/// sentence-major token order.
pub fn combine_attention_vars(
    tape: &mut Tape,
    alpha: &[Var],
    beta: Var,
    gamma: GammaMode,
    n_sentences: usize,
) -> Var {
    let products: Vec<Var> = alpha
        .iter()
        .enumerate()
        .map(|(i, &a)| {
            let b_i = tape.index(beta, i);
            let weight = match gamma {
                GammaMode::Static(g) => {
                    let g_i = tape.index(g, i);
                    tape.mul(b_i, g_i)
                }
                GammaMode::Uniform => tape.scale(b_i, 1.0 / n_sentences as f64),
            };
            tape.mul_scalar(a, weight)
        })
        .collect();
    let flat = tape.concat(&products);
    tape.normalize_sum(flat)
}

/// Output of one decoding step.
pub struct StepOutput {
    /// Distribution over the vocabulary.
    pub p_vocab: Var,
    /// Combined attention over valid article tokens, flat sentence-major order.
    pub combined_attention: Var,
    pub state: DecoderState,
}

/// Advance the decoder one step: embed the previous token, run the stacked
/// LSTM, attend over the article per the variant, and project to the
/// vocabulary simplex.
pub fn decode_step(
    tape: &mut Tape,
    dv: &DecoderVars,
    state: &DecoderState,
    enc: &EncodedVars,
    gamma: GammaMode,
    variant: Variant,
    dropout: &mut Option<DropoutCtx<'_>>,
) -> StepOutput {
    let mut x = tape.row(dv.embed, state.prev_token);
    let mut layers = Vec::with_capacity(state.layers.len());
    for (w, &(h, c)) in dv.dec.iter().zip(&state.layers) {
        let (h2, c2) = lstm_step(tape, w, x, h, c);
        layers.push((h2, c2));
        x = apply_dropout(tape, h2, dropout);
    }
    let top_hidden = layers.last().unwrap().0;

    let flat_states = enc.flat_word_states();
    let combined = match variant {
        Variant::Seq2Seq => {
            // flat global attention with the general score function
            let v_word = tape.matvec(dv.w_dyn_word, top_hidden);
            let raw = tape.rows_dot(&flat_states, v_word);
            let mask = vec![true; flat_states.len()];
            tape.softmax_masked(raw, &mask)
        }
        Variant::Full | Variant::Hred => {
            let (beta, alpha) = dynamic_attention_vars(tape, dv, enc, top_hidden);
            let mode = match variant {
                Variant::Hred => GammaMode::Uniform,
                _ => gamma,
            };
            combine_attention_vars(tape, &alpha, beta, mode, enc.sentences.len())
        }
    };

    let context = tape.weighted_sum(combined, &flat_states);
    let cat = tape.concat(&[top_hidden, context]);
    let pre = tape.matvec(dv.w_attn, cat);
    let attn_vec = tape.tanh(pre);
    let attn_vec = apply_dropout(tape, attn_vec, dropout);
    let logits = tape.matvec(dv.w_vocab, attn_vec);
    let logits = tape.add(logits, dv.b_vocab);
    let vocab = tape.val(logits).len();
    let p_vocab = tape.softmax_masked(logits, &vec![true; vocab]);

    StepOutput {
        p_vocab,
        combined_attention: combined,
        state: DecoderState {
            layers,
            prev_token: state.prev_token,
        },
    }
}

// ---- plain-array entry point --------------------------------------------

/// Combine pre-normalized attention distributions; `alpha[i]` holds the
/// within-sentence distribution of sentence `i`. Output is flat
/// sentence-major. Masked sentences (`mask[i] == false`) contribute zeros.
pub fn combine_attention(
    alpha: &[Array1<f64>],
    beta: &Array1<f64>,
    gamma: &Array1<f64>,
    mask: &[bool],
) -> Result<Array1<f64>> {
    let mut flat = Vec::new();
    for (i, a) in alpha.iter().enumerate() {
        for &v in a.iter() {
            if mask[i] {
                flat.push(v * beta[i] * gamma[i]);
            } else {
                flat.push(0.0);
            }
        }
    }
    let total: f64 = flat.iter().sum();
    if total <= 0.0 {
        return Err(DgError::contract("combined attention has zero total mass"));
    }
    Ok(Array1::from_vec(flat) / total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::arr1;

    #[test]
    fn combine_matches_hand_arithmetic() {
        let alpha = vec![arr1(&[0.5, 0.5]), arr1(&[0.5, 0.5])];
        let beta = arr1(&[0.25, 0.75]);
        let gamma = arr1(&[0.5, 0.5]);
        let out = combine_attention(&alpha, &beta, &gamma, &[true, true]).unwrap();
        let expected = [0.125, 0.125, 0.375, 0.375];
        for (a, b) in out.iter().zip(&expected) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn uniform_factors_stay_uniform() {
        let alpha = vec![arr1(&[0.25; 4]), arr1(&[0.25; 4])];
        let beta = arr1(&[0.5, 0.5]);
        let gamma = arr1(&[0.5, 0.5]);
        let out = combine_attention(&alpha, &beta, &gamma, &[true, true]).unwrap();
        for &v in out.iter() {
            assert!((v - 0.125).abs() < 1e-12);
        }
    }

    #[test]
    fn one_hot_gamma_masks_other_sentences() {
        let alpha = vec![arr1(&[0.9, 0.1]), arr1(&[0.3, 0.7])];
        let beta = arr1(&[0.6, 0.4]);
        let gamma = arr1(&[0.0, 1.0]);
        let out = combine_attention(&alpha, &beta, &gamma, &[true, true]).unwrap();
        assert_eq!(out[0], 0.0);
        assert_eq!(out[1], 0.0);
        assert!((out[2] - 0.3).abs() < 1e-12);
        assert!((out[3] - 0.7).abs() < 1e-12);
    }

    #[test]
    fn scaling_all_products_leaves_result_unchanged() {
        let alpha = vec![arr1(&[0.2, 0.8]), arr1(&[0.6, 0.4])];
        let beta = arr1(&[0.3, 0.7]);
        let gamma = arr1(&[0.45, 0.55]);
        let base = combine_attention(&alpha, &beta, &gamma, &[true, true]).unwrap();
        let scaled_gamma = &gamma * 3.7;
        let scaled = combine_attention(&alpha, &beta, &scaled_gamma, &[true, true]).unwrap();
        for (a, b) in base.iter().zip(scaled.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_mass_is_a_contract_error() {
        let alpha = vec![arr1(&[0.5, 0.5])];
        let beta = arr1(&[1.0]);
        let gamma = arr1(&[1.0]);
        assert!(combine_attention(&alpha, &beta, &gamma, &[false]).is_err());
    }
}
