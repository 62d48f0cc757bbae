//! Static attention: a per-sentence importance distribution computed once
//! per sample. Question and answer are encoded by two dedicated
//! bidirectional LSTMs and mean-pooled; each sentence is summarized by mean
//! pooling its word states. A bilinear match score rewards question
//! relevance and penalizes answer relevance, and a question-conditioned
//! temperature sharpens or flattens the softmax.

use crate::autodiff::{Tape, Var};
use crate::encoder::{bind_bilstm, run_bilstm, BiVars, EncodedVars};
use crate::error::{DgError, Result};
use crate::params::Binder;
use ndarray::{Array1, Array2};

pub struct StaticVars {
    pub qenc: BiVars,
    pub aenc: BiVars,
    pub w_m: Var,
    pub b_m: Var,
    pub w_q: Var,
    pub b_q: Var,
    pub lambda_q: Var,
    pub lambda_a: Var,
}

pub fn bind_static(tape: &mut Tape, binder: &mut Binder<'_>) -> StaticVars {
    StaticVars {
        qenc: bind_bilstm(tape, binder, "query.q"),
        aenc: bind_bilstm(tape, binder, "query.a"),
        w_m: binder.leaf(tape, "static.w_m"),
        b_m: binder.leaf(tape, "static.b_m"),
        w_q: binder.leaf(tape, "static.w_q"),
        b_q: binder.leaf(tape, "static.b_q"),
        lambda_q: binder.leaf(tape, "static.lambda_q"),
        lambda_a: binder.leaf(tape, "static.lambda_a"),
    }
}

/// Tape-resident query representations.
pub struct QueryVars {
    pub question: Var,
    pub answer: Var,
    pub sentence_summaries: Vec<Var>,
}

/// Mean-pooled contextual representations of question, answer, and each
/// valid sentence (reusing the word-level states, not the sentence states).
pub fn query_representations_vars(
    tape: &mut Tape,
    embed: Var,
    sv: &StaticVars,
    enc: &EncodedVars,
    question_ids: &[usize],
    answer_ids: &[usize],
) -> Result<QueryVars> {
    if question_ids.is_empty() || answer_ids.is_empty() {
        return Err(DgError::contract("empty question or answer"));
    }
    let embed_seq = |tape: &mut Tape, ids: &[usize]| -> Vec<Var> {
        ids.iter().map(|&i| tape.row(embed, i)).collect()
    };
    let q_in = embed_seq(tape, question_ids);
    let q_out = run_bilstm(tape, &sv.qenc, &q_in);
    let question = tape.mean_vars(&q_out.states);
    let a_in = embed_seq(tape, answer_ids);
    let a_out = run_bilstm(tape, &sv.aenc, &a_in);
    let answer = tape.mean_vars(&a_out.states);
    let sentence_summaries = enc
        .sentences
        .iter()
        .map(|s| tape.mean_vars(&s.word_states))
        .collect();
    Ok(QueryVars {
        question,
        answer,
        sentence_summaries,
    })
}

/// Raw match scores: `o_i = λ_q·s_iᵀ W_m q − λ_a·s_iᵀ W_m a + b_m`.
pub fn match_scores_vars(tape: &mut Tape, sv: &StaticVars, reps: &QueryVars) -> Var {
    let wq = tape.matvec(sv.w_m, reps.question);
    let wa = tape.matvec(sv.w_m, reps.answer);
    let scores: Vec<Var> = reps
        .sentence_summaries
        .iter()
        .map(|&s| {
            let sq = tape.dot(s, wq);
            let sa = tape.dot(s, wa);
            let term_q = tape.mul(sv.lambda_q, sq);
            let term_a = tape.mul(sv.lambda_a, sa);
            let diff = tape.sub(term_q, term_a);
            tape.add(diff, sv.b_m)
        })
        .collect();
    tape.stack_scalars(&scores)
}

/// `τ = sigmoid(w_qᵀ q + b_q)`.
pub fn temperature_var(tape: &mut Tape, sv: &StaticVars, question: Var) -> Var {
    let pre = tape.dot(sv.w_q, question);
    let pre = tape.add(pre, sv.b_q);
    tape.sigmoid(pre)
}

/// `γ = softmax(o / τ)` over the unmasked sentences.
pub fn static_distribution_vars(tape: &mut Tape, scores: Var, tau: Var, mask: &[bool]) -> Result<Var> {
    if !mask.iter().any(|&m| m) {
        return Err(DgError::contract("all sentences masked in static attention"));
    }
    let scaled = tape.div_scalar(scores, tau);
    Ok(tape.softmax_masked(scaled, mask))
}

/// Full static attention pass on the tape.
pub struct StaticOut {
    pub gamma: Var,
    pub tau: Var,
    pub scores: Var,
}

pub fn static_attention_vars(
    tape: &mut Tape,
    embed: Var,
    sv: &StaticVars,
    enc: &EncodedVars,
    question_ids: &[usize],
    answer_ids: &[usize],
) -> Result<StaticOut> {
    let reps = query_representations_vars(tape, embed, sv, enc, question_ids, answer_ids)?;
    let scores = match_scores_vars(tape, sv, &reps);
    let tau = temperature_var(tape, sv, reps.question);
    let mask = vec![true; enc.sentences.len()];
    let gamma = static_distribution_vars(tape, scores, tau, &mask)?;
    Ok(StaticOut { gamma, tau, scores })
}

// ---- plain-array entry points -------------------------------------------

/// Match scores for explicit representations (λ and b given directly).
pub fn match_scores(
    sentence_summaries: &[Array1<f64>],
    question: &Array1<f64>,
    answer: &Array1<f64>,
    w_m: &Array2<f64>,
    b_m: f64,
    lambda_q: f64,
    lambda_a: f64,
) -> Array1<f64> {
    let wq = w_m.dot(question);
    let wa = w_m.dot(answer);
    sentence_summaries
        .iter()
        .map(|s| lambda_q * s.dot(&wq) - lambda_a * s.dot(&wa) + b_m)
        .collect()
}

pub fn temperature(w_q: &Array1<f64>, b_q: f64, question: &Array1<f64>) -> f64 {
    let pre = w_q.dot(question) + b_q;
    1.0 / (1.0 + (-pre).exp())
}

/// Temperature-scaled masked softmax; masked entries are exactly zero.
pub fn static_distribution(scores: &Array1<f64>, tau: f64, mask: &[bool]) -> Result<Array1<f64>> {
    if !(0.0..1.0).contains(&tau) || tau == 0.0 {
        return Err(DgError::contract(format!("temperature {tau} outside (0,1)")));
    }
    if !mask.iter().any(|&m| m) {
        return Err(DgError::contract("all sentences masked"));
    }
    let mut tape = Tape::inference();
    let s = tape.leaf1(scores.clone());
    let t = tape.scalar_leaf(tau);
    let gamma = static_distribution_vars(&mut tape, s, t, mask)?;
    Ok(tape.val1(gamma))
}
