//! LSTM primitives on the autodiff tape and the hierarchical article encoder:
//! a word-level bidirectional LSTM per sentence, and a sentence-level
//! bidirectional LSTM over per-sentence summaries.

use crate::autodiff::{Tape, Var};
use crate::error::{DgError, Result};
use crate::params::{Binder, ParamStore};
use ndarray::{Array2, Array3};

/// Bound weights of one LSTM direction/layer.
#[derive(Clone, Copy)]
pub struct LstmVars {
    pub wx: Var,
    pub wh: Var,
    pub b: Var,
    pub hidden: usize,
}

#[derive(Clone, Copy)]
pub struct BiVars {
    pub fwd: LstmVars,
    pub bwd: LstmVars,
}

pub fn bind_lstm(tape: &mut Tape, binder: &mut Binder<'_>, prefix: &str) -> LstmVars {
    let hidden = binder.store.get(&format!("{prefix}.wx")).shape()[0] / 4;
    LstmVars {
        wx: binder.leaf(tape, &format!("{prefix}.wx")),
        wh: binder.leaf(tape, &format!("{prefix}.wh")),
        b: binder.leaf(tape, &format!("{prefix}.b")),
        hidden,
    }
}

pub fn bind_bilstm(tape: &mut Tape, binder: &mut Binder<'_>, prefix: &str) -> BiVars {
    BiVars {
        fwd: bind_lstm(tape, binder, &format!("{prefix}.fwd")),
        bwd: bind_lstm(tape, binder, &format!("{prefix}.bwd")),
    }
}

/// One LSTM step with fused gates in i/f/g/o order.
pub fn lstm_step(tape: &mut Tape, w: &LstmVars, x: Var, h: Var, c: Var) -> (Var, Var) {
    let hx = tape.matvec(w.wx, x);
    let hh = tape.matvec(w.wh, h);
    let s = tape.add(hx, hh);
    let gates = tape.add(s, w.b);
    let n = w.hidden;
    let i_raw = tape.slice(gates, 0, n);
    let f_raw = tape.slice(gates, n, n);
    let g_raw = tape.slice(gates, 2 * n, n);
    let o_raw = tape.slice(gates, 3 * n, n);
    let i = tape.sigmoid(i_raw);
    let f = tape.sigmoid(f_raw);
    let g = tape.tanh(g_raw);
    let o = tape.sigmoid(o_raw);
    let fc = tape.mul(f, c);
    let ig = tape.mul(i, g);
    let c_next = tape.add(fc, ig);
    let c_act = tape.tanh(c_next);
    let h_next = tape.mul(o, c_act);
    (h_next, c_next)
}

/// Run an LSTM over a sequence from zero state; returns per-step hidden
/// states and the final (hidden, cell) pair.
pub fn run_lstm(tape: &mut Tape, w: &LstmVars, xs: &[Var]) -> (Vec<Var>, (Var, Var)) {
    let mut h = tape.zeros(w.hidden);
    let mut c = tape.zeros(w.hidden);
    let mut states = Vec::with_capacity(xs.len());
    for &x in xs {
        let (h2, c2) = lstm_step(tape, w, x, h, c);
        h = h2;
        c = c2;
        states.push(h);
    }
    (states, (h, c))
}

/// Bidirectional pass: concatenated per-position states plus the
/// forward-final and backward state at the first position.
pub struct BiOut {
    pub states: Vec<Var>,
    pub fwd_last: Var,
    pub bwd_first: Var,
}

pub fn run_bilstm(tape: &mut Tape, w: &BiVars, xs: &[Var]) -> BiOut {
    let (fwd, (fwd_last, _)) = run_lstm(tape, &w.fwd, xs);
    let rev: Vec<Var> = xs.iter().rev().copied().collect();
    let (bwd_rev, _) = run_lstm(tape, &w.bwd, &rev);
    let bwd: Vec<Var> = bwd_rev.into_iter().rev().collect();
    let states = fwd
        .iter()
        .zip(&bwd)
        .map(|(&f, &b)| tape.concat(&[f, b]))
        .collect();
    let bwd_first = bwd[0];
    BiOut {
        states,
        fwd_last,
        bwd_first,
    }
}

// ---- article input ------------------------------------------------------

/// Padded article token ids with validity masks.
#[derive(Debug, Clone)]
pub struct ArticleBatch {
    /// [n_sentences × max_words]
    pub token_ids: Array2<usize>,
    pub word_mask: Array2<bool>,
}

impl ArticleBatch {
    /// Pad sentences into a rectangular batch, truncating tail-first at the
    /// configured caps. Returns whether anything was truncated.
    pub fn from_sentences(
        sentences: &[Vec<usize>],
        max_sentences: usize,
        max_words: usize,
    ) -> (Self, bool) {
        let mut truncated = sentences.len() > max_sentences;
        let kept: Vec<&Vec<usize>> = sentences.iter().take(max_sentences).collect();
        let width = kept
            .iter()
            .map(|s| s.len().min(max_words))
            .max()
            .unwrap_or(0)
            .max(1);
        let mut token_ids = Array2::zeros((kept.len(), width));
        let mut word_mask = Array2::from_elem((kept.len(), width), false);
        for (i, sent) in kept.iter().enumerate() {
            if sent.len() > max_words {
                truncated = true;
            }
            for (j, &id) in sent.iter().take(max_words).enumerate() {
                token_ids[[i, j]] = id;
                word_mask[[i, j]] = true;
            }
        }
        (
            ArticleBatch {
                token_ids,
                word_mask,
            },
            truncated,
        )
    }

    pub fn n_sentences(&self) -> usize {
        self.token_ids.nrows()
    }

    /// A sentence is valid iff it has at least one unmasked word.
    pub fn sentence_mask(&self) -> Vec<bool> {
        (0..self.n_sentences())
            .map(|i| (0..self.token_ids.ncols()).any(|j| self.word_mask[[i, j]]))
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.token_ids.dim() != self.word_mask.dim() {
            return Err(DgError::contract(format!(
                "article ids {:?} and mask {:?} shapes differ",
                self.token_ids.dim(),
                self.word_mask.dim()
            )));
        }
        Ok(())
    }
}

// ---- encoded article on the tape ----------------------------------------

/// One encoded sentence: which row it came from, which word columns are
/// valid, and their contextual states.
pub struct SentEnc {
    pub sentence_index: usize,
    pub word_columns: Vec<usize>,
    pub word_states: Vec<Var>,
}

/// Tape-resident encoder output over the valid positions only; padded
/// positions simply have no node (their concrete value is zero).
pub struct EncodedVars {
    pub sentences: Vec<SentEnc>,
    pub sentence_states: Vec<Var>,
}

impl EncodedVars {
    pub fn n_sentences(&self) -> usize {
        self.sentences.len()
    }

    /// Flat (sentence_index, word_column) order of all valid tokens, the
    /// order used by combined attention vectors.
    pub fn flat_positions(&self) -> Vec<(usize, usize)> {
        self.sentences
            .iter()
            .flat_map(|s| s.word_columns.iter().map(|&j| (s.sentence_index, j)))
            .collect()
    }

    pub fn flat_word_states(&self) -> Vec<Var> {
        self.sentences
            .iter()
            .flat_map(|s| s.word_states.iter().copied())
            .collect()
    }
}

/// Bound encoder weights.
pub struct EncoderVars {
    pub embed: Var,
    pub word: BiVars,
    pub sent: BiVars,
}

pub fn bind_encoder(tape: &mut Tape, binder: &mut Binder<'_>) -> EncoderVars {
    EncoderVars {
        embed: binder.leaf(tape, "embed"),
        word: bind_bilstm(tape, binder, "enc.word"),
        sent: bind_bilstm(tape, binder, "enc.sent"),
    }
}

/// Hierarchical encoding: word BiLSTM per sentence, then a sentence BiLSTM
/// over [forward-final; backward-first] summaries.
pub fn encode_article_vars(
    tape: &mut Tape,
    vars: &EncoderVars,
    article: &ArticleBatch,
) -> Result<EncodedVars> {
    article.validate()?;
    let mut sentences = Vec::new();
    let mut sent_inputs = Vec::new();
    for i in 0..article.n_sentences() {
        let word_columns: Vec<usize> = (0..article.token_ids.ncols())
            .filter(|&j| article.word_mask[[i, j]])
            .collect();
        if word_columns.is_empty() {
            continue;
        }
        let xs: Vec<Var> = word_columns
            .iter()
            .map(|&j| tape.row(vars.embed, article.token_ids[[i, j]]))
            .collect();
        let out = run_bilstm(tape, &vars.word, &xs);
        sent_inputs.push(tape.concat(&[out.fwd_last, out.bwd_first]));
        sentences.push(SentEnc {
            sentence_index: i,
            word_columns,
            word_states: out.states,
        });
    }
    if sentences.is_empty() {
        return Err(DgError::contract("article has no valid sentences"));
    }
    let sent_out = run_bilstm(tape, &vars.sent, &sent_inputs);
    Ok(EncodedVars {
        sentences,
        sentence_states: sent_out.states,
    })
}

// ---- concrete wrapper ---------------------------------------------------

/// Materialized encoder output with masked positions zeroed.
pub struct EncodedArticle {
    /// [n_sentences × max_words × 2H]
    pub word_states: Array3<f64>,
    /// [n_sentences × 2H]
    pub sentence_states: Array2<f64>,
    pub word_mask: Array2<bool>,
    pub sentence_mask: Vec<bool>,
}

/// Run the hierarchical encoder and extract concrete state tensors.
pub fn encode_article(store: &ParamStore, article: &ArticleBatch) -> Result<EncodedArticle> {
    let mut tape = Tape::inference();
    let mut binder = Binder::new(store);
    let vars = bind_encoder(&mut tape, &mut binder);
    let enc = encode_article_vars(&mut tape, &vars, article)?;
    let width = tape.val1(enc.sentences[0].word_states[0]).len();
    let (n, m) = article.token_ids.dim();
    let mut word_states = Array3::zeros((n, m, width));
    let mut sentence_states = Array2::zeros((n, width));
    for (sent, &u) in enc.sentences.iter().zip(&enc.sentence_states) {
        let i = sent.sentence_index;
        sentence_states
            .row_mut(i)
            .assign(&tape.val1(u));
        for (&j, &state) in sent.word_columns.iter().zip(&sent.word_states) {
            word_states
                .slice_mut(ndarray::s![i, j, ..])
                .assign(&tape.val1(state));
        }
    }
    Ok(EncodedArticle {
        word_states,
        sentence_states,
        word_mask: article.word_mask.clone(),
        sentence_mask: article.sentence_mask(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::{init_params, ModelConfig};
    use ndarray::Array2 as A2;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn toy_store() -> ParamStore {
        let cfg = ModelConfig {
            embed_dim: 4,
            enc_hidden: 3,
            dec_hidden: 6,
            dec_layers: 2,
            max_sentences: 8,
            max_words: 10,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let emb = ndarray::Array2::from_shape_fn((9, 4), |_| rng.gen_range(-0.5..0.5));
        init_params(&cfg, emb, &mut rng)
    }

    use rand::Rng;

    #[test]
    fn shapes_match_contract() {
        let store = toy_store();
        let sents = vec![vec![3, 4, 5], vec![6, 7], vec![8, 3, 4, 5, 6]];
        let (batch, truncated) = ArticleBatch::from_sentences(&sents, 8, 5);
        assert!(!truncated);
        let enc = encode_article(&store, &batch).unwrap();
        assert_eq!(enc.word_states.dim(), (3, 5, 6));
        assert_eq!(enc.sentence_states.dim(), (3, 6));
        assert_eq!(enc.sentence_mask, vec![true, true, true]);
    }

    #[test]
    fn padding_extension_leaves_states_bit_identical() {
        let store = toy_store();
        let sents = vec![vec![3, 4, 5], vec![6, 7]];
        let (a, _) = ArticleBatch::from_sentences(&sents, 8, 5);
        // same content, wider padding
        let mut ids = A2::zeros((2, 9));
        let mut mask = A2::from_elem((2, 9), false);
        for (i, s) in sents.iter().enumerate() {
            for (j, &t) in s.iter().enumerate() {
                ids[[i, j]] = t;
                mask[[i, j]] = true;
            }
        }
        let b = ArticleBatch {
            token_ids: ids,
            word_mask: mask,
        };
        let ea = encode_article(&store, &a).unwrap();
        let eb = encode_article(&store, &b).unwrap();
        for (i, sent) in sents.iter().enumerate() {
            assert_eq!(ea.sentence_states.row(i), eb.sentence_states.row(i));
            for j in 0..sent.len() {
                assert_eq!(
                    ea.word_states.slice(ndarray::s![i, j, ..]),
                    eb.word_states.slice(ndarray::s![i, j, ..])
                );
            }
        }
        // masked positions are exactly zero
        assert!(eb
            .word_states
            .slice(ndarray::s![0, 5.., ..])
            .iter()
            .all(|&x| x == 0.0));
    }

    #[test]
    fn padding_only_sentence_rows_do_not_matter() {
        let store = toy_store();
        let sents = vec![vec![3, 4], vec![], vec![6, 7]];
        let (batch, _) = ArticleBatch::from_sentences(&sents, 8, 5);
        let dense = ArticleBatch::from_sentences(&[vec![3, 4], vec![6, 7]], 8, 5).0;
        let with_gap = encode_article(&store, &batch).unwrap();
        let without = encode_article(&store, &dense).unwrap();
        assert_eq!(with_gap.sentence_states.row(0), without.sentence_states.row(0));
        assert_eq!(with_gap.sentence_states.row(2), without.sentence_states.row(1));
        assert_eq!(with_gap.sentence_mask, vec![true, false, true]);
    }

    #[test]
    fn single_sentence_article_is_fine() {
        let store = toy_store();
        let (batch, _) = ArticleBatch::from_sentences(&[vec![5]], 8, 5);
        let enc = encode_article(&store, &batch).unwrap();
        assert!(enc.sentence_states.iter().all(|x| x.is_finite()));
        assert_eq!(enc.sentence_states.dim(), (1, 6));
    }

    #[test]
    fn shape_mismatch_is_a_contract_error() {
        let store = toy_store();
        let bad = ArticleBatch {
            token_ids: A2::zeros((2, 3)),
            word_mask: A2::from_elem((2, 4), true),
        };
        assert!(encode_article(&store, &bad).is_err());
    }

    #[test]
    fn truncation_is_reported() {
        let sents: Vec<Vec<usize>> = (0..5).map(|_| vec![3; 12]).collect();
        let (batch, truncated) = ArticleBatch::from_sentences(&sents, 3, 10);
        assert!(truncated);
        assert_eq!(batch.n_sentences(), 3);
        assert_eq!(batch.token_ids.ncols(), 10);
    }
}
