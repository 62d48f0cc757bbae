//! Full-model wiring: encode a sample, run teacher-forced decoding for the
//! training loss, expose per-parameter gradients, and adapt the decoder to
//! the beam-search interface.

use crate::attention::{bind_static, static_attention_vars, StaticVars};
use crate::autodiff::{Tape, Var};
use crate::beam::{BeamModel, BeamStep};
use crate::corpus::{MCQSample, Vocabulary, EOS};
use crate::decoder::{
    bind_decoder, decode_step, init_from_question, DecoderState, DecoderVars, DropoutCtx,
    GammaMode,
};
use crate::encoder::{
    bind_encoder, encode_article_vars, ArticleBatch, EncodedVars, EncoderVars,
};
use crate::error::Result;
use crate::params::{Binder, ModelConfig, ParamStore, Variant};
use ndarray::{Array1, ArrayD};
use std::collections::BTreeMap;

/// A sample converted to padded id tensors, ready for the model.
#[derive(Debug, Clone)]
pub struct EncodedSample {
    pub id: String,
    pub article: ArticleBatch,
    pub question: Vec<usize>,
    pub answer: Vec<usize>,
    /// Distractor ids followed by EOS (the teacher-forcing target).
    pub target: Vec<usize>,
    pub truncated: bool,
}

pub fn encode_sample(vocab: &Vocabulary, cfg: &ModelConfig, sample: &MCQSample) -> EncodedSample {
    let sentences: Vec<Vec<usize>> = sample
        .article_sentences
        .iter()
        .map(|s| vocab.encode(s))
        .collect();
    let (article, truncated) =
        ArticleBatch::from_sentences(&sentences, cfg.max_sentences, cfg.max_words);
    let mut target = vocab.encode(&sample.distractor);
    target.push(EOS);
    EncodedSample {
        id: sample.id.clone(),
        article,
        question: vocab.encode(&sample.question),
        answer: vocab.encode(&sample.answer),
        target,
        truncated,
    }
}

/// Model = architecture dims + parameter store.
pub struct Model {
    pub cfg: ModelConfig,
    pub params: ParamStore,
}

/// All parameter leaves of one forward pass, with the name↔Var mapping.
pub struct BoundModel {
    pub enc: EncoderVars,
    pub stat: StaticVars,
    pub dec: DecoderVars,
    pub names: Vec<(String, Var)>,
}

impl BoundModel {
    pub fn bind(tape: &mut Tape, model: &Model) -> Self {
        let mut binder = Binder::new(&model.params);
        let enc = bind_encoder(tape, &mut binder);
        let stat = bind_static(tape, &mut binder);
        let dec = bind_decoder(tape, &mut binder, enc.embed, model.cfg.dec_layers);
        BoundModel {
            enc,
            stat,
            dec,
            names: binder.names,
        }
    }
}

/// Resolve the gamma source for a decoding pass.
fn gamma_mode(
    tape: &mut Tape,
    bm: &BoundModel,
    enc: &EncodedVars,
    es: &EncodedSample,
    variant: Variant,
    force_uniform: bool,
) -> Result<GammaMode> {
    match variant {
        Variant::Full if !force_uniform => {
            let stat = static_attention_vars(
                tape,
                bm.enc.embed,
                &bm.stat,
                enc,
                &es.question,
                &es.answer,
            )?;
            Ok(GammaMode::Static(stat.gamma))
        }
        _ => Ok(GammaMode::Uniform),
    }
}

/// Teacher-forced negative log-likelihood of a sample, summed over target
/// tokens. Returns the loss node and the token count.
pub fn sample_loss(
    tape: &mut Tape,
    bm: &BoundModel,
    es: &EncodedSample,
    variant: Variant,
    force_uniform: bool,
    dropout: &mut Option<DropoutCtx<'_>>,
) -> Result<(Var, usize)> {
    let enc = encode_article_vars(tape, &bm.enc, &es.article)?;
    let gamma = gamma_mode(tape, bm, &enc, es, variant, force_uniform)?;
    let mut state = init_from_question(tape, &bm.dec, &es.question)?;
    let mut loss: Option<Var> = None;
    for &target in &es.target {
        let step = decode_step(tape, &bm.dec, &state, &enc, gamma, variant, dropout);
        let logp = tape.log_index_clamped(step.p_vocab, target, 1e-12);
        loss = Some(match loss {
            Some(acc) => tape.add(acc, logp),
            None => logp,
        });
        state = step.state;
        state.prev_token = target;
    }
    let total = tape.scale(loss.expect("non-empty target"), -1.0);
    Ok((total, es.target.len()))
}

impl Model {
    /// Forward NLL of one sample (no dropout, fresh tape). Used by the
    /// finite-difference oracle and validation.
    pub fn sample_nll(
        &self,
        es: &EncodedSample,
        variant: Variant,
        force_uniform: bool,
    ) -> Result<(f64, usize)> {
        let mut tape = Tape::inference();
        let bm = BoundModel::bind(&mut tape, self);
        let (loss, tokens) = sample_loss(&mut tape, &bm, es, variant, force_uniform, &mut None)?;
        Ok((tape.scalar(loss), tokens))
    }

    /// Forward + backward for one sample: loss, token count, and gradients
    /// keyed by parameter name.
    pub fn sample_grad(
        &self,
        es: &EncodedSample,
        variant: Variant,
        force_uniform: bool,
        dropout: &mut Option<DropoutCtx<'_>>,
    ) -> Result<(f64, usize, BTreeMap<String, ArrayD<f64>>)> {
        let mut tape = Tape::new();
        let bm = BoundModel::bind(&mut tape, self);
        let (loss, tokens) = sample_loss(&mut tape, &bm, es, variant, force_uniform, dropout)?;
        let grads = tape.backward(loss);
        let mut out = BTreeMap::new();
        for (name, var) in &bm.names {
            if let Some(g) = grads.get(*var) {
                out.insert(name.clone(), g.clone());
            }
        }
        Ok((tape.scalar(loss), tokens, out))
    }

    /// Static attention distribution and temperature for one sample
    /// (exported by `generate --dump-attention`).
    pub fn static_diagnostics(&self, es: &EncodedSample) -> Result<(Array1<f64>, f64)> {
        let mut tape = Tape::inference();
        let bm = BoundModel::bind(&mut tape, self);
        let enc = encode_article_vars(&mut tape, &bm.enc, &es.article)?;
        let stat = static_attention_vars(
            &mut tape,
            bm.enc.embed,
            &bm.stat,
            &enc,
            &es.question,
            &es.answer,
        )?;
        Ok((tape.val1(stat.gamma), tape.scalar(stat.tau)))
    }

    /// Total NLL and token count over a dataset (teacher forcing, no dropout).
    pub fn dataset_nll(&self, samples: &[EncodedSample], variant: Variant) -> Result<(f64, usize)> {
        let mut total = 0.0;
        let mut tokens = 0;
        for es in samples {
            let (nll, n) = self.sample_nll(es, variant, false)?;
            total += nll;
            tokens += n;
        }
        Ok((total, tokens))
    }
}

// ---- beam-search adapter ------------------------------------------------

/// Decoding context for one sample: article encoded once, then stepped
/// hypothesis by hypothesis.
pub struct ModelScorer {
    tape: Tape,
    bm: BoundModel,
    enc: EncodedVars,
    gamma: GammaMode,
    variant: Variant,
    /// (sentence_index, word_column) for every flat attention slot.
    pub flat_positions: Vec<(usize, usize)>,
    pub gamma_value: Option<Array1<f64>>,
    pub tau_value: Option<f64>,
    init: DecoderState,
}

impl ModelScorer {
    pub fn new(
        model: &Model,
        es: &EncodedSample,
        variant: Variant,
        force_uniform: bool,
    ) -> Result<Self> {
        let mut tape = Tape::inference();
        let bm = BoundModel::bind(&mut tape, model);
        let enc = encode_article_vars(&mut tape, &bm.enc, &es.article)?;
        let gamma = gamma_mode(&mut tape, &bm, &enc, es, variant, force_uniform)?;
        let (gamma_value, tau_value) = match gamma {
            GammaMode::Static(g) => {
                // recompute tau for diagnostics
                let stat = static_attention_vars(
                    &mut tape,
                    bm.enc.embed,
                    &bm.stat,
                    &enc,
                    &es.question,
                    &es.answer,
                )?;
                (Some(tape.val1(g)), Some(tape.scalar(stat.tau)))
            }
            GammaMode::Uniform => (None, None),
        };
        let init = init_from_question(&mut tape, &bm.dec, &es.question)?;
        let flat_positions = enc.flat_positions();
        Ok(ModelScorer {
            tape,
            bm,
            enc,
            gamma,
            variant,
            flat_positions,
            gamma_value,
            tau_value,
            init,
        })
    }

    pub fn initial_state(&self) -> DecoderState {
        self.init.clone()
    }
}

impl BeamModel for ModelScorer {
    type State = DecoderState;

    fn step(&mut self, state: &Self::State, input_token: usize) -> BeamStep<Self::State> {
        let mut fed = state.clone();
        fed.prev_token = input_token;
        let out = decode_step(
            &mut self.tape,
            &self.bm.dec,
            &fed,
            &self.enc,
            self.gamma,
            self.variant,
            &mut None,
        );
        let probs = self.tape.val1(out.p_vocab);
        let log_probs = probs.mapv(|p| p.max(1e-300).ln()).to_vec();
        let attention = self.tape.val1(out.combined_attention).to_vec();
        BeamStep {
            log_probs,
            attention,
            state: out.state,
        }
    }
}
