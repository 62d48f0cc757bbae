//! SGD training loop: step-indexed learning-rate halving, global
//! gradient-norm clipping, length-bucketed batches, periodic validation,
//! and best-checkpoint tracking by validation perplexity.

use crate::corpus::Vocabulary;
use crate::decoder::DropoutCtx;
use crate::error::{DgError, Result};
use crate::manifest::atomic_write;
use crate::model::{EncodedSample, Model};
use crate::params::{Checkpoint, Variant};
use ndarray::ArrayD;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeMap;
use std::path::Path;

/// Optimization settings, read from a `key=value` config file.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub initial_lr: f64,
    pub total_steps: usize,
    pub first_halving_step: usize,
    pub halving_interval: usize,
    pub grad_norm_cap: f64,
    pub dropout: f64,
    pub seed: u64,
    pub variant: Variant,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 32,
            initial_lr: 1.0,
            total_steps: 100_000,
            first_halving_step: 50_000,
            halving_interval: 10_000,
            grad_norm_cap: 5.0,
            dropout: 0.3,
            seed: 0,
            variant: Variant::Full,
        }
    }
}

impl TrainConfig {
    /// Parse `key=value` lines; `#` starts a comment, blank lines are
    /// skipped, unknown keys are configuration errors.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = TrainConfig::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| DgError::config(format!("line {}: expected key=value", lineno + 1)))?;
            let (key, value) = (key.trim(), value.trim());
            let bad = |e: &dyn std::fmt::Display| {
                DgError::config(format!("line {}: bad value for {key}: {e}", lineno + 1))
            };
            match key {
                "batch_size" => cfg.batch_size = value.parse().map_err(|e| bad(&e))?,
                "initial_lr" => cfg.initial_lr = value.parse().map_err(|e| bad(&e))?,
                "total_steps" => cfg.total_steps = value.parse().map_err(|e| bad(&e))?,
                "first_halving_step" => {
                    cfg.first_halving_step = value.parse().map_err(|e| bad(&e))?
                }
                "halving_interval" => cfg.halving_interval = value.parse().map_err(|e| bad(&e))?,
                "grad_norm_cap" => cfg.grad_norm_cap = value.parse().map_err(|e| bad(&e))?,
                "dropout" => cfg.dropout = value.parse().map_err(|e| bad(&e))?,
                "seed" => cfg.seed = value.parse().map_err(|e| bad(&e))?,
                "variant" => cfg.variant = value.parse()?,
                other => {
                    return Err(DgError::config(format!(
                        "line {}: unknown config key '{other}'",
                        lineno + 1
                    )))
                }
            }
        }
        if cfg.batch_size == 0 {
            return Err(DgError::config("batch_size must be positive"));
        }
        if !(0.0..1.0).contains(&cfg.dropout) {
            return Err(DgError::config("dropout must be in [0, 1)"));
        }
        Ok(cfg)
    }

    /// Learning rate at a given 1-based optimization step: the initial rate,
    /// halved at `first_halving_step` and again every `halving_interval`
    /// steps after that.
    pub fn lr_at(&self, step: usize) -> f64 {
        if step < self.first_halving_step {
            self.initial_lr
        } else {
            let halvings = 1 + (step - self.first_halving_step) / self.halving_interval;
            self.initial_lr * 0.5_f64.powi(halvings as i32)
        }
    }
}

/// `exp(total NLL / token count)`.
pub fn perplexity(total_nll: f64, tokens: usize) -> f64 {
    (total_nll / tokens as f64).exp()
}

/// Scale gradients in place so their global L2 norm does not exceed `cap`.
/// Directions are preserved. Returns the pre-clip norm.
pub fn clip_gradients(grads: &mut BTreeMap<String, ArrayD<f64>>, cap: f64) -> f64 {
    let norm_sq: f64 = grads
        .values()
        .map(|g| g.iter().map(|x| x * x).sum::<f64>())
        .sum();
    let norm = norm_sq.sqrt();
    if norm > cap && norm > 0.0 {
        let scale = cap / norm;
        for g in grads.values_mut() {
            g.mapv_inplace(|x| x * scale);
        }
    }
    norm
}

/// Batches group samples of similar target length: sort by length, chunk,
/// then shuffle the chunk order.
fn make_batches(n: usize, lens: &[usize], batch_size: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by_key(|&i| (lens[i], i));
    let mut batches: Vec<Vec<usize>> = order.chunks(batch_size).map(|c| c.to_vec()).collect();
    batches.shuffle(rng);
    batches
}

/// Progress and outcome of one training run.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Batch-mean sum NLL at every optimization step, in order.
    pub loss_history: Vec<f64>,
    /// (step, validation perplexity) at each validation point.
    pub validations: Vec<(usize, f64)>,
    pub best_step: usize,
    pub best_val_perplexity: f64,
}

fn checkpoint_manifest_text(
    step: usize,
    lr: f64,
    val_ppl: f64,
    config_hash: &str,
    blob: &str,
) -> String {
    format!(
        "step: {step}\nlearning_rate: {lr}\nvalidation_perplexity: {val_ppl}\nconfig_hash: {config_hash}\nparameter_blob_reference: {blob}\n"
    )
}

/// Run SGD for `cfg.total_steps` steps. Validation runs every 2000 steps
/// (or at the final step for shorter runs); whenever validation perplexity
/// improves and `out_dir` is set, the checkpoint and its manifest are
/// rewritten there.
pub fn train(
    model: &mut Model,
    train_set: &[EncodedSample],
    val_set: &[EncodedSample],
    cfg: &TrainConfig,
    vocab: &Vocabulary,
    config_hash: &str,
    out_dir: Option<&Path>,
) -> Result<TrainOutcome> {
    if train_set.is_empty() {
        return Err(DgError::contract("empty training set"));
    }
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let lens: Vec<usize> = train_set.iter().map(|s| s.target.len()).collect();
    let val_interval = 2000.min(cfg.total_steps.max(1));

    let mut outcome = TrainOutcome {
        loss_history: Vec::with_capacity(cfg.total_steps),
        validations: Vec::new(),
        best_step: 0,
        best_val_perplexity: f64::INFINITY,
    };

    let mut step = 0usize;
    let mut epoch = 0u64;
    'steps: loop {
        let mut shuffle_rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(epoch));
        let batches = make_batches(train_set.len(), &lens, cfg.batch_size, &mut shuffle_rng);
        for batch in batches {
            if step >= cfg.total_steps {
                break 'steps;
            }
            step += 1;
            let lr = cfg.lr_at(step);

            let mut total_loss = 0.0;
            let mut grads: BTreeMap<String, ArrayD<f64>> = BTreeMap::new();
            for &i in &batch {
                let mut ctx = if cfg.dropout > 0.0 {
                    Some(DropoutCtx {
                        p: cfg.dropout,
                        rng: &mut dropout_rng,
                    })
                } else {
                    None
                };
                let (loss, _tokens, g) =
                    model.sample_grad(&train_set[i], cfg.variant, false, &mut ctx)?;
                total_loss += loss;
                for (name, grad) in g {
                    match grads.get_mut(&name) {
                        Some(acc) => *acc += &grad,
                        None => {
                            grads.insert(name, grad);
                        }
                    }
                }
            }
            let inv = 1.0 / batch.len() as f64;
            let batch_loss = total_loss * inv;
            if !batch_loss.is_finite() {
                return Err(DgError::contract(format!(
                    "non-finite loss at step {step}, batch samples {:?}",
                    batch.iter().map(|&i| train_set[i].id.clone()).collect::<Vec<_>>()
                )));
            }
            for g in grads.values_mut() {
                g.mapv_inplace(|x| x * inv);
            }
            clip_gradients(&mut grads, cfg.grad_norm_cap);
            for (name, grad) in &grads {
                let p = model.params.get_mut(name);
                p.zip_mut_with(grad, |w, &g| *w -= lr * g);
            }
            outcome.loss_history.push(batch_loss);

            if step.is_multiple_of(val_interval) || step == cfg.total_steps {
                let (val_set_eff, is_train_fallback) = if val_set.is_empty() {
                    (train_set, true)
                } else {
                    (val_set, false)
                };
                let (nll, tokens) = model.dataset_nll(val_set_eff, cfg.variant)?;
                let ppl = perplexity(nll, tokens);
                let _ = is_train_fallback;
                if outcome.validations.last().map(|&(s, _)| s) != Some(step) {
                    outcome.validations.push((step, ppl));
                }
                if ppl < outcome.best_val_perplexity {
                    outcome.best_val_perplexity = ppl;
                    outcome.best_step = step;
                    if let Some(dir) = out_dir {
                        let ckpt_path = dir.join("checkpoint.bin");
                        crate::params::save_checkpoint(
                            &ckpt_path,
                            &Checkpoint {
                                model_config: model.cfg.clone(),
                                vocab: vocab.clone(),
                                params: model.params.clone(),
                            },
                        )?;
                        let manifest = checkpoint_manifest_text(
                            step,
                            lr,
                            ppl,
                            config_hash,
                            "checkpoint.bin",
                        );
                        atomic_write(&dir.join("checkpoint_manifest.txt"), manifest.as_bytes())?;
                    }
                }
            }
        }
        epoch += 1;
    }
    Ok(outcome)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{MCQSample, Vocabulary};
    use crate::model::encode_sample;
    use crate::params::{init_params, ModelConfig};
    use ndarray::Array2;
    use rand::Rng;

    #[test]
    fn lr_schedule_exact_values() {
        let cfg = TrainConfig::default();
        assert_eq!(cfg.lr_at(1), 1.0);
        assert_eq!(cfg.lr_at(49_999), 1.0);
        assert_eq!(cfg.lr_at(50_000), 0.5);
        assert_eq!(cfg.lr_at(59_999), 0.5);
        assert_eq!(cfg.lr_at(60_000), 0.25);
        assert_eq!(cfg.lr_at(100_000), 0.015625);
    }

    #[test]
    fn config_defaults_and_overrides() {
        let cfg = TrainConfig::parse("").unwrap();
        assert_eq!(cfg, TrainConfig::default());
        let cfg = TrainConfig::parse(
            "batch_size = 4\nvariant = hred # comment\n\n# full line comment\nseed=9\n",
        )
        .unwrap();
        assert_eq!(cfg.batch_size, 4);
        assert_eq!(cfg.variant, Variant::Hred);
        assert_eq!(cfg.seed, 9);
    }

    #[test]
    fn config_rejects_unknown_keys_and_bad_values() {
        assert!(TrainConfig::parse("learning_rate=1.0").is_err());
        assert!(TrainConfig::parse("batch_size=zero").is_err());
        assert!(TrainConfig::parse("dropout=1.5").is_err());
        assert!(TrainConfig::parse("no_equals_sign").is_err());
    }

    #[test]
    fn clipping_preserves_direction() {
        let mut grads = BTreeMap::new();
        grads.insert("a".to_string(), ndarray::arr1(&[3.0, 0.0]).into_dyn());
        grads.insert("b".to_string(), ndarray::arr1(&[0.0, 4.0]).into_dyn());
        let norm = clip_gradients(&mut grads, 1.0);
        assert!((norm - 5.0).abs() < 1e-12);
        assert!((grads["a"][[0]] - 0.6).abs() < 1e-12);
        assert!((grads["b"][[1]] - 0.8).abs() < 1e-12);
        // already under the cap: untouched
        let mut small = BTreeMap::new();
        small.insert("a".to_string(), ndarray::arr1(&[0.3]).into_dyn());
        clip_gradients(&mut small, 1.0);
        assert_eq!(small["a"][[0]], 0.3);
    }

    #[test]
    fn perplexity_bounds() {
        assert_eq!(perplexity(0.0, 5), 1.0);
        let uniform_nll = (10.0_f64).ln() * 4.0;
        assert!((perplexity(uniform_nll, 4) - 10.0).abs() < 1e-9);
    }

    fn tiny_setup() -> (Model, Vec<EncodedSample>, Vocabulary) {
        let tokens = ["the", "cat", "sat", "mat", "dog", "ran", "why", "?"];
        let mut vocab_tokens: Vec<String> =
            crate::corpus::SPECIALS.iter().map(|s| s.to_string()).collect();
        vocab_tokens.extend(tokens.iter().map(|s| s.to_string()));
        let vocab = Vocabulary::from_tokens(vocab_tokens);
        let cfg = ModelConfig {
            embed_dim: 6,
            enc_hidden: 4,
            dec_hidden: 8,
            dec_layers: 2,
            max_sentences: 4,
            max_words: 6,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let emb = Array2::from_shape_fn((vocab.len(), cfg.embed_dim), |_| {
            rng.gen_range(-0.1..0.1)
        });
        let params = init_params(&cfg, emb, &mut rng);
        let sample = MCQSample {
            id: "a0#q0#d0".into(),
            article_sentences: vec![
                vec!["the".into(), "cat".into(), "sat".into()],
                vec!["the".into(), "dog".into(), "ran".into()],
            ],
            question: vec!["why".into(), "?".into()],
            answer: vec!["cat".into()],
            distractor: vec!["dog".into(), "ran".into()],
        };
        let es = encode_sample(&vocab, &cfg, &sample);
        (Model { cfg, params }, vec![es], vocab)
    }

    #[test]
    fn short_run_reduces_loss_and_checkpoints_best() {
        let (mut model, data, vocab) = tiny_setup();
        let cfg = TrainConfig {
            batch_size: 1,
            initial_lr: 0.5,
            total_steps: 40,
            first_halving_step: 1000,
            halving_interval: 1000,
            grad_norm_cap: 5.0,
            dropout: 0.0,
            seed: 3,
            variant: Variant::Full,
        };
        let dir = tempfile::tempdir().unwrap();
        let outcome = train(&mut model, &data, &data, &cfg, &vocab, "deadbeef", Some(dir.path()))
            .unwrap();
        assert_eq!(outcome.loss_history.len(), 40);
        assert!(outcome.loss_history[39] < outcome.loss_history[0]);
        assert!(outcome.best_val_perplexity.is_finite());
        let manifest =
            std::fs::read_to_string(dir.path().join("checkpoint_manifest.txt")).unwrap();
        assert!(manifest.contains("config_hash: deadbeef"));
        assert!(manifest.contains("parameter_blob_reference: checkpoint.bin"));
        let ckpt = crate::params::load_checkpoint(&dir.path().join("checkpoint.bin")).unwrap();
        assert_eq!(ckpt.params.num_scalars(), model.params.num_scalars());
    }

    #[test]
    fn validation_runs_at_end_of_short_runs() {
        let (mut model, data, vocab) = tiny_setup();
        let cfg = TrainConfig {
            batch_size: 1,
            initial_lr: 0.1,
            total_steps: 5,
            dropout: 0.0,
            ..TrainConfig::default()
        };
        let outcome = train(&mut model, &data, &data, &cfg, &vocab, "", None).unwrap();
        assert_eq!(outcome.validations.last().map(|&(s, _)| s), Some(5));
    }
}
