//! Command-line interface: corpus preparation, training, generation,
//! evaluation, and the three-variant ablation run.
//!
//! Relative input paths resolve under `DG_DATA_ROOT` when that variable is
//! set. Every command writes a run manifest next to its outputs.

use crate::beam::{beam_search, replace_unk, select_diverse};
use crate::corpus::{
    self, build_vocabulary_and_embeddings, corpus_stats, extract_quadruples, filter_distractor,
    filter_question_form, format_stats, parse_race_file, read_embedding_file, read_samples_jsonl,
    split_dataset, stopword_set, tag_tokens, HeuristicTagger, MCQSample, Vocabulary,
};
use crate::error::{DgError, Result};
use crate::manifest::{atomic_write, sha256_hex, RunManifest};
use crate::metrics::{evaluate_run, GenerationRecord, MetricReport};
use crate::model::{encode_sample, Model, ModelScorer};
use crate::params::{
    init_params, load_checkpoint, read_blob, write_blob, ModelConfig, ParamStore, Variant,
};
use crate::training::{train, TrainConfig};
use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

#[derive(Parser)]
#[command(name = "dgen", version, about = "Distractor generation toolkit")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand)]
pub enum Command {
    /// Build the cleaned, split, id-mapped corpus from raw exam JSON files.
    Prepare(PrepareArgs),
    /// Train a model on a prepared corpus.
    Train(TrainArgs),
    /// Decode distractors for a prepared data file with a trained checkpoint.
    Generate(GenerateArgs),
    /// Score generated distractors against gold references.
    Evaluate(EvaluateArgs),
    /// Train and evaluate the seq2seq, hred, and full variants side by side.
    Ablation(AblationArgs),
}

#[derive(Args)]
pub struct PrepareArgs {
    /// Directory of raw exam JSON files.
    #[arg(long)]
    pub input: PathBuf,
    /// Output directory for the prepared corpus.
    #[arg(long)]
    pub output: PathBuf,
    /// Pretrained embedding text file (token followed by the vector).
    #[arg(long)]
    pub embeddings: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Keep a distractor only if its weighted article frequency reaches this.
    #[arg(long, default_value_t = 5)]
    pub min_weighted_freq: usize,
    /// Embedding dimensionality expected in the file.
    #[arg(long, default_value_t = 300)]
    pub embed_dim: usize,
    /// Vocabulary size cap (specials excluded).
    #[arg(long, default_value_t = 50_000)]
    pub vocab_size: usize,
}

#[derive(Args, Clone)]
pub struct DimArgs {
    #[arg(long, default_value_t = 250)]
    pub enc_hidden: usize,
    #[arg(long, default_value_t = 500)]
    pub dec_hidden: usize,
    #[arg(long, default_value_t = 40)]
    pub max_sentences: usize,
    #[arg(long, default_value_t = 50)]
    pub max_words: usize,
}

#[derive(Args)]
pub struct TrainArgs {
    /// Optimization config file (key=value lines).
    #[arg(long)]
    pub config: PathBuf,
    /// Prepared corpus directory (output of `prepare`).
    #[arg(long)]
    pub data: PathBuf,
    /// Output directory for checkpoints and logs.
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub dims: DimArgs,
}

#[derive(Args)]
pub struct GenerateArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Prepared samples file (jsonl).
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value_t = 50)]
    pub beam: usize,
    #[arg(long, default_value_t = 15)]
    pub max_len: usize,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value = "full")]
    pub variant: Variant,
    /// Also write static attention diagnostics next to the output.
    #[arg(long, default_value_t = false)]
    pub dump_attention: bool,
    #[command(flatten)]
    pub dims: DimArgs,
}

#[derive(Args)]
pub struct EvaluateArgs {
    /// Generated distractors (jsonl, one record per question).
    #[arg(long)]
    pub hyp: PathBuf,
    /// Gold samples file (jsonl).
    #[arg(long = "ref")]
    pub reference: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args)]
pub struct AblationArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 50)]
    pub beam: usize,
    #[arg(long, default_value_t = 15)]
    pub max_len: usize,
    #[command(flatten)]
    pub dims: DimArgs,
}

/// Resolve an input path against `DG_DATA_ROOT` when it is relative.
pub fn resolve_input(path: &Path) -> PathBuf {
    if path.is_absolute() {
        return path.to_path_buf();
    }
    match std::env::var_os("DG_DATA_ROOT") {
        Some(root) if !root.is_empty() => PathBuf::from(root).join(path),
        _ => path.to_path_buf(),
    }
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Prepare(args) => cmd_prepare(&args),
        Command::Train(args) => cmd_train(&args),
        Command::Generate(args) => cmd_generate(&args),
        Command::Evaluate(args) => cmd_evaluate(&args),
        Command::Ablation(args) => cmd_ablation(&args),
    }
}

// ---- prepare -------------------------------------------------------------

fn cmd_prepare(args: &PrepareArgs) -> Result<()> {
    let started = Instant::now();
    let input = resolve_input(&args.input);
    let embeddings_path = resolve_input(&args.embeddings);
    let mut manifest = RunManifest::new("prepare");
    manifest.seed = Some(args.seed);
    manifest.inputs = vec![
        input.display().to_string(),
        embeddings_path.display().to_string(),
    ];

    let mut files: Vec<PathBuf> = std::fs::read_dir(&input)
        .map_err(|e| DgError::config(format!("cannot read input dir {}: {e}", input.display())))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "json" || x == "txt"))
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(DgError::config(format!(
            "no exam files under {}",
            input.display()
        )));
    }
    let records: Vec<_> = files
        .iter()
        .map(|p| parse_race_file(p))
        .collect::<Result<_>>()?;

    let (samples, rejects) = extract_quadruples(&records);
    if !rejects.is_empty() {
        manifest
            .warnings
            .push(format!("{} malformed records skipped", rejects.len()));
    }

    let stopwords = stopword_set();
    let tagger = HeuristicTagger;
    let mut kept = Vec::new();
    let mut dropped_form = 0usize;
    let mut dropped_unreliable = 0usize;
    for s in samples {
        if !filter_question_form(&s.question) {
            dropped_form += 1;
            continue;
        }
        let tags = tag_tokens(&s, &tagger);
        if !filter_distractor(&s, &stopwords, &tags, args.min_weighted_freq) {
            dropped_unreliable += 1;
            continue;
        }
        kept.push(s);
    }
    manifest.warnings.push(format!(
        "{dropped_form} questions dropped by form filter, {dropped_unreliable} distractors dropped by weighted-frequency filter"
    ));

    let (train_set, dev_set, test_set) = split_dataset(&kept, args.seed)?;
    let vectors = read_embedding_file(&embeddings_path, args.embed_dim)?;
    let (vocab, matrix) = build_vocabulary_and_embeddings(
        &train_set,
        &vectors,
        args.embed_dim,
        args.vocab_size,
        args.seed,
    );

    std::fs::create_dir_all(&args.output)?;
    let write = |name: &str, bytes: &[u8]| -> Result<()> {
        let path = args.output.join(name);
        atomic_write(&path, bytes)
    };
    write("train.jsonl", &corpus::write_samples_jsonl(&train_set)?)?;
    write("dev.jsonl", &corpus::write_samples_jsonl(&dev_set)?)?;
    write("test.jsonl", &corpus::write_samples_jsonl(&test_set)?)?;
    write("vocab.json", &serde_json::to_vec_pretty(&vocab)?)?;
    let mut emb_store = ParamStore::new();
    emb_store.insert("embed", matrix.into_dyn());
    let mut emb_bytes = Vec::new();
    write_blob(&emb_store, &mut emb_bytes)?;
    write("embeddings.bin", &emb_bytes)?;
    let stats = corpus_stats(&train_set, &dev_set, &test_set);
    write("stats.txt", format_stats(&stats).as_bytes())?;

    manifest.outputs = [
        "train.jsonl",
        "dev.jsonl",
        "test.jsonl",
        "vocab.json",
        "embeddings.bin",
        "stats.txt",
    ]
    .iter()
    .map(|n| args.output.join(n).display().to_string())
    .collect();
    manifest.config_hash = sha256_hex(
        format!(
            "seed={} min_weighted_freq={} embed_dim={} vocab_size={}",
            args.seed, args.min_weighted_freq, args.embed_dim, args.vocab_size
        )
        .as_bytes(),
    );
    manifest.wall_clock_ms = started.elapsed().as_millis() as u64;
    manifest.write(&args.output.join("manifest.json"))?;
    Ok(())
}

// ---- train ---------------------------------------------------------------

fn load_prepared(dir: &Path) -> Result<(Vec<MCQSample>, Vec<MCQSample>, Vocabulary, ParamStore)> {
    let train_set = read_samples_jsonl(&dir.join("train.jsonl"))?;
    let dev_set = read_samples_jsonl(&dir.join("dev.jsonl"))?;
    let vocab_bytes = std::fs::read(dir.join("vocab.json"))
        .map_err(|e| DgError::config(format!("cannot read vocab.json in {}: {e}", dir.display())))?;
    let vocab: Vocabulary = serde_json::from_slice(&vocab_bytes)?;
    let emb_bytes = std::fs::read(dir.join("embeddings.bin")).map_err(|e| {
        DgError::config(format!("cannot read embeddings.bin in {}: {e}", dir.display()))
    })?;
    let emb_store = read_blob(&mut emb_bytes.as_slice())?;
    Ok((train_set, dev_set, vocab, emb_store))
}

fn model_config(dims: &DimArgs, embed_dim: usize) -> ModelConfig {
    ModelConfig {
        embed_dim,
        enc_hidden: dims.enc_hidden,
        dec_hidden: dims.dec_hidden,
        dec_layers: 2,
        max_sentences: dims.max_sentences,
        max_words: dims.max_words,
    }
}

fn run_training(
    config_path: &Path,
    data_dir: &Path,
    out_dir: &Path,
    dims: &DimArgs,
    variant_override: Option<Variant>,
) -> Result<()> {
    let started = Instant::now();
    let config_text = std::fs::read_to_string(config_path).map_err(|e| {
        DgError::config(format!("cannot read config {}: {e}", config_path.display()))
    })?;
    let mut cfg = TrainConfig::parse(&config_text)?;
    if let Some(v) = variant_override {
        cfg.variant = v;
    }
    let config_hash = sha256_hex(config_text.as_bytes());

    let (train_raw, dev_raw, vocab, emb_store) = load_prepared(data_dir)?;
    let embeddings = emb_store.get2("embed");
    if embeddings.nrows() != vocab.len() {
        return Err(DgError::config(
            "embedding matrix row count does not match the vocabulary",
        ));
    }
    let mcfg = model_config(dims, embeddings.ncols());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let params = init_params(&mcfg, embeddings, &mut rng);
    let mut model = Model {
        cfg: mcfg.clone(),
        params,
    };

    let encode_all = |set: &[MCQSample]| -> Vec<_> {
        set.iter().map(|s| encode_sample(&vocab, &mcfg, s)).collect()
    };
    let train_enc = encode_all(&train_raw);
    let dev_enc = encode_all(&dev_raw);
    let truncated = train_enc.iter().filter(|e| e.truncated).count();

    std::fs::create_dir_all(out_dir)?;
    let outcome = train(
        &mut model,
        &train_enc,
        &dev_enc,
        &cfg,
        &vocab,
        &config_hash,
        Some(out_dir),
    )?;

    let mut log = String::new();
    for (step, ppl) in &outcome.validations {
        log.push_str(&format!("validation step={step} perplexity={ppl:.6}\n"));
    }
    log.push_str(&format!(
        "best step={} perplexity={:.6}\n",
        outcome.best_step, outcome.best_val_perplexity
    ));
    atomic_write(&out_dir.join("training_log.txt"), log.as_bytes())?;

    let mut manifest = RunManifest::new(format!("train --variant {}", cfg.variant));
    manifest.config_hash = config_hash;
    manifest.seed = Some(cfg.seed);
    manifest.inputs = vec![
        config_path.display().to_string(),
        data_dir.display().to_string(),
    ];
    manifest.outputs = ["checkpoint.bin", "checkpoint_manifest.txt", "training_log.txt"]
        .iter()
        .map(|n| out_dir.join(n).display().to_string())
        .collect();
    if truncated > 0 {
        manifest
            .warnings
            .push(format!("{truncated} training articles truncated to fit the size caps"));
    }
    manifest.wall_clock_ms = started.elapsed().as_millis() as u64;
    manifest.write(&out_dir.join("manifest.json"))?;
    Ok(())
}

fn cmd_train(args: &TrainArgs) -> Result<()> {
    run_training(
        &resolve_input(&args.config),
        &resolve_input(&args.data),
        &args.out,
        &args.dims,
        None,
    )
}

// ---- generate ------------------------------------------------------------

/// One sample per question id, first occurrence wins; samples of a question
/// share the article, question, and answer.
fn group_questions(samples: &[MCQSample]) -> Vec<(String, MCQSample)> {
    let mut by_question: BTreeMap<String, MCQSample> = BTreeMap::new();
    for s in samples {
        by_question
            .entry(s.question_id().to_string())
            .or_insert_with(|| s.clone());
    }
    by_question.into_iter().collect()
}

fn cmd_generate(args: &GenerateArgs) -> Result<()> {
    let started = Instant::now();
    let ckpt_path = resolve_input(&args.checkpoint);
    let data_path = resolve_input(&args.data);
    let ckpt = load_checkpoint(&ckpt_path)?;
    let samples = read_samples_jsonl(&data_path)?;
    let model = Model {
        cfg: ckpt.model_config.clone(),
        params: ckpt.params,
    };
    let vocab = ckpt.vocab;
    let _ = &args.dims; // dims come from the checkpoint

    let mut out_lines = Vec::new();
    let mut attn_lines = Vec::new();
    for (qid, sample) in group_questions(&samples) {
        let es = encode_sample(&vocab, &model.cfg, &sample);
        let mut scorer = ModelScorer::new(&model, &es, args.variant, false)?;
        let first_input = *es.question.last().ok_or_else(|| {
            DgError::contract(format!("question {qid} has no tokens"))
        })?;
        let initial = scorer.initial_state();
        let hyps = beam_search(&mut scorer, initial, first_input, args.beam, args.max_len)?;
        let article_tokens: Vec<String> = scorer
            .flat_positions
            .iter()
            .map(|&(si, wj)| sample.article_sentences[si][wj].clone())
            .collect();
        let ranked: Vec<(Vec<String>, f64)> = hyps
            .iter()
            .map(|h| (replace_unk(h, &article_tokens, &vocab), h.log_likelihood))
            .collect();
        let picked = select_diverse(&ranked)?;
        let record = GenerationRecord {
            id: qid.clone(),
            distractors: picked.distractors.iter().map(|d| d.join(" ")).collect(),
            log_likelihoods: picked.log_likelihoods,
            diversity_flags: picked.diversity_flags,
        };
        serde_json::to_writer(&mut out_lines, &record)?;
        out_lines.push(b'\n');

        if args.dump_attention {
            let diag = serde_json::json!({
                "id": qid,
                "gamma": scorer.gamma_value.as_ref().map(|g| g.to_vec()),
                "tau": scorer.tau_value,
            });
            serde_json::to_writer(&mut attn_lines, &diag)?;
            attn_lines.push(b'\n');
        }
    }
    atomic_write(&args.out, &out_lines)?;
    let mut outputs = vec![args.out.display().to_string()];
    if args.dump_attention {
        let attn_path = args.out.with_extension("attention.jsonl");
        atomic_write(&attn_path, &attn_lines)?;
        outputs.push(attn_path.display().to_string());
    }

    let mut manifest = RunManifest::new(format!(
        "generate --variant {} --beam {} --max-len {}",
        args.variant, args.beam, args.max_len
    ));
    manifest.inputs = vec![
        ckpt_path.display().to_string(),
        data_path.display().to_string(),
    ];
    manifest.outputs = outputs;
    manifest.wall_clock_ms = started.elapsed().as_millis() as u64;
    manifest.write(&args.out.with_extension("manifest.json"))?;
    Ok(())
}

// ---- evaluate ------------------------------------------------------------

fn read_generation_jsonl(path: &Path) -> Result<Vec<GenerationRecord>> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| DgError::config(format!("cannot read {}: {e}", path.display())))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(DgError::from))
        .collect()
}

fn cmd_evaluate(args: &EvaluateArgs) -> Result<()> {
    let started = Instant::now();
    let hyp_path = resolve_input(&args.hyp);
    let ref_path = resolve_input(&args.reference);
    let generated = read_generation_jsonl(&hyp_path)?;
    let references = read_samples_jsonl(&ref_path)?;
    let report = evaluate_run(&generated, &references)?;
    atomic_write(&args.out, report.render("Distractors").as_bytes())?;
    let json_path = args.out.with_extension("json");
    atomic_write(&json_path, &serde_json::to_vec_pretty(&report)?)?;

    let mut manifest = RunManifest::new("evaluate");
    manifest.inputs = vec![hyp_path.display().to_string(), ref_path.display().to_string()];
    manifest.outputs = vec![
        args.out.display().to_string(),
        json_path.display().to_string(),
    ];
    manifest.wall_clock_ms = started.elapsed().as_millis() as u64;
    manifest.write(&args.out.with_extension("manifest.json"))?;
    Ok(())
}

// ---- ablation ------------------------------------------------------------

fn cmd_ablation(args: &AblationArgs) -> Result<()> {
    let started = Instant::now();
    let config_path = resolve_input(&args.config);
    let data_dir = resolve_input(&args.data);
    std::fs::create_dir_all(&args.out)?;

    let mut combined = String::new();
    let mut failures = Vec::new();
    for variant in [Variant::Seq2Seq, Variant::Hred, Variant::Full] {
        let vdir = args.out.join(variant.to_string());
        let result = ablation_variant(args, &config_path, &data_dir, &vdir, variant);
        match result {
            Ok(report) => {
                combined.push_str(&report.render(&variant.to_string()));
                combined.push('\n');
            }
            Err(e) => {
                combined.push_str(&format!("{variant}: FAILED ({e})\n\n"));
                failures.push((variant, e.to_string()));
            }
        }
    }
    atomic_write(&args.out.join("ablation_report.txt"), combined.as_bytes())?;

    let mut manifest = RunManifest::new("ablation");
    manifest.inputs = vec![
        config_path.display().to_string(),
        data_dir.display().to_string(),
    ];
    manifest.outputs = vec![args.out.join("ablation_report.txt").display().to_string()];
    for (v, e) in &failures {
        manifest.warnings.push(format!("variant {v} failed: {e}"));
    }
    manifest.wall_clock_ms = started.elapsed().as_millis() as u64;
    manifest.write(&args.out.join("manifest.json"))?;
    if failures.len() == 3 {
        return Err(DgError::contract("all ablation variants failed"));
    }
    Ok(())
}

fn ablation_variant(
    args: &AblationArgs,
    config_path: &Path,
    data_dir: &Path,
    vdir: &Path,
    variant: Variant,
) -> Result<MetricReport> {
    run_training(config_path, data_dir, vdir, &args.dims, Some(variant))?;
    let gen_args = GenerateArgs {
        checkpoint: vdir.join("checkpoint.bin"),
        data: data_dir.join("test.jsonl"),
        beam: args.beam,
        max_len: args.max_len,
        out: vdir.join("generated.jsonl"),
        variant,
        dump_attention: false,
        dims: args.dims.clone(),
    };
    cmd_generate(&gen_args)?;
    let generated = read_generation_jsonl(&vdir.join("generated.jsonl"))?;
    let references = read_samples_jsonl(&data_dir.join("test.jsonl"))?;
    let report = evaluate_run(&generated, &references)?;
    atomic_write(
        &vdir.join("report.txt"),
        report.render(&variant.to_string()).as_bytes(),
    )?;
    Ok(report)
}
