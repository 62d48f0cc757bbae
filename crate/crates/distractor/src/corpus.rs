//! Corpus preparation: quadruple extraction from exam records, distractor
//! and question filtering, article-level splits, vocabulary construction,
//! and corpus statistics.

use crate::error::{DgError, Result};
use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, HashMap, HashSet};
use std::io::{BufRead, BufReader};
use std::path::Path;

// ---- raw records -------------------------------------------------------

/// One exam article with its questions, as read from disk (RACE layout).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RawExamRecord {
    pub id: String,
    pub article_text: String,
    pub questions: Vec<RawQuestion>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RawQuestion {
    pub question_text: String,
    pub options: Vec<String>,
    pub answer_index: usize,
}

/// RACE file layout: parallel arrays plus letter answers.
#[derive(Debug, Deserialize)]
struct RaceFile {
    article: String,
    questions: Vec<String>,
    options: Vec<Vec<String>>,
    answers: Vec<String>,
}

/// Parse one RACE-layout JSON file into a raw record.
pub fn parse_race_file(path: &Path) -> Result<RawExamRecord> {
    let text = std::fs::read_to_string(path)?;
    let raw: RaceFile = serde_json::from_str(&text)
        .map_err(|e| DgError::config(format!("{}: {e}", path.display())))?;
    if raw.questions.len() != raw.options.len() || raw.questions.len() != raw.answers.len() {
        return Err(DgError::config(format!(
            "{}: question/options/answers arrays differ in length",
            path.display()
        )));
    }
    let id = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "article".to_string());
    let questions = raw
        .questions
        .into_iter()
        .zip(raw.options)
        .zip(raw.answers)
        .map(|((question_text, options), answer)| {
            let answer_index = match answer.trim() {
                "A" => 0,
                "B" => 1,
                "C" => 2,
                "D" => 3,
                other => other.parse::<usize>().unwrap_or(usize::MAX),
            };
            RawQuestion {
                question_text,
                options,
                answer_index,
            }
        })
        .collect();
    Ok(RawExamRecord {
        id,
        article_text: raw.article,
        questions,
    })
}

// ---- samples -----------------------------------------------------------

/// One (article, question, answer, distractor) quadruple in tokenized form.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MCQSample {
    pub id: String,
    pub article_sentences: Vec<Vec<String>>,
    pub question: Vec<String>,
    pub answer: Vec<String>,
    pub distractor: Vec<String>,
}

impl MCQSample {
    /// Samples sharing a question id form one multi-reference group.
    /// Ids look like `art0001#q2#d0`; the question id strips the `#d` part.
    pub fn question_id(&self) -> &str {
        match self.id.rfind("#d") {
            Some(pos) => &self.id[..pos],
            None => &self.id,
        }
    }

    pub fn article_id(&self) -> &str {
        match self.id.find("#q") {
            Some(pos) => &self.id[..pos],
            None => &self.id,
        }
    }

    pub fn article_tokens(&self) -> impl Iterator<Item = &String> {
        self.article_sentences.iter().flatten()
    }
}

// ---- tokenization and sentence splitting --------------------------------

/// Lower-case and split into word, number, blank (`___`) and punctuation
/// tokens. Apostrophes stay inside words ("don't").
pub fn tokenize(text: &str) -> Vec<String> {
    let mut tokens = Vec::new();
    let mut word = String::new();
    let flush = |word: &mut String, tokens: &mut Vec<String>| {
        if !word.is_empty() {
            tokens.push(std::mem::take(word));
        }
    };
    let chars: Vec<char> = text.chars().collect();
    for (k, &c) in chars.iter().enumerate() {
        let lc = c.to_lowercase().next().unwrap_or(c);
        let inner_apostrophe = lc == '\''
            && !word.is_empty()
            && matches!(chars.get(k + 1), Some(n) if n.is_alphanumeric());
        if lc.is_alphanumeric() || inner_apostrophe {
            word.push(lc);
        } else if lc == '_' {
            if !word.ends_with('_') {
                flush(&mut word, &mut tokens);
            }
            word.push('_');
        } else {
            flush(&mut word, &mut tokens);
            if !lc.is_whitespace() {
                tokens.push(lc.to_string());
            }
        }
        if word.ends_with('_') && !matches!(chars.get(k + 1), Some('_')) {
            flush(&mut word, &mut tokens);
        }
    }
    flush(&mut word, &mut tokens);
    tokens
}

/// A blank marker is a token of one or more underscores.
pub fn is_blank_token(token: &str) -> bool {
    !token.is_empty() && token.chars().all(|c| c == '_')
}

const ABBREVIATIONS: &[&str] = &[
    "mr", "mrs", "ms", "dr", "prof", "st", "jr", "sr", "vs", "etc", "e.g", "i.e", "a.m", "p.m",
    "no", "vol", "inc", "ltd", "co", "u.s", "u.k",
];

/// Rule-based sentence splitting on terminal punctuation, guarded against
/// common abbreviations.
pub fn split_sentences(text: &str) -> Vec<String> {
    let mut sentences = Vec::new();
    let mut current = String::new();
    let chars: Vec<char> = text.chars().collect();
    for (k, &c) in chars.iter().enumerate() {
        current.push(c);
        if matches!(c, '.' | '!' | '?') {
            // don't break inside runs like "?!" or "..."
            if matches!(chars.get(k + 1), Some('.') | Some('!') | Some('?')) {
                continue;
            }
            if c == '.' {
                let prev_word: String = current
                    .trim_end_matches('.')
                    .rsplit(|ch: char| ch.is_whitespace())
                    .next()
                    .unwrap_or("")
                    .to_lowercase();
                if ABBREVIATIONS.contains(&prev_word.as_str()) {
                    continue;
                }
                // initials like "J." or decimal points
                if prev_word.len() == 1 && prev_word.chars().all(|ch| ch.is_alphabetic()) {
                    continue;
                }
                if matches!(chars.get(k + 1), Some(n) if n.is_ascii_digit()) {
                    continue;
                }
            }
            let s = current.trim();
            if !s.is_empty() {
                sentences.push(s.to_string());
            }
            current.clear();
        }
    }
    let s = current.trim();
    if !s.is_empty() {
        sentences.push(s.to_string());
    }
    sentences
}

/// Sentence-split then tokenize an article, dropping empty sentences.
pub fn article_to_sentences(text: &str) -> Vec<Vec<String>> {
    split_sentences(text)
        .iter()
        .map(|s| tokenize(s))
        .filter(|t| !t.is_empty())
        .collect()
}

// ---- quadruple extraction ----------------------------------------------

/// Why a record or question was rejected during extraction.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
pub enum Reject {
    EmptyArticle { record: String },
    BadOptionCount { record: String, question: usize },
    BadAnswerIndex { record: String, question: usize },
    EmptyField { record: String, question: usize },
}

/// Extract one sample per (question, wrong option) pair. Malformed records
/// are skipped and reported, never fatal.
pub fn extract_quadruples(records: &[RawExamRecord]) -> (Vec<MCQSample>, Vec<Reject>) {
    let mut samples = Vec::new();
    let mut rejects = Vec::new();
    for record in records {
        let article_sentences = article_to_sentences(&record.article_text);
        if article_sentences.is_empty() {
            rejects.push(Reject::EmptyArticle {
                record: record.id.clone(),
            });
            continue;
        }
        for (qi, q) in record.questions.iter().enumerate() {
            if q.options.len() != 4 {
                rejects.push(Reject::BadOptionCount {
                    record: record.id.clone(),
                    question: qi,
                });
                continue;
            }
            if q.answer_index >= 4 {
                rejects.push(Reject::BadAnswerIndex {
                    record: record.id.clone(),
                    question: qi,
                });
                continue;
            }
            let question = tokenize(&q.question_text);
            let answer = tokenize(&q.options[q.answer_index]);
            if question.is_empty() || answer.is_empty() {
                rejects.push(Reject::EmptyField {
                    record: record.id.clone(),
                    question: qi,
                });
                continue;
            }
            let mut slot = 0;
            for (oi, option) in q.options.iter().enumerate() {
                if oi == q.answer_index {
                    continue;
                }
                let distractor = tokenize(option);
                if distractor.is_empty() {
                    rejects.push(Reject::EmptyField {
                        record: record.id.clone(),
                        question: qi,
                    });
                    continue;
                }
                samples.push(MCQSample {
                    id: format!("{}#q{}#d{}", record.id, qi, slot),
                    article_sentences: article_sentences.clone(),
                    question: question.clone(),
                    answer: answer.clone(),
                    distractor,
                });
                slot += 1;
            }
        }
    }
    (samples, rejects)
}

// ---- filtering ----------------------------------------------------------

/// POS tags that make a token "meaningful" for the weighted-frequency rule.
pub const MEANINGFUL_TAGS: &[&str] = &[
    "JJ", "JJR", "JJS", "NN", "NNP", "NNPS", "NNS", "RB", "RBR", "RBS", "VB", "VBD", "VBG", "VBN",
    "VBP", "VBZ",
];

/// Pluggable part-of-speech tagger. The tagger identity is recorded in the
/// prepare manifest so runs remain comparable.
pub trait PosTagger {
    fn tag(&self, token: &str) -> Option<String>;
    fn name(&self) -> &str;
}

/// Suffix-heuristic tagger shipped as the default. Alphabetic non-stopwords
/// get a content tag; punctuation and digits are untagged.
pub struct HeuristicTagger;

impl PosTagger for HeuristicTagger {
    fn tag(&self, token: &str) -> Option<String> {
        if token.is_empty() || !token.chars().next().unwrap().is_alphabetic() {
            return None;
        }
        let tag = if token.ends_with("ly") {
            "RB"
        } else if token.ends_with("ing") {
            "VBG"
        } else if token.ends_with("ed") {
            "VBD"
        } else if token.ends_with('s') && token.len() > 2 {
            "NNS"
        } else {
            "NN"
        };
        Some(tag.to_string())
    }

    fn name(&self) -> &str {
        "heuristic-suffix-v1"
    }
}

/// Bundled English stop-word list.
pub const STOPWORDS: &[&str] = &[
    "a", "about", "above", "after", "again", "against", "all", "am", "an", "and", "any", "are",
    "as", "at", "be", "because", "been", "before", "being", "below", "between", "both", "but",
    "by", "can", "could", "did", "do", "does", "doing", "down", "during", "each", "few", "for",
    "from", "further", "had", "has", "have", "having", "he", "her", "here", "hers", "herself",
    "him", "himself", "his", "how", "i", "if", "in", "into", "is", "it", "its", "itself", "just",
    "me", "more", "most", "my", "myself", "no", "nor", "not", "now", "of", "off", "on", "once",
    "only", "or", "other", "our", "ours", "ourselves", "out", "over", "own", "same", "she",
    "should", "so", "some", "such", "than", "that", "the", "their", "theirs", "them",
    "themselves", "then", "there", "these", "they", "this", "those", "through", "to", "too",
    "under", "until", "up", "very", "was", "we", "were", "what", "when", "where", "which",
    "while", "who", "whom", "why", "will", "with", "would", "you", "your", "yours", "yourself",
    "yourselves",
];

pub fn stopword_set() -> HashSet<String> {
    STOPWORDS.iter().map(|s| s.to_string()).collect()
}

fn frequency<'a>(tokens: impl Iterator<Item = &'a String>) -> HashMap<&'a str, usize> {
    let mut freq = HashMap::new();
    for t in tokens {
        *freq.entry(t.as_str()).or_insert(0) += 1;
    }
    freq
}

/// Keep a distractor iff the total weighted frequency of its meaningful
/// tokens that also appear in the article reaches `min_weighted_freq`.
/// The weighted frequency of a token is its distractor frequency times its
/// article frequency. Untagged tokens count as non-meaningful.
pub fn filter_distractor(
    sample: &MCQSample,
    stopwords: &HashSet<String>,
    pos_tags: &HashMap<String, String>,
    min_weighted_freq: usize,
) -> bool {
    let article_freq = frequency(sample.article_tokens());
    let distractor_freq = frequency(sample.distractor.iter());
    let mut total = 0usize;
    for (token, &df) in &distractor_freq {
        if stopwords.contains(*token) {
            continue;
        }
        let meaningful = pos_tags
            .get(*token)
            .map(|t| MEANINGFUL_TAGS.contains(&t.as_str()))
            .unwrap_or(false);
        if !meaningful {
            continue;
        }
        if let Some(&af) = article_freq.get(token) {
            total += df * af;
        }
    }
    total >= min_weighted_freq
}

/// Tag every distractor token of a sample with the given tagger.
pub fn tag_tokens(sample: &MCQSample, tagger: &dyn PosTagger) -> HashMap<String, String> {
    let mut tags = HashMap::new();
    for token in &sample.distractor {
        if let Some(tag) = tagger.tag(token) {
            tags.insert(token.clone(), tag);
        }
    }
    tags
}

/// Keep a question iff any blank marker sits at the final content position
/// (i.e. only trailing punctuation may follow it) or there is no blank.
pub fn filter_question_form(question: &[String]) -> bool {
    let last_content = question
        .iter()
        .rposition(|t| t.chars().any(|c| c.is_alphanumeric() || c == '_'));
    for (k, token) in question.iter().enumerate() {
        if is_blank_token(token) && Some(k) != last_content {
            return false;
        }
    }
    true
}

// ---- splitting ----------------------------------------------------------

/// Deterministic 80/10/10 split at article granularity: every sample of an
/// article lands in the same partition.
pub fn split_dataset(
    samples: &[MCQSample],
    seed: u64,
) -> Result<(Vec<MCQSample>, Vec<MCQSample>, Vec<MCQSample>)> {
    let mut articles: Vec<String> = Vec::new();
    let mut seen = HashSet::new();
    for s in samples {
        let aid = s.article_id().to_string();
        if seen.insert(aid.clone()) {
            articles.push(aid);
        }
    }
    if articles.len() < 3 {
        return Err(DgError::contract("insufficient corpus: need at least 3 distinct articles"));
    }
    articles.sort();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    articles.shuffle(&mut rng);

    let n = articles.len();
    let n_test = ((n as f64) * 0.1).round().max(1.0) as usize;
    let n_dev = n_test.min(n - n_test - 1).max(1);
    let mut assignment: HashMap<&str, u8> = HashMap::new();
    for (k, aid) in articles.iter().enumerate() {
        let split = if k < n - n_dev - n_test {
            0
        } else if k < n - n_test {
            1
        } else {
            2
        };
        assignment.insert(aid.as_str(), split);
    }
    let mut out = (Vec::new(), Vec::new(), Vec::new());
    for s in samples {
        match assignment[s.article_id()] {
            0 => out.0.push(s.clone()),
            1 => out.1.push(s.clone()),
            _ => out.2.push(s.clone()),
        }
    }
    Ok(out)
}

// ---- vocabulary and embeddings ------------------------------------------

pub const PAD: usize = 0;
pub const UNK: usize = 1;
pub const EOS: usize = 2;
pub const SPECIALS: [&str; 3] = ["<pad>", "<unk>", "<eos>"];

/// Token ↔ id bijection with PAD/UNK/EOS specials at fixed ids 0/1/2.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(from = "VocabSerde", into = "VocabSerde")]
pub struct Vocabulary {
    id_to_token: Vec<String>,
    token_to_id: HashMap<String, usize>,
}

#[derive(Serialize, Deserialize)]
struct VocabSerde {
    tokens: Vec<String>,
}

impl From<VocabSerde> for Vocabulary {
    fn from(v: VocabSerde) -> Self {
        Vocabulary::from_tokens(v.tokens)
    }
}

impl From<Vocabulary> for VocabSerde {
    fn from(v: Vocabulary) -> Self {
        VocabSerde {
            tokens: v.id_to_token,
        }
    }
}

impl Vocabulary {
    /// Build from the full id-ordered token list (specials included first).
    pub fn from_tokens(id_to_token: Vec<String>) -> Self {
        assert!(id_to_token.len() >= 3, "vocabulary must include the specials");
        let token_to_id = id_to_token
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        Vocabulary {
            id_to_token,
            token_to_id,
        }
    }

    pub fn len(&self) -> usize {
        self.id_to_token.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn id(&self, token: &str) -> usize {
        *self.token_to_id.get(token).unwrap_or(&UNK)
    }

    pub fn token(&self, id: usize) -> &str {
        &self.id_to_token[id]
    }

    pub fn encode(&self, tokens: &[String]) -> Vec<usize> {
        tokens.iter().map(|t| self.id(t)).collect()
    }

    pub fn decode(&self, ids: &[usize]) -> Vec<String> {
        ids.iter().map(|&i| self.id_to_token[i].clone()).collect()
    }
}

/// Read a GloVe-style text embedding file: `token v1 ... v_dim` per line.
pub fn read_embedding_file(path: &Path, dim: usize) -> Result<HashMap<String, Vec<f64>>> {
    let file = std::fs::File::open(path)
        .map_err(|e| DgError::config(format!("cannot read embedding file {}: {e}", path.display())))?;
    let mut vectors = HashMap::new();
    for (ln, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let mut parts = line.split_whitespace();
        let token = parts
            .next()
            .ok_or_else(|| DgError::config(format!("embedding line {} empty", ln + 1)))?
            .to_string();
        let values: std::result::Result<Vec<f64>, _> = parts.map(|p| p.parse::<f64>()).collect();
        let values =
            values.map_err(|e| DgError::config(format!("embedding line {}: {e}", ln + 1)))?;
        if values.len() != dim {
            return Err(DgError::config(format!(
                "embedding line {}: expected {} dimensions, found {}",
                ln + 1,
                dim,
                values.len()
            )));
        }
        vectors.insert(token, values);
    }
    Ok(vectors)
}

/// Vocabulary of the up-to-`max_size` most frequent training tokens that have
/// a pretrained vector, plus specials. Frequency ties break lexicographically.
/// Special rows are drawn from U(-0.1, 0.1) with the run seed.
pub fn build_vocabulary_and_embeddings(
    train: &[MCQSample],
    vectors: &HashMap<String, Vec<f64>>,
    dim: usize,
    max_size: usize,
    seed: u64,
) -> (Vocabulary, Array2<f64>) {
    let mut freq: BTreeMap<&str, usize> = BTreeMap::new();
    for s in train {
        for t in s
            .article_tokens()
            .chain(&s.question)
            .chain(&s.answer)
            .chain(&s.distractor)
        {
            *freq.entry(t.as_str()).or_insert(0) += 1;
        }
    }
    let mut candidates: Vec<(&str, usize)> = freq
        .into_iter()
        .filter(|(t, _)| vectors.contains_key(*t))
        .collect();
    candidates.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
    candidates.truncate(max_size);

    let mut tokens: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
    tokens.extend(candidates.iter().map(|(t, _)| t.to_string()));
    let vocab = Vocabulary::from_tokens(tokens);

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut matrix = Array2::<f64>::zeros((vocab.len(), dim));
    for row in 0..SPECIALS.len() {
        for col in 0..dim {
            matrix[[row, col]] = rng.gen_range(-0.1..0.1);
        }
    }
    for (k, (token, _)) in candidates.iter().enumerate() {
        let v = &vectors[*token];
        for col in 0..dim {
            matrix[[SPECIALS.len() + k, col]] = v[col];
        }
    }
    (vocab, matrix)
}

// ---- statistics ---------------------------------------------------------

/// The stats.txt row set.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CorpusStats {
    pub train_samples: usize,
    pub dev_samples: usize,
    pub test_samples: usize,
    pub avg_article_len: f64,
    pub avg_distractor_len: f64,
    pub avg_question_len: f64,
    pub avg_answer_len: f64,
    pub avg_distractors_per_question: f64,
}

pub fn corpus_stats(train: &[MCQSample], dev: &[MCQSample], test: &[MCQSample]) -> CorpusStats {
    let all: Vec<&MCQSample> = train.iter().chain(dev).chain(test).collect();
    let n = all.len().max(1) as f64;
    let avg = |f: &dyn Fn(&MCQSample) -> usize| all.iter().map(|s| f(s)).sum::<usize>() as f64 / n;
    let questions: HashSet<&str> = all.iter().map(|s| s.question_id()).collect();
    CorpusStats {
        train_samples: train.len(),
        dev_samples: dev.len(),
        test_samples: test.len(),
        avg_article_len: avg(&|s| s.article_tokens().count()),
        avg_distractor_len: avg(&|s| s.distractor.len()),
        avg_question_len: avg(&|s| s.question.len()),
        avg_answer_len: avg(&|s| s.answer.len()),
        avg_distractors_per_question: all.len() as f64 / questions.len().max(1) as f64,
    }
}

pub fn format_stats(stats: &CorpusStats) -> String {
    format!(
        "# Train Samples\t{}\n\
         # Dev Samples\t{}\n\
         # Test Samples\t{}\n\
         Avg. article length (tokens)\t{:.1}\n\
         Avg. distractor length\t{:.1}\n\
         Avg. question length\t{:.1}\n\
         Avg. answer length\t{:.1}\n\
         Avg. # distractors per question\t{:.1}\n",
        stats.train_samples,
        stats.dev_samples,
        stats.test_samples,
        stats.avg_article_len,
        stats.avg_distractor_len,
        stats.avg_question_len,
        stats.avg_answer_len,
        stats.avg_distractors_per_question,
    )
}

// ---- record file I/O ----------------------------------------------------

pub fn write_samples_jsonl(samples: &[MCQSample]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    for s in samples {
        serde_json::to_writer(&mut out, s)?;
        out.push(b'\n');
    }
    Ok(out)
}

pub fn read_samples_jsonl(path: &Path) -> Result<Vec<MCQSample>> {
    let file = std::fs::File::open(path)
        .map_err(|e| DgError::config(format!("cannot read {}: {e}", path.display())))?;
    let mut samples = Vec::new();
    for line in BufReader::new(file).lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        samples.push(serde_json::from_str(&line)?);
    }
    Ok(samples)
}
