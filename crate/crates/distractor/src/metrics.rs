//! BLEU-1..4 and ROUGE-1/2/L scoring plus the per-slot evaluation report.
//!
//! BLEU is corpus-level: geometric mean of clipped n-gram precisions with
//! the closest-reference brevity penalty and no smoothing. ROUGE follows
//! the recall reading: matched n-grams over reference n-grams, and LCS
//! length over reference length, best reference per item, averaged over
//! items. All scores are percentages in [0, 100].

use crate::corpus::MCQSample;
use crate::error::{DgError, Result};
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, HashMap};

fn ngram_counts(tokens: &[String], n: usize) -> HashMap<&[String], usize> {
    let mut counts = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *counts.entry(w).or_insert(0) += 1;
        }
    }
    counts
}

/// Corpus-level BLEU for `max_n` in 1..=4, scaled to [0, 100].
pub fn bleu(
    candidates: &[Vec<String>],
    reference_sets: &[Vec<Vec<String>>],
    max_n: usize,
) -> Result<f64> {
    if candidates.is_empty() {
        return Err(DgError::contract("empty candidate set for BLEU"));
    }
    if candidates.len() != reference_sets.len() {
        return Err(DgError::contract("candidate/reference count mismatch"));
    }
    if !(1..=4).contains(&max_n) {
        return Err(DgError::config("BLEU order must be in 1..=4"));
    }

    let mut cand_len = 0usize;
    let mut ref_len = 0usize;
    let mut matches = vec![0usize; max_n];
    let mut totals = vec![0usize; max_n];

    for (cand, refs) in candidates.iter().zip(reference_sets) {
        cand_len += cand.len();
        // closest reference length; ties go to the shorter reference
        let closest = refs
            .iter()
            .map(|r| r.len())
            .min_by_key(|&rl| (rl.abs_diff(cand.len()), rl))
            .unwrap_or(0);
        ref_len += closest;
        for n in 1..=max_n {
            let cc = ngram_counts(cand, n);
            let mut clipped: HashMap<&[String], usize> = HashMap::new();
            for r in refs {
                for (gram, &count) in ngram_counts(r, n).iter() {
                    let e = clipped.entry(gram).or_insert(0);
                    *e = (*e).max(count);
                }
            }
            for (gram, &count) in cc.iter() {
                totals[n - 1] += count;
                matches[n - 1] += count.min(*clipped.get(gram).unwrap_or(&0));
            }
        }
    }

    let mut log_sum = 0.0;
    for n in 0..max_n {
        if totals[n] == 0 || matches[n] == 0 {
            return Ok(0.0);
        }
        log_sum += (matches[n] as f64 / totals[n] as f64).ln();
    }
    let precision = (log_sum / max_n as f64).exp();
    let bp = if cand_len >= ref_len || cand_len == 0 {
        1.0
    } else {
        (1.0 - ref_len as f64 / cand_len as f64).exp()
    };
    Ok(100.0 * bp * precision)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RougeMode {
    R1,
    R2,
    RL,
}

fn lcs_len(a: &[String], b: &[String]) -> usize {
    let mut dp = vec![0usize; b.len() + 1];
    for x in a {
        let mut prev = 0;
        for (j, y) in b.iter().enumerate() {
            let cur = dp[j + 1];
            dp[j + 1] = if x == y {
                prev + 1
            } else {
                dp[j + 1].max(dp[j])
            };
            prev = cur;
        }
    }
    dp[b.len()]
}

fn rouge_item(cand: &[String], reference: &[String], mode: RougeMode, f1: bool) -> Option<f64> {
    match mode {
        RougeMode::R1 | RougeMode::R2 => {
            let n = if mode == RougeMode::R1 { 1 } else { 2 };
            let rc = ngram_counts(reference, n);
            let total: usize = rc.values().sum();
            if total == 0 {
                return None;
            }
            let cc = ngram_counts(cand, n);
            let matched: usize = rc
                .iter()
                .map(|(gram, &count)| count.min(*cc.get(gram).unwrap_or(&0)))
                .sum();
            let recall = matched as f64 / total as f64;
            if !f1 {
                return Some(recall);
            }
            let cand_total: usize = cc.values().sum();
            if cand_total == 0 {
                return Some(0.0);
            }
            let precision = matched as f64 / cand_total as f64;
            Some(if precision + recall == 0.0 {
                0.0
            } else {
                2.0 * precision * recall / (precision + recall)
            })
        }
        RougeMode::RL => {
            if reference.is_empty() {
                return None;
            }
            let lcs = lcs_len(cand, reference) as f64;
            let recall = lcs / reference.len() as f64;
            if !f1 {
                return Some(recall);
            }
            if cand.is_empty() {
                return Some(0.0);
            }
            let precision = lcs / cand.len() as f64;
            Some(if precision + recall == 0.0 {
                0.0
            } else {
                2.0 * precision * recall / (precision + recall)
            })
        }
    }
}

/// ROUGE over a corpus: per item the best reference, then the mean over
/// items with at least one scorable reference. Items whose references are
/// all empty are skipped and counted in the returned warning tally.
pub fn rouge_with_options(
    candidates: &[Vec<String>],
    reference_sets: &[Vec<Vec<String>>],
    mode: RougeMode,
    f1: bool,
) -> Result<(f64, usize)> {
    if candidates.len() != reference_sets.len() {
        return Err(DgError::contract("candidate/reference count mismatch"));
    }
    let mut total = 0.0;
    let mut scored = 0usize;
    let mut skipped = 0usize;
    for (cand, refs) in candidates.iter().zip(reference_sets) {
        let best = refs
            .iter()
            .filter_map(|r| rouge_item(cand, r, mode, f1))
            .fold(None, |acc: Option<f64>, s| {
                Some(acc.map_or(s, |a| a.max(s)))
            });
        match best {
            Some(s) => {
                total += s;
                scored += 1;
            }
            None => skipped += 1,
        }
    }
    if scored == 0 {
        return Ok((0.0, skipped));
    }
    Ok((100.0 * total / scored as f64, skipped))
}

/// Recall-form ROUGE (the default reading).
pub fn rouge(
    candidates: &[Vec<String>],
    reference_sets: &[Vec<Vec<String>>],
    mode: RougeMode,
) -> Result<f64> {
    rouge_with_options(candidates, reference_sets, mode, false).map(|(s, _)| s)
}

// ---- report -------------------------------------------------------------

pub const METRIC_COLUMNS: [&str; 7] = [
    "BLEU1", "BLEU2", "BLEU3", "BLEU4", "ROUGE1", "ROUGE2", "ROUGEL",
];
pub const SLOT_ROWS: [&str; 4] = [
    "1st Distractor",
    "2nd Distractor",
    "3rd Distractor",
    "Avg. Performance",
];

/// Per-slot and averaged scores, rows × METRIC_COLUMNS.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricReport {
    pub rows: Vec<Vec<f64>>,
}

impl MetricReport {
    pub fn render(&self, label: &str) -> String {
        let mut out = String::new();
        out.push_str(&format!("{:<18}", label));
        for col in METRIC_COLUMNS {
            out.push_str(&format!("{col:>9}"));
        }
        out.push('\n');
        for (name, row) in SLOT_ROWS.iter().zip(&self.rows) {
            out.push_str(&format!("{name:<18}"));
            for v in row {
                out.push_str(&format!("{v:>9.2}"));
            }
            out.push('\n');
        }
        out
    }
}

/// One generated line: a question id with up to three distractors.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GenerationRecord {
    pub id: String,
    pub distractors: Vec<String>,
    pub log_likelihoods: Vec<f64>,
    pub diversity_flags: Vec<bool>,
}

fn split_tokens(s: &str) -> Vec<String> {
    s.split_whitespace().map(|t| t.to_string()).collect()
}

/// Score each generated slot against the full gold-distractor set of its
/// question. Every generated id must exist in the reference data.
pub fn evaluate_run(
    generated: &[GenerationRecord],
    reference_data: &[MCQSample],
) -> Result<MetricReport> {
    let mut gold: BTreeMap<&str, Vec<Vec<String>>> = BTreeMap::new();
    for s in reference_data {
        gold.entry(s.question_id())
            .or_default()
            .push(s.distractor.clone());
    }
    for g in generated {
        if !gold.contains_key(g.id.as_str()) {
            return Err(DgError::contract(format!(
                "generated id '{}' has no reference question",
                g.id
            )));
        }
    }

    let mut rows = Vec::new();
    for slot in 0..3 {
        let mut candidates = Vec::new();
        let mut references = Vec::new();
        for g in generated {
            if let Some(d) = g.distractors.get(slot) {
                candidates.push(split_tokens(d));
                references.push(gold[g.id.as_str()].clone());
            }
        }
        if candidates.is_empty() {
            rows.push(vec![0.0; 7]);
            continue;
        }
        let mut row = Vec::with_capacity(7);
        for n in 1..=4 {
            row.push(bleu(&candidates, &references, n)?);
        }
        row.push(rouge(&candidates, &references, RougeMode::R1)?);
        row.push(rouge(&candidates, &references, RougeMode::R2)?);
        row.push(rouge(&candidates, &references, RougeMode::RL)?);
        rows.push(row);
    }
    let avg: Vec<f64> = (0..7)
        .map(|c| rows.iter().map(|r| r[c]).sum::<f64>() / 3.0)
        .collect();
    rows.push(avg);
    Ok(MetricReport { rows })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toks(s: &str) -> Vec<String> {
        s.split_whitespace().map(|t| t.to_string()).collect()
    }

    #[test]
    fn bleu_identity_is_100() {
        let c = vec![toks("the cat sat")];
        let r = vec![vec![toks("the cat sat")]];
        for n in 1..=3 {
            assert_eq!(bleu(&c, &r, n).unwrap(), 100.0);
        }
    }

    #[test]
    fn bleu_brevity_penalty_fixture() {
        let c = vec![toks("the cat")];
        let r = vec![vec![toks("the cat sat")]];
        let score = bleu(&c, &r, 1).unwrap();
        assert!((score - 60.653_065_971_263_34).abs() < 1e-9);
    }

    #[test]
    fn bleu_disjoint_is_zero() {
        let c = vec![toks("x y")];
        let r = vec![vec![toks("a b")]];
        assert_eq!(bleu(&c, &r, 1).unwrap(), 0.0);
    }

    #[test]
    fn bleu_is_nonincreasing_in_n() {
        let c = vec![toks("the black cat sat on the mat"), toks("a dog barked")];
        let r = vec![
            vec![toks("the black cat sat on a mat")],
            vec![toks("the dog barked loudly")],
        ];
        let mut prev = f64::INFINITY;
        for n in 1..=4 {
            let s = bleu(&c, &r, n).unwrap();
            assert!(s <= prev + 1e-12);
            prev = s;
        }
    }

    #[test]
    fn bleu_empty_candidates_error() {
        assert!(bleu(&[], &[], 1).is_err());
    }

    #[test]
    fn bleu_clipping_limits_repeats() {
        // "the the the" vs "the cat": clipped unigram matches = 1 of 3
        let c = vec![toks("the the the")];
        let r = vec![vec![toks("the cat")]];
        let score = bleu(&c, &r, 1).unwrap();
        // precision 1/3, c=3 >= r=2 so BP=1
        assert!((score - 100.0 / 3.0).abs() < 1e-9);
    }

    #[test]
    fn rouge_identity_is_100() {
        let c = vec![toks("a b c")];
        let r = vec![vec![toks("a b c")]];
        for mode in [RougeMode::R1, RougeMode::R2, RougeMode::RL] {
            assert_eq!(rouge(&c, &r, mode).unwrap(), 100.0);
        }
    }

    #[test]
    fn rouge_l_lcs_fixture() {
        let c = vec![toks("a b c")];
        let r = vec![vec![toks("a x c")]];
        let score = rouge(&c, &r, RougeMode::RL).unwrap();
        assert!((score - 200.0 / 3.0).abs() < 1e-9);
    }

    #[test]
    fn rouge_1_recall_fixture() {
        let c = vec![toks("a b")];
        let r = vec![vec![toks("a b c d")]];
        assert_eq!(rouge(&c, &r, RougeMode::R1).unwrap(), 50.0);
    }

    #[test]
    fn duplicate_reference_changes_nothing() {
        let c = vec![toks("the cat sat"), toks("dogs bark")];
        let r1 = vec![
            vec![toks("the cat sat down")],
            vec![toks("dogs often bark")],
        ];
        let r2: Vec<Vec<Vec<String>>> = r1
            .iter()
            .map(|refs| {
                let mut v = refs.clone();
                v.extend(refs.clone());
                v
            })
            .collect();
        for n in 1..=4 {
            assert_eq!(bleu(&c, &r1, n).unwrap(), bleu(&c, &r2, n).unwrap());
        }
        for mode in [RougeMode::R1, RougeMode::R2, RougeMode::RL] {
            assert_eq!(
                rouge(&c, &r1, mode).unwrap(),
                rouge(&c, &r2, mode).unwrap()
            );
        }
    }

    #[test]
    fn empty_reference_items_are_skipped() {
        let c = vec![toks("a b"), toks("c d")];
        let r = vec![vec![toks("")], vec![toks("c d")]];
        let (score, skipped) = rouge_with_options(&c, &r, RougeMode::R1, false).unwrap();
        assert_eq!(skipped, 1);
        assert_eq!(score, 100.0);
    }

    #[test]
    fn rouge_l_f1_option() {
        let c = vec![toks("a b c d")];
        let r = vec![vec![toks("a b")]];
        let recall = rouge(&c, &r, RougeMode::RL).unwrap();
        assert_eq!(recall, 100.0);
        let (f1, _) = rouge_with_options(&c, &r, RougeMode::RL, true).unwrap();
        // P = 2/4, R = 2/2, F1 = 2*0.5*1/(1.5)
        assert!((f1 - 200.0 / 3.0).abs() < 1e-9);
    }

    fn gold_sample(id: &str, distractor: &str) -> MCQSample {
        MCQSample {
            id: id.to_string(),
            article_sentences: vec![toks("irrelevant here .")],
            question: toks("q ?"),
            answer: toks("ans"),
            distractor: toks(distractor),
        }
    }

    #[test]
    fn evaluate_identity_run_scores_100() {
        let refs = vec![
            gold_sample("a#q0#d0", "alpha beta one two"),
            gold_sample("a#q0#d1", "gamma delta three four"),
            gold_sample("a#q0#d2", "epsilon zeta five six"),
        ];
        let gen = vec![GenerationRecord {
            id: "a#q0".into(),
            distractors: vec![
                "alpha beta one two".into(),
                "gamma delta three four".into(),
                "epsilon zeta five six".into(),
            ],
            log_likelihoods: vec![-1.0, -2.0, -3.0],
            diversity_flags: vec![true, true, true],
        }];
        let report = evaluate_run(&gen, &refs).unwrap();
        for row in &report.rows {
            for &v in row {
                assert_eq!(v, 100.0);
            }
        }
        let rendered = report.render("fixture");
        assert_eq!(rendered.lines().count(), 5);
    }

    #[test]
    fn evaluate_average_row_is_slot_mean() {
        let refs = vec![
            gold_sample("a#q0#d0", "alpha beta gamma"),
            gold_sample("a#q0#d1", "delta epsilon"),
        ];
        let gen = vec![GenerationRecord {
            id: "a#q0".into(),
            distractors: vec!["alpha beta gamma".into(), "x y".into(), "delta q".into()],
            log_likelihoods: vec![-1.0, -2.0, -3.0],
            diversity_flags: vec![true, true, true],
        }];
        let report = evaluate_run(&gen, &refs).unwrap();
        for c in 0..7 {
            let mean = (report.rows[0][c] + report.rows[1][c] + report.rows[2][c]) / 3.0;
            assert!((report.rows[3][c] - mean).abs() < 1e-12);
        }
    }

    #[test]
    fn evaluate_unknown_id_is_fatal() {
        let refs = vec![gold_sample("a#q0#d0", "alpha")];
        let gen = vec![GenerationRecord {
            id: "missing#q9".into(),
            distractors: vec!["alpha".into()],
            log_likelihoods: vec![-1.0],
            diversity_flags: vec![true],
        }];
        let err = evaluate_run(&gen, &refs).unwrap_err();
        assert!(err.to_string().contains("missing#q9"));
    }
}
