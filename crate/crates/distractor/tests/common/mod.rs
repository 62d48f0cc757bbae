//! Shared fixtures for the integration suites: a deterministic ten-article
//! exam corpus in the raw JSON layout plus a matching embedding file.

#![allow(dead_code)]

use std::collections::BTreeSet;
use std::path::Path;

const ANIMALS: [&str; 10] = [
    "dolphins", "tigers", "rabbits", "camels", "falcons", "otters", "pandas", "geckos", "bisons",
    "lemurs",
];
const PLACES: [&str; 10] = [
    "river", "forest", "meadow", "desert", "cliff", "harbor", "valley", "canyon", "prairie",
    "lagoon",
];
const FOODS: [&str; 10] = [
    "fish", "berries", "clover", "grass", "mice", "clams", "bamboo", "crickets", "hay", "fruit",
];

fn article_text(k: usize) -> String {
    let (a, p, f) = (ANIMALS[k], PLACES[k], FOODS[k]);
    format!(
        "The {a} lived near the {p}. Every morning the {a} looked for {f}. \
         Children watched the {a} play. The {a} liked the {p} very much. \
         One day the {a} found some {f}."
    )
}

/// Write ten raw exam JSON files into `dir`. Article 0 additionally carries
/// a mid-blank question and an off-article distractor so the filters have
/// something to drop.
pub fn write_fixture_corpus(dir: &Path) {
    std::fs::create_dir_all(dir).unwrap();
    for k in 0..10 {
        let (a, p, f) = (ANIMALS[k], PLACES[k], FOODS[k]);
        let letters = ["A", "B", "C", "D"];
        let ans1 = letters[k % 4];
        let mut questions = vec![
            format!("What did the {a} look for ?"),
            format!("The {a} liked to play near the _ ."),
        ];
        let q1_opts: Vec<String> = {
            let distractors = [
                format!("the {a}"),
                format!("the {p} and the {a}"),
                format!("{a} near the {p}"),
            ];
            let mut opts = Vec::new();
            let mut di = 0;
            for letter in letters {
                if letter == ans1 {
                    opts.push(f.to_string());
                } else {
                    opts.push(distractors[di].clone());
                    di += 1;
                }
            }
            opts
        };
        let q2_opts = vec![
            format!("the {p}"),
            format!("the young {a}"),
            format!("some {f} for the {a}"),
            format!("the {a} house"),
        ];
        let mut options = vec![q1_opts, q2_opts];
        let mut answers = vec![ans1.to_string(), "A".to_string()];
        if k == 0 {
            // blank not in final position: dropped by the form filter
            questions.push(format!("The _ was near the {p} every day ."));
            options.push(vec![
                format!("the {a}"),
                format!("the {p} and the {a}"),
                format!("{a} near the {p}"),
                f.to_string(),
            ]);
            answers.push("D".to_string());
            // distractors with no article overlap: dropped by the
            // weighted-frequency filter
            questions.push(format!("Who watched the {a} ?"));
            options.push(vec![
                "children".to_string(),
                "zebras entirely elsewhere".to_string(),
                "unknown strangers".to_string(),
                "imaginary visitors".to_string(),
            ]);
            answers.push("A".to_string());
        }
        let file = serde_json::json!({
            "article": article_text(k),
            "questions": questions,
            "options": options,
            "answers": answers,
        });
        std::fs::write(
            dir.join(format!("art{k:04}.json")),
            serde_json::to_vec_pretty(&file).unwrap(),
        )
        .unwrap();
    }
}

/// Every distinct token appearing anywhere in the fixture corpus.
pub fn fixture_tokens() -> BTreeSet<String> {
    let dir = tempfile::tempdir().unwrap();
    write_fixture_corpus(dir.path());
    let mut tokens = BTreeSet::new();
    for k in 0..10 {
        let text =
            std::fs::read_to_string(dir.path().join(format!("art{k:04}.json"))).unwrap();
        let v: serde_json::Value = serde_json::from_str(&text).unwrap();
        let mut texts = vec![v["article"].as_str().unwrap().to_string()];
        for q in v["questions"].as_array().unwrap() {
            texts.push(q.as_str().unwrap().to_string());
        }
        for opts in v["options"].as_array().unwrap() {
            for o in opts.as_array().unwrap() {
                texts.push(o.as_str().unwrap().to_string());
            }
        }
        for t in texts {
            tokens.extend(distractor::corpus::tokenize(&t));
        }
    }
    tokens
}

/// Deterministic pseudo-embedding for one token.
fn token_vector(token: &str, dim: usize) -> Vec<f64> {
    let mut h: u64 = 1469598103934665603;
    for b in token.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(1099511628211);
    }
    (0..dim)
        .map(|j| {
            let x = h.wrapping_add(j as u64).wrapping_mul(6364136223846793005);
            ((x >> 33) as f64 / (1u64 << 31) as f64) * 0.2 - 0.1
        })
        .collect()
}

/// Write a text embedding file covering every fixture token.
pub fn write_fixture_embeddings(path: &Path, dim: usize) {
    let mut out = String::new();
    for token in fixture_tokens() {
        let vec = token_vector(&token, dim);
        out.push_str(&token);
        for v in vec {
            out.push_str(&format!(" {v:.6}"));
        }
        out.push('\n');
    }
    std::fs::write(path, out).unwrap();
}
