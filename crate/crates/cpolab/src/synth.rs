//! Deterministic synthetic data: a desk-scale stand-in for LLM-summary
//! corpora. Consistent sentences copy a prefix of the article; inconsistent
//! sentences draw from a disjoint nonsense vocabulary, so the
//! consistent/inconsistent distinction is learnable by a tiny model.

use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

use crate::corpus::{AnnotatedSummary, DataSource, LabeledSentence};
use crate::probe::ProbeRecord;

// The two vocabularies share no letters at all, so at the byte level the
// consistent/inconsistent distinction stays learnable by a tiny model and
// probability mass gained by one class is mass lost by the other.
const REAL_WORDS: [&str; 8] = ["cat", "dog", "sun", "tree", "bird", "lake", "wind", "rock"];
const FAKE_WORDS: [&str; 8] = ["zym", "phyx", "jyv", "qyzz", "vyph", "fyzz", "hyj", "xyphz"];

fn article(rng: &mut ChaCha20Rng) -> String {
    let n = rng.gen_range(3..=5);
    (0..n)
        .map(|_| *REAL_WORDS.choose(rng).unwrap())
        .collect::<Vec<_>>()
        .join(" ")
}

fn consistent_sentence(article: &str, rng: &mut ChaCha20Rng) -> String {
    let words: Vec<&str> = article.split_whitespace().collect();
    let take = rng.gen_range(2..=words.len().min(3));
    format!("{}.", words[..take].join(" "))
}

fn inconsistent_sentence(rng: &mut ChaCha20Rng) -> String {
    let n = rng.gen_range(2..=3);
    let words: Vec<&str> = (0..n).map(|_| *FAKE_WORDS.choose(rng).unwrap()).collect();
    format!("{}.", words.join(" "))
}

/// Sentence-annotated records, the first half fully consistent (Y=1) and
/// the second half carrying one consistent and one inconsistent sentence
/// (Y=0). Fully determined by the seed.
pub fn synth_corpus(n: usize, seed: u64) -> Vec<AnnotatedSummary> {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let art = article(&mut rng);
            let consistent = i < n / 2;
            let sentences = if consistent {
                vec![LabeledSentence {
                    text: consistent_sentence(&art, &mut rng),
                    label: 1,
                }]
            } else {
                vec![
                    LabeledSentence {
                        text: consistent_sentence(&art, &mut rng),
                        label: 1,
                    },
                    LabeledSentence {
                        text: inconsistent_sentence(&mut rng),
                        label: 0,
                    },
                ]
            };
            let summary = sentences
                .iter()
                .map(|s| s.text.as_str())
                .collect::<Vec<_>>()
                .join(" ");
            AnnotatedSummary {
                article_id: format!("synth-{i}"),
                article: art,
                summary,
                sentences,
                source_model: "synthetic".into(),
                data_source: DataSource::Synthetic,
            }
        })
        .collect()
}

/// Paired probing records: each article appears twice, once with a correct
/// summary (y=1) and once with an incorrect one (y=0).
pub fn synth_probe_records(n: usize, seed: u64) -> Vec<ProbeRecord> {
    let mut rng = ChaCha20Rng::seed_from_u64(seed.wrapping_add(0x5eed));
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let art = article(&mut rng);
        out.push(ProbeRecord {
            article: art.clone(),
            summary: consistent_sentence(&art, &mut rng),
            y: 1,
        });
        if out.len() < n {
            out.push(ProbeRecord {
                article: art,
                summary: inconsistent_sentence(&mut rng),
                y: 0,
            });
        }
    }
    out
}

/// Two Gaussian clusters (means ±`separation`, shared sigma) as labeled
/// feature vectors; the standard sanity input for linear probes.
pub fn gaussian_clusters(
    n_per_class: usize,
    dim: usize,
    separation: f64,
    sigma: f64,
    seed: u64,
) -> Vec<(Vec<f64>, u8)> {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut normal = |mean: f64| -> f64 {
        let u1: f64 = rng.gen_range(1e-12..1.0);
        let u2: f64 = rng.gen_range(0.0..1.0);
        mean + sigma * (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
    };
    let mut data = Vec::with_capacity(2 * n_per_class);
    for _ in 0..n_per_class {
        data.push(((0..dim).map(|_| normal(separation)).collect(), 1u8));
        data.push(((0..dim).map(|_| normal(-separation)).collect(), 0u8));
    }
    data
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn corpus_is_half_consistent_and_valid() {
        let corpus = synth_corpus(200, 42);
        assert_eq!(corpus.len(), 200);
        let positives = corpus.iter().filter(|r| r.y() == 1).count();
        assert_eq!(positives, 100);
        for r in &corpus {
            r.validate().unwrap();
        }
    }

    #[test]
    fn vocabularies_are_disjoint() {
        let real_letters: std::collections::BTreeSet<char> =
            REAL_WORDS.iter().flat_map(|w| w.chars()).collect();
        for w in FAKE_WORDS {
            assert!(!REAL_WORDS.contains(&w));
            assert!(w.chars().all(|c| !real_letters.contains(&c)));
        }
        let corpus = synth_corpus(50, 7);
        for r in &corpus {
            for s in &r.sentences {
                let body = s.text.trim_end_matches('.');
                for word in body.split_whitespace() {
                    if s.label == 1 {
                        assert!(r.article.split_whitespace().any(|a| a == word));
                    } else {
                        assert!(FAKE_WORDS.contains(&word));
                    }
                }
            }
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let a = synth_corpus(30, 9);
        let b = synth_corpus(30, 9);
        assert_eq!(
            serde_json::to_string(&a).unwrap(),
            serde_json::to_string(&b).unwrap()
        );
        assert_ne!(
            serde_json::to_string(&synth_corpus(30, 10)).unwrap(),
            serde_json::to_string(&a).unwrap()
        );
    }

    #[test]
    fn probe_records_are_paired_and_balanced() {
        let records = synth_probe_records(64, 1);
        assert_eq!(records.len(), 64);
        let positives = records.iter().filter(|r| r.y == 1).count();
        assert_eq!(positives, 32);
        for pair in records.chunks(2) {
            assert_eq!(pair[0].article, pair[1].article);
            assert_eq!(pair[0].y, 1);
            assert_eq!(pair[1].y, 0);
        }
    }

    #[test]
    fn clusters_have_expected_geometry() {
        let data = gaussian_clusters(100, 4, 3.0, 0.5, 3);
        assert_eq!(data.len(), 200);
        let mean_pos: f64 = data
            .iter()
            .filter(|(_, y)| *y == 1)
            .flat_map(|(f, _)| f.iter())
            .sum::<f64>()
            / 400.0;
        assert!((mean_pos - 3.0).abs() < 0.2, "mean {mean_pos}");
    }
}
