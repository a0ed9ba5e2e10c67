//! Regenerates the committed demo fixtures under `fixtures/`: a raw input
//! corpus, a recorded judge-response store covering it, and the stats the
//! build-data pipeline is expected to produce from them.
//!
//! Run with `cargo run -p cpolab --example gen_demo_fixtures`.

use std::fs;
use std::path::PathBuf;

use cpolab::annotate::{build_annotation_prompt, FixtureStore};
use cpolab::corpus::sentence_texts;

const JUDGES: [&str; 2] = ["gpt-4", "claude-2"];

struct Demo {
    article_id: &'static str,
    article: &'static str,
    summary: &'static str,
    /// Per judge, the sentence indexes flagged inconsistent. None means the
    /// record is expected to be dropped by a filter before annotation.
    verdicts: Option<[&'static [usize]; 2]>,
}

const DEMOS: [Demo; 6] = [
    Demo {
        article_id: "demo-1",
        article: "The village council voted to restore the old mill. Funding comes from a heritage grant awarded in March.",
        summary: "The council voted to restore the mill. A heritage grant pays for the work.",
        verdicts: Some([&[], &[]]),
    },
    Demo {
        article_id: "demo-2",
        article: "The observatory recorded a meteor shower on Tuesday night. Cloud cover limited visibility after midnight.",
        summary: "A meteor shower was recorded on Tuesday. The observatory sold tickets for a laser show.",
        verdicts: Some([&[1], &[]]),
    },
    Demo {
        article_id: "demo-3",
        article: "The bakery on Elm Street won a regional prize for its rye bread.",
        summary: "An Elm Street bakery won a prize for rye bread.",
        verdicts: Some([&[], &[]]),
    },
    Demo {
        article_id: "demo-4",
        article: "The harbour will close for dredging next week.",
        summary: "The harbour closes next week for",
        verdicts: None, // fragment: no terminal punctuation
    },
    Demo {
        article_id: "demo-5",
        article: "A new tram line opened between the station and the fairground.",
        summary: "A new tram line opened \u{1F68B}.",
        verdicts: None, // strange symbols
    },
    Demo {
        article_id: "demo-6",
        article: "The library extended its weekend opening hours.",
        summary: "\u{0411}\u{0438}\u{0431}\u{043b}\u{0438}\u{043e}\u{0442}\u{0435}\u{043a}\u{0430} \u{0442}\u{0435}\u{043f}\u{0435}\u{0440}\u{044c} \u{043e}\u{0442}\u{043a}\u{0440}\u{044b}\u{0442}\u{0430} \u{0434}\u{043e}\u{043b}\u{044c}\u{0448}\u{0435}.",
        verdicts: None, // non-Latin script
    },
];

fn verdict_json(n_sentences: usize, inconsistent: &[usize]) -> String {
    let consistent: Vec<usize> = (0..n_sentences).filter(|i| !inconsistent.contains(i)).collect();
    serde_json::json!({
        "inconsistent_sentence": inconsistent,
        "consistent_sentence": consistent,
    })
    .to_string()
}

fn main() {
    let dir = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("fixtures");
    fs::create_dir_all(&dir).unwrap();

    // raw corpus
    let raw: Vec<String> = DEMOS
        .iter()
        .map(|d| {
            serde_json::json!({
                "article_id": d.article_id,
                "article": d.article,
                "summary": d.summary,
                "source_model": "demo-generator",
                "data_source": "synthetic",
            })
            .to_string()
        })
        .collect();
    fs::write(dir.join("raw_demo.jsonl"), raw.join("\n") + "\n").unwrap();

    // judge response store
    let mut store = FixtureStore::new();
    let mut kept = 0usize;
    let mut positive = 0usize;
    for d in &DEMOS {
        let Some(verdicts) = &d.verdicts else { continue };
        let sentences = sentence_texts(d.summary).unwrap();
        let prompt = build_annotation_prompt(d.article, &sentences).unwrap();
        for (judge, flagged) in JUDGES.iter().zip(verdicts) {
            store.insert(judge, &prompt, &verdict_json(sentences.len(), flagged));
        }
        kept += 1;
        if verdicts.iter().all(|f| f.is_empty()) {
            positive += 1;
        }
    }
    store.save(&dir.join("judge_fixtures.jsonl")).unwrap();

    // expected build-data statistics
    let expected = serde_json::json!({
        "count": kept,
        "positive": positive,
        "negative": kept - positive,
        "input_records": DEMOS.len(),
    });
    fs::write(
        dir.join("expected_stats.json"),
        serde_json::to_string_pretty(&expected).unwrap() + "\n",
    )
    .unwrap();

    println!(
        "wrote fixtures to {} ({} raw, {} kept, {} positive)",
        dir.display(),
        DEMOS.len(),
        kept,
        positive
    );
}
