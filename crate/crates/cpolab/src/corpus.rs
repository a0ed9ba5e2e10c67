//! Sentence-level annotated summarization records and the dataset pipeline:
//! segmentation, quality filtering, token/sentence alignment, JSONL
//! persistence, statistics, and the 9:1 train/validation split.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("empty text")]
    EmptyText,
    #[error("empty dataset")]
    EmptyDataset,
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("record {article_id}: {message}")]
    BadRecord { article_id: String, message: String },
    #[error("token at byte {offset} cannot be mapped to a sentence")]
    Alignment { offset: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataSource {
    Xsum,
    Cnndm,
    Synthetic,
}

/// One labeled summary sentence. `label` is 1 for consistent, 0 for
/// inconsistent.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
pub struct LabeledSentence {
    pub text: String,
    pub label: u8,
}

/// An article plus a summary split into labeled sentences.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
pub struct AnnotatedSummary {
    pub article_id: String,
    pub article: String,
    pub summary: String,
    pub sentences: Vec<LabeledSentence>,
    pub source_model: String,
    pub data_source: DataSource,
}

fn normalize_ws(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

impl AnnotatedSummary {
    pub fn validate(&self) -> Result<(), CorpusError> {
        if self.sentences.is_empty() {
            return Err(CorpusError::BadRecord {
                article_id: self.article_id.clone(),
                message: "record has no sentences".into(),
            });
        }
        for s in &self.sentences {
            if s.label > 1 {
                return Err(CorpusError::BadRecord {
                    article_id: self.article_id.clone(),
                    message: format!("label {} is not binary", s.label),
                });
            }
        }
        let joined = normalize_ws(
            &self
                .sentences
                .iter()
                .map(|s| s.text.as_str())
                .collect::<Vec<_>>()
                .join(" "),
        );
        if joined != normalize_ws(&self.summary) {
            return Err(CorpusError::BadRecord {
                article_id: self.article_id.clone(),
                message: "sentences do not reconstruct summary".into(),
            });
        }
        Ok(())
    }

    pub fn sentence_labels(&self) -> Vec<u8> {
        self.sentences.iter().map(|s| s.label).collect()
    }

    /// 1 iff every sentence is consistent.
    pub fn y(&self) -> u8 {
        u8::from(self.sentences.iter().all(|s| s.label == 1))
    }
}

// ---------------------------------------------------------------------------
// Byte-level tokenizer

pub const EOS_TOKEN: usize = 256;
pub const PAD_TOKEN: usize = 257;
pub const VOCAB_SIZE: usize = 258;

/// Byte-level tokenizer: ids 0..=255 are raw bytes, followed by specials.
/// Round trips any UTF-8 text exactly.
#[derive(Debug, Clone, Copy, Default)]
pub struct ByteTokenizer;

impl ByteTokenizer {
    pub fn encode(&self, text: &str) -> Vec<usize> {
        text.bytes().map(|b| b as usize).collect()
    }

    pub fn decode(&self, tokens: &[usize]) -> String {
        let bytes: Vec<u8> = tokens
            .iter()
            .filter(|&&t| t < 256)
            .map(|&t| t as u8)
            .collect();
        String::from_utf8_lossy(&bytes).into_owned()
    }
}

// ---------------------------------------------------------------------------
// Sentence segmentation

/// Byte range of one sentence. Spans partition the whole text; trailing
/// whitespace after a terminal belongs to the sentence it follows.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SentenceSpan {
    pub start: usize,
    pub end: usize,
}

const ABBREVIATIONS: &[&str] = &[
    "Mr", "Mrs", "Ms", "Dr", "Prof", "St", "vs", "etc", "e.g", "i.e", "Jr", "Sr", "No",
];

fn is_terminal(c: char) -> bool {
    matches!(c, '.' | '!' | '?')
}

fn ends_with_abbreviation(text: &str, dot_pos: usize) -> bool {
    let before = &text[..dot_pos];
    for abbr in ABBREVIATIONS {
        if before.ends_with(abbr) {
            let prefix_end = before.len() - abbr.len();
            let boundary = before[..prefix_end]
                .chars()
                .next_back()
                .map_or(true, |c| !c.is_alphanumeric());
            if boundary {
                return true;
            }
        }
    }
    false
}

/// Deterministic rule-based splitter: a sentence ends at `.`, `!` or `?`
/// (plus any closing quotes/brackets) followed by whitespace, unless the
/// period terminates a known abbreviation or sits between digits.
pub fn segment_sentences(text: &str) -> Result<Vec<SentenceSpan>, CorpusError> {
    if text.trim().is_empty() {
        return Err(CorpusError::EmptyText);
    }
    let bytes = text.as_bytes();
    let mut spans = Vec::new();
    let mut start = 0usize;
    let mut iter = text.char_indices().peekable();
    while let Some((i, c)) = iter.next() {
        if !is_terminal(c) {
            continue;
        }
        if c == '.' {
            // decimal number like 3.5
            let prev_digit = text[..i].chars().next_back().is_some_and(|p| p.is_ascii_digit());
            let next_digit = iter.peek().is_some_and(|&(_, n)| n.is_ascii_digit());
            if prev_digit && next_digit {
                continue;
            }
            if ends_with_abbreviation(text, i) {
                continue;
            }
        }
        // absorb closing quotes and brackets
        let mut end = i + c.len_utf8();
        while let Some(&(j, n)) = iter.peek() {
            if matches!(n, '"' | '\'' | ')' | ']' | '\u{201d}' | '\u{2019}') {
                end = j + n.len_utf8();
                iter.next();
            } else {
                break;
            }
        }
        // sentence boundary only if followed by whitespace or end of text
        let at_end = end == bytes.len();
        let ws_next = text[end..].chars().next().is_some_and(char::is_whitespace);
        if at_end || ws_next {
            // absorb trailing whitespace into this span
            let mut span_end = end;
            while let Some(&(j, n)) = iter.peek() {
                if n.is_whitespace() {
                    span_end = j + n.len_utf8();
                    iter.next();
                } else {
                    break;
                }
            }
            if at_end {
                span_end = bytes.len();
            }
            spans.push(SentenceSpan {
                start,
                end: span_end,
            });
            start = span_end;
        }
    }
    if start < bytes.len() {
        spans.push(SentenceSpan {
            start,
            end: bytes.len(),
        });
    }
    Ok(spans)
}

pub fn sentence_texts(text: &str) -> Result<Vec<String>, CorpusError> {
    Ok(segment_sentences(text)?
        .iter()
        .map(|s| text[s.start..s.end].trim().to_string())
        .filter(|s| !s.is_empty())
        .collect())
}

// ---------------------------------------------------------------------------
// Quality filtering

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FilterRule {
    Fragment,
    Language,
    Symbols,
}

impl FilterRule {
    pub fn all() -> Vec<FilterRule> {
        vec![FilterRule::Fragment, FilterRule::Language, FilterRule::Symbols]
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum FilterOutcome {
    Keep,
    Reject(FilterRule),
}

/// Pluggable language check. The default is a character-script heuristic;
/// a learned classifier can be slotted in behind the same trait.
pub trait LanguageId {
    fn is_english(&self, text: &str) -> bool;
}

/// Majority-Latin-script heuristic over alphabetic characters.
#[derive(Debug, Clone, Copy, Default)]
pub struct ScriptHeuristic;

impl LanguageId for ScriptHeuristic {
    fn is_english(&self, text: &str) -> bool {
        let mut latin = 0usize;
        let mut other = 0usize;
        for c in text.chars() {
            if c.is_alphabetic() {
                if c.is_ascii_alphabetic() || matches!(c, '\u{00c0}'..='\u{024f}') {
                    latin += 1;
                } else {
                    other += 1;
                }
            }
        }
        other <= latin
    }
}

fn has_strange_symbols(text: &str) -> bool {
    text.chars().any(|c| {
        matches!(u32::from(c),
            0x1F000..=0x1FAFF   // emoji and symbol blocks
            | 0x2600..=0x27BF   // misc symbols, dingbats
            | 0xFE0F            // variation selector
            | 0x200B..=0x200F   // zero-width/format
            | 0x2028..=0x202E   // line/para separators, bidi controls
        )
    })
}

fn lacks_terminal_punctuation(text: &str) -> bool {
    let trimmed = text.trim_end();
    let trimmed = trimmed.trim_end_matches(['"', '\'', ')', ']', '\u{201d}', '\u{2019}']);
    !trimmed.ends_with(['.', '!', '?'])
}

/// Quality heuristics: fragments (no terminal punctuation), non-English
/// text, and emoji/format symbols. Rules are order-independent; the first
/// in `Fragment, Language, Symbols` order that fires is reported.
pub fn filter_summary_with(
    summary: &str,
    rules: &[FilterRule],
    lang: &dyn LanguageId,
) -> FilterOutcome {
    for rule in [FilterRule::Fragment, FilterRule::Language, FilterRule::Symbols] {
        if !rules.contains(&rule) {
            continue;
        }
        let fired = match rule {
            FilterRule::Fragment => lacks_terminal_punctuation(summary),
            FilterRule::Language => !lang.is_english(summary),
            FilterRule::Symbols => has_strange_symbols(summary),
        };
        if fired {
            return FilterOutcome::Reject(rule);
        }
    }
    FilterOutcome::Keep
}

pub fn filter_summary(summary: &str) -> FilterOutcome {
    filter_summary_with(summary, &FilterRule::all(), &ScriptHeuristic)
}

// ---------------------------------------------------------------------------
// Token-to-sentence alignment

/// Token ids for one training sample, with per-token sentence membership.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenizedSample {
    pub prompt_tokens: Vec<usize>,
    pub summary_tokens: Vec<usize>,
    pub sentence_of_token: Vec<usize>,
    pub token_label: Vec<u8>,
    pub y: u8,
}

impl TokenizedSample {
    pub fn validate(&self) -> bool {
        self.summary_tokens.len() == self.sentence_of_token.len()
            && self.summary_tokens.len() == self.token_label.len()
            && self.y == u8::from(self.token_label.iter().all(|&l| l == 1))
    }
}

/// Map every summary token to the sentence containing its first byte.
/// `instruction` is the fully rendered prompt (instruction + article).
pub fn align_tokens(
    record: &AnnotatedSummary,
    tokenizer: &ByteTokenizer,
    instruction: &str,
) -> Result<TokenizedSample, CorpusError> {
    record.validate()?;
    let spans = segment_sentences(&record.summary)?;
    // Pair non-empty spans with labeled sentences in order.
    let mut labeled_spans: Vec<(SentenceSpan, u8)> = Vec::new();
    let mut si = 0usize;
    for span in &spans {
        if record.summary[span.start..span.end].trim().is_empty() {
            continue;
        }
        let label = record
            .sentences
            .get(si)
            .ok_or_else(|| CorpusError::BadRecord {
                article_id: record.article_id.clone(),
                message: format!(
                    "summary segments into more sentences ({}) than labels ({})",
                    spans.len(),
                    record.sentences.len()
                ),
            })?
            .label;
        labeled_spans.push((*span, label));
        si += 1;
    }
    if si != record.sentences.len() {
        return Err(CorpusError::BadRecord {
            article_id: record.article_id.clone(),
            message: format!(
                "summary segments into {} sentences but has {} labels",
                si,
                record.sentences.len()
            ),
        });
    }

    let summary_tokens = tokenizer.encode(&record.summary);
    let mut sentence_of_token = Vec::with_capacity(summary_tokens.len());
    let mut token_label = Vec::with_capacity(summary_tokens.len());
    // byte tokenizer: token i starts at byte offset i
    for offset in 0..summary_tokens.len() {
        let idx = labeled_spans
            .iter()
            .position(|(span, _)| offset >= span.start && offset < span.end)
            .ok_or(CorpusError::Alignment { offset })?;
        sentence_of_token.push(idx);
        token_label.push(labeled_spans[idx].1);
    }
    let y = u8::from(token_label.iter().all(|&l| l == 1));
    Ok(TokenizedSample {
        prompt_tokens: tokenizer.encode(instruction),
        summary_tokens,
        sentence_of_token,
        token_label,
        y,
    })
}

// ---------------------------------------------------------------------------
// Persistence and statistics

pub fn save_jsonl(path: &Path, records: &[AnnotatedSummary]) -> Result<(), CorpusError> {
    let mut file = fs::File::create(path).map_err(|e| CorpusError::Io {
        path: path.display().to_string(),
        source: e,
    })?;
    for record in records {
        let line = serde_json::to_string(record).map_err(|e| CorpusError::Parse {
            line: 0,
            message: e.to_string(),
        })?;
        writeln!(file, "{line}").map_err(|e| CorpusError::Io {
            path: path.display().to_string(),
            source: e,
        })?;
    }
    Ok(())
}

pub fn load_jsonl(path: &Path) -> Result<Vec<AnnotatedSummary>, CorpusError> {
    let file = fs::File::open(path).map_err(|e| CorpusError::Io {
        path: path.display().to_string(),
        source: e,
    })?;
    let reader = BufReader::new(file);
    let mut records = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| CorpusError::Io {
            path: path.display().to_string(),
            source: e,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let record: AnnotatedSummary =
            serde_json::from_str(&line).map_err(|e| CorpusError::Parse {
                line: i + 1,
                message: e.to_string(),
            })?;
        records.push(record);
    }
    Ok(records)
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct CorpusStats {
    pub count: usize,
    pub positive: usize,
    pub negative: usize,
    pub mean_summary_words: f64,
    pub mean_article_words: f64,
}

pub fn compute_stats(records: &[AnnotatedSummary]) -> Result<CorpusStats, CorpusError> {
    if records.is_empty() {
        return Err(CorpusError::EmptyDataset);
    }
    let count = records.len();
    let positive = records.iter().filter(|r| r.y() == 1).count();
    let sum_words: usize = records
        .iter()
        .map(|r| r.summary.split_whitespace().count())
        .sum();
    let art_words: usize = records
        .iter()
        .map(|r| r.article.split_whitespace().count())
        .sum();
    Ok(CorpusStats {
        count,
        positive,
        negative: count - positive,
        mean_summary_words: sum_words as f64 / count as f64,
        mean_article_words: art_words as f64 / count as f64,
    })
}

pub fn record_hash(article_id: &str) -> u64 {
    let digest = Sha256::digest(article_id.as_bytes());
    u64::from_le_bytes(digest[0..8].try_into().unwrap())
}

/// Deterministic 9:1 train/validation split by record hash.
pub fn split_train_val(records: &[AnnotatedSummary]) -> (Vec<AnnotatedSummary>, Vec<AnnotatedSummary>) {
    let mut train = Vec::new();
    let mut val = Vec::new();
    for r in records {
        if record_hash(&r.article_id) % 10 < 9 {
            train.push(r.clone());
        } else {
            val.push(r.clone());
        }
    }
    (train, val)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(sentences: &[(&str, u8)]) -> AnnotatedSummary {
        let summary = sentences
            .iter()
            .map(|(t, _)| *t)
            .collect::<Vec<_>>()
            .join(" ");
        AnnotatedSummary {
            article_id: "a1".into(),
            article: "Some article text.".into(),
            summary,
            sentences: sentences
                .iter()
                .map(|(t, l)| LabeledSentence {
                    text: t.to_string(),
                    label: *l,
                })
                .collect(),
            source_model: "test".into(),
            data_source: DataSource::Synthetic,
        }
    }

    #[test]
    fn segments_two_sentences() {
        let spans = segment_sentences("A cat. A dog.").unwrap();
        assert_eq!(spans.len(), 2);
        assert_eq!(sentence_texts("A cat. A dog.").unwrap(), vec!["A cat.", "A dog."]);
    }

    #[test]
    fn single_sentence() {
        assert_eq!(sentence_texts("One sentence only.").unwrap().len(), 1);
    }

    #[test]
    fn empty_text_rejected() {
        assert!(matches!(segment_sentences("  "), Err(CorpusError::EmptyText)));
    }

    #[test]
    fn abbreviations_and_decimals_do_not_split() {
        assert_eq!(sentence_texts("Mr. Smith spent $3.5 million. He left.").unwrap().len(), 2);
        assert_eq!(sentence_texts("See e.g. the report. Done.").unwrap().len(), 2);
    }

    #[test]
    fn spans_partition_text() {
        let text = "First one. Second here! Third? Trailing tail";
        let spans = segment_sentences(text).unwrap();
        assert_eq!(spans[0].start, 0);
        for w in spans.windows(2) {
            assert_eq!(w[0].end, w[1].start);
        }
        assert_eq!(spans.last().unwrap().end, text.len());
    }

    #[test]
    fn segmentation_concat_is_identity_on_normalized_text() {
        let texts = [
            "The plan was announced. Ministers said it would work. It did not.",
            "A single line without end",
            "Quotes \"end here.\" Then more.",
        ];
        for t in texts {
            let joined = sentence_texts(t).unwrap().join(" ");
            assert_eq!(normalize_ws(&joined), normalize_ws(t));
        }
    }

    #[test]
    fn two_span_numbering_matches_indexed_prompt_fixture() {
        // The annotation prompt format numbers these two from zero.
        let summary = "The Confederation Cup draw has taken place, with 16 teams split into four groups. The Congolense will face off against the second-round winners of the Confederation Cup.";
        let sents = sentence_texts(summary).unwrap();
        assert_eq!(sents.len(), 2);
        assert!(sents[0].starts_with("The Confederation Cup draw"));
        assert!(sents[1].starts_with("The Congolense"));
    }

    #[test]
    fn filter_fragment() {
        assert_eq!(
            filter_summary("The plan was announced"),
            FilterOutcome::Reject(FilterRule::Fragment)
        );
        assert_eq!(filter_summary("The plan was announced."), FilterOutcome::Keep);
    }

    #[test]
    fn filter_language() {
        assert_eq!(
            filter_summary("R\u{00e9}sum\u{00e9} \u{65b0}\u{95fb}\u{62a5}\u{9053}\u{6458}\u{8981}\u{5185}\u{5bb9}."),
            FilterOutcome::Reject(FilterRule::Language)
        );
    }

    #[test]
    fn filter_symbols() {
        assert_eq!(
            filter_summary("Great news \u{1F600}."),
            FilterOutcome::Reject(FilterRule::Symbols)
        );
    }

    #[test]
    fn filter_is_idempotent_and_rule_selective() {
        let text = "No terminal mark here";
        assert_eq!(filter_summary(text), filter_summary(text));
        // disabling the fragment rule lets it through
        assert_eq!(
            filter_summary_with(text, &[FilterRule::Language, FilterRule::Symbols], &ScriptHeuristic),
            FilterOutcome::Keep
        );
    }

    #[test]
    fn align_direct_mapping() {
        let tok = ByteTokenizer;
        let rec = record(&[("Right one.", 1), ("Bad.", 0)]);
        let sample = align_tokens(&rec, &tok, "prompt: Some article text.").unwrap();
        assert!(sample.validate());
        assert_eq!(sample.y, 0);
        // first sentence covers bytes 0..11 (terminal + following space)
        assert_eq!(sample.token_label[0..10], [1; 10]);
        assert_eq!(*sample.token_label.last().unwrap(), 0);
        for (i, &s) in sample.sentence_of_token.iter().enumerate() {
            assert_eq!(sample.token_label[i], rec.sentences[s].label);
        }
    }

    #[test]
    fn align_all_consistent_gives_y1() {
        let tok = ByteTokenizer;
        let rec = record(&[("All good.", 1), ("Still good.", 1)]);
        let sample = align_tokens(&rec, &tok, "p").unwrap();
        assert_eq!(sample.y, 1);
        assert!(sample.token_label.iter().all(|&l| l == 1));
    }

    #[test]
    fn align_roundtrip_detokenize() {
        let tok = ByteTokenizer;
        let rec = record(&[("A cat sat.", 1)]);
        let sample = align_tokens(&rec, &tok, "p").unwrap();
        assert_eq!(tok.decode(&sample.summary_tokens), rec.summary);
    }

    #[test]
    fn y_is_product_of_token_labels() {
        let tok = ByteTokenizer;
        for labels in [[1u8, 1], [1, 0], [0, 1], [0, 0]] {
            let rec = record(&[("First part.", labels[0]), ("Second part.", labels[1])]);
            let sample = align_tokens(&rec, &tok, "p").unwrap();
            let product: u8 = sample.token_label.iter().product();
            assert_eq!(sample.y, product);
        }
    }

    #[test]
    fn jsonl_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("data.jsonl");
        let records = vec![record(&[("One.", 1)]), record(&[("Two.", 0), ("Three.", 1)])];
        save_jsonl(&path, &records).unwrap();
        let loaded = load_jsonl(&path).unwrap();
        assert_eq!(records, loaded);
    }

    #[test]
    fn jsonl_missing_field_names_line() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.jsonl");
        std::fs::write(
            &path,
            "{\"article_id\":\"x\",\"article\":\"a\",\"summary\":\"s\",\"source_model\":\"m\",\"data_source\":\"xsum\"}\n",
        )
        .unwrap();
        match load_jsonl(&path) {
            Err(CorpusError::Parse { line, message }) => {
                assert_eq!(line, 1);
                assert!(message.contains("sentences"), "{message}");
            }
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn stats_counts() {
        let records: Vec<AnnotatedSummary> = (0..10)
            .map(|i| {
                let mut r = record(&[("A fine sentence.", u8::from(i % 2 == 0))]);
                r.article_id = format!("id{i}");
                r
            })
            .collect();
        let stats = compute_stats(&records).unwrap();
        assert_eq!(stats.count, 10);
        assert_eq!(stats.positive, 5);
        assert_eq!(stats.negative, 5);
        assert_eq!(stats.positive + stats.negative, stats.count);
    }

    #[test]
    fn stats_hand_enumerated_four_records() {
        // labels: [1], [0], [1,1], [1,0] -> Y = 1,0,1,0
        let records = vec![
            record(&[("Aa bb.", 1)]),
            record(&[("Cc dd.", 0)]),
            record(&[("Ee ff.", 1), ("Gg hh.", 1)]),
            record(&[("Ii jj.", 1), ("Kk ll.", 0)]),
        ];
        let stats = compute_stats(&records).unwrap();
        assert_eq!((stats.count, stats.positive, stats.negative), (4, 2, 2));
        // word counts: 2, 2, 4, 4 -> mean 3
        assert!((stats.mean_summary_words - 3.0).abs() < 1e-12);
    }

    #[test]
    fn stats_empty_rejected() {
        assert!(matches!(compute_stats(&[]), Err(CorpusError::EmptyDataset)));
    }

    #[test]
    fn split_is_deterministic_and_roughly_nine_to_one() {
        let records: Vec<AnnotatedSummary> = (0..1000)
            .map(|i| {
                let mut r = record(&[("Some words here.", 1)]);
                r.article_id = format!("article-{i}");
                r
            })
            .collect();
        let (train, val) = split_train_val(&records);
        assert_eq!(train.len() + val.len(), 1000);
        assert!(val.len() > 50 && val.len() < 150, "val size {}", val.len());
        let (train2, _) = split_train_val(&records);
        assert_eq!(train.len(), train2.len());
    }
}
