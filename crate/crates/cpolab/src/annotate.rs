//! Sentence-level consistency annotation: prompt construction, judge
//! response parsing, union merging of two annotators, and balanced-accuracy
//! evaluation. The judge client runs either against a recorded fixture
//! store (byte-stable replay) or a live chat-completion endpoint.
//!
//! Convention used throughout: the positive class is "consistent" (label 1).

use std::collections::{BTreeSet, HashMap};
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum AnnotateError {
    #[error("no sentences to annotate")]
    NoSentences,
    #[error("no JSON object found in response")]
    NoJson,
    #[error("malformed JSON in response: {0}")]
    MalformedJson(String),
    #[error("sentence index {index} out of range for {n_sentences} sentences")]
    IndexOutOfRange { index: usize, n_sentences: usize },
    #[error("sentence {index} appears in both consistent and inconsistent sets")]
    OverlappingSets { index: usize },
    #[error("label sequences have different lengths: {pred} vs {gold}")]
    LengthMismatch { pred: usize, gold: usize },
    #[error("balanced accuracy undefined: no {class} examples in gold labels")]
    EmptyClass { class: &'static str },
    #[error("transport error after {attempts} attempts: {message}")]
    Transport { attempts: usize, message: String },
    #[error("fixture store has no response for prompt {sha} (judge {judge})")]
    FixtureMiss { judge: String, sha: String },
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

// ---------------------------------------------------------------------------
// Prompt construction

const ANNOTATION_INSTRUCTION: &str = "Answer which sentences in the summary are not consistent with the corresponding article. Provide the answer in JSON format like this: {\"inconsistent_sentence\": [indexes of inconsistent sentences], \"consistent_sentence\": [indexes of consistent sentence]}";

/// Sentences are numbered from zero and wrapped in article/summary tags.
pub fn build_annotation_prompt(article: &str, sentences: &[String]) -> Result<String, AnnotateError> {
    if sentences.is_empty() {
        return Err(AnnotateError::NoSentences);
    }
    let mut prompt = String::new();
    prompt.push_str(ANNOTATION_INSTRUCTION);
    prompt.push_str("\n<article>\n");
    prompt.push_str(article);
    prompt.push_str("\n</article>\n<summary>\n");
    for (i, sentence) in sentences.iter().enumerate() {
        prompt.push_str(&format!("({i}) {sentence}\n"));
    }
    prompt.push_str("</summary>");
    Ok(prompt)
}

// ---------------------------------------------------------------------------
// Verdict parsing and merging

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AnnotationVerdict {
    pub inconsistent: BTreeSet<usize>,
    pub consistent: BTreeSet<usize>,
}

#[derive(Deserialize)]
struct RawVerdict {
    #[serde(default)]
    inconsistent_sentence: Vec<usize>,
    #[serde(default)]
    consistent_sentence: Vec<usize>,
}

/// Extract the first balanced JSON object embedded in free-form text.
fn extract_json(text: &str) -> Option<&str> {
    let start = text.find('{')?;
    let mut depth = 0usize;
    let mut in_string = false;
    let mut escaped = false;
    for (i, c) in text[start..].char_indices() {
        if in_string {
            if escaped {
                escaped = false;
            } else if c == '\\' {
                escaped = true;
            } else if c == '"' {
                in_string = false;
            }
            continue;
        }
        match c {
            '"' => in_string = true,
            '{' => depth += 1,
            '}' => {
                depth -= 1;
                if depth == 0 {
                    return Some(&text[start..start + i + 1]);
                }
            }
            _ => {}
        }
    }
    None
}

/// Parse a judge response into a validated verdict. Sentences mentioned in
/// neither list are left unlabeled here; [`merge_union`] defaults them to
/// consistent.
pub fn parse_verdict(response: &str, n_sentences: usize) -> Result<AnnotationVerdict, AnnotateError> {
    let json = extract_json(response).ok_or(AnnotateError::NoJson)?;
    let raw: RawVerdict =
        serde_json::from_str(json).map_err(|e| AnnotateError::MalformedJson(e.to_string()))?;
    let inconsistent: BTreeSet<usize> = raw.inconsistent_sentence.into_iter().collect();
    let consistent: BTreeSet<usize> = raw.consistent_sentence.into_iter().collect();
    for &i in inconsistent.iter().chain(consistent.iter()) {
        if i >= n_sentences {
            return Err(AnnotateError::IndexOutOfRange {
                index: i,
                n_sentences,
            });
        }
    }
    if let Some(&i) = inconsistent.intersection(&consistent).next() {
        return Err(AnnotateError::OverlappingSets { index: i });
    }
    Ok(AnnotationVerdict {
        inconsistent,
        consistent,
    })
}

/// Union rule: a sentence is inconsistent (0) if either annotator flags it;
/// all other sentences are consistent (1).
pub fn merge_union(a: &AnnotationVerdict, b: &AnnotationVerdict, n_sentences: usize) -> Vec<u8> {
    (0..n_sentences)
        .map(|i| u8::from(!a.inconsistent.contains(&i) && !b.inconsistent.contains(&i)))
        .collect()
}

// ---------------------------------------------------------------------------
// Evaluation

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

/// Standard counts with consistent (1) as the positive class.
pub fn confusion(pred: &[u8], gold: &[u8]) -> Result<ConfusionCounts, AnnotateError> {
    if pred.len() != gold.len() {
        return Err(AnnotateError::LengthMismatch {
            pred: pred.len(),
            gold: gold.len(),
        });
    }
    let mut c = ConfusionCounts {
        tp: 0,
        fp: 0,
        tn: 0,
        fn_: 0,
    };
    for (&p, &g) in pred.iter().zip(gold.iter()) {
        match (p != 0, g != 0) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, false) => c.tn += 1,
            (false, true) => c.fn_ += 1,
        }
    }
    Ok(c)
}

/// (TPR + TNR) / 2.
pub fn balanced_accuracy(c: &ConfusionCounts) -> Result<f64, AnnotateError> {
    if c.tp + c.fn_ == 0 {
        return Err(AnnotateError::EmptyClass { class: "positive" });
    }
    if c.tn + c.fp == 0 {
        return Err(AnnotateError::EmptyClass { class: "negative" });
    }
    let tpr = c.tp as f64 / (c.tp + c.fn_) as f64;
    let tnr = c.tn as f64 / (c.tn + c.fp) as f64;
    Ok((tpr + tnr) / 2.0)
}

// ---------------------------------------------------------------------------
// Judge client

pub fn prompt_sha(prompt: &str) -> String {
    let digest = Sha256::digest(prompt.as_bytes());
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

/// Raw request channel behind the retry logic. Implemented by the fixture
/// store and the live HTTP client.
pub trait Transport {
    fn judge_name(&self) -> &str;
    fn send(&mut self, prompt: &str) -> Result<String, AnnotateError>;
}

#[derive(Debug, Serialize, Deserialize)]
struct FixtureRecord {
    judge: String,
    prompt_sha: String,
    response: String,
}

/// Content-addressed store of recorded judge responses, keyed by
/// (judge name, prompt hash).
#[derive(Debug, Default, Clone)]
pub struct FixtureStore {
    responses: HashMap<(String, String), String>,
}

impl FixtureStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, judge: &str, prompt: &str, response: &str) {
        self.responses
            .insert((judge.to_string(), prompt_sha(prompt)), response.to_string());
    }

    pub fn load(path: &Path) -> Result<Self, AnnotateError> {
        let file = fs::File::open(path).map_err(|e| AnnotateError::Io {
            path: path.display().to_string(),
            source: e,
        })?;
        let mut store = FixtureStore::new();
        for line in BufReader::new(file).lines() {
            let line = line.map_err(|e| AnnotateError::Io {
                path: path.display().to_string(),
                source: e,
            })?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: FixtureRecord = serde_json::from_str(&line)
                .map_err(|e| AnnotateError::MalformedJson(e.to_string()))?;
            store
                .responses
                .insert((rec.judge, rec.prompt_sha), rec.response);
        }
        Ok(store)
    }

    pub fn save(&self, path: &Path) -> Result<(), AnnotateError> {
        let mut file = fs::File::create(path).map_err(|e| AnnotateError::Io {
            path: path.display().to_string(),
            source: e,
        })?;
        let mut entries: Vec<_> = self.responses.iter().collect();
        entries.sort();
        for ((judge, sha), response) in entries {
            let rec = FixtureRecord {
                judge: judge.clone(),
                prompt_sha: sha.clone(),
                response: response.clone(),
            };
            writeln!(file, "{}", serde_json::to_string(&rec).unwrap()).map_err(|e| {
                AnnotateError::Io {
                    path: path.display().to_string(),
                    source: e,
                }
            })?;
        }
        Ok(())
    }

    pub fn transport(&self, judge: &str) -> FixtureTransport {
        FixtureTransport {
            judge: judge.to_string(),
            store: self.clone(),
        }
    }
}

pub struct FixtureTransport {
    judge: String,
    store: FixtureStore,
}

impl Transport for FixtureTransport {
    fn judge_name(&self) -> &str {
        &self.judge
    }

    fn send(&mut self, prompt: &str) -> Result<String, AnnotateError> {
        let sha = prompt_sha(prompt);
        self.store
            .responses
            .get(&(self.judge.clone(), sha.clone()))
            .cloned()
            .ok_or(AnnotateError::FixtureMiss {
                judge: self.judge.clone(),
                sha,
            })
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EndpointConfig {
    pub base_url: String,
    pub model: String,
    /// Name of the environment variable holding the bearer token.
    pub auth_env_var: String,
}

/// Chat-completion client for live annotation.
pub struct HttpTransport {
    config: EndpointConfig,
    client: reqwest::blocking::Client,
}

impl HttpTransport {
    pub fn new(config: EndpointConfig) -> Self {
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(60))
            .build()
            .expect("http client");
        HttpTransport { config, client }
    }
}

impl Transport for HttpTransport {
    fn judge_name(&self) -> &str {
        &self.config.model
    }

    fn send(&mut self, prompt: &str) -> Result<String, AnnotateError> {
        let token = std::env::var(&self.config.auth_env_var).map_err(|_| {
            AnnotateError::Transport {
                attempts: 0,
                message: format!("auth env var {} not set", self.config.auth_env_var),
            }
        })?;
        let url = format!("{}/chat/completions", self.config.base_url.trim_end_matches('/'));
        let body = serde_json::json!({
            "model": self.config.model,
            "messages": [{"role": "user", "content": prompt}],
            "temperature": 0.0,
        });
        let resp = self
            .client
            .post(&url)
            .bearer_auth(token)
            .json(&body)
            .send()
            .and_then(|r| r.error_for_status())
            .map_err(|e| AnnotateError::Transport {
                attempts: 1,
                message: e.to_string(),
            })?;
        let value: serde_json::Value = resp.json().map_err(|e| AnnotateError::Transport {
            attempts: 1,
            message: e.to_string(),
        })?;
        value["choices"][0]["message"]["content"]
            .as_str()
            .map(str::to_string)
            .ok_or_else(|| AnnotateError::Transport {
                attempts: 1,
                message: "response missing choices[0].message.content".into(),
            })
    }
}

/// One raw exchange kept for audit; annotator disagreement is data.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AuditEntry {
    pub judge: String,
    pub prompt_sha: String,
    pub response: String,
    pub retries: usize,
}

/// Retrying wrapper over a transport. Retries transport failures with
/// linear backoff and records every successful raw response.
pub struct JudgeClient<T: Transport> {
    transport: T,
    pub max_retries: usize,
    pub backoff: Duration,
    pub audit_log: Vec<AuditEntry>,
}

impl<T: Transport> JudgeClient<T> {
    pub fn new(transport: T, max_retries: usize) -> Self {
        JudgeClient {
            transport,
            max_retries,
            backoff: Duration::from_millis(200),
            audit_log: Vec::new(),
        }
    }

    pub fn judge_name(&self) -> String {
        self.transport.judge_name().to_string()
    }

    pub fn request(&mut self, prompt: &str) -> Result<String, AnnotateError> {
        let mut attempts = 0usize;
        loop {
            match self.transport.send(prompt) {
                Ok(response) => {
                    self.audit_log.push(AuditEntry {
                        judge: self.transport.judge_name().to_string(),
                        prompt_sha: prompt_sha(prompt),
                        response: response.clone(),
                        retries: attempts,
                    });
                    return Ok(response);
                }
                // fixture misses are not transient; do not retry them
                Err(AnnotateError::FixtureMiss { judge, sha }) => {
                    return Err(AnnotateError::FixtureMiss { judge, sha });
                }
                Err(err) => {
                    attempts += 1;
                    if attempts > self.max_retries {
                        return Err(AnnotateError::Transport {
                            attempts,
                            message: err.to_string(),
                        });
                    }
                    std::thread::sleep(self.backoff * attempts as u32);
                }
            }
        }
    }

    pub fn annotate(
        &mut self,
        article: &str,
        sentences: &[String],
    ) -> Result<AnnotationVerdict, AnnotateError> {
        let prompt = build_annotation_prompt(article, sentences)?;
        let response = self.request(&prompt)?;
        parse_verdict(&response, sentences.len())
    }
}
