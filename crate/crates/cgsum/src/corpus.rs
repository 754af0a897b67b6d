//! Paper records: loading, validation, filtering, text normalization.
//!
//! The on-disk corpus is JSON-Lines, one object per paper:
//!
//! ```json
//! {"paper_id": "p1", "title": "...", "abstract": ["sentence", ...],
//!  "body": [{"section": "Introduction", "sentences": ["...", ...]}, ...],
//!  "references": ["p2", "p7"], "label": "cs"}
//! ```
//!
//! Markup spans arrive pre-encoded as `[MATHSPAN]`, `[EQSPAN]`,
//! `[TABLESPAN]`, `[FIGSPAN]`, `[CITESPAN]` placeholders inside sentence
//! strings; normalization replaces each with a single reserved token.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Placeholder → reserved-token mapping for the known markup spans.
pub const SPAN_TOKENS: [(&str, &str); 5] = [
    ("[MATHSPAN]", "<math>"),
    ("[EQSPAN]", "<eq>"),
    ("[TABLESPAN]", "<table>"),
    ("[FIGSPAN]", "<figure>"),
    ("[CITESPAN]", "<cite>"),
];

/// Token substituted for a span placeholder of unknown type.
pub const UNK_SPAN_TOKEN: &str = "<unk-span>";

/// Tokens the tokenizer passes through unchanged (so that re-tokenizing
/// already-normalized text is the identity).
pub const ATOMIC_TOKENS: [&str; 10] = [
    "<math>", "<eq>", "<table>", "<figure>", "<cite>", "<unk-span>", "<pad>", "<unk>", "<s>",
    "</s>",
];

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("cannot read corpus file {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("duplicate paper_id `{0}`")]
    DuplicateId(String),
}

/// A problem found while ingesting one line of a corpus file.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Diagnostic {
    /// 1-based line number in the input file.
    pub line: usize,
    pub message: String,
}

impl std::fmt::Display for Diagnostic {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "line {}: {}", self.line, self.message)
    }
}

/// One body section: its (raw) heading and normalized sentences.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Section {
    pub name: String,
    pub sentences: Vec<Vec<String>>,
}

/// One paper with normalized token sequences.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PaperRecord {
    pub paper_id: String,
    pub title: Vec<String>,
    /// Gold summary, one token sequence per sentence.
    pub abstract_sentences: Vec<Vec<String>>,
    pub sections: Vec<Section>,
    /// Outgoing citations; deduplicated, never contains `paper_id`.
    pub references: Vec<String>,
    pub field_label: Option<String>,
}

impl PaperRecord {
    pub fn section_names(&self) -> impl Iterator<Item = &str> {
        self.sections.iter().map(|s| s.name.as_str())
    }

    /// Body sentences in document order, across sections.
    pub fn body_sentences(&self) -> impl Iterator<Item = &Vec<String>> {
        self.sections.iter().flat_map(|s| s.sentences.iter())
    }

    pub fn body_tokens(&self) -> Vec<String> {
        self.body_sentences().flatten().cloned().collect()
    }

    pub fn abstract_tokens(&self) -> Vec<String> {
        self.abstract_sentences.iter().flatten().cloned().collect()
    }

    pub fn body_token_count(&self) -> usize {
        self.body_sentences().map(|s| s.len()).sum()
    }

    pub fn abstract_token_count(&self) -> usize {
        self.abstract_sentences.iter().map(|s| s.len()).sum()
    }
}

/// The in-memory corpus. Immutable after load; keyed by paper id.
#[derive(Debug, Clone, Default)]
pub struct Corpus {
    pub records: BTreeMap<String, PaperRecord>,
}

impl Corpus {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&PaperRecord> {
        self.records.get(id)
    }

    pub fn ids(&self) -> impl Iterator<Item = &String> {
        self.records.keys()
    }
}

/// Length and structure rules applied by [`filter_corpus`].
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct FilterRules {
    pub abstract_len_min: usize,
    pub abstract_len_max: usize,
    pub body_len_min: usize,
    pub body_len_max: usize,
    pub min_sections: usize,
    pub required_section: String,
}

impl Default for FilterRules {
    fn default() -> Self {
        FilterRules {
            abstract_len_min: 50,
            abstract_len_max: 1000,
            body_len_min: 1000,
            body_len_max: 8000,
            min_sections: 4,
            required_section: "introduction".to_owned(),
        }
    }
}

impl FilterRules {
    pub fn validate(&self) -> Result<(), String> {
        if self.abstract_len_min > self.abstract_len_max {
            return Err("abstract length range inverted".into());
        }
        if self.body_len_min > self.body_len_max {
            return Err("body length range inverted".into());
        }
        if self.abstract_len_min == 0 || self.body_len_min == 0 || self.min_sections == 0 {
            return Err("filter counts must be positive".into());
        }
        Ok(())
    }
}

/// Per-rule removal counts from one [`filter_corpus`] pass. A record can
/// violate several rules at once, so the per-rule counts may sum to more
/// than `total_removed`.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct FilterReport {
    pub removed_abstract_len: usize,
    pub removed_body_len: usize,
    pub removed_sections: usize,
    pub removed_intro: usize,
    pub total_removed: usize,
    pub kept: usize,
}

// ---------------------------------------------------------------------------
// Text normalization
// ---------------------------------------------------------------------------

fn is_detachable(c: char) -> bool {
    c.is_ascii_punctuation()
}

fn push_word_tokens(chunk: &str, out: &mut Vec<String>) {
    if ATOMIC_TOKENS.contains(&chunk) {
        out.push(chunk.to_owned());
        return;
    }
    let chars: Vec<char> = chunk.chars().collect();
    let mut start = 0;
    let mut end = chars.len();
    let mut leading: Vec<String> = Vec::new();
    let mut trailing: Vec<String> = Vec::new();
    while start < end && is_detachable(chars[start]) {
        leading.push(chars[start].to_string());
        start += 1;
    }
    while end > start && is_detachable(chars[end - 1]) {
        trailing.push(chars[end - 1].to_string());
        end -= 1;
    }
    out.extend(leading);
    if start < end {
        out.push(chars[start..end].iter().collect());
    }
    trailing.reverse();
    out.extend(trailing);
}

fn tokenize_plain(text: &str, out: &mut Vec<String>) {
    let lowered = text.to_lowercase();
    for chunk in lowered.split_whitespace() {
        push_word_tokens(chunk, out);
    }
}

/// Locate the next `[...SPAN]` placeholder at or after `from`.
/// Returns (start, end, span name without the SPAN suffix).
fn find_span(raw: &str, from: usize) -> Option<(usize, usize, &str)> {
    let bytes = raw.as_bytes();
    let mut i = from;
    while let Some(off) = raw[i..].find('[') {
        let start = i + off;
        let mut j = start + 1;
        while j < bytes.len() && bytes[j].is_ascii_uppercase() {
            j += 1;
        }
        if j < bytes.len() && bytes[j] == b']' && raw[start + 1..j].ends_with("SPAN") {
            let name = &raw[start + 1..j - 4];
            return Some((start, j + 1, name));
        }
        i = start + 1;
    }
    None
}

/// Normalize one sentence: lowercase, substitute span placeholders with
/// reserved tokens, split on whitespace, detach ASCII punctuation.
/// Unknown span types are replaced by [`UNK_SPAN_TOKEN`] and reported.
pub fn normalize_text_with_diagnostics(raw: &str) -> (Vec<String>, Vec<String>) {
    let mut tokens = Vec::new();
    let mut unknown = Vec::new();
    let mut cursor = 0;
    while let Some((start, end, name)) = find_span(raw, cursor) {
        tokenize_plain(&raw[cursor..start], &mut tokens);
        let placeholder = &raw[start..end];
        match SPAN_TOKENS.iter().find(|(p, _)| *p == placeholder) {
            Some((_, tok)) => tokens.push((*tok).to_owned()),
            None => {
                unknown.push(name.to_owned());
                tokens.push(UNK_SPAN_TOKEN.to_owned());
            }
        }
        cursor = end;
    }
    tokenize_plain(&raw[cursor..], &mut tokens);
    (tokens, unknown)
}

/// [`normalize_text_with_diagnostics`] without the diagnostics.
pub fn normalize_text(raw: &str) -> Vec<String> {
    normalize_text_with_diagnostics(raw).0
}

// ---------------------------------------------------------------------------
// Loading
// ---------------------------------------------------------------------------

#[derive(Deserialize)]
struct RawSection {
    section: String,
    sentences: Vec<String>,
}

#[derive(Deserialize)]
struct RawPaper {
    paper_id: String,
    #[serde(default)]
    title: String,
    #[serde(rename = "abstract")]
    abstract_sentences: Vec<String>,
    body: Vec<RawSection>,
    #[serde(default)]
    references: Vec<String>,
    #[serde(default)]
    label: Option<String>,
}

/// Result of ingesting a corpus file: the valid records plus per-line
/// diagnostics for everything that was skipped or cleaned up.
#[derive(Debug, Default)]
pub struct LoadOutcome {
    pub corpus: Corpus,
    pub diagnostics: Vec<Diagnostic>,
}

fn normalize_record(raw: RawPaper, line: usize, diags: &mut Vec<Diagnostic>) -> PaperRecord {
    let note_spans = |spans: Vec<String>, diags: &mut Vec<Diagnostic>| {
        for name in spans {
            diags.push(Diagnostic {
                line,
                message: format!("unknown span type `{name}SPAN` replaced by {UNK_SPAN_TOKEN}"),
            });
        }
    };

    let (title, spans) = normalize_text_with_diagnostics(&raw.title);
    note_spans(spans, diags);

    let mut abstract_sentences = Vec::with_capacity(raw.abstract_sentences.len());
    for s in &raw.abstract_sentences {
        let (toks, spans) = normalize_text_with_diagnostics(s);
        note_spans(spans, diags);
        abstract_sentences.push(toks);
    }

    let mut sections = Vec::with_capacity(raw.body.len());
    for sec in &raw.body {
        let mut sentences = Vec::with_capacity(sec.sentences.len());
        for s in &sec.sentences {
            let (toks, spans) = normalize_text_with_diagnostics(s);
            note_spans(spans, diags);
            sentences.push(toks);
        }
        sections.push(Section { name: sec.section.clone(), sentences });
    }

    // References: drop duplicates and self-citations.
    let mut references = Vec::with_capacity(raw.references.len());
    for r in raw.references {
        if r == raw.paper_id {
            diags.push(Diagnostic {
                line,
                message: format!("self-reference dropped for `{}`", raw.paper_id),
            });
            continue;
        }
        if !references.contains(&r) {
            references.push(r);
        }
    }

    PaperRecord {
        paper_id: raw.paper_id,
        title,
        abstract_sentences,
        sections,
        references,
        field_label: raw.label,
    }
}

/// Parse a whole corpus from JSON-Lines text. Malformed lines are skipped
/// with a diagnostic; a duplicated `paper_id` is a hard error.
pub fn parse_corpus_str(text: &str) -> Result<LoadOutcome, CorpusError> {
    // Parse and normalize lines in parallel, then merge in order so the
    // result is independent of scheduling.
    let numbered: Vec<(usize, &str)> = text
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .collect();
    let line_results: Vec<(usize, Result<(PaperRecord, Vec<Diagnostic>), Diagnostic>)> = numbered
        .par_iter()
        .map(|&(idx, l)| {
            let line = idx + 1;
            match serde_json::from_str::<RawPaper>(l) {
                Ok(raw) => {
                    if raw.paper_id.is_empty() {
                        return (
                            line,
                            Err(Diagnostic { line, message: "empty paper_id".into() }),
                        );
                    }
                    let mut diags = Vec::new();
                    let rec = normalize_record(raw, line, &mut diags);
                    (line, Ok((rec, diags)))
                }
                Err(e) => (line, Err(Diagnostic { line, message: format!("invalid record: {e}") })),
            }
        })
        .collect();

    let mut outcome = LoadOutcome::default();
    for (_, res) in line_results {
        match res {
            Ok((rec, diags)) => {
                outcome.diagnostics.extend(diags);
                if outcome.corpus.records.contains_key(&rec.paper_id) {
                    return Err(CorpusError::DuplicateId(rec.paper_id));
                }
                outcome.corpus.records.insert(rec.paper_id.clone(), rec);
            }
            Err(d) => outcome.diagnostics.push(d),
        }
    }
    Ok(outcome)
}

/// Read and parse a JSON-Lines corpus file.
pub fn load_corpus(path: &Path) -> Result<LoadOutcome, CorpusError> {
    let text = fs::read_to_string(path)
        .map_err(|e| CorpusError::Io { path: path.display().to_string(), source: e })?;
    parse_corpus_str(&text)
}

// ---------------------------------------------------------------------------
// Filtering
// ---------------------------------------------------------------------------

/// Keep exactly the records satisfying all rules; counts are reported per
/// rule. Filtering is total and idempotent.
pub fn filter_corpus(corpus: &Corpus, rules: &FilterRules) -> (Corpus, FilterReport) {
    let mut report = FilterReport::default();
    let mut kept = BTreeMap::new();
    let needle = rules.required_section.to_lowercase();

    for (id, rec) in &corpus.records {
        let alen = rec.abstract_token_count();
        let blen = rec.body_token_count();
        let abstract_ok = alen >= rules.abstract_len_min && alen <= rules.abstract_len_max;
        let body_ok = blen >= rules.body_len_min && blen <= rules.body_len_max;
        let sections_ok = rec.sections.len() >= rules.min_sections;
        let intro_ok = rec.section_names().any(|n| n.to_lowercase().contains(&needle));

        if !abstract_ok {
            report.removed_abstract_len += 1;
        }
        if !body_ok {
            report.removed_body_len += 1;
        }
        if !sections_ok {
            report.removed_sections += 1;
        }
        if !intro_ok {
            report.removed_intro += 1;
        }
        if abstract_ok && body_ok && sections_ok && intro_ok {
            kept.insert(id.clone(), rec.clone());
        } else {
            report.total_removed += 1;
        }
    }
    report.kept = kept.len();
    (Corpus { records: kept }, report)
}

// ---------------------------------------------------------------------------
// Writing (for the preprocess CLI step)
// ---------------------------------------------------------------------------

#[derive(Serialize)]
struct OutSection<'a> {
    section: &'a str,
    sentences: Vec<String>,
}

#[derive(Serialize)]
struct OutPaper<'a> {
    paper_id: &'a str,
    title: String,
    #[serde(rename = "abstract")]
    abstract_sentences: Vec<String>,
    body: Vec<OutSection<'a>>,
    references: &'a [String],
    #[serde(skip_serializing_if = "Option::is_none")]
    label: &'a Option<String>,
}

/// Serialize the corpus back to JSON-Lines with normalized tokens joined by
/// single spaces. Re-loading the output is the identity on records.
pub fn corpus_to_jsonl(corpus: &Corpus) -> String {
    let mut out = String::new();
    for rec in corpus.records.values() {
        let paper = OutPaper {
            paper_id: &rec.paper_id,
            title: rec.title.join(" "),
            abstract_sentences: rec.abstract_sentences.iter().map(|s| s.join(" ")).collect(),
            body: rec
                .sections
                .iter()
                .map(|sec| OutSection {
                    section: &sec.name,
                    sentences: sec.sentences.iter().map(|s| s.join(" ")).collect(),
                })
                .collect(),
            references: &rec.references,
            label: &rec.field_label,
        };
        out.push_str(&serde_json::to_string(&paper).expect("corpus record serializes"));
        out.push('\n');
    }
    out
}
