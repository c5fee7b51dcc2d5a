//! Evidence retrieval: split a document into passages, rank them against
//! the claim by dot product of unit embeddings, and concatenate the top K.

use std::cmp::Ordering;
use std::collections::HashMap;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::corpus::ClaimDocPair;
use crate::embedding::{EmbeddingVector, TextEmbedder};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Granularity {
    Sentence,
    Paragraph,
}

/// Which sentence encoder ranks passages.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Retriever {
    /// QA-tuned encoder.
    SbertQa,
    /// General-purpose encoder.
    Sbert,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Passage {
    pub text: String,
    pub index: usize,
    pub granularity: Granularity,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RetrievalConfig {
    pub enabled: bool,
    #[serde(default = "default_granularity")]
    pub granularity: Granularity,
    #[serde(default = "default_top_k")]
    pub top_k: usize,
    #[serde(default = "default_retriever")]
    pub retriever: Retriever,
    /// Concatenate selected passages in document order instead of score order.
    #[serde(default)]
    pub restore_document_order: bool,
}

fn default_granularity() -> Granularity {
    Granularity::Sentence
}
fn default_top_k() -> usize {
    5
}
fn default_retriever() -> Retriever {
    Retriever::SbertQa
}

impl RetrievalConfig {
    pub fn disabled() -> Self {
        RetrievalConfig {
            enabled: false,
            granularity: Granularity::Sentence,
            top_k: 5,
            retriever: Retriever::SbertQa,
            restore_document_order: false,
        }
    }

    pub fn top(granularity: Granularity, top_k: usize, retriever: Retriever) -> Self {
        RetrievalConfig {
            enabled: true,
            granularity,
            top_k,
            retriever,
            restore_document_order: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.top_k == 0 {
            return Err(Error::Config("retrieval.top_k must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvidenceSnippet {
    pub text: String,
    pub passage_indices: Vec<usize>,
    pub scores: Vec<f64>,
}

pub fn segment(doc_text: &str, granularity: Granularity) -> Result<Vec<Passage>> {
    if doc_text.trim().is_empty() {
        return Err(Error::EmptyDocument);
    }
    let pieces = match granularity {
        Granularity::Paragraph => split_paragraphs(doc_text),
        Granularity::Sentence => split_sentences(doc_text),
    };
    Ok(pieces
        .into_iter()
        .map(|s| s.trim().to_string())
        .filter(|s| !s.is_empty())
        .enumerate()
        .map(|(index, text)| Passage {
            text,
            index,
            granularity,
        })
        .collect())
}

fn split_paragraphs(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut current: Vec<&str> = Vec::new();
    for line in text.lines() {
        if line.trim().is_empty() {
            if !current.is_empty() {
                out.push(current.join("\n"));
                current.clear();
            }
        } else {
            current.push(line);
        }
    }
    if !current.is_empty() {
        out.push(current.join("\n"));
    }
    out
}

fn is_terminator(c: char) -> bool {
    matches!(c, '.' | '!' | '?')
}

fn is_closer(c: char) -> bool {
    matches!(c, '"' | '\'' | ')' | ']' | '\u{201d}' | '\u{2019}')
}

/// A short dotted word like "Dr", "U.S", "e.g" or a single initial.
/// Only letters and interior periods count; anything with digits is a word.
fn is_abbreviation(word: &str) -> bool {
    let word = word.trim_start_matches(|c: char| !c.is_alphanumeric());
    if word.is_empty() || !word.chars().all(|c| c.is_alphabetic() || c == '.') {
        return false;
    }
    let letters = word.chars().filter(|c| c.is_alphabetic()).count();
    if letters == 0 || letters > 2 {
        return false;
    }
    let first_upper = word.chars().next().is_some_and(char::is_uppercase);
    letters == 1 || first_upper || word.contains('.')
}

fn split_sentences(text: &str) -> Vec<String> {
    let chars: Vec<(usize, char)> = text.char_indices().collect();
    let mut out = Vec::new();
    let mut start = 0usize;
    let mut i = 0usize;
    while i < chars.len() {
        let (_, c) = chars[i];
        if !is_terminator(c) {
            i += 1;
            continue;
        }
        // Extend over runs like "?!" or "..." and trailing quotes/brackets.
        let run_start = i;
        let mut j = i + 1;
        while j < chars.len() && is_terminator(chars[j].1) {
            j += 1;
        }
        let run_len = j - run_start;
        while j < chars.len() && is_closer(chars[j].1) {
            j += 1;
        }
        let at_boundary = j == chars.len() || chars[j].1.is_whitespace();
        if at_boundary {
            let end_byte = if j == chars.len() { text.len() } else { chars[j].0 };
            let word_start = text[..chars[run_start].0]
                .char_indices()
                .rev()
                .find(|(_, ch)| ch.is_whitespace())
                .map(|(p, ch)| p + ch.len_utf8())
                .max(Some(start))
                .unwrap_or(start);
            let word = &text[word_start..chars[run_start].0];
            let single_period = c == '.' && run_len == 1;
            if !(single_period && is_abbreviation(word)) {
                out.push(text[start..end_byte].to_string());
                start = end_byte;
            }
        }
        i = j;
    }
    if start < text.len() {
        out.push(text[start..].to_string());
    }
    out
}

/// Rank passages by dot product with the claim, best first. Equal scores
/// keep ascending passage index.
pub fn rank_passages(
    claim: &EmbeddingVector,
    passages: &[(usize, EmbeddingVector)],
) -> Result<Vec<(usize, f64)>> {
    if passages.is_empty() {
        return Err(Error::NoPassages);
    }
    let mut ranked = passages
        .iter()
        .map(|(idx, v)| {
            if v.dim() != claim.dim() {
                return Err(Error::shape(
                    "rank_passages",
                    format!("passage {idx} has dim {}, claim has {}", v.dim(), claim.dim()),
                ));
            }
            Ok((*idx, claim.dot(v)?))
        })
        .collect::<Result<Vec<_>>>()?;
    ranked.sort_by(|a, b| compare_ranked(*a, *b));
    Ok(ranked)
}

fn compare_ranked(a: (usize, f64), b: (usize, f64)) -> Ordering {
    b.1.total_cmp(&a.1).then(a.0.cmp(&b.0))
}

pub fn select_evidence(
    ranked: &[(usize, f64)],
    passages: &[Passage],
    k: usize,
    restore_document_order: bool,
) -> Result<EvidenceSnippet> {
    if ranked.is_empty() {
        return Err(Error::NoPassages);
    }
    let by_index: HashMap<usize, &Passage> = passages.iter().map(|p| (p.index, p)).collect();
    let chosen = &ranked[..k.min(ranked.len())];
    let mut text_order: Vec<usize> = chosen.iter().map(|(i, _)| *i).collect();
    if restore_document_order {
        text_order.sort_unstable();
    }
    let texts = text_order
        .iter()
        .map(|i| {
            by_index
                .get(i)
                .map(|p| p.text.as_str())
                .ok_or_else(|| Error::Config(format!("ranked index {i} has no passage")))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(EvidenceSnippet {
        text: texts.join(" "),
        passage_indices: chosen.iter().map(|(i, _)| *i).collect(),
        scores: chosen.iter().map(|(_, s)| *s).collect(),
    })
}

/// Build the evidence snippet for one pair. With retrieval disabled the
/// whole document is the snippet.
pub fn retrieve(
    pair: &ClaimDocPair,
    cfg: &RetrievalConfig,
    embedder: &TextEmbedder,
) -> Result<EvidenceSnippet> {
    if !cfg.enabled {
        return Ok(EvidenceSnippet {
            text: pair.doc_text.clone(),
            passage_indices: vec![0],
            scores: vec![1.0],
        });
    }
    cfg.validate()?;
    let passages = segment(&pair.doc_text, cfg.granularity)?;
    let claim = embedder.embed(&pair.claim_text)?;
    let vecs = passages
        .iter()
        .map(|p| Ok((p.index, embedder.embed(&p.text)?)))
        .collect::<Result<Vec<_>>>()?;
    let ranked = rank_passages(&claim, &vecs)?;
    select_evidence(&ranked, &passages, cfg.top_k, cfg.restore_document_order)
}

/// Audit record for one retrieved pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalRecord {
    pub id: String,
    pub indices: Vec<usize>,
    pub scores: Vec<f64>,
    pub snippet: String,
}

impl RetrievalRecord {
    pub fn new(id: &str, snippet: &EvidenceSnippet) -> Self {
        RetrievalRecord {
            id: id.to_string(),
            indices: snippet.passage_indices.clone(),
            scores: snippet.scores.clone(),
            snippet: snippet.text.clone(),
        }
    }
}

pub fn write_retrieval_jsonl<W: Write>(mut w: W, records: &[RetrievalRecord]) -> Result<()> {
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}
