//! Per-category length and similarity distributions, as plot-ready data.

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::corpus::{ClaimDocPair, Dataset, Label};
use crate::embedding::{tokenize, truncate_tokens, ImageEmbedder, TextEmbedder};
use crate::error::{Error, Result};

/// Lengths are counted in whitespace tokens.
pub const LENGTH_UNIT: &str = "whitespace_tokens";
pub const DEFAULT_BINS: usize = 50;
/// Cross-modal text inputs are cut to this many tokens before encoding.
pub const SIMILARITY_MAX_TOKENS: usize = 77;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoxplotStats {
    pub min: f64,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub max: f64,
    pub mean: f64,
    pub count: usize,
}

/// Quantile of sorted data by linear interpolation between closest ranks.
fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    sorted[lo] + (sorted[hi] - sorted[lo]) * frac
}

impl BoxplotStats {
    /// `None` for an empty sample.
    pub fn from_values(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let mut v = values.to_vec();
        v.sort_by(f64::total_cmp);
        Some(BoxplotStats {
            min: v[0],
            q1: quantile(&v, 0.25),
            median: quantile(&v, 0.5),
            q3: quantile(&v, 0.75),
            max: v[v.len() - 1],
            mean: v.iter().sum::<f64>() / v.len() as f64,
            count: v.len(),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TextField {
    ClaimText,
    DocText,
    ClaimOcr,
    DocOcr,
}

impl TextField {
    pub const ALL: [TextField; 4] = [
        TextField::ClaimText,
        TextField::DocText,
        TextField::ClaimOcr,
        TextField::DocOcr,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            TextField::ClaimText => "claim_text",
            TextField::DocText => "doc_text",
            TextField::ClaimOcr => "claim_ocr",
            TextField::DocOcr => "doc_ocr",
        }
    }

    fn get(self, p: &ClaimDocPair) -> &str {
        match self {
            TextField::ClaimText => &p.claim_text,
            TextField::DocText => &p.doc_text,
            TextField::ClaimOcr => &p.claim_ocr,
            TextField::DocOcr => &p.doc_ocr,
        }
    }
}

impl fmt::Display for TextField {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TextField {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        TextField::ALL
            .into_iter()
            .find(|f| f.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown text field {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Pairing {
    #[serde(rename = "img-img")]
    ImgImg,
    #[serde(rename = "claimtext-docimg")]
    ClaimTextDocImg,
    #[serde(rename = "claimimg-doctext")]
    ClaimImgDocText,
    #[serde(rename = "claimimg-claimtext")]
    ClaimImgClaimText,
}

impl Pairing {
    pub const ALL: [Pairing; 4] = [
        Pairing::ImgImg,
        Pairing::ClaimTextDocImg,
        Pairing::ClaimImgDocText,
        Pairing::ClaimImgClaimText,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Pairing::ImgImg => "img-img",
            Pairing::ClaimTextDocImg => "claimtext-docimg",
            Pairing::ClaimImgDocText => "claimimg-doctext",
            Pairing::ClaimImgClaimText => "claimimg-claimtext",
        }
    }
}

impl fmt::Display for Pairing {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Pairing {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Pairing::ALL
            .into_iter()
            .find(|p| p.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown pairing {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoryLengths {
    pub label: Label,
    pub stats: Option<BoxplotStats>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LengthReport {
    pub field: TextField,
    pub unit: String,
    /// One entry per label, in label order.
    pub categories: Vec<CategoryLengths>,
}

fn group_by_label<T>(ds: &Dataset, mut value: impl FnMut(&ClaimDocPair) -> T) -> Result<Vec<Vec<T>>> {
    let mut groups: Vec<Vec<T>> = (0..Label::COUNT).map(|_| Vec::new()).collect();
    for p in ds.iter() {
        let label = p.label.ok_or_else(|| Error::Unlabeled(p.id.clone()))?;
        groups[label.index()].push(value(p));
    }
    Ok(groups)
}

pub fn length_stats(ds: &Dataset, field: TextField) -> Result<LengthReport> {
    let groups = group_by_label(ds, |p| tokenize(field.get(p)).len() as f64)?;
    Ok(LengthReport {
        field,
        unit: LENGTH_UNIT.to_string(),
        categories: Label::ALL
            .iter()
            .zip(&groups)
            .map(|(&label, g)| CategoryLengths {
                label,
                stats: BoxplotStats::from_values(g),
            })
            .collect(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoryHistogram {
    pub label: Label,
    /// `bins + 1` uniform edges over [-1, 1].
    pub edges: Vec<f64>,
    pub counts: Vec<u64>,
    pub stats: Option<BoxplotStats>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimilarityReport {
    pub pairing: Pairing,
    pub categories: Vec<CategoryHistogram>,
}

pub fn bin_index(score: f64, bins: usize) -> usize {
    let t = ((score.clamp(-1.0, 1.0) + 1.0) / 2.0 * bins as f64).floor() as usize;
    t.min(bins - 1)
}

/// Cosine score of one pair under `pairing`.
pub fn pair_similarity(
    p: &ClaimDocPair,
    pairing: Pairing,
    text: &TextEmbedder,
    image: &ImageEmbedder,
) -> Result<f64> {
    let txt = |s: &str| text.embed(&truncate_tokens(s, SIMILARITY_MAX_TOKENS));
    let (a, b) = match pairing {
        Pairing::ImgImg => (image.embed(&p.claim_image_key)?, image.embed(&p.doc_image_key)?),
        Pairing::ClaimTextDocImg => (txt(&p.claim_text)?, image.embed(&p.doc_image_key)?),
        Pairing::ClaimImgDocText => (image.embed(&p.claim_image_key)?, txt(&p.doc_text)?),
        Pairing::ClaimImgClaimText => (image.embed(&p.claim_image_key)?, txt(&p.claim_text)?),
    };
    a.dot(&b)
}

pub fn similarity_stats(
    ds: &Dataset,
    pairing: Pairing,
    text: &TextEmbedder,
    image: &ImageEmbedder,
    bins: usize,
) -> Result<SimilarityReport> {
    if bins == 0 {
        return Err(Error::Config("histogram needs at least one bin".into()));
    }
    let mut missing = Vec::new();
    let mut first_other = None;
    let groups = group_by_label(ds, |p| match pair_similarity(p, pairing, text, image) {
        Ok(s) => Some(s),
        Err(Error::MissingKey(_)) => {
            missing.push(p.id.clone());
            None
        }
        Err(e) => {
            first_other.get_or_insert(e);
            None
        }
    })?;
    if !missing.is_empty() {
        return Err(Error::MissingKeys(missing));
    }
    if let Some(e) = first_other {
        return Err(e);
    }
    let edges: Vec<f64> = (0..=bins).map(|i| -1.0 + 2.0 * i as f64 / bins as f64).collect();
    let categories = Label::ALL
        .iter()
        .zip(groups)
        .map(|(&label, g)| {
            let scores: Vec<f64> = g.into_iter().flatten().collect();
            let mut counts = vec![0u64; bins];
            for &s in &scores {
                counts[bin_index(s, bins)] += 1;
            }
            CategoryHistogram {
                label,
                edges: edges.clone(),
                counts,
                stats: BoxplotStats::from_values(&scores),
            }
        })
        .collect();
    Ok(SimilarityReport { pairing, categories })
}

fn stat_cells(stats: Option<&BoxplotStats>) -> Vec<String> {
    match stats {
        Some(s) => vec![
            s.count.to_string(),
            s.min.to_string(),
            s.q1.to_string(),
            s.median.to_string(),
            s.q3.to_string(),
            s.max.to_string(),
            s.mean.to_string(),
        ],
        None => {
            let mut v = vec!["0".to_string()];
            v.extend(std::iter::repeat_n(String::new(), 6));
            v
        }
    }
}

const STAT_HEADER: [&str; 7] = ["count", "min", "q1", "median", "q3", "max", "mean"];

/// Rows: one per category with the boxplot columns and the length unit.
pub fn write_lengths_csv<W: Write>(report: &LengthReport, w: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    let mut header = vec!["category"];
    header.extend(STAT_HEADER);
    header.push("unit");
    out.write_record(&header)?;
    for c in &report.categories {
        let mut row = vec![c.label.as_str().to_string()];
        row.extend(stat_cells(c.stats.as_ref()));
        row.push(report.unit.clone());
        out.write_record(&row)?;
    }
    out.flush().map_err(Error::RawIo)?;
    Ok(())
}

/// Rows: one per category with the boxplot columns followed by one count
/// column per histogram bin, headed by the bin's lower edge.
pub fn write_similarity_csv<W: Write>(report: &SimilarityReport, w: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    let edges = report
        .categories
        .first()
        .map(|c| c.edges.clone())
        .unwrap_or_default();
    let mut header: Vec<String> = vec!["category".into()];
    header.extend(STAT_HEADER.iter().map(|s| s.to_string()));
    header.extend(edges.windows(2).map(|e| format!("bin[{:.3},{:.3})", e[0], e[1])));
    out.write_record(&header)?;
    for c in &report.categories {
        let mut row = vec![c.label.as_str().to_string()];
        row.extend(stat_cells(c.stats.as_ref()));
        row.extend(c.counts.iter().map(u64::to_string));
        out.write_record(&row)?;
    }
    out.flush().map_err(Error::RawIo)?;
    Ok(())
}

pub fn lengths_file_name(field: TextField) -> String {
    format!("eda_lengths_{}.csv", field.as_str())
}

pub fn similarity_file_name(pairing: Pairing) -> String {
    format!("eda_sim_{}.csv", pairing.as_str())
}
