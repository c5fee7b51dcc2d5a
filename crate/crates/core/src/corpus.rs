//! Claim/document pairs, dataset ingestion and the scraping-error filter.
//!
//! Datasets are read from CSV (header row required, UTF-8, double-quote
//! escaping) or JSONL. Both formats share the column names
//! `id, claim, claim_image, claim_ocr, document, document_image,
//! document_ocr, category`.

use std::collections::HashSet;
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Five-way entailment category.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Label {
    #[serde(rename = "Support_Multimodal")]
    SupportMultimodal,
    #[serde(rename = "Support_Text")]
    SupportText,
    #[serde(rename = "Insufficient_Multimodal")]
    InsufficientMultimodal,
    #[serde(rename = "Insufficient_Text")]
    InsufficientText,
    #[serde(rename = "Refute")]
    Refute,
}

impl Label {
    pub const COUNT: usize = 5;

    pub const ALL: [Label; 5] = [
        Label::SupportMultimodal,
        Label::SupportText,
        Label::InsufficientMultimodal,
        Label::InsufficientText,
        Label::Refute,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(index: usize) -> Option<Label> {
        Label::ALL.get(index).copied()
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Label::SupportMultimodal => "Support_Multimodal",
            Label::SupportText => "Support_Text",
            Label::InsufficientMultimodal => "Insufficient_Multimodal",
            Label::InsufficientText => "Insufficient_Text",
            Label::Refute => "Refute",
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Label {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let trimmed = s.trim();
        Label::ALL
            .iter()
            .copied()
            .find(|l| l.as_str().eq_ignore_ascii_case(trimmed))
            .ok_or_else(|| Error::UnknownLabel(s.to_string()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "train" => Ok(Split::Train),
            "val" | "validation" | "dev" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::Config(format!("unknown split {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    Csv,
    Jsonl,
}

impl Format {
    /// Guess from the file extension, defaulting to CSV.
    pub fn from_path(path: &Path) -> Format {
        match path.extension().and_then(|e| e.to_str()) {
            Some(ext) if ext.eq_ignore_ascii_case("jsonl") || ext.eq_ignore_ascii_case("json") => {
                Format::Jsonl
            }
            _ => Format::Csv,
        }
    }
}

impl FromStr for Format {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "csv" => Ok(Format::Csv),
            "jsonl" => Ok(Format::Jsonl),
            other => Err(Error::Config(format!("unknown format {other:?}"))),
        }
    }
}

/// One dataset row: a multimodal claim and the document used to verify it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClaimDocPair {
    pub id: String,
    pub claim_text: String,
    pub claim_image_key: String,
    pub claim_ocr: String,
    pub doc_text: String,
    pub doc_image_key: String,
    pub doc_ocr: String,
    pub label: Option<Label>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Dataset {
    pub split: Split,
    pub pairs: Vec<ClaimDocPair>,
}

impl Dataset {
    pub fn new(split: Split, pairs: Vec<ClaimDocPair>) -> Result<Self> {
        let mut seen = HashSet::with_capacity(pairs.len());
        for (i, p) in pairs.iter().enumerate() {
            if p.id.is_empty() {
                return Err(Error::MissingField {
                    row: i + 1,
                    field: "id".into(),
                });
            }
            if !seen.insert(p.id.as_str()) {
                return Err(Error::DuplicateId {
                    id: p.id.clone(),
                    row: i + 1,
                });
            }
        }
        Ok(Dataset { split, pairs })
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn is_labeled(&self) -> bool {
        self.pairs.iter().all(|p| p.label.is_some())
    }

    pub fn iter(&self) -> std::slice::Iter<'_, ClaimDocPair> {
        self.pairs.iter()
    }
}

/// Wire representation shared by the CSV and JSONL formats.
#[derive(Debug, Default, Serialize, Deserialize)]
struct Record {
    id: Option<String>,
    claim: Option<String>,
    claim_image: Option<String>,
    claim_ocr: Option<String>,
    document: Option<String>,
    document_image: Option<String>,
    document_ocr: Option<String>,
    category: Option<String>,
}

pub const COLUMNS: [&str; 8] = [
    "id",
    "claim",
    "claim_image",
    "claim_ocr",
    "document",
    "document_image",
    "document_ocr",
    "category",
];

impl Record {
    fn into_pair(self, row: usize) -> Result<ClaimDocPair> {
        fn required(value: Option<String>, row: usize, field: &str, column: &str) -> Result<String> {
            value.ok_or_else(|| Error::MissingField {
                row,
                field: if field == column {
                    field.to_string()
                } else {
                    format!("{field} (column \"{column}\")")
                },
            })
        }
        let id = required(self.id, row, "id", "id")?;
        if id.trim().is_empty() {
            return Err(Error::MalformedRow {
                row,
                message: "empty id".into(),
            });
        }
        let claim_text = required(self.claim, row, "claim_text", "claim")?;
        if claim_text.trim().is_empty() {
            return Err(Error::MalformedRow {
                row,
                message: "empty claim_text".into(),
            });
        }
        let claim_image_key = required(self.claim_image, row, "claim_image_key", "claim_image")?;
        let doc_text = required(self.document, row, "doc_text", "document")?;
        let doc_image_key =
            required(self.document_image, row, "doc_image_key", "document_image")?;
        let label = match self.category.as_deref().map(str::trim) {
            None | Some("") => None,
            Some(s) => Some(s.parse::<Label>().map_err(|_| Error::MalformedRow {
                row,
                message: format!("unknown category {s:?}"),
            })?),
        };
        Ok(ClaimDocPair {
            id,
            claim_text,
            claim_image_key,
            claim_ocr: self.claim_ocr.unwrap_or_default(),
            doc_text,
            doc_image_key,
            doc_ocr: self.document_ocr.unwrap_or_default(),
            label,
        })
    }

    fn from_pair(p: &ClaimDocPair) -> Record {
        Record {
            id: Some(p.id.clone()),
            claim: Some(p.claim_text.clone()),
            claim_image: Some(p.claim_image_key.clone()),
            claim_ocr: Some(p.claim_ocr.clone()),
            document: Some(p.doc_text.clone()),
            document_image: Some(p.doc_image_key.clone()),
            document_ocr: Some(p.doc_ocr.clone()),
            category: p.label.map(|l| l.as_str().to_string()),
        }
    }
}

pub fn load_dataset(path: impl AsRef<Path>, format: Format, split: Split) -> Result<Dataset> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_dataset(BufReader::new(file), format, split)
}

/// Parse a dataset from any reader. Row numbers in errors are 1-based over
/// data rows (the CSV header is not counted).
pub fn read_dataset<R: Read>(reader: R, format: Format, split: Split) -> Result<Dataset> {
    let pairs = match format {
        Format::Csv => read_csv(reader)?,
        Format::Jsonl => read_jsonl(reader)?,
    };
    Dataset::new(split, pairs)
}

fn read_csv<R: Read>(reader: R) -> Result<Vec<ClaimDocPair>> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_reader(reader);
    let headers = rdr.headers()?.clone();
    let column = |name: &str| headers.iter().position(|h| h.trim() == name);
    let positions: Vec<Option<usize>> = COLUMNS.iter().map(|c| column(c)).collect();

    let mut pairs = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let row = i + 1;
        let rec = rec.map_err(|e| Error::MalformedRow {
            row,
            message: e.to_string(),
        })?;
        let get = |k: usize| positions[k].and_then(|p| rec.get(p)).map(str::to_string);
        let record = Record {
            id: get(0),
            claim: get(1),
            claim_image: get(2),
            claim_ocr: get(3),
            document: get(4),
            document_image: get(5),
            document_ocr: get(6),
            category: get(7),
        };
        pairs.push(record.into_pair(row)?);
    }
    Ok(pairs)
}

fn read_jsonl<R: Read>(reader: R) -> Result<Vec<ClaimDocPair>> {
    let mut pairs = Vec::new();
    for (i, line) in BufReader::new(reader).lines().enumerate() {
        let row = i + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record: Record = serde_json::from_str(&line).map_err(|e| Error::MalformedRow {
            row,
            message: e.to_string(),
        })?;
        pairs.push(record.into_pair(row)?);
    }
    Ok(pairs)
}

pub fn save_dataset(ds: &Dataset, path: impl AsRef<Path>, format: Format) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    write_dataset(ds, BufWriter::new(file), format)
}

pub fn write_dataset<W: Write>(ds: &Dataset, mut writer: W, format: Format) -> Result<()> {
    match format {
        Format::Csv => {
            let mut wtr = csv::Writer::from_writer(writer);
            wtr.write_record(COLUMNS)?;
            for p in &ds.pairs {
                let r = Record::from_pair(p);
                wtr.write_record([
                    r.id.unwrap_or_default(),
                    r.claim.unwrap_or_default(),
                    r.claim_image.unwrap_or_default(),
                    r.claim_ocr.unwrap_or_default(),
                    r.document.unwrap_or_default(),
                    r.document_image.unwrap_or_default(),
                    r.document_ocr.unwrap_or_default(),
                    r.category.unwrap_or_default(),
                ])?;
            }
            wtr.flush()?;
        }
        Format::Jsonl => {
            for p in &ds.pairs {
                serde_json::to_writer(&mut writer, &Record::from_pair(p))?;
                writer.write_all(b"\n")?;
            }
            writer.flush()?;
        }
    }
    Ok(())
}

/// Banner left behind when the document scraper hit a JavaScript wall.
pub const SCRAPE_ERROR_PREFIXES: [&str; 2] = [
    "We\u{2019}ve detected that JavaScript is disabled",
    "We've detected that JavaScript is disabled",
];

pub fn is_invalid_document(doc_text: &str) -> bool {
    let t = doc_text.trim_start();
    SCRAPE_ERROR_PREFIXES.iter().any(|p| t.starts_with(p))
}

/// Drop pairs whose document is a scraping-error banner. Returns the
/// survivors (order preserved) and the removed ids.
pub fn filter_invalid(ds: Dataset) -> (Dataset, Vec<String>) {
    let mut removed = Vec::new();
    let pairs = ds
        .pairs
        .into_iter()
        .filter(|p| {
            let bad = is_invalid_document(&p.doc_text);
            if bad {
                removed.push(p.id.clone());
            }
            !bad
        })
        .collect();
    (
        Dataset {
            split: ds.split,
            pairs,
        },
        removed,
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    const CSV3: &str = "id,claim,claim_image,claim_ocr,document,document_image,document_ocr,category\n\
        a,claim one,img_a,,doc one,dimg_a,,Support_Text\n\
        b,\"claim, two\",img_b,ocr b,doc two,dimg_b,docr,refute\n\
        c,claim three,img_c,,doc three,dimg_c,,\n";

    #[test]
    fn csv_rows_in_file_order() {
        let ds = read_dataset(CSV3.as_bytes(), Format::Csv, Split::Train).unwrap();
        let ids: Vec<_> = ds.iter().map(|p| p.id.as_str()).collect();
        assert_eq!(ids, ["a", "b", "c"]);
        assert_eq!(ds.pairs[1].claim_text, "claim, two");
        assert_eq!(ds.pairs[1].label, Some(Label::Refute));
        assert_eq!(ds.pairs[2].label, None);
        assert_eq!(ds.pairs[0].claim_ocr, "");
    }

    #[test]
    fn missing_document_column_names_field_and_row() {
        let csv = "id,claim,claim_image,document_image\nx,c,i,d\n";
        let err = read_dataset(csv.as_bytes(), Format::Csv, Split::Train).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("doc_text"), "{msg}");
        assert!(msg.contains("row 1"), "{msg}");
    }

    #[test]
    fn short_csv_row_is_reported() {
        let csv = "id,claim,claim_image,claim_ocr,document,document_image\n\
                   x,c,i,o,d,di\n\
                   y,c,i,o\n";
        let err = read_dataset(csv.as_bytes(), Format::Csv, Split::Train).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("row 2") && msg.contains("doc_text"), "{msg}");
    }

    #[test]
    fn jsonl_lowercase_label() {
        let line = r#"{"id":"1","claim":"c","claim_image":"i","document":"d","document_image":"j","category":"refute"}"#;
        let ds = read_dataset(line.as_bytes(), Format::Jsonl, Split::Val).unwrap();
        assert_eq!(ds.pairs[0].label, Some(Label::Refute));
        assert_eq!(ds.pairs[0].doc_ocr, "");
    }

    #[test]
    fn duplicate_id_rejected() {
        let csv = "id,claim,claim_image,document,document_image\nx,c,i,d,j\nx,c,i,d,j\n";
        let err = read_dataset(csv.as_bytes(), Format::Csv, Split::Train).unwrap_err();
        assert!(matches!(err, Error::DuplicateId { row: 2, .. }));
    }

    #[test]
    fn label_parse_is_case_insensitive_and_strict() {
        assert_eq!(
            "support_multimodal".parse::<Label>().unwrap(),
            Label::SupportMultimodal
        );
        assert_eq!("INSUFFICIENT_TEXT".parse::<Label>().unwrap(), Label::InsufficientText);
        assert!("Support".parse::<Label>().is_err());
        assert!("".parse::<Label>().is_err());
    }

    fn pair(id: &str, doc: &str) -> ClaimDocPair {
        ClaimDocPair {
            id: id.into(),
            claim_text: "claim".into(),
            claim_image_key: "ci".into(),
            claim_ocr: String::new(),
            doc_text: doc.into(),
            doc_image_key: "di".into(),
            doc_ocr: String::new(),
            label: Some(Label::Refute),
        }
    }

    #[test]
    fn filter_removes_banner_documents() {
        let ds = Dataset::new(
            Split::Train,
            vec![
                pair("1", "fine"),
                pair("2", "We\u{2019}ve detected that JavaScript is disabled in this browser."),
                pair("3", "also fine"),
                pair("4", "   We've detected that JavaScript is disabled. Please enable"),
                pair("5", "ok We've detected that JavaScript is disabled"),
            ],
        )
        .unwrap();
        let (kept, removed) = filter_invalid(ds);
        assert_eq!(removed, ["2", "4"]);
        let ids: Vec<_> = kept.iter().map(|p| p.id.as_str()).collect();
        assert_eq!(ids, ["1", "3", "5"]);
    }

    #[test]
    fn filter_without_matches_is_identity() {
        let ds = Dataset::new(Split::Test, vec![pair("1", "a"), pair("2", "b")]).unwrap();
        let (kept, removed) = filter_invalid(ds.clone());
        assert_eq!(kept, ds);
        assert!(removed.is_empty());
    }
}
