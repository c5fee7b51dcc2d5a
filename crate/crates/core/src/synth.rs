//! Synthetic claim/document corpora with similarity-rule labels.
//!
//! Claims and sentences are drawn from a pseudo-word vocabulary. Support
//! documents restate most of the claim in a couple of sentences,
//! insufficient ones share about half of it, refuting ones share nothing.
//! Multimodal pairs get a document image close to the claim image. The
//! final label is then recomputed from the measured similarities, so the
//! rule holds exactly regardless of encoder noise.

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::corpus::{ClaimDocPair, Dataset, Label, Split, SCRAPE_ERROR_PREFIXES};
use crate::embedding::{mix_seed, normalize, DeterministicEncoder, EmbeddingStore, EmbeddingVector};
use crate::error::Result;
use crate::retrieval::{segment, Granularity};

/// Text similarity at or above this is support.
pub const SUPPORT_THRESHOLD: f64 = 0.7;
/// Text similarity below this is refute.
pub const REFUTE_THRESHOLD: f64 = 0.3;
/// Image similarity at or above this makes a non-refute label multimodal.
pub const IMAGE_THRESHOLD: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub n_pairs: usize,
    pub seed: u64,
    pub vocab_size: usize,
    pub claim_tokens: usize,
    pub sentence_tokens: usize,
    pub sentences: usize,
    pub paragraphs: usize,
    pub image_dim: usize,
    /// Encoder used to measure claim/sentence similarity for labeling.
    pub text_dim: usize,
    pub text_seed: u64,
    /// Extra rows whose document is a scraping-error banner.
    pub invalid_rows: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_pairs: 200,
            seed: 0,
            vocab_size: 500,
            claim_tokens: 8,
            sentence_tokens: 8,
            sentences: 10,
            paragraphs: 5,
            image_dim: 64,
            text_dim: 128,
            text_seed: 17,
            invalid_rows: 0,
        }
    }
}

pub struct SynthCorpus {
    pub dataset: Dataset,
    /// Image key to unit vector, covering both claim and document images.
    pub images: EmbeddingStore,
    /// Ids of rows carrying a scraping-error document.
    pub planted_invalid: Vec<String>,
}

/// Label implied by the two similarity scores.
pub fn similarity_label(text_sim: f64, image_sim: f64) -> Label {
    let multimodal = image_sim >= IMAGE_THRESHOLD;
    if text_sim >= SUPPORT_THRESHOLD {
        if multimodal {
            Label::SupportMultimodal
        } else {
            Label::SupportText
        }
    } else if text_sim >= REFUTE_THRESHOLD {
        if multimodal {
            Label::InsufficientMultimodal
        } else {
            Label::InsufficientText
        }
    } else {
        Label::Refute
    }
}

/// Deterministic pronounceable pseudo-words.
pub fn vocabulary(size: usize) -> Vec<String> {
    const ONSETS: [&str; 12] = ["b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t"];
    const VOWELS: [&str; 5] = ["a", "e", "i", "o", "u"];
    let syllables: Vec<String> = ONSETS
        .iter()
        .flat_map(|o| VOWELS.iter().map(move |v| format!("{o}{v}")))
        .collect();
    let n = syllables.len();
    (0..size)
        .map(|i| {
            let mut w = String::new();
            let mut k = i;
            loop {
                w.push_str(&syllables[k % n]);
                k /= n;
                if k == 0 {
                    break;
                }
            }
            // Two-syllable minimum keeps words from looking like initials.
            if w.len() < 4 {
                w.push_str("ro");
            }
            w
        })
        .collect()
}

fn random_unit(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| x / n).collect()
}

fn to_embedding(v: &[f64]) -> Result<EmbeddingVector> {
    normalize(&EmbeddingVector::new(v.iter().map(|&x| x as f32).collect())?)
}

fn sentence(words: &[String]) -> String {
    let mut s = words.join(" ");
    if let Some(first) = s.get(..1) {
        let upper = first.to_uppercase();
        s.replace_range(..1, &upper);
    }
    s.push('.');
    s
}

/// Highest claim/sentence dot product under `encoder`.
pub fn max_sentence_similarity(encoder: &DeterministicEncoder, claim: &str, doc: &str) -> Result<f64> {
    let c = encoder.encode(claim);
    let mut best = f64::NEG_INFINITY;
    for p in segment(doc, Granularity::Sentence)? {
        best = best.max(c.dot(&encoder.encode(&p.text))?);
    }
    Ok(best)
}

pub fn generate(cfg: &SynthConfig, split: Split) -> Result<SynthCorpus> {
    let vocab = vocabulary(cfg.vocab_size.max(cfg.claim_tokens * 2));
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[cfg.seed, split as u64, 0x5717]));
    let encoder = DeterministicEncoder::new(cfg.text_dim, cfg.text_seed);
    let mut images = EmbeddingStore::new(cfg.image_dim)?;
    let mut pairs = Vec::with_capacity(cfg.n_pairs + cfg.invalid_rows);
    let prefix = split.as_str();

    for i in 0..cfg.n_pairs {
        let intended = Label::ALL[i % Label::COUNT];
        let claim_words: Vec<String> = vocab
            .choose_multiple(&mut rng, cfg.claim_tokens)
            .cloned()
            .collect();
        let shared = match intended {
            Label::SupportMultimodal | Label::SupportText => cfg.claim_tokens.saturating_sub(1),
            Label::InsufficientMultimodal | Label::InsufficientText => cfg.claim_tokens / 2,
            Label::Refute => 0,
        };
        let planted_sentences = if shared == 0 {
            0
        } else if shared == cfg.claim_tokens / 2 {
            1
        } else {
            2
        };
        let mut sentences: Vec<String> = Vec::with_capacity(cfg.sentences);
        for _ in 0..cfg.sentences {
            let words: Vec<String> = (0..cfg.sentence_tokens)
                .map(|_| vocab[rng.random_range(0..vocab.len())].clone())
                .filter(|w| !claim_words.contains(w))
                .collect();
            sentences.push(sentence(&words));
        }
        for _ in 0..planted_sentences {
            let mut words: Vec<String> = claim_words
                .choose_multiple(&mut rng, shared)
                .cloned()
                .collect();
            while words.len() < cfg.sentence_tokens {
                let w = &vocab[rng.random_range(0..vocab.len())];
                if !claim_words.contains(w) {
                    words.push(w.clone());
                }
            }
            words.shuffle(&mut rng);
            let slot = rng.random_range(0..sentences.len());
            sentences[slot] = sentence(&words);
        }
        let per_para = sentences.len().div_ceil(cfg.paragraphs.max(1));
        let doc_text = sentences
            .chunks(per_para)
            .map(|c| c.join(" "))
            .collect::<Vec<_>>()
            .join("\n\n");
        let claim_text = claim_words.join(" ");

        let claim_img = random_unit(&mut rng, cfg.image_dim);
        let doc_img = match intended {
            Label::SupportMultimodal | Label::InsufficientMultimodal => {
                let noise = random_unit(&mut rng, cfg.image_dim);
                claim_img.iter().zip(&noise).map(|(a, b)| a + 0.3 * b).collect()
            }
            _ => random_unit(&mut rng, cfg.image_dim),
        };
        let claim_vec = to_embedding(&claim_img)?;
        let doc_vec = to_embedding(&doc_img)?;
        let image_sim = claim_vec.dot(&doc_vec)?;
        let text_sim = max_sentence_similarity(&encoder, &claim_text, &doc_text)?;

        let ocr = |rng: &mut ChaCha8Rng| -> String {
            let n = rng.random_range(0..4);
            (0..n)
                .map(|_| vocab[rng.random_range(0..vocab.len())].as_str())
                .collect::<Vec<_>>()
                .join(" ")
        };
        let id = format!("{prefix}-{i:04}");
        let claim_image_key = format!("{id}/claim.jpg");
        let doc_image_key = format!("{id}/doc.jpg");
        images.insert(claim_image_key.clone(), claim_vec)?;
        images.insert(doc_image_key.clone(), doc_vec)?;
        pairs.push(ClaimDocPair {
            id,
            claim_text,
            claim_image_key,
            claim_ocr: ocr(&mut rng),
            doc_text,
            doc_image_key,
            doc_ocr: ocr(&mut rng),
            label: Some(similarity_label(text_sim, image_sim)),
        });
    }

    let mut planted_invalid = Vec::with_capacity(cfg.invalid_rows);
    for j in 0..cfg.invalid_rows {
        // Spread planted rows through the file instead of appending them.
        let at = if pairs.is_empty() {
            0
        } else {
            rng.random_range(0..=pairs.len())
        };
        let id = format!("{prefix}-invalid-{j:03}");
        let banner = SCRAPE_ERROR_PREFIXES[j % SCRAPE_ERROR_PREFIXES.len()];
        let key = format!("{id}/img.jpg");
        images.insert(key.clone(), to_embedding(&random_unit(&mut rng, cfg.image_dim))?)?;
        pairs.insert(
            at,
            ClaimDocPair {
                id: id.clone(),
                claim_text: "placeholder claim".into(),
                claim_image_key: key.clone(),
                claim_ocr: String::new(),
                doc_text: format!("  {banner}. Please enable JavaScript to continue."),
                doc_image_key: key,
                doc_ocr: String::new(),
                label: Some(Label::Refute),
            },
        );
        planted_invalid.push(id);
    }

    Ok(SynthCorpus {
        dataset: Dataset::new(split, pairs)?,
        images,
        planted_invalid,
    })
}
