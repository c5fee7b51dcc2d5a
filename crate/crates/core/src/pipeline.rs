//! Glue from datasets and stores to model inputs.

use std::sync::Arc;

use rayon::prelude::*;

use crate::corpus::Dataset;
use crate::embedding::{
    mix_seed, DeterministicEncoder, EmbeddingStore, ImageEmbedder, TextEmbedder, WordVectors,
};
use crate::error::{Error, Result};
use crate::experiment::StoreConfig;
use crate::model::{
    assemble_clip_input, assemble_text_input, compute_pad_len, ModelConfig, ModelInput,
};
use crate::retrieval::{retrieve, EvidenceSnippet, RetrievalConfig, Retriever};
use crate::training::Example;

/// Every embedding source an experiment needs.
#[derive(Debug, Clone)]
pub struct Stores {
    pub clip_text: TextEmbedder,
    pub clip_image: ImageEmbedder,
    pub sbert: TextEmbedder,
    pub sbert_qa: TextEmbedder,
    pub words: WordVectors,
}

fn load(path: &std::path::Path) -> Result<Arc<EmbeddingStore>> {
    Ok(Arc::new(EmbeddingStore::load(path)?))
}

fn check_dim(what: &str, found: usize, expected: usize) -> Result<()> {
    if found != expected {
        return Err(Error::Config(format!(
            "{what} store has dim {found}, model expects {expected}"
        )));
    }
    Ok(())
}

impl Stores {
    /// Open the configured store files; absent entries use deterministic
    /// encoders with widths taken from `model`.
    pub fn open(cfg: &StoreConfig, model: &ModelConfig) -> Result<Self> {
        let det = |salt: u64, dim: usize| DeterministicEncoder::new(dim, mix_seed(&[cfg.encoder_seed, salt]));
        let clip_text = match &cfg.clip_text {
            Some(p) => TextEmbedder::Store(load(p)?),
            None => TextEmbedder::Deterministic(det(1, model.d_clip)),
        };
        let clip_image = match &cfg.clip_image {
            Some(p) => ImageEmbedder::Store(load(p)?),
            None => ImageEmbedder::Deterministic(det(2, model.d_clip)),
        };
        let sentence = |path: &Option<std::path::PathBuf>, salt| -> Result<TextEmbedder> {
            Ok(match path {
                Some(p) => TextEmbedder::Store(load(p)?),
                None => TextEmbedder::Deterministic(det(salt, cfg.sentence_dim)),
            })
        };
        let sbert = sentence(&cfg.sbert, 3)?;
        let sbert_qa = sentence(&cfg.sbert_qa, 4)?;
        let words = match &cfg.word {
            Some(p) => WordVectors::Store(load(p)?),
            None => WordVectors::Deterministic(det(5, model.d_word)),
        };
        check_dim("cross-modal text", clip_text.dim(), model.d_clip)?;
        check_dim("cross-modal image", clip_image.dim(), model.d_clip)?;
        check_dim("word", words.dim(), model.d_word)?;
        Ok(Stores {
            clip_text,
            clip_image,
            sbert,
            sbert_qa,
            words,
        })
    }

    pub fn retriever(&self, r: Retriever) -> &TextEmbedder {
        match r {
            Retriever::Sbert => &self.sbert,
            Retriever::SbertQa => &self.sbert_qa,
        }
    }
}

/// Evidence snippet per pair, in dataset order.
pub fn retrieve_all(ds: &Dataset, cfg: &RetrievalConfig, stores: &Stores) -> Result<Vec<EvidenceSnippet>> {
    let embedder = stores.retriever(cfg.retriever);
    ds.pairs
        .par_iter()
        .map(|p| {
            retrieve(p, cfg, embedder).map_err(|e| Error::Config(format!("pair {}: {e}", p.id)))
        })
        .collect()
}

/// Copy of `model` with `pad_len` derived from the training snippets when
/// it is unset.
pub fn resolve_pad_len(model: &ModelConfig, train: &Dataset, snippets: &[EvidenceSnippet]) -> ModelConfig {
    let mut out = model.clone();
    if out.pad_len == 0 {
        out.pad_len = compute_pad_len(train.pairs.iter().zip(snippets)).max(1);
    }
    out
}

pub fn build_inputs(
    ds: &Dataset,
    snippets: &[EvidenceSnippet],
    stores: &Stores,
    model: &ModelConfig,
) -> Result<Vec<ModelInput>> {
    if snippets.len() != ds.len() {
        return Err(Error::LengthMismatch {
            left: ds.len(),
            right: snippets.len(),
        });
    }
    ds.pairs
        .par_iter()
        .zip(snippets)
        .map(|(p, s)| {
            let clip_slots = assemble_clip_input(
                p,
                s,
                &stores.clip_text,
                &stores.clip_image,
                model.max_clip_tokens,
            )
            .map_err(|e| Error::Config(format!("pair {}: {e}", p.id)))?;
            let (word_seq, seq_mask) = assemble_text_input(p, s, &stores.words, model.pad_len);
            Ok(ModelInput {
                clip_slots,
                word_seq,
                seq_mask,
            })
        })
        .collect()
}

/// Labeled training examples; every pair must carry a label.
pub fn build_examples(
    ds: &Dataset,
    snippets: &[EvidenceSnippet],
    stores: &Stores,
    model: &ModelConfig,
) -> Result<Vec<Example>> {
    let inputs = build_inputs(ds, snippets, stores, model)?;
    ds.pairs
        .iter()
        .zip(inputs)
        .map(|(p, input)| {
            let label = p.label.ok_or_else(|| Error::Unlabeled(p.id.clone()))?;
            Ok(Example {
                id: p.id.clone(),
                input,
                target: label.index(),
            })
        })
        .collect()
}
