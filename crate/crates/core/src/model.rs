//! The dual-branch veracity classifier.
//!
//! Branch A encodes six cross-modal slot embeddings (claim text, evidence
//! snippet, claim OCR, document OCR, claim image, document image) with a
//! transformer encoder. Branch B projects the word-vector sequence of
//! `claim + snippet` to the model width, adds learned positions and runs a
//! second encoder under a padding mask. Each branch is max-pooled over its
//! rows; the two pooled vectors are concatenated and fed to an MLP head
//! that produces five logits.

use ndarray::{concatenate, s, Array1, Array2, ArrayView1, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::corpus::{ClaimDocPair, Label};
use crate::embedding::{tokenize, truncate_tokens, ImageEmbedder, TextEmbedder, WordVectors};
use crate::error::{Error, Result};
use crate::nn::layers::{Encoder, EncoderBlockCache, Linear};
use crate::nn::ops::{self, Mode};
use crate::nn::{Gradients, ParamId, ParamSet, Tensor};
use crate::retrieval::EvidenceSnippet;

pub const NUM_CLASSES: usize = Label::COUNT;
pub const CLIP_SLOTS: usize = 6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub d_clip: usize,
    pub d_word: usize,
    pub d_text_model: usize,
    pub n_heads: usize,
    pub n_blocks: usize,
    /// Inner FFN width; `None` means four times the branch width.
    pub d_ff: Option<usize>,
    /// Hidden and output widths of the MLP head. The last entry is the
    /// class count.
    pub mlp_dims: Vec<usize>,
    pub mlp_dropout: f64,
    /// Multiplier applied to the Xavier draw of the last head layer, so
    /// initial logits sit near zero and the first loss near ln 5.
    pub head_init_scale: f64,
    pub encoder_dropout: f64,
    pub max_clip_tokens: usize,
    /// Word-sequence length. Zero means "derive from the training set".
    pub pad_len: usize,
    pub mask_padding: bool,
    pub text_positional: bool,
    pub clip_positional: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d_clip: 512,
            d_word: 300,
            d_text_model: 512,
            n_heads: 4,
            n_blocks: 2,
            d_ff: None,
            mlp_dims: vec![3072, 1024, NUM_CLASSES],
            mlp_dropout: 0.5,
            head_init_scale: 0.1,
            encoder_dropout: 0.0,
            max_clip_tokens: 77,
            pad_len: 0,
            mask_padding: true,
            text_positional: true,
            clip_positional: false,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.d_clip == 0 || self.d_word == 0 || self.d_text_model == 0 {
            return bad("model widths must be positive".into());
        }
        if self.n_heads == 0
            || self.d_clip % self.n_heads != 0
            || self.d_text_model % self.n_heads != 0
        {
            return bad(format!(
                "d_clip {} and d_text_model {} must be divisible by n_heads {}",
                self.d_clip, self.d_text_model, self.n_heads
            ));
        }
        if self.d_clip < 2 || self.d_text_model < 2 {
            return bad("layer norm needs width of at least 2".into());
        }
        if self.mlp_dims.last() != Some(&NUM_CLASSES) || self.mlp_dims.contains(&0) {
            return bad(format!(
                "mlp_dims must be positive and end with {NUM_CLASSES}, got {:?}",
                self.mlp_dims
            ));
        }
        if !(0.0..1.0).contains(&self.mlp_dropout) || !(0.0..1.0).contains(&self.encoder_dropout) {
            return bad("dropout probabilities must lie in [0, 1)".into());
        }
        if !(self.head_init_scale.is_finite() && self.head_init_scale > 0.0) {
            return bad("head_init_scale must be positive".into());
        }
        if self.max_clip_tokens == 0 {
            return bad("max_clip_tokens must be positive".into());
        }
        if self.pad_len == 0 {
            return bad("pad_len must be set (derive it from the training set)".into());
        }
        Ok(())
    }

    pub fn clip_ff(&self) -> usize {
        self.d_ff.unwrap_or(4 * self.d_clip)
    }

    pub fn text_ff(&self) -> usize {
        self.d_ff.unwrap_or(4 * self.d_text_model)
    }
}

/// One classifier input.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelInput {
    /// `[6, d_clip]`, rows in slot order, each unit norm.
    pub clip_slots: Array2<f64>,
    /// `[pad_len, d_word]`; padded rows are zero.
    pub word_seq: Array2<f64>,
    pub seq_mask: Vec<bool>,
}

/// Build the six cross-modal slot rows. Texts are cut to the first
/// `max_clip_tokens` whitespace tokens before encoding.
pub fn assemble_clip_input(
    pair: &ClaimDocPair,
    snippet: &EvidenceSnippet,
    clip_text: &TextEmbedder,
    clip_image: &ImageEmbedder,
    max_clip_tokens: usize,
) -> Result<Array2<f64>> {
    if clip_text.dim() != clip_image.dim() {
        return Err(Error::Config(format!(
            "cross-modal text dim {} differs from image dim {}",
            clip_text.dim(),
            clip_image.dim()
        )));
    }
    let texts = [
        pair.claim_text.as_str(),
        snippet.text.as_str(),
        pair.claim_ocr.as_str(),
        pair.doc_ocr.as_str(),
    ];
    let mut rows = Vec::with_capacity(CLIP_SLOTS);
    for t in texts {
        rows.push(clip_text.embed(&truncate_tokens(t, max_clip_tokens))?);
    }
    rows.push(clip_image.embed(&pair.claim_image_key)?);
    rows.push(clip_image.embed(&pair.doc_image_key)?);
    let d = clip_text.dim();
    let mut m = Array2::zeros((CLIP_SLOTS, d));
    for (i, v) in rows.iter().enumerate() {
        for (dst, &src) in m.row_mut(i).iter_mut().zip(v.values()) {
            *dst = f64::from(src);
        }
    }
    Ok(m)
}

/// Tokens of the word branch: `claim_text + " " + snippet`, lowercased.
pub fn text_tokens(pair: &ClaimDocPair, snippet: &EvidenceSnippet) -> Vec<String> {
    let mut t = tokenize(&pair.claim_text);
    t.extend(tokenize(&snippet.text));
    t
}

/// Word-vector sequence truncated or zero-padded to `pad_len` rows.
pub fn assemble_text_input(
    pair: &ClaimDocPair,
    snippet: &EvidenceSnippet,
    words: &WordVectors,
    pad_len: usize,
) -> (Array2<f64>, Vec<bool>) {
    let tokens = text_tokens(pair, snippet);
    let mut seq = Array2::zeros((pad_len, words.dim()));
    let mut mask = vec![false; pad_len];
    for (i, tok) in tokens.iter().take(pad_len).enumerate() {
        let v = words.lookup(tok);
        for (dst, &src) in seq.row_mut(i).iter_mut().zip(v.values()) {
            *dst = f64::from(src);
        }
        mask[i] = true;
    }
    (seq, mask)
}

/// Longest token sequence over a training set.
pub fn compute_pad_len<'a>(
    items: impl IntoIterator<Item = (&'a ClaimDocPair, &'a EvidenceSnippet)>,
) -> usize {
    items
        .into_iter()
        .map(|(p, s)| text_tokens(p, s).len())
        .max()
        .unwrap_or(0)
}

struct Head {
    layers: Vec<Linear>,
}

pub struct VeracityModel {
    pub config: ModelConfig,
    clip_pos: Option<ParamId>,
    clip_encoder: Encoder,
    text_proj: Linear,
    text_pos: Option<ParamId>,
    text_encoder: Encoder,
    head: Head,
}

/// Activations kept from one forward pass for the backward pass.
pub struct ItemCache {
    clip_blocks: Vec<EncoderBlockCache>,
    clip_argmax: Vec<usize>,
    text_rows: Vec<usize>,
    text_in: Array2<f64>,
    text_blocks: Vec<EncoderBlockCache>,
    text_argmax: Vec<usize>,
    text_len: usize,
    head_inputs: Vec<Array2<f64>>,
    head_pre: Vec<Array2<f64>>,
    head_masks: Vec<Option<Array2<f64>>>,
}

impl VeracityModel {
    /// Build the architecture and a freshly initialised parameter set.
    pub fn new(config: ModelConfig, seed: u64) -> Result<(Self, ParamSet)> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut ps = ParamSet::new();
        let c = &config;
        let clip_pos = c
            .clip_positional
            .then(|| ps.add("clip.pos", normal_tensor(&mut rng, &[CLIP_SLOTS, c.d_clip])));
        let clip_encoder = Encoder::new(
            &mut ps,
            "clip",
            c.n_blocks,
            c.d_clip,
            c.n_heads,
            c.clip_ff(),
            c.encoder_dropout,
            &mut rng,
        )?;
        let text_proj = Linear::new(&mut ps, "text.proj", c.d_word, c.d_text_model, &mut rng);
        let text_pos = c
            .text_positional
            .then(|| ps.add("text.pos", normal_tensor(&mut rng, &[c.pad_len, c.d_text_model])));
        let text_encoder = Encoder::new(
            &mut ps,
            "text",
            c.n_blocks,
            c.d_text_model,
            c.n_heads,
            c.text_ff(),
            c.encoder_dropout,
            &mut rng,
        )?;
        let mut layers = Vec::new();
        let mut width = c.d_clip + c.d_text_model;
        for (i, &out) in c.mlp_dims.iter().enumerate() {
            layers.push(Linear::new(&mut ps, &format!("head.{i}"), width, out, &mut rng));
            width = out;
        }
        if let Some(last) = ps.id(&format!("head.{}.weight", c.mlp_dims.len() - 1)) {
            for v in ps.get_mut(last).data_mut() {
                *v *= c.head_init_scale;
            }
        }
        let model = VeracityModel {
            config,
            clip_pos,
            clip_encoder,
            text_proj,
            text_pos,
            text_encoder,
            head: Head { layers },
        };
        Ok((model, ps))
    }

    fn check_input(&self, input: &ModelInput) -> Result<()> {
        let c = &self.config;
        if input.clip_slots.dim() != (CLIP_SLOTS, c.d_clip) {
            return Err(Error::shape(
                "forward",
                format!("clip slots {:?}, expected [6, {}]", input.clip_slots.dim(), c.d_clip),
            ));
        }
        let (len, d) = input.word_seq.dim();
        if d != c.d_word || len == 0 || len != input.seq_mask.len() {
            return Err(Error::shape(
                "forward",
                format!(
                    "word sequence [{len}, {d}] with mask of {}, expected width {}",
                    input.seq_mask.len(),
                    c.d_word
                ),
            ));
        }
        if self.text_pos.is_some() && len > c.pad_len {
            return Err(Error::shape(
                "forward",
                format!("sequence of {len} rows exceeds pad_len {}", c.pad_len),
            ));
        }
        Ok(())
    }

    /// Pre-softmax class scores plus the cache for [`Self::backward`].
    pub fn forward_logits<R: Rng + ?Sized>(
        &self,
        ps: &ParamSet,
        input: &ModelInput,
        mode: Mode,
        rng: &mut R,
    ) -> Result<(Array1<f64>, ItemCache)> {
        self.check_input(input)?;
        let c = &self.config;

        let mut clip_x = input.clip_slots.clone();
        if let Some(pos) = self.clip_pos {
            clip_x += &ps.get(pos).matrix();
        }
        let (clip_h, clip_blocks) = self.clip_encoder.forward(ps, clip_x.view(), None, mode, rng)?;
        let (clip_pooled, clip_argmax) = ops::adaptive_max_pool(clip_h.view(), None);

        // With masking on, padded rows can neither be attended to nor win
        // the pool, so the branch runs on the real rows only.
        let text_len = input.word_seq.nrows();
        let text_rows: Vec<usize> = if c.mask_padding && input.seq_mask.iter().any(|&m| m) {
            (0..text_len).filter(|&i| input.seq_mask[i]).collect()
        } else {
            (0..text_len).collect()
        };
        let text_in = input.word_seq.select(Axis(0), &text_rows);
        let mut text_x = self.text_proj.forward(ps, text_in.view())?;
        if let Some(pos) = self.text_pos {
            let table = ps.get(pos).matrix();
            for (r, &src) in text_rows.iter().enumerate() {
                let mut row = text_x.row_mut(r);
                row += &table.row(src);
            }
        }
        let (text_h, text_blocks) = self.text_encoder.forward(ps, text_x.view(), None, mode, rng)?;
        let (text_pooled, text_argmax) = ops::adaptive_max_pool(text_h.view(), None);

        let mut h = concatenate(Axis(0), &[clip_pooled.view(), text_pooled.view()])
            .expect("1-d concat")
            .insert_axis(Axis(0));
        let n_layers = self.head.layers.len();
        let mut head_inputs = Vec::with_capacity(n_layers);
        let mut head_pre = Vec::with_capacity(n_layers);
        let mut head_masks = Vec::with_capacity(n_layers);
        for (i, layer) in self.head.layers.iter().enumerate() {
            let pre = layer.forward(ps, h.view())?;
            head_inputs.push(h);
            if i + 1 == n_layers {
                h = pre;
                break;
            }
            let act = ops::relu(&pre);
            let (dropped, mask) = ops::dropout(&act, c.mlp_dropout, mode, rng);
            head_pre.push(pre);
            head_masks.push(mask);
            h = dropped;
        }
        let logits = h.index_axis(Axis(0), 0).to_owned();
        Ok((
            logits,
            ItemCache {
                clip_blocks,
                clip_argmax,
                text_rows,
                text_in,
                text_blocks,
                text_argmax,
                text_len,
                head_inputs,
                head_pre,
                head_masks,
            },
        ))
    }

    /// Class probabilities.
    pub fn forward<R: Rng + ?Sized>(
        &self,
        ps: &ParamSet,
        input: &ModelInput,
        mode: Mode,
        rng: &mut R,
    ) -> Result<Array1<f64>> {
        let (logits, _) = self.forward_logits(ps, input, mode, rng)?;
        Ok(ops::softmax(logits.view()))
    }

    /// Eval-mode probabilities; no randomness is consumed.
    pub fn probabilities(&self, ps: &ParamSet, input: &ModelInput) -> Result<Array1<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        self.forward(ps, input, Mode::Eval, &mut rng)
    }

    pub fn predict(&self, ps: &ParamSet, input: &ModelInput) -> Result<Label> {
        let probs = self.probabilities(ps, input)?;
        Ok(Label::from_index(argmax(probs.view())).expect("five classes"))
    }

    /// Accumulate parameter gradients given `d loss / d logits`.
    pub fn backward(&self, ps: &ParamSet, grads: &mut Gradients, cache: &ItemCache, dlogits: ArrayView1<f64>) {
        let c = &self.config;
        let mut g = dlogits.to_owned().insert_axis(Axis(0));
        let n_layers = self.head.layers.len();
        for i in (0..n_layers).rev() {
            if i + 1 < n_layers {
                g = ops::dropout_backward(cache.head_masks[i].as_ref(), &g);
                g = ops::relu_backward(&cache.head_pre[i], &g);
            }
            g = self.head.layers[i].backward(ps, grads, cache.head_inputs[i].view(), g.view());
        }
        let g = g.index_axis(Axis(0), 0);
        let d_clip = c.d_clip;
        let g_clip = g.slice(s![..d_clip]);
        let g_text = g.slice(s![d_clip..]);

        let dclip_h = ops::adaptive_max_pool_backward(&cache.clip_argmax, CLIP_SLOTS, g_clip);
        let dclip_x = self.clip_encoder.backward(ps, grads, &cache.clip_blocks, dclip_h.view());
        if let Some(pos) = self.clip_pos {
            let mut dst = grads.get_mut(pos).matrix_mut();
            dst += &dclip_x;
        }

        let rows = cache.text_rows.len();
        let dtext_h = ops::adaptive_max_pool_backward(&cache.text_argmax, rows, g_text);
        let dtext_x = self.text_encoder.backward(ps, grads, &cache.text_blocks, dtext_h.view());
        if let Some(pos) = self.text_pos {
            let mut table = grads.get_mut(pos).matrix_mut();
            for (r, &src) in cache.text_rows.iter().enumerate() {
                let mut row = table.row_mut(src);
                row += &dtext_x.row(r);
            }
        }
        debug_assert!(cache.text_len >= rows);
        // Input embeddings are frozen; only the projection gets gradients.
        let _ = self
            .text_proj
            .backward(ps, grads, cache.text_in.view(), dtext_x.view());
    }

    /// Summed cross-entropy over `items`. When `grads` is given, the
    /// gradient of `loss_sum / denom` is accumulated in item order.
    /// `item_rng` supplies the dropout stream of each item.
    pub fn batch_loss<F>(
        &self,
        ps: &ParamSet,
        items: &[(&ModelInput, usize)],
        mode: Mode,
        grads: Option<&mut Gradients>,
        denom: usize,
        mut item_rng: F,
    ) -> Result<BatchOutput>
    where
        F: FnMut(usize) -> ChaCha8Rng,
    {
        let n = items.len();
        if n == 0 {
            return Err(Error::EmptyDataset);
        }
        let mut grads = grads;
        let mut loss = 0.0;
        let mut correct = 0;
        for (i, (input, target)) in items.iter().enumerate() {
            if *target >= NUM_CLASSES {
                return Err(Error::TargetOutOfRange {
                    target: *target,
                    classes: NUM_CLASSES,
                });
            }
            let mut rng = item_rng(i);
            let (logits, cache) = self.forward_logits(ps, input, mode, &mut rng)?;
            let row = logits.view().insert_axis(Axis(0)).to_owned();
            let (l, dlogits) = ops::softmax_cross_entropy(&row, &[*target])?;
            loss += l;
            if argmax(logits.view()) == *target {
                correct += 1;
            }
            if let Some(g) = grads.as_deref_mut() {
                let scaled = dlogits.row(0).mapv(|v| v / denom as f64);
                self.backward(ps, g, &cache, scaled.view());
            }
        }
        Ok(BatchOutput {
            loss_sum: loss,
            correct,
            count: n,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BatchOutput {
    pub loss_sum: f64,
    pub correct: usize,
    pub count: usize,
}

/// Index of the largest entry; ties resolve to the lowest index.
pub fn argmax(v: ArrayView1<f64>) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

fn normal_tensor<R: Rng + ?Sized>(rng: &mut R, shape: &[usize]) -> Tensor {
    let dist = Normal::new(0.0, 0.02).expect("valid std");
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| dist.sample(rng)).collect())
        .expect("shape matches data")
}
