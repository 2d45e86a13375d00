//! The sequence-to-sequence transformer: pre-norm encoder/decoder stacks
//! with one embedding table shared between source input, target input and
//! the output projection.

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::layers::{
    add_positional, dropout, softmax_rows, AttentionCache, DropoutMask, FeedForward,
    FeedForwardCache, LayerNorm, LayerNormCache, MultiHeadAttention, Param, SeqLayout,
};
use super::vocab::Vocabulary;
use super::{NmtError, Real};

/// Transformer shape parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub num_layers: usize,
    pub model_dim: usize,
    pub ffn_dim: usize,
    pub num_heads: usize,
    pub dropout_rate: f64,
    pub max_positions: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            num_layers: 3,
            model_dim: 64,
            ffn_dim: 128,
            num_heads: 4,
            dropout_rate: 0.0,
            max_positions: 256,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), NmtError> {
        if self.num_layers == 0
            || self.model_dim == 0
            || self.ffn_dim == 0
            || self.num_heads == 0
            || self.max_positions == 0
        {
            return Err(NmtError::InvalidConfig(
                "layer count and dimensions must be positive".into(),
            ));
        }
        if self.model_dim % self.num_heads != 0 {
            return Err(NmtError::InvalidConfig(format!(
                "model_dim {} not divisible by num_heads {}",
                self.model_dim, self.num_heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(NmtError::InvalidConfig(format!(
                "dropout_rate {} outside [0, 1)",
                self.dropout_rate
            )));
        }
        Ok(())
    }
}

struct EncoderLayer<F> {
    norm1: LayerNorm<F>,
    self_attn: MultiHeadAttention<F>,
    norm2: LayerNorm<F>,
    ffn: FeedForward<F>,
}

struct EncoderLayerCache<F> {
    ln1: LayerNormCache<F>,
    attn: AttentionCache<F>,
    drop1: DropoutMask<F>,
    ln2: LayerNormCache<F>,
    ffn: FeedForwardCache<F>,
    drop2: DropoutMask<F>,
}

impl<F: Real> EncoderLayer<F> {
    fn new(cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Self {
        EncoderLayer {
            norm1: LayerNorm::new(cfg.model_dim),
            self_attn: MultiHeadAttention::new(cfg.model_dim, cfg.num_heads, rng),
            norm2: LayerNorm::new(cfg.model_dim),
            ffn: FeedForward::new(cfg.model_dim, cfg.ffn_dim, rng),
        }
    }

    fn forward(
        &self,
        x: &Array2<F>,
        layout: &SeqLayout,
        rate: f64,
        mut rng: Option<&mut ChaCha8Rng>,
    ) -> (Array2<F>, EncoderLayerCache<F>) {
        let (h, ln1) = self.norm1.forward(x);
        let (mut attn_out, attn) = self.self_attn.forward(&h, &h, layout, layout, false);
        let drop1 = dropout(&mut attn_out, rate, rng.as_deref_mut());
        let x1 = x + &attn_out;
        let (h2, ln2) = self.norm2.forward(&x1);
        let (mut f, ffn) = self.ffn.forward(&h2);
        let drop2 = dropout(&mut f, rate, rng.as_deref_mut());
        let y = &x1 + &f;
        (
            y,
            EncoderLayerCache {
                ln1,
                attn,
                drop1,
                ln2,
                ffn,
                drop2,
            },
        )
    }

    fn backward(
        &mut self,
        cache: &EncoderLayerCache<F>,
        layout: &SeqLayout,
        dy: &Array2<F>,
    ) -> Array2<F> {
        let mut df = dy.clone();
        cache.drop2.backward(&mut df);
        let dh2 = self.ffn.backward(&cache.ffn, &df);
        let dx1 = dy + &self.norm2.backward(&cache.ln2, &dh2);
        let mut dattn = dx1.clone();
        cache.drop1.backward(&mut dattn);
        let (dq, dkv) = self.self_attn.backward(&cache.attn, layout, layout, &dattn);
        let dh = dq + dkv;
        &dx1 + &self.norm1.backward(&cache.ln1, &dh)
    }

    fn collect_params<'a>(&'a mut self, out: &mut Vec<&'a mut Param<F>>) {
        self.norm1.collect_params(out);
        self.self_attn.collect_params(out);
        self.norm2.collect_params(out);
        self.ffn.collect_params(out);
    }

    fn collect_params_ref<'a>(&'a self, out: &mut Vec<&'a Param<F>>) {
        self.norm1.collect_params_ref(out);
        self.self_attn.collect_params_ref(out);
        self.norm2.collect_params_ref(out);
        self.ffn.collect_params_ref(out);
    }
}

struct DecoderLayer<F> {
    norm1: LayerNorm<F>,
    self_attn: MultiHeadAttention<F>,
    norm2: LayerNorm<F>,
    cross_attn: MultiHeadAttention<F>,
    norm3: LayerNorm<F>,
    ffn: FeedForward<F>,
}

struct DecoderLayerCache<F> {
    ln1: LayerNormCache<F>,
    self_attn: AttentionCache<F>,
    drop1: DropoutMask<F>,
    ln2: LayerNormCache<F>,
    cross_attn: AttentionCache<F>,
    drop2: DropoutMask<F>,
    ln3: LayerNormCache<F>,
    ffn: FeedForwardCache<F>,
    drop3: DropoutMask<F>,
}

impl<F: Real> DecoderLayer<F> {
    fn new(cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Self {
        DecoderLayer {
            norm1: LayerNorm::new(cfg.model_dim),
            self_attn: MultiHeadAttention::new(cfg.model_dim, cfg.num_heads, rng),
            norm2: LayerNorm::new(cfg.model_dim),
            cross_attn: MultiHeadAttention::new(cfg.model_dim, cfg.num_heads, rng),
            norm3: LayerNorm::new(cfg.model_dim),
            ffn: FeedForward::new(cfg.model_dim, cfg.ffn_dim, rng),
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn forward(
        &self,
        x: &Array2<F>,
        layout: &SeqLayout,
        memory: &Array2<F>,
        memory_layout: &SeqLayout,
        rate: f64,
        mut rng: Option<&mut ChaCha8Rng>,
    ) -> (Array2<F>, DecoderLayerCache<F>) {
        let (h, ln1) = self.norm1.forward(x);
        let (mut self_out, self_attn) = self.self_attn.forward(&h, &h, layout, layout, true);
        let drop1 = dropout(&mut self_out, rate, rng.as_deref_mut());
        let x1 = x + &self_out;

        let (h2, ln2) = self.norm2.forward(&x1);
        let (mut cross_out, cross_attn) =
            self.cross_attn
                .forward(&h2, memory, layout, memory_layout, false);
        let drop2 = dropout(&mut cross_out, rate, rng.as_deref_mut());
        let x2 = &x1 + &cross_out;

        let (h3, ln3) = self.norm3.forward(&x2);
        let (mut f, ffn) = self.ffn.forward(&h3);
        let drop3 = dropout(&mut f, rate, rng.as_deref_mut());
        let y = &x2 + &f;
        (
            y,
            DecoderLayerCache {
                ln1,
                self_attn,
                drop1,
                ln2,
                cross_attn,
                drop2,
                ln3,
                ffn,
                drop3,
            },
        )
    }

    /// Returns `(dx, d_memory)`.
    fn backward(
        &mut self,
        cache: &DecoderLayerCache<F>,
        layout: &SeqLayout,
        memory_layout: &SeqLayout,
        dy: &Array2<F>,
    ) -> (Array2<F>, Array2<F>) {
        let mut df = dy.clone();
        cache.drop3.backward(&mut df);
        let dh3 = self.ffn.backward(&cache.ffn, &df);
        let dx2 = dy + &self.norm3.backward(&cache.ln3, &dh3);

        let mut dcross = dx2.clone();
        cache.drop2.backward(&mut dcross);
        let (dq, dmemory) =
            self.cross_attn
                .backward(&cache.cross_attn, layout, memory_layout, &dcross);
        let dx1 = &dx2 + &self.norm2.backward(&cache.ln2, &dq);

        let mut dself = dx1.clone();
        cache.drop1.backward(&mut dself);
        let (dq2, dkv2) = self
            .self_attn
            .backward(&cache.self_attn, layout, layout, &dself);
        let dh = dq2 + dkv2;
        let dx = &dx1 + &self.norm1.backward(&cache.ln1, &dh);
        (dx, dmemory)
    }

    fn collect_params<'a>(&'a mut self, out: &mut Vec<&'a mut Param<F>>) {
        self.norm1.collect_params(out);
        self.self_attn.collect_params(out);
        self.norm2.collect_params(out);
        self.cross_attn.collect_params(out);
        self.norm3.collect_params(out);
        self.ffn.collect_params(out);
    }

    fn collect_params_ref<'a>(&'a self, out: &mut Vec<&'a Param<F>>) {
        self.norm1.collect_params_ref(out);
        self.self_attn.collect_params_ref(out);
        self.norm2.collect_params_ref(out);
        self.cross_attn.collect_params_ref(out);
        self.norm3.collect_params_ref(out);
        self.ffn.collect_params_ref(out);
    }
}

/// A padded training batch. `weights(alpha)` produces the per-position loss
/// weights: `alpha` where the reference token is part of a constraint, `1`
/// elsewhere, `0` at padding.
#[derive(Clone, Debug)]
pub struct Batch {
    pub src_ids: Vec<u32>,
    pub src_layout: SeqLayout,
    /// `[BOS, y_1..y_T]`, padded.
    pub tgt_in_ids: Vec<u32>,
    /// `[y_1..y_T, EOS]`, padded; loss targets.
    pub tgt_out_ids: Vec<u32>,
    pub tgt_layout: SeqLayout,
    /// Aligned with `tgt_out_ids`; true where the reference token belongs to
    /// a constraint's target term.
    pub constraint_mask: Vec<bool>,
}

impl Batch {
    /// Packs sentences into one padded batch. `constraint_masks[i]` must have
    /// the length of `targets[i]`; the appended EOS is never a constraint.
    pub fn new(
        sources: &[Vec<u32>],
        targets: &[Vec<u32>],
        constraint_masks: &[Vec<bool>],
    ) -> Result<Batch, NmtError> {
        if sources.len() != targets.len() || sources.len() != constraint_masks.len() {
            return Err(NmtError::ShapeMismatch(format!(
                "batch sides disagree: {} sources, {} targets, {} masks",
                sources.len(),
                targets.len(),
                constraint_masks.len()
            )));
        }
        let src_layout = SeqLayout::new(sources.iter().map(Vec::len).collect());
        let tgt_layout = SeqLayout::new(targets.iter().map(|t| t.len() + 1).collect());

        let mut src_ids = vec![Vocabulary::PAD; src_layout.rows()];
        for (b, sent) in sources.iter().enumerate() {
            let start = b * src_layout.padded_len;
            src_ids[start..start + sent.len()].copy_from_slice(sent);
        }
        let rows = tgt_layout.rows();
        let mut tgt_in_ids = vec![Vocabulary::PAD; rows];
        let mut tgt_out_ids = vec![Vocabulary::PAD; rows];
        let mut constraint_mask = vec![false; rows];
        for (b, (sent, cmask)) in targets.iter().zip(constraint_masks).enumerate() {
            if cmask.len() != sent.len() {
                return Err(NmtError::ShapeMismatch(format!(
                    "constraint mask length {} != target length {}",
                    cmask.len(),
                    sent.len()
                )));
            }
            let start = b * tgt_layout.padded_len;
            tgt_in_ids[start] = Vocabulary::BOS;
            tgt_in_ids[start + 1..start + 1 + sent.len()].copy_from_slice(sent);
            tgt_out_ids[start..start + sent.len()].copy_from_slice(sent);
            tgt_out_ids[start + sent.len()] = Vocabulary::EOS;
            constraint_mask[start..start + sent.len()].copy_from_slice(cmask);
        }
        Ok(Batch {
            src_ids,
            src_layout,
            tgt_in_ids,
            tgt_out_ids,
            tgt_layout,
            constraint_mask,
        })
    }

    pub fn weights<F: Real>(&self, alpha: f64) -> Vec<F> {
        let alpha = F::from_f64(alpha);
        let mut w = vec![F::zero(); self.tgt_out_ids.len()];
        for b in 0..self.tgt_layout.batch() {
            for r in self.tgt_layout.item(b) {
                w[r] = if self.constraint_mask[r] { alpha } else { F::one() };
            }
        }
        w
    }

    /// Number of real (non-padding) target positions, EOS included.
    pub fn target_tokens(&self) -> usize {
        self.tgt_layout.lens.iter().sum()
    }
}

/// Caches of one full forward pass, consumed by `backward_batch`.
pub struct ForwardPass<F> {
    src_layout: SeqLayout,
    tgt_layout: SeqLayout,
    src_ids: Vec<u32>,
    tgt_in_ids: Vec<u32>,
    emb_drop_src: DropoutMask<F>,
    emb_drop_tgt: DropoutMask<F>,
    enc_caches: Vec<EncoderLayerCache<F>>,
    enc_norm: LayerNormCache<F>,
    dec_caches: Vec<DecoderLayerCache<F>>,
    dec_norm: LayerNormCache<F>,
    /// Final decoder hidden states, `[rows, model_dim]`.
    pub hidden: Array2<F>,
    /// Output scores against the tied embedding, `[rows, vocab]`.
    pub logits: Array2<F>,
}

/// Encoder-decoder model with a single tied embedding table: the same
/// storage embeds source tokens, embeds target tokens, and projects decoder
/// states to vocabulary logits.
pub struct Seq2SeqModel<F: Real = f32> {
    config: ModelConfig,
    vocab_size: usize,
    embedding: Param<F>,
    encoder: Vec<EncoderLayer<F>>,
    decoder: Vec<DecoderLayer<F>>,
    encoder_norm: LayerNorm<F>,
    decoder_norm: LayerNorm<F>,
}

impl<F: Real> Seq2SeqModel<F> {
    pub fn new(config: ModelConfig, vocab_size: usize, seed: u64) -> Result<Self, NmtError> {
        config.validate()?;
        if vocab_size == 0 {
            return Err(NmtError::InvalidConfig("vocabulary must be non-empty".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let embedding = Param::new(super::layers::xavier(vocab_size, config.model_dim, &mut rng));
        let encoder = (0..config.num_layers)
            .map(|_| EncoderLayer::new(&config, &mut rng))
            .collect();
        let decoder = (0..config.num_layers)
            .map(|_| DecoderLayer::new(&config, &mut rng))
            .collect();
        Ok(Seq2SeqModel {
            encoder_norm: LayerNorm::new(config.model_dim),
            decoder_norm: LayerNorm::new(config.model_dim),
            config,
            vocab_size,
            embedding,
            encoder,
            decoder,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    /// The tied embedding table, `[vocab, model_dim]`.
    pub fn embedding(&self) -> &Array2<F> {
        &self.embedding.value
    }

    pub fn embedding_mut(&mut self) -> &mut Array2<F> {
        &mut self.embedding.value
    }

    fn check_ids(&self, ids: &[u32]) -> Result<(), NmtError> {
        for &id in ids {
            if id as usize >= self.vocab_size {
                return Err(NmtError::IdOutOfRange {
                    id,
                    vocab_size: self.vocab_size,
                });
            }
        }
        Ok(())
    }

    fn check_len(&self, layout: &SeqLayout) -> Result<(), NmtError> {
        if layout.padded_len > self.config.max_positions {
            return Err(NmtError::SequenceTooLong {
                len: layout.padded_len,
                max: self.config.max_positions,
            });
        }
        Ok(())
    }

    fn embed(&self, ids: &[u32], layout: &SeqLayout) -> Array2<F> {
        let dim = self.config.model_dim;
        let scale = F::from_f64((dim as f64).sqrt());
        let mut x = Array2::zeros((layout.rows(), dim));
        for b in 0..layout.batch() {
            for r in layout.item(b) {
                let row = self.embedding.value.row(ids[r] as usize);
                for c in 0..dim {
                    x[[r, c]] = row[c] * scale;
                }
            }
        }
        add_positional(&mut x, layout);
        x
    }

    fn embed_backward(&mut self, ids: &[u32], layout: &SeqLayout, dx: &Array2<F>) {
        let dim = self.config.model_dim;
        let scale = F::from_f64((dim as f64).sqrt());
        for b in 0..layout.batch() {
            for r in layout.item(b) {
                let mut grad_row = self.embedding.grad.row_mut(ids[r] as usize);
                for c in 0..dim {
                    grad_row[c] += dx[[r, c]] * scale;
                }
            }
        }
    }

    /// Full teacher-forced forward pass over a padded batch. `rng` enables
    /// dropout (training mode); pass `None` for deterministic evaluation.
    pub fn forward_batch(
        &self,
        batch: &Batch,
        mut rng: Option<&mut ChaCha8Rng>,
    ) -> Result<ForwardPass<F>, NmtError> {
        self.check_ids(&batch.src_ids)?;
        self.check_ids(&batch.tgt_in_ids)?;
        self.check_len(&batch.src_layout)?;
        self.check_len(&batch.tgt_layout)?;
        let rate = self.config.dropout_rate;

        let mut x = self.embed(&batch.src_ids, &batch.src_layout);
        let emb_drop = dropout(&mut x, rate, rng.as_deref_mut());
        let mut enc_caches = Vec::with_capacity(self.encoder.len());
        for layer in &self.encoder {
            let (y, cache) = layer.forward(&x, &batch.src_layout, rate, rng.as_deref_mut());
            x = y;
            enc_caches.push(cache);
        }
        let (memory, enc_norm) = self.encoder_norm.forward(&x);

        let mut t = self.embed(&batch.tgt_in_ids, &batch.tgt_layout);
        let emb_drop_tgt = dropout(&mut t, rate, rng.as_deref_mut());
        let mut dec_caches = Vec::with_capacity(self.decoder.len());
        for layer in &self.decoder {
            let (y, cache) = layer.forward(
                &t,
                &batch.tgt_layout,
                &memory,
                &batch.src_layout,
                rate,
                rng.as_deref_mut(),
            );
            t = y;
            dec_caches.push(cache);
        }
        let (hidden, dec_norm) = self.decoder_norm.forward(&t);
        let logits = hidden.dot(&self.embedding.value.t());

        Ok(ForwardPass {
            src_layout: batch.src_layout.clone(),
            tgt_layout: batch.tgt_layout.clone(),
            src_ids: batch.src_ids.clone(),
            tgt_in_ids: batch.tgt_in_ids.clone(),
            emb_drop_src: emb_drop,
            emb_drop_tgt,
            enc_caches,
            enc_norm,
            dec_caches,
            dec_norm,
            hidden,
            logits,
        })
    }

    /// Accumulates parameter gradients for `dlogits` through the whole model.
    pub fn backward_batch(&mut self, pass: &ForwardPass<F>, dlogits: &Array2<F>) {
        // logits = hidden . E^T
        let dhidden = dlogits.dot(&self.embedding.value);
        self.embedding.grad += &dlogits.t().dot(&pass.hidden);

        let mut dt = self.decoder_norm.backward(&pass.dec_norm, &dhidden);
        let mut dmemory: Array2<F> = Array2::zeros((pass.src_layout.rows(), self.config.model_dim));
        for (layer, cache) in self.decoder.iter_mut().zip(&pass.dec_caches).rev() {
            let (dx, dmem) = layer.backward(cache, &pass.tgt_layout, &pass.src_layout, &dt);
            dt = dx;
            dmemory += &dmem;
        }
        pass.emb_drop_tgt.backward(&mut dt);
        self.embed_backward(&pass.tgt_in_ids, &pass.tgt_layout, &dt);

        let mut dx = self.encoder_norm.backward(&pass.enc_norm, &dmemory);
        for (layer, cache) in self.encoder.iter_mut().zip(&pass.enc_caches).rev() {
            dx = layer.backward(cache, &pass.src_layout, &dx);
        }
        pass.emb_drop_src.backward(&mut dx);
        self.embed_backward(&pass.src_ids, &pass.src_layout, &dx);
    }

    /// Per-position next-token probability distributions for one sentence
    /// pair. The prefix must begin with BOS; row `i` is the distribution of
    /// the token following `target_prefix_ids[..=i]`.
    pub fn forward(
        &self,
        source_ids: &[u32],
        target_prefix_ids: &[u32],
    ) -> Result<Array2<F>, NmtError> {
        if target_prefix_ids.first() != Some(&Vocabulary::BOS) {
            return Err(NmtError::InvalidConfig(
                "target prefix must begin with BOS".into(),
            ));
        }
        let (memory, _) = self.encode(source_ids)?;
        let mut logits = self.decoder_logits(&memory, source_ids.len(), target_prefix_ids)?;
        softmax_rows(&mut logits);
        Ok(logits)
    }

    /// Encodes one source sentence; returns the memory `[len, dim]`.
    pub fn encode(&self, source_ids: &[u32]) -> Result<(Array2<F>, usize), NmtError> {
        self.check_ids(source_ids)?;
        let layout = SeqLayout::new(vec![source_ids.len()]);
        self.check_len(&layout)?;
        let mut x = self.embed(source_ids, &layout);
        for layer in &self.encoder {
            let (y, _) = layer.forward(&x, &layout, 0.0, None);
            x = y;
        }
        let (memory, _) = self.encoder_norm.forward(&x);
        Ok((memory, source_ids.len()))
    }

    /// Decoder logits `[prefix_len, vocab]` for a prefix against an encoded
    /// source (evaluation mode, no dropout).
    pub fn decoder_logits(
        &self,
        memory: &Array2<F>,
        source_len: usize,
        prefix_ids: &[u32],
    ) -> Result<Array2<F>, NmtError> {
        self.check_ids(prefix_ids)?;
        let layout = SeqLayout::new(vec![prefix_ids.len()]);
        self.check_len(&layout)?;
        let memory_layout = SeqLayout::new(vec![source_len]);
        let mut t = self.embed(prefix_ids, &layout);
        for layer in &self.decoder {
            let (y, _) = layer.forward(&t, &layout, memory, &memory_layout, 0.0, None);
            t = y;
        }
        let (hidden, _) = self.decoder_norm.forward(&t);
        Ok(hidden.dot(&self.embedding.value.t()))
    }

    /// All parameter tensors in canonical order (embedding first). The order
    /// is the contract for optimizers and the checkpoint format.
    pub fn parameters_mut(&mut self) -> Vec<&mut Param<F>> {
        let mut out = Vec::new();
        out.push(&mut self.embedding);
        for layer in &mut self.encoder {
            layer.collect_params(&mut out);
        }
        self.encoder_norm.collect_params(&mut out);
        for layer in &mut self.decoder {
            layer.collect_params(&mut out);
        }
        self.decoder_norm.collect_params(&mut out);
        out
    }

    /// Immutable view of the parameter tensors, in the same canonical order
    /// as [`Seq2SeqModel::parameters_mut`].
    pub fn parameters(&self) -> Vec<&Param<F>> {
        let mut out = Vec::new();
        out.push(&self.embedding);
        for layer in &self.encoder {
            layer.collect_params_ref(&mut out);
        }
        self.encoder_norm.collect_params_ref(&mut out);
        for layer in &self.decoder {
            layer.collect_params_ref(&mut out);
        }
        self.decoder_norm.collect_params_ref(&mut out);
        out
    }

    pub fn zero_grads(&mut self) {
        for p in self.parameters_mut() {
            p.zero_grad();
        }
    }

    pub fn num_parameters(&mut self) -> usize {
        self.parameters_mut().iter().map(|p| p.value.len()).sum()
    }
}
