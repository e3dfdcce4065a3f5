//! Encoder-decoder transformer over frame patches and prompt text, in a
//! full-attention and a per-frame (fusion-in-decoder) variant.

pub mod checkpoint;
mod config;
mod decode;
mod mask;
mod params;

use std::sync::Arc;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CheckpointError, CHECKPOINT_MAGIC};
pub use config::{ModelConfig, Variant};
pub use decode::{DecodeConfig, Hypothesis};
pub use mask::AttentionMask;
pub use params::ParamStore;

use params::{Attn, Layout, Linear, Ln};

use crate::media::{patch_pixels, MediaError, VideoClip, PAD};
use crate::tasks::Seq2SeqSample;
use crate::tensor::{CeReduction, Real, Tape, Tensor, TensorError, Var};

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Media(#[from] MediaError),
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("{got} frames exceed max_frames {max}")]
    TooManyFrames { got: usize, max: usize },
    #[error("text of {got} tokens exceeds {max}")]
    TextTooLong { got: usize, max: usize },
    #[error("target of {got} tokens exceeds max_target_len {max}")]
    TargetTooLong { got: usize, max: usize },
    #[error("frames are {height}x{width}, the model expects {size}x{size}")]
    FrameSize { height: usize, width: usize, size: usize },
    #[error("token id {id} outside vocabulary of {vocab}")]
    TokenId { id: u32, vocab: usize },
    #[error("target must be framed as BOS .. EOS with at least one token after BOS")]
    BadTarget,
}

/// Patch pixels and prompt ids for one encoder call.
#[derive(Clone, Debug)]
pub struct EncoderInput<F> {
    /// `[frames * P, patch_dim]`
    pub pixels: Tensor<F>,
    pub frames: usize,
    pub text: Vec<u32>,
}

#[derive(Clone, Copy, Debug, Default)]
pub struct EncodeOptions {
    /// Leave out the temporal-embedding addition entirely.
    pub skip_temporal: bool,
}

/// Parameters registered on a tape.
pub struct Bound {
    pub params: Vec<Var>,
}

/// Encoder states plus each decoder layer's cross-attention keys/values.
pub struct Memory {
    pub states: Var,
    cross_kv: Vec<(Var, Var)>,
}

#[derive(Clone, Debug)]
pub struct VideoToTextModel<F> {
    pub config: ModelConfig,
    params: ParamStore<F>,
    layout: Layout,
}

impl<F: Real> PartialEq for VideoToTextModel<F> {
    fn eq(&self, other: &Self) -> bool {
        self.config == other.config && self.params == other.params
    }
}

impl<F: Real> VideoToTextModel<F> {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let (layout, params) = params::init_params(&config, seed);
        Ok(Self { config, params, layout })
    }

    /// Rebuilds a model from stored tensors, checking names and shapes.
    pub fn from_params(config: ModelConfig, params: ParamStore<F>) -> Result<Self, ModelError> {
        config.validate()?;
        let expected = params::param_shapes(&config);
        if expected.len() != params.len() {
            return Err(ModelError::Config(format!(
                "config needs {} tensors, got {}",
                expected.len(),
                params.len()
            )));
        }
        for ((name, shape), (got_name, t)) in expected.iter().zip(params.names().iter().zip(params.tensors())) {
            if name != got_name || shape.as_slice() != t.shape() {
                return Err(ModelError::Config(format!(
                    "expected tensor {name} {shape:?}, found {got_name} {:?}",
                    t.shape()
                )));
            }
        }
        let layout = params::layout(&config);
        Ok(Self { config, params, layout })
    }

    pub fn params(&self) -> &ParamStore<F> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<F> {
        &mut self.params
    }

    pub fn cast<G: Real>(&self) -> VideoToTextModel<G> {
        VideoToTextModel {
            config: self.config.clone(),
            params: self.params.cast(),
            layout: self.layout.clone(),
        }
    }

    /// Name of the output projection: the token table when tied.
    pub fn head_name(&self) -> &str {
        &self.params.names()[self.layout.head.unwrap_or(self.layout.tok_emb)]
    }

    pub fn bind<'p>(&'p self, tape: &mut Tape<'p, F>, trainable: bool) -> Bound {
        Bound {
            params: self.params.tensors().iter().map(|t| tape.leaf_ref(t, trainable)).collect(),
        }
    }

    fn check_ids(&self, ids: &[u32]) -> Result<(), ModelError> {
        match ids.iter().find(|&&id| id as usize >= self.config.vocab) {
            Some(&id) => Err(ModelError::TokenId {
                id,
                vocab: self.config.vocab,
            }),
            None => Ok(()),
        }
    }

    pub fn encoder_input(&self, clip: &VideoClip, text: &[u32]) -> Result<EncoderInput<F>, ModelError> {
        let c = &self.config;
        if clip.height() != c.image_size || clip.width() != c.image_size {
            return Err(ModelError::FrameSize {
                height: clip.height(),
                width: clip.width(),
                size: c.image_size,
            });
        }
        if clip.num_frames() > c.max_frames {
            return Err(ModelError::TooManyFrames {
                got: clip.num_frames(),
                max: c.max_frames,
            });
        }
        if text.len() > c.max_text_len {
            return Err(ModelError::TextTooLong {
                got: text.len(),
                max: c.max_text_len,
            });
        }
        self.check_ids(text)?;
        Ok(EncoderInput {
            pixels: patch_pixels(clip, c.patch_size)?,
            frames: clip.num_frames(),
            text: text.to_vec(),
        })
    }

    fn linear(&self, tape: &mut Tape<'_, F>, b: &Bound, l: Linear, x: Var) -> Result<Var, TensorError> {
        let y = tape.matmul(x, b.params[l.weight])?;
        tape.add(y, b.params[l.bias])
    }

    fn ln(&self, tape: &mut Tape<'_, F>, b: &Bound, l: Ln, x: Var) -> Result<Var, TensorError> {
        tape.layer_norm(x, b.params[l.gain], b.params[l.bias], self.config.ln_eps)
    }

    fn ffn(&self, tape: &mut Tape<'_, F>, b: &Bound, f: params::Ffn, x: Var) -> Result<Var, TensorError> {
        let h = self.linear(tape, b, f.up, x)?;
        let h = tape.gelu(h)?;
        self.linear(tape, b, f.down, h)
    }

    fn project_kv(&self, tape: &mut Tape<'_, F>, b: &Bound, a: Attn, x: Var) -> Result<(Var, Var), TensorError> {
        let k = self.linear(tape, b, a.k, x)?;
        let k = tape.transpose(k)?;
        let v = self.linear(tape, b, a.v, x)?;
        Ok((k, v))
    }

    /// Multi-head attention of `xq` over keys `kt` (`[D, n_k]`, already
    /// transposed) and values `v` (`[n_k, D]`).
    #[allow(clippy::too_many_arguments)]
    fn attend(
        &self,
        tape: &mut Tape<'_, F>,
        b: &Bound,
        a: Attn,
        xq: Var,
        kt: Var,
        v: Var,
        mask: Option<&AttentionMask>,
    ) -> Result<Var, TensorError> {
        let dh = self.config.head_dim();
        let q = self.linear(tape, b, a.q, xq)?;
        let q = tape.scale(q, 1.0 / (dh as f64).sqrt())?;
        let blocked = mask.filter(|m| !m.is_full()).map(AttentionMask::blocked);
        let mut heads = Vec::with_capacity(self.config.heads);
        for h in 0..self.config.heads {
            let (lo, hi) = (h * dh, (h + 1) * dh);
            let qh = tape.slice(q, 1, lo, hi)?;
            let kh = tape.slice(kt, 0, lo, hi)?;
            let vh = tape.slice(v, 1, lo, hi)?;
            let mut scores = tape.matmul(qh, kh)?;
            if let Some(bl) = &blocked {
                scores = tape.masked_fill(scores, Arc::clone(bl), f64::NEG_INFINITY)?;
            }
            let weights = tape.softmax(scores, 1)?;
            heads.push(tape.matmul(weights, vh)?);
        }
        let joined = tape.concat(&heads, 1)?;
        self.linear(tape, b, a.out, joined)
    }

    /// Patch embeddings of frames `frames` (projection + spatial position,
    /// plus the temporal slot unless skipped).
    pub fn embed_patches(
        &self,
        tape: &mut Tape<'_, F>,
        b: &Bound,
        input: &EncoderInput<F>,
        frames: std::ops::Range<usize>,
        with_temporal: bool,
    ) -> Result<Var, ModelError> {
        let p = self.config.patches_per_frame();
        let rows = input.pixels.shape()[0];
        let pixels = tape.constant(input.pixels.clone());
        let pixels = if frames.start == 0 && frames.end * p == rows {
            pixels
        } else {
            tape.slice(pixels, 0, frames.start * p, frames.end * p)?
        };
        let x = self.linear(tape, b, self.layout.patch, pixels)?;
        let spatial_ids: Vec<usize> = frames.clone().flat_map(|_| 0..p).collect();
        let spatial = tape.gather(b.params[self.layout.spatial], spatial_ids)?;
        let mut x = tape.add(x, spatial)?;
        if with_temporal {
            let ids: Vec<usize> = frames.flat_map(|f| std::iter::repeat_n(f, p)).collect();
            let temporal = tape.gather(b.params[self.layout.temporal], ids)?;
            x = tape.add(x, temporal)?;
        }
        Ok(x)
    }

    pub fn embed_text(&self, tape: &mut Tape<'_, F>, b: &Bound, text: &[u32]) -> Result<Var, ModelError> {
        let ids: Vec<usize> = text.iter().map(|&t| t as usize).collect();
        let tok = tape.gather(b.params[self.layout.tok_emb], ids)?;
        let pos = tape.gather(b.params[self.layout.text_pos], (0..text.len()).collect())?;
        Ok(tape.add(tok, pos)?)
    }

    /// Encoder layers and final norm over an embedded sequence.
    pub fn encode_sequence(
        &self,
        tape: &mut Tape<'_, F>,
        b: &Bound,
        mut x: Var,
        mask: Option<&AttentionMask>,
    ) -> Result<Var, ModelError> {
        for layer in &self.layout.enc {
            let h = self.ln(tape, b, layer.ln1, x)?;
            let (kt, v) = self.project_kv(tape, b, layer.attn, h)?;
            let a = self.attend(tape, b, layer.attn, h, kt, v, mask)?;
            x = tape.add(x, a)?;
            let h = self.ln(tape, b, layer.ln2, x)?;
            let f = self.ffn(tape, b, layer.ffn, h)?;
            x = tape.add(x, f)?;
        }
        Ok(self.ln(tape, b, self.layout.enc_ln, x)?)
    }

    fn embed_frame_with_text(
        &self,
        tape: &mut Tape<'_, F>,
        b: &Bound,
        input: &EncoderInput<F>,
        frame: usize,
    ) -> Result<Var, ModelError> {
        let patches = self.embed_patches(tape, b, input, frame..frame + 1, false)?;
        if input.text.is_empty() {
            return Ok(patches);
        }
        let text = self.embed_text(tape, b, &input.text)?;
        Ok(tape.concat(&[patches, text], 0)?)
    }

    /// Encoder states for one input. Full: `[T*P + L, D]`. FiD: one
    /// `[P + L, D]` block per frame, concatenated.
    pub fn encode(
        &self,
        tape: &mut Tape<'_, F>,
        b: &Bound,
        input: &EncoderInput<F>,
        opts: EncodeOptions,
    ) -> Result<Var, ModelError> {
        match self.config.variant {
            Variant::Full => {
                let patches = self.embed_patches(tape, b, input, 0..input.frames, !opts.skip_temporal)?;
                let x = if input.text.is_empty() {
                    patches
                } else {
                    let text = self.embed_text(tape, b, &input.text)?;
                    tape.concat(&[patches, text], 0)?
                };
                self.encode_sequence(tape, b, x, None)
            }
            Variant::Fid => {
                let block = self.config.patches_per_frame() + input.text.len();
                let mut outs = Vec::with_capacity(input.frames);
                for f in 0..input.frames {
                    let x = self.embed_frame_with_text(tape, b, input, f)?;
                    let mut y = self.encode_sequence(tape, b, x, None)?;
                    if self.config.fid_temporal_embeddings && !opts.skip_temporal {
                        let t = tape.gather(b.params[self.layout.temporal], vec![f; block])?;
                        y = tape.add(y, t)?;
                    }
                    outs.push(y);
                }
                if outs.len() == 1 {
                    Ok(outs[0])
                } else {
                    Ok(tape.concat(&outs, 0)?)
                }
            }
        }
    }

    /// Runs the full-attention encoder over the FiD token layout (each
    /// frame's patches followed by a copy of the text) with attention
    /// restricted to each frame's block. Temporal embeddings are not added.
    pub fn encode_block_masked(&self, tape: &mut Tape<'_, F>, b: &Bound, input: &EncoderInput<F>) -> Result<Var, ModelError> {
        let mut parts = Vec::with_capacity(input.frames);
        for f in 0..input.frames {
            parts.push(self.embed_frame_with_text(tape, b, input, f)?);
        }
        let x = if parts.len() == 1 { parts[0] } else { tape.concat(&parts, 0)? };
        let block = self.config.patches_per_frame() + input.text.len();
        let mask = AttentionMask::block_diagonal(&vec![block; input.frames]);
        self.encode_sequence(tape, b, x, Some(&mask))
    }

    pub fn memory(&self, tape: &mut Tape<'_, F>, b: &Bound, states: Var) -> Result<Memory, ModelError> {
        let cross_kv = self
            .layout
            .dec
            .iter()
            .map(|layer| self.project_kv(tape, b, layer.cross_attn, states))
            .collect::<Result<_, _>>()?;
        Ok(Memory { states, cross_kv })
    }

    /// Decoder over `tokens` at positions `start..`, with cached self-attention
    /// keys/values of earlier positions in `cache`. Returns logits `[n, V]`.
    fn decoder(
        &self,
        tape: &mut Tape<'_, F>,
        b: &Bound,
        memory: &Memory,
        tokens: &[u32],
        start: usize,
        cache: &mut Vec<(Var, Var)>,
    ) -> Result<Var, ModelError> {
        let n = tokens.len();
        if start + n > self.config.max_target_len {
            return Err(ModelError::TargetTooLong {
                got: start + n,
                max: self.config.max_target_len,
            });
        }
        self.check_ids(tokens)?;
        let ids: Vec<usize> = tokens.iter().map(|&t| t as usize).collect();
        let tok = tape.gather(b.params[self.layout.tok_emb], ids)?;
        let pos = tape.gather(b.params[self.layout.dec_pos], (start..start + n).collect())?;
        let mut x = tape.add(tok, pos)?;
        let mask = AttentionMask::causal(n, start);
        let fresh = cache.is_empty();
        for (i, layer) in self.layout.dec.iter().enumerate() {
            let h = self.ln(tape, b, layer.ln1, x)?;
            let (kt_new, v_new) = self.project_kv(tape, b, layer.self_attn, h)?;
            let (kt, v) = if fresh {
                (kt_new, v_new)
            } else {
                let (kt_old, v_old) = cache[i];
                (tape.concat(&[kt_old, kt_new], 1)?, tape.concat(&[v_old, v_new], 0)?)
            };
            if fresh {
                cache.push((kt, v));
            } else {
                cache[i] = (kt, v);
            }
            let a = self.attend(tape, b, layer.self_attn, h, kt, v, Some(&mask))?;
            x = tape.add(x, a)?;
            let h = self.ln(tape, b, layer.ln2, x)?;
            let (ckt, cv) = memory.cross_kv[i];
            let a = self.attend(tape, b, layer.cross_attn, h, ckt, cv, None)?;
            x = tape.add(x, a)?;
            let h = self.ln(tape, b, layer.ln3, x)?;
            let f = self.ffn(tape, b, layer.ffn, h)?;
            x = tape.add(x, f)?;
        }
        let x = self.ln(tape, b, self.layout.dec_ln, x)?;
        let logits = match self.layout.head {
            Some(head) => tape.matmul(x, b.params[head])?,
            None => {
                let table = tape.transpose(b.params[self.layout.tok_emb])?;
                tape.matmul(x, table)?
            }
        };
        Ok(logits)
    }

    /// Logits `[n - 1, V]` for `target[1..]` given `target[..n - 1]`.
    pub fn decode_teacher_forced(
        &self,
        tape: &mut Tape<'_, F>,
        b: &Bound,
        memory: &Memory,
        target: &[u32],
    ) -> Result<Var, ModelError> {
        if target.len() < 2 {
            return Err(ModelError::BadTarget);
        }
        self.decoder(tape, b, memory, &target[..target.len() - 1], 0, &mut Vec::new())
    }

    /// Encoder input of a training sample.
    pub fn sample_input(&self, sample: &Seq2SeqSample) -> Result<EncoderInput<F>, ModelError> {
        self.encoder_input(&sample.frames, &sample.source_tokens)
    }

    pub fn forward_teacher_forced(&self, tape: &mut Tape<'_, F>, b: &Bound, sample: &Seq2SeqSample) -> Result<Var, ModelError> {
        let input = self.sample_input(sample)?;
        let states = self.encode(tape, b, &input, EncodeOptions::default())?;
        let memory = self.memory(tape, b, states)?;
        self.decode_teacher_forced(tape, b, &memory, &sample.target_tokens)
    }

    /// Cross-entropy of the sample's target, PAD ignored. Returns the loss
    /// node and the number of scored tokens.
    pub fn sample_loss(
        &self,
        tape: &mut Tape<'_, F>,
        b: &Bound,
        sample: &Seq2SeqSample,
        reduction: CeReduction,
    ) -> Result<(Var, usize), ModelError> {
        let logits = self.forward_teacher_forced(tape, b, sample)?;
        let labels: Vec<usize> = sample.target_tokens[1..].iter().map(|&t| t as usize).collect();
        let n = labels.iter().filter(|&&l| l != PAD as usize).count();
        let loss = tape.cross_entropy(logits, labels, Some(PAD as usize), reduction)?;
        Ok((loss, n))
    }
}
