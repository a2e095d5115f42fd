//! A small causal transformer decoder that reads projected speech
//! embeddings as a prefix and writes the transcript.
//!
//! The input sequence is `[speech prefix | text]`. Both segments use their
//! own positions starting at 0 from a shared learned table, plus a learned
//! segment embedding. Attention is causal over the whole sequence, so text
//! sees all of the prefix.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::attention::{causal_self_attention, init_attention, AttentionParams};
use crate::error::{Error, Result};
use crate::layers::{Linear, Mlp, RmsNorm};
use crate::params::{Graph, Group, GroupSet, ParamId, ParamStore};
use crate::tape::Var;
use crate::tensor::Tensor;
use crate::train::{adam_step, clip_global_norm, lr_at, AdamConfig, OptimizerState};

pub const BOS: usize = 0;
pub const EOS: usize = 1;
/// Marks the start of the transcript after the speech prefix.
pub const SEP: usize = 2;
/// First id used for content tokens.
pub const FIRST_CONTENT: usize = 3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LmConfig {
    pub vocab: usize,
    pub d_model: usize,
    pub layers: usize,
    pub heads: usize,
    pub mlp_hidden: usize,
    pub max_len: usize,
    pub lora_rank: usize,
    pub lora_alpha: f64,
}

impl Default for LmConfig {
    fn default() -> Self {
        LmConfig {
            vocab: 64,
            d_model: 96,
            layers: 2,
            heads: 4,
            mlp_hidden: 192,
            max_len: 64,
            lora_rank: 4,
            lora_alpha: 8.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecoderLayer {
    pub norm1: RmsNorm,
    pub attn: AttentionParams,
    pub norm2: RmsNorm,
    pub mlp: Mlp,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecoderLm {
    pub cfg: LmConfig,
    /// `vocab × d_model`
    pub tok_emb: ParamId,
    /// `max_len × d_model`
    pub pos_emb: ParamId,
    /// `2 × d_model`: row 0 speech, row 1 text.
    pub seg_emb: ParamId,
    pub layers: Vec<DecoderLayer>,
    pub final_norm: RmsNorm,
    pub head: Linear,
}

impl DecoderLm {
    pub fn new(store: &mut ParamStore, cfg: LmConfig, seed: u64) -> Result<Self> {
        if cfg.vocab <= FIRST_CONTENT {
            return Err(Error::Config(format!("vocab must exceed {FIRST_CONTENT}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = cfg.d_model;
        let tok_emb = store.add("lm.tok_emb", Group::Lm, Tensor::normal(&[cfg.vocab, d], 1.0, &mut rng), false);
        let pos_emb = store.add("lm.pos_emb", Group::Lm, Tensor::normal(&[cfg.max_len, d], 0.5, &mut rng), false);
        let seg_emb = store.add("lm.seg_emb", Group::Lm, Tensor::normal(&[2, d], 0.5, &mut rng), false);
        let mut layers = Vec::with_capacity(cfg.layers);
        for i in 0..cfg.layers {
            let name = format!("lm.layer{i}");
            layers.push(DecoderLayer {
                norm1: RmsNorm::new(store, &format!("{name}.norm1"), Group::Lm, d),
                attn: init_attention(store, &format!("{name}.attn"), Group::Lm, d, d, d, cfg.heads, rng.gen())?,
                norm2: RmsNorm::new(store, &format!("{name}.norm2"), Group::Lm, d),
                mlp: Mlp::new(store, &format!("{name}.mlp"), Group::Lm, d, cfg.mlp_hidden, d, &mut rng),
            });
        }
        let final_norm = RmsNorm::new(store, "lm.final_norm", Group::Lm, d);
        let head = Linear::new(store, "lm.head", Group::Lm, d, cfg.vocab, true, &mut rng);
        Ok(DecoderLm {
            cfg,
            tok_emb,
            pos_emb,
            seg_emb,
            layers,
            final_norm,
            head,
        })
    }

    /// Zero-initialised LoRA on every layer's query and value projections.
    pub fn attach_lora(&mut self, store: &mut ParamStore, seed: u64) -> Result<()> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (rank, alpha) = (self.cfg.lora_rank, self.cfg.lora_alpha);
        for (i, l) in self.layers.iter_mut().enumerate() {
            l.attn.attach_lora(store, &format!("lm.layer{i}"), Group::LmLora, rank, alpha, rng.gen())?;
        }
        Ok(())
    }

    pub fn content_id(symbol: usize) -> usize {
        FIRST_CONTENT + symbol
    }

    /// Symbol index for a content id, `None` for special tokens.
    pub fn symbol_of(id: usize) -> Option<usize> {
        id.checked_sub(FIRST_CONTENT)
    }

    /// Logits (`L × vocab`) at the text positions. `speech` is `S × d_model`
    /// or absent for a plain language-model pass.
    pub fn forward(&self, g: &mut Graph, speech: Option<Var>, text: &[usize]) -> Result<Var> {
        let d = self.cfg.d_model;
        let s = match speech {
            Some(v) => {
                let t = g.value(v);
                if !t.is_matrix() || t.cols() != d {
                    return Err(Error::shape("lm_forward speech prefix", t.shape(), &[t.shape()[0], d]));
                }
                t.rows()
            }
            None => 0,
        };
        if text.is_empty() {
            return Err(Error::Empty("text input"));
        }
        let len = s + text.len();
        if len > self.cfg.max_len {
            return Err(Error::ContextOverflow {
                len,
                max: self.cfg.max_len,
            });
        }
        if let Some(&bad) = text.iter().find(|&&t| t >= self.cfg.vocab) {
            return Err(Error::IndexOutOfRange {
                index: bad,
                bound: self.cfg.vocab,
            });
        }
        let pos = g.param(self.pos_emb);
        let seg = g.param(self.seg_emb);
        let tok = g.param(self.tok_emb);

        let text_pos: Vec<usize> = (0..text.len()).collect();
        let x_text = g.gather_rows(tok, text)?;
        let p_text = g.gather_rows(pos, &text_pos)?;
        let seg_text = g.slice_rows(seg, 1, 2)?;
        let x_text = g.add(x_text, p_text)?;
        let x_text = g.add_row(x_text, seg_text)?;
        let mut h = match speech {
            Some(v) => {
                let speech_pos: Vec<usize> = (0..s).collect();
                let p_speech = g.gather_rows(pos, &speech_pos)?;
                let seg_speech = g.slice_rows(seg, 0, 1)?;
                let x_speech = g.add(v, p_speech)?;
                let x_speech = g.add_row(x_speech, seg_speech)?;
                g.concat_rows(&[x_speech, x_text])?
            }
            None => x_text,
        };
        for layer in &self.layers {
            let n = layer.norm1.forward(g, h)?;
            let a = causal_self_attention(g, n, &layer.attn)?;
            h = g.add(h, a)?;
            let n = layer.norm2.forward(g, h)?;
            let m = layer.mlp.forward(g, n)?;
            h = g.add(h, m)?;
        }
        let h_text = if s > 0 { g.slice_rows(h, s, len)? } else { h };
        let n = self.final_norm.forward(g, h_text)?;
        self.head.forward(g, n)
    }

    /// Appends the argmax token (lowest index on ties) until `EOS` or
    /// `max_new` tokens. The returned list excludes the `EOS`.
    pub fn greedy_decode(&self, store: &ParamStore, speech: &Tensor, max_new: usize) -> Result<Vec<usize>> {
        let mut input = vec![SEP];
        let mut out = Vec::new();
        let budget = max_new.min(self.cfg.max_len.saturating_sub(speech.rows()));
        while out.len() < budget {
            let mut g = Graph::frozen(store);
            let sv = (speech.rows() > 0).then(|| g.input(speech.clone()));
            let logits = self.forward(&mut g, sv, &input)?;
            let lv = g.value(logits);
            let next = lv.argmax_row(lv.rows() - 1);
            if next == EOS {
                break;
            }
            out.push(next);
            input.push(next);
        }
        Ok(out)
    }

    /// Teacher-forced loss for transcript `ids`: input `[SEP, ids…]`,
    /// targets `[ids…, EOS]`.
    pub fn transcript_loss(&self, g: &mut Graph, speech: Var, ids: &[usize]) -> Result<Var> {
        let mut input = Vec::with_capacity(ids.len() + 1);
        input.push(SEP);
        input.extend_from_slice(ids);
        let mut targets = ids.to_vec();
        targets.push(EOS);
        let logits = self.forward(g, Some(speech), &input)?;
        g.cross_entropy(logits, &targets)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LmPretrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    /// Gaussian noise added to the prefix embeddings.
    pub noise: f64,
    pub min_tokens: usize,
    pub max_tokens: usize,
}

impl Default for LmPretrainConfig {
    fn default() -> Self {
        LmPretrainConfig {
            steps: 300,
            batch_size: 8,
            adam: AdamConfig {
                peak_lr: 3e-3,
                warmup_steps: 50,
                ..AdamConfig::default()
            },
            noise: 0.3,
            min_tokens: 3,
            max_tokens: 12,
        }
    }
}

/// Teaches the base decoder to transcribe a prefix of (noisy) token
/// embeddings followed by one or two end rows: the speech prefix the
/// projector will later learn to imitate. Returns the loss of each step.
pub fn pretrain_lm(store: &mut ParamStore, lm: &DecoderLm, cfg: &LmPretrainConfig, seed: u64) -> Result<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, cfg.noise).map_err(|e| Error::Config(e.to_string()))?;
    let trainable = GroupSet::from([Group::Lm]);
    let mut state = OptimizerState::new();
    let mut losses = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let mut g = Graph::new(store, trainable.clone());
        let tok = g.param(lm.tok_emb);
        let mut parts = Vec::with_capacity(cfg.batch_size);
        for _ in 0..cfg.batch_size {
            let n = rng.gen_range(cfg.min_tokens..=cfg.max_tokens);
            let ids: Vec<usize> = (0..n).map(|_| rng.gen_range(FIRST_CONTENT..lm.cfg.vocab)).collect();
            let mut prefix_ids = ids.clone();
            let eos_count = rng.gen_range(1..=2);
            prefix_ids.extend(std::iter::repeat_n(EOS, eos_count));
            let rows = g.gather_rows(tok, &prefix_ids)?;
            let mut jitter = Tensor::zeros(&[prefix_ids.len(), lm.cfg.d_model]);
            jitter.data_mut().iter_mut().for_each(|v| *v = noise.sample(&mut rng));
            let jitter = g.input(jitter);
            let speech = g.add(rows, jitter)?;
            parts.push(lm.transcript_loss(&mut g, speech, &ids)?);
        }
        let loss = g.mean_of(&parts)?;
        let value = g.value(loss).item();
        if !value.is_finite() {
            return Err(Error::Diverged {
                stage: "lm pretraining".into(),
                epoch: step,
            });
        }
        let mut grads = g.param_grads(loss)?;
        drop(g);
        clip_global_norm(&mut grads, cfg.adam.clip_norm)?;
        let lr = lr_at(step + 1, cfg.adam.warmup_steps, cfg.steps, cfg.adam.peak_lr);
        adam_step(store, &grads, &mut state, lr, &cfg.adam)?;
        losses.push(value);
    }
    Ok(losses)
}
