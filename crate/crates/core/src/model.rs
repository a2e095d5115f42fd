//! The full speech-LLM: two encoders, a fusion block, a projector and the
//! decoder.

use serde::{Deserialize, Serialize};

use crate::data::SyntheticUtterance;
use crate::decoder::{DecoderLm, LmConfig};
use crate::encoder::ToyEncoder;
use crate::error::{Error, Result};
use crate::fusion::{align_vars, fuse, init_fusion, FusionParams, StreamChoice};
use crate::params::{Graph, Group, GroupSet, ParamStore};
use crate::projector::{ConvStage, LinearProjector, LinearProjectorConfig, Projector, QFormerConfig, QFormerProjector};
use crate::repetition::{remove_ngram_repetitions, DEFAULT_NGRAM};
use crate::tape::Var;
use crate::tensor::Tensor;

/// Projector choice as written in experiment configs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum ProjectorSpec {
    Linear {
        conv_layers: Vec<ConvStage>,
        mlp_hidden: usize,
    },
    Qformer {
        window: usize,
        queries_per_window: usize,
        layers: usize,
        heads: usize,
    },
}

impl Default for ProjectorSpec {
    fn default() -> Self {
        ProjectorSpec::Linear {
            conv_layers: vec![ConvStage { kernel: 3, stride: 2 }],
            mlp_hidden: 128,
        }
    }
}

impl ProjectorSpec {
    pub fn key(&self) -> &'static str {
        match self {
            ProjectorSpec::Linear { .. } => "linear",
            ProjectorSpec::Qformer { .. } => "qformer",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub d_whisper: usize,
    pub d_mhubert: usize,
    pub encoder_heads: usize,
    pub encoder_blocks: usize,
    pub encoder_lora_rank: usize,
    pub encoder_lora_alpha: f64,
    pub fusion_heads: usize,
    pub lm: LmConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d_whisper: 64,
            d_mhubert: 48,
            encoder_heads: 4,
            encoder_blocks: 1,
            encoder_lora_rank: 4,
            encoder_lora_alpha: 8.0,
            fusion_heads: 4,
            lm: LmConfig::default(),
        }
    }
}

// Fixed per-component seed offsets, so that the encoders and the decoder
// come out identical whatever fusion or projector is chosen.
const WHISPER_SEED: u64 = 11;
const WHISPER_LORA_SEED: u64 = 12;
const MHUBERT_SEED: u64 = 13;
const FUSION_SEED: u64 = 21;
const PROJECTOR_SEED: u64 = 31;
const LM_SEED: u64 = 41;
const LM_LORA_SEED: u64 = 42;

#[derive(Clone, Debug, PartialEq)]
pub struct SpeechLlm {
    pub cfg: ModelConfig,
    pub projector_spec: ProjectorSpec,
    pub streams: StreamChoice,
    pub whisper: ToyEncoder,
    pub mhubert: ToyEncoder,
    pub fusion: Option<FusionParams>,
    pub projector: Projector,
    pub lm: DecoderLm,
}

/// Encoder outputs of one utterance.
#[derive(Clone, Debug, PartialEq)]
pub struct Encoded {
    pub hw: Tensor,
    pub hm: Tensor,
}

impl SpeechLlm {
    pub fn build(
        store: &mut ParamStore,
        cfg: &ModelConfig,
        projector: &ProjectorSpec,
        d_raw: usize,
        streams: StreamChoice,
        seed: u64,
    ) -> Result<Self> {
        let projector_spec = projector.clone();
        let s = |offset: u64| seed.wrapping_mul(1000).wrapping_add(offset);
        let mut whisper = ToyEncoder::new(store, "whisper", d_raw, cfg.d_whisper, cfg.encoder_heads, cfg.encoder_blocks, s(WHISPER_SEED))?;
        whisper.attach_lora(store, cfg.encoder_lora_rank, cfg.encoder_lora_alpha, s(WHISPER_LORA_SEED))?;
        let mhubert = ToyEncoder::new(store, "mhubert", d_raw, cfg.d_mhubert, cfg.encoder_heads, cfg.encoder_blocks, s(MHUBERT_SEED))?;
        let fusion = match streams {
            StreamChoice::Fused(m) => Some(init_fusion(store, m, cfg.d_whisper, cfg.d_mhubert, cfg.fusion_heads, s(FUSION_SEED))?),
            _ => None,
        };
        let d_in = streams.output_dim(cfg.d_whisper, cfg.d_mhubert);
        let d_llm = cfg.lm.d_model;
        let projector = match projector {
            ProjectorSpec::Linear { conv_layers, mlp_hidden } => Projector::Linear(LinearProjector::new(
                store,
                LinearProjectorConfig {
                    conv_layers: conv_layers.clone(),
                    mlp_hidden: *mlp_hidden,
                    d_in,
                    d_llm,
                },
                s(PROJECTOR_SEED),
            )?),
            ProjectorSpec::Qformer {
                window,
                queries_per_window,
                layers,
                heads,
            } => Projector::QFormer(QFormerProjector::new(
                store,
                QFormerConfig {
                    window: *window,
                    queries_per_window: *queries_per_window,
                    layers: *layers,
                    heads: *heads,
                    d_in,
                    d_llm,
                },
                s(PROJECTOR_SEED),
            )?),
        };
        let mut lm = DecoderLm::new(store, cfg.lm.clone(), s(LM_SEED))?;
        lm.attach_lora(store, s(LM_LORA_SEED))?;
        Ok(SpeechLlm {
            cfg: cfg.clone(),
            projector_spec,
            streams,
            whisper,
            mhubert,
            fusion,
            projector,
            lm,
        })
    }

    pub fn encode(&self, store: &ParamStore, u: &SyntheticUtterance) -> Result<Encoded> {
        Ok(Encoded {
            hw: self.whisper.encode_tensor(store, &u.view_w)?,
            hm: self.mhubert.encode_tensor(store, &u.view_m)?,
        })
    }

    /// Speech embeddings (`S × d_llm`). Encoder outputs come from `cached`
    /// when given, otherwise the encoders run on the graph.
    pub fn speech_embeddings(&self, g: &mut Graph, u: &SyntheticUtterance, cached: Option<&Encoded>) -> Result<Var> {
        let (hw, hm) = match cached {
            Some(e) => (g.input(e.hw.clone()), g.input(e.hm.clone())),
            None => {
                let xw = g.input(u.view_w.clone());
                let xm = g.input(u.view_m.clone());
                (self.whisper.encode(g, xw)?, self.mhubert.encode(g, xm)?)
            }
        };
        let fused = match (self.streams, &self.fusion) {
            (StreamChoice::Fused(_), Some(p)) => {
                let (hw, hm) = align_vars(g, hw, hm)?;
                fuse(g, hw, hm, p)?
            }
            (StreamChoice::WhisperOnly, _) => hw,
            (StreamChoice::MhubertOnly, _) => hm,
            (StreamChoice::Fused(m), None) => {
                return Err(Error::MissingParam {
                    mechanism: m.key(),
                    param: "fusion",
                })
            }
        };
        self.projector.forward(g, fused)
    }

    /// Teacher-forced transcript cross-entropy for one utterance.
    pub fn utterance_loss(&self, g: &mut Graph, u: &SyntheticUtterance, cached: Option<&Encoded>) -> Result<Var> {
        let speech = self.speech_embeddings(g, u, cached)?;
        let ids: Vec<usize> = u.tokens.iter().map(|&t| DecoderLm::content_id(t)).collect();
        self.lm.transcript_loss(g, speech, &ids)
    }

    /// Greedy transcript as symbol indices, special tokens dropped and
    /// repeated 5-token blocks removed.
    pub fn transcribe(&self, store: &ParamStore, u: &SyntheticUtterance, cached: Option<&Encoded>, max_new: usize) -> Result<Vec<usize>> {
        let mut g = Graph::frozen(store);
        let speech = self.speech_embeddings(&mut g, u, cached)?;
        let speech = g.tape().value(speech).clone();
        drop(g);
        let ids = self.lm.greedy_decode(store, &speech, max_new)?;
        let symbols: Vec<usize> = ids.into_iter().filter_map(DecoderLm::symbol_of).collect();
        Ok(remove_ngram_repetitions(&symbols, DEFAULT_NGRAM))
    }

    /// Groups whose parameters feed [`Self::speech_embeddings`] through the
    /// encoders; when none of them is trained the encoder outputs can be cached.
    pub fn encoder_groups() -> GroupSet {
        GroupSet::from([Group::Encoder, Group::EncoderLora])
    }
}
