//! Mapping fused speech features into the decoder's embedding space.
//!
//! Two options: strided 1-D convolutions followed by a per-frame MLP, or a
//! windowed Q-Former where a few learnable queries summarise each window.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{cross_attention, init_attention, AttentionParams};
use crate::error::{Error, Result};
use crate::layers::{Linear, Mlp};
use crate::params::{Graph, Group, ParamId, ParamStore};
use crate::tape::Var;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConvStage {
    pub kernel: usize,
    pub stride: usize,
}

impl ConvStage {
    pub fn out_len(self, len: usize) -> Option<usize> {
        (len >= self.kernel).then(|| (len - self.kernel) / self.stride + 1)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinearProjectorConfig {
    pub conv_layers: Vec<ConvStage>,
    pub mlp_hidden: usize,
    pub d_in: usize,
    pub d_llm: usize,
}

impl LinearProjectorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.conv_layers.iter().any(|s| s.kernel == 0 || s.stride == 0) {
            return Err(Error::Config("conv kernel and stride must be positive".into()));
        }
        if self.mlp_hidden == 0 || self.d_in == 0 || self.d_llm == 0 {
            return Err(Error::Config("projector dimensions must be positive".into()));
        }
        Ok(())
    }

    pub fn downsampling(&self) -> usize {
        self.conv_layers.iter().map(|s| s.stride).product()
    }

    /// Output length, or `None` when some stage would be empty.
    pub fn output_len(&self, len: usize) -> Option<usize> {
        self.conv_layers.iter().try_fold(len, |l, s| s.out_len(l))
    }

    /// Shortest input for which every stage yields at least one frame.
    pub fn min_input_len(&self) -> usize {
        self.conv_layers
            .iter()
            .rev()
            .fold(1, |need, s| (need - 1) * s.stride + s.kernel)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QFormerConfig {
    pub window: usize,
    pub queries_per_window: usize,
    pub layers: usize,
    pub heads: usize,
    pub d_in: usize,
    pub d_llm: usize,
}

impl QFormerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.window == 0 || self.queries_per_window == 0 || self.layers == 0 {
            return Err(Error::Config("Q-Former window, queries and layers must be positive".into()));
        }
        if self.heads == 0 || !self.d_llm.is_multiple_of(self.heads) {
            return Err(Error::HeadDivisibility {
                d_model: self.d_llm,
                heads: self.heads,
            });
        }
        Ok(())
    }

    pub fn output_len(&self, len: usize) -> usize {
        len.div_ceil(self.window) * self.queries_per_window
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LinearProjector {
    pub cfg: LinearProjectorConfig,
    /// One `(kernel·d_in) × d_in` kernel plus bias per stage.
    pub convs: Vec<Linear>,
    pub mlp: Mlp,
}

impl LinearProjector {
    pub fn new(store: &mut ParamStore, cfg: LinearProjectorConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = cfg.d_in;
        let convs = cfg
            .conv_layers
            .iter()
            .enumerate()
            .map(|(i, s)| {
                Linear::new(store, &format!("projector.conv{i}"), Group::Projector, s.kernel * d, d, true, &mut rng)
            })
            .collect();
        let mlp = Mlp::new(store, "projector.mlp", Group::Projector, d, cfg.mlp_hidden, cfg.d_llm, &mut rng);
        Ok(LinearProjector { cfg, convs, mlp })
    }

    pub fn forward(&self, g: &mut Graph, seq: Var) -> Result<Var> {
        let t = g.value(seq).rows();
        if self.cfg.output_len(t).is_none() {
            return Err(Error::InputTooShort {
                required: self.cfg.min_input_len(),
                got: t,
            });
        }
        let mut x = seq;
        for (i, (stage, conv)) in self.cfg.conv_layers.iter().zip(&self.convs).enumerate() {
            if i > 0 {
                x = g.gelu(x);
            }
            let windows = g.unfold_time(x, stage.kernel, stage.stride)?;
            x = conv.forward(g, windows)?;
        }
        self.mlp.forward(g, x)
    }

    pub fn ids(&self) -> Vec<ParamId> {
        let mut ids: Vec<ParamId> = self.convs.iter().flat_map(Linear::ids).collect();
        ids.extend(self.mlp.ids());
        ids
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct QFormerLayer {
    pub attn: AttentionParams,
    pub mlp: Mlp,
}

#[derive(Clone, Debug, PartialEq)]
pub struct QFormerProjector {
    pub cfg: QFormerConfig,
    /// `queries_per_window × d_llm`
    pub queries: ParamId,
    pub layers: Vec<QFormerLayer>,
}

impl QFormerProjector {
    pub fn new(store: &mut ParamStore, cfg: QFormerConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let queries = store.add(
            "projector.queries",
            Group::Projector,
            Tensor::normal(&[cfg.queries_per_window, cfg.d_llm], 1.0, &mut rng),
            false,
        );
        let mut layers = Vec::with_capacity(cfg.layers);
        for i in 0..cfg.layers {
            let name = format!("projector.layer{i}");
            let attn = init_attention(
                store,
                &format!("{name}.attn"),
                Group::Projector,
                cfg.d_llm,
                cfg.d_in,
                cfg.d_llm,
                cfg.heads,
                rng.gen(),
            )?;
            let mlp = Mlp::new(store, &format!("{name}.mlp"), Group::Projector, cfg.d_llm, 2 * cfg.d_llm, cfg.d_llm, &mut rng);
            layers.push(QFormerLayer { attn, mlp });
        }
        Ok(QFormerProjector { cfg, queries, layers })
    }

    pub fn forward(&self, g: &mut Graph, seq: Var) -> Result<Var> {
        let t = g.value(seq).rows();
        if t == 0 {
            return Err(Error::InputTooShort { required: 1, got: 0 });
        }
        let queries = g.param(self.queries);
        let mut outputs = Vec::with_capacity(t.div_ceil(self.cfg.window));
        let mut start = 0;
        while start < t {
            let end = (start + self.cfg.window).min(t);
            let window = if start == 0 && end == t { seq } else { g.slice_rows(seq, start, end)? };
            let mut q = queries;
            for layer in &self.layers {
                let attended = cross_attention(g, q, window, &layer.attn)?;
                q = g.add(q, attended)?;
                let m = layer.mlp.forward(g, q)?;
                q = g.add(q, m)?;
            }
            outputs.push(q);
            start = end;
        }
        if outputs.len() == 1 {
            Ok(outputs[0])
        } else {
            g.concat_rows(&outputs)
        }
    }

    pub fn ids(&self) -> Vec<ParamId> {
        let mut ids = vec![self.queries];
        for l in &self.layers {
            ids.extend(l.attn.weight_ids());
            ids.extend(l.mlp.ids());
        }
        ids
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Projector {
    Linear(LinearProjector),
    QFormer(QFormerProjector),
}

impl Projector {
    pub fn forward(&self, g: &mut Graph, seq: Var) -> Result<Var> {
        match self {
            Projector::Linear(p) => p.forward(g, seq),
            Projector::QFormer(p) => p.forward(g, seq),
        }
    }

    pub fn output_len(&self, len: usize) -> Option<usize> {
        match self {
            Projector::Linear(p) => p.cfg.output_len(len),
            Projector::QFormer(p) => (len > 0).then(|| p.cfg.output_len(len)),
        }
    }

    pub fn min_input_len(&self) -> usize {
        match self {
            Projector::Linear(p) => p.cfg.min_input_len(),
            Projector::QFormer(_) => 1,
        }
    }

    pub fn ids(&self) -> Vec<ParamId> {
        match self {
            Projector::Linear(p) => p.ids(),
            Projector::QFormer(p) => p.ids(),
        }
    }
}

/// Runs a projector without tracking gradients.
pub fn project_tensor(store: &ParamStore, projector: &Projector, seq: &Tensor) -> Result<Tensor> {
    let mut g = Graph::frozen(store);
    let x = g.input(seq.clone());
    let y = projector.forward(&mut g, x)?;
    Ok(g.value(y).clone())
}
