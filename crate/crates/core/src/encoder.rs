//! Toy speech encoders and their CTC pre-adaptation.
//!
//! An encoder is an input projection plus fixed sinusoidal positions,
//! followed by residual self-attention blocks whose query and value
//! projections can carry LoRA adapters.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{cross_attention, init_attention, AttentionParams};
use crate::data::SyntheticUtterance;
use crate::error::{Error, Result};
use crate::layers::{sinusoidal_positions, Linear};
use crate::losses::CtcTarget;
use crate::params::{Graph, Group, GroupSet, ParamId, ParamStore};
use crate::tape::Var;
use crate::tensor::Tensor;
use crate::train::{adam_step, clip_global_norm, lr_at, make_batches, AdamConfig, OptimizerState};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum View {
    Whisper,
    Mhubert,
}

impl View {
    pub fn of(self, u: &SyntheticUtterance) -> &Tensor {
        match self {
            View::Whisper => &u.view_w,
            View::Mhubert => &u.view_m,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ToyEncoder {
    pub name: String,
    pub d_in: usize,
    pub d_out: usize,
    pub input: Linear,
    pub blocks: Vec<AttentionParams>,
}

impl ToyEncoder {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        d_in: usize,
        d_out: usize,
        heads: usize,
        blocks: usize,
        seed: u64,
    ) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let input = Linear::new(store, &format!("{name}.input"), Group::Encoder, d_in, d_out, true, &mut rng);
        let blocks = (0..blocks)
            .map(|i| {
                init_attention(
                    store,
                    &format!("{name}.block{i}"),
                    Group::Encoder,
                    d_out,
                    d_out,
                    d_out,
                    heads,
                    rng.gen(),
                )
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(ToyEncoder {
            name: name.to_string(),
            d_in,
            d_out,
            input,
            blocks,
        })
    }

    /// Adds zero-initialised LoRA adapters to every block's query and value
    /// projections, in the `EncoderLora` group.
    pub fn attach_lora(&mut self, store: &mut ParamStore, rank: usize, alpha: f64, seed: u64) -> Result<()> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.attach_lora(store, &format!("{}.block{i}", self.name), Group::EncoderLora, rank, alpha, rng.gen())?;
        }
        Ok(())
    }

    pub fn lora_ids(&self) -> Vec<ParamId> {
        self.blocks
            .iter()
            .flat_map(|b| [&b.lora_q, &b.lora_v])
            .flatten()
            .flat_map(|l| [l.a, l.b])
            .collect()
    }

    /// `T × d_in` to `T × d_out`.
    pub fn encode(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let xv = g.value(x);
        if !xv.is_matrix() || xv.cols() != self.d_in {
            return Err(Error::shape("encode", xv.shape(), &[xv.shape()[0], self.d_in]));
        }
        let t = xv.rows();
        let h = self.input.forward(g, x)?;
        let pos = g.input(sinusoidal_positions(t, self.d_out));
        let mut h = g.add(h, pos)?;
        for block in &self.blocks {
            let a = cross_attention(g, h, h, block)?;
            h = g.add(h, a)?;
        }
        Ok(h)
    }

    pub fn encode_tensor(&self, store: &ParamStore, x: &Tensor) -> Result<Tensor> {
        let mut g = Graph::frozen(store);
        let xv = g.input(x.clone());
        let h = self.encode(&mut g, xv)?;
        Ok(g.value(h).clone())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CtcPretrainConfig {
    pub epochs: usize,
    pub adam: AdamConfig,
    pub max_batch_seconds: f64,
}

impl Default for CtcPretrainConfig {
    fn default() -> Self {
        CtcPretrainConfig {
            epochs: 5,
            adam: AdamConfig {
                peak_lr: 2e-3,
                warmup_steps: 20,
                ..AdamConfig::default()
            },
            max_batch_seconds: 120.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainReport {
    /// Mean CTC loss over the data before training and after each epoch.
    pub epoch_losses: Vec<f64>,
    pub stopped_early: bool,
}

fn ctc_targets(data: &[SyntheticUtterance]) -> Result<Vec<CtcTarget>> {
    // Label 0 is the blank, so symbol k becomes label k + 1.
    data.iter()
        .map(|u| CtcTarget::new(u.tokens.iter().map(|&t| t + 1).collect()))
        .collect()
}

fn utterance_ctc(g: &mut Graph, enc: &ToyEncoder, head: &Linear, x: &Tensor, target: &CtcTarget) -> Result<Var> {
    let xv = g.input(x.clone());
    let h = enc.encode(g, xv)?;
    let logits = head.forward(g, h)?;
    let lp = g.log_softmax_rows(logits)?;
    g.ctc_loss(lp, target)
}

fn mean_ctc(store: &ParamStore, enc: &ToyEncoder, head: &Linear, inputs: &[&Tensor], targets: &[CtcTarget]) -> Result<f64> {
    let mut total = 0.0;
    for (x, t) in inputs.iter().zip(targets) {
        let mut g = Graph::frozen(store);
        let l = utterance_ctc(&mut g, enc, head, x, t)?;
        total += g.value(l).item();
    }
    Ok(total / inputs.len() as f64)
}

/// Trains `trainable` encoder groups together with a temporary CTC head on
/// one view of `data`. The head is discarded afterwards. Training stops
/// early, keeping the previous parameters, as soon as an epoch raises the
/// mean loss.
#[allow(clippy::too_many_arguments)]
pub fn pretrain_ctc_encoder(
    store: &mut ParamStore,
    enc: &ToyEncoder,
    view: View,
    data: &[SyntheticUtterance],
    symbols: usize,
    trainable: &GroupSet,
    cfg: &CtcPretrainConfig,
    seed: u64,
) -> Result<PretrainReport> {
    if data.is_empty() {
        return Err(Error::Empty("encoder pretraining data"));
    }
    for g in trainable {
        if !matches!(g, Group::Encoder | Group::EncoderLora) {
            return Err(Error::Invalid(format!("group {g} is not an encoder group")));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut scratch = store.clone();
    let head = Linear::new(
        &mut scratch,
        &format!("{}.ctc_head", enc.name),
        Group::Head,
        enc.d_out,
        symbols + 1,
        true,
        &mut rng,
    );
    let mut groups = trainable.clone();
    groups.insert(Group::Head);

    let inputs: Vec<&Tensor> = data.iter().map(|u| view.of(u)).collect();
    let targets = ctc_targets(data)?;
    let durations: Vec<f64> = data.iter().map(|u| u.duration_s).collect();
    let batches_per_epoch = make_batches(&durations, cfg.max_batch_seconds, 0)?.len();
    let total_steps = batches_per_epoch * cfg.epochs;

    let mut losses = vec![mean_ctc(&scratch, enc, &head, &inputs, &targets)?];
    let mut state = OptimizerState::new();
    let mut stopped_early = false;
    for epoch in 0..cfg.epochs {
        let before = scratch.clone();
        for batch in make_batches(&durations, cfg.max_batch_seconds, rng.gen())? {
            let mut g = Graph::new(&scratch, groups.clone());
            let mut parts = Vec::with_capacity(batch.len());
            for &i in &batch {
                parts.push(utterance_ctc(&mut g, enc, &head, inputs[i], &targets[i])?);
            }
            let loss = g.mean_of(&parts)?;
            if !g.value(loss).item().is_finite() {
                return Err(Error::Diverged {
                    stage: format!("{} ctc", enc.name),
                    epoch,
                });
            }
            let mut grads = g.param_grads(loss)?;
            drop(g);
            clip_global_norm(&mut grads, cfg.adam.clip_norm)?;
            let lr = lr_at(state.step + 1, cfg.adam.warmup_steps, total_steps, cfg.adam.peak_lr);
            adam_step(&mut scratch, &grads, &mut state, lr, &cfg.adam)?;
        }
        let loss = mean_ctc(&scratch, enc, &head, &inputs, &targets)?;
        if !loss.is_finite() {
            return Err(Error::Diverged {
                stage: format!("{} ctc", enc.name),
                epoch,
            });
        }
        if loss > *losses.last().expect("initial loss") {
            scratch = before;
            stopped_early = true;
            break;
        }
        losses.push(loss);
    }
    store.load_matching(&scratch)?;
    Ok(PretrainReport {
        epoch_losses: losses,
        stopped_early,
    })
}
