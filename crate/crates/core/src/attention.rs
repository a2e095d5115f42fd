//! Multi-head scaled dot-product attention.
//!
//! There is no positional encoding, layer norm or feed-forward sublayer in
//! here: callers pass position-aware sequences and add their own residuals.
//! As a consequence the output is invariant to permutations of the
//! key/value rows.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::lora::{project, LoraAdapter};
use crate::params::{init_matrix, Graph, Group, ParamId, ParamStore};
use crate::tape::Var;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct AttentionParams {
    /// `d_q × d_model`
    pub w_q: ParamId,
    /// `d_kv × d_model`
    pub w_k: ParamId,
    /// `d_kv × d_model`
    pub w_v: ParamId,
    /// `d_model × d_q`: output width is tied to the query stream so the
    /// result can be added back onto it.
    pub w_o: ParamId,
    pub heads: usize,
    pub d_model: usize,
    pub d_q: usize,
    pub d_kv: usize,
    pub lora_q: Option<LoraAdapter>,
    pub lora_v: Option<LoraAdapter>,
}

impl AttentionParams {
    pub fn d_out(&self) -> usize {
        self.d_q
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.heads
    }

    pub fn weight_ids(&self) -> [ParamId; 4] {
        [self.w_q, self.w_k, self.w_v, self.w_o]
    }

    /// Attaches LoRA adapters to the query and value projections.
    pub fn attach_lora(
        &mut self,
        store: &mut ParamStore,
        name: &str,
        group: Group,
        rank: usize,
        alpha: f64,
        seed: u64,
    ) -> Result<()> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        self.lora_q = Some(LoraAdapter::new(
            store,
            &format!("{name}.q"),
            group,
            self.d_q,
            self.d_model,
            rank,
            alpha,
            &mut rng,
        )?);
        self.lora_v = Some(LoraAdapter::new(
            store,
            &format!("{name}.v"),
            group,
            self.d_kv,
            self.d_model,
            rank,
            alpha,
            &mut rng,
        )?);
        Ok(())
    }
}

/// Creates the four projection matrices with `U(±1/sqrt(fan_in))` entries.
#[allow(clippy::too_many_arguments)]
pub fn init_attention(
    store: &mut ParamStore,
    name: &str,
    group: Group,
    d_q: usize,
    d_kv: usize,
    d_model: usize,
    heads: usize,
    seed: u64,
) -> Result<AttentionParams> {
    if heads == 0 || !d_model.is_multiple_of(heads) {
        return Err(Error::HeadDivisibility { d_model, heads });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w_q = store.add(format!("{name}.w_q"), group, init_matrix(&mut rng, d_q, d_model), true);
    let w_k = store.add(format!("{name}.w_k"), group, init_matrix(&mut rng, d_kv, d_model), true);
    let w_v = store.add(format!("{name}.w_v"), group, init_matrix(&mut rng, d_kv, d_model), true);
    let w_o = store.add(format!("{name}.w_o"), group, init_matrix(&mut rng, d_model, d_q), true);
    Ok(AttentionParams {
        w_q,
        w_k,
        w_v,
        w_o,
        heads,
        d_model,
        d_q,
        d_kv,
        lora_q: None,
        lora_v: None,
    })
}

fn check_inputs(g: &Graph, q: Var, kv: Var, p: &AttentionParams) -> Result<()> {
    let (qt, kt) = (g.value(q), g.value(kv));
    if !qt.is_matrix() || qt.cols() != p.d_q {
        return Err(Error::shape("cross_attention query", qt.shape(), &[qt.shape()[0], p.d_q]));
    }
    if !kt.is_matrix() || kt.cols() != p.d_kv {
        return Err(Error::shape("cross_attention key/value", kt.shape(), &[kt.shape()[0], p.d_kv]));
    }
    if qt.rows() == 0 || kt.rows() == 0 {
        return Err(Error::Empty("attention sequence"));
    }
    Ok(())
}

fn attend(g: &mut Graph, q_seq: Var, kv_seq: Var, p: &AttentionParams, causal: bool) -> Result<Var> {
    check_inputs(g, q_seq, kv_seq, p)?;
    let q = project(g, q_seq, p.w_q, p.lora_q.as_ref())?;
    let k = project(g, kv_seq, p.w_k, None)?;
    let v = project(g, kv_seq, p.w_v, p.lora_v.as_ref())?;
    let hd = p.head_dim();
    let scale = 1.0 / (hd as f64).sqrt();
    let mut heads = Vec::with_capacity(p.heads);
    for h in 0..p.heads {
        let (lo, hi) = (h * hd, (h + 1) * hd);
        let qh = g.slice_cols(q, lo, hi)?;
        let kh = g.slice_cols(k, lo, hi)?;
        let vh = g.slice_cols(v, lo, hi)?;
        let scores = g.matmul_nt(qh, kh)?;
        let scores = g.scale(scores, scale);
        let weights = if causal {
            g.causal_softmax_rows(scores)?
        } else {
            g.softmax_rows(scores)?
        };
        heads.push(g.matmul(weights, vh)?);
    }
    let joined = if heads.len() == 1 { heads[0] } else { g.concat_cols(&heads)? };
    let wo = g.param(p.w_o);
    g.matmul(joined, wo)
}

/// `T_q × d_q` queries attend over `T_kv × d_kv` keys/values.
pub fn cross_attention(g: &mut Graph, q_seq: Var, kv_seq: Var, p: &AttentionParams) -> Result<Var> {
    attend(g, q_seq, kv_seq, p, false)
}

/// Causal self-attention: position `i` sees positions `<= i`.
pub fn causal_self_attention(g: &mut Graph, x: Var, p: &AttentionParams) -> Result<Var> {
    attend(g, x, x, p, true)
}

/// Per-head attention weight matrices (`T_q × T_kv`), for inspection.
pub fn attention_weights(
    store: &ParamStore,
    q_seq: &Tensor,
    kv_seq: &Tensor,
    p: &AttentionParams,
) -> Result<Vec<Tensor>> {
    let mut g = Graph::frozen(store);
    let qv = g.input(q_seq.clone());
    let kvv = g.input(kv_seq.clone());
    check_inputs(&g, qv, kvv, p)?;
    let q = project(&mut g, qv, p.w_q, p.lora_q.as_ref())?;
    let k = project(&mut g, kvv, p.w_k, None)?;
    let hd = p.head_dim();
    let scale = 1.0 / (hd as f64).sqrt();
    let (qt, kt) = (g.value(q).clone(), g.value(k).clone());
    (0..p.heads)
        .map(|h| {
            let qh = qt.slice_cols(h * hd, (h + 1) * hd)?;
            let kh = kt.slice_cols(h * hd, (h + 1) * hd)?;
            qh.matmul_nt(&kh)?.scale(scale).softmax_rows()
        })
        .collect()
}
