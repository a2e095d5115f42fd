//! Combining the Whisper-like stream `hw` and the mHuBERT-like stream `hm`
//! into one fused sequence.
//!
//! Every mechanism works on equal-length inputs; [`align_lengths`] truncates
//! to the shorter stream first.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{cross_attention, init_attention, AttentionParams};
use crate::error::{Error, Result};
use crate::params::{init_matrix, Graph, Group, ParamId, ParamStore};
use crate::tape::Var;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Mechanism {
    #[serde(rename = "dfc")]
    Dfc,
    #[serde(rename = "res-uni-caf")]
    ResUniCaf,
    #[serde(rename = "res-bi-caf")]
    ResBiCaf,
    #[serde(rename = "res-gated-bi-caf")]
    ResGatedBiCaf,
    #[serde(rename = "res-gated-bi-caf-dfc")]
    ResGatedBiCafDfc,
}

impl Mechanism {
    pub const ALL: [Mechanism; 5] = [
        Mechanism::Dfc,
        Mechanism::ResUniCaf,
        Mechanism::ResBiCaf,
        Mechanism::ResGatedBiCaf,
        Mechanism::ResGatedBiCafDfc,
    ];

    pub fn key(self) -> &'static str {
        match self {
            Mechanism::Dfc => "dfc",
            Mechanism::ResUniCaf => "res-uni-caf",
            Mechanism::ResBiCaf => "res-bi-caf",
            Mechanism::ResGatedBiCaf => "res-gated-bi-caf",
            Mechanism::ResGatedBiCafDfc => "res-gated-bi-caf-dfc",
        }
    }

    fn needs_attn_wm(self) -> bool {
        self != Mechanism::Dfc
    }

    fn needs_attn_mw(self) -> bool {
        !matches!(self, Mechanism::Dfc | Mechanism::ResUniCaf)
    }

    fn needs_gates(self) -> bool {
        matches!(self, Mechanism::ResGatedBiCaf | Mechanism::ResGatedBiCafDfc)
    }
}

impl fmt::Display for Mechanism {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.key())
    }
}

impl FromStr for Mechanism {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Mechanism::ALL
            .into_iter()
            .find(|m| m.key() == s)
            .ok_or_else(|| Error::Config(format!("unknown fusion mechanism {s:?}")))
    }
}

/// Which encoder streams feed the projector: one of the fusion mechanisms,
/// or a single encoder on its own as a baseline.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum StreamChoice {
    Fused(Mechanism),
    WhisperOnly,
    MhubertOnly,
}

impl StreamChoice {
    pub fn key(self) -> &'static str {
        match self {
            StreamChoice::Fused(m) => m.key(),
            StreamChoice::WhisperOnly => "whisper-only",
            StreamChoice::MhubertOnly => "mhubert-only",
        }
    }

    pub fn output_dim(self, d_w: usize, d_m: usize) -> usize {
        match self {
            StreamChoice::Fused(m) => fused_dim(m, d_w, d_m),
            StreamChoice::WhisperOnly => d_w,
            StreamChoice::MhubertOnly => d_m,
        }
    }
}

impl fmt::Display for StreamChoice {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.key())
    }
}

impl FromStr for StreamChoice {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "whisper-only" => Ok(StreamChoice::WhisperOnly),
            "mhubert-only" => Ok(StreamChoice::MhubertOnly),
            _ => s.parse().map(StreamChoice::Fused),
        }
    }
}

impl TryFrom<String> for StreamChoice {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<StreamChoice> for String {
    fn from(c: StreamChoice) -> String {
        c.key().to_string()
    }
}

/// Output width of each mechanism.
pub fn fused_dim(mechanism: Mechanism, d_w: usize, d_m: usize) -> usize {
    match mechanism {
        Mechanism::Dfc | Mechanism::ResBiCaf | Mechanism::ResGatedBiCaf => d_w + d_m,
        Mechanism::ResUniCaf => d_w,
        Mechanism::ResGatedBiCafDfc => 2 * (d_w + d_m),
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FusionParams {
    pub mechanism: Mechanism,
    pub d_w: usize,
    pub d_m: usize,
    /// Whisper stream queries the mHuBERT stream.
    pub attn_wm: Option<AttentionParams>,
    /// mHuBERT stream queries the Whisper stream.
    pub attn_mw: Option<AttentionParams>,
    /// `d_w × d_w`
    pub gate_wm: Option<ParamId>,
    /// `d_m × d_m`
    pub gate_mw: Option<ParamId>,
}

impl FusionParams {
    pub fn output_dim(&self) -> usize {
        fused_dim(self.mechanism, self.d_w, self.d_m)
    }

    fn attn_wm(&self) -> Result<&AttentionParams> {
        self.attn_wm.as_ref().ok_or(Error::MissingParam {
            mechanism: self.mechanism.key(),
            param: "attn_wm",
        })
    }

    fn attn_mw(&self) -> Result<&AttentionParams> {
        self.attn_mw.as_ref().ok_or(Error::MissingParam {
            mechanism: self.mechanism.key(),
            param: "attn_mw",
        })
    }

    fn gates(&self) -> Result<(ParamId, ParamId)> {
        let missing = |param| Error::MissingParam {
            mechanism: self.mechanism.key(),
            param,
        };
        Ok((self.gate_wm.ok_or(missing("gate_wm"))?, self.gate_mw.ok_or(missing("gate_mw"))?))
    }

    /// Every parameter id owned by this fusion block.
    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = Vec::new();
        for a in [&self.attn_wm, &self.attn_mw].into_iter().flatten() {
            ids.extend(a.weight_ids());
        }
        ids.extend(self.gate_wm);
        ids.extend(self.gate_mw);
        ids
    }
}

/// Creates exactly the parameters `mechanism` uses, in the `Fusion` group.
pub fn init_fusion(
    store: &mut ParamStore,
    mechanism: Mechanism,
    d_w: usize,
    d_m: usize,
    heads: usize,
    seed: u64,
) -> Result<FusionParams> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut p = FusionParams {
        mechanism,
        d_w,
        d_m,
        attn_wm: None,
        attn_mw: None,
        gate_wm: None,
        gate_mw: None,
    };
    if mechanism.needs_attn_wm() {
        p.attn_wm = Some(init_attention(store, "fusion.attn_wm", Group::Fusion, d_w, d_m, d_w, heads, rng.gen())?);
    }
    if mechanism.needs_attn_mw() {
        p.attn_mw = Some(init_attention(store, "fusion.attn_mw", Group::Fusion, d_m, d_w, d_m, heads, rng.gen())?);
    }
    if mechanism.needs_gates() {
        p.gate_wm = Some(store.add("fusion.gate_wm", Group::Fusion, init_matrix(&mut rng, d_w, d_w), true));
        p.gate_mw = Some(store.add("fusion.gate_mw", Group::Fusion, init_matrix(&mut rng, d_m, d_m), true));
    }
    Ok(p)
}

/// Truncates both streams to the shorter length.
pub fn align_lengths(hw: &Tensor, hm: &Tensor) -> Result<(Tensor, Tensor)> {
    let t = hw.rows().min(hm.rows());
    Ok((hw.slice_rows(0, t)?, hm.slice_rows(0, t)?))
}

/// [`align_lengths`] on tape variables.
pub fn align_vars(g: &mut Graph, hw: Var, hm: Var) -> Result<(Var, Var)> {
    let (tw, tm) = (g.value(hw).rows(), g.value(hm).rows());
    if tw == tm {
        return Ok((hw, hm));
    }
    let t = tw.min(tm);
    let hw = if tw > t { g.slice_rows(hw, 0, t)? } else { hw };
    let hm = if tm > t { g.slice_rows(hm, 0, t)? } else { hm };
    Ok((hw, hm))
}

fn check_lengths(g: &Graph, hw: Var, hm: Var) -> Result<()> {
    let (tw, tm) = (g.value(hw).rows(), g.value(hm).rows());
    if tw != tm {
        return Err(Error::LengthMismatch {
            op: "fusion",
            left: tw,
            right: tm,
        });
    }
    Ok(())
}

pub fn fuse_dfc(g: &mut Graph, hw: Var, hm: Var) -> Result<Var> {
    check_lengths(g, hw, hm)?;
    g.concat_cols(&[hw, hm])
}

/// `cross_attention(hw, hm) + hw`
pub fn fuse_res_uni_caf(g: &mut Graph, hw: Var, hm: Var, p: &FusionParams) -> Result<Var> {
    check_lengths(g, hw, hm)?;
    let attended = cross_attention(g, hw, hm, p.attn_wm()?)?;
    g.add(attended, hw)
}

pub fn fuse_res_bi_caf(g: &mut Graph, hw: Var, hm: Var, p: &FusionParams) -> Result<Var> {
    check_lengths(g, hw, hm)?;
    let w_from_m = cross_attention(g, hw, hm, p.attn_wm()?)?;
    let m_from_w = cross_attention(g, hm, hw, p.attn_mw()?)?;
    let left = g.add(w_from_m, hw)?;
    let right = g.add(m_from_w, hm)?;
    g.concat_cols(&[left, right])
}

/// `σ(h W_g) ⊙ h + residual` for one direction.
fn gated_residual(g: &mut Graph, attended: Var, residual: Var, gate: ParamId) -> Result<Var> {
    let w = g.param(gate);
    let pre = g.matmul(attended, w)?;
    let gate = g.sigmoid(pre);
    let gated = g.mul(gate, attended)?;
    g.add(gated, residual)
}

pub fn fuse_res_gated_bi_caf(g: &mut Graph, hw: Var, hm: Var, p: &FusionParams) -> Result<Var> {
    check_lengths(g, hw, hm)?;
    let (gate_wm, gate_mw) = p.gates()?;
    let w_from_m = cross_attention(g, hw, hm, p.attn_wm()?)?;
    let m_from_w = cross_attention(g, hm, hw, p.attn_mw()?)?;
    let left = gated_residual(g, w_from_m, hw, gate_wm)?;
    let right = gated_residual(g, m_from_w, hm, gate_mw)?;
    g.concat_cols(&[left, right])
}

pub fn fuse_res_gated_bi_caf_dfc(g: &mut Graph, hw: Var, hm: Var, p: &FusionParams) -> Result<Var> {
    let dfc = fuse_dfc(g, hw, hm)?;
    let gated = fuse_res_gated_bi_caf(g, hw, hm, p)?;
    g.concat_cols(&[dfc, gated])
}

/// Dispatches on `p.mechanism`. Inputs must already have equal lengths.
pub fn fuse(g: &mut Graph, hw: Var, hm: Var, p: &FusionParams) -> Result<Var> {
    match p.mechanism {
        Mechanism::Dfc => fuse_dfc(g, hw, hm),
        Mechanism::ResUniCaf => fuse_res_uni_caf(g, hw, hm, p),
        Mechanism::ResBiCaf => fuse_res_bi_caf(g, hw, hm, p),
        Mechanism::ResGatedBiCaf => fuse_res_gated_bi_caf(g, hw, hm, p),
        Mechanism::ResGatedBiCafDfc => fuse_res_gated_bi_caf_dfc(g, hw, hm, p),
    }
}

/// Inference-only fusion of two tensors, truncating to the shorter stream.
pub fn fuse_tensors(store: &ParamStore, hw: &Tensor, hm: &Tensor, p: &FusionParams) -> Result<Tensor> {
    let (hw, hm) = align_lengths(hw, hm)?;
    let mut g = Graph::frozen(store);
    let (wv, mv) = (g.input(hw), g.input(hm));
    let out = fuse(&mut g, wv, mv, p)?;
    Ok(g.value(out).clone())
}

/// Gate activations `(σ(h^{w←m} W_g), σ(h^{m←w} W_g))` for a gated
/// mechanism, for inspection.
pub fn gate_values(store: &ParamStore, hw: &Tensor, hm: &Tensor, p: &FusionParams) -> Result<(Tensor, Tensor)> {
    let (hw, hm) = align_lengths(hw, hm)?;
    let (gate_wm, gate_mw) = p.gates()?;
    let mut g = Graph::frozen(store);
    let (wv, mv) = (g.input(hw), g.input(hm));
    let w_from_m = cross_attention(&mut g, wv, mv, p.attn_wm()?)?;
    let m_from_w = cross_attention(&mut g, mv, wv, p.attn_mw()?)?;
    let gw = g.value(w_from_m).matmul(store.get(gate_wm))?.map(crate::tensor::sigmoid);
    let gm = g.value(m_from_w).matmul(store.get(gate_mw))?.map(crate::tensor::sigmoid);
    Ok((gw, gm))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::GroupSet;
    use crate::tape::{finite_diff_grad, max_rel_error};
    use crate::tensor::sigmoid;

    const D_W: usize = 8;
    const D_M: usize = 6;

    fn setup(mechanism: Mechanism, seed: u64) -> (ParamStore, FusionParams) {
        let mut store = ParamStore::new();
        let p = init_fusion(&mut store, mechanism, D_W, D_M, 2, seed).unwrap();
        (store, p)
    }

    fn inputs(seed: u64, t: usize) -> (Tensor, Tensor) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (
            Tensor::uniform(&[t, D_W], 1.5, &mut rng),
            Tensor::uniform(&[t, D_M], 1.5, &mut rng),
        )
    }

    fn zero_outputs(store: &mut ParamStore, p: &FusionParams) {
        for a in [&p.attn_wm, &p.attn_mw].into_iter().flatten() {
            store.get_mut(a.w_o).fill(0.0);
        }
    }

    fn attend(store: &ParamStore, q: &Tensor, kv: &Tensor, a: &AttentionParams) -> Tensor {
        let mut g = Graph::frozen(store);
        let (qv, kvv) = (g.input(q.clone()), g.input(kv.clone()));
        let out = cross_attention(&mut g, qv, kvv, a).unwrap();
        g.value(out).clone()
    }

    #[test]
    fn parameter_subsets() {
        let (s, p) = setup(Mechanism::Dfc, 0);
        assert!(s.is_empty() && p.param_ids().is_empty());
        let (_, p) = setup(Mechanism::ResUniCaf, 0);
        assert!(p.attn_wm.is_some() && p.attn_mw.is_none() && p.gate_wm.is_none());
        let (_, p) = setup(Mechanism::ResBiCaf, 0);
        assert!(p.attn_mw.is_some() && p.gate_wm.is_none());
        for m in [Mechanism::ResGatedBiCaf, Mechanism::ResGatedBiCafDfc] {
            let (s, p) = setup(m, 0);
            assert_eq!(s.get(p.gate_wm.unwrap()).shape(), &[D_W, D_W]);
            assert_eq!(s.get(p.gate_mw.unwrap()).shape(), &[D_M, D_M]);
            assert_eq!(p.param_ids().len(), 10);
        }
    }

    #[test]
    fn fused_dims() {
        assert_eq!(fused_dim(Mechanism::Dfc, 64, 48), 112);
        assert_eq!(fused_dim(Mechanism::ResUniCaf, 64, 48), 64);
        assert_eq!(fused_dim(Mechanism::ResBiCaf, 64, 48), 112);
        assert_eq!(fused_dim(Mechanism::ResGatedBiCaf, 64, 48), 112);
        assert_eq!(fused_dim(Mechanism::ResGatedBiCafDfc, 64, 48), 224);
        let (hw, hm) = inputs(1, 5);
        for m in Mechanism::ALL {
            let (s, p) = setup(m, 2);
            let out = fuse_tensors(&s, &hw, &hm, &p).unwrap();
            assert_eq!(out.shape(), &[5, fused_dim(m, D_W, D_M)]);
        }
    }

    #[test]
    fn keys_round_trip() {
        for m in Mechanism::ALL {
            assert_eq!(m.key().parse::<Mechanism>().unwrap(), m);
            let json = serde_json::to_string(&StreamChoice::Fused(m)).unwrap();
            assert_eq!(serde_json::from_str::<StreamChoice>(&json).unwrap(), StreamChoice::Fused(m));
        }
        assert_eq!("mhubert-only".parse::<StreamChoice>().unwrap(), StreamChoice::MhubertOnly);
        assert!("concat".parse::<StreamChoice>().is_err());
    }

    #[test]
    fn dfc_cases() {
        let store = ParamStore::new();
        let p = init_fusion(&mut ParamStore::new(), Mechanism::Dfc, 2, 1, 1, 0).unwrap();
        let hw = Tensor::from_rows(&[vec![1.0, 2.0]]).unwrap();
        let hm = Tensor::from_rows(&[vec![3.0]]).unwrap();
        assert_eq!(fuse_tensors(&store, &hw, &hm, &p).unwrap().data(), &[1.0, 2.0, 3.0]);

        let mut g = Graph::frozen(&store);
        let a = g.input(Tensor::zeros(&[2, 2]));
        let b = g.input(Tensor::zeros(&[3, 1]));
        assert!(matches!(fuse_dfc(&mut g, a, b), Err(Error::LengthMismatch { .. })));
    }

    #[test]
    fn align_truncates_to_shorter() {
        let (hw, hm) = inputs(3, 10);
        let (a, b) = align_lengths(&hw, &hm.slice_rows(0, 9).unwrap()).unwrap();
        assert_eq!((a.rows(), b.rows()), (9, 9));
        assert_eq!(a, hw.slice_rows(0, 9).unwrap());
        let (a, b) = align_lengths(&hw, &hm).unwrap();
        assert_eq!((a, b), (hw, hm));
    }

    #[test]
    fn degeneracy_chain() {
        let (hw, hm) = inputs(4, 6);
        let dfc = Tensor::concat_cols(&[&hw, &hm]).unwrap();
        for m in Mechanism::ALL {
            let (mut s, p) = setup(m, 5);
            zero_outputs(&mut s, &p);
            let out = fuse_tensors(&s, &hw, &hm, &p).unwrap();
            let want = match m {
                Mechanism::ResUniCaf => hw.clone(),
                Mechanism::ResGatedBiCafDfc => Tensor::concat_cols(&[&dfc, &dfc]).unwrap(),
                _ => dfc.clone(),
            };
            assert_eq!(out, want, "{m}");
        }
    }

    #[test]
    fn uni_caf_single_key_broadcasts() {
        let (s, p) = setup(Mechanism::ResUniCaf, 6);
        let (hw, hm) = inputs(7, 4);
        let hm1 = hm.slice_rows(0, 1).unwrap();
        let mut g = Graph::frozen(&s);
        let (wv, mv) = (g.input(hw.clone()), g.input(hm1.clone()));
        let attended = cross_attention(&mut g, wv, mv, p.attn_wm.as_ref().unwrap()).unwrap();
        let row = g.value(attended).row(0).to_vec();
        for r in 1..4 {
            for (a, b) in g.value(attended).row(r).iter().zip(&row) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn uni_caf_matches_composition() {
        let (s, p) = setup(Mechanism::ResUniCaf, 8);
        let (hw, hm) = inputs(9, 5);
        let want = attend(&s, &hw, &hm, p.attn_wm.as_ref().unwrap()).add(&hw).unwrap();
        assert!(fuse_tensors(&s, &hw, &hm, &p).unwrap().max_abs_diff(&want) < 1e-12);
    }

    #[test]
    fn bi_caf_left_half_is_uni_caf() {
        let (s, p) = setup(Mechanism::ResBiCaf, 10);
        let (hw, hm) = inputs(11, 5);
        let bi = fuse_tensors(&s, &hw, &hm, &p).unwrap();
        let uni = FusionParams {
            mechanism: Mechanism::ResUniCaf,
            attn_mw: None,
            ..p.clone()
        };
        let left = fuse_tensors(&s, &hw, &hm, &uni).unwrap();
        assert_eq!(bi.slice_cols(0, D_W).unwrap(), left);
    }

    #[test]
    fn gated_with_zero_gate_weights_halves_attention() {
        let (mut s, p) = setup(Mechanism::ResGatedBiCaf, 12);
        s.get_mut(p.gate_wm.unwrap()).fill(0.0);
        s.get_mut(p.gate_mw.unwrap()).fill(0.0);
        let (hw, hm) = inputs(13, 4);
        let wm = attend(&s, &hw, &hm, p.attn_wm.as_ref().unwrap());
        let mw = attend(&s, &hm, &hw, p.attn_mw.as_ref().unwrap());
        let want = Tensor::concat_cols(&[&wm.scale(0.5).add(&hw).unwrap(), &mw.scale(0.5).add(&hm).unwrap()]).unwrap();
        assert!(fuse_tensors(&s, &hw, &hm, &p).unwrap().max_abs_diff(&want) < 1e-12);
    }

    #[test]
    fn gated_matches_elementwise_reference() {
        for seed in 0..5 {
            let (s, p) = setup(Mechanism::ResGatedBiCaf, 20 + seed);
            let (hw, hm) = inputs(30 + seed, 5);
            let wm = attend(&s, &hw, &hm, p.attn_wm.as_ref().unwrap());
            let mw = attend(&s, &hm, &hw, p.attn_mw.as_ref().unwrap());
            let gate = |h: &Tensor, w: &Tensor, res: &Tensor| {
                let mut out = Tensor::zeros(h.shape());
                for t in 0..h.rows() {
                    for j in 0..h.cols() {
                        let z: f64 = (0..h.cols()).map(|i| h.get(t, i) * w.get(i, j)).sum();
                        out.set(t, j, sigmoid(z) * h.get(t, j) + res.get(t, j));
                    }
                }
                out
            };
            let left = gate(&wm, s.get(p.gate_wm.unwrap()), &hw);
            let right = gate(&mw, s.get(p.gate_mw.unwrap()), &hm);
            let want = Tensor::concat_cols(&[&left, &right]).unwrap();
            assert!(fuse_tensors(&s, &hw, &hm, &p).unwrap().max_abs_diff(&want) < 1e-12);

            let (gw, gm) = gate_values(&s, &hw, &hm, &p).unwrap();
            assert!(gw.data().iter().chain(gm.data()).all(|&v| v > 0.0 && v < 1.0));
        }
    }

    #[test]
    fn gated_dfc_is_concatenation() {
        let (s, p) = setup(Mechanism::ResGatedBiCafDfc, 40);
        let (hw, hm) = inputs(41, 5);
        let out = fuse_tensors(&s, &hw, &hm, &p).unwrap();
        let dfc = Tensor::concat_cols(&[&hw, &hm]).unwrap();
        let gated_p = FusionParams {
            mechanism: Mechanism::ResGatedBiCaf,
            ..p.clone()
        };
        let gated = fuse_tensors(&s, &hw, &hm, &gated_p).unwrap();
        assert_eq!(out.slice_cols(0, D_W + D_M).unwrap(), dfc);
        assert_eq!(out.slice_cols(D_W + D_M, 2 * (D_W + D_M)).unwrap(), gated);
    }

    #[test]
    fn missing_parameter_is_reported() {
        let (s, mut p) = setup(Mechanism::ResGatedBiCaf, 50);
        p.gate_mw = None;
        let (hw, hm) = inputs(51, 3);
        assert!(matches!(
            fuse_tensors(&s, &hw, &hm, &p),
            Err(Error::MissingParam { param: "gate_mw", .. })
        ));
    }

    #[test]
    fn all_fusion_parameters_pass_gradient_check() {
        let (hw, hm) = inputs(60, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(61);
        for m in Mechanism::ALL.into_iter().skip(1) {
            let (store, p) = setup(m, 62);
            let mask = Tensor::uniform(&[4, p.output_dim()], 1.0, &mut rng);
            let loss_of = |s: &ParamStore| {
                let mut g = Graph::new(s, GroupSet::from([Group::Fusion]));
                let (wv, mv) = (g.input(hw.clone()), g.input(hm.clone()));
                let out = fuse(&mut g, wv, mv, &p).unwrap();
                let l = g.weighted_sum(out, &mask).unwrap();
                let grads = g.param_grads(l).unwrap();
                (g.value(l).item(), grads)
            };
            let (_, grads) = loss_of(&store);
            for id in p.param_ids() {
                let numeric = finite_diff_grad(
                    |t| {
                        let mut s = store.clone();
                        *s.get_mut(id) = t.clone();
                        loss_of(&s).0
                    },
                    store.get(id),
                    1e-5,
                );
                let err = max_rel_error(grads.get(id).unwrap(), &numeric);
                assert!(err < 1e-4, "{m} {}: {err}", store.param(id).name);
            }
        }
    }
}
