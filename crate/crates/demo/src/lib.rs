//! WebAssembly bindings for the static demo page in `www/`. Every export
//! returns a JSON string; the plain functions behind them are usable and
//! tested natively.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use wasm_bindgen::prelude::*;

use fusion_asr::attention::attention_weights;
use fusion_asr::error::Result;
use fusion_asr::eval::{normalize_text, score_utterance, tokenize, unit_for, EditCounts, Unit};
use fusion_asr::fusion::{fuse_tensors, gate_values, init_fusion, Mechanism};
use fusion_asr::params::ParamStore;
use fusion_asr::repetition::remove_ngram_repetitions;
use fusion_asr::tensor::Tensor;
use fusion_asr::train::lr_at;

const D_W: usize = 16;
const D_M: usize = 12;
const HEADS: usize = 2;

#[derive(Debug, Serialize)]
pub struct FusionView {
    pub mechanism: String,
    pub frames: usize,
    pub output_dim: usize,
    /// Head-averaged weights of whisper frames (rows) over mhubert frames.
    pub w_from_m: Option<Vec<Vec<f64>>>,
    pub m_from_w: Option<Vec<Vec<f64>>>,
    /// Mean gate activation per frame, for the gated mechanisms.
    pub gate_w: Option<Vec<f64>>,
    pub gate_m: Option<Vec<f64>>,
}

fn head_mean(maps: &[Tensor]) -> Vec<Vec<f64>> {
    let mut out = maps[0].to_rows();
    for m in &maps[1..] {
        for (row, other) in out.iter_mut().zip(m.to_rows()) {
            for (a, b) in row.iter_mut().zip(other) {
                *a += b;
            }
        }
    }
    let n = maps.len() as f64;
    out.iter_mut().flatten().for_each(|v| *v /= n);
    out
}

fn row_means(t: &Tensor) -> Vec<f64> {
    (0..t.rows()).map(|r| t.row(r).iter().sum::<f64>() / t.cols() as f64).collect()
}

/// Freshly initialised fusion parameters applied to random encoder outputs.
pub fn fusion_view(mechanism: &str, frames: usize, seed: u64) -> Result<FusionView> {
    let mechanism: Mechanism = mechanism.parse()?;
    let frames = frames.clamp(1, 48);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let hw = Tensor::uniform(&[frames, D_W], 1.5, &mut rng);
    let hm = Tensor::uniform(&[frames, D_M], 1.5, &mut rng);
    let mut store = ParamStore::new();
    let p = init_fusion(&mut store, mechanism, D_W, D_M, HEADS, seed)?;
    let fused = fuse_tensors(&store, &hw, &hm, &p)?;
    let w_from_m = match &p.attn_wm {
        Some(a) => Some(head_mean(&attention_weights(&store, &hw, &hm, a)?)),
        None => None,
    };
    let m_from_w = match &p.attn_mw {
        Some(a) => Some(head_mean(&attention_weights(&store, &hm, &hw, a)?)),
        None => None,
    };
    let (gate_w, gate_m) = if p.gate_wm.is_some() {
        let (gw, gm) = gate_values(&store, &hw, &hm, &p)?;
        (Some(row_means(&gw)), Some(row_means(&gm)))
    } else {
        (None, None)
    };
    Ok(FusionView {
        mechanism: mechanism.to_string(),
        frames,
        output_dim: fused.cols(),
        w_from_m,
        m_from_w,
        gate_w,
        gate_m,
    })
}

/// Learning rate at every step from 0 to `total`.
pub fn lr_curve(warmup: usize, total: usize, peak: f64) -> Vec<f64> {
    let total = total.clamp(1, 100_000);
    (0..=total).map(|s| lr_at(s, warmup, total, peak)).collect()
}

#[derive(Debug, Serialize)]
pub struct ScoreView {
    pub unit: Unit,
    pub reference_tokens: Vec<String>,
    pub hypothesis_tokens: Vec<String>,
    /// Hypothesis tokens after n-gram repetition removal.
    pub cleaned_tokens: Vec<String>,
    /// Per hypothesis token, whether the removal kept it.
    pub kept: Vec<bool>,
    pub removed: usize,
    #[serde(flatten)]
    pub counts: EditCounts,
    pub error_rate: f64,
}

/// A token tagged with its position; equality ignores the position.
#[derive(Clone)]
struct Positioned<'a>(usize, &'a str);

impl PartialEq for Positioned<'_> {
    fn eq(&self, other: &Self) -> bool {
        self.1 == other.1
    }
}

/// Removes repeated `n`-token blocks from the hypothesis, then scores it.
pub fn score_view(reference: &str, hypothesis: &str, lang: &str, n: usize) -> Result<ScoreView> {
    let unit = unit_for(lang)?;
    let hyp_tokens = tokenize(&normalize_text(hypothesis), unit);
    let tagged: Vec<Positioned> = hyp_tokens.iter().enumerate().map(|(i, t)| Positioned(i, t)).collect();
    let survivors = remove_ngram_repetitions(&tagged, n.max(1));
    let mut kept = vec![false; hyp_tokens.len()];
    survivors.iter().for_each(|p| kept[p.0] = true);
    let cleaned: Vec<String> = survivors.iter().map(|p| p.1.to_string()).collect();
    let sep = if unit == Unit::Char { "" } else { " " };
    let scored = score_utterance("demo", reference, &cleaned.join(sep), lang)?;
    Ok(ScoreView {
        unit,
        reference_tokens: tokenize(&normalize_text(reference), unit),
        removed: hyp_tokens.len() - cleaned.len(),
        hypothesis_tokens: hyp_tokens,
        kept,
        cleaned_tokens: cleaned,
        error_rate: scored.error_rate(),
        counts: scored.counts,
    })
}

fn to_json<T: Serialize>(r: Result<T>) -> std::result::Result<String, JsValue> {
    let v = r.map_err(|e| JsValue::from_str(&e.to_string()))?;
    serde_json::to_string(&v).map_err(|e| JsValue::from_str(&e.to_string()))
}

#[wasm_bindgen(js_name = fusionView)]
pub fn fusion_view_json(mechanism: &str, frames: usize, seed: u32) -> std::result::Result<String, JsValue> {
    to_json(fusion_view(mechanism, frames, seed as u64))
}

#[wasm_bindgen(js_name = lrCurve)]
pub fn lr_curve_json(warmup: usize, total: usize, peak: f64) -> std::result::Result<String, JsValue> {
    to_json(Ok(lr_curve(warmup, total, peak)))
}

#[wasm_bindgen(js_name = scoreView)]
pub fn score_view_json(reference: &str, hypothesis: &str, lang: &str, n: usize) -> std::result::Result<String, JsValue> {
    to_json(score_view(reference, hypothesis, lang, n))
}
