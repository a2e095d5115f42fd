//! Finite-difference checks of every trainable operation, runnable as one
//! suite from the CLI and the acceptance tests.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::attention::{causal_self_attention, cross_attention, init_attention};
use crate::decoder::{DecoderLm, LmConfig};
use crate::encoder::ToyEncoder;
use crate::error::Result;
use crate::fusion::{fuse, init_fusion, Mechanism};
use crate::lora::{lora_forward, LoraAdapter};
use crate::losses::CtcTarget;
use crate::params::{Graph, Group, ParamId, ParamStore};
use crate::projector::{ConvStage, LinearProjector, LinearProjectorConfig, QFormerConfig, QFormerProjector};
use crate::tape::{max_rel_error, Var};
use crate::tensor::Tensor;

pub const FD_EPS: f64 = 1e-5;
pub const MAX_REL_ERROR: f64 = 1e-4;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradCheckResult {
    pub name: String,
    pub seeds: usize,
    /// Worst relative error over all seeds and parameters.
    pub max_rel_error: f64,
    pub worst_param: String,
}

impl GradCheckResult {
    pub fn passed(&self) -> bool {
        self.max_rel_error < MAX_REL_ERROR
    }
}

type LossFn<'a> = dyn Fn(&mut Graph) -> Result<Var> + 'a;

/// Worst relative error between backprop and central differences over
/// every scalar of every parameter in `store`.
pub fn check_store(store: &ParamStore, loss: &LossFn) -> Result<(f64, String)> {
    let analytic = {
        let mut g = Graph::all_trainable(store);
        let l = loss(&mut g)?;
        g.param_grads(l)?
    };
    let eval = |s: &ParamStore| -> Result<f64> {
        let mut g = Graph::frozen(s);
        let l = loss(&mut g)?;
        Ok(g.value(l).item())
    };
    let mut probe = store.clone();
    let mut worst = (0.0, String::new());
    let ids: Vec<ParamId> = store.ids().collect();
    for id in ids {
        let shape = store.get(id).shape().to_vec();
        let mut numeric = Tensor::zeros(&shape);
        for i in 0..store.get(id).numel() {
            let orig = store.get(id).data()[i];
            probe.get_mut(id).data_mut()[i] = orig + FD_EPS;
            let plus = eval(&probe)?;
            probe.get_mut(id).data_mut()[i] = orig - FD_EPS;
            let minus = eval(&probe)?;
            probe.get_mut(id).data_mut()[i] = orig;
            numeric.data_mut()[i] = (plus - minus) / (2.0 * FD_EPS);
        }
        let zeros = Tensor::zeros(&shape);
        let err = max_rel_error(analytic.get(id).unwrap_or(&zeros), &numeric);
        if err > worst.0 || worst.1.is_empty() {
            worst = (err, store.param(id).name.clone());
        }
    }
    Ok(worst)
}

fn input_param(store: &mut ParamStore, name: &str, rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> ParamId {
    store.add(name, Group::Head, Tensor::uniform(&[rows, cols], 2.0, rng), false)
}

/// One randomly drawn instance of a check: a store and a loss over it.
type Case = (ParamStore, Box<dyn Fn(&mut Graph) -> Result<Var>>);

fn weighted(g: &mut Graph, out: Var, mask: &Tensor) -> Result<Var> {
    g.weighted_sum(out, mask)
}

fn attention_case(seed: u64) -> Result<Case> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let (tq, tk) = (rng.gen_range(1..4), rng.gen_range(1..5));
    let q = input_param(&mut store, "q", tq, 4, &mut rng);
    let kv = input_param(&mut store, "kv", tk, 3, &mut rng);
    let p = init_attention(&mut store, "attn", Group::Fusion, 4, 3, 4, 2, rng.gen())?;
    let causal = init_attention(&mut store, "self", Group::Fusion, 4, 4, 4, 2, rng.gen())?;
    let mask = Tensor::uniform(&[tq, 4], 1.0, &mut rng);
    Ok((
        store,
        Box::new(move |g| {
            let (qv, kvv) = (g.param(q), g.param(kv));
            let a = cross_attention(g, qv, kvv, &p)?;
            let b = causal_self_attention(g, a, &causal)?;
            weighted(g, b, &mask)
        }),
    ))
}

fn fusion_case(m: Mechanism, seed: u64) -> Result<Case> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let t = rng.gen_range(1..4);
    let hw = input_param(&mut store, "hw", t, 4, &mut rng);
    let hm = input_param(&mut store, "hm", t, 2, &mut rng);
    let p = init_fusion(&mut store, m, 4, 2, 2, rng.gen())?;
    let mask = Tensor::uniform(&[t, p.output_dim()], 1.0, &mut rng);
    Ok((
        store,
        Box::new(move |g| {
            let (w, mv) = (g.param(hw), g.param(hm));
            let out = fuse(g, w, mv, &p)?;
            weighted(g, out, &mask)
        }),
    ))
}

fn linear_projector_case(seed: u64) -> Result<Case> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let cfg = LinearProjectorConfig {
        conv_layers: vec![ConvStage { kernel: 2, stride: 2 }, ConvStage { kernel: 2, stride: 1 }],
        mlp_hidden: 3,
        d_in: 2,
        d_llm: 3,
    };
    let t = cfg.min_input_len() + rng.gen_range(0..3);
    let out_len = cfg.output_len(t).expect("length above the minimum");
    let x = input_param(&mut store, "x", t, 2, &mut rng);
    let p = LinearProjector::new(&mut store, cfg, rng.gen())?;
    let mask = Tensor::uniform(&[out_len, 3], 1.0, &mut rng);
    Ok((
        store,
        Box::new(move |g| {
            let xv = g.param(x);
            let out = p.forward(g, xv)?;
            weighted(g, out, &mask)
        }),
    ))
}

fn qformer_case(seed: u64) -> Result<Case> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let cfg = QFormerConfig {
        window: 2,
        queries_per_window: 2,
        layers: 1,
        heads: 2,
        d_in: 3,
        d_llm: 4,
    };
    let t = rng.gen_range(1..5);
    let x = input_param(&mut store, "x", t, 3, &mut rng);
    let out_len = cfg.output_len(t);
    let p = QFormerProjector::new(&mut store, cfg, rng.gen())?;
    let mask = Tensor::uniform(&[out_len, 4], 1.0, &mut rng);
    Ok((
        store,
        Box::new(move |g| {
            let xv = g.param(x);
            let out = p.forward(g, xv)?;
            weighted(g, out, &mask)
        }),
    ))
}

fn lora_case(seed: u64) -> Result<Case> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let t = rng.gen_range(1..4);
    let x = input_param(&mut store, "x", t, 4, &mut rng);
    let w = store.add("w", Group::Lm, Tensor::uniform(&[3, 4], 1.0, &mut rng), true);
    let ad = LoraAdapter::new(&mut store, "w", Group::LmLora, 4, 3, 2, 4.0, &mut rng)?;
    // Zero-initialised B would hide the gradient path through A.
    *store.get_mut(ad.b) = Tensor::uniform(store.get(ad.b).shape(), 1.0, &mut rng);
    let mask = Tensor::uniform(&[t, 3], 1.0, &mut rng);
    Ok((
        store,
        Box::new(move |g| {
            let (xv, wv) = (g.param(x), g.param(w));
            let out = lora_forward(g, xv, wv, &ad)?;
            weighted(g, out, &mask)
        }),
    ))
}

fn encoder_lora_case(seed: u64) -> Result<Case> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let mut enc = ToyEncoder::new(&mut store, "enc", 3, 4, 2, 1, rng.gen())?;
    enc.attach_lora(&mut store, 2, 4.0, rng.gen())?;
    for id in enc.lora_ids() {
        *store.get_mut(id) = Tensor::uniform(store.get(id).shape(), 0.5, &mut rng);
    }
    let t = rng.gen_range(1..4);
    let x = Tensor::uniform(&[t, 3], 1.0, &mut rng);
    let mask = Tensor::uniform(&[t, 4], 1.0, &mut rng);
    Ok((
        store,
        Box::new(move |g| {
            let xv = g.input(x.clone());
            let out = enc.encode(g, xv)?;
            weighted(g, out, &mask)
        }),
    ))
}

fn ctc_case(seed: u64) -> Result<Case> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let vocab = rng.gen_range(2..5);
    let len = rng.gen_range(1..3);
    let tokens: Vec<usize> = (0..len).map(|_| rng.gen_range(1..vocab)).collect();
    let target = CtcTarget::new(tokens)?;
    let frames = target.min_frames() + rng.gen_range(0..3);
    let logits = input_param(&mut store, "logits", frames, vocab, &mut rng);
    Ok((
        store,
        Box::new(move |g| {
            let l = g.param(logits);
            let lp = g.log_softmax_rows(l)?;
            g.ctc_loss(lp, &target)
        }),
    ))
}

fn decoder_case(seed: u64) -> Result<Case> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let cfg = LmConfig {
        vocab: 6,
        d_model: 4,
        layers: 1,
        heads: 2,
        mlp_hidden: 4,
        max_len: 12,
        lora_rank: 2,
        lora_alpha: 4.0,
    };
    let mut lm = DecoderLm::new(&mut store, cfg, rng.gen())?;
    lm.attach_lora(&mut store, rng.gen())?;
    for (id, p) in store.iter().map(|(id, p)| (id, p.clone())).collect::<Vec<_>>() {
        if p.group == Group::LmLora {
            *store.get_mut(id) = Tensor::uniform(p.value.shape(), 0.5, &mut rng);
        }
    }
    let s = rng.gen_range(1..3);
    let speech = input_param(&mut store, "speech", s, 4, &mut rng);
    let ids: Vec<usize> = (0..rng.gen_range(1..4)).map(|_| rng.gen_range(3..6)).collect();
    Ok((
        store,
        Box::new(move |g| {
            let sp = g.param(speech);
            lm.transcript_loss(g, sp, &ids)
        }),
    ))
}

/// Names of every check in the suite.
pub fn check_names() -> Vec<String> {
    let mut names = vec!["attention".to_string()];
    names.extend(Mechanism::ALL.iter().map(|m| format!("fusion/{}", m.key())));
    names.extend(
        ["projector/linear", "projector/qformer", "lora", "encoder-lora", "ctc", "decoder-lm"]
            .iter()
            .map(|s| s.to_string()),
    );
    names
}

fn make_case(name: &str, seed: u64) -> Result<Case> {
    if let Some(m) = name.strip_prefix("fusion/") {
        return fusion_case(m.parse()?, seed);
    }
    match name {
        "attention" => attention_case(seed),
        "projector/linear" => linear_projector_case(seed),
        "projector/qformer" => qformer_case(seed),
        "lora" => lora_case(seed),
        "encoder-lora" => encoder_lora_case(seed),
        "ctc" => ctc_case(seed),
        "decoder-lm" => decoder_case(seed),
        other => Err(crate::error::Error::Invalid(format!("unknown gradient check {other:?}"))),
    }
}

/// Runs one named check over `seeds` random instances.
pub fn run_check(name: &str, seeds: usize, base_seed: u64) -> Result<GradCheckResult> {
    let mut worst = (0.0, String::new());
    for k in 0..seeds {
        let (store, loss) = make_case(name, base_seed.wrapping_add(k as u64))?;
        let (err, param) = check_store(&store, loss.as_ref())?;
        if err > worst.0 || worst.1.is_empty() {
            worst = (err, param);
        }
    }
    Ok(GradCheckResult {
        name: name.to_string(),
        seeds,
        max_rel_error: worst.0,
        worst_param: worst.1,
    })
}

/// The full suite.
pub fn run_suite(seeds: usize, base_seed: u64) -> Result<Vec<GradCheckResult>> {
    check_names().iter().map(|n| run_check(n, seeds, base_seed)).collect()
}
