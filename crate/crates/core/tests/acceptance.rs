//! Acceptance checks. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails unexpectedly.

use std::collections::{BTreeMap, HashMap, VecDeque};
use std::fs;
use std::panic::{self, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use fusion_asr::config::ExperimentConfig;
use fusion_asr::data::DataConfig;
use fusion_asr::decoder::LmConfig;
use fusion_asr::eval::{edit_distance, score_utterance, unit_for, Unit, CHAR_LANGUAGES, LANGUAGES};
use fusion_asr::experiment::{build_model, ensure_data, ensure_pretrained, run_experiment, train_run, Layout, RunSummary};
use fusion_asr::fusion::{fuse_tensors, init_fusion, Mechanism, StreamChoice};
use fusion_asr::gradcheck::{run_suite, MAX_REL_ERROR};
use fusion_asr::lora::{lora_forward, LoraAdapter};
use fusion_asr::losses::{ctc_collapse, ctc_loss, CtcTarget, BLANK};
use fusion_asr::model::ModelConfig;
use fusion_asr::params::{Graph, Group, GroupSet, ParamStore};
use fusion_asr::repetition::remove_ngram_repetitions;
use fusion_asr::tensor::Tensor;

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn gradient_suite() -> Outcome {
    let started = Instant::now();
    let results = run_suite(20, 1000).map_err(|e| e.to_string())?;
    let elapsed = started.elapsed();
    let worst = results.iter().map(|r| r.max_rel_error).fold(0.0, f64::max);
    for r in &results {
        ensure(r.seeds >= 20, || format!("{} ran only {} seeds", r.name, r.seeds))?;
        ensure(r.passed(), || format!("{} has relative error {:.3e} at {}", r.name, r.max_rel_error, r.worst_param))?;
    }
    let names: Vec<&str> = results.iter().map(|r| r.name.as_str()).collect();
    for required in ["attention", "projector/linear", "projector/qformer", "lora", "ctc", "decoder-lm"] {
        ensure(names.iter().any(|n| n.starts_with(required)), || format!("no {required} check"))?;
    }
    for m in Mechanism::ALL {
        let name = format!("fusion/{m}");
        ensure(names.contains(&name.as_str()), || format!("no {name} check"))?;
    }
    ensure(elapsed < Duration::from_secs(60), || format!("took {elapsed:.1?}"))?;
    Ok(format!(
        "{} checks x 20 seeds, worst rel error {worst:.2e} < {MAX_REL_ERROR:e}, {:.1}s",
        results.len(),
        elapsed.as_secs_f64()
    ))
}

/// -ln of the summed probability of every label path collapsing to `target`.
fn ctc_by_enumeration(log_probs: &Tensor, target: &[usize]) -> f64 {
    let (frames, vocab) = (log_probs.rows(), log_probs.cols());
    let mut total = 0.0;
    for code in 0..vocab.pow(frames as u32) {
        let mut c = code;
        let path: Vec<usize> = (0..frames)
            .map(|_| {
                let k = c % vocab;
                c /= vocab;
                k
            })
            .collect();
        if ctc_collapse(&path) == target {
            total += path.iter().enumerate().map(|(t, &k)| log_probs.get(t, k)).sum::<f64>().exp();
        }
    }
    -total.ln()
}

fn ctc_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(29);
    let (mut cases, mut worst) = (0, 0.0f64);
    while cases < 600 {
        let frames = rng.gen_range(1..=6);
        let vocab = rng.gen_range(2..=4);
        let len = rng.gen_range(1..=3);
        let tokens: Vec<usize> = (0..len).map(|_| rng.gen_range(1..vocab)).collect();
        let target = CtcTarget::new(tokens.clone()).map_err(|e| e.to_string())?;
        if target.min_frames() > frames {
            continue;
        }
        let logits = Tensor::uniform(&[frames, vocab], 3.0, &mut rng);
        let lp = logits.log_softmax_rows().map_err(|e| e.to_string())?;
        let got = ctc_loss(&lp, &target).map_err(|e| e.to_string())?;
        let want = ctc_by_enumeration(&lp, &tokens);
        let err = (got - want).abs();
        worst = worst.max(err);
        ensure(err <= 1e-9, || format!("T={frames} V={vocab} target {tokens:?}: {got} vs {want}"))?;
        cases += 1;
    }
    assert_eq!(BLANK, 0);
    Ok(format!("{cases} feasible cases, max abs diff {worst:.1e}"))
}

/// All lists over {0,1,2} of length at most 6.
fn all_lists() -> Vec<Vec<u8>> {
    let mut out = vec![Vec::new()];
    let mut frontier = vec![Vec::new()];
    for _ in 0..6 {
        let mut next = Vec::new();
        for l in &frontier {
            for s in 0..3u8 {
                let mut m: Vec<u8> = l.clone();
                m.push(s);
                next.push(m);
            }
        }
        out.extend(next.iter().cloned());
        frontier = next;
    }
    out
}

/// Edit graph over the lists: one edge per single insertion, deletion or
/// substitution that stays within length 6. Shortest paths never need a
/// longer intermediate, since deletions can always come first.
fn edit_graph(lists: &[Vec<u8>]) -> Vec<Vec<usize>> {
    let index: HashMap<&[u8], usize> = lists.iter().enumerate().map(|(i, l)| (l.as_slice(), i)).collect();
    lists
        .iter()
        .map(|l| {
            let mut nbrs = Vec::new();
            for i in 0..l.len() {
                let mut d = l.clone();
                d.remove(i);
                nbrs.push(index[d.as_slice()]);
                for s in 0..3u8 {
                    if s != l[i] {
                        let mut m = l.clone();
                        m[i] = s;
                        nbrs.push(index[m.as_slice()]);
                    }
                }
            }
            if l.len() < 6 {
                for i in 0..=l.len() {
                    for s in 0..3u8 {
                        let mut m = l.clone();
                        m.insert(i, s);
                        nbrs.push(index[m.as_slice()]);
                    }
                }
            }
            nbrs
        })
        .collect()
}

fn edit_distance_oracle() -> Outcome {
    let lists = all_lists();
    let graph = edit_graph(&lists);
    let mut pairs = 0usize;
    let mut dist = vec![usize::MAX; lists.len()];
    let mut queue = VecDeque::new();
    for (src, a) in lists.iter().enumerate() {
        dist.fill(usize::MAX);
        dist[src] = 0;
        queue.push_back(src);
        while let Some(u) = queue.pop_front() {
            for &v in &graph[u] {
                if dist[v] == usize::MAX {
                    dist[v] = dist[u] + 1;
                    queue.push_back(v);
                }
            }
        }
        for (dst, b) in lists.iter().enumerate() {
            let got = edit_distance(a, b);
            ensure(got.errors() == dist[dst], || format!("{a:?} -> {b:?}: {} vs {}", got.errors(), dist[dst]))?;
            ensure(a.len() + got.insertions == b.len() + got.deletions, || format!("{a:?} -> {b:?}: inconsistent counts"))?;
            pairs += 1;
        }
    }

    for lang in LANGUAGES {
        let unit = unit_for(lang).map_err(|e| e.to_string())?;
        let want = if CHAR_LANGUAGES.contains(&lang) { Unit::Char } else { Unit::Word };
        ensure(unit == want, || format!("{lang} routed to {unit:?}"))?;
        let s = score_utterance("u", "ab cd", "ab ce", lang).map_err(|e| e.to_string())?;
        let (ref_len, errors) = if want == Unit::Char { (4, 1) } else { (2, 1) };
        ensure(s.unit == want && s.ref_len == ref_len && s.counts.errors() == errors, || {
            format!("{lang}: {:?} over {} units with {} errors", s.unit, s.ref_len, s.counts.errors())
        })?;
    }
    ensure(unit_for("xx").is_err(), || "unknown language accepted".into())?;
    Ok(format!("{pairs} list pairs match BFS distances; 11 languages routed (ja, ko, th by character)"))
}

fn degeneracy_chain() -> Outcome {
    let (d_w, d_m) = (8, 6);
    let mut rng = ChaCha8Rng::seed_from_u64(41);
    let mut bitwise = 0;
    for trial in 0..10u64 {
        let t = rng.gen_range(1..8);
        let hw = Tensor::uniform(&[t, d_w], 2.0, &mut rng);
        let hm = Tensor::uniform(&[t, d_m], 2.0, &mut rng);
        let dfc = Tensor::concat_cols(&[&hw, &hm]).map_err(|e| e.to_string())?;
        for m in Mechanism::ALL {
            let mut store = ParamStore::new();
            let p = init_fusion(&mut store, m, d_w, d_m, 2, trial).map_err(|e| e.to_string())?;
            for a in [&p.attn_wm, &p.attn_mw].into_iter().flatten() {
                store.get_mut(a.w_o).fill(0.0);
            }
            let out = fuse_tensors(&store, &hw, &hm, &p).map_err(|e| e.to_string())?;
            let want = match m {
                Mechanism::ResUniCaf => hw.clone(),
                Mechanism::ResGatedBiCafDfc => Tensor::concat_cols(&[&dfc, &dfc]).map_err(|e| e.to_string())?,
                _ => dfc.clone(),
            };
            ensure(out.shape() == want.shape(), || format!("{m}: shape {:?}", out.shape()))?;
            let diff = out.max_abs_diff(&want);
            ensure(diff <= 1e-12, || format!("{m}: differs by {diff:e}"))?;
            bitwise += usize::from(out == want);
        }
    }
    Ok(format!("5 mechanisms x 10 inputs reduce as expected, {bitwise}/50 bitwise"))
}

fn sweep_dir() -> PathBuf {
    std::env::temp_dir().join(format!("fusion-asr-acceptance-{}", std::process::id()))
}

struct Sweep {
    summaries: BTreeMap<String, RunSummary>,
    elapsed: Duration,
}

fn run_sweep() -> Result<Sweep, String> {
    let cfg = ExperimentConfig::default();
    let out = sweep_dir();
    let _ = fs::remove_dir_all(&out);
    let started = Instant::now();
    let mut summaries = BTreeMap::new();
    for streams in cfg.sweep_streams() {
        let c = ExperimentConfig { fusion: streams, ..cfg.clone() };
        let s = run_experiment(&c, &out).map_err(|e| format!("{streams}: {e}"))?;
        summaries.insert(streams.to_string(), s);
    }
    let elapsed = started.elapsed();
    let _ = fs::remove_dir_all(&out);
    Ok(Sweep { summaries, elapsed })
}

fn final_accuracy(s: &RunSummary) -> Vec<(String, f64)> {
    s.stages
        .last()
        .map(|st| st.splits.iter().map(|sp| (sp.split.clone(), sp.token_accuracy)).collect())
        .unwrap_or_default()
}

fn complementarity(sweep: &Result<Sweep, String>) -> Outcome {
    let sweep = sweep.as_ref().map_err(Clone::clone)?;
    let get = |k: &str| sweep.summaries.get(k).ok_or_else(|| format!("no {k} run"));
    let w = final_accuracy(get("whisper-only")?);
    let m = final_accuracy(get("mhubert-only")?);
    let mut margin = f64::INFINITY;
    for mech in Mechanism::ALL {
        let acc = final_accuracy(get(mech.key())?);
        ensure(!acc.is_empty(), || format!("{mech}: no eval splits"))?;
        for (i, (split, a)) in acc.iter().enumerate() {
            let baseline = w[i].1.max(m[i].1);
            margin = margin.min(a - baseline);
            ensure(a - baseline >= 0.25, || {
                format!("{mech} on {split}: {:.1}% vs baseline {:.1}%", 100.0 * a, 100.0 * baseline)
            })?;
        }
    }
    ensure(sweep.elapsed < Duration::from_secs(600), || format!("sweep took {:.0?}", sweep.elapsed))?;
    Ok(format!(
        "smallest margin over the better baseline {:.1} points; 7 runs in {:.0}s",
        100.0 * margin,
        sweep.elapsed.as_secs_f64()
    ))
}

fn stage_trend(sweep: &Result<Sweep, String>) -> Outcome {
    let sweep = sweep.as_ref().map_err(Clone::clone)?;
    let mut lines = Vec::new();
    for mech in Mechanism::ALL {
        let s = sweep.summaries.get(mech.key()).ok_or_else(|| format!("no {mech} run"))?;
        let losses: Vec<f64> = s.stages.iter().filter_map(|st| st.final_valid_loss).collect();
        ensure(losses.len() == 2, || format!("{mech}: {} stage losses", losses.len()))?;
        ensure(losses[1] <= losses[0], || format!("{mech}: {:.4} -> {:.4}", losses[0], losses[1]))?;
        lines.push(format!("{mech} {:.3}->{:.3}", losses[0], losses[1]));
    }
    Ok(lines.join(", "))
}

fn tiny_config() -> ExperimentConfig {
    let model = ModelConfig {
        d_whisper: 16,
        d_mhubert: 12,
        encoder_heads: 2,
        fusion_heads: 2,
        lm: LmConfig {
            d_model: 16,
            layers: 1,
            heads: 2,
            mlp_hidden: 32,
            ..LmConfig::default()
        },
        ..ModelConfig::default()
    };
    let mut cfg = ExperimentConfig { model, ..ExperimentConfig::default() };
    cfg.data.train_utts = 40;
    cfg.data.valid_fraction = 0.2;
    cfg.data.generator = DataConfig::default();
    cfg.pretrain.ctc.epochs = 1;
    cfg.pretrain.lm.steps = 20;
    for s in &mut cfg.stages {
        s.epochs = 2;
    }
    cfg.eval.utts_per_split = 10;
    cfg
}

fn groups(gs: &[Group]) -> GroupSet {
    gs.iter().copied().collect()
}

fn freeze_contract() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut cfg = tiny_config();
    cfg.fusion = StreamChoice::Fused(Mechanism::ResGatedBiCafDfc);
    let layout = Layout::new(dir.path());
    let data = ensure_data(&cfg, &layout).map_err(|e| e.to_string())?;
    let components = ensure_pretrained(&cfg, &layout, &data).map_err(|e| e.to_string())?;
    let encoders = groups(&[Group::Encoder, Group::EncoderLora]);
    let lm = groups(&[Group::Lm, Group::LmLora]);
    let (_, initial) = build_model(&cfg, &components).map_err(|e| e.to_string())?;
    let enc0 = initial.snapshot(&encoders);
    let lm0 = initial.snapshot(&lm);
    let lm_base0 = initial.snapshot(&groups(&[Group::Lm]));
    let moving0 = initial.snapshot(&groups(&[Group::Projector, Group::Fusion]));
    let mut checked = Vec::new();
    train_run(&cfg, &layout, &data, &components, |stage, _, store| {
        let bad = |what: &str| fusion_asr::Error::Invalid(format!("{} changed {what}", stage.name));
        if store.snapshot(&encoders) != enc0 {
            return Err(bad("encoder parameters"));
        }
        if stage.name == "stage1" && store.snapshot(&lm) != lm0 {
            return Err(bad("LM parameters"));
        }
        if store.snapshot(&groups(&[Group::Lm])) != lm_base0 {
            return Err(bad("the LM base weights"));
        }
        if store.snapshot(&groups(&[Group::Projector, Group::Fusion])) == moving0 {
            return Err(bad("nothing trainable"));
        }
        checked.push(stage.name.clone());
        Ok(())
    })
    .map_err(|e| e.to_string())?;
    let n: usize = enc0.iter().chain(&lm0).map(|(_, t)| t.numel()).sum();
    Ok(format!(
        "after {}: encoders identical, LM identical after stage1 ({n} frozen scalars compared)",
        checked.join(" and ")
    ))
}

fn lora_identity_and_merge() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(53);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let (d_in, d_out) = (rng.gen_range(1..9), rng.gen_range(1..9));
        let rank = rng.gen_range(1..5);
        let alpha = rng.gen_range(0.5..16.0);
        let rows = rng.gen_range(1..6);
        let mut store = ParamStore::new();
        let w = store.add("w", Group::Lm, Tensor::uniform(&[d_out, d_in], 1.0, &mut rng), true);
        let ad = LoraAdapter::new(&mut store, "w", Group::LmLora, d_in, d_out, rank, alpha, &mut rng).map_err(|e| e.to_string())?;
        let x = Tensor::uniform(&[rows, d_in], 2.0, &mut rng);
        let forward = |store: &ParamStore| -> Result<Tensor, String> {
            let mut g = Graph::frozen(store);
            let xv = g.input(x.clone());
            let wv = g.param(w);
            let y = lora_forward(&mut g, xv, wv, &ad).map_err(|e| e.to_string())?;
            Ok(g.value(y).clone())
        };
        let base = x.matmul_nt(store.get(w)).map_err(|e| e.to_string())?;
        let zero_b = forward(&store)?;
        ensure(zero_b == base, || format!("B = 0 differs from the base by {:e}", zero_b.max_abs_diff(&base)))?;

        *store.get_mut(ad.b) = Tensor::uniform(&[d_out, rank], 1.0, &mut rng);
        let unmerged = forward(&store)?;
        let merged_w = ad.merge(&store, store.get(w)).map_err(|e| e.to_string())?;
        let merged = x.matmul_nt(&merged_w).map_err(|e| e.to_string())?;
        let diff = unmerged.max_abs_diff(&merged);
        worst = worst.max(diff);
        ensure(diff <= 1e-12, || format!("merged vs unmerged differ by {diff:e}"))?;
    }
    Ok(format!("100 cases, zero-B output exact, merge max diff {worst:.1e}"))
}

fn is_subsequence<T: PartialEq>(sub: &[T], full: &[T]) -> bool {
    let mut it = full.iter();
    sub.iter().all(|s| it.any(|f| f == s))
}

/// Documented length of the result for twelve copies with blocks of five.
const TWELVE_COPIES_DOCUMENTED: usize = 2;

fn repetition_removal() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(61);
    for _ in 0..1000 {
        let len = rng.gen_range(0..40);
        let alphabet = rng.gen_range(1..4);
        let tokens: Vec<u8> = (0..len).map(|_| rng.gen_range(0..alphabet)).collect();
        let n = rng.gen_range(1..7);
        let once = remove_ngram_repetitions(&tokens, n);
        ensure(remove_ngram_repetitions(&once, n) == once, || format!("not idempotent on {tokens:?}, n={n}"))?;
        ensure(is_subsequence(&once, &tokens), || format!("not a subsequence on {tokens:?}, n={n}"))?;
    }
    let abcde: Vec<char> = "abcdeabcde".chars().collect();
    ensure(remove_ngram_repetitions(&abcde, 5) == abcde[..5], || "abcdeabcde did not reduce to abcde".into())?;
    let abab: Vec<char> = "abab".chars().collect();
    ensure(remove_ngram_repetitions(&abab, 5) == abab, || "abab changed".into())?;
    let twelve = vec!['x'; 12];
    let got = remove_ngram_repetitions(&twelve, 5);
    ensure(got.len() == TWELVE_COPIES_DOCUMENTED, || {
        format!(
            "x*12 with n=5 gives {} copies, documented {TWELVE_COPIES_DOCUMENTED}; the scan rule drops one block of \
             five and leaves seven, and any rule keeping one copy of a repeated block keeps at least five",
            got.len()
        )
    })?;
    Ok("1000 random lists idempotent and subsequences; three documented examples reproduce".into())
}

fn tree_bytes(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    fn walk(root: &Path, dir: &Path, out: &mut BTreeMap<PathBuf, Vec<u8>>) {
        let Ok(entries) = fs::read_dir(dir) else { return };
        for e in entries.flatten() {
            let p = e.path();
            if p.is_dir() {
                walk(root, &p, out);
            } else if let Ok(bytes) = fs::read(&p) {
                out.insert(p.strip_prefix(root).unwrap().to_path_buf(), bytes);
            }
        }
    }
    let mut out = BTreeMap::new();
    walk(root, root, &mut out);
    out
}

fn determinism() -> Outcome {
    let mut cfg = tiny_config();
    cfg.fusion = StreamChoice::Fused(Mechanism::ResGatedBiCaf);
    let (a, b) = (tempfile::tempdir().map_err(|e| e.to_string())?, tempfile::tempdir().map_err(|e| e.to_string())?);
    run_experiment(&cfg, a.path()).map_err(|e| e.to_string())?;
    run_experiment(&cfg, b.path()).map_err(|e| e.to_string())?;
    let run = Path::new("runs").join(cfg.fusion.key());
    let mut compared = 0;
    for sub in ["reports", "hyps"] {
        let ta = tree_bytes(&a.path().join(&run).join(sub));
        let tb = tree_bytes(&b.path().join(&run).join(sub));
        ensure(!ta.is_empty(), || format!("no {sub} written"))?;
        ensure(ta.keys().eq(tb.keys()), || format!("{sub} file sets differ"))?;
        for (k, v) in &ta {
            ensure(tb[k] == *v, || format!("{} differs", k.display()))?;
            compared += 1;
        }
    }
    let summary = |d: &Path| fs::read(d.join(&run).join("summary.json")).map_err(|e| e.to_string());
    ensure(summary(a.path())? == summary(b.path())?, || "summary.json differs".into())?;
    Ok(format!("{} files byte-identical across two runs", compared + 1))
}

fn guarded(f: impl FnOnce() -> Outcome) -> Outcome {
    panic::catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
        let msg = p
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_default();
        Err(format!("panicked: {msg}"))
    })
}

fn main() -> ExitCode {
    // Criteria whose documented expectation contradicts the documented rule.
    let known_failures = [9];

    let sweep = panic::catch_unwind(run_sweep).unwrap_or_else(|_| Err("sweep panicked".into()));
    let results: Vec<(usize, &str, Outcome)> = vec![
        (1, "gradient suite", guarded(gradient_suite)),
        (2, "CTC against path enumeration", guarded(ctc_oracle)),
        (3, "edit distance against exhaustive search", guarded(edit_distance_oracle)),
        (4, "fusion degeneracy chain", guarded(degeneracy_chain)),
        (5, "fused streams beat single encoders", guarded(|| complementarity(&sweep))),
        (6, "stage 2 improves validation loss", guarded(|| stage_trend(&sweep))),
        (7, "freeze contract", guarded(freeze_contract)),
        (8, "LoRA identity and merge", guarded(lora_identity_and_merge)),
        (9, "repetition removal", guarded(repetition_removal)),
        (10, "end-to-end determinism", guarded(determinism)),
    ];
    let mut unexpected = 0;
    for (id, title, outcome) in &results {
        match outcome {
            Ok(detail) => println!("AC{id:<2} PASS  {title}: {detail}"),
            Err(why) => {
                let known = known_failures.contains(id);
                unexpected += usize::from(!known);
                let tag = if known { " (known)" } else { "" };
                println!("AC{id:<2} FAIL{tag}  {title}: {why}");
            }
        }
    }
    let passed = results.iter().filter(|r| r.2.is_ok()).count();
    println!("{passed}/{} criteria passed", results.len());
    if unexpected > 0 {
        ExitCode::FAILURE
    } else {
        ExitCode::SUCCESS
    }
}
