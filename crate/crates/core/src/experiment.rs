//! End-to-end runs: data, pre-adapted components, two-stage training,
//! decoding, scoring and cross-run comparison. Every artifact lives at a
//! fixed path under one output root:
//!
//! ```text
//! <out>/data/{train,valid,<split>}.jsonl, data/config.json
//! <out>/pretrained/components.ckpt, config.json, report.json
//! <out>/runs/<streams>/manifest.toml
//!                     metrics/<stage>.jsonl
//!                     checkpoints/<stage>-epoch<k>.ckpt
//!                     hyps/<stage>/<split>.jsonl, hyps/<stage>/accuracy.json
//!                     reports/<stage>/<split>.{json,txt}
//!                     summary.json
//! <out>/comparison.{md,json}
//! ```

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::data::{generate_dataset, read_dataset, render_tokens, split_validation, write_dataset, SyntheticUtterance};
use crate::decoder::pretrain_lm;
use crate::encoder::{pretrain_ctc_encoder, PretrainReport, View};
use crate::error::{Error, Result};
use crate::eval::{aggregate, read_transcript_records, score_records, token_accuracy, EvalReport, TranscriptRecord};
use crate::fusion::StreamChoice;
use crate::model::SpeechLlm;
use crate::params::{Group, GroupSet, ParamStore};
use crate::train::checkpoint::{load_checkpoint, restore, save_checkpoint};
use crate::train::stage::{encode_all, run_stage, EpochMetrics, StageConfig, StageOutputs};

/// All artifact locations under one output root.
#[derive(Clone, Debug)]
pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Layout { root: root.into() }
    }

    pub fn data_dir(&self) -> PathBuf {
        self.root.join("data")
    }

    pub fn data_file(&self, split: &str) -> PathBuf {
        self.data_dir().join(format!("{split}.jsonl"))
    }

    pub fn pretrained_dir(&self) -> PathBuf {
        self.root.join("pretrained")
    }

    pub fn pretrained_checkpoint(&self) -> PathBuf {
        self.pretrained_dir().join("components.ckpt")
    }

    pub fn run_dir(&self, streams: StreamChoice) -> PathBuf {
        self.root.join("runs").join(streams.key())
    }
}

/// Files inside one run directory.
#[derive(Clone, Debug)]
pub struct RunLayout {
    pub dir: PathBuf,
}

impl RunLayout {
    pub fn manifest(&self) -> PathBuf {
        self.dir.join("manifest.toml")
    }

    pub fn metrics(&self, stage: &str) -> PathBuf {
        self.dir.join("metrics").join(format!("{stage}.jsonl"))
    }

    pub fn checkpoint_dir(&self) -> PathBuf {
        self.dir.join("checkpoints")
    }

    pub fn checkpoint(&self, stage: &str, epoch: usize) -> PathBuf {
        self.checkpoint_dir().join(format!("{stage}-epoch{epoch}.ckpt"))
    }

    pub fn hyps(&self, stage: &str, split: &str) -> PathBuf {
        self.dir.join("hyps").join(stage).join(format!("{split}.jsonl"))
    }

    pub fn accuracy(&self, stage: &str) -> PathBuf {
        self.dir.join("hyps").join(stage).join("accuracy.json")
    }

    pub fn report(&self, stage: &str, split: &str, ext: &str) -> PathBuf {
        self.dir.join("reports").join(stage).join(format!("{split}.{ext}"))
    }

    pub fn summary(&self) -> PathBuf {
        self.dir.join("summary.json")
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
}

/// Writes `fingerprint` to `path`, or checks that an earlier run wrote the
/// same one. Returns whether the artifacts next to it can be reused.
fn check_fingerprint(path: &Path, fingerprint: &serde_json::Value) -> Result<bool> {
    if path.exists() {
        let existing: serde_json::Value = read_json(path)?;
        if &existing != fingerprint {
            return Err(Error::Config(format!(
                "{} was produced by a different config; choose another output directory",
                path.display()
            )));
        }
        return Ok(true);
    }
    Ok(false)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Datasets {
    pub train: Vec<SyntheticUtterance>,
    pub valid: Vec<SyntheticUtterance>,
    /// Evaluation splits in config order.
    pub splits: Vec<(String, Vec<SyntheticUtterance>)>,
}

fn data_seed(seed: u64, offset: u64) -> u64 {
    seed.wrapping_mul(1000).wrapping_add(offset)
}

/// Generates the datasets, or reads them back if an earlier run with the
/// same data settings wrote them.
pub fn ensure_data(cfg: &ExperimentConfig, layout: &Layout) -> Result<Datasets> {
    let fingerprint = serde_json::json!({
        "seed": cfg.seed,
        "data": cfg.data,
        "splits": cfg.eval.splits,
        "utts_per_split": cfg.eval.utts_per_split,
    });
    let stamp = layout.data_dir().join("config.json");
    if check_fingerprint(&stamp, &fingerprint)? {
        return Ok(Datasets {
            train: read_dataset(&layout.data_file("train"))?,
            valid: read_dataset(&layout.data_file("valid"))?,
            splits: cfg
                .eval
                .splits
                .iter()
                .map(|s| Ok((s.clone(), read_dataset(&layout.data_file(s))?)))
                .collect::<Result<_>>()?,
        });
    }
    let gen = &cfg.data.generator;
    let pool = generate_dataset(gen, data_seed(cfg.seed, 1), cfg.data.train_utts, &cfg.data.langs)?;
    let (train, valid) = split_validation(pool, cfg.data.valid_fraction, data_seed(cfg.seed, 2));
    if train.is_empty() || valid.is_empty() {
        return Err(Error::Config("data.valid_fraction leaves an empty train or valid split".into()));
    }
    let splits = cfg
        .eval
        .splits
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let d = generate_dataset(gen, data_seed(cfg.seed, 10 + i as u64), cfg.eval.utts_per_split, &cfg.data.langs)?;
            Ok((s.clone(), d))
        })
        .collect::<Result<Vec<_>>>()?;
    fs::create_dir_all(layout.data_dir())?;
    write_dataset(&layout.data_file("train"), &train)?;
    write_dataset(&layout.data_file("valid"), &valid)?;
    for (name, d) in &splits {
        write_dataset(&layout.data_file(name), d)?;
    }
    write_json(&stamp, &fingerprint)?;
    Ok(Datasets { train, valid, splits })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComponentReport {
    pub whisper_ctc: PretrainReport,
    pub mhubert_ctc: PretrainReport,
    /// Copy-task loss at every pretraining step.
    pub lm_losses: Vec<f64>,
}

/// Groups shared by every run: the two encoders and the base decoder.
pub fn component_groups() -> GroupSet {
    GroupSet::from([Group::Encoder, Group::EncoderLora, Group::Lm])
}

/// Pre-adapts both encoders with CTC (LoRA only for the Whisper-like one,
/// full fine-tuning for the mHuBERT-like one) and pretrains the decoder,
/// or loads the result of an earlier identical pretraining.
pub fn ensure_pretrained(cfg: &ExperimentConfig, layout: &Layout, data: &Datasets) -> Result<ParamStore> {
    let fingerprint = serde_json::json!({
        "seed": cfg.seed,
        "data": cfg.data,
        "model": cfg.model,
        "pretrain": cfg.pretrain,
    });
    let stamp = layout.pretrained_dir().join("config.json");
    if check_fingerprint(&stamp, &fingerprint)? {
        return Ok(load_checkpoint(&layout.pretrained_checkpoint())?.store);
    }
    let mut store = ParamStore::new();
    let model = SpeechLlm::build(
        &mut store,
        &cfg.model,
        &cfg.projector,
        cfg.data.generator.d_raw,
        StreamChoice::WhisperOnly,
        cfg.seed,
    )?;
    let symbols = cfg.data.generator.symbols;
    let ctc = &cfg.pretrain.ctc;
    let whisper_ctc = pretrain_ctc_encoder(
        &mut store,
        &model.whisper,
        View::Whisper,
        &data.train,
        symbols,
        &GroupSet::from([Group::EncoderLora]),
        ctc,
        data_seed(cfg.seed, 101),
    )?;
    let mhubert_ctc = pretrain_ctc_encoder(
        &mut store,
        &model.mhubert,
        View::Mhubert,
        &data.train,
        symbols,
        &GroupSet::from([Group::Encoder]),
        ctc,
        data_seed(cfg.seed, 102),
    )?;
    let lm_losses = pretrain_lm(&mut store, &model.lm, &cfg.pretrain.lm, data_seed(cfg.seed, 103))?;
    let components = store.subset(&component_groups());
    fs::create_dir_all(layout.pretrained_dir())?;
    save_checkpoint(
        &layout.pretrained_checkpoint(),
        &components,
        &BTreeMap::from([("kind".to_string(), "pretrained-components".to_string())]),
    )?;
    write_json(
        &layout.pretrained_dir().join("report.json"),
        &ComponentReport {
            whisper_ctc,
            mhubert_ctc,
            lm_losses,
        },
    )?;
    write_json(&stamp, &fingerprint)?;
    Ok(components)
}

/// The config a run actually used: the sweep list dropped and the streams
/// fixed, so it can be fed back in to repeat the run.
pub fn resolved_config(cfg: &ExperimentConfig, streams: StreamChoice) -> ExperimentConfig {
    ExperimentConfig {
        fusion: streams,
        sweep: None,
        ..cfg.clone()
    }
}

/// Builds the model for `cfg.fusion` with pretrained components loaded.
pub fn build_model(cfg: &ExperimentConfig, components: &ParamStore) -> Result<(SpeechLlm, ParamStore)> {
    let mut store = ParamStore::new();
    let model = SpeechLlm::build(
        &mut store,
        &cfg.model,
        &cfg.projector,
        cfg.data.generator.d_raw,
        cfg.fusion,
        cfg.seed,
    )?;
    store.load_matching(components)?;
    Ok((model, store))
}

/// Runs every stage in order, writing the run manifest, metrics and
/// per-epoch checkpoints. `after_stage` sees the parameters left by each
/// stage.
pub fn train_run(
    cfg: &ExperimentConfig,
    layout: &Layout,
    data: &Datasets,
    components: &ParamStore,
    mut after_stage: impl FnMut(&StageConfig, &SpeechLlm, &ParamStore) -> Result<()>,
) -> Result<Vec<Vec<EpochMetrics>>> {
    let run = RunLayout {
        dir: layout.run_dir(cfg.fusion),
    };
    fs::create_dir_all(&run.dir)?;
    fs::write(run.manifest(), resolved_config(cfg, cfg.fusion).to_toml()?)?;
    let (model, mut store) = build_model(cfg, components)?;
    let mut history = Vec::with_capacity(cfg.stages.len());
    for (i, stage) in cfg.stages.iter().enumerate() {
        let outputs = StageOutputs {
            checkpoint_dir: Some(run.checkpoint_dir()),
            metrics_path: Some(run.metrics(&stage.name)),
        };
        let m = run_stage(
            &model,
            &mut store,
            stage,
            &data.train,
            &data.valid,
            data_seed(cfg.seed, 200 + i as u64),
            &outputs,
        )?;
        after_stage(stage, &model, &store)?;
        history.push(m);
    }
    Ok(history)
}

/// Greedy transcripts of one split plus token accuracy over symbols.
pub fn decode_split(
    model: &SpeechLlm,
    store: &ParamStore,
    data: &[SyntheticUtterance],
    max_new: usize,
) -> Result<(Vec<TranscriptRecord>, f64)> {
    let cache = encode_all(model, store, data)?;
    let mut records = Vec::with_capacity(data.len());
    let mut pairs = Vec::with_capacity(data.len());
    for (u, enc) in data.iter().zip(&cache) {
        let hyp = model.transcribe(store, u, Some(enc), max_new)?;
        records.push(TranscriptRecord {
            utt_id: u.id.clone(),
            lang: u.lang.clone(),
            reference: u.text()?,
            hypothesis: render_tokens(&hyp, &u.lang)?,
        });
        pairs.push((u.tokens.clone(), hyp));
    }
    Ok((records, token_accuracy(&pairs)?))
}

pub fn write_records(path: &Path, records: &[TranscriptRecord]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let mut w = BufWriter::new(fs::File::create(path)?);
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

/// Decodes every eval split with the parameters left by `stage`.
pub fn decode_stage(
    cfg: &ExperimentConfig,
    run: &RunLayout,
    stage: &str,
    model: &SpeechLlm,
    store: &ParamStore,
    data: &Datasets,
) -> Result<()> {
    let mut accuracy = BTreeMap::new();
    for (split, utts) in &data.splits {
        let (records, acc) = decode_split(model, store, utts, cfg.eval.max_new_tokens)?;
        write_records(&run.hyps(stage, split), &records)?;
        accuracy.insert(split.clone(), acc);
    }
    write_json(&run.accuracy(stage), &accuracy)
}

/// Restores the parameters saved at the end of `stage`.
pub fn load_stage_checkpoint(cfg: &ExperimentConfig, run: &RunLayout, stage: &str, store: &mut ParamStore) -> Result<()> {
    let s = cfg
        .stages
        .iter()
        .find(|s| s.name == stage)
        .ok_or_else(|| Error::Config(format!("no stage named {stage:?}")))?;
    if s.epochs == 0 {
        return Err(Error::Config(format!("stage {stage:?} has no epochs and therefore no checkpoint")));
    }
    let ckpt = load_checkpoint(&run.checkpoint(stage, s.epochs))?;
    restore(store, &ckpt)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitResult {
    pub split: String,
    pub error_rate: f64,
    pub token_accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageResult {
    pub stage: String,
    pub final_train_loss: Option<f64>,
    pub final_valid_loss: Option<f64>,
    pub splits: Vec<SplitResult>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub streams: StreamChoice,
    pub projector: String,
    pub seed: u64,
    pub stages: Vec<StageResult>,
}

fn last_metrics(path: &Path) -> Result<Option<EpochMetrics>> {
    if !path.exists() {
        return Ok(None);
    }
    let text = fs::read_to_string(path)?;
    match text.lines().rfind(|l| !l.trim().is_empty()) {
        Some(line) => Ok(Some(serde_json::from_str(line)?)),
        None => Ok(None),
    }
}

/// Scores every decoded split of the run and writes reports and the run
/// summary.
pub fn score_run(cfg: &ExperimentConfig, run: &RunLayout) -> Result<RunSummary> {
    let mut stages = Vec::with_capacity(cfg.stages.len());
    for stage in &cfg.stages {
        let accuracy_path = run.accuracy(&stage.name);
        if !accuracy_path.exists() {
            return Err(Error::MissingReport(format!(
                "{} (decode the run first)",
                accuracy_path.display()
            )));
        }
        let accuracy: BTreeMap<String, f64> = read_json(&accuracy_path)?;
        let mut splits = Vec::with_capacity(cfg.eval.splits.len());
        for split in &cfg.eval.splits {
            let records = read_transcript_records(&run.hyps(&stage.name, split))?;
            let report = aggregate(&score_records(&records)?)?;
            write_json(&run.report(&stage.name, split, "json"), &report)?;
            fs::write(run.report(&stage.name, split, "txt"), report.to_table())?;
            splits.push(SplitResult {
                split: split.clone(),
                error_rate: report.overall.rate,
                token_accuracy: *accuracy
                    .get(split)
                    .ok_or_else(|| Error::MissingReport(format!("accuracy for split {split}")))?,
            });
        }
        let last = last_metrics(&run.metrics(&stage.name))?;
        stages.push(StageResult {
            stage: stage.name.clone(),
            final_train_loss: last.as_ref().map(|m| m.train_loss),
            final_valid_loss: last.as_ref().map(|m| m.valid_loss),
            splits,
        });
    }
    let summary = RunSummary {
        streams: cfg.fusion,
        projector: cfg.projector.key().to_string(),
        seed: cfg.seed,
        stages,
    };
    write_json(&run.summary(), &summary)?;
    Ok(summary)
}

/// The whole pipeline for `cfg.fusion`: data and pretrained components
/// (reused when already present under `out`), both stages, decoding after
/// each stage, scoring and the run summary.
pub fn run_experiment(cfg: &ExperimentConfig, out: &Path) -> Result<RunSummary> {
    cfg.validate()?;
    let layout = Layout::new(out);
    let data = ensure_data(cfg, &layout)?;
    let components = ensure_pretrained(cfg, &layout, &data)?;
    let run = RunLayout {
        dir: layout.run_dir(cfg.fusion),
    };
    train_run(cfg, &layout, &data, &components, |stage, model, store| {
        decode_stage(cfg, &run, &stage.name, model, store, &data)
    })?;
    score_run(cfg, &run)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComparisonCell {
    pub stage: String,
    pub split: String,
    pub error_rate: f64,
    pub token_accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub run: String,
    pub streams: StreamChoice,
    pub cells: Vec<ComparisonCell>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    /// `(stage, split)` pairs in first-seen order.
    pub columns: Vec<(String, String)>,
    pub rows: Vec<ComparisonRow>,
}

/// Collects the summaries of several runs into one table.
pub fn compare_mechanisms(run_dirs: &[PathBuf]) -> Result<Comparison> {
    if run_dirs.is_empty() {
        return Err(Error::Empty("run directories"));
    }
    let mut columns: Vec<(String, String)> = Vec::new();
    let mut rows = Vec::with_capacity(run_dirs.len());
    for dir in run_dirs {
        let path = RunLayout { dir: dir.clone() }.summary();
        if !path.exists() {
            return Err(Error::MissingReport(path.display().to_string()));
        }
        let summary: RunSummary = read_json(&path)?;
        let mut cells = Vec::new();
        for st in &summary.stages {
            for sp in &st.splits {
                let key = (st.stage.clone(), sp.split.clone());
                if !columns.contains(&key) {
                    columns.push(key);
                }
                cells.push(ComparisonCell {
                    stage: st.stage.clone(),
                    split: sp.split.clone(),
                    error_rate: sp.error_rate,
                    token_accuracy: sp.token_accuracy,
                });
            }
        }
        let run = dir
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_else(|| dir.display().to_string());
        rows.push(ComparisonRow {
            run,
            streams: summary.streams,
            cells,
        });
    }
    Ok(Comparison { columns, rows })
}

impl ComparisonRow {
    pub fn cell(&self, stage: &str, split: &str) -> Option<&ComparisonCell> {
        self.cells.iter().find(|c| c.stage == stage && c.split == split)
    }
}

impl Comparison {
    /// Two markdown tables, error rate (%) and token accuracy (%), one row
    /// per run and one column per stage and split. In each column every
    /// value that equals the best one at the printed precision is bold, so
    /// ties are all marked.
    pub fn to_markdown(&self) -> String {
        let mut out = String::new();
        self.table(&mut out, "WER/CER (%)", |c| c.error_rate, false);
        out.push('\n');
        self.table(&mut out, "Token accuracy (%)", |c| c.token_accuracy, true);
        out
    }

    fn table(&self, out: &mut String, title: &str, value: impl Fn(&ComparisonCell) -> f64, higher_is_better: bool) {
        let fmt = |v: f64| format!("{:.2}", 100.0 * v);
        let _ = writeln!(out, "### {title}\n");
        let mut header = String::from("| run |");
        let mut rule = String::from("|-----|");
        for (stage, split) in &self.columns {
            let _ = write!(header, " {stage} {split} |");
            rule.push_str("------|");
        }
        let _ = writeln!(out, "{header}\n{rule}");
        let best: Vec<Option<String>> = self
            .columns
            .iter()
            .map(|(stage, split)| {
                let vals = self.rows.iter().filter_map(|r| r.cell(stage, split)).map(&value);
                let best = if higher_is_better {
                    vals.fold(None, |b: Option<f64>, v| Some(b.map_or(v, |b| b.max(v))))
                } else {
                    vals.fold(None, |b: Option<f64>, v| Some(b.map_or(v, |b| b.min(v))))
                };
                best.map(fmt)
            })
            .collect();
        for row in &self.rows {
            let mut line = format!("| {} |", row.run);
            for ((stage, split), best) in self.columns.iter().zip(&best) {
                match row.cell(stage, split) {
                    Some(c) => {
                        let v = fmt(value(c));
                        if best.as_ref() == Some(&v) {
                            let _ = write!(line, " **{v}** |");
                        } else {
                            let _ = write!(line, " {v} |");
                        }
                    }
                    None => line.push_str(" - |"),
                }
            }
            let _ = writeln!(out, "{line}");
        }
    }
}

/// Writes `comparison.md` and `comparison.json` under `out`.
pub fn write_comparison(out: &Path, cmp: &Comparison) -> Result<()> {
    fs::create_dir_all(out)?;
    fs::write(out.join("comparison.md"), cmp.to_markdown())?;
    write_json(&out.join("comparison.json"), cmp)
}

/// Loads an eval report written by [`score_run`].
pub fn read_report(path: &Path) -> Result<EvalReport> {
    read_json(path)
}
