use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};

use fusion_asr::config::ExperimentConfig;
use fusion_asr::error::{Error, Result};
use fusion_asr::eval::{aggregate, read_aligned_transcripts, read_transcript_records, score_records};
use fusion_asr::experiment::{
    build_model, compare_mechanisms, decode_stage, ensure_data, ensure_pretrained, load_stage_checkpoint, run_experiment,
    score_run, train_run, write_comparison, Layout, RunLayout,
};
use fusion_asr::fusion::StreamChoice;
use fusion_asr::gradcheck::{run_suite, MAX_REL_ERROR};

#[derive(Parser)]
#[command(name = "fusion-asr", version, about = "Parallel-encoder fusion speech-LLM on a synthetic two-view task")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment config (TOML); defaults are used when absent.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output root for every artifact.
    #[arg(long, global = true, env = "FUSION_ASR_OUT", default_value = "fusion-asr-out")]
    out: PathBuf,
    /// Overrides the fusion mechanism or baseline of the config.
    #[arg(long, global = true)]
    fusion: Option<StreamChoice>,
    /// Small data, few epochs: a smoke run.
    #[arg(long, global = true)]
    quick: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the train/valid/eval datasets.
    GenData,
    /// Pre-adapt both encoders with CTC and pretrain the decoder.
    PretrainEncoders,
    /// Run the training stages for the configured mechanism.
    Train,
    /// Decode the eval splits with the checkpoint left by each stage.
    Decode {
        /// Only this stage.
        #[arg(long)]
        stage: Option<String>,
    },
    /// Score decoded runs, or transcript files given explicitly.
    Score(ScoreArgs),
    /// Tabulate several runs; defaults to every run under the output root.
    Compare { runs: Vec<PathBuf> },
    /// Finite-difference check of every trainable operation.
    GradCheck {
        #[arg(long, default_value_t = 20)]
        seeds: usize,
    },
    /// Full pipeline for every stream of the sweep, then the comparison.
    All,
}

#[derive(Args)]
struct ScoreArgs {
    /// JSONL with {utt_id, lang, ref, hyp} records.
    #[arg(long, conflicts_with_all = ["refs", "hyps", "langs"])]
    records: Option<PathBuf>,
    /// Line-aligned reference transcripts.
    #[arg(long, requires_all = ["hyps", "langs"])]
    refs: Option<PathBuf>,
    /// Line-aligned hypotheses.
    #[arg(long)]
    hyps: Option<PathBuf>,
    /// One language code per line.
    #[arg(long)]
    langs: Option<PathBuf>,
    /// Also write the report as JSON here.
    #[arg(long)]
    json: Option<PathBuf>,
}

fn load_config(common: &Common) -> Result<ExperimentConfig> {
    let mut cfg = match &common.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    if let Some(f) = common.fusion {
        cfg.fusion = f;
    }
    if common.quick {
        cfg = cfg.quick();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn step(label: &str, started: Instant) {
    eprintln!("[{:>7.1}s] {label}", started.elapsed().as_secs_f64());
}

fn run_dirs_under(out: &Path) -> Result<Vec<PathBuf>> {
    let runs = out.join("runs");
    if !runs.is_dir() {
        return Err(Error::MissingReport(format!("no runs under {}", runs.display())));
    }
    let mut dirs: Vec<PathBuf> = fs::read_dir(&runs)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join("summary.json").exists())
        .collect();
    dirs.sort();
    Ok(dirs)
}

fn score_files(args: &ScoreArgs) -> Result<()> {
    let records = match (&args.records, &args.refs, &args.hyps, &args.langs) {
        (Some(r), ..) => read_transcript_records(r)?,
        (None, Some(r), Some(h), Some(l)) => read_aligned_transcripts(r, h, l)?,
        _ => unreachable!("checked by the caller"),
    };
    let report = aggregate(&score_records(&records)?)?;
    print!("{}", report.to_table());
    if let Some(path) = &args.json {
        fs::write(path, serde_json::to_string_pretty(&report)? + "\n")?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let started = Instant::now();
    let common = &cli.common;
    if let Command::GradCheck { seeds } = cli.command {
        let results = run_suite(seeds, 1000)?;
        let mut failed = 0;
        println!("| check | seeds | max rel error | worst parameter | result |");
        println!("|-------|-------|---------------|-----------------|--------|");
        for r in &results {
            let verdict = if r.passed() { "ok" } else { "FAIL" };
            failed += usize::from(!r.passed());
            println!("| {} | {} | {:.3e} | {} | {verdict} |", r.name, r.seeds, r.max_rel_error, r.worst_param);
        }
        step("gradient checks done", started);
        if failed > 0 {
            return Err(Error::Invalid(format!("{failed} checks exceeded relative error {MAX_REL_ERROR:e}")));
        }
        return Ok(());
    }
    if let Command::Score(args) = &cli.command {
        if args.records.is_some() || args.refs.is_some() {
            return score_files(args);
        }
    }
    if let Command::Compare { runs } = &cli.command {
        let dirs = if runs.is_empty() { run_dirs_under(&common.out)? } else { runs.clone() };
        let cmp = compare_mechanisms(&dirs)?;
        write_comparison(&common.out, &cmp)?;
        print!("{}", cmp.to_markdown());
        return Ok(());
    }

    let cfg = load_config(common)?;
    let layout = Layout::new(&common.out);
    let run = RunLayout {
        dir: layout.run_dir(cfg.fusion),
    };
    match cli.command {
        Command::GenData => {
            let d = ensure_data(&cfg, &layout)?;
            step(
                &format!("data: {} train, {} valid, {} eval splits", d.train.len(), d.valid.len(), d.splits.len()),
                started,
            );
        }
        Command::PretrainEncoders => {
            let d = ensure_data(&cfg, &layout)?;
            ensure_pretrained(&cfg, &layout, &d)?;
            step(&format!("pretrained components in {}", layout.pretrained_dir().display()), started);
        }
        Command::Train => {
            let d = ensure_data(&cfg, &layout)?;
            let components = ensure_pretrained(&cfg, &layout, &d)?;
            step("data and pretrained components ready", started);
            let history = train_run(&cfg, &layout, &d, &components, |stage, _, _| {
                step(&format!("{} finished", stage.name), started);
                Ok(())
            })?;
            for m in history.iter().filter_map(|h| h.last()) {
                println!("{}: train loss {:.4}, valid loss {:.4}", m.stage, m.train_loss, m.valid_loss);
            }
        }
        Command::Decode { stage } => {
            let d = ensure_data(&cfg, &layout)?;
            let components = ensure_pretrained(&cfg, &layout, &d)?;
            let (model, mut store) = build_model(&cfg, &components)?;
            let stages: Vec<String> = match stage {
                Some(s) => vec![s],
                None => cfg.stages.iter().map(|s| s.name.clone()).collect(),
            };
            for s in &stages {
                load_stage_checkpoint(&cfg, &run, s, &mut store)?;
                decode_stage(&cfg, &run, s, &model, &store, &d)?;
                step(&format!("decoded {s}"), started);
            }
        }
        Command::Score(_) => {
            let summary = score_run(&cfg, &run)?;
            println!("{}", serde_json::to_string_pretty(&summary)?);
        }
        Command::All => {
            let mut dirs = Vec::new();
            for streams in cfg.sweep_streams() {
                let c = ExperimentConfig {
                    fusion: streams,
                    ..cfg.clone()
                };
                let summary = run_experiment(&c, &common.out)?;
                let last = summary.stages.last().and_then(|s| s.splits.first());
                if let Some(sp) = last {
                    step(
                        &format!(
                            "{streams}: {} rate {:.2}%, token accuracy {:.2}%",
                            sp.split,
                            100.0 * sp.error_rate,
                            100.0 * sp.token_accuracy
                        ),
                        started,
                    );
                }
                dirs.push(layout.run_dir(streams));
            }
            let cmp = compare_mechanisms(&dirs)?;
            write_comparison(&common.out, &cmp)?;
            print!("{}", cmp.to_markdown());
        }
        Command::GradCheck { .. } | Command::Compare { .. } => unreachable!("handled above"),
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
