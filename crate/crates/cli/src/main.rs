//! Batch command-line surface over the slot-labeling QA toolkit.
//!
//! Every command reads and writes UTF-8 JSON, writes outputs atomically, and
//! is reproducible given the same inputs and seed. Failures print a
//! machine-readable `{"error": {...}}` object on stderr and exit nonzero.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Deserialize;

use slotqa::audit::{AuditConfig, AuditReport};
use slotqa::corpus::{self, Fraction};
use slotqa::decode::{self, DecodeConfig};
use slotqa::eval::{self, requested_nonempty};
use slotqa::model::{self, MaskProvenance, SpanModel};
use slotqa::reformulate::{ContextMode, PromptSpec, QaOptions};
use slotqa::synth::{self, SynthSpec};
use slotqa::train;

#[derive(Parser)]
#[command(
    name = "slotqa",
    about = "Slot labeling as extractive question answering: convert, split, train, predict, eval, audit",
    version
)]
struct Cli {
    /// RNG seed for any randomized step (defaults to 42; a train schedule
    /// file may carry its own).
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// JSON file supplying defaults for mode, decoding, and audit options.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum ModeArg {
    UserOnly,
    WithSystem,
}

impl From<ModeArg> for ContextMode {
    fn from(m: ModeArg) -> ContextMode {
        match m {
            ModeArg::UserOnly => ContextMode::UserOnly,
            ModeArg::WithSystem => ContextMode::WithSystem,
        }
    }
}

/// Defaults loadable via `--config`; command-line flags win over the file.
#[derive(Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct FileDefaults {
    #[serde(default)]
    mode: Option<ContextMode>,
    #[serde(default)]
    no_answer_threshold: Option<f64>,
    #[serde(default)]
    max_span_tokens: Option<usize>,
    #[serde(default)]
    rules: Option<Vec<String>>,
    #[serde(default)]
    slot_pairs: Option<Vec<(String, String)>>,
    #[serde(default)]
    max_findings: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Convert a slot-labeling dataset to SQuAD 2.0 JSON.
    Convert(ConvertArgs),
    /// Draw nested few-shot splits and write one file per fraction.
    Split(SplitArgs),
    /// Run a staged fine-tuning schedule and write a checkpoint.
    Train(TrainArgs),
    /// Predict slot spans for a dataset with a trained checkpoint.
    Predict(PredictArgs),
    /// Score predictions against gold labels with exact-span-match F1.
    Eval(EvalArgs),
    /// Lint a dataset for annotation ambiguities and inconsistencies.
    Audit(AuditArgs),
    /// Uniformly subsample a SQuAD-format QA corpus.
    Subsample(SubsampleArgs),
    /// Generate the bundled synthetic benchmark datasets.
    Synth(SynthArgs),
}

#[derive(Args)]
struct ConvertArgs {
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum)]
    mode: Option<ModeArg>,
    /// Drop requested-slot prompts from the questions.
    #[arg(long)]
    no_requested: bool,
    /// Emit one example per question paraphrase (training augmentation).
    #[arg(long)]
    all_paraphrases: bool,
}

#[derive(Args)]
struct SplitArgs {
    #[arg(long = "in")]
    input: PathBuf,
    /// Output directory; one file per emitted fraction.
    #[arg(long)]
    out: PathBuf,
    /// Smallest fraction to emit (e.g. `1/128`); all larger fractions the
    /// dataset supports are emitted as well.
    #[arg(long)]
    fraction: Option<String>,
}

#[derive(Args)]
struct TrainArgs {
    /// Schedule config JSON (see docs/schedule-config.md).
    #[arg(long)]
    schedule: PathBuf,
    /// Checkpoint output path.
    #[arg(long)]
    out: PathBuf,
    /// Training report JSON path (default: `<out>.report.json`).
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args)]
struct PredictArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long = "in")]
    input: PathBuf,
    /// Predictions output (JSON lines, one span prediction per qid).
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum)]
    mode: Option<ModeArg>,
    /// No-answer margin added to the no-answer score at decode time.
    #[arg(long)]
    threshold: Option<f64>,
    #[arg(long)]
    max_span_tokens: Option<usize>,
    /// Drop requested-slot prompts from the questions.
    #[arg(long)]
    no_requested: bool,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    preds: PathBuf,
    #[arg(long)]
    gold: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Restrict to a turn subset: `requested` keeps turns with non-empty
    /// requested slots.
    #[arg(long)]
    subset: Option<String>,
    #[arg(long, value_enum)]
    mode: Option<ModeArg>,
    /// Suppress the per-slot table on stdout.
    #[arg(long)]
    quiet: bool,
}

#[derive(Args)]
struct AuditArgs {
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Comma-separated rule list (default: ambiguous-numeric,pm-variants,
    /// leading-function-word,people-noun).
    #[arg(long)]
    rules: Option<String>,
    /// Slot pairs for the slot-pair-equal rule, as `a:b,c:d`.
    #[arg(long)]
    slot_pairs: Option<String>,
    /// Exit with code 2 when findings exceed this count.
    #[arg(long)]
    max_findings: Option<usize>,
    #[arg(long)]
    quiet: bool,
}

#[derive(Args)]
struct SubsampleArgs {
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    n: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SynthArgs {
    /// Output directory for train.json, test.json, and generic_qa.json.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 500)]
    train_turns: usize,
    #[arg(long, default_value_t = 200)]
    test_turns: usize,
    #[arg(long, default_value_t = 2000)]
    generic_examples: usize,
    #[arg(long, default_value_t = 0.25)]
    bare_fraction: f64,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(err) => {
            let kind = err
                .downcast_ref::<slotqa::Error>()
                .map(slotqa::Error::kind)
                .unwrap_or("error");
            let payload = serde_json::json!({
                "error": { "kind": kind, "message": format!("{err:#}") }
            });
            eprintln!("{payload}");
            ExitCode::from(1)
        }
    }
}

fn run(cli: Cli) -> anyhow::Result<ExitCode> {
    let defaults = match &cli.config {
        Some(path) => {
            let bytes = std::fs::read(path)
                .with_context(|| format!("reading config {}", path.display()))?;
            serde_json::from_slice::<FileDefaults>(&bytes)
                .with_context(|| format!("parsing config {}", path.display()))?
        }
        None => FileDefaults::default(),
    };
    let seed = cli.seed.unwrap_or(42);

    match cli.command {
        Command::Convert(args) => convert(args, &defaults),
        Command::Split(args) => split(args, seed),
        Command::Train(args) => train_cmd(args, cli.seed),
        Command::Predict(args) => predict(args, &defaults),
        Command::Eval(args) => eval_cmd(args, &defaults),
        Command::Audit(args) => audit_cmd(args, &defaults),
        Command::Subsample(args) => subsample(args, seed),
        Command::Synth(args) => synth_cmd(args, seed),
    }
}

fn write_atomic(path: &Path, bytes: &[u8]) -> anyhow::Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty());
    if let Some(dir) = dir {
        std::fs::create_dir_all(dir)
            .with_context(|| format!("creating directory {}", dir.display()))?;
    }
    let dir = dir.unwrap_or_else(|| Path::new("."));
    let mut tmp = tempfile::NamedTempFile::new_in(dir)
        .with_context(|| format!("creating temp file in {}", dir.display()))?;
    std::io::Write::write_all(&mut tmp, bytes)?;
    tmp.persist(path)
        .with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

fn mode_of(arg: Option<ModeArg>, defaults: &FileDefaults) -> ContextMode {
    arg.map(ContextMode::from)
        .or(defaults.mode)
        .unwrap_or_default()
}

fn convert(args: ConvertArgs, defaults: &FileDefaults) -> anyhow::Result<ExitCode> {
    let ds = corpus::load_sl(&args.input)?;
    let spec = PromptSpec::from_ontology(&ds.ontology);
    let options = QaOptions {
        include_requested: !args.no_requested,
        paraphrases: args.all_paraphrases,
    };
    let qa = corpus::sl_to_qa_with(&ds, &spec, mode_of(args.mode, defaults), options)?;
    write_atomic(&args.out, &corpus::emit_squad_json(&qa))?;
    println!(
        "converted {} turns into {} qa examples -> {}",
        ds.turns.len(),
        qa.len(),
        args.out.display()
    );
    Ok(ExitCode::SUCCESS)
}

fn split(args: SplitArgs, seed: u64) -> anyhow::Result<ExitCode> {
    let ds = corpus::load_sl(&args.input)?;
    let mut fractions = corpus::available_fractions(&ds);
    if let Some(smallest) = &args.fraction {
        let smallest = Fraction::parse(smallest)?;
        if !fractions.contains(&smallest) {
            return Err(slotqa::Error::FractionUnavailable {
                name: ds.name.clone(),
                denominator: smallest.denominator,
                size: ds.turns.len(),
            }
            .into());
        }
        fractions.retain(|f| f.denominator <= smallest.denominator);
    }

    let stem = args
        .input
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "split".to_string());
    std::fs::create_dir_all(&args.out)
        .with_context(|| format!("creating directory {}", args.out.display()))?;
    for fraction in &fractions {
        let subset = corpus::sample_split(&ds, *fraction, seed)?;
        let path = args
            .out
            .join(format!("{stem}.1_{}.json", fraction.denominator));
        write_atomic(&path, &corpus::emit_sl_json(&subset))?;
        println!(
            "{}: {} turns -> {}",
            fraction,
            subset.turns.len(),
            path.display()
        );
    }
    Ok(ExitCode::SUCCESS)
}

fn train_cmd(args: TrainArgs, cli_seed: Option<u64>) -> anyhow::Result<ExitCode> {
    let (file, schedule) = train::load_schedule(&args.schedule)?;
    let seed = cli_seed.or(file.seed).unwrap_or(42);
    let mut model = SpanModel::new(&file.model, seed)?;
    let mut reports = train::run_schedule(&mut model, &schedule, seed)?;

    let last_stage = schedule.stages.last().expect("schedule validated");
    let mask = model::select_trainable(
        &model,
        last_stage.config.regime,
        last_stage.config.bitfit_all_biases,
    )?;
    let provenance = MaskProvenance {
        regime: Some(last_stage.config.regime),
        seed: Some(seed),
        trainable_paths: mask.iter().map(str::to_string).collect(),
    };
    model::save_checkpoint(&model, &provenance, &args.out)?;
    if let Some(last) = reports.last_mut() {
        last.checkpoint = Some(args.out.display().to_string());
    }

    for report in &reports {
        println!(
            "{}: {} steps, {} trainable params, final loss {:.4}, {:.1}s",
            report.stage,
            report.steps,
            report.trainable_params,
            report.losses.last().copied().unwrap_or(f64::NAN),
            report.wall_time_secs
        );
    }

    let report_path = args
        .report
        .unwrap_or_else(|| PathBuf::from(format!("{}.report.json", args.out.display())));
    let payload = serde_json::json!({
        "schedule": args.schedule.display().to_string(),
        "seed": seed,
        "stages": reports,
    });
    write_atomic(&report_path, &pretty_json(&payload))?;
    println!("checkpoint -> {}", args.out.display());
    println!("report -> {}", report_path.display());
    Ok(ExitCode::SUCCESS)
}

fn predict(args: PredictArgs, defaults: &FileDefaults) -> anyhow::Result<ExitCode> {
    let (model, _provenance) = model::load_checkpoint(&args.ckpt)?;
    let ds = corpus::load_sl(&args.input)?;
    let spec = PromptSpec::from_ontology(&ds.ontology);
    let cfg = DecodeConfig {
        max_span_tokens: args
            .max_span_tokens
            .or(defaults.max_span_tokens)
            .unwrap_or_else(|| DecodeConfig::default().max_span_tokens),
        no_answer_threshold: args
            .threshold
            .or(defaults.no_answer_threshold)
            .unwrap_or(0.0),
    };
    let preds = decode::predict_dataset(
        &model,
        &ds,
        &spec,
        mode_of(args.mode, defaults),
        !args.no_requested,
        &cfg,
    )?;
    write_atomic(&args.out, &decode::emit_predictions_jsonl(&preds))?;
    let answered = preds.iter().filter(|p| !p.is_no_answer()).count();
    println!(
        "predicted {} pairs ({} answered) -> {}",
        preds.len(),
        answered,
        args.out.display()
    );
    Ok(ExitCode::SUCCESS)
}

fn eval_cmd(args: EvalArgs, defaults: &FileDefaults) -> anyhow::Result<ExitCode> {
    let preds_bytes = std::fs::read(&args.preds)
        .map_err(|e| slotqa::Error::io(args.preds.display().to_string(), e))?;
    let preds = decode::parse_predictions_jsonl(&preds_bytes, &args.preds.display().to_string())?;
    let ds = corpus::load_sl(&args.gold)?;

    let report = match args.subset.as_deref() {
        None => eval::evaluate(&preds, &ds, mode_of(args.mode, defaults), None, None)?,
        Some("requested") => eval::evaluate(
            &preds,
            &ds,
            mode_of(args.mode, defaults),
            Some(&requested_nonempty),
            Some("requested"),
        )?,
        Some(other) => {
            return Err(anyhow!(
                "unknown subset `{other}`; supported subsets: requested"
            ))
        }
    };

    write_atomic(&args.out, &pretty_json(&serde_json::to_value(&report)?))?;
    if !args.quiet {
        print!("{}", report.render_table());
    }
    println!("metrics -> {}", args.out.display());
    Ok(ExitCode::SUCCESS)
}

fn parse_rules(spec: &str, slot_pairs: Vec<(String, String)>) -> anyhow::Result<AuditConfig> {
    let mut cfg = AuditConfig::none();
    cfg.slot_pairs = slot_pairs;
    for name in spec.split(',').map(str::trim).filter(|s| !s.is_empty()) {
        match name {
            "ambiguous-numeric" => cfg.ambiguous_numeric = true,
            "pm-variants" => cfg.pm_variants = true,
            "leading-function-word" => cfg.leading_function_word = true,
            "people-noun" => cfg.people_noun = true,
            "slot-pair-equal" => {
                if cfg.slot_pairs.is_empty() {
                    return Err(anyhow!(
                        "rule slot-pair-equal needs --slot-pairs (e.g. pickup_date:dropoff_date)"
                    ));
                }
            }
            other => return Err(anyhow!("unknown audit rule `{other}`")),
        }
    }
    Ok(cfg)
}

fn parse_slot_pairs(spec: Option<&str>) -> anyhow::Result<Vec<(String, String)>> {
    let Some(spec) = spec else {
        return Ok(Vec::new());
    };
    spec.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|pair| {
            pair.split_once(':')
                .map(|(a, b)| (a.trim().to_string(), b.trim().to_string()))
                .ok_or_else(|| anyhow!("slot pair `{pair}` must look like a:b"))
        })
        .collect()
}

fn audit_cmd(args: AuditArgs, defaults: &FileDefaults) -> anyhow::Result<ExitCode> {
    let ds = corpus::load_sl(&args.input)?;
    let slot_pairs = match (args.slot_pairs.as_deref(), &defaults.slot_pairs) {
        (Some(s), _) => parse_slot_pairs(Some(s))?,
        (None, Some(pairs)) => pairs.clone(),
        (None, None) => Vec::new(),
    };
    let cfg = match (&args.rules, &defaults.rules) {
        (Some(spec), _) => parse_rules(spec, slot_pairs)?,
        (None, Some(list)) => parse_rules(&list.join(","), slot_pairs)?,
        (None, None) => AuditConfig {
            slot_pairs,
            ..AuditConfig::default()
        },
    };

    let findings = slotqa::audit::run_audit(&ds, &cfg);
    let report = AuditReport::from_findings(findings);
    write_atomic(&args.out, &pretty_json(&serde_json::to_value(&report)?))?;
    if !args.quiet {
        print!("{}", report.render_table());
    }
    println!("report -> {}", args.out.display());

    let threshold = args.max_findings.or(defaults.max_findings);
    match threshold {
        Some(limit) if report.total > limit => {
            eprintln!(
                "{}",
                serde_json::json!({
                    "error": {
                        "kind": "findings-exceeded",
                        "message": format!("{} findings exceed the limit of {limit}", report.total)
                    }
                })
            );
            Ok(ExitCode::from(2))
        }
        _ => Ok(ExitCode::SUCCESS),
    }
}

fn subsample(args: SubsampleArgs, seed: u64) -> anyhow::Result<ExitCode> {
    let qa = corpus::load_squad(&args.input)?;
    let sampled = corpus::subsample_qa(&qa, args.n, seed)?;
    write_atomic(&args.out, &corpus::emit_squad_json(&sampled))?;
    println!(
        "sampled {} of {} examples -> {}",
        sampled.len(),
        qa.len(),
        args.out.display()
    );
    Ok(ExitCode::SUCCESS)
}

fn synth_cmd(args: SynthArgs, seed: u64) -> anyhow::Result<ExitCode> {
    std::fs::create_dir_all(&args.out)
        .with_context(|| format!("creating directory {}", args.out.display()))?;
    let train_ds = synth::restaurant_dataset(
        "synth-train",
        &SynthSpec {
            turns: args.train_turns,
            seed,
            bare_number_fraction: args.bare_fraction,
            ..SynthSpec::default()
        },
    );
    let test_ds = synth::restaurant_dataset(
        "synth-test",
        &SynthSpec {
            turns: args.test_turns,
            seed: seed.wrapping_add(1),
            bare_number_fraction: args.bare_fraction,
            ..SynthSpec::default()
        },
    );
    let generic =
        synth::generic_qa("synth-generic", args.generic_examples, 0.3, seed.wrapping_add(2));

    let train_path = args.out.join("train.json");
    let test_path = args.out.join("test.json");
    let generic_path = args.out.join("generic_qa.json");
    write_atomic(&train_path, &corpus::emit_sl_json(&train_ds))?;
    write_atomic(&test_path, &corpus::emit_sl_json(&test_ds))?;
    write_atomic(&generic_path, &corpus::emit_squad_json(&generic))?;
    println!(
        "train: {} turns -> {}",
        train_ds.turns.len(),
        train_path.display()
    );
    println!(
        "test: {} turns -> {}",
        test_ds.turns.len(),
        test_path.display()
    );
    println!(
        "generic qa: {} examples -> {}",
        generic.len(),
        generic_path.display()
    );
    Ok(ExitCode::SUCCESS)
}

fn pretty_json(value: &serde_json::Value) -> Vec<u8> {
    let mut bytes = serde_json::to_vec_pretty(value).expect("json serialization");
    bytes.push(b'\n');
    bytes
}
