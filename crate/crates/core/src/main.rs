use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use debert::checkpoint;
use debert::config::Settings;
use debert::data::{
    load_corpus, make_dataset, synthetic_intent_corpus, write_atomic, write_dataset, Manifest,
    PairedExample, Split,
};
use debert::error::at_path;
use debert::gradcheck::{run_suite, TOLERANCE};
use debert::metrics::MetricsReport;
use debert::model::Mode;
use debert::noise::{NoiseSpec, SubstitutionPool};
use debert::pipeline::{
    confusion_from_predictions, eval_row, evaluate_checkpoint, infer_num_classes, normalized_csv,
    parse_predictions, split_corpus, text_report, train_model, EVAL_HEADER,
};
use debert::{Error, Result};

#[derive(Parser)]
#[command(
    name = "debert",
    version,
    about = "Denoising transformer classifier for incomplete text"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Corrupt clean labelled sentences into a paired noisy dataset.
    Prepare(PrepareArgs),
    /// Train baseline and/or stacked models.
    Train(TrainArgs),
    /// Score a model or a predictions file on a test split.
    Eval(EvalArgs),
    /// Write a normalised confusion matrix and a readable report.
    Report(ReportArgs),
    /// Check analytic gradients against finite differences.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(clap::Args)]
struct PrepareArgs {
    /// Clean corpus, `label<TAB>sentence` per line.
    #[arg(long, conflicts_with = "synthetic")]
    input: Option<PathBuf>,
    /// Clean test corpus; otherwise `--split` of the input is held out.
    #[arg(long, requires = "input")]
    test: Option<PathBuf>,
    /// Generate a two-class synthetic intent corpus with this many sentences per class.
    #[arg(long)]
    synthetic: Option<usize>,
    /// Fraction of the input held out as the test split when no `--test` file is given.
    #[arg(long, default_value_t = 0.2)]
    split: f64,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    num_classes: Option<usize>,
    /// Calibrate deletion and substitution to reach this corpus WER.
    #[arg(long)]
    target_wer: Option<f64>,
    #[arg(long, default_value_t = 0.0)]
    deletion: f64,
    #[arg(long, default_value_t = 0.0)]
    substitution: f64,
    #[arg(long, default_value_t = 0.0)]
    repeat_letter: f64,
    #[arg(long, default_value_t = 0.0)]
    abbreviation: f64,
    #[arg(long, default_value_t = 0.0)]
    casual: f64,
    /// Substitution source: table, corpus or table+corpus.
    #[arg(long, default_value = "table+corpus")]
    pool: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Baseline,
    Stacked,
    Both,
}

#[derive(clap::Args)]
struct TrainArgs {
    /// Dataset directory holding `train.tsv` and optionally `test.tsv` and `manifest.txt`.
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum, default_value = "both")]
    mode: ModeArg,
    /// Settings file of `key = value` lines.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one setting, `key=value`; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    num_classes: Option<usize>,
}

#[derive(clap::Args)]
struct Source {
    /// Model checkpoint to run on the test split.
    #[arg(
        long,
        required_unless_present = "predictions",
        conflicts_with = "predictions"
    )]
    model: Option<PathBuf>,
    /// Precomputed labels, one per test line.
    #[arg(long)]
    predictions: Option<PathBuf>,
    /// Test split, `label<TAB>sentence` per line.
    #[arg(long)]
    test: PathBuf,
    /// Dataset manifest supplying the WER and iBLEU columns.
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Class count for a predictions file; a checkpoint knows its own.
    #[arg(long)]
    num_classes: Option<usize>,
}

#[derive(clap::Args)]
struct EvalArgs {
    #[command(flatten)]
    source: Source,
    #[arg(long, default_value = "dataset")]
    dataset: String,
    #[arg(long)]
    mode: Option<String>,
    #[arg(long)]
    seed: Option<String>,
    /// Write the CSV here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(clap::Args)]
struct ReportArgs {
    #[command(flatten)]
    source: Source,
    #[arg(long)]
    out: PathBuf,
}

fn exit_code(e: &Error) -> u8 {
    match e.category() {
        "config" => 3,
        "parse" => 4,
        "data" => 5,
        "label" => 6,
        "shape" => 7,
        "calibration" => 8,
        "checkpoint" => 9,
        "io" => 10,
        _ => 11,
    }
}

fn read_clean(path: &Path, num_classes: Option<usize>) -> Result<Vec<(usize, String)>> {
    Ok(load_corpus(path, Split::Test, num_classes)?
        .into_iter()
        .map(|e| (e.label, e.incomplete))
        .collect())
}

fn prepare(a: PrepareArgs) -> Result<()> {
    let (train, test) = match (&a.input, a.synthetic) {
        (Some(input), _) => {
            let clean = read_clean(input, a.num_classes)?;
            match &a.test {
                Some(t) => (clean, read_clean(t, a.num_classes)?),
                None => split_corpus(&clean, a.split, a.seed)?,
            }
        }
        (None, Some(per_class)) => {
            split_corpus(&synthetic_intent_corpus(per_class, a.seed), a.split, a.seed)?
        }
        (None, None) => return Err(Error::Config("give --input or --synthetic".into())),
    };
    let spec = NoiseSpec {
        deletion: a.deletion,
        substitution: a.substitution,
        repeat_letter: a.repeat_letter,
        abbreviation: a.abbreviation,
        casual: a.casual,
        pool: a.pool.parse::<SubstitutionPool>()?,
        seed: a.seed,
        target_wer: a.target_wer,
        ..NoiseSpec::default()
    };
    let ds = make_dataset(&train, &test, &spec)?;
    write_dataset(&ds, &a.out)?;
    print!("{}", ds.manifest.to_text());
    Ok(())
}

fn load_manifest(path: &Path) -> Result<Option<Manifest>> {
    if path.exists() {
        Ok(Some(Manifest::parse(
            &std::fs::read_to_string(path).map_err(at_path(path))?,
        )?))
    } else {
        Ok(None)
    }
}

fn train(a: TrainArgs) -> Result<()> {
    let mut settings = Settings::default();
    for kv in &a.overrides {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("--set expects key=value, got {kv:?}")))?;
        settings.apply_flag(k.trim(), v.trim())?;
    }
    if let Some(seed) = a.seed {
        settings.apply_flag("seed", &seed.to_string())?;
    }
    if let Some(lambda) = a.lambda {
        settings.apply_flag("lambda", &lambda.to_string())?;
    }
    if let Some(path) = &a.config {
        settings.apply_file(path)?;
    }

    let train_set = load_corpus(&a.data.join("train.tsv"), Split::Train, a.num_classes)?;
    let test_path = a.data.join("test.tsv");
    let test_set = if test_path.exists() {
        Some(load_corpus(&test_path, Split::Test, a.num_classes)?)
    } else {
        None
    };
    let manifest = load_manifest(&a.data.join("manifest.txt"))?;
    let num_classes = a
        .num_classes
        .unwrap_or_else(|| infer_num_classes(&train_set));
    let modes = match a.mode {
        ModeArg::Baseline => vec![Mode::Baseline],
        ModeArg::Stacked => vec![Mode::Stacked],
        ModeArg::Both => vec![Mode::Baseline, Mode::Stacked],
    };
    std::fs::create_dir_all(&a.out)?;
    write_atomic(&a.out.join("settings.txt"), settings.to_text().as_bytes())?;

    let dataset = a
        .data
        .file_name()
        .map_or("dataset".into(), |n| n.to_string_lossy().into_owned());
    let seed = settings.get("seed").unwrap_or("0").to_string();
    let mut rows = Vec::new();
    for mode in modes {
        let run = train_model(&train_set, &settings, mode, num_classes)?;
        let log: String = run.log.iter().map(|r| r.to_json() + "\n").collect();
        write_atomic(&a.out.join(format!("{mode}.log.jsonl")), log.as_bytes())?;
        checkpoint::save(&run.checkpoint, &a.out.join(format!("{mode}.ckpt")))?;
        eprintln!(
            "{mode}: {} epochs logged, checkpoint written",
            run.log.len()
        );
        if let Some(test) = &test_set {
            let report = evaluate_checkpoint(&run.checkpoint, test)?;
            rows.push(eval_row(
                &dataset,
                &mode.to_string(),
                &seed,
                &report,
                manifest.as_ref(),
            ));
        }
    }
    if !rows.is_empty() {
        let csv = format!("{EVAL_HEADER}\n{}\n", rows.join("\n"));
        write_atomic(&a.out.join("comparison.csv"), csv.as_bytes())?;
        print!("{csv}");
    }
    Ok(())
}

type Scored = (
    MetricsReport,
    Option<String>,
    Option<String>,
    Option<Manifest>,
);

/// Metrics for the test split plus the mode and seed the model was trained with.
fn score(s: &Source) -> Result<Scored> {
    let manifest = s
        .manifest
        .as_deref()
        .map(load_manifest)
        .transpose()?
        .flatten();
    if let Some(path) = &s.model {
        let ckpt = checkpoint::load(path)?;
        let test = load_corpus(&s.test, Split::Test, Some(ckpt.model.head.num_classes()))?;
        let report = evaluate_checkpoint(&ckpt, &test)?;
        return Ok((report, Some(ckpt.model.mode.to_string()), None, manifest));
    }
    let path = s
        .predictions
        .as_ref()
        .expect("clap requires model or predictions");
    let test: Vec<PairedExample> = load_corpus(&s.test, Split::Test, s.num_classes)?;
    let predicted = parse_predictions(&std::fs::read_to_string(path).map_err(at_path(path))?)?;
    let num_classes = s.num_classes.unwrap_or_else(|| {
        let max_pred = predicted.iter().map(|p| p + 1).max().unwrap_or(0);
        infer_num_classes(&test).max(max_pred)
    });
    let report =
        MetricsReport::from_confusion(confusion_from_predictions(&test, &predicted, num_classes)?)?;
    Ok((report, Some("predictions".into()), None, manifest))
}

fn eval(a: EvalArgs) -> Result<()> {
    let (report, mode, seed, manifest) = score(&a.source)?;
    let mode = a.mode.or(mode).unwrap_or_default();
    let seed = a.seed.or(seed).unwrap_or_else(|| "-".into());
    let csv = format!(
        "{EVAL_HEADER}\n{}\n",
        eval_row(&a.dataset, &mode, &seed, &report, manifest.as_ref())
    );
    match &a.out {
        Some(path) => write_atomic(path, csv.as_bytes()),
        None => {
            print!("{csv}");
            Ok(())
        }
    }
}

fn report(a: ReportArgs) -> Result<()> {
    let (report, _, _, _) = score(&a.source)?;
    std::fs::create_dir_all(&a.out)?;
    write_atomic(
        &a.out.join("confusion_normalized.csv"),
        normalized_csv(&report).as_bytes(),
    )?;
    let text = text_report(&report);
    write_atomic(&a.out.join("report.txt"), text.as_bytes())?;
    print!("{text}");
    Ok(())
}

fn gradcheck(seed: u64) -> Result<bool> {
    let results = run_suite(seed)?;
    let mut ok = true;
    for r in &results {
        ok &= r.passed();
        println!(
            "{} {:<20} {:<28} max_rel_err {:.3e} ({} entries)",
            if r.passed() { "PASS" } else { "FAIL" },
            r.name,
            r.shape,
            r.report.max_rel_err,
            r.report.checked
        );
    }
    println!("{} checks, tolerance {TOLERANCE:e}", results.len());
    Ok(ok)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::Prepare(a) => prepare(a).map(|_| true),
        Command::Train(a) => train(a).map(|_| true),
        Command::Eval(a) => eval(a).map(|_| true),
        Command::Report(a) => report(a).map(|_| true),
        Command::Gradcheck { seed } => gradcheck(seed),
    };
    match outcome {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error [{}]: {e}", e.category());
            ExitCode::from(exit_code(&e))
        }
    }
}
