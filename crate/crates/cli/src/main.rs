use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use advgauntlet::attack::{run_campaign, Strategy};
use advgauntlet::classifier::Classifier;
use advgauntlet::corpus::{generate_corpus, read_logs, write_logs, CorpusSpec};
use advgauntlet::eval::{emit, roc, score_dataset, summary_csv, test_error, Format, SummaryRow, TARGET_FPR};
use advgauntlet::features::{build_datasets, SplitDataset, DEFAULT_SPLIT};
use advgauntlet::model::{read_ensemble, write_ensemble, write_model, Arch};
use advgauntlet::pipeline::{
    attack_pool, grid_of, run_pipeline, train_cell, write_report, Defense, ExperimentConfig, DEFAULT_SEED,
};
use advgauntlet::train::TrainConfig;
use advgauntlet::Error;

/// Overrides the output directory of `run`.
const OUT_ENV: &str = "ADVGAUNTLET_OUT";

#[derive(Parser)]
#[command(
    name = "advgauntlet",
    version,
    about = "Adversarial crafting against sparse binary malware classifiers"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic behavior-log corpus.
    GenCorpus(GenCorpusArgs),
    /// Select features and write deduplicated train/valid/test splits.
    Extract(ExtractArgs),
    /// Train one model (or ensemble) with an optional defense.
    Train(TrainArgs),
    /// Run every crafting strategy against malware test samples.
    Attack(AttackArgs),
    /// ROC, operating point and test error of a model.
    Eval(EvalArgs),
    /// Aggregate CSVs and plots of a finished experiment directory.
    Report(ReportArgs),
    /// Run the whole experiment described by a config file.
    Run(RunArgs),
}

#[derive(Args)]
struct GenCorpusArgs {
    /// JSON corpus spec; flags below override its fields.
    #[arg(long)]
    spec: Option<PathBuf>,
    #[arg(long)]
    n_malware: Option<usize>,
    #[arg(long)]
    n_benign: Option<usize>,
    #[arg(long, default_value_t = DEFAULT_SEED)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ExtractArgs {
    #[arg(long)]
    corpus: PathBuf,
    /// Number of features kept by mutual information.
    #[arg(long, default_value_t = 2000)]
    k: usize,
    /// Train,valid,test fractions.
    #[arg(long, value_delimiter = ',', num_args = 3, default_values_t = DEFAULT_SPLIT)]
    split: Vec<f64>,
    #[arg(long, default_value_t = DEFAULT_SEED)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    /// Directory with train.tsv, valid.tsv and test.tsv.
    #[arg(long)]
    data: PathBuf,
    /// Architecture as `H=<hidden layers>,dim=<units>`.
    #[arg(long, default_value = "H=1,dim=128")]
    arch: String,
    /// none | distill:T=<t> | decay:D=<d> | ensemble:E=<odd e>
    #[arg(long, default_value = "none")]
    defense: String,
    #[arg(long, default_value_t = DEFAULT_SEED)]
    seed: u64,
    #[arg(long, default_value_t = 256)]
    projected_dim: usize,
    #[arg(long, default_value_t = 200)]
    max_epochs: usize,
    /// Model file to write.
    #[arg(long)]
    out: PathBuf,
    /// Training log CSV; defaults to `<out>.log.csv`.
    #[arg(long)]
    log: Option<PathBuf>,
}

#[derive(Args)]
struct AttackArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = 20)]
    budget: usize,
    /// Comma-separated strategy names, or `all`.
    #[arg(long, default_value = "all")]
    strategies: String,
    /// Maximum number of detected malware test samples attacked.
    #[arg(long, default_value_t = 500)]
    samples: usize,
    #[arg(long, default_value_t = DEFAULT_SEED)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ReportArgs {
    /// Directory written by `run`.
    #[arg(long)]
    experiment: PathBuf,
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    config: PathBuf,
    /// Overrides both the config and the environment.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overrides the config's master seed.
    #[arg(long)]
    seed: Option<u64>,
}

fn parse_arch(text: &str) -> Result<Arch, CliError> {
    let mut hidden_count = None;
    let mut hidden_dim = None;
    for part in text.split(',') {
        match part.split_once('=') {
            Some(("H", v)) => hidden_count = v.parse().ok(),
            Some(("dim", v)) => hidden_dim = v.parse().ok(),
            _ => return Err(CliError::Usage(format!("bad --arch component `{part}`"))),
        }
    }
    match (hidden_count, hidden_dim) {
        (Some(h), Some(d)) => {
            let arch = Arch::new(h, d);
            arch.validate().map_err(|e| CliError::Usage(e.to_string()))?;
            Ok(arch)
        }
        _ => Err(CliError::Usage(format!("--arch needs H=<n>,dim=<n>, got `{text}`"))),
    }
}

fn parse_strategies(text: &str) -> Result<Vec<Strategy>, CliError> {
    if text == "all" {
        return Ok(Strategy::ALL.to_vec());
    }
    text.split(',')
        .map(|s| s.parse().map_err(|e: Error| CliError::Usage(e.to_string())))
        .collect()
}

enum CliError {
    Usage(String),
    Lib(Error),
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Lib(e)
    }
}

fn exit_code(e: &Error) -> u8 {
    match e.root() {
        Error::Config { .. } => 2,
        Error::Contract(_) | Error::Parse { .. } | Error::Version(_) => 3,
        Error::Divergence { .. } => 4,
        Error::Io { .. } => 5,
        Error::Stage { .. } => unreachable!("root strips stage wrappers"),
    }
}

fn ensure_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| {
        CliError::Lib(Error::Io {
            path: dir.to_path_buf(),
            source: e,
        })
    })
}

fn write(path: &Path, text: &str) -> Result<(), CliError> {
    fs::write(path, text).map_err(|e| {
        CliError::Lib(Error::Io {
            path: path.to_path_buf(),
            source: e,
        })
    })
}

fn gen_corpus(a: GenCorpusArgs) -> Result<(), CliError> {
    let mut spec = match &a.spec {
        Some(p) => CorpusSpec::read(p)?,
        None => CorpusSpec::default(),
    };
    spec.seed = a.seed;
    if let Some(n) = a.n_malware {
        spec.n_malware = n;
    }
    if let Some(n) = a.n_benign {
        spec.n_benign = n;
    }
    let logs = generate_corpus(&spec)?;
    write_logs(&logs, &a.out)?;
    log::info!("wrote {} logs to {}", logs.len(), a.out.display());
    Ok(())
}

fn extract(a: ExtractArgs) -> Result<(), CliError> {
    let logs = read_logs(&a.corpus)?;
    let split = [a.split[0], a.split[1], a.split[2]];
    let (vocab, data) = build_datasets(&logs, a.k, split, a.seed)?;
    ensure_dir(&a.out)?;
    vocab.write(&a.out.join("vocab.tsv"))?;
    data.write_dir(&a.out)?;
    log::info!(
        "{} features; {} / {} / {} samples",
        vocab.len(),
        data.train.len(),
        data.valid.len(),
        data.test.len()
    );
    Ok(())
}

fn train(a: TrainArgs) -> Result<(), CliError> {
    let arch = parse_arch(&a.arch)?;
    let defense: Defense = a.defense.parse().map_err(|e: Error| CliError::Usage(e.to_string()))?;
    let data = SplitDataset::read_dir(&a.data)?;
    let config = TrainConfig {
        projected_dim: a.projected_dim,
        max_epochs: a.max_epochs,
        ..TrainConfig::default()
    };
    config.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    let cell = train_cell(&data, defense, arch, &config, a.seed)?;
    if cell.members.len() == 1 {
        write_model(&cell.members[0], &a.out)?;
    } else {
        write_ensemble(&cell.members, &a.out)?;
    }
    let log_path = a.log.unwrap_or_else(|| {
        let mut p = a.out.clone().into_os_string();
        p.push(".log.csv");
        PathBuf::from(p)
    });
    write(&log_path, &cell.logs.join(""))?;
    Ok(())
}

fn attack(a: AttackArgs) -> Result<(), CliError> {
    if a.budget == 0 || a.samples == 0 {
        return Err(CliError::Usage("--budget and --samples must be >= 1".into()));
    }
    let strategies = parse_strategies(&a.strategies)?;
    let models = read_ensemble::<f64>(&a.model)?;
    let target = Classifier::new(&models)?;
    let data = SplitDataset::read_dir(&a.data)?;
    let pool = attack_pool(&target, &data.test, a.samples)?;
    let campaign = run_campaign(&target, &pool, &strategies, a.budget, a.seed)?;
    ensure_dir(&a.out)?;
    write(&a.out.join("traces.jsonl"), &campaign.traces_jsonl())?;
    emit(&campaign.table, Format::Csv, &a.out.join("success.csv"))?;
    emit(&campaign.table, Format::Svg, &a.out.join("success.svg"))?;
    for (st, rates) in &campaign.table.rows {
        log::info!("{st}: {:.4} after {} flips", rates[rates.len() - 1], a.budget);
    }
    Ok(())
}

fn eval(a: EvalArgs) -> Result<(), CliError> {
    let models = read_ensemble::<f64>(&a.model)?;
    let target = Classifier::new(&models)?;
    let data = SplitDataset::read_dir(&a.data)?;
    let curve = roc(&score_dataset(&target, &data.test)?)?;
    ensure_dir(&a.out)?;
    emit(&curve, Format::Csv, &a.out.join("roc.csv"))?;
    emit(&curve, Format::Svg, &a.out.join("roc.svg"))?;
    let defense = if models.len() > 1 {
        format!("ensemble:E={}", models.len())
    } else {
        models[0].training().defense.clone()
    };
    let name = a
        .model
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "model".into());
    let row = SummaryRow {
        model: name,
        defense,
        hidden_count: models[0].hidden_count(),
        test_error_pct: test_error(&target, &data.test)?,
        tpr_at_target: curve.tpr_at_fpr(TARGET_FPR)?.0,
    };
    log::info!(
        "test error {:.4}%, TPR {:.4} at FPR 1e-4",
        row.test_error_pct,
        row.tpr_at_target
    );
    write(&a.out.join("summary.csv"), &summary_csv(&[row]))?;
    Ok(())
}

fn report(a: ReportArgs) -> Result<(), CliError> {
    let cells = grid_of(&a.experiment)?;
    let rows = write_report(&a.experiment, &cells)?;
    log::info!("summarized {} models", rows.len());
    Ok(())
}

fn run(a: RunArgs) -> Result<(), CliError> {
    let mut config = ExperimentConfig::read(&a.config).map_err(|e| match e {
        Error::Io { .. } => CliError::Lib(e),
        other => CliError::Usage(other.to_string()),
    })?;
    if let Some(seed) = a.seed {
        config.seed = seed;
    }
    let out = a
        .out
        .or_else(|| std::env::var_os(OUT_ENV).map(PathBuf::from))
        .unwrap_or_else(|| config.output_dir.clone());
    config.output_dir = out.clone();
    let report = run_pipeline(&config, &out)?;
    log::info!(
        "{} stages ran, {} up to date; results in {}",
        report.executed.len(),
        report.skipped.len(),
        out.display()
    );
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    let result = match cli.command {
        Command::GenCorpus(a) => gen_corpus(a),
        Command::Extract(a) => extract(a),
        Command::Train(a) => train(a),
        Command::Attack(a) => attack(a),
        Command::Eval(a) => eval(a),
        Command::Report(a) => report(a),
        Command::Run(a) => run(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(CliError::Lib(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
