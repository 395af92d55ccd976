use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use idiom_fewshot::adapter::BackendKind;
use idiom_fewshot::corpus::harvest_contexts;
use idiom_fewshot::harness::{
    load_report, render_table, run_experiment, ExperimentConfig, HarnessError, Task,
};
use idiom_fewshot::Error;

#[derive(Parser)]
#[command(name = "idiomfs", version, about = "Few-shot idiomaticity detection")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct RunArgs {
    /// Experiment config (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Overrides `output_dir`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overrides the base seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the backend: external, tiny or oracle.
    #[arg(long)]
    backend: Option<BackendKind>,
}

#[derive(Subcommand)]
enum Command {
    /// Train a PET ensemble, distill it and score the eval split.
    TrainPet(RunArgs),
    /// Run generational self-training before distillation.
    TrainIpet(RunArgs),
    /// Train the form + context embedding model by mimicking word vectors.
    BertramTrain(RunArgs),
    /// Add inferred MWE embeddings to an encoder checkpoint.
    BertramInject(RunArgs),
    /// Score a predictions file against the eval split.
    Evaluate(RunArgs),
    /// Collect raw-text contexts for MWEs into a TSV.
    Harvest {
        #[arg(long)]
        corpus: PathBuf,
        /// One MWE; repeatable.
        #[arg(long)]
        mwe: Vec<String>,
        /// File with one MWE per line.
        #[arg(long)]
        mwes: Option<PathBuf>,
        #[arg(short, long, default_value_t = 150)]
        k: usize,
        /// Output TSV (`mwe\tcontext`); stdout if absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Render report.json files as one table.
    Report {
        /// `report.json` paths, or `name=path`.
        #[arg(required = true)]
        reports: Vec<String>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |source| {
        HarnessError::Io {
            path: path.to_path_buf(),
            source,
        }
        .into()
    }
}

fn run_task(task: Task, args: RunArgs) -> Result<(), Error> {
    let mut config = ExperimentConfig::load(&args.config)?;
    if config.task != task {
        log::info!("config task {} overridden by subcommand ({task})", config.task);
    }
    config.task = task;
    if let Some(out) = args.out {
        config.output_dir = out;
    }
    if let Some(seed) = args.seed {
        config.seed = seed;
    }
    if let Some(backend) = args.backend {
        config.backend = backend;
    }
    let artifacts = run_experiment(&config)?;
    if let Some(report) = &artifacts.report {
        print!("{}", render_table(&[(config.name.as_str(), report)]));
    }
    for f in &artifacts.files {
        log::info!("wrote {}", f.display());
    }
    Ok(())
}

fn harvest(corpus: &Path, mut mwes: Vec<String>, file: Option<&Path>, k: usize, out: Option<&Path>) -> Result<(), Error> {
    if let Some(path) = file {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        mwes.extend(text.lines().map(str::trim).filter(|l| !l.is_empty()).map(str::to_string));
    }
    if mwes.is_empty() {
        return Err(HarnessError::InvalidArgument("no MWEs given (use --mwe or --mwes)".into()).into());
    }
    let mut buf = String::from("mwe\tcontext\n");
    for mwe in &mwes {
        match harvest_contexts(corpus, mwe, k) {
            Ok(set) => {
                for c in &set.contexts {
                    buf.push_str(&format!("{mwe}\t{}\n", c.replace('\t', " ")));
                }
            }
            Err(idiom_fewshot::corpus::CorpusError::NoContexts { .. }) => {
                log::warn!("no contexts for {mwe:?}");
            }
            Err(e) => return Err(e.into()),
        }
    }
    match out {
        Some(path) => fs::write(path, buf).map_err(io_err(path)),
        None => std::io::stdout()
            .write_all(buf.as_bytes())
            .map_err(io_err(Path::new("<stdout>"))),
    }
}

fn report(entries: &[String], out: Option<&Path>) -> Result<(), Error> {
    let mut rows = Vec::with_capacity(entries.len());
    for entry in entries {
        let (name, path) = match entry.split_once('=') {
            Some((n, p)) => (n.to_string(), PathBuf::from(p)),
            None => {
                let p = PathBuf::from(entry);
                let name = p
                    .parent()
                    .and_then(|d| d.file_name())
                    .map(|n| n.to_string_lossy().into_owned())
                    .unwrap_or_else(|| entry.clone());
                (name, p)
            }
        };
        rows.push((name, load_report(&path)?));
    }
    let refs: Vec<(&str, &_)> = rows.iter().map(|(n, r)| (n.as_str(), r)).collect();
    let table = render_table(&refs);
    match out {
        Some(path) => fs::write(path, &table).map_err(io_err(path)),
        None => {
            print!("{table}");
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::TrainPet(a) => run_task(Task::Pet, a),
        Command::TrainIpet(a) => run_task(Task::Ipet, a),
        Command::BertramTrain(a) => run_task(Task::BertramTrain, a),
        Command::BertramInject(a) => run_task(Task::BertramInject, a),
        Command::Evaluate(a) => run_task(Task::Evaluate, a),
        Command::Harvest { corpus, mwe, mwes, k, out } => {
            harvest(&corpus, mwe, mwes.as_deref(), k, out.as_deref())
        }
        Command::Report { reports, out } => report(&reports, out.as_deref()),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error[{}]: {e}", e.module());
            ExitCode::FAILURE
        }
    }
}
