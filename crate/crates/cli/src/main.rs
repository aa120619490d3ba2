mod report;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use gradmesh::cost::{check_reference_rows, PricingConfig};
use gradmesh::harness::{parse_override, run_experiment, ExperimentConfig, ExperimentResult};
use gradmesh::Error;
use log::info;

use report::{ReportFormat, SweepRow};

#[derive(Parser)]
#[command(name = "gradmesh", version, about = "Simulated serverless training aggregation experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment.
    Run(Common),
    /// Run one experiment per value of a single setting.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// Setting to vary.
        #[arg(long)]
        key: SweepKey,
        /// Comma-separated values.
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<String>,
    },
    /// Recompute the reference cost table from its durations and memory.
    Costcheck {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "md")]
        format: ReportFormat,
    },
}

#[derive(Args)]
struct Common {
    /// TOML experiment config; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a config key, e.g. `strategy.workers=8`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[arg(long, value_enum, default_value = "md")]
    format: ReportFormat,
    /// Directory for result files.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Shorthand for `--set training.seed=N`.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum SweepKey {
    Workers,
    Tau,
    Strategy,
}

impl SweepKey {
    fn name(self) -> &'static str {
        match self {
            SweepKey::Workers => "workers",
            SweepKey::Tau => "tau",
            SweepKey::Strategy => "strategy",
        }
    }
}

fn read_text(path: Option<&Path>) -> Result<String, Error> {
    match path {
        Some(p) => fs::read_to_string(p)
            .map_err(|e| Error::config(format!("cannot read config {}: {e}", p.display()))),
        None => Ok(String::new()),
    }
}

fn overrides(common: &Common) -> Result<Vec<(String, String)>, Error> {
    let mut list: Vec<(String, String)> =
        common.set.iter().map(|s| parse_override(s)).collect::<Result<_, _>>()?;
    if let Some(seed) = common.seed {
        list.push(("training.seed".into(), seed.to_string()));
    }
    Ok(list)
}

fn load_config(common: &Common, extra: &[(String, String)]) -> Result<ExperimentConfig, Error> {
    let text = read_text(common.config.as_deref())?;
    let mut list = overrides(common)?;
    list.extend_from_slice(extra);
    ExperimentConfig::from_toml_with_overrides(&text, &list)
}

fn write_file(dir: &Path, name: &str, body: &str) -> Result<(), Error> {
    fs::create_dir_all(dir)
        .and_then(|_| fs::write(dir.join(name), body))
        .map_err(|e| Error::contract(format!("cannot write {}: {e}", dir.join(name).display())))
}

fn cmd_run(common: &Common) -> Result<String, Error> {
    let cfg = load_config(common, &[])?;
    let result = run_experiment(&cfg)?;
    let report = match common.format {
        ReportFormat::Json => result.to_json() + "\n",
        ReportFormat::Csv => result.epochs_csv()?,
        ReportFormat::Md => report::run_markdown(&result),
    };
    if let Some(dir) = &common.out {
        write_file(dir, "result.json", &(result.to_json() + "\n"))?;
        write_file(dir, "epochs.csv", &result.epochs_csv()?)?;
        write_file(dir, &format!("report.{}", common.format.extension()), &report)?;
        info!("wrote results to {}", dir.display());
    }
    Ok(report)
}

/// Workers sweeps keep the number of minibatches per epoch fixed, so each
/// point still makes one pass over the same data.
fn sweep_overrides(key: SweepKey, value: &str, base: &ExperimentConfig) -> Result<Vec<(String, String)>, Error> {
    Ok(match key {
        SweepKey::Workers => {
            let w: usize = value
                .parse()
                .map_err(|_| Error::config(format!("worker count '{value}' is not a positive integer")))?;
            let total = base.strategy.workers * base.training.batches_per_worker;
            if w == 0 || !total.is_multiple_of(w) {
                return Err(Error::config(format!(
                    "{total} minibatches per epoch cannot be split evenly over {w} workers"
                )));
            }
            vec![
                ("strategy.workers".into(), w.to_string()),
                ("training.batches_per_worker".into(), (total / w).to_string()),
            ]
        }
        SweepKey::Tau => vec![("strategy.tau".into(), value.to_string())],
        SweepKey::Strategy => vec![("strategy.kind".into(), format!("\"{value}\""))],
    })
}

fn cmd_sweep(common: &Common, key: SweepKey, values: &[String]) -> Result<String, Error> {
    let base = load_config(common, &[])?;
    let mut results: Vec<(String, ExperimentResult)> = Vec::new();
    for value in values {
        let value = value.trim();
        let cfg = load_config(common, &sweep_overrides(key, value, &base)?)?;
        info!("sweep {}={value}", key.name());
        results.push((value.to_string(), run_experiment(&cfg)?));
    }
    let rows: Vec<SweepRow> = results
        .iter()
        .map(|(v, r)| SweepRow::new(key.name(), v, r))
        .collect();
    let csv = report::to_csv(&rows)?;
    let report = match common.format {
        ReportFormat::Json => serde_json::to_string_pretty(&rows).expect("rows serialize") + "\n",
        ReportFormat::Csv => csv.clone(),
        ReportFormat::Md => report::sweep_markdown(key.name(), &results),
    };
    if let Some(dir) = &common.out {
        write_file(dir, "sweep.csv", &csv)?;
        for (v, r) in &results {
            write_file(dir, &format!("result-{}-{v}.json", key.name()), &(r.to_json() + "\n"))?;
        }
        write_file(dir, &format!("report.{}", common.format.extension()), &report)?;
    }
    Ok(report)
}

fn cmd_costcheck(config: Option<&Path>, format: ReportFormat) -> Result<(String, bool), Error> {
    let pricing = match config {
        Some(_) => ExperimentConfig::from_toml_str(&read_text(config)?)?.pricing,
        None => PricingConfig::default(),
    };
    let lines = check_reference_rows(&pricing)?;
    let ok = lines.iter().all(|l| l.passed);
    Ok((report::costcheck(&lines, format)?, ok))
}

fn exit_code(e: &Error) -> ExitCode {
    match e {
        Error::Config(_) => ExitCode::from(2),
        _ => ExitCode::from(1),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().filter_or("GRADMESH_LOG", "warn")).init();
    let cli = Cli::parse();
    let outcome = match &cli.command {
        Command::Run(common) => cmd_run(common).map(|r| (r, true)),
        Command::Sweep { common, key, values } => cmd_sweep(common, *key, values).map(|r| (r, true)),
        Command::Costcheck { config, format } => cmd_costcheck(config.as_deref(), *format),
    };
    match outcome {
        Ok((report, ok)) => {
            print!("{report}");
            if ok {
                ExitCode::SUCCESS
            } else {
                eprintln!("gradmesh: some reference values did not reproduce");
                ExitCode::from(1)
            }
        }
        Err(e) => {
            eprintln!("gradmesh: {e}");
            exit_code(&e)
        }
    }
}
