//! `knockoffs`: simulation studies, the HIV pipeline, knockoff generation and
//! filtering from CSV files.
//!
//! Failures exit with status 1 and print one JSON line on stderr:
//! `{"error":"<kind>","message":"<text>"}`.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use knockoff_core::diagnostics::swap_moment_report;
use knockoff_core::experiment::{self, ExperimentConfig, Generator, Source, TrainingOptions};
use knockoff_core::filter::{self, FilterMode};
use knockoff_core::hiv::{MutationDataset, SnapshotPaths, GLOBAL_MIN_OCCURRENCE};
use knockoff_core::lasso::{Family, PathOptions};
use knockoff_core::sim::Support;
use knockoff_core::{DataMatrix, Error, KnockoffPair, Result};
use ndarray::Array1;

#[derive(Parser)]
#[command(
    name = "knockoffs",
    version,
    about = "Auto-encoding knockoffs and the knockoff filter"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[allow(clippy::large_enum_variant)] // parsed once
#[derive(Subcommand)]
enum Command {
    /// Replication study on a simulated or CSV design (sources s1, s2, hiv_signal, csv).
    Simulate(RunArgs),
    /// HIV snapshot import and per-drug analysis.
    Hiv {
        #[command(subcommand)]
        command: HivCommand,
    },
    /// Generate knockoffs for a feature CSV.
    Knockoffs(KnockoffArgs),
    /// Lasso statistics and the knockoff filter on existing CSVs.
    Filter(FilterArgs),
    /// Recompute summary tables from a records CSV.
    Summarize {
        records: PathBuf,
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
}

#[allow(clippy::large_enum_variant)] // parsed once
#[derive(Subcommand)]
enum HivCommand {
    /// Load and filter a snapshot; report sizes and write per-drug CSVs.
    Import {
        #[arg(long, default_value = "data/hiv-sample")]
        dir: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = GLOBAL_MIN_OCCURRENCE)]
        min_occurrence: usize,
    },
    /// Per-drug knockoff selection compared with the TSM list.
    Run(RunArgs),
}

/// Flags override the matching fields of `--config`.
#[derive(Args, Default)]
struct RunArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_parser = parse_source)]
    source: Option<Source>,
    #[arg(long)]
    csv_path: Option<PathBuf>,
    #[arg(long)]
    hiv_dir: Option<PathBuf>,
    #[arg(long, value_delimiter = ',')]
    drugs: Option<Vec<String>>,
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    p: Option<usize>,
    #[arg(long, value_parser = parse_family)]
    family: Option<Family>,
    #[arg(long, value_parser = parse_support)]
    support: Option<Support>,
    /// Comma-separated: vae, vae:<preset>, catvae, second_order, fixed_x.
    #[arg(long, value_delimiter = ',')]
    generators: Option<Vec<String>>,
    /// Comma-separated: knockoff, knockoff_plus.
    #[arg(long, value_delimiter = ',', value_parser = parse_filter)]
    filters: Option<Vec<FilterMode>>,
    #[arg(long)]
    q: Option<f64>,
    #[arg(long, value_delimiter = ',')]
    m: Option<Vec<usize>>,
    #[arg(long, value_delimiter = ',')]
    rho: Option<Vec<f64>>,
    #[arg(long)]
    replications: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    parallelism: Option<usize>,
    #[arg(long)]
    output: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    grid_size: Option<usize>,
}

#[derive(Args)]
struct KnockoffArgs {
    /// Feature CSV (header row, optional `# kinds=` line).
    input: PathBuf,
    #[arg(long)]
    generator: String,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    /// Also write swap-moment diagnostics to this CSV.
    #[arg(long)]
    diagnostics: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
}

#[derive(Args)]
struct FilterArgs {
    #[arg(long)]
    design: PathBuf,
    #[arg(long)]
    knockoffs: PathBuf,
    /// CSV with a `y` column (otherwise the last column is used).
    #[arg(long)]
    response: PathBuf,
    #[arg(long, default_value_t = 0.1)]
    q: f64,
    #[arg(long, default_value = "knockoff_plus", value_parser = parse_filter)]
    mode: FilterMode,
    #[arg(long, default_value = "gaussian", value_parser = parse_family)]
    family: Family,
    #[arg(long)]
    out: PathBuf,
}

fn parse_source(s: &str) -> std::result::Result<Source, String> {
    match s {
        "s1" => Ok(Source::S1),
        "s2" => Ok(Source::S2),
        "hiv" => Ok(Source::Hiv),
        "hiv_signal" => Ok(Source::HivSignal),
        "csv" => Ok(Source::Csv),
        _ => Err(format!("unknown source `{s}` (s1, s2, hiv, hiv_signal, csv)")),
    }
}

fn parse_family(s: &str) -> std::result::Result<Family, String> {
    match s {
        "gaussian" => Ok(Family::Gaussian),
        "binomial" => Ok(Family::Binomial),
        _ => Err(format!("unknown family `{s}` (gaussian, binomial)")),
    }
}

fn parse_support(s: &str) -> std::result::Result<Support, String> {
    match s {
        "leading" => Ok(Support::Leading),
        "random" => Ok(Support::Random),
        _ => Err(format!("unknown support `{s}` (leading, random)")),
    }
}

fn parse_filter(s: &str) -> std::result::Result<FilterMode, String> {
    FilterMode::parse(s).map_err(|e| e.to_string())
}

impl RunArgs {
    fn config(self, default_source: Source) -> Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(path) => ExperimentConfig::read(path)?,
            None => ExperimentConfig {
                source: default_source,
                ..ExperimentConfig::default()
            },
        };
        macro_rules! set {
            ($($field:ident),*) => {$(if let Some(v) = self.$field { cfg.$field = v; })*};
        }
        set!(
            source,
            hiv_dir,
            drugs,
            n,
            p,
            family,
            support,
            generators,
            filters,
            q,
            m,
            rho,
            replications,
            seed,
            parallelism
        );
        if self.csv_path.is_some() {
            cfg.csv_path = self.csv_path;
        }
        if self.output.is_some() {
            cfg.output = self.output;
        }
        let t = &mut cfg.training;
        t.epochs = self.epochs.unwrap_or(t.epochs);
        t.batch_size = self.batch_size.unwrap_or(t.batch_size);
        t.learning_rate = self.learning_rate.unwrap_or(t.learning_rate);
        cfg.lasso.grid_size = self.grid_size.unwrap_or(cfg.lasso.grid_size);
        Ok(cfg)
    }
}

fn simulate(args: RunArgs) -> Result<()> {
    let cfg = args.config(Source::S1)?;
    if cfg.source == Source::Hiv {
        return Err(Error::Config(
            "use `knockoffs hiv run` for the real-outcome HIV analysis".into(),
        ));
    }
    report(&experiment::run_experiment(&cfg)?);
    Ok(())
}

fn hiv_run(args: RunArgs) -> Result<()> {
    let mut cfg = args.config(Source::Hiv)?;
    cfg.source = Source::Hiv;
    report(&experiment::run_experiment(&cfg)?);
    Ok(())
}

fn report(out: &experiment::ExperimentOutput) {
    println!("config {}", out.config_hash);
    println!("{} records", out.records.len());
    for row in &out.summary.curves {
        println!(
            "{:<16} {:<13} m={:<3} rho={:<6} fdr={:.3} ({:.3}) power={:.3} ({:.3})",
            row.generator, row.filter, row.m, row.rho, row.fdr, row.fdr_se, row.power, row.power_se
        );
    }
    for row in &out.summary.hiv {
        println!(
            "{:<5} n={:<4} {:<16} {:<13} rep {} {}",
            row.drug, row.n, row.generator, row.filter, row.replication, row.cell
        );
    }
}

fn hiv_import(dir: &Path, out: Option<&Path>, min_occurrence: usize) -> Result<()> {
    let data = MutationDataset::load(&SnapshotPaths::in_dir(dir), min_occurrence)?;
    println!(
        "patients {} mutations {} tsm positions {}",
        data.n(),
        data.p(),
        data.tsm_positions().len()
    );
    if let Some(out) = out {
        std::fs::create_dir_all(out)?;
    }
    for drug in data.drugs() {
        match data.per_drug_view(drug) {
            Ok(view) => {
                println!(
                    "{drug}: n {} p {} dropped nonpositive {}",
                    view.design.nrows(),
                    view.design.ncols(),
                    view.dropped_nonpositive
                );
                if let Some(out) = out {
                    view.write_csv(&out.join(format!("{drug}_x.csv")), &out.join(format!("{drug}_y.csv")))?;
                }
            }
            Err(e) => println!("{drug}: skipped ({e})"),
        }
    }
    Ok(())
}

fn knockoffs(args: KnockoffArgs) -> Result<()> {
    let (x, _) = DataMatrix::read_csv_file(&args.input)?;
    let generator = Generator::parse(&args.generator, Source::Csv)?;
    let mut training = TrainingOptions::default();
    training.epochs = args.epochs.unwrap_or(training.epochs);
    let pair = experiment::generate(generator, &x, args.seed, &training)?;
    pair.knockoff.write_csv_file(&args.out, &pair.provenance(None))?;
    if let Some(path) = args.diagnostics {
        let report = swap_moment_report(&pair);
        report.write_csv(std::fs::File::create(&path)?)?;
        println!(
            "max gaps: mean {:.4} covariance {:.4} cross {:.4}; flagged {}",
            report.max_mean_gap(),
            report.max_covariance_gap(),
            report.max_cross_gap(),
            report.any_flag()
        );
    }
    Ok(())
}

fn read_response(path: &Path) -> Result<Array1<f64>> {
    let mut reader = csv::Reader::from_path(path)?;
    let headers = reader.headers()?.clone();
    let col = headers
        .iter()
        .position(|h| h.trim() == "y")
        .unwrap_or(headers.len().saturating_sub(1));
    let mut y = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let record = record?;
        let field = record.get(col).unwrap_or("").trim();
        y.push(field.parse().map_err(|_| Error::Parse {
            path: path.to_path_buf(),
            line: i + 2,
            message: format!("`{field}` is not a number"),
        })?);
    }
    if y.is_empty() {
        return Err(Error::Empty(format!("{} has no responses", path.display())));
    }
    Ok(Array1::from(y))
}

fn filter_files(args: FilterArgs) -> Result<()> {
    let (x, _) = DataMatrix::read_csv_file(&args.design)?;
    let (xk, prov) = DataMatrix::read_csv_file(&args.knockoffs)?;
    let y = read_response(&args.response)?;
    let tag = knockoff_core::GeneratorTag {
        name: prov.get("generator").unwrap_or("external").to_string(),
        seed: prov.get("seed").and_then(|s| s.parse().ok()).unwrap_or(0),
    };
    let names = x.names().to_vec();
    let pair = KnockoffPair::new(x, xk.into_values(), tag)?;
    let stats = experiment::lasso_statistics(&pair, &y, args.family, &PathOptions::default())?;
    let selection = filter::threshold(stats.w.view(), args.q, args.mode)?;
    filter::write_selection_csv(std::fs::File::create(&args.out)?, &names, &stats, &selection)?;
    let chosen: Vec<&str> = selection.selected.iter().map(|&j| names[j].as_str()).collect();
    println!("selected {}: {}", chosen.len(), chosen.join(" "));
    Ok(())
}

fn summarize(records: &Path, out: &Path) -> Result<()> {
    let records = experiment::read_records(std::fs::File::open(records)?)?;
    let summary = experiment::summarize(&records)?;
    std::fs::create_dir_all(out)?;
    summary.write(out)?;
    println!("{} summary rows, {} hiv rows", summary.curves.len(), summary.hiv.len());
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Simulate(args) => simulate(args),
        Command::Hiv {
            command:
                HivCommand::Import {
                    dir,
                    out,
                    min_occurrence,
                },
        } => hiv_import(&dir, out.as_deref(), min_occurrence),
        Command::Hiv {
            command: HivCommand::Run(args),
        } => hiv_run(args),
        Command::Knockoffs(args) => knockoffs(args),
        Command::Filter(args) => filter_files(args),
        Command::Summarize { records, out } => summarize(&records, &out),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let line = serde_json::json!({ "error": e.kind(), "message": e.to_string() });
            eprintln!("{line}");
            ExitCode::FAILURE
        }
    }
}
