use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use sync_core::batching::Phase3Mode;
use sync_core::coarse::load_coarse_csv;
use sync_core::copula::SdMode;
use sync_core::evaluation::{
    default_sort_keys, evaluate, run_simulation_study, AccuracyReport, SimulationConfig, StudyOutcome, SIZE_BUCKETS,
};
use sync_core::individual::{load_individual_csv, write_individual_csv};
use sync_core::matching::{probabilistic_match, MatchQuery};
use sync_core::pipeline::{
    detect_outliers, generate, generate_from_models, FittedModels, Manifest, PhaseTiming, PipelineConfig,
};
use sync_core::schema::{load_schema, Schema};

#[derive(Parser)]
#[command(name = "sync", version, about = "Reconstruct individual records from aggregated tables")]
struct Cli {
    /// Worker threads for unit-level parallelism (default: all cores).
    #[arg(long, global = true)]
    jobs: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the full pipeline on coarse data and write individual records.
    Generate(GenerateArgs),
    /// Score generated records against ground truth.
    Evaluate(EvaluateArgs),
    /// Run the synthetic-truth study over several seeds.
    Simulate(SimulateArgs),
    /// Rank the synthetic individuals of one unit against a partial record.
    Match(MatchArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum Toggle {
    On,
    Off,
}

#[derive(Clone, Copy, ValueEnum)]
enum SdModeArg {
    Paper,
    #[value(name = "sqrt_n", alias = "sqrt-n")]
    SqrtN,
    Pooled,
}

#[derive(Clone, Copy, ValueEnum)]
enum Phase3Arg {
    Distribution,
    Argmax,
}

#[derive(Args)]
struct PipelineArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, value_enum, default_value = "sqrt_n")]
    sd_mode: SdModeArg,
    #[arg(long, value_enum, default_value = "on")]
    outlier_removal: Toggle,
    /// Fraction of units flagged as outliers.
    #[arg(long, default_value_t = 0.02)]
    contamination: f64,
    #[arg(long, value_enum, default_value = "distribution")]
    phase3: Phase3Arg,
    /// Cap on predictor training rows; 0 trains on every sampled row.
    #[arg(long, default_value_t = sync_core::pipeline::DEFAULT_MAX_TRAINING_ROWS)]
    max_training_rows: usize,
}

impl PipelineArgs {
    fn config(&self) -> Result<PipelineConfig> {
        if !(0.0..0.5).contains(&self.contamination) {
            bail!("--contamination must lie in [0, 0.5)");
        }
        let mut config = PipelineConfig {
            seed: self.seed,
            sd_mode: match self.sd_mode {
                SdModeArg::Paper => SdMode::Paper,
                SdModeArg::SqrtN => SdMode::SqrtN,
                SdModeArg::Pooled => SdMode::Pooled,
            },
            outlier_removal: matches!(self.outlier_removal, Toggle::On),
            contamination: self.contamination,
            phase3: match self.phase3 {
                Phase3Arg::Distribution => Phase3Mode::Distribution,
                Phase3Arg::Argmax => Phase3Mode::Argmax,
            },
            ..PipelineConfig::default()
        };
        config.training.max_rows = (self.max_training_rows > 0).then_some(self.max_training_rows);
        Ok(config)
    }
}

#[derive(Args)]
struct GenerateArgs {
    #[arg(long)]
    coarse: PathBuf,
    #[arg(long)]
    schema: PathBuf,
    /// Individual CSV to write. The manifest and phase timings go beside it.
    #[arg(long)]
    out: PathBuf,
    /// Write the fitted models to this JSON file.
    #[arg(long, conflicts_with = "model")]
    save_model: Option<PathBuf>,
    /// Generate from previously saved models instead of fitting.
    #[arg(long)]
    model: Option<PathBuf>,
    /// Write per-unit outlier scores as CSV (unit_id, score, flagged).
    #[arg(long)]
    outlier_report: Option<PathBuf>,
    #[command(flatten)]
    pipeline: PipelineArgs,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    truth: PathBuf,
    #[arg(long)]
    generated: PathBuf,
    #[arg(long)]
    schema: PathBuf,
    /// Comma-separated features to sort by within each unit (default: the
    /// categorical core features).
    #[arg(long, value_delimiter = ',')]
    sort_by: Vec<String>,
    /// Also write the report as CSV.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SimulateArgs {
    /// Simulation config as JSON (default: the built-in desk-scale study).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Number of seeds, run as 0..n offset by --seed.
    #[arg(long, default_value_t = 20)]
    seeds: u64,
    /// Per-seed report CSV (default: stdout).
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    pipeline: PipelineArgs,
}

#[derive(Args)]
struct MatchArgs {
    /// Individual CSV to search.
    #[arg(long)]
    pool: PathBuf,
    #[arg(long)]
    schema: PathBuf,
    /// JSON file with `unit_id`, `attributes` and optional `weights`.
    #[arg(long)]
    query: PathBuf,
    #[arg(long, default_value_t = 1)]
    k: usize,
    /// Ranked CSV to write (default: stdout).
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    if let Some(jobs) = cli.jobs {
        if jobs == 0 {
            bail!("--jobs must be at least 1");
        }
        rayon::ThreadPoolBuilder::new().num_threads(jobs).build_global()?;
    }
    match cli.command {
        Command::Generate(args) => cmd_generate(args),
        Command::Evaluate(args) => cmd_evaluate(args),
        Command::Simulate(args) => cmd_simulate(args),
        Command::Match(args) => cmd_match(args),
    }
}

/// `out.csv` becomes `out.<suffix>`.
fn sibling(out: &Path, suffix: &str) -> PathBuf {
    out.with_extension(suffix)
}

fn write_output(path: Option<&Path>, body: &[u8]) -> Result<()> {
    match path {
        Some(p) => fs::write(p, body).with_context(|| format!("writing {}", p.display())),
        None => Ok(io::stdout().write_all(body)?),
    }
}

fn cmd_generate(args: GenerateArgs) -> Result<()> {
    let config = args.pipeline.config()?;
    let schema = load_schema(&args.schema)?;
    let coarse = load_coarse_csv(&args.coarse, &schema)?;

    let (individuals, models, timings) = match &args.model {
        Some(path) => {
            let models = FittedModels::load(path, &schema)?;
            let start = std::time::Instant::now();
            let individuals = generate_from_models(&coarse, &schema, &models, &config)?;
            let timing = PhaseTiming { phase: "generate_from_models".into(), seconds: start.elapsed().as_secs_f64() };
            (individuals, models, vec![timing])
        }
        None => {
            let out = generate(&coarse, &schema, &config)?;
            (out.individuals, out.models, out.timings)
        }
    };

    let mut csv = Vec::new();
    write_individual_csv(&mut csv, &individuals, &schema)?;
    fs::write(&args.out, csv).with_context(|| format!("writing {}", args.out.display()))?;
    let manifest = Manifest::new(&config, &coarse, &models, individuals.len());
    fs::write(sibling(&args.out, "manifest.json"), manifest.to_json())?;
    fs::write(sibling(&args.out, "timings.json"), serde_json::to_string_pretty(&timings)? + "\n")?;
    if let Some(path) = &args.save_model {
        models.save(path)?;
    }
    if let Some(path) = &args.outlier_report {
        let mut buf = Vec::new();
        detect_outliers(&coarse, &schema, &config)?.write_csv(&mut buf)?;
        fs::write(path, buf).with_context(|| format!("writing {}", path.display()))?;
    }
    eprintln!("wrote {} rows for {} units to {}", individuals.len(), coarse.len(), args.out.display());
    Ok(())
}

fn sort_keys(schema: &Schema, names: &[String]) -> Result<Vec<usize>> {
    if names.is_empty() {
        return Ok(default_sort_keys(schema));
    }
    names.iter().map(|n| schema.index_of(n).with_context(|| format!("--sort-by: unknown feature `{n}`"))).collect()
}

fn cmd_evaluate(args: EvaluateArgs) -> Result<()> {
    let schema = load_schema(&args.schema)?;
    let keys = sort_keys(&schema, &args.sort_by)?;
    let truth = load_individual_csv(&args.truth, &schema)?;
    let generated = load_individual_csv(&args.generated, &schema)?;
    let report = evaluate(&truth, &generated, &schema, &keys)?;
    print!("{report}");
    if let Some(path) = &args.out {
        let mut buf = Vec::new();
        report.write_csv(&mut buf)?;
        write_output(Some(path), &buf)?;
    }
    Ok(())
}

fn simulation_columns(config: &SimulationConfig) -> (Vec<String>, Vec<usize>) {
    let mut classes: Vec<usize> = config.features.iter().map(|f| f.classes).collect();
    classes.sort_unstable();
    classes.dedup();
    let mut header: Vec<String> =
        ["seed", "accuracy", "accuracy_no_outlier_removal", "per_row_mean"].map(String::from).to_vec();
    header.extend(SIZE_BUCKETS.iter().map(|(label, _, _)| format!("size_{label}")));
    header.extend(classes.iter().map(|c| format!("classes_{c}")));
    (header, classes)
}

fn simulation_values(outcome: &StudyOutcome, classes: &[usize]) -> Vec<f64> {
    let on: &AccuracyReport = &outcome.with_outlier_removal;
    let mut values = vec![on.overall_accuracy(), outcome.without_outlier_removal.overall_accuracy(), on.per_row_mean];
    values.extend(on.by_unit_size.iter().map(|b| b.cells.accuracy()));
    values.extend(classes.iter().map(|&c| on.class_count(c).map_or(f64::NAN, |a| a.cells.accuracy())));
    values
}

fn format_value(x: f64) -> String {
    if x.is_nan() {
        String::new()
    } else {
        format!("{x:.6}")
    }
}

fn cmd_simulate(args: SimulateArgs) -> Result<()> {
    if args.seeds == 0 {
        bail!("--seeds must be at least 1");
    }
    let pipeline = args.pipeline.config()?;
    let config = match &args.config {
        Some(path) => {
            let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?
        }
        None => SimulationConfig::default(),
    };
    config.validate()?;
    let (header, classes) = simulation_columns(&config);

    let mut wtr = csv::Writer::from_writer(Vec::new());
    wtr.write_record(&header)?;
    let mut sums = vec![0.0; header.len() - 1];
    let mut counts = vec![0usize; header.len() - 1];
    for offset in 0..args.seeds {
        let seed = pipeline.seed + offset;
        let outcome = run_simulation_study(&config, seed, &pipeline)?;
        let values = simulation_values(&outcome, &classes);
        for (i, v) in values.iter().enumerate() {
            if !v.is_nan() {
                sums[i] += v;
                counts[i] += 1;
            }
        }
        let mut record = vec![seed.to_string()];
        record.extend(values.iter().map(|&v| format_value(v)));
        wtr.write_record(&record)?;
        eprintln!("seed {seed}: accuracy {:.4}", values[0]);
    }
    let mut mean = vec!["mean".to_string()];
    mean.extend(sums.iter().zip(&counts).map(|(s, &n)| format_value(if n > 0 { s / n as f64 } else { f64::NAN })));
    wtr.write_record(&mean)?;
    write_output(args.out.as_deref(), &wtr.into_inner()?)
}

fn cmd_match(args: MatchArgs) -> Result<()> {
    if args.k == 0 {
        bail!("--k must be at least 1");
    }
    let schema = load_schema(&args.schema)?;
    let text = fs::read_to_string(&args.query).with_context(|| format!("reading {}", args.query.display()))?;
    let query = MatchQuery::from_json_str(&text).with_context(|| format!("parsing {}", args.query.display()))?;
    let pool = load_individual_csv(&args.pool, &schema)?;
    let ranked = probabilistic_match(&query, &pool, &schema, args.k)?;

    let mut wtr = csv::Writer::from_writer(Vec::new());
    let mut header: Vec<String> = ["rank", "unit_id", "person_index", "distance"].map(String::from).to_vec();
    header.extend(schema.features().iter().map(|f| f.name.clone()));
    wtr.write_record(&header)?;
    let mut rows = Vec::new();
    write_individual_csv(
        &mut rows,
        &sync_core::individual::IndividualTable {
            columns: pool.columns.clone(),
            rows: ranked.iter().map(|c| pool.rows[c.row].clone()).collect(),
        },
        &schema,
    )?;
    let mut rdr = csv::Reader::from_reader(rows.as_slice());
    for (candidate, record) in ranked.iter().zip(rdr.records()) {
        let record = record?;
        let mut out = vec![candidate.rank.to_string()];
        out.extend(record.iter().take(2).map(String::from));
        out.push(format!("{:.6}", candidate.distance));
        out.extend(record.iter().skip(2).map(String::from));
        wtr.write_record(&out)?;
    }
    write_output(args.out.as_deref(), &wtr.into_inner()?)
}
