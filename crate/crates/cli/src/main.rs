use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::json;
use vecmerge_core::merge_report::{diff_stats, interference_stats, DiffReport, InterferenceReport};
use vecmerge_core::recipe_engine::{
    execute_all, execute_recipe_in, parse_recipe, select_best, sweep_points, DTypeChoice,
    MetricsTable, RecipeError, DEFAULT_SWEEP_CAP,
};
use vecmerge_core::tensor_store::{
    read_archive_file, validate_archive, write_archive_file, DTypePolicy,
};
use vecmerge_core::ties::{ties_merge, TiesConfig, DEFAULT_DENSITY, DEFAULT_LAMBDA};
use vecmerge_core::toy_bench::{
    default_seeds, pipeline_checkpoints, run_bench, BenchConfig, BenchError, ScenarioName,
};
use vecmerge_core::tv_algebra::{
    extract_task_vector, is_task_vector, tv_merge, MismatchPolicy, Origin,
};
use vecmerge_core::{Checkpoint, MergeError, StoreError, TaskVector};

const EXIT_INVALID_ARCHIVE: u8 = 1;
const EXIT_VALIDATION: u8 = 2;
const EXIT_MERGE: u8 = 3;

#[derive(Parser)]
#[command(
    name = "vecmerge",
    version,
    about = "Task-vector and TIES checkpoint merging"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Validate an archive and print its report as JSON.
    Inspect { path: PathBuf },
    /// Write `finetuned - base` as a task-vector archive.
    Extract {
        #[arg(long)]
        base: PathBuf,
        #[arg(long)]
        finetuned: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "error")]
        on_mismatch: MismatchPolicy,
    },
    /// Merge task vectors into a base checkpoint.
    #[command(subcommand)]
    Merge(MergeCommand),
    /// Execute a recipe, optionally expanding its sweep or selecting a point.
    Run {
        #[arg(long)]
        recipe: PathBuf,
        #[arg(long)]
        sweep: bool,
        #[arg(long, requires = "select")]
        metrics: Option<PathBuf>,
        #[arg(long, requires = "metrics")]
        select: bool,
        #[arg(long, default_value_t = DEFAULT_SWEEP_CAP)]
        max_points: usize,
    },
    /// Element-wise statistics of `b - a`.
    Diff {
        a: PathBuf,
        b: PathBuf,
        #[arg(long)]
        json: bool,
    },
    /// Trim and sign-agreement statistics for task vectors.
    Interference {
        #[arg(long = "vector", required = true)]
        vectors: Vec<PathBuf>,
        #[arg(long, default_value_t = DEFAULT_DENSITY)]
        density: f64,
        #[arg(long)]
        json: bool,
    },
    /// Run the toy merge-then-fine-tune benchmark.
    Bench {
        /// A scenario name, a comma-separated list, or `all`.
        #[arg(long, default_value = "all")]
        scenario: String,
        /// Number of seeds (0, 1, ..).
        #[arg(long, default_value_t = 5)]
        seeds: usize,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Also write each seed's base, auxiliary and task-vector archives here.
        #[arg(long)]
        save_models: Option<PathBuf>,
    },
}

#[derive(Args)]
struct VectorArgs {
    #[arg(long)]
    base: PathBuf,
    /// Task-vector archive, or a fine-tuned checkpoint to extract from.
    #[arg(long = "vector", required = true)]
    vectors: Vec<PathBuf>,
    #[arg(long = "weight", required = true)]
    weights: Vec<f64>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value = "keep")]
    dtype: DTypeChoice,
}

#[derive(Subcommand)]
enum MergeCommand {
    Tv(VectorArgs),
    Ties {
        #[command(flatten)]
        common: VectorArgs,
        #[arg(long, default_value_t = DEFAULT_DENSITY)]
        density: f64,
        #[arg(long, default_value_t = DEFAULT_LAMBDA)]
        lambda: f64,
        #[arg(long)]
        report: Option<PathBuf>,
    },
}

enum Failure {
    Validation(String),
    Merge(String),
    InvalidArchive,
}

impl From<StoreError> for Failure {
    fn from(e: StoreError) -> Self {
        Failure::Merge(e.to_string())
    }
}

impl From<MergeError> for Failure {
    fn from(e: MergeError) -> Self {
        match e {
            MergeError::InvalidDensity(_)
            | MergeError::InvalidWeights(_)
            | MergeError::NonFiniteScale(_) => Failure::Validation(e.to_string()),
            other => Failure::Merge(other.to_string()),
        }
    }
}

impl From<RecipeError> for Failure {
    fn from(e: RecipeError) -> Self {
        if e.is_validation() {
            Failure::Validation(e.to_string())
        } else {
            Failure::Merge(e.to_string())
        }
    }
}

impl From<BenchError> for Failure {
    fn from(e: BenchError) -> Self {
        match e {
            BenchError::Invalid(m) => Failure::Validation(m),
            other => Failure::Merge(other.to_string()),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Merge(e.to_string())
    }
}

type Outcome = Result<(), Failure>;

fn read(path: &Path) -> Result<Checkpoint, Failure> {
    read_archive_file(path).map_err(|e| Failure::Merge(format!("{}: {e}", path.display())))
}

fn print_json(value: &impl serde::Serialize) {
    println!(
        "{}",
        serde_json::to_string_pretty(value).expect("serializable")
    );
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Outcome {
    fs::write(
        path,
        serde_json::to_string_pretty(value).expect("serializable") + "\n",
    )?;
    Ok(())
}

/// Loads each source as a task vector, extracting against `base` when it is
/// a plain checkpoint.
fn load_vectors(
    base: &Checkpoint,
    base_path: &Path,
    paths: &[PathBuf],
) -> Result<Vec<TaskVector>, Failure> {
    paths
        .iter()
        .map(|p| {
            let ck = read(p)?;
            if is_task_vector(&ck) {
                return Ok(TaskVector::from_checkpoint(&ck));
            }
            let (tv, _) = extract_task_vector(base, &ck, MismatchPolicy::Error)?;
            Ok(tv.with_origin(Origin::Extracted {
                base_id: base_path.display().to_string(),
                finetuned_id: p.display().to_string(),
            }))
        })
        .collect()
}

fn check_pairs(args: &VectorArgs) -> Outcome {
    if args.vectors.len() != args.weights.len() {
        return Err(Failure::Validation(format!(
            "{} vectors but {} weights",
            args.vectors.len(),
            args.weights.len()
        )));
    }
    Ok(())
}

fn inspect(path: &Path) -> Outcome {
    let report = validate_archive(path)?;
    print_json(&report);
    if report.valid {
        Ok(())
    } else {
        Err(Failure::InvalidArchive)
    }
}

fn extract(base: &Path, finetuned: &Path, out: &Path, policy: MismatchPolicy) -> Outcome {
    let (b, f) = (read(base)?, read(finetuned)?);
    let (tv, summary) = extract_task_vector(&b, &f, policy)?;
    let tv = tv.with_origin(Origin::Extracted {
        base_id: base.display().to_string(),
        finetuned_id: finetuned.display().to_string(),
    });
    write_archive_file(&tv.to_checkpoint(), DTypePolicy::Keep, out)?;
    print_json(&json!({
        "output": out,
        "tensor_count": tv.len(),
        "param_count": tv.param_count(),
        "ignored": summary.ignored,
        "copied": summary.copied,
    }));
    Ok(())
}

fn merge(cmd: MergeCommand) -> Outcome {
    match cmd {
        MergeCommand::Tv(args) => {
            check_pairs(&args)?;
            let base = read(&args.base)?;
            let tvs = load_vectors(&base, &args.base, &args.vectors)?;
            let weighted: Vec<(&TaskVector, f64)> =
                tvs.iter().zip(args.weights.iter().copied()).collect();
            let merged = tv_merge(&base, &weighted)?;
            write_archive_file(&merged, args.dtype.policy(), &args.out)?;
            print_json(&json!({ "output": args.out, "tensor_count": merged.len() }));
        }
        MergeCommand::Ties {
            common: args,
            density,
            lambda,
            report,
        } => {
            check_pairs(&args)?;
            let base = read(&args.base)?;
            let tvs = load_vectors(&base, &args.base, &args.vectors)?;
            let refs: Vec<&TaskVector> = tvs.iter().collect();
            let cfg = TiesConfig {
                density,
                weights: args.weights.clone(),
                lambda,
            };
            let (merged, interference) = ties_merge(&base, &refs, &cfg)?;
            write_archive_file(&merged, args.dtype.policy(), &args.out)?;
            if let Some(path) = report {
                write_json(&path, &interference)?;
            }
            print_json(&json!({ "output": args.out, "tensor_count": merged.len() }));
        }
    }
    Ok(())
}

fn run(recipe_path: &Path, sweep: bool, metrics: Option<&Path>, cap: usize) -> Outcome {
    let text = fs::read_to_string(recipe_path)
        .map_err(|e| Failure::Validation(format!("{}: {e}", recipe_path.display())))?;
    let recipe = parse_recipe(&text)?;
    // Relative paths inside a recipe are resolved against its directory.
    let dir = recipe_path.parent().unwrap_or(Path::new(""));

    if let Some(metrics) = metrics {
        let csv = fs::read_to_string(metrics)
            .map_err(|e| Failure::Validation(format!("{}: {e}", metrics.display())))?;
        let best = select_best(&MetricsTable::from_csv(&csv)?)?;
        let points = sweep_points(&recipe, cap)?;
        let chosen = points
            .iter()
            .find(|p| p.assignment == best)
            .ok_or_else(|| {
                Failure::Validation(format!(
                    "selected assignment {best:?} is not a point of this recipe's sweep"
                ))
            })?;
        if sweep {
            execute_recipe_in(&chosen.recipe, dir)?;
        }
        print_json(&json!({ "assignment": best, "output": chosen.recipe.output }));
        return Ok(());
    }

    if sweep {
        let points = sweep_points(&recipe, cap)?;
        let recipes: Vec<_> = points.iter().map(|p| p.recipe.clone()).collect();
        let mut rows = Vec::with_capacity(points.len());
        for (point, result) in points.iter().zip(execute_all(&recipes, dir)) {
            let outcome = result?;
            rows.push(json!({
                "assignment": point.assignment,
                "output": point.recipe.output,
                "wall_time_secs": outcome.wall_time_secs,
            }));
        }
        print_json(&rows);
    } else {
        print_json(&execute_recipe_in(&recipe, dir)?);
    }
    Ok(())
}

fn print_diff(report: &DiffReport) {
    println!(
        "{:<40} {:>12} {:>14} {:>14} {:>8}",
        "tensor", "numel", "l2", "max_abs", "equal"
    );
    let row = |name: &str, d: &vecmerge_core::merge_report::TensorDiff| {
        println!(
            "{:<40} {:>12} {:>14.6e} {:>14.6e} {:>8.4}",
            name, d.numel, d.l2, d.max_abs, d.equal_fraction
        )
    };
    for (name, d) in &report.tensors {
        row(name, d);
    }
    row("(global)", &report.global);
    for (label, names) in [
        ("only in a", &report.only_in_a),
        ("only in b", &report.only_in_b),
        ("shape mismatch", &report.shape_mismatch),
    ] {
        if !names.is_empty() {
            println!("{label}: {}", names.join(", "));
        }
    }
}

fn print_interference(report: &InterferenceReport) {
    println!(
        "vectors: {}  density: {}",
        report.vector_count, report.density
    );
    for (name, t) in std::iter::once(("(global)", &report.global))
        .chain(report.tensors.iter().map(|(n, t)| (n.as_str(), t)))
    {
        let pairs: Vec<String> = t
            .pairs
            .iter()
            .map(|p| match p.agreement {
                Some(a) => format!("{}-{}:{a:.4}", p.a, p.b),
                None => format!("{}-{}:n/a", p.a, p.b),
            })
            .collect();
        println!(
            "{name:<40} zero-sign {:>8}  agreement {}",
            t.zero_sign_count,
            pairs.join(" ")
        );
    }
}

fn bench(scenario: &str, seeds: usize, out: Option<&Path>, save_models: Option<&Path>) -> Outcome {
    let names = ScenarioName::parse_list(scenario)?;
    let seeds = default_seeds(seeds);
    let cfg = BenchConfig::default();
    let report = run_bench(&names, &seeds, &cfg)?;
    if let Some(dir) = save_models {
        fs::create_dir_all(dir)?;
        for &seed in &seeds {
            for (name, ck) in pipeline_checkpoints(&cfg, seed)? {
                write_archive_file(
                    &ck,
                    DTypePolicy::Keep,
                    dir.join(format!("{name}.safetensors")),
                )?;
            }
        }
    }
    match out {
        Some(path) => write_json(path, &report)?,
        None => print_json(&report),
    }
    for s in &report.scenarios {
        eprintln!(
            "{:<14} mean macro-F1 {:.4}",
            s.scenario.as_str(),
            s.mean_macro_f1
        );
    }
    Ok(())
}

fn dispatch(cli: Cli) -> Outcome {
    match cli.command {
        Command::Inspect { path } => inspect(&path),
        Command::Extract {
            base,
            finetuned,
            out,
            on_mismatch,
        } => extract(&base, &finetuned, &out, on_mismatch),
        Command::Merge(cmd) => merge(cmd),
        Command::Run {
            recipe,
            sweep,
            metrics,
            select: _,
            max_points,
        } => run(&recipe, sweep, metrics.as_deref(), max_points),
        Command::Diff { a, b, json } => {
            let report = diff_stats(&read(&a)?, &read(&b)?)?;
            if json {
                print_json(&report);
            } else {
                print_diff(&report);
            }
            Ok(())
        }
        Command::Interference {
            vectors,
            density,
            json,
        } => {
            let tvs: Vec<TaskVector> = vectors
                .iter()
                .map(|p| read(p).map(|ck| TaskVector::from_checkpoint(&ck)))
                .collect::<Result<_, _>>()?;
            let refs: Vec<&TaskVector> = tvs.iter().collect();
            let report = interference_stats(&refs, density)?;
            if json {
                print_json(&report);
            } else {
                print_interference(&report);
            }
            Ok(())
        }
        Command::Bench {
            scenario,
            seeds,
            out,
            save_models,
        } => bench(&scenario, seeds, out.as_deref(), save_models.as_deref()),
    }
}

fn main() -> ExitCode {
    match dispatch(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::InvalidArchive) => ExitCode::from(EXIT_INVALID_ARCHIVE),
        Err(Failure::Validation(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(EXIT_VALIDATION)
        }
        Err(Failure::Merge(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(EXIT_MERGE)
        }
    }
}
