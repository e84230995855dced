use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use surgeon::{oracle, pipeline, recipe, report, Error};

const EXIT_VALIDATION: u8 = 1;
const EXIT_RUNTIME: u8 = 2;

#[derive(Parser)]
#[command(name = "surgeon", version, about = "Second-order pruning recipes on toy models")]
struct Cli {
    /// Worker threads for block updates, scoring and batch math.
    #[arg(long, global = true, env = "SURGEON_THREADS")]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Execute a recipe and write report, logs and checkpoint into --out.
    Run {
        #[arg(long)]
        recipe: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Summarize a run directory, optionally against a second one.
    Report {
        dir: PathBuf,
        #[arg(long)]
        compare: Option<PathBuf>,
    },
    /// Cross-check the estimator and saliency against brute-force oracles.
    OracleCheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Random estimator configurations.
        #[arg(long, default_value_t = 50)]
        fisher_cases: usize,
        /// Random exhaustive-search instances.
        #[arg(long, default_value_t = 200)]
        group_cases: usize,
    },
    /// Parse, validate and compile a recipe without running it.
    ValidateRecipe {
        #[arg(long)]
        recipe: PathBuf,
        /// Steps per epoch used for compilation; defaults to the recipe's own.
        #[arg(long)]
        steps_per_epoch: Option<usize>,
    },
}

fn fail(e: &Error) -> ExitCode {
    eprintln!("error: {e}");
    ExitCode::from(if e.is_validation() { EXIT_VALIDATION } else { EXIT_RUNTIME })
}

fn validate(path: &PathBuf, steps_per_epoch: Option<usize>) -> surgeon::Result<String> {
    let r = recipe::parse(&std::fs::read_to_string(path)?)?;
    let spe = steps_per_epoch.unwrap_or_else(|| r.steps_per_epoch());
    let timeline = recipe::compile_timeline(&r, spe)?;
    Ok(format!(
        "{}: ok ({} steps, {} steps per epoch, {} prune events)",
        r.id,
        timeline.records.len(),
        spe,
        timeline.prune_events().count()
    ))
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(EXIT_RUNTIME);
        }
    }
    match cli.command {
        Command::Run { recipe, seed, out } => match pipeline::run_file(&recipe, seed, &out) {
            Ok(r) => {
                let test = r.final_test.map_or(f64::NAN, |m| m.loss);
                println!("{}: sparsity {:.6}, held-out loss {test:.6}, report in {}", r.recipe_id, r.final_sparsity, out.display());
                ExitCode::SUCCESS
            }
            Err(e) => fail(&e),
        },
        Command::Report { dir, compare } => {
            let summary = match report::summarize(&dir) {
                Ok(s) => s,
                Err(e) => return fail(&e),
            };
            print!("{}", summary.text);
            if let Some(other) = compare {
                match report::compare(&dir, &other) {
                    Ok(text) => print!("\n{text}"),
                    Err(e) => return fail(&e),
                }
            }
            ExitCode::SUCCESS
        }
        Command::OracleCheck { seed, fisher_cases, group_cases } => {
            let checks = match (oracle::check_fisher(seed, fisher_cases), oracle::check_best_group(seed, group_cases)) {
                (Ok(a), Ok(b)) => [a, b],
                (Err(e), _) | (_, Err(e)) => return fail(&e),
            };
            for c in &checks {
                let verdict = if c.passed { "PASS" } else { "FAIL" };
                println!("{verdict} {}: {} cases, worst {:e} (tolerance {:e})", c.name, c.cases, c.worst, c.tolerance);
            }
            if checks.iter().all(|c| c.passed) {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(EXIT_RUNTIME)
            }
        }
        Command::ValidateRecipe { recipe, steps_per_epoch } => match validate(&recipe, steps_per_epoch) {
            Ok(line) => {
                println!("{line}");
                ExitCode::SUCCESS
            }
            Err(e) => fail(&e),
        },
    }
}
