//! Experiment suite runner: trains the 1-step baseline and the 2-step
//! chain on each bundled synthetic spec, writes side-by-side reports under
//! a results directory, and exits nonzero if any expected directional
//! outcome fails, naming the metric.
//!
//! Progress and timing go to stderr; every file written is deterministic
//! for a fixed spec, so two runs produce byte-identical artifacts.

use std::fmt::Write as _;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;

use backmap::experiments::{
    default_experiments, margin_narrows_with_flexibility, run_experiment, write_outcome,
    ExpectationCheck, ExperimentOutcome,
};
use backmap::io::{atomic_write, RunManifest};

#[derive(Parser)]
#[command(
    name = "backmap-bench",
    version,
    about = "Run the scripted 1-step vs 2-step comparison experiments"
)]
struct Args {
    /// Run only experiments whose name contains this substring.
    #[arg(long)]
    filter: Option<String>,
    /// Directory to write experiment artifacts into.
    #[arg(long, default_value = "results")]
    out: PathBuf,
    /// Worker threads (default: all cores). Results do not depend on this.
    #[arg(long)]
    threads: Option<usize>,
}

fn main() -> ExitCode {
    let args = Args::parse();
    if let Some(threads) = args.threads {
        if threads == 0 {
            eprintln!("error: --threads must be at least 1");
            return ExitCode::from(1);
        }
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global();
    }

    let specs: Vec<_> = default_experiments()
        .into_iter()
        .filter(|s| match &args.filter {
            Some(f) => s.name.contains(f.as_str()),
            None => true,
        })
        .collect();
    if specs.is_empty() {
        eprintln!(
            "error: no experiment matches filter {:?}; available: {}",
            args.filter.as_deref().unwrap_or(""),
            default_experiments()
                .iter()
                .map(|s| s.name.as_str())
                .collect::<Vec<_>>()
                .join(", ")
        );
        return ExitCode::from(1);
    }

    let mut manifest = RunManifest::new(&std::env::args().collect::<Vec<_>>());
    manifest.threads = args.threads;
    let mut outcomes: Vec<ExperimentOutcome> = Vec::new();
    for spec in &specs {
        eprintln!(
            "== {}: {} residues x {} frames, {} beads ==",
            spec.name, spec.data.n_residues, spec.data.n_frames, spec.n_beads
        );
        let outcome = match run_experiment(spec) {
            Ok(outcome) => outcome,
            Err(e) => {
                eprintln!("error: experiment '{}': {e}", spec.name);
                return ExitCode::from(2);
            }
        };
        eprintln!(
            "   done in {:.1} s (budget {} s), rho = {:.2}",
            outcome.elapsed.as_secs_f64(),
            spec.budget_secs,
            outcome.rho
        );
        for check in &outcome.checks {
            eprintln!(
                "   {}: {} — {}",
                if check.passed { "PASS" } else { "FAIL" },
                check.metric,
                check.detail
            );
        }
        match write_outcome(&outcome, &args.out) {
            Ok(paths) => {
                for path in paths {
                    let key = path
                        .strip_prefix(&args.out)
                        .unwrap_or(&path)
                        .display()
                        .to_string();
                    if let Err(e) = manifest.record_output_as(&key, &path) {
                        eprintln!("error: recording {}: {e}", path.display());
                        return ExitCode::from(2);
                    }
                }
            }
            Err(e) => {
                eprintln!("error: writing results for '{}': {e}", spec.name);
                return ExitCode::from(2);
            }
        }
        outcomes.push(outcome);
    }

    // Cross-experiment check: the flexible ensemble's improvement margin
    // must be smaller than the compact one's.
    let mut suite_checks: Vec<ExpectationCheck> = Vec::new();
    let find = |name: &str| outcomes.iter().find(|o| o.spec.name == name);
    if let (Some(rigid), Some(flexible)) = (find("compact-chain"), find("flexible-chain")) {
        let check = margin_narrows_with_flexibility(rigid, flexible);
        eprintln!(
            "   {}: {} — {}",
            if check.passed { "PASS" } else { "FAIL" },
            check.metric,
            check.detail
        );
        suite_checks.push(check);
    }

    let mut index = String::from("# experiment suite\n\n");
    for outcome in &outcomes {
        let passed = outcome.checks.iter().filter(|c| c.passed).count();
        let _ = writeln!(
            index,
            "- [{}]({}/summary.md): rho = {:.2}, {passed}/{} expected outcomes hold",
            outcome.spec.name,
            outcome.spec.name,
            outcome.rho,
            outcome.checks.len()
        );
    }
    for check in &suite_checks {
        let _ = writeln!(
            index,
            "- {}: {} — {}",
            if check.passed { "PASS" } else { "FAIL" },
            check.metric,
            check.detail
        );
    }
    let index_path = args.out.join("index.md");
    let manifest_path = args.out.join("run_manifest.json");
    if let Err(e) = atomic_write(&index_path, index.as_bytes()) {
        eprintln!("error: writing {}: {e}", index_path.display());
        return ExitCode::from(2);
    }
    if let Err(e) = manifest
        .record_output_as("index.md", &index_path)
        .and_then(|()| manifest.write(&manifest_path))
    {
        eprintln!("error: writing {}: {e}", manifest_path.display());
        return ExitCode::from(2);
    }

    let mut failed = outcomes
        .iter()
        .flat_map(|o| o.checks.iter())
        .chain(suite_checks.iter())
        .filter(|c| !c.passed);
    if let Some(first) = failed.next() {
        eprintln!(
            "error: expected outcome failed on {}: {}",
            first.metric, first.detail
        );
        return ExitCode::from(2);
    }
    eprintln!("all expected outcomes hold; results under {}", args.out.display());
    ExitCode::SUCCESS
}
