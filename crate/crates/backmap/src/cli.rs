//! The command-line surface.
//!
//! One binary, seven subcommands covering the whole workflow:
//!
//! - `synth`: generate a synthetic peptide ensemble as a multi-model PDB.
//! - `coarsen`: build a coarsening ladder and cache the mappings and the
//!   coarse ensembles to disk, reporting residues-per-bead (`rho`) per level.
//! - `train`: train one step model per ladder level from a config file and
//!   save the resulting chain under a verifiable manifest.
//! - `backmap`: reconstruct fine coordinates from a coarsest-level ensemble,
//!   writing the atomistic output and every intermediate level.
//! - `evaluate`: score a chain's reconstructions of held-out fine frames
//!   (RMSD, normalized bond-graph edit distance, clash score) across seeds.
//! - `rama`: bin backbone dihedrals into a plot-ready histogram CSV.
//! - `rg`: per-frame radius of gyration CSV.
//!
//! Global flags: `--seed` (overrides config seeds), `--config` (TOML run
//! configuration supplying data sources and defaults), `--threads` (worker
//! pool size; results never depend on it). The `BACKMAP_OUTPUT_ROOT`
//! environment variable overrides the root directory under which relative
//! and default output directories are placed; otherwise the config's
//! `output_dir` (or the working directory) is the root.
//!
//! Exit codes: 0 on success, 1 on usage errors, 2 on runtime failures.
//! Every run writes `run_manifest.json` into its output directory with
//! content hashes of inputs and outputs, the seed, the thread request, and
//! the tool version — enough to verify a bitwise reproduction. Progress
//! goes to stderr; results and file paths go to stdout.

use std::env;
use std::ffi::{OsStr, OsString};
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use thiserror::Error;

use crate::coarsen::{bead_size_rho, LearnOptions};
use crate::io::config::{load_run_config, RunConfig};
use crate::io::manifest::{load_chain_with_topology, save_chain, RunManifest};
use crate::io::mapping::write_mapping;
use crate::io::pdb::{parse_pdb, write_pdb};
use crate::io::{atomic_write, IoError};
use crate::metrics::{
    evaluate_scheme, phi_psi, radius_of_gyration, MetricsError, RamachandranHistogram,
};
use crate::mol::{bead_topology, Conformation, Ensemble, MolError};
use crate::pipeline::{
    backmap, build_ladder, generate_synthetic_ensemble, train_chain_logged, LevelSpec,
    PipelineError, SyntheticSpec,
};
use crate::train::{split_dataset, TrainError};

const EXIT_OK: i32 = 0;
const EXIT_USAGE: i32 = 1;
const EXIT_RUNTIME: i32 = 2;

/// Environment variable that overrides the output root directory.
pub const OUTPUT_ROOT_VAR: &str = "BACKMAP_OUTPUT_ROOT";

#[derive(Debug, Error)]
pub enum CliError {
    /// A problem with how the tool was invoked; exits 1.
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Io(#[from] IoError),
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Mol(#[from] MolError),
    #[error(transparent)]
    Train(#[from] TrainError),
}

#[derive(Parser, Debug)]
#[command(
    name = "backmap",
    version,
    about = "Multiscale generative backmapping for coarse-grained molecular ensembles"
)]
struct Cli {
    /// Base random seed; overrides seeds from the config file.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// TOML run configuration supplying data sources and defaults.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,

    /// Worker thread count (default: all cores). Results never depend on it.
    #[arg(long, global = true, value_name = "N")]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Generate a synthetic peptide ensemble as a multi-model PDB.
    Synth {
        /// Number of residues (default: config [synthetic] section, else 12).
        #[arg(long)]
        residues: Option<usize>,
        /// Number of frames.
        #[arg(long)]
        frames: Option<usize>,
        /// Half-width of the backbone torsion jitter, degrees.
        #[arg(long, value_name = "DEG")]
        flexibility: Option<f64>,
        /// Output directory (default: <root>/synth).
        #[arg(long, value_name = "DIR")]
        out_dir: Option<PathBuf>,
    },
    /// Build a coarsening ladder; cache mappings and coarse ensembles.
    Coarsen {
        /// Fine-grained multi-model PDB (default: the config's dataset or
        /// synthetic section).
        #[arg(long, value_name = "FILE")]
        input: Option<PathBuf>,
        /// Start with a one-bead-per-residue alpha-carbon level.
        #[arg(long)]
        calpha: bool,
        /// Append a learned level with N beads (repeatable, coarsest last).
        #[arg(long, value_name = "N")]
        beads: Vec<usize>,
        /// Output directory (default: <root>/coarsen).
        #[arg(long, value_name = "DIR")]
        out_dir: Option<PathBuf>,
    },
    /// Train one step model per ladder level and save the chain.
    Train {
        /// Output directory (default: <root>/train).
        #[arg(long, value_name = "DIR")]
        out_dir: Option<PathBuf>,
    },
    /// Reconstruct fine coordinates from a coarsest-level ensemble.
    Backmap {
        /// chain.json manifest written by `train`.
        #[arg(long, value_name = "FILE")]
        chain: PathBuf,
        /// Coarsest-level multi-model PDB.
        #[arg(long, value_name = "FILE")]
        input: PathBuf,
        /// Output directory (default: <root>/backmap).
        #[arg(long, value_name = "DIR")]
        out_dir: Option<PathBuf>,
    },
    /// Score a chain's reconstructions of held-out fine frames.
    Evaluate {
        /// chain.json manifest written by `train`.
        #[arg(long, value_name = "FILE")]
        chain: PathBuf,
        /// Fine-grained test ensemble PDB.
        #[arg(long, value_name = "FILE")]
        input: PathBuf,
        /// Number of sampling seeds (at least 3). Seeds run from --seed
        /// (default 1) upward; without this flag the config's list is used.
        #[arg(long, value_name = "N")]
        seeds: Option<usize>,
        /// Output directory (default: <root>/evaluate).
        #[arg(long, value_name = "DIR")]
        out_dir: Option<PathBuf>,
    },
    /// Bin backbone dihedrals of an ensemble into a histogram CSV.
    Rama {
        /// Fine-grained multi-model PDB.
        #[arg(long, value_name = "FILE")]
        input: PathBuf,
        /// Output directory (default: <root>/rama).
        #[arg(long, value_name = "DIR")]
        out_dir: Option<PathBuf>,
    },
    /// Write a per-frame radius-of-gyration CSV for an ensemble.
    Rg {
        /// Multi-model PDB.
        #[arg(long, value_name = "FILE")]
        input: PathBuf,
        /// Output directory (default: <root>/rg).
        #[arg(long, value_name = "DIR")]
        out_dir: Option<PathBuf>,
    },
}

/// Parse `args` (everything after the program name) and run the selected
/// subcommand, returning the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString>,
{
    let argv: Vec<OsString> = args.into_iter().map(Into::into).collect();
    let cli = match Cli::try_parse_from(
        std::iter::once(OsString::from("backmap")).chain(argv.iter().cloned()),
    ) {
        Ok(cli) => cli,
        Err(e) => {
            // Help and version requests print to stdout and succeed; real
            // parse errors print usage to stderr and exit 1.
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    if let Some(threads) = cli.threads {
        if threads == 0 {
            eprintln!("error: --threads must be at least 1");
            return EXIT_USAGE;
        }
        // The global pool can only be installed once per process; results
        // are thread-count-invariant (all parallel reductions collect in
        // input order), so a pool that already exists is left alone.
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global();
    }
    let argv_strings: Vec<String> = argv
        .iter()
        .map(|a| a.to_string_lossy().into_owned())
        .collect();
    match dispatch(&cli, &argv_strings) {
        Ok(()) => EXIT_OK,
        Err(CliError::Usage(msg)) => {
            eprintln!("error: {msg}");
            EXIT_USAGE
        }
        Err(e) => {
            eprintln!("error: {e}");
            EXIT_RUNTIME
        }
    }
}

fn dispatch(cli: &Cli, argv: &[String]) -> Result<(), CliError> {
    let config = match &cli.config {
        Some(path) => Some(load_run_config(path)?),
        None => None,
    };
    let config = config.as_ref();
    match &cli.command {
        Cmd::Synth {
            residues,
            frames,
            flexibility,
            out_dir,
        } => cmd_synth(
            cli,
            config,
            argv,
            *residues,
            *frames,
            *flexibility,
            out_dir.as_deref(),
        ),
        Cmd::Coarsen {
            input,
            calpha,
            beads,
            out_dir,
        } => cmd_coarsen(
            cli,
            config,
            argv,
            input.as_deref(),
            *calpha,
            beads,
            out_dir.as_deref(),
        ),
        Cmd::Train { out_dir } => cmd_train(cli, config, argv, out_dir.as_deref()),
        Cmd::Backmap {
            chain,
            input,
            out_dir,
        } => cmd_backmap(cli, config, argv, chain, input, out_dir.as_deref()),
        Cmd::Evaluate {
            chain,
            input,
            seeds,
            out_dir,
        } => cmd_evaluate(cli, config, argv, chain, input, *seeds, out_dir.as_deref()),
        Cmd::Rama { input, out_dir } => cmd_rama(cli, config, argv, input, out_dir.as_deref()),
        Cmd::Rg { input, out_dir } => cmd_rg(cli, config, argv, input, out_dir.as_deref()),
    }
}

/// Root directory for outputs: the `BACKMAP_OUTPUT_ROOT` environment
/// variable wins, then the config's `output_dir`, then the working
/// directory.
fn output_root(env_root: Option<&OsStr>, config: Option<&RunConfig>) -> PathBuf {
    if let Some(root) = env_root {
        if !root.is_empty() {
            return PathBuf::from(root);
        }
    }
    match config {
        Some(c) => c.paths.output_dir.clone(),
        None => PathBuf::from("."),
    }
}

/// Where a command writes: an absolute `--out-dir` as given, a relative one
/// under the output root, or `<root>/<default_name>`.
fn resolve_out_dir(
    flag: Option<&Path>,
    env_root: Option<&OsStr>,
    config: Option<&RunConfig>,
    default_name: &str,
) -> PathBuf {
    match flag {
        Some(p) if p.is_absolute() => p.to_path_buf(),
        Some(p) => output_root(env_root, config).join(p),
        None => output_root(env_root, config).join(default_name),
    }
}

/// Bookkeeping shared by every subcommand: the output directory plus the
/// run manifest that records input/output hashes for reproduction.
struct RunContext {
    manifest: RunManifest,
    out_dir: PathBuf,
}

impl RunContext {
    fn new(
        cli: &Cli,
        config: Option<&RunConfig>,
        argv: &[String],
        flag: Option<&Path>,
        default_name: &str,
    ) -> Result<Self, CliError> {
        let out_dir = resolve_out_dir(
            flag,
            env::var_os(OUTPUT_ROOT_VAR).as_deref(),
            config,
            default_name,
        );
        fs::create_dir_all(&out_dir).map_err(|e| IoError::file(&out_dir, e))?;
        let mut manifest = RunManifest::new(argv);
        manifest.seed = cli.seed;
        manifest.threads = cli.threads;
        if let Some(path) = &cli.config {
            manifest.record_input(path)?;
        }
        Ok(RunContext { manifest, out_dir })
    }

    fn input(&mut self, path: &Path) -> Result<(), CliError> {
        self.manifest.record_input(path)?;
        Ok(())
    }

    /// Record an output keyed by its path relative to the output directory.
    fn output(&mut self, path: &Path) -> Result<(), CliError> {
        let key = path
            .strip_prefix(&self.out_dir)
            .unwrap_or(path)
            .display()
            .to_string();
        self.manifest.record_output_as(&key, path)?;
        Ok(())
    }

    fn finish(self) -> Result<(), CliError> {
        self.manifest.write(&self.out_dir.join("run_manifest.json"))?;
        Ok(())
    }
}

/// The fine-grained ensemble a command works on: an explicit `--input` PDB,
/// else the config's dataset, else the config's synthetic section (seeded
/// by `--seed` when given).
fn fine_ensemble(
    cli: &Cli,
    config: Option<&RunConfig>,
    input: Option<&Path>,
    rc: &mut RunContext,
) -> Result<Ensemble, CliError> {
    if let Some(path) = input {
        rc.input(path)?;
        let (topology, frames) = parse_pdb(path)?;
        return Ok(Ensemble::new(topology, frames)?);
    }
    let Some(config) = config else {
        return Err(CliError::Usage(
            "no --input given and no --config supplying a dataset".into(),
        ));
    };
    if let Some(dataset) = &config.paths.dataset {
        rc.input(dataset)?;
        let (topology, frames) = parse_pdb(dataset)?;
        return Ok(Ensemble::new(topology, frames)?);
    }
    let mut spec = config
        .synthetic
        .clone()
        .expect("config validation guarantees a dataset or a synthetic section");
    if let Some(seed) = cli.seed {
        spec.seed = seed;
    }
    Ok(generate_synthetic_ensemble(&spec)?)
}

fn cmd_synth(
    cli: &Cli,
    config: Option<&RunConfig>,
    argv: &[String],
    residues: Option<usize>,
    frames: Option<usize>,
    flexibility: Option<f64>,
    out_dir: Option<&Path>,
) -> Result<(), CliError> {
    let mut spec = match config {
        Some(c) => c.synthetic.clone().unwrap_or(SyntheticSpec {
            seed: c.seed,
            ..SyntheticSpec::default()
        }),
        None => SyntheticSpec::default(),
    };
    if let Some(r) = residues {
        spec.n_residues = r;
    }
    if let Some(f) = frames {
        spec.n_frames = f;
    }
    if let Some(x) = flexibility {
        spec.flexibility_deg = x;
    }
    if let Some(seed) = cli.seed {
        spec.seed = seed;
    }
    let mut rc = RunContext::new(cli, config, argv, out_dir, "synth")?;
    rc.manifest.seed = Some(spec.seed);
    eprintln!(
        "synthesizing {} residues x {} frames (flexibility {} deg, seed {})",
        spec.n_residues, spec.n_frames, spec.flexibility_deg, spec.seed
    );
    let ensemble = generate_synthetic_ensemble(&spec)?;
    let out = rc.out_dir.join("ensemble.pdb");
    write_pdb(ensemble.topology(), ensemble.frames(), &out)?;
    rc.output(&out)?;
    rc.finish()?;
    println!(
        "wrote {} frames x {} atoms to {}",
        ensemble.n_frames(),
        ensemble.topology().n_atoms(),
        out.display()
    );
    Ok(())
}

fn cmd_coarsen(
    cli: &Cli,
    config: Option<&RunConfig>,
    argv: &[String],
    input: Option<&Path>,
    calpha: bool,
    beads: &[usize],
    out_dir: Option<&Path>,
) -> Result<(), CliError> {
    let specs: Vec<LevelSpec> = if calpha || !beads.is_empty() {
        let mut v = Vec::new();
        if calpha {
            v.push(LevelSpec::Calpha);
        }
        v.extend(beads.iter().map(|&n| LevelSpec::Learned { n_beads: n }));
        v
    } else {
        config.map(|c| c.ladder.clone()).unwrap_or_default()
    };
    if specs.is_empty() {
        return Err(CliError::Usage(
            "coarsen needs --calpha/--beads or a config with [[ladder]] levels".into(),
        ));
    }
    let mut rc = RunContext::new(cli, config, argv, out_dir, "coarsen")?;
    let ensemble = fine_ensemble(cli, config, input, &mut rc)?;
    eprintln!(
        "building a {}-level ladder over {} frames x {} atoms",
        specs.len(),
        ensemble.n_frames(),
        ensemble.topology().n_atoms()
    );
    let ladder = build_ladder(&ensemble, &specs, &LearnOptions::default())?;
    let fine_topology = ladder.finest().topology();
    for (i, mapping) in ladder.mappings().iter().enumerate() {
        let map_path = rc.out_dir.join(format!("step{i}.cgmap"));
        write_mapping(mapping, &map_path)?;
        rc.output(&map_path)?;
        let level = i + 1;
        let coarse = ladder.level(level);
        let pdb_path = rc.out_dir.join(format!("level{level}.pdb"));
        write_pdb(coarse.topology(), coarse.frames(), &pdb_path)?;
        rc.output(&pdb_path)?;
        let rho = bead_size_rho(fine_topology, &ladder.mappings()[..level]);
        println!(
            "level {level}: {} beads, rho = {rho:.2} ({} and {})",
            mapping.n_coarse(),
            map_path.display(),
            pdb_path.display()
        );
    }
    rc.finish()?;
    Ok(())
}

fn cmd_train(
    cli: &Cli,
    config: Option<&RunConfig>,
    argv: &[String],
    out_dir: Option<&Path>,
) -> Result<(), CliError> {
    let Some(config) = config else {
        return Err(CliError::Usage("train needs --config".into()));
    };
    if config.ladder.is_empty() {
        return Err(CliError::Usage(
            "the config lists no [[ladder]] levels to train".into(),
        ));
    }
    if config.steps.is_empty() {
        return Err(CliError::Usage(
            "the config lists no [[steps]] sections".into(),
        ));
    }
    let mut rc = RunContext::new(cli, Some(config), argv, out_dir, "train")?;
    let ensemble = fine_ensemble(cli, Some(config), None, &mut rc)?;
    let ladder = build_ladder(&ensemble, &config.ladder, &LearnOptions::default())?;
    let hypers: Vec<_> = config.steps.iter().map(|s| s.hyper.clone()).collect();
    let mut cfgs: Vec<_> = config.steps.iter().map(|s| s.train.clone()).collect();
    if let Some(seed) = cli.seed {
        for cfg in &mut cfgs {
            cfg.seed = seed;
        }
    }
    eprintln!(
        "training {} step models on {} frames",
        ladder.k(),
        ensemble.n_frames()
    );
    let (chain, histories) = train_chain_logged(&ladder, &hypers, &cfgs, |step, record| {
        if record.epoch % 10 == 0 {
            eprintln!(
                "step {step} epoch {:>4}: train {:.6e} val {:.6e}",
                record.epoch, record.train_loss, record.val_loss
            );
        }
    })?;
    let manifest_path = save_chain(
        &chain,
        ladder.finest().topology(),
        ladder.finest().frame(0),
        &rc.out_dir,
    )?;
    rc.output(&rc.out_dir.clone().join("topology.pdb"))?;
    for i in 0..chain.k() {
        rc.output(&rc.out_dir.clone().join(format!("step{i}.cgmap")))?;
        rc.output(&rc.out_dir.clone().join(format!("step{i}.ckpt.json")))?;
    }
    rc.output(&manifest_path)?;
    for (i, history) in histories.iter().enumerate() {
        let path = rc.out_dir.join(format!("history_step{i}.txt"));
        atomic_write(&path, history.table().as_bytes())?;
        rc.output(&path)?;
        let best = history.best();
        println!(
            "step {i}: {} epochs, best epoch {} val loss {:.6e}",
            history.epochs.len(),
            history.best_epoch,
            best.map(|r| r.val_loss).unwrap_or(f64::NAN)
        );
    }
    // The held-out fine-grained frames, for later `evaluate` runs. The
    // split is the one step 0 trained against.
    let (_, _, test) = split_dataset(ladder.finest(), &cfgs[0])?;
    if test.n_frames() > 0 {
        let test_path = rc.out_dir.join("test.pdb");
        write_pdb(test.topology(), test.frames(), &test_path)?;
        rc.output(&test_path)?;
        println!("held out {} test frames to {}", test.n_frames(), test_path.display());
    }
    rc.finish()?;
    println!("chain saved to {}", manifest_path.display());
    Ok(())
}

fn cmd_backmap(
    cli: &Cli,
    config: Option<&RunConfig>,
    argv: &[String],
    chain_path: &Path,
    input: &Path,
    out_dir: Option<&Path>,
) -> Result<(), CliError> {
    let mut rc = RunContext::new(cli, config, argv, out_dir, "backmap")?;
    rc.input(chain_path)?;
    rc.input(input)?;
    let (chain, fine_topology) = load_chain_with_topology(chain_path)?;
    let (in_topology, frames) = parse_pdb(input)?;
    if in_topology.n_atoms() != chain.coarsest_n() {
        return Err(CliError::Usage(format!(
            "{} holds {} particles per frame, the chain's coarsest level has {}",
            input.display(),
            in_topology.n_atoms(),
            chain.coarsest_n()
        )));
    }
    let seed = cli.seed.unwrap_or(config.map(|c| c.seed).unwrap_or(0));
    rc.manifest.seed = Some(seed);
    let k = chain.k();
    eprintln!(
        "reconstructing {} frames through {k} steps (seed {seed})",
        frames.len()
    );
    let mut fine_frames: Vec<Conformation> = Vec::with_capacity(frames.len());
    let mut intermediates: Vec<Vec<Conformation>> = vec![Vec::new(); k.saturating_sub(1)];
    for (f, frame) in frames.iter().enumerate() {
        // One noise stream per frame so frames stay independent draws.
        let result = backmap(frame, &chain, seed.wrapping_add(f as u64))?;
        fine_frames.push(result.fine().clone());
        for (i, conf) in result.intermediates().iter().enumerate() {
            intermediates[i].push(conf.clone());
        }
        if (f + 1) % 25 == 0 {
            eprintln!("  {} / {} frames", f + 1, frames.len());
        }
    }
    let fine_path = rc.out_dir.join("fine.pdb");
    write_pdb(&fine_topology, &fine_frames, &fine_path)?;
    rc.output(&fine_path)?;
    println!(
        "wrote {} reconstructed frames to {}",
        fine_frames.len(),
        fine_path.display()
    );
    for level in 1..k {
        let step = level - 1;
        let topology = bead_topology(
            chain.mappings()[step].n_coarse(),
            chain.context(step).cg_bonds().to_vec(),
        )?;
        let path = rc.out_dir.join(format!("level{level}.pdb"));
        write_pdb(&topology, &intermediates[level - 1], &path)?;
        rc.output(&path)?;
        println!("wrote level {level} intermediates to {}", path.display());
    }
    rc.finish()?;
    Ok(())
}

/// Seeds for an evaluation run: `--seeds N` counts upward from `--seed`
/// (default 1); without the flag the config's `metrics.seeds` list is used
/// unless `--seed` re-bases the default three.
fn evaluation_seeds(
    cli_seed: Option<u64>,
    seeds_flag: Option<usize>,
    config: Option<&RunConfig>,
) -> Vec<u64> {
    if let Some(n) = seeds_flag {
        let base = cli_seed.unwrap_or(1);
        return (0..n as u64).map(|i| base.wrapping_add(i)).collect();
    }
    if cli_seed.is_none() {
        if let Some(c) = config {
            return c.metrics.seeds.clone();
        }
    }
    let base = cli_seed.unwrap_or(1);
    (0..3).map(|i| base.wrapping_add(i)).collect()
}

fn cmd_evaluate(
    cli: &Cli,
    config: Option<&RunConfig>,
    argv: &[String],
    chain_path: &Path,
    input: &Path,
    seeds_flag: Option<usize>,
    out_dir: Option<&Path>,
) -> Result<(), CliError> {
    let seeds = evaluation_seeds(cli.seed, seeds_flag, config);
    if seeds.len() < 3 {
        return Err(CliError::Usage(format!(
            "evaluation needs at least 3 seeds, got {}",
            seeds.len()
        )));
    }
    let mut rc = RunContext::new(cli, config, argv, out_dir, "evaluate")?;
    rc.input(chain_path)?;
    rc.input(input)?;
    let (chain, _) = load_chain_with_topology(chain_path)?;
    let (topology, frames) = parse_pdb(input)?;
    let test = Ensemble::new(topology, frames)?;
    eprintln!(
        "scoring {} frames x {} seeds through a {}-step chain",
        test.n_frames(),
        seeds.len(),
        chain.k()
    );
    let evaluation = evaluate_scheme(&chain, &test, &seeds)?;
    let report = &evaluation.report;

    let json_path = rc.out_dir.join("report.json");
    let text = serde_json::to_string_pretty(report)
        .map_err(|e| IoError::BadConfig(format!("report serialization: {e}")))?;
    atomic_write(&json_path, text.as_bytes())?;
    rc.output(&json_path)?;

    let csv_path = rc.out_dir.join("report.csv");
    let csv = format!(
        "rmsd_mean,rmsd_std,ged_norm_mean,ged_norm_std,clash_mean,clash_std,n_samples\n\
         {},{},{},{},{},{},{}\n",
        report.rmsd_mean,
        report.rmsd_std,
        report.ged_norm_mean,
        report.ged_norm_std,
        report.clash_mean,
        report.clash_std,
        report.n_samples
    );
    atomic_write(&csv_path, csv.as_bytes())?;
    rc.output(&csv_path)?;

    for (name, hist) in [
        ("rama_true.csv", &evaluation.ramachandran_true),
        ("rama_generated.csv", &evaluation.ramachandran_generated),
    ] {
        let path = rc.out_dir.join(name);
        atomic_write(&path, histogram_csv(hist).as_bytes())?;
        rc.output(&path)?;
    }
    rc.finish()?;

    println!(
        "rmsd      {:.4} +/- {:.4} A\n\
         ged_norm  {:.4} +/- {:.4}\n\
         clash     {:.4} +/- {:.4}\n\
         n_samples {}",
        report.rmsd_mean,
        report.rmsd_std,
        report.ged_norm_mean,
        report.ged_norm_std,
        report.clash_mean,
        report.clash_std,
        report.n_samples
    );
    println!("report written to {}", json_path.display());
    Ok(())
}

/// Plot-ready CSV of a dihedral histogram: bin centers in degrees plus the
/// count, one row per bin, the full grid in row-major order.
fn histogram_csv(hist: &RamachandranHistogram) -> String {
    let mut out = String::from("phi_deg,psi_deg,count\n");
    for (phi, psi, count) in hist.rows() {
        out.push_str(&format!("{phi},{psi},{count}\n"));
    }
    out
}

fn cmd_rama(
    cli: &Cli,
    config: Option<&RunConfig>,
    argv: &[String],
    input: &Path,
    out_dir: Option<&Path>,
) -> Result<(), CliError> {
    let mut rc = RunContext::new(cli, config, argv, out_dir, "rama")?;
    rc.input(input)?;
    let (topology, frames) = parse_pdb(input)?;
    let mut hist = RamachandranHistogram::new();
    let mut skipped = 0;
    for frame in &frames {
        let scan = phi_psi(frame, &topology)?;
        skipped += scan.skipped;
        for &(phi, psi) in &scan.pairs {
            hist.record(phi, psi);
        }
    }
    let path = rc.out_dir.join("rama.csv");
    atomic_write(&path, histogram_csv(&hist).as_bytes())?;
    rc.output(&path)?;
    rc.finish()?;
    println!(
        "binned {} dihedral pairs ({} residues skipped) into {}",
        hist.total(),
        skipped,
        path.display()
    );
    Ok(())
}

fn cmd_rg(
    cli: &Cli,
    config: Option<&RunConfig>,
    argv: &[String],
    input: &Path,
    out_dir: Option<&Path>,
) -> Result<(), CliError> {
    let mut rc = RunContext::new(cli, config, argv, out_dir, "rg")?;
    rc.input(input)?;
    let (topology, frames) = parse_pdb(input)?;
    let masses: Vec<f64> = topology.elements().iter().map(|e| e.mass()).collect();
    let mut csv = String::from("frame,rg_nm\n");
    let mut sum = 0.0;
    for (f, frame) in frames.iter().enumerate() {
        let rg = radius_of_gyration(frame, &masses)?;
        sum += rg;
        csv.push_str(&format!("{f},{rg}\n"));
    }
    let path = rc.out_dir.join("rg.csv");
    atomic_write(&path, csv.as_bytes())?;
    rc.output(&path)?;
    rc.finish()?;
    println!(
        "mean rg {:.4} nm over {} frames, written to {}",
        sum / frames.len() as f64,
        frames.len(),
        path.display()
    );
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn config_with_out(dir: &str) -> RunConfig {
        let text = format!(
            "version = 1\n[paths]\noutput_dir = \"{dir}\"\n[synthetic]\nn_residues = 4\n"
        );
        crate::io::config::parse_run_config_str(&text, Path::new("test.toml")).unwrap()
    }

    #[test]
    fn output_root_prefers_env_then_config_then_cwd() {
        let config = config_with_out("cfg_out");
        let env_root = OsString::from("/env/root");
        assert_eq!(
            output_root(Some(env_root.as_os_str()), Some(&config)),
            PathBuf::from("/env/root")
        );
        assert_eq!(
            output_root(None, Some(&config)),
            PathBuf::from("cfg_out")
        );
        assert_eq!(output_root(None, None), PathBuf::from("."));
        // An empty value does not count as an override.
        let empty = OsString::new();
        assert_eq!(
            output_root(Some(empty.as_os_str()), None),
            PathBuf::from(".")
        );
    }

    #[test]
    fn out_dir_resolution_keeps_absolute_and_roots_relative_paths() {
        let config = config_with_out("root");
        let abs = PathBuf::from("/abs/somewhere");
        assert_eq!(
            resolve_out_dir(Some(&abs), None, Some(&config), "synth"),
            abs
        );
        assert_eq!(
            resolve_out_dir(Some(Path::new("sub")), None, Some(&config), "synth"),
            PathBuf::from("root/sub")
        );
        assert_eq!(
            resolve_out_dir(None, None, Some(&config), "synth"),
            PathBuf::from("root/synth")
        );
    }

    #[test]
    fn evaluation_seed_resolution_follows_flag_config_default_order() {
        let config = config_with_out("x");
        // --seeds counts upward from --seed, default base 1.
        assert_eq!(evaluation_seeds(None, Some(4), None), vec![1, 2, 3, 4]);
        assert_eq!(evaluation_seeds(Some(7), Some(3), None), vec![7, 8, 9]);
        // Without the flag, the config list wins.
        assert_eq!(
            evaluation_seeds(None, None, Some(&config)),
            vec![1, 2, 3]
        );
        // --seed alone re-bases the default three.
        assert_eq!(
            evaluation_seeds(Some(11), None, Some(&config)),
            vec![11, 12, 13]
        );
        assert_eq!(evaluation_seeds(None, None, None), vec![1, 2, 3]);
    }
}
