//! Chain manifests and run manifests.
//!
//! A *chain manifest* makes a trained backmapping chain portable: it lists
//! the finest-level topology file plus one mapping file and one model
//! checkpoint per step, each with a content hash that is verified on load.
//!
//! A *run manifest* records what a CLI invocation consumed and produced —
//! argument vector, seeds, thread count, and content hashes of every input
//! and output — enough to check that a rerun reproduces the run bitwise.
//! Manifests carry no timestamps, so identical runs write identical bytes.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::checkpoint::{load_model, save_model};
use super::mapping::{parse_mapping, write_mapping};
use super::pdb::{parse_pdb, write_pdb};
use super::{atomic_write, sha256_file, IoError};
use crate::mol::{Conformation, Topology};
use crate::pipeline::BackmapChain;

const MANIFEST_VERSION: u32 = 1;

#[derive(Clone, Debug, Serialize, Deserialize)]
struct ChainStepEntry {
    mapping: PathBuf,
    mapping_sha256: String,
    checkpoint: PathBuf,
    checkpoint_sha256: String,
}

/// On-disk description of a trained chain: topology plus per-step files.
#[derive(Clone, Debug, Serialize, Deserialize)]
struct ChainManifest {
    version: u32,
    topology: PathBuf,
    topology_sha256: String,
    steps: Vec<ChainStepEntry>,
}

fn relative_entry(path: &Path, base: &Path) -> PathBuf {
    path.strip_prefix(base).unwrap_or(path).to_path_buf()
}

/// Write a chain and everything needed to rebuild it into `dir`:
/// `topology.pdb` (one reference frame), `step{i}.cgmap`,
/// `step{i}.ckpt.json`, and the `chain.json` manifest tying them together.
/// Returns the manifest path.
pub fn save_chain(
    chain: &BackmapChain,
    topology: &Topology,
    reference_frame: &Conformation,
    dir: &Path,
) -> Result<PathBuf, IoError> {
    fs::create_dir_all(dir).map_err(|e| IoError::file(dir, e))?;
    let topology_path = dir.join("topology.pdb");
    write_pdb(topology, std::slice::from_ref(reference_frame), &topology_path)?;
    let mut steps = Vec::with_capacity(chain.k());
    for (i, (mapping, model)) in chain
        .mappings()
        .iter()
        .zip(chain.models())
        .enumerate()
    {
        let mapping_path = dir.join(format!("step{i}.cgmap"));
        write_mapping(mapping, &mapping_path)?;
        let checkpoint_path = dir.join(format!("step{i}.ckpt.json"));
        save_model(model, &checkpoint_path)?;
        steps.push(ChainStepEntry {
            mapping: relative_entry(&mapping_path, dir),
            mapping_sha256: sha256_file(&mapping_path)?,
            checkpoint: relative_entry(&checkpoint_path, dir),
            checkpoint_sha256: sha256_file(&checkpoint_path)?,
        });
    }
    let manifest = ChainManifest {
        version: MANIFEST_VERSION,
        topology: relative_entry(&topology_path, dir),
        topology_sha256: sha256_file(&topology_path)?,
        steps,
    };
    let text = serde_json::to_string_pretty(&manifest)
        .map_err(|e| IoError::BadConfig(format!("chain manifest serialization: {e}")))?;
    let manifest_path = dir.join("chain.json");
    atomic_write(&manifest_path, text.as_bytes())?;
    Ok(manifest_path)
}

fn verified(base: &Path, entry: &Path, expected: &str, what: &str) -> Result<PathBuf, IoError> {
    let path = if entry.is_relative() {
        base.join(entry)
    } else {
        entry.to_path_buf()
    };
    let actual = sha256_file(&path)?;
    if actual != expected {
        return Err(IoError::content(
            &path,
            format!("{what} content hash mismatch: manifest says {expected}, file is {actual}"),
        ));
    }
    Ok(path)
}

/// Load a chain from its manifest, verifying every referenced file's hash
/// before rebuilding mappings, models, and step contexts.
pub fn load_chain(manifest_path: &Path) -> Result<BackmapChain, IoError> {
    load_chain_with_topology(manifest_path).map(|(chain, _)| chain)
}

/// [`load_chain`], also returning the fine-grained topology the chain
/// reconstructs onto, for callers that need to write atomistic output.
pub fn load_chain_with_topology(
    manifest_path: &Path,
) -> Result<(BackmapChain, Topology), IoError> {
    let text = fs::read_to_string(manifest_path).map_err(|e| IoError::file(manifest_path, e))?;
    let manifest: ChainManifest = serde_json::from_str(&text)
        .map_err(|e| IoError::parse(manifest_path, e.line(), e.to_string()))?;
    if manifest.version != MANIFEST_VERSION {
        return Err(IoError::content(
            manifest_path,
            format!(
                "chain manifest version {} is not the supported {MANIFEST_VERSION}",
                manifest.version
            ),
        ));
    }
    if manifest.steps.is_empty() {
        return Err(IoError::content(manifest_path, "chain manifest lists no steps"));
    }
    let base = manifest_path.parent().unwrap_or_else(|| Path::new("."));
    let topology_path = verified(
        base,
        &manifest.topology,
        &manifest.topology_sha256,
        "topology",
    )?;
    let (topology, _) = parse_pdb(&topology_path)?;
    let mut mappings = Vec::with_capacity(manifest.steps.len());
    let mut models = Vec::with_capacity(manifest.steps.len());
    for entry in &manifest.steps {
        let mapping_path = verified(base, &entry.mapping, &entry.mapping_sha256, "mapping")?;
        mappings.push(parse_mapping(&mapping_path)?);
        let checkpoint_path = verified(
            base,
            &entry.checkpoint,
            &entry.checkpoint_sha256,
            "checkpoint",
        )?;
        models.push(load_model(&checkpoint_path)?);
    }
    let chain = BackmapChain::new(&topology, mappings, models)
        .map_err(|e| IoError::content(manifest_path, e.to_string()))?;
    Ok((chain, topology))
}

/// Reproducibility record of one CLI run: inputs, outputs, and the exact
/// invocation. Hashes use SHA-256 over file contents.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct RunManifest {
    pub version: u32,
    /// Crate version of the tool that wrote the run.
    pub tool_version: String,
    /// Argument vector after the program name.
    pub argv: Vec<String>,
    pub seed: Option<u64>,
    pub threads: Option<usize>,
    /// Input path -> content hash.
    pub inputs: BTreeMap<String, String>,
    /// Output path -> content hash.
    pub outputs: BTreeMap<String, String>,
}

impl RunManifest {
    pub fn new(argv: &[String]) -> Self {
        RunManifest {
            version: MANIFEST_VERSION,
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            argv: argv.to_vec(),
            ..RunManifest::default()
        }
    }

    /// Record an input file by content hash.
    pub fn record_input(&mut self, path: &Path) -> Result<(), IoError> {
        self.inputs
            .insert(path.display().to_string(), sha256_file(path)?);
        Ok(())
    }

    /// Record an output file by content hash.
    pub fn record_output(&mut self, path: &Path) -> Result<(), IoError> {
        self.outputs
            .insert(path.display().to_string(), sha256_file(path)?);
        Ok(())
    }

    /// Record an output file by content hash under an explicit key,
    /// typically the path relative to the run's output directory so the
    /// manifest stays comparable across differently rooted runs.
    pub fn record_output_as(&mut self, key: &str, path: &Path) -> Result<(), IoError> {
        self.outputs.insert(key.to_string(), sha256_file(path)?);
        Ok(())
    }

    /// Write the manifest as pretty JSON, atomically.
    pub fn write(&self, path: &Path) -> Result<(), IoError> {
        let text = serde_json::to_string_pretty(self)
            .map_err(|e| IoError::BadConfig(format!("run manifest serialization: {e}")))?;
        atomic_write(path, text.as_bytes())
    }
}

/// Read a run manifest back.
pub fn read_run_manifest(path: &Path) -> Result<RunManifest, IoError> {
    let text = fs::read_to_string(path).map_err(|e| IoError::file(path, e))?;
    serde_json::from_str(&text).map_err(|e| IoError::parse(path, e.line(), e.to_string()))
}
