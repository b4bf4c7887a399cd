//! The k-step framework: resolution ladders, per-step training
//! orchestration, and inference.
//!
//! A ladder is the fine ensemble plus its progressively coarser
//! projections. Each adjacent pair of levels gets its own step model,
//! trained independently on teacher-forced pairs (the coarse conditioning
//! frame is always the true fine frame's projection). Inference walks the
//! chain the other way: starting from the coarsest frame, every step
//! samples its prior — never the encoder, which needs fine coordinates the
//! sampler does not have — and decodes, handing the result to the next
//! step until atomistic resolution is restored. All intermediates are
//! returned so reconstruction errors can be localized to the step that
//! introduced them.

use crate::coarsen::{
    apply_mapping, calpha_mapping, learn_mapping, CGMapping, CoarsenError, LearnOptions,
};
use crate::cvae::{sample_noise_stream, CvaeError, CvaeHyper, CvaeModel, StepContext};
use crate::mol::{bead_topology, Conformation, Element, Ensemble, MolError, Topology};
use crate::train::{
    fit_step_model_logged, split_dataset, EpochRecord, TrainConfig, TrainError, TrainHistory,
};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;
use thiserror::Error;

/// Most resolution steps a chain may have.
pub const MAX_CHAIN_STEPS: usize = 4;

/// Backbone and sidechain bond length of the synthetic ensembles, in
/// Angstrom.
pub const SYNTHETIC_BOND_LENGTH: f64 = 1.5;
/// Smallest allowed nonbonded pair distance in a synthetic frame.
pub const SYNTHETIC_NONBONDED_MIN: f64 = 2.0;

/// Generator stream base for synthetic frame construction.
const SYNTH_STREAM: u64 = 1 << 40;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("bad ladder spec: {0}")]
    BadLadderSpec(String),
    #[error(
        "level spec {position} does not coarsen: {prev} particles would become {next} beads"
    )]
    NonMonotone {
        position: usize,
        prev: usize,
        next: usize,
    },
    #[error("chain assembly: {0}")]
    ChainAssembly(String),
    #[error("step {step}: {source}")]
    Step { step: usize, source: TrainError },
    #[error("bad synthetic spec: {0}")]
    BadSynthetic(String),
    #[error("could not build a clash-free synthetic frame {frame} after {attempts} attempts")]
    ConstructionFailed { frame: usize, attempts: usize },
    #[error(transparent)]
    Cvae(#[from] CvaeError),
    #[error(transparent)]
    Coarsen(#[from] CoarsenError),
    #[error(transparent)]
    Mol(#[from] MolError),
}

/// How to produce one coarsening step of a ladder.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum LevelSpec {
    /// One bead per residue pinned to the CA atom. Only valid as the first
    /// step, where residue structure exists.
    Calpha,
    /// Spatially learned mapping onto the given number of beads.
    Learned { n_beads: usize },
}

/// A resolution ladder: ensembles at every level plus the mappings that
/// connect them. `levels[i+1]` is `levels[i]` projected through
/// `mappings[i]`, frame by frame.
#[derive(Clone, Debug)]
pub struct Ladder {
    levels: Vec<Ensemble>,
    mappings: Vec<CGMapping>,
}

impl Ladder {
    pub fn k(&self) -> usize {
        self.mappings.len()
    }

    pub fn levels(&self) -> &[Ensemble] {
        &self.levels
    }

    pub fn level(&self, i: usize) -> &Ensemble {
        &self.levels[i]
    }

    pub fn mappings(&self) -> &[CGMapping] {
        &self.mappings
    }

    pub fn finest(&self) -> &Ensemble {
        &self.levels[0]
    }

    pub fn coarsest(&self) -> &Ensemble {
        self.levels.last().expect("ladder has at least two levels")
    }
}

/// Build the resolution ladder for a fine ensemble by realizing each level
/// spec in order. Bead counts must strictly decrease.
pub fn build_ladder(
    fg_ensemble: &Ensemble,
    specs: &[LevelSpec],
    opts: &LearnOptions,
) -> Result<Ladder, PipelineError> {
    if specs.is_empty() {
        return Err(PipelineError::BadLadderSpec(
            "need at least one level spec".into(),
        ));
    }
    if specs.len() > MAX_CHAIN_STEPS {
        return Err(PipelineError::BadLadderSpec(format!(
            "{} steps requested, at most {MAX_CHAIN_STEPS} supported",
            specs.len()
        )));
    }
    if fg_ensemble.n_frames() == 0 {
        return Err(PipelineError::BadLadderSpec("ensemble has no frames".into()));
    }
    if fg_ensemble.level() != 0 {
        return Err(PipelineError::BadLadderSpec(format!(
            "fine ensemble must sit at level 0, got level {}",
            fg_ensemble.level()
        )));
    }
    let mut levels = vec![fg_ensemble.clone()];
    let mut mappings: Vec<CGMapping> = Vec::with_capacity(specs.len());
    for (position, spec) in specs.iter().enumerate() {
        let current = &levels[position];
        let n_current = current.topology().n_atoms();
        let mapping = match spec {
            LevelSpec::Calpha => {
                if position != 0 {
                    return Err(PipelineError::BadLadderSpec(format!(
                        "calpha spec at position {position}: residue structure only exists at \
                         the atomistic level"
                    )));
                }
                calpha_mapping(current.topology())?
            }
            LevelSpec::Learned { n_beads } => {
                if *n_beads >= n_current {
                    return Err(PipelineError::NonMonotone {
                        position,
                        prev: n_current,
                        next: *n_beads,
                    });
                }
                learn_mapping(current, *n_beads, opts)?
            }
        };
        if mapping.n_coarse() >= n_current {
            return Err(PipelineError::NonMonotone {
                position,
                prev: n_current,
                next: mapping.n_coarse(),
            });
        }
        let ctx = StepContext::from_topology(current.topology(), mapping.clone())?;
        let next_topology = bead_topology(mapping.n_coarse(), ctx.cg_bonds().to_vec())?;
        let mut frames = Vec::with_capacity(current.n_frames());
        for frame in current.frames() {
            frames.push(apply_mapping(frame, &mapping)?);
        }
        levels.push(Ensemble::new(next_topology, frames)?);
        mappings.push(mapping);
    }
    Ok(Ladder { levels, mappings })
}

/// Realize a ladder from explicit mappings instead of level specs: level
/// `i+1` is level `i` projected through `mappings[i]`, with bead bonds
/// inherited through each step's context. This is how a chain trains on
/// mappings that were learned elsewhere or composed from another ladder.
pub fn ladder_from_mappings(
    fg_ensemble: &Ensemble,
    mappings: Vec<CGMapping>,
) -> Result<Ladder, PipelineError> {
    if mappings.is_empty() {
        return Err(PipelineError::BadLadderSpec(
            "need at least one mapping".into(),
        ));
    }
    if mappings.len() > MAX_CHAIN_STEPS {
        return Err(PipelineError::BadLadderSpec(format!(
            "{} mappings given, at most {MAX_CHAIN_STEPS} supported",
            mappings.len()
        )));
    }
    if fg_ensemble.n_frames() == 0 {
        return Err(PipelineError::BadLadderSpec("ensemble has no frames".into()));
    }
    if fg_ensemble.level() != 0 {
        return Err(PipelineError::BadLadderSpec(format!(
            "fine ensemble must sit at level 0, got level {}",
            fg_ensemble.level()
        )));
    }
    let mut levels = vec![fg_ensemble.clone()];
    for (i, mapping) in mappings.iter().enumerate() {
        let current = &levels[i];
        let n_current = current.topology().n_atoms();
        if mapping.from_level() != i {
            return Err(PipelineError::BadLadderSpec(format!(
                "mapping {i} coarsens from level {}, expected level {i}",
                mapping.from_level()
            )));
        }
        if mapping.n_fine() != n_current {
            return Err(PipelineError::BadLadderSpec(format!(
                "mapping {i} covers {} particles, level {i} has {n_current}",
                mapping.n_fine()
            )));
        }
        if mapping.n_coarse() >= n_current {
            return Err(PipelineError::NonMonotone {
                position: i,
                prev: n_current,
                next: mapping.n_coarse(),
            });
        }
        let ctx = StepContext::from_topology(current.topology(), mapping.clone())?;
        let next_topology = bead_topology(mapping.n_coarse(), ctx.cg_bonds().to_vec())?;
        let mut frames = Vec::with_capacity(current.n_frames());
        for frame in current.frames() {
            frames.push(apply_mapping(frame, mapping)?);
        }
        levels.push(Ensemble::new(next_topology, frames)?);
    }
    Ok(Ladder { levels, mappings })
}

/// Step contexts for a mapping chain rooted at an atomistic topology:
/// level 0 keeps its elements and bonds, and every coarser level gets bead
/// particles with the bonds projected from below.
pub fn step_contexts(
    topology: &Topology,
    mappings: &[CGMapping],
) -> Result<Vec<StepContext>, CvaeError> {
    let mut contexts = Vec::with_capacity(mappings.len());
    let mut elements = topology.elements();
    let mut bonds: Vec<(usize, usize)> = topology.bonds().to_vec();
    for mapping in mappings {
        let ctx = StepContext::new(&elements, &bonds, mapping.clone())?;
        elements = vec![Element::Bead; mapping.n_coarse()];
        bonds = ctx.cg_bonds().to_vec();
        contexts.push(ctx);
    }
    Ok(contexts)
}

/// A trained k-step reconstruction chain: mappings `Γ_0..Γ_{k-1}` with one
/// step model per adjacent level pair. Step `i`'s model reconstructs level
/// `i` from level `i+1`; inference applies them coarsest-first.
#[derive(Clone, Debug)]
pub struct BackmapChain {
    mappings: Vec<CGMapping>,
    models: Vec<CvaeModel>,
    contexts: Vec<StepContext>,
}

impl BackmapChain {
    pub fn new(
        topology: &Topology,
        mappings: Vec<CGMapping>,
        models: Vec<CvaeModel>,
    ) -> Result<Self, PipelineError> {
        let k = mappings.len();
        if k == 0 {
            return Err(PipelineError::ChainAssembly(
                "chain needs at least one step".into(),
            ));
        }
        if k > MAX_CHAIN_STEPS {
            return Err(PipelineError::ChainAssembly(format!(
                "{k} steps, at most {MAX_CHAIN_STEPS} supported"
            )));
        }
        if models.len() != k {
            return Err(PipelineError::ChainAssembly(format!(
                "{k} mappings but {} models; one model per step",
                models.len()
            )));
        }
        for (i, mapping) in mappings.iter().enumerate() {
            if mapping.from_level() != i {
                return Err(PipelineError::ChainAssembly(format!(
                    "mapping {i} coarsens from level {}, expected level {i}",
                    mapping.from_level()
                )));
            }
        }
        // Adjacent particle-count consistency is enforced while building
        // the contexts.
        let contexts = step_contexts(topology, &mappings)?;
        for (i, (model, ctx)) in models.iter().zip(&contexts).enumerate() {
            if model.n_slots() < ctx.n_slots() {
                return Err(PipelineError::ChainAssembly(format!(
                    "step {i} model addresses {} slots but the mapping needs {}",
                    model.n_slots(),
                    ctx.n_slots()
                )));
            }
        }
        Ok(BackmapChain {
            mappings,
            models,
            contexts,
        })
    }

    pub fn k(&self) -> usize {
        self.mappings.len()
    }

    pub fn mappings(&self) -> &[CGMapping] {
        &self.mappings
    }

    pub fn models(&self) -> &[CvaeModel] {
        &self.models
    }

    pub fn model(&self, step: usize) -> &CvaeModel {
        &self.models[step]
    }

    pub fn context(&self, step: usize) -> &StepContext {
        &self.contexts[step]
    }

    /// Particle count expected of the coarsest-level input.
    pub fn coarsest_n(&self) -> usize {
        self.mappings.last().expect("k >= 1").n_coarse()
    }
}

/// Train every step of a ladder and assemble the chain, reporting epochs
/// through `log` with their step index. Steps are independent: step `i`
/// trains on (level `i`, level `i+1` teacher-forced) pairs with its own
/// config, and no state flows between steps.
pub fn train_chain_logged(
    ladder: &Ladder,
    hypers: &[CvaeHyper],
    cfgs: &[TrainConfig],
    mut log: impl FnMut(usize, &EpochRecord),
) -> Result<(BackmapChain, Vec<TrainHistory>), PipelineError> {
    let k = ladder.k();
    if hypers.len() != k || cfgs.len() != k {
        return Err(PipelineError::BadLadderSpec(format!(
            "ladder has {k} steps but {} hyper sets and {} train configs were given",
            hypers.len(),
            cfgs.len()
        )));
    }
    let topology = ladder.finest().topology();
    let contexts = step_contexts(topology, ladder.mappings())?;
    let mut models = Vec::with_capacity(k);
    let mut histories = Vec::with_capacity(k);
    for step in 0..k {
        let wrap = |source: TrainError| PipelineError::Step { step, source };
        let (train, val, _test) =
            split_dataset(ladder.level(step), &cfgs[step]).map_err(wrap)?;
        // Each step seeds its own parameter initialization so chains do
        // not start with identical weights at every level.
        let init_seed = cfgs[step].seed.wrapping_add(step as u64);
        let model = CvaeModel::for_context(&hypers[step], &contexts[step], init_seed)?;
        let (trained, history) = fit_step_model_logged(
            &train,
            &val,
            &ladder.mappings()[step],
            model,
            &cfgs[step],
            |record| log(step, record),
        )
        .map_err(wrap)?;
        models.push(trained);
        histories.push(history);
    }
    let chain = BackmapChain::new(topology, ladder.mappings().to_vec(), models)?;
    Ok((chain, histories))
}

/// [`train_chain_logged`] without a logger.
pub fn train_chain(
    ladder: &Ladder,
    hypers: &[CvaeHyper],
    cfgs: &[TrainConfig],
) -> Result<(BackmapChain, Vec<TrainHistory>), PipelineError> {
    train_chain_logged(ladder, hypers, cfgs, |_, _| {})
}

/// Every level produced by one inference pass: `levels[i]` is the
/// reconstruction at level `i`, finest first.
#[derive(Clone, Debug)]
pub struct BackmapResult {
    levels: Vec<Conformation>,
}

impl BackmapResult {
    /// The atomistic reconstruction.
    pub fn fine(&self) -> &Conformation {
        &self.levels[0]
    }

    /// Reconstructions at levels `1..k`, coarsest last, kept so errors can
    /// be traced to the step that introduced them.
    pub fn intermediates(&self) -> &[Conformation] {
        &self.levels[1..]
    }

    pub fn levels(&self) -> &[Conformation] {
        &self.levels
    }
}

/// Reconstruct fine coordinates from a coarsest-level frame by walking the
/// chain: at each step sample the prior over latents — the encoder is
/// never consulted — and decode one level finer. Seeded and deterministic;
/// step `i` draws from noise stream `i` so steps stay independent.
pub fn backmap(
    x_coarse: &Conformation,
    chain: &BackmapChain,
    seed: u64,
) -> Result<BackmapResult, PipelineError> {
    let k = chain.k();
    if x_coarse.n_particles() != chain.coarsest_n() {
        return Err(PipelineError::ChainAssembly(format!(
            "coarsest input has {} particles, chain expects {}",
            x_coarse.n_particles(),
            chain.coarsest_n()
        )));
    }
    if x_coarse.level() != k {
        return Err(PipelineError::ChainAssembly(format!(
            "coarsest input sits at level {}, chain expects level {k}",
            x_coarse.level()
        )));
    }
    let mut current = x_coarse.clone();
    let mut levels: Vec<Conformation> = Vec::with_capacity(k);
    for step in (0..k).rev() {
        let model = chain.model(step);
        let ctx = chain.context(step);
        let prior = model.prior(&current, ctx)?;
        let noise = sample_noise_stream(prior.n_beads(), prior.dim(), seed, step as u64);
        let z = crate::cvae::reparameterize_values(&prior, &noise);
        current = model.decode(&current, &z, ctx)?;
        levels.push(current.clone());
    }
    levels.reverse();
    Ok(BackmapResult { levels })
}

/// Parameters of the bundled synthetic peptide ensembles.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub n_residues: usize,
    pub n_frames: usize,
    pub seed: u64,
    /// Half-width, in degrees, of the uniform jitter applied to backbone
    /// torsions around trans.
    pub flexibility_deg: f64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            n_residues: 12,
            n_frames: 100,
            seed: 0,
            flexibility_deg: 25.0,
        }
    }
}

impl SyntheticSpec {
    pub fn new(n_residues: usize, n_frames: usize, seed: u64) -> Self {
        SyntheticSpec {
            n_residues,
            n_frames,
            seed,
            ..SyntheticSpec::default()
        }
    }
}

fn unit(v: [f64; 3]) -> [f64; 3] {
    let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
    [v[0] / n, v[1] / n, v[2] / n]
}

fn cross(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

fn sub(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

/// Place the next chain atom at distance `r` from `c`, with bond angle
/// `theta` at `c` and torsion `phi` about the `b`-`c` axis.
fn place_next(a: [f64; 3], b: [f64; 3], c: [f64; 3], r: f64, theta: f64, phi: f64) -> [f64; 3] {
    let x = unit(sub(c, b));
    let z = unit(cross(sub(b, a), x));
    let y = cross(z, x);
    let (st, ct) = theta.sin_cos();
    let (sp, cp) = phi.sin_cos();
    let d = [
        -r * ct * x[0] + r * st * (cp * y[0] + sp * z[0]),
        -r * ct * x[1] + r * st * (cp * y[1] + sp * z[1]),
        -r * ct * x[2] + r * st * (cp * y[2] + sp * z[2]),
    ];
    [c[0] + d[0], c[1] + d[1], c[2] + d[2]]
}

fn synthetic_topology(n_residues: usize) -> Result<(Topology, Vec<(usize, usize)>), MolError> {
    use crate::mol::Atom;
    let mut atoms = Vec::with_capacity(4 * n_residues);
    let mut bonds = Vec::with_capacity(4 * n_residues - 1);
    for r in 0..n_residues {
        let base = 4 * r;
        for (name, element) in [
            ("N", Element::N),
            ("CA", Element::C),
            ("C", Element::C),
            ("CB", Element::C),
        ] {
            atoms.push(Atom {
                element,
                name: name.to_string(),
                residue_index: r,
                residue_type: "ALA".to_string(),
            });
        }
        bonds.push((base, base + 1)); // N-CA
        bonds.push((base + 1, base + 2)); // CA-C
        bonds.push((base + 1, base + 3)); // CA-CB
        if r + 1 < n_residues {
            bonds.push((base + 2, base + 4)); // C-N of the next residue
        }
    }
    let topology = Topology::new(atoms, bonds.clone())?;
    Ok((topology, bonds))
}

fn synthetic_frame(
    n_residues: usize,
    rng: &mut ChaCha8Rng,
    flexibility: f64,
) -> Array2<f64> {
    let ideal = 109.5_f64.to_radians();
    let angle_jitter = 3.0_f64.to_radians();
    let n_backbone = 3 * n_residues;
    let mut backbone = Vec::with_capacity(n_backbone);
    backbone.push([0.0, 0.0, 0.0]);
    backbone.push([SYNTHETIC_BOND_LENGTH, 0.0, 0.0]);
    let theta0 = ideal + rng.gen_range(-angle_jitter..angle_jitter);
    backbone.push([
        SYNTHETIC_BOND_LENGTH - SYNTHETIC_BOND_LENGTH * theta0.cos(),
        SYNTHETIC_BOND_LENGTH * theta0.sin(),
        0.0,
    ]);
    for _ in 3..n_backbone {
        let theta = ideal + rng.gen_range(-angle_jitter..angle_jitter);
        let phi = std::f64::consts::PI + rng.gen_range(-flexibility..=flexibility);
        let m = backbone.len();
        let next = place_next(
            backbone[m - 3],
            backbone[m - 2],
            backbone[m - 1],
            SYNTHETIC_BOND_LENGTH,
            theta,
            phi,
        );
        backbone.push(next);
    }
    let mut coords = Array2::zeros((4 * n_residues, 3));
    for r in 0..n_residues {
        let n = backbone[3 * r];
        let ca = backbone[3 * r + 1];
        let c = backbone[3 * r + 2];
        // Sidechain bead along the outward bisector of the two backbone
        // bonds at CA, at exactly bond length.
        let to_n = unit(sub(n, ca));
        let to_c = unit(sub(c, ca));
        let away = unit([
            -(to_n[0] + to_c[0]),
            -(to_n[1] + to_c[1]),
            -(to_n[2] + to_c[2]),
        ]);
        let cb = [
            ca[0] + SYNTHETIC_BOND_LENGTH * away[0],
            ca[1] + SYNTHETIC_BOND_LENGTH * away[1],
            ca[2] + SYNTHETIC_BOND_LENGTH * away[2],
        ];
        for (slot, p) in [(0, n), (1, ca), (2, c), (3, cb)] {
            for d in 0..3 {
                coords[[4 * r + slot, d]] = p[d];
            }
        }
    }
    coords
}

fn min_nonbonded_distance(coords: &Array2<f64>, bonded: &BTreeSet<(usize, usize)>) -> f64 {
    let n = coords.nrows();
    let mut min = f64::INFINITY;
    for i in 0..n {
        for j in i + 1..n {
            if bonded.contains(&(i, j)) {
                continue;
            }
            let d = (0..3)
                .map(|k| (coords[[i, k]] - coords[[j, k]]).powi(2))
                .sum::<f64>()
                .sqrt();
            min = min.min(d);
        }
    }
    min
}

/// Generate a seeded synthetic peptide ensemble: per residue a 4-atom
/// heavy motif (N, CA, C and a CB sidechain bead), every bond exactly
/// [`SYNTHETIC_BOND_LENGTH`], backbone angles near tetrahedral with
/// torsions jittered around trans, and — by rejection — no nonbonded pair
/// closer than [`SYNTHETIC_NONBONDED_MIN`]. Frame `f` is drawn from its
/// own generator stream, so the same (seed, frame index) always yields the
/// same conformation no matter how many frames are requested.
pub fn generate_synthetic_ensemble(spec: &SyntheticSpec) -> Result<Ensemble, PipelineError> {
    if spec.n_residues < 3 {
        return Err(PipelineError::BadSynthetic(format!(
            "need at least 3 residues, got {}",
            spec.n_residues
        )));
    }
    if spec.n_frames == 0 {
        return Err(PipelineError::BadSynthetic("need at least one frame".into()));
    }
    if !(spec.flexibility_deg >= 0.0) || spec.flexibility_deg >= 90.0 {
        return Err(PipelineError::BadSynthetic(format!(
            "flexibility must lie in [0, 90) degrees, got {}",
            spec.flexibility_deg
        )));
    }
    let (topology, bonds) = synthetic_topology(spec.n_residues)?;
    let bonded: BTreeSet<(usize, usize)> = bonds
        .iter()
        .map(|&(a, b)| (a.min(b), a.max(b)))
        .collect();
    let flexibility = spec.flexibility_deg.to_radians();
    let max_attempts = 1000;
    let mut frames = Vec::with_capacity(spec.n_frames);
    for frame in 0..spec.n_frames {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        rng.set_stream(SYNTH_STREAM | frame as u64);
        let mut accepted = None;
        for _ in 0..max_attempts {
            let coords = synthetic_frame(spec.n_residues, &mut rng, flexibility);
            if min_nonbonded_distance(&coords, &bonded) >= SYNTHETIC_NONBONDED_MIN {
                accepted = Some(coords);
                break;
            }
        }
        let coords = accepted.ok_or(PipelineError::ConstructionFailed {
            frame,
            attempts: max_attempts,
        })?;
        frames.push(Conformation::new(coords, 0)?);
    }
    Ok(Ensemble::new(topology, frames)?)
}
