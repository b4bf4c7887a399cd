//! Coarse-graining operators: assignments of fine particles to beads,
//! weighted bead geometry, learned mappings, and mapping composition.

use crate::mol::{center_of, Conformation, Ensemble, MolError, Topology};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CoarsenError {
    #[error("mapping needs at least one particle and one bead")]
    Empty,
    #[error("bead {0} receives no particles")]
    EmptyBead(usize),
    #[error("particle {particle} assigned to bead {bead}, but mapping has {n_coarse} beads")]
    AssignmentOutOfRange {
        particle: usize,
        bead: usize,
        n_coarse: usize,
    },
    #[error("{given} weights given for {needed} particles")]
    WeightCountMismatch { given: usize, needed: usize },
    #[error("weights must be nonnegative and finite")]
    NegativeWeight,
    #[error("weights of bead {0} sum to zero")]
    ZeroWeightBead(usize),
    #[error("conformation has {actual} particles, mapping expects {expected}")]
    ParticleCountMismatch { expected: usize, actual: usize },
    #[error("conformation is at level {actual}, mapping starts at level {expected}")]
    LevelMismatch { expected: usize, actual: usize },
    #[error("residue {0} has no CA atom")]
    MissingCalpha(usize),
    #[error("cannot learn {n_coarse} beads from {n_fine} particles; coarsening must shrink the level")]
    NotCoarser { n_fine: usize, n_coarse: usize },
    #[error("ensemble has no frames")]
    NoFrames,
    #[error("mapping chain is empty")]
    EmptyChain,
    #[error("mapping levels {a} -> {b} do not chain (bead count {beads} vs particle count {particles})")]
    ChainMismatch {
        a: usize,
        b: usize,
        beads: usize,
        particles: usize,
    },
    #[error(transparent)]
    Mol(#[from] MolError),
}

/// Surjective assignment of `n_fine` particles at level `i` onto `n_coarse`
/// beads at level `i + 1`, with per-particle geometry weights.
///
/// Every bead receives at least one particle and positive total weight; bead
/// indices follow sequence order (the bead containing the lowest particle
/// index is bead 0).
#[derive(Clone, Debug, PartialEq)]
pub struct CGMapping {
    assignment: Vec<usize>,
    weights: Vec<f64>,
    n_coarse: usize,
    from_level: usize,
    bead_counts: Vec<usize>,
}

impl CGMapping {
    pub fn new(
        assignment: Vec<usize>,
        weights: Vec<f64>,
        n_coarse: usize,
        from_level: usize,
    ) -> Result<Self, CoarsenError> {
        if assignment.is_empty() || n_coarse == 0 {
            return Err(CoarsenError::Empty);
        }
        if weights.len() != assignment.len() {
            return Err(CoarsenError::WeightCountMismatch {
                given: weights.len(),
                needed: assignment.len(),
            });
        }
        if weights.iter().any(|w| *w < 0.0 || !w.is_finite()) {
            return Err(CoarsenError::NegativeWeight);
        }
        let mut bead_counts = vec![0usize; n_coarse];
        let mut bead_weight = vec![0.0f64; n_coarse];
        for (particle, &bead) in assignment.iter().enumerate() {
            if bead >= n_coarse {
                return Err(CoarsenError::AssignmentOutOfRange {
                    particle,
                    bead,
                    n_coarse,
                });
            }
            bead_counts[bead] += 1;
            bead_weight[bead] += weights[particle];
        }
        if let Some(bead) = bead_counts.iter().position(|&c| c == 0) {
            return Err(CoarsenError::EmptyBead(bead));
        }
        if let Some(bead) = bead_weight.iter().position(|&w| w <= 0.0) {
            return Err(CoarsenError::ZeroWeightBead(bead));
        }
        Ok(CGMapping {
            assignment,
            weights,
            n_coarse,
            from_level,
            bead_counts,
        })
    }

    /// Mapping with unit weight on every particle.
    pub fn uniform(
        assignment: Vec<usize>,
        n_coarse: usize,
        from_level: usize,
    ) -> Result<Self, CoarsenError> {
        let weights = vec![1.0; assignment.len()];
        CGMapping::new(assignment, weights, n_coarse, from_level)
    }

    pub fn n_fine(&self) -> usize {
        self.assignment.len()
    }

    pub fn n_coarse(&self) -> usize {
        self.n_coarse
    }

    pub fn from_level(&self) -> usize {
        self.from_level
    }

    pub fn to_level(&self) -> usize {
        self.from_level + 1
    }

    pub fn assignment(&self) -> &[usize] {
        &self.assignment
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn bead_counts(&self) -> &[usize] {
        &self.bead_counts
    }

    /// Member particles of one bead, ascending.
    pub fn bead_members(&self, bead: usize) -> Vec<usize> {
        self.assignment
            .iter()
            .enumerate()
            .filter(|(_, &b)| b == bead)
            .map(|(i, _)| i)
            .collect()
    }

    /// Rank of each particle within its bead, by ascending particle index.
    pub fn slots(&self) -> Vec<usize> {
        let mut seen = vec![0usize; self.n_coarse];
        self.assignment
            .iter()
            .map(|&b| {
                let slot = seen[b];
                seen[b] += 1;
                slot
            })
            .collect()
    }

    pub fn max_bead_size(&self) -> usize {
        *self.bead_counts.iter().max().unwrap()
    }
}

/// Relabel beads so that bead order follows the lowest member particle
/// index. Keeps learned mappings deterministic and sequence-aligned.
fn canonical_bead_order(assignment: &[usize], n_coarse: usize) -> Vec<usize> {
    let mut first_member = vec![usize::MAX; n_coarse];
    for (particle, &bead) in assignment.iter().enumerate() {
        if first_member[bead] == usize::MAX {
            first_member[bead] = particle;
        }
    }
    let mut order: Vec<usize> = (0..n_coarse).collect();
    order.sort_by_key(|&b| first_member[b]);
    let mut relabel = vec![0usize; n_coarse];
    for (new, &old) in order.iter().enumerate() {
        relabel[old] = new;
    }
    assignment.iter().map(|&b| relabel[b]).collect()
}

/// Project one frame to the next-coarser level: each bead sits at the
/// weighted center of its member particles.
pub fn apply_mapping(
    conformation: &Conformation,
    mapping: &CGMapping,
) -> Result<Conformation, CoarsenError> {
    if conformation.n_particles() != mapping.n_fine() {
        return Err(CoarsenError::ParticleCountMismatch {
            expected: mapping.n_fine(),
            actual: conformation.n_particles(),
        });
    }
    if conformation.level() != mapping.from_level() {
        return Err(CoarsenError::LevelMismatch {
            expected: mapping.from_level(),
            actual: conformation.level(),
        });
    }
    let mut coords = Array2::zeros((mapping.n_coarse(), 3));
    for bead in 0..mapping.n_coarse() {
        let members = mapping.bead_members(bead);
        let weights: Vec<f64> = members.iter().map(|&i| mapping.weights()[i]).collect();
        let center = center_of(conformation, &members, Some(&weights))?;
        for d in 0..3 {
            coords[[bead, d]] = center[d];
        }
    }
    Ok(Conformation::new(coords, mapping.to_level())?)
}

/// One bead per residue, pinned to the residue's CA atom by an indicator
/// weight, so bead positions equal CA positions exactly.
pub fn calpha_mapping(topology: &Topology) -> Result<CGMapping, CoarsenError> {
    let n_residues = topology.n_residues();
    let mut assignment = vec![0usize; topology.n_atoms()];
    let mut weights = vec![0.0f64; topology.n_atoms()];
    for residue in 0..n_residues {
        let ca = topology
            .find_in_residue(residue, "CA")
            .ok_or(CoarsenError::MissingCalpha(residue))?;
        for atom in topology.residue_atoms(residue) {
            assignment[atom] = residue;
        }
        weights[ca] = 1.0;
    }
    CGMapping::new(assignment, weights, n_residues, 0)
}

/// Knobs for [`learn_mapping`].
#[derive(Clone, Debug)]
pub struct LearnOptions {
    pub seed: u64,
    pub max_iters: usize,
    /// Force each bead to own a contiguous run of sequence indices.
    pub contiguity: bool,
}

impl Default for LearnOptions {
    fn default() -> Self {
        LearnOptions {
            seed: 0,
            max_iters: 50,
            contiguity: true,
        }
    }
}

/// Each particle as one flat row of its coordinates across all frames; the
/// clustering objective over these rows equals the ensemble-averaged
/// within-bead squared distance to per-frame bead centers.
fn stacked_features(ensemble: &Ensemble) -> Array2<f64> {
    let n = ensemble.topology().n_atoms();
    let f = ensemble.n_frames();
    let mut features = Array2::zeros((n, 3 * f));
    for (fi, frame) in ensemble.frames().iter().enumerate() {
        for p in 0..n {
            let pos = frame.position(p);
            for d in 0..3 {
                features[[p, 3 * fi + d]] = pos[d];
            }
        }
    }
    features
}

fn assignment_objective(features: &Array2<f64>, assignment: &[usize], n_coarse: usize) -> f64 {
    let dim = features.ncols();
    let mut sums = Array2::<f64>::zeros((n_coarse, dim));
    let mut counts = vec![0usize; n_coarse];
    for (p, &b) in assignment.iter().enumerate() {
        counts[b] += 1;
        let mut row = sums.row_mut(b);
        row += &features.row(p);
    }
    let mut objective = 0.0;
    for (p, &b) in assignment.iter().enumerate() {
        for d in 0..dim {
            let center = sums[[b, d]] / counts[b] as f64;
            let delta = features[[p, d]] - center;
            objective += delta * delta;
        }
    }
    objective
}

/// Exact dynamic program over split points for contiguous segments: segment
/// cost is additive, so the optimal partition into `n_coarse` runs minimizes
/// the same objective Lloyd iterations descend on.
fn contiguous_partition(features: &Array2<f64>, n_coarse: usize) -> Vec<usize> {
    let n = features.nrows();
    let dim = features.ncols();
    // Prefix sums of rows and of squared norms.
    let mut prefix = Array2::<f64>::zeros((n + 1, dim));
    let mut prefix_sq = vec![0.0f64; n + 1];
    for i in 0..n {
        for d in 0..dim {
            prefix[[i + 1, d]] = prefix[[i, d]] + features[[i, d]];
        }
        let norm_sq: f64 = features.row(i).iter().map(|v| v * v).sum();
        prefix_sq[i + 1] = prefix_sq[i] + norm_sq;
    }
    let cost = |start: usize, end: usize| -> f64 {
        // Within-segment squared deviation for particles [start, end).
        let len = (end - start) as f64;
        let mut center_sq = 0.0;
        for d in 0..dim {
            let s = prefix[[end, d]] - prefix[[start, d]];
            center_sq += s * s;
        }
        (prefix_sq[end] - prefix_sq[start]) - center_sq / len
    };
    let inf = f64::INFINITY;
    let mut best = vec![vec![inf; n + 1]; n_coarse + 1];
    let mut split = vec![vec![0usize; n + 1]; n_coarse + 1];
    best[0][0] = 0.0;
    for beads in 1..=n_coarse {
        for end in beads..=n {
            for start in (beads - 1)..end {
                if best[beads - 1][start] == inf {
                    continue;
                }
                let total = best[beads - 1][start] + cost(start, end);
                if total < best[beads][end] {
                    best[beads][end] = total;
                    split[beads][end] = start;
                }
            }
        }
    }
    let mut assignment = vec![0usize; n];
    let mut end = n;
    for beads in (1..=n_coarse).rev() {
        let start = split[beads][end];
        for p in start..end {
            assignment[p] = beads - 1;
        }
        end = start;
    }
    assignment
}

/// Seeded Lloyd iterations on the stacked per-frame coordinates, with
/// greedy farthest-first seeding, lowest-bead-index tie-breaking, and
/// farthest-particle repair of emptied beads. The objective never increases
/// across iterations.
fn lloyd_partition(
    features: &Array2<f64>,
    n_coarse: usize,
    opts: &LearnOptions,
    trace: &mut Vec<f64>,
) -> Vec<usize> {
    let n = features.nrows();
    let dim = features.ncols();
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);

    let row_dist_sq = |a: usize, centers: &Array2<f64>, c: usize| -> f64 {
        let mut acc = 0.0;
        for d in 0..dim {
            let delta = features[[a, d]] - centers[[c, d]];
            acc += delta * delta;
        }
        acc
    };

    // Farthest-first center seeding from a random start.
    let mut centers = Array2::<f64>::zeros((n_coarse, dim));
    let first = rng.gen_range(0..n);
    centers.row_mut(0).assign(&features.row(first));
    let mut nearest_sq = vec![f64::INFINITY; n];
    for c in 1..n_coarse {
        for p in 0..n {
            nearest_sq[p] = nearest_sq[p].min(row_dist_sq(p, &centers, c - 1));
        }
        let far = (0..n)
            .max_by(|&a, &b| nearest_sq[a].partial_cmp(&nearest_sq[b]).unwrap())
            .unwrap();
        centers.row_mut(c).assign(&features.row(far));
    }

    let mut assignment = vec![0usize; n];
    for _ in 0..opts.max_iters.max(1) {
        // Assign to nearest center; ties go to the lowest bead index.
        let mut next = vec![0usize; n];
        for p in 0..n {
            let mut best_c = 0;
            let mut best_d = row_dist_sq(p, &centers, 0);
            for c in 1..n_coarse {
                let d = row_dist_sq(p, &centers, c);
                if d < best_d {
                    best_d = d;
                    best_c = c;
                }
            }
            next[p] = best_c;
        }
        // Repair emptied beads with the particle farthest from its center.
        let mut counts = vec![0usize; n_coarse];
        for &b in &next {
            counts[b] += 1;
        }
        for bead in 0..n_coarse {
            while counts[bead] == 0 {
                let donor = (0..n)
                    .filter(|&p| counts[next[p]] > 1)
                    .max_by(|&a, &b| {
                        let da = row_dist_sq(a, &centers, next[a]);
                        let db = row_dist_sq(b, &centers, next[b]);
                        da.partial_cmp(&db)
                            .unwrap()
                            .then(b.cmp(&a)) // prefer the lowest particle index
                    })
                    .expect("a donor bead always exists when n >= n_coarse");
                counts[next[donor]] -= 1;
                next[donor] = bead;
                counts[bead] += 1;
            }
        }
        let converged = next == assignment;
        assignment = next;
        trace.push(assignment_objective(features, &assignment, n_coarse));
        if converged {
            break;
        }
        // Recenter.
        centers.fill(0.0);
        let mut tally = vec![0usize; n_coarse];
        for (p, &b) in assignment.iter().enumerate() {
            tally[b] += 1;
            let mut row = centers.row_mut(b);
            row += &features.row(p);
        }
        for b in 0..n_coarse {
            let mut row = centers.row_mut(b);
            row /= tally[b] as f64;
        }
    }
    assignment
}

pub(crate) fn learn_mapping_traced(
    ensemble: &Ensemble,
    n_coarse: usize,
    opts: &LearnOptions,
) -> Result<(CGMapping, Vec<f64>), CoarsenError> {
    let n_fine = ensemble.topology().n_atoms();
    if n_coarse == 0 {
        return Err(CoarsenError::Empty);
    }
    if n_coarse >= n_fine {
        return Err(CoarsenError::NotCoarser { n_fine, n_coarse });
    }
    if ensemble.n_frames() == 0 {
        return Err(CoarsenError::NoFrames);
    }
    let features = stacked_features(ensemble);
    let mut trace = Vec::new();
    let assignment = if opts.contiguity {
        let assignment = contiguous_partition(&features, n_coarse);
        trace.push(assignment_objective(&features, &assignment, n_coarse));
        assignment
    } else {
        lloyd_partition(&features, n_coarse, opts, &mut trace)
    };
    let assignment = canonical_bead_order(&assignment, n_coarse);
    let mapping = CGMapping::uniform(assignment, n_coarse, ensemble.level())?;
    Ok((mapping, trace))
}

/// Learn a mapping onto `n_coarse` beads by minimizing the ensemble-averaged
/// within-bead squared distance to per-frame bead centers.
///
/// With `contiguity` each bead owns a contiguous run of sequence indices,
/// found exactly by dynamic programming over split points; otherwise seeded
/// Lloyd iterations descend on the same objective. Beads get uniform unit
/// weights, so bead positions are plain geometric centers.
pub fn learn_mapping(
    ensemble: &Ensemble,
    n_coarse: usize,
    opts: &LearnOptions,
) -> Result<CGMapping, CoarsenError> {
    learn_mapping_traced(ensemble, n_coarse, opts).map(|(mapping, _)| mapping)
}

/// Residues per bead at the coarse end of a mapping chain. The chain may be
/// empty, in which case the "beads" are the fine-grained particles
/// themselves.
pub fn bead_size_rho(topology: &Topology, chain: &[CGMapping]) -> f64 {
    let n_beads = chain
        .last()
        .map(|m| m.n_coarse())
        .unwrap_or_else(|| topology.n_atoms());
    topology.n_residues() as f64 / n_beads as f64
}

/// Collapse a chain of mappings for adjacent levels into one mapping whose
/// single application equals applying the chain sequentially.
///
/// Particle weights compose as `w = w_outer(bead) * w_inner(particle) /
/// W_inner(bead)`, which reproduces sequential weighted centers exactly in
/// real arithmetic.
pub fn compose_chain(chain: &[CGMapping]) -> Result<CGMapping, CoarsenError> {
    let first = chain.first().ok_or(CoarsenError::EmptyChain)?;
    let mut assignment: Vec<usize> = first.assignment().to_vec();
    let mut weights: Vec<f64> = first.weights().to_vec();
    let mut n_coarse = first.n_coarse();
    for (step, next) in chain.iter().enumerate().skip(1) {
        if next.n_fine() != n_coarse || next.from_level() != first.from_level() + step {
            return Err(CoarsenError::ChainMismatch {
                a: chain[step - 1].to_level(),
                b: next.from_level(),
                beads: n_coarse,
                particles: next.n_fine(),
            });
        }
        // Total current weight handed to each intermediate bead.
        let mut bead_weight = vec![0.0f64; n_coarse];
        for (p, &b) in assignment.iter().enumerate() {
            bead_weight[b] += weights[p];
        }
        for (p, bead) in assignment.iter_mut().enumerate() {
            let intermediate = *bead;
            weights[p] = next.weights()[intermediate] * weights[p] / bead_weight[intermediate];
            *bead = next.assignment()[intermediate];
        }
        n_coarse = next.n_coarse();
    }
    CGMapping::new(assignment, weights, n_coarse, first.from_level())
}
