//! Reconstruction quality measures and scheme evaluation.
//!
//! Four structural metrics quantify how faithfully a backmapped frame
//! reproduces the original: heavy-atom RMSD (no superposition — generated
//! and true frames share the coarse frame by construction), normalized
//! bond-graph edit distance, the percentage of residues involved in a
//! steric clash, and backbone dihedral (Ramachandran) distributions.
//! [`evaluate_scheme`] runs a reconstruction scheme over held-out frames
//! with several seeds and reports per-seed means plus across-seed spread,
//! together with binned dihedral counts ready for plotting.

use std::collections::BTreeSet;

use crate::coarsen::apply_mapping;
use crate::mol::{Conformation, Element, MolError, Topology};
use crate::pipeline::{backmap, BackmapChain, PipelineError};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Default clash threshold in Angstrom: two sidechain heavy atoms of
/// different residues closer than this mark both residues as clashing.
pub const CLASH_THRESHOLD: f64 = 1.2;

/// Covalent bond inference margin: atoms closer than this factor times the
/// sum of their covalent radii are taken as bonded.
pub const BOND_TOLERANCE: f64 = 1.2;

/// Width of one Ramachandran histogram bin, in degrees.
pub const RAMACHANDRAN_BIN_DEG: f64 = 5.0;

/// Bins per dihedral axis (360 degrees at [`RAMACHANDRAN_BIN_DEG`] each).
pub const RAMACHANDRAN_BINS: usize = 72;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("conformations hold {left} and {right} particles; metrics need equal counts")]
    CountMismatch { left: usize, right: usize },
    #[error("selection covers {given} particles but the conformation holds {needed}")]
    SelectionMismatch { given: usize, needed: usize },
    #[error("selection picks no particles")]
    EmptySelection,
    #[error("bond graphs hold {left} and {right} vertices; edit distance needs one shared labeled vertex set")]
    VertexSetMismatch { left: usize, right: usize },
    #[error("edge ({a}, {b}) is invalid for a graph on {count} vertices")]
    BadEdge { a: usize, b: usize, count: usize },
    #[error("normalizing an edit distance by zero reference edges")]
    ZeroReferenceEdges,
    #[error("scheme evaluation needs at least three seeds, got {0}")]
    TooFewSeeds(usize),
    #[error("scheme evaluation needs a nonempty test set")]
    EmptyTestSet,
    #[error("total mass must be positive and finite")]
    BadMasses,
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
    #[error(transparent)]
    Mol(#[from] MolError),
}

/// Root-mean-square deviation between two conformations over a particle
/// mask, in the units of the input coordinates (Angstrom throughout this
/// crate). No superposition is applied: a reconstruction is scored in the
/// coarse frame it was generated in.
pub fn rmsd(
    x: &Conformation,
    xhat: &Conformation,
    mask: &[bool],
) -> Result<f64, MetricsError> {
    if x.n_particles() != xhat.n_particles() {
        return Err(MetricsError::CountMismatch {
            left: x.n_particles(),
            right: xhat.n_particles(),
        });
    }
    if mask.len() != x.n_particles() {
        return Err(MetricsError::SelectionMismatch {
            given: mask.len(),
            needed: x.n_particles(),
        });
    }
    let mut sum = 0.0;
    let mut n = 0usize;
    for (i, &keep) in mask.iter().enumerate() {
        if !keep {
            continue;
        }
        let (p, q) = (x.position(i), xhat.position(i));
        sum += (0..3).map(|d| (p[d] - q[d]).powi(2)).sum::<f64>();
        n += 1;
    }
    if n == 0 {
        return Err(MetricsError::EmptySelection);
    }
    Ok((sum / n as f64).sqrt())
}

/// An undirected simple graph over a fixed labeled vertex set `0..n`.
///
/// Edges are normalized to `(min, max)` pairs; parallel edges collapse.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BondGraph {
    n_vertices: usize,
    edges: BTreeSet<(usize, usize)>,
}

impl BondGraph {
    pub fn new(
        n_vertices: usize,
        edges: impl IntoIterator<Item = (usize, usize)>,
    ) -> Result<Self, MetricsError> {
        let mut normalized = BTreeSet::new();
        for (a, b) in edges {
            if a >= n_vertices || b >= n_vertices || a == b {
                return Err(MetricsError::BadEdge {
                    a,
                    b,
                    count: n_vertices,
                });
            }
            normalized.insert((a.min(b), a.max(b)));
        }
        Ok(BondGraph {
            n_vertices,
            edges: normalized,
        })
    }

    /// The reference bond graph of a topology.
    pub fn from_topology(topology: &Topology) -> Self {
        BondGraph {
            n_vertices: topology.n_atoms(),
            edges: topology.bonds().iter().copied().collect(),
        }
    }

    pub fn n_vertices(&self) -> usize {
        self.n_vertices
    }

    pub fn n_edges(&self) -> usize {
        self.edges.len()
    }

    pub fn edges(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.edges.iter().copied()
    }

    pub fn contains(&self, a: usize, b: usize) -> bool {
        self.edges.contains(&(a.min(b), a.max(b)))
    }
}

/// Infer covalent bonds from interatomic distances: atoms `i` and `j` bond
/// when their distance is below [`BOND_TOLERANCE`] times the sum of their
/// covalent radii. Bead pseudo-particles carry radius zero, so coarse
/// levels never grow inferred bonds.
pub fn infer_bonds(
    conf: &Conformation,
    elements: &[Element],
) -> Result<BondGraph, MetricsError> {
    let n = conf.n_particles();
    if elements.len() != n {
        return Err(MetricsError::SelectionMismatch {
            given: elements.len(),
            needed: n,
        });
    }
    let mut edges = BTreeSet::new();
    for i in 0..n {
        for j in i + 1..n {
            let threshold = BOND_TOLERANCE
                * (elements[i].covalent_radius() + elements[j].covalent_radius());
            if conf.distance(i, j) < threshold {
                edges.insert((i, j));
            }
        }
    }
    Ok(BondGraph {
        n_vertices: n,
        edges,
    })
}

/// Normalized graph edit distance between two bond graphs over the same
/// labeled vertex set: the number of edge insertions plus deletions turning
/// one into the other, divided by the reference edge count. With identical
/// labeled vertices and unit edge-edit costs, the edit distance is exactly
/// the size of the edge symmetric difference.
pub fn ged_normalized(
    g: &BondGraph,
    ghat: &BondGraph,
    n_reference_edges: usize,
) -> Result<f64, MetricsError> {
    if g.n_vertices != ghat.n_vertices {
        return Err(MetricsError::VertexSetMismatch {
            left: g.n_vertices,
            right: ghat.n_vertices,
        });
    }
    if n_reference_edges == 0 {
        return Err(MetricsError::ZeroReferenceEdges);
    }
    let diff = g.edges.symmetric_difference(&ghat.edges).count();
    Ok(diff as f64 / n_reference_edges as f64)
}

fn is_sidechain_heavy(atom: &crate::mol::Atom) -> bool {
    !atom.element.is_hydrogen() && !matches!(atom.name.as_str(), "N" | "CA" | "C" | "O")
}

/// Percentage of residues involved in a steric clash: a residue counts as
/// clashing when any of its sidechain heavy atoms (heavy atoms off the
/// N/CA/C/O backbone) lies within `threshold` of a sidechain heavy atom of
/// any *different* residue; both residues of a clashing pair count.
pub fn steric_clash_score(
    conf: &Conformation,
    topology: &Topology,
    threshold: f64,
) -> Result<f64, MetricsError> {
    if conf.n_particles() != topology.n_atoms() {
        return Err(MetricsError::SelectionMismatch {
            given: conf.n_particles(),
            needed: topology.n_atoms(),
        });
    }
    let sidechain: Vec<usize> = (0..topology.n_atoms())
        .filter(|&i| is_sidechain_heavy(topology.atom(i)))
        .collect();
    let mut clashing = vec![false; topology.n_residues()];
    for (k, &i) in sidechain.iter().enumerate() {
        for &j in &sidechain[k + 1..] {
            let (ri, rj) = (
                topology.atom(i).residue_index,
                topology.atom(j).residue_index,
            );
            if ri == rj {
                continue;
            }
            if conf.distance(i, j) < threshold {
                clashing[ri] = true;
                clashing[rj] = true;
            }
        }
    }
    let n_clashing = clashing.iter().filter(|&&c| c).count();
    Ok(100.0 * n_clashing as f64 / topology.n_residues() as f64)
}

/// Signed dihedral angle of four points in degrees, in `(-180, 180]`.
///
/// Computed from the bond vectors `b1 = p1-p0`, `b2 = p2-p1`, `b3 = p3-p2`
/// as `atan2(|b2| b1 . (b2 x b3), (b1 x b2) . (b2 x b3))`, the standard
/// torsion about the `p1-p2` axis (trans = 180).
pub fn dihedral_deg(p0: [f64; 3], p1: [f64; 3], p2: [f64; 3], p3: [f64; 3]) -> f64 {
    let sub = |a: [f64; 3], b: [f64; 3]| [a[0] - b[0], a[1] - b[1], a[2] - b[2]];
    let cross = |a: [f64; 3], b: [f64; 3]| {
        [
            a[1] * b[2] - a[2] * b[1],
            a[2] * b[0] - a[0] * b[2],
            a[0] * b[1] - a[1] * b[0],
        ]
    };
    let dot = |a: [f64; 3], b: [f64; 3]| a[0] * b[0] + a[1] * b[1] + a[2] * b[2];
    let b1 = sub(p1, p0);
    let b2 = sub(p2, p1);
    let b3 = sub(p3, p2);
    let n1 = cross(b1, b2);
    let n2 = cross(b2, b3);
    let y = dot(b2, b2).sqrt() * dot(b1, n2);
    let mut deg = y.atan2(dot(n1, n2)).to_degrees();
    if deg <= -180.0 {
        deg += 360.0;
    }
    deg
}

/// Backbone dihedral pairs extracted from one conformation, plus a count of
/// residues skipped for missing backbone atoms.
#[derive(Clone, Debug)]
pub struct DihedralScan {
    /// One `(phi, psi)` pair in degrees per scored interior residue.
    pub pairs: Vec<(f64, f64)>,
    /// Residues skipped because an N, CA, or C atom could not be found.
    pub skipped: usize,
}

/// Backbone dihedrals per interior residue: `phi` about the N-CA bond from
/// the previous residue's C, `psi` about the CA-C bond toward the next
/// residue's N. Terminal residues have only one of the two and are omitted;
/// residues missing a backbone atom are skipped and counted.
pub fn phi_psi(conf: &Conformation, topology: &Topology) -> Result<DihedralScan, MetricsError> {
    if conf.n_particles() != topology.n_atoms() {
        return Err(MetricsError::SelectionMismatch {
            given: conf.n_particles(),
            needed: topology.n_atoms(),
        });
    }
    let n_res = topology.n_residues();
    let mut pairs = Vec::new();
    let mut skipped = 0usize;
    for r in 1..n_res.saturating_sub(1) {
        let atoms = (
            topology.find_in_residue(r - 1, "C"),
            topology.find_in_residue(r, "N"),
            topology.find_in_residue(r, "CA"),
            topology.find_in_residue(r, "C"),
            topology.find_in_residue(r + 1, "N"),
        );
        let (Some(c_prev), Some(n), Some(ca), Some(c), Some(n_next)) = atoms else {
            skipped += 1;
            continue;
        };
        let phi = dihedral_deg(
            conf.position(c_prev),
            conf.position(n),
            conf.position(ca),
            conf.position(c),
        );
        let psi = dihedral_deg(
            conf.position(n),
            conf.position(ca),
            conf.position(c),
            conf.position(n_next),
        );
        pairs.push((phi, psi));
    }
    Ok(DihedralScan { pairs, skipped })
}

/// Mass-weighted radius of gyration in nanometers (coordinates are in
/// Angstrom; the conventional reporting unit for protein compactness is nm).
pub fn radius_of_gyration(conf: &Conformation, masses: &[f64]) -> Result<f64, MetricsError> {
    let n = conf.n_particles();
    if masses.len() != n {
        return Err(MetricsError::SelectionMismatch {
            given: masses.len(),
            needed: n,
        });
    }
    let total: f64 = masses.iter().sum();
    if !(total > 0.0) || !total.is_finite() || masses.iter().any(|&m| m < 0.0) {
        return Err(MetricsError::BadMasses);
    }
    let mut com = [0.0; 3];
    for i in 0..n {
        let p = conf.position(i);
        for d in 0..3 {
            com[d] += masses[i] * p[d];
        }
    }
    for d in 0..3 {
        com[d] /= total;
    }
    let mut sum = 0.0;
    for i in 0..n {
        let p = conf.position(i);
        sum += masses[i] * (0..3).map(|d| (p[d] - com[d]).powi(2)).sum::<f64>();
    }
    Ok((sum / total).sqrt() / 10.0)
}

/// Binned counts of `(phi, psi)` pairs on a 72x72 grid of 5-degree cells
/// spanning `(-180, 180]` on both axes.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RamachandranHistogram {
    counts: Vec<Vec<u64>>,
}

impl Default for RamachandranHistogram {
    fn default() -> Self {
        Self::new()
    }
}

impl RamachandranHistogram {
    pub fn new() -> Self {
        RamachandranHistogram {
            counts: vec![vec![0; RAMACHANDRAN_BINS]; RAMACHANDRAN_BINS],
        }
    }

    fn bin_of(angle: f64) -> usize {
        let idx = ((angle + 180.0) / RAMACHANDRAN_BIN_DEG).floor() as isize;
        idx.clamp(0, RAMACHANDRAN_BINS as isize - 1) as usize
    }

    pub fn record(&mut self, phi: f64, psi: f64) {
        self.counts[Self::bin_of(phi)][Self::bin_of(psi)] += 1;
    }

    /// Count in the cell for bin indices `(phi_bin, psi_bin)`.
    pub fn count(&self, phi_bin: usize, psi_bin: usize) -> u64 {
        self.counts[phi_bin][psi_bin]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    /// Rows of `(phi_bin_center, psi_bin_center, count)` for export.
    pub fn rows(&self) -> Vec<(f64, f64, u64)> {
        let center = |b: usize| -180.0 + (b as f64 + 0.5) * RAMACHANDRAN_BIN_DEG;
        let mut rows = Vec::with_capacity(RAMACHANDRAN_BINS * RAMACHANDRAN_BINS);
        for (i, row) in self.counts.iter().enumerate() {
            for (j, &c) in row.iter().enumerate() {
                rows.push((center(i), center(j), c));
            }
        }
        rows
    }
}

/// Anything that can rebuild a fine-grained frame from its own coarse
/// representation of that frame. Implementations coarsen the input to
/// their working resolution internally, then reconstruct with `seed`
/// driving any stochastic sampling.
pub trait ReconstructionScheme {
    fn reconstruct(
        &self,
        fine: &Conformation,
        seed: u64,
    ) -> Result<Conformation, PipelineError>;
}

impl ReconstructionScheme for BackmapChain {
    fn reconstruct(
        &self,
        fine: &Conformation,
        seed: u64,
    ) -> Result<Conformation, PipelineError> {
        let mut current = fine.clone();
        for mapping in self.mappings() {
            current = apply_mapping(&current, mapping)?;
        }
        Ok(backmap(&current, self, seed)?.fine().clone())
    }
}

/// Aggregate reconstruction quality over a test set: per-seed means of each
/// metric, then mean and sample standard deviation across seeds.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MetricsReport {
    pub rmsd_mean: f64,
    pub rmsd_std: f64,
    pub ged_norm_mean: f64,
    pub ged_norm_std: f64,
    pub clash_mean: f64,
    pub clash_std: f64,
    /// Total reconstructions scored (frames times seeds).
    pub n_samples: usize,
}

/// A metrics report together with plot-ready dihedral histograms for the
/// reference frames and for the reconstructions.
#[derive(Clone, Debug)]
pub struct SchemeEvaluation {
    pub report: MetricsReport,
    pub ramachandran_true: RamachandranHistogram,
    pub ramachandran_generated: RamachandranHistogram,
}

fn mean_and_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Run a reconstruction scheme over every test frame once per seed and
/// aggregate heavy-atom RMSD, normalized bond-graph edit distance, and the
/// steric clash score. Metrics are averaged over frames within each seed;
/// the report carries the mean and sample standard deviation across seeds.
pub fn evaluate_scheme<S: ReconstructionScheme>(
    scheme: &S,
    test: &crate::mol::Ensemble,
    seeds: &[u64],
) -> Result<SchemeEvaluation, MetricsError> {
    if seeds.len() < 3 {
        return Err(MetricsError::TooFewSeeds(seeds.len()));
    }
    if test.n_frames() == 0 {
        return Err(MetricsError::EmptyTestSet);
    }
    let topology = test.topology();
    let mask = crate::mol::heavy_atom_mask(topology);
    let elements = topology.elements();
    let reference = BondGraph::from_topology(topology);
    let n_frames = test.n_frames() as f64;

    let mut ramachandran_true = RamachandranHistogram::new();
    for frame in test.frames() {
        for &(phi, psi) in &phi_psi(frame, topology)?.pairs {
            ramachandran_true.record(phi, psi);
        }
    }

    let mut rmsd_by_seed = Vec::with_capacity(seeds.len());
    let mut ged_by_seed = Vec::with_capacity(seeds.len());
    let mut clash_by_seed = Vec::with_capacity(seeds.len());
    let mut ramachandran_generated = RamachandranHistogram::new();
    for &seed in seeds {
        let mut rmsd_sum = 0.0;
        let mut ged_sum = 0.0;
        let mut clash_sum = 0.0;
        for frame in test.frames() {
            let recon = scheme.reconstruct(frame, seed)?;
            rmsd_sum += rmsd(frame, &recon, &mask)?;
            let inferred = infer_bonds(&recon, &elements)?;
            ged_sum += ged_normalized(&reference, &inferred, reference.n_edges())?;
            clash_sum += steric_clash_score(&recon, topology, CLASH_THRESHOLD)?;
            for &(phi, psi) in &phi_psi(&recon, topology)?.pairs {
                ramachandran_generated.record(phi, psi);
            }
        }
        rmsd_by_seed.push(rmsd_sum / n_frames);
        ged_by_seed.push(ged_sum / n_frames);
        clash_by_seed.push(clash_sum / n_frames);
    }

    let (rmsd_mean, rmsd_std) = mean_and_std(&rmsd_by_seed);
    let (ged_norm_mean, ged_norm_std) = mean_and_std(&ged_by_seed);
    let (clash_mean, clash_std) = mean_and_std(&clash_by_seed);
    Ok(SchemeEvaluation {
        report: MetricsReport {
            rmsd_mean,
            rmsd_std,
            ged_norm_mean,
            ged_norm_std,
            clash_mean,
            clash_std,
            n_samples: test.n_frames() * seeds.len(),
        },
        ramachandran_true,
        ramachandran_generated,
    })
}
