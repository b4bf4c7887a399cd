//! Molecular domain types shared by every stage of the toolkit.
//!
//! Coordinates are always Cartesian and in Angstrom. A [`Topology`]
//! describes the static structure (atoms, bonds, residues) of one level of
//! resolution; a [`Conformation`] is one frame of coordinates at that level;
//! an [`Ensemble`] bundles a topology with many frames of the same shape.

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;
use std::ops::Range;
use std::sync::OnceLock;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum MolError {
    #[error("empty selection")]
    EmptySelection,
    #[error("particle index {index} out of range for {count} particles")]
    IndexOutOfRange { index: usize, count: usize },
    #[error("{given} weights given for a selection of {needed}")]
    WeightCountMismatch { given: usize, needed: usize },
    #[error("weights must be nonnegative with a positive sum")]
    BadWeights,
    #[error("bond ({a}, {b}) references a missing atom (topology has {count})")]
    BondOutOfRange { a: usize, b: usize, count: usize },
    #[error("bond ({0}, {0}) connects an atom to itself")]
    SelfBond(usize),
    #[error("duplicate bond ({0}, {1})")]
    DuplicateBond(usize, usize),
    #[error("residue indices must start at 0 and be contiguous and non-decreasing (atom {0})")]
    ResidueOrder(usize),
    #[error("topology must contain at least one atom")]
    EmptyTopology,
    #[error("conformation must contain at least one particle")]
    EmptyConformation,
    #[error("coordinate of particle {0} is not finite")]
    NonFiniteCoord(usize),
    #[error("conformation has {actual} particles, topology has {expected}")]
    ParticleCountMismatch { expected: usize, actual: usize },
    #[error("frame {frame} is at level {actual}, expected level {expected}")]
    MixedLevels { frame: usize, expected: usize, actual: usize },
    #[error("frame {frame} has {actual} particles, expected {expected}")]
    MixedFrameSizes { frame: usize, expected: usize, actual: usize },
    #[error("unknown element symbol {0:?}")]
    UnknownElement(String),
    #[error("unknown residue template {0:?}")]
    UnknownTemplate(String),
}

/// Chemical element of one particle. Proteins only need a handful, plus a
/// synthetic `Bead` kind for coarse-grained pseudo-particles.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Element {
    H,
    C,
    N,
    O,
    S,
    Bead,
}

pub const ELEMENT_KINDS: usize = 6;

static RADII: OnceLock<[f64; ELEMENT_KINDS]> = OnceLock::new();

fn radii_table() -> &'static [f64; ELEMENT_KINDS] {
    RADII.get_or_init(|| {
        let mut table = [f64::NAN; ELEMENT_KINDS];
        for line in include_str!("../data/covalent_radii.csv").lines() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (symbol, radius) = line
                .split_once(',')
                .expect("covalent_radii.csv: rows are symbol,radius");
            let element = Element::from_symbol(symbol.trim())
                .expect("covalent_radii.csv: unknown element symbol");
            table[element as usize] = radius
                .trim()
                .parse::<f64>()
                .expect("covalent_radii.csv: radius must be a number");
        }
        assert!(
            table.iter().all(|r| r.is_finite()),
            "covalent_radii.csv: missing an element row"
        );
        table
    })
}

impl Element {
    pub fn from_symbol(symbol: &str) -> Option<Self> {
        match symbol.to_ascii_uppercase().as_str() {
            "H" => Some(Element::H),
            "C" => Some(Element::C),
            "N" => Some(Element::N),
            "O" => Some(Element::O),
            "S" => Some(Element::S),
            "BD" => Some(Element::Bead),
            _ => None,
        }
    }

    pub fn symbol(self) -> &'static str {
        match self {
            Element::H => "H",
            Element::C => "C",
            Element::N => "N",
            Element::O => "O",
            Element::S => "S",
            Element::Bead => "BD",
        }
    }

    /// Single-bond covalent radius in Angstrom, from the bundled table.
    /// The synthetic bead kind has radius zero so bead levels never grow
    /// inferred bonds.
    pub fn covalent_radius(self) -> f64 {
        radii_table()[self as usize]
    }

    /// Atomic mass in unified mass units; beads carry a placeholder unit mass.
    pub fn mass(self) -> f64 {
        match self {
            Element::H => 1.008,
            Element::C => 12.011,
            Element::N => 14.007,
            Element::O => 15.999,
            Element::S => 32.06,
            Element::Bead => 1.0,
        }
    }

    pub fn is_hydrogen(self) -> bool {
        self == Element::H
    }

    /// Dense index in `0..ELEMENT_KINDS`, used for embedding lookups.
    pub fn kind_index(self) -> usize {
        self as usize
    }
}

/// One atom (or pseudo-particle) of a topology.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Atom {
    pub element: Element,
    pub name: String,
    pub residue_index: usize,
    pub residue_type: String,
}

impl Atom {
    pub fn new(
        element: Element,
        name: impl Into<String>,
        residue_index: usize,
        residue_type: impl Into<String>,
    ) -> Self {
        Atom {
            element,
            name: name.into(),
            residue_index,
            residue_type: residue_type.into(),
        }
    }
}

/// Static structure of one resolution level: an ordered atom list, a bond
/// list over atom indices, and residue bookkeeping.
///
/// Bonds are stored as `(min, max)` pairs, deduplicated and sorted, so two
/// topologies describing the same structure compare equal.
#[derive(Clone, Debug, PartialEq)]
pub struct Topology {
    atoms: Vec<Atom>,
    bonds: Vec<(usize, usize)>,
    residue_spans: Vec<Range<usize>>,
}

impl Topology {
    pub fn new(atoms: Vec<Atom>, bonds: Vec<(usize, usize)>) -> Result<Self, MolError> {
        if atoms.is_empty() {
            return Err(MolError::EmptyTopology);
        }
        let n = atoms.len();
        let mut normalized = BTreeSet::new();
        for &(a, b) in &bonds {
            if a >= n || b >= n {
                return Err(MolError::BondOutOfRange { a, b, count: n });
            }
            if a == b {
                return Err(MolError::SelfBond(a));
            }
            let pair = (a.min(b), a.max(b));
            if !normalized.insert(pair) {
                return Err(MolError::DuplicateBond(pair.0, pair.1));
            }
        }
        let mut residue_spans: Vec<Range<usize>> = Vec::new();
        for (i, atom) in atoms.iter().enumerate() {
            let next_expected = residue_spans.len();
            if atom.residue_index == next_expected {
                residue_spans.push(i..i + 1);
            } else if atom.residue_index + 1 == next_expected {
                residue_spans.last_mut().unwrap().end = i + 1;
            } else {
                return Err(MolError::ResidueOrder(i));
            }
        }
        Ok(Topology {
            atoms,
            bonds: normalized.into_iter().collect(),
            residue_spans,
        })
    }

    pub fn n_atoms(&self) -> usize {
        self.atoms.len()
    }

    pub fn n_residues(&self) -> usize {
        self.residue_spans.len()
    }

    pub fn atoms(&self) -> &[Atom] {
        &self.atoms
    }

    pub fn atom(&self, i: usize) -> &Atom {
        &self.atoms[i]
    }

    /// Bonds as sorted, deduplicated `(min, max)` index pairs.
    pub fn bonds(&self) -> &[(usize, usize)] {
        &self.bonds
    }

    pub fn residue_atoms(&self, residue: usize) -> Range<usize> {
        self.residue_spans[residue].clone()
    }

    pub fn elements(&self) -> Vec<Element> {
        self.atoms.iter().map(|a| a.element).collect()
    }

    /// Find an atom by name within one residue.
    pub fn find_in_residue(&self, residue: usize, name: &str) -> Option<usize> {
        self.residue_atoms(residue).find(|&i| self.atoms[i].name == name)
    }
}

/// One frame of coordinates at a given resolution level (0 = fine-grained).
#[derive(Clone, Debug)]
pub struct Conformation {
    coords: Array2<f64>,
    level: usize,
}

impl Conformation {
    pub fn new(coords: Array2<f64>, level: usize) -> Result<Self, MolError> {
        if coords.nrows() == 0 {
            return Err(MolError::EmptyConformation);
        }
        assert_eq!(coords.ncols(), 3, "coordinates are n x 3");
        for (i, row) in coords.rows().into_iter().enumerate() {
            if !row.iter().all(|v| v.is_finite()) {
                return Err(MolError::NonFiniteCoord(i));
            }
        }
        Ok(Conformation { coords, level })
    }

    pub fn from_rows(rows: &[[f64; 3]], level: usize) -> Result<Self, MolError> {
        let mut coords = Array2::zeros((rows.len(), 3));
        for (i, r) in rows.iter().enumerate() {
            coords[[i, 0]] = r[0];
            coords[[i, 1]] = r[1];
            coords[[i, 2]] = r[2];
        }
        Conformation::new(coords, level)
    }

    pub fn n_particles(&self) -> usize {
        self.coords.nrows()
    }

    pub fn level(&self) -> usize {
        self.level
    }

    pub fn coords(&self) -> &Array2<f64> {
        &self.coords
    }

    pub fn position(&self, i: usize) -> [f64; 3] {
        [self.coords[[i, 0]], self.coords[[i, 1]], self.coords[[i, 2]]]
    }

    pub fn distance(&self, i: usize, j: usize) -> f64 {
        let a = self.position(i);
        let b = self.position(j);
        ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
    }

    /// Apply a rigid motion `x -> R x + t`, keeping the level.
    pub fn rigid_transformed(&self, rotation: &[[f64; 3]; 3], translation: [f64; 3]) -> Self {
        let mut out = self.coords.clone();
        for mut row in out.rows_mut() {
            let x = [row[0], row[1], row[2]];
            for d in 0..3 {
                row[d] = rotation[d][0] * x[0]
                    + rotation[d][1] * x[1]
                    + rotation[d][2] * x[2]
                    + translation[d];
            }
        }
        Conformation {
            coords: out,
            level: self.level,
        }
    }

    pub fn max_coord_delta(&self, other: &Conformation) -> f64 {
        assert_eq!(self.coords.dim(), other.coords.dim());
        self.coords
            .iter()
            .zip(other.coords.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// A topology plus frames of matching shape, all at one resolution level.
#[derive(Clone, Debug)]
pub struct Ensemble {
    topology: Topology,
    frames: Vec<Conformation>,
}

impl Ensemble {
    pub fn new(topology: Topology, frames: Vec<Conformation>) -> Result<Self, MolError> {
        let level = frames.first().map(|f| f.level()).unwrap_or(0);
        for (i, frame) in frames.iter().enumerate() {
            if frame.n_particles() != topology.n_atoms() {
                return Err(MolError::MixedFrameSizes {
                    frame: i,
                    expected: topology.n_atoms(),
                    actual: frame.n_particles(),
                });
            }
            if frame.level() != level {
                return Err(MolError::MixedLevels {
                    frame: i,
                    expected: level,
                    actual: frame.level(),
                });
            }
        }
        Ok(Ensemble { topology, frames })
    }

    pub fn topology(&self) -> &Topology {
        &self.topology
    }

    pub fn frames(&self) -> &[Conformation] {
        &self.frames
    }

    pub fn frame(&self, i: usize) -> &Conformation {
        &self.frames[i]
    }

    pub fn n_frames(&self) -> usize {
        self.frames.len()
    }

    pub fn level(&self) -> usize {
        self.frames.first().map(|f| f.level()).unwrap_or(0)
    }

    /// New ensemble holding the selected frames (same topology).
    pub fn subset(&self, indices: &[usize]) -> Result<Self, MolError> {
        let mut frames = Vec::with_capacity(indices.len());
        for &i in indices {
            if i >= self.frames.len() {
                return Err(MolError::IndexOutOfRange {
                    index: i,
                    count: self.frames.len(),
                });
            }
            frames.push(self.frames[i].clone());
        }
        Ensemble::new(self.topology.clone(), frames)
    }
}

/// Per-atom flags marking everything that is not hydrogen.
pub fn heavy_atom_mask(topology: &Topology) -> Vec<bool> {
    topology
        .atoms()
        .iter()
        .map(|a| !a.element.is_hydrogen())
        .collect()
}

/// Weighted geometric center of a particle selection.
///
/// `weights`, when given, runs parallel to `indices`; omitting it means a
/// plain mean. Weights must be nonnegative and sum to something positive.
pub fn center_of(
    conformation: &Conformation,
    indices: &[usize],
    weights: Option<&[f64]>,
) -> Result<[f64; 3], MolError> {
    if indices.is_empty() {
        return Err(MolError::EmptySelection);
    }
    let n = conformation.n_particles();
    for &i in indices {
        if i >= n {
            return Err(MolError::IndexOutOfRange { index: i, count: n });
        }
    }
    if let Some(w) = weights {
        if w.len() != indices.len() {
            return Err(MolError::WeightCountMismatch {
                given: w.len(),
                needed: indices.len(),
            });
        }
        if w.iter().any(|&x| x < 0.0 || !x.is_finite()) {
            return Err(MolError::BadWeights);
        }
    }
    let mut total = 0.0;
    let mut acc = [0.0; 3];
    for (k, &i) in indices.iter().enumerate() {
        let w = weights.map(|w| w[k]).unwrap_or(1.0);
        let p = conformation.position(i);
        for d in 0..3 {
            acc[d] += w * p[d];
        }
        total += w;
    }
    if total <= 0.0 {
        return Err(MolError::BadWeights);
    }
    Ok([acc[0] / total, acc[1] / total, acc[2] / total])
}

/// Atom names and elements of one bundled residue template.
pub fn residue_template(residue: &str) -> Result<Vec<(String, Element)>, MolError> {
    let mut atoms = Vec::new();
    for line in include_str!("../data/residue_templates.txt").lines() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut fields = line.split_whitespace();
        let res = fields.next().unwrap_or_default();
        let name = fields.next().unwrap_or_default();
        let symbol = fields.next().unwrap_or_default();
        if res == residue {
            let element = Element::from_symbol(symbol)
                .ok_or_else(|| MolError::UnknownElement(symbol.to_string()))?;
            atoms.push((name.to_string(), element));
        }
    }
    if atoms.is_empty() {
        return Err(MolError::UnknownTemplate(residue.to_string()));
    }
    Ok(atoms)
}

/// Topology for a coarse level: `n_beads` bead particles in one pseudo
/// residue, connected by the given bead-bead bonds.
pub fn bead_topology(n_beads: usize, bonds: Vec<(usize, usize)>) -> Result<Topology, MolError> {
    let atoms = (0..n_beads)
        .map(|i| Atom {
            element: Element::Bead,
            name: format!("B{i}"),
            residue_index: 0,
            residue_type: "CGB".to_string(),
        })
        .collect();
    Topology::new(atoms, bonds)
}

/// Deterministic test-grade rotation matrix from an axis (normalized
/// internally) and an angle in radians.
pub fn rotation_about(axis: [f64; 3], angle: f64) -> [[f64; 3]; 3] {
    let norm = (axis[0].powi(2) + axis[1].powi(2) + axis[2].powi(2)).sqrt();
    assert!(norm > 0.0, "rotation axis must be nonzero");
    let (x, y, z) = (axis[0] / norm, axis[1] / norm, axis[2] / norm);
    let (s, c) = angle.sin_cos();
    let t = 1.0 - c;
    [
        [t * x * x + c, t * x * y - s * z, t * x * z + s * y],
        [t * x * y + s * z, t * y * y + c, t * y * z - s * x],
        [t * x * z - s * y, t * y * z + s * x, t * z * z + c],
    ]
}
