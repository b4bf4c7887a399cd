//! Fixed-column PDB reading and writing.
//!
//! Multi-model files carry one frame per `MODEL`/`ENDMDL` block; bonds
//! travel in `CONECT` records after the last model. A `REMARK  42 LEVEL n`
//! line preserves the resolution level of the stored frames (0 = fine),
//! so coarse bead ensembles round-trip exactly. Coordinates keep the
//! format's three decimals.

use std::fs;
use std::path::Path;

use ndarray::Array2;

use super::{atomic_write, IoError};
use crate::mol::{Atom, Conformation, Element, Topology};

/// Largest atom count expressible in the 5-digit serial column.
const MAX_SERIAL: usize = 99_999;

/// Largest residue number expressible in the 4-digit resSeq column.
const MAX_RESSEQ: usize = 9_999;

/// Render a topology and its frames as PDB text.
pub fn pdb_string(topology: &Topology, frames: &[Conformation]) -> Result<String, IoError> {
    if frames.is_empty() {
        return Err(IoError::NoFrames);
    }
    let n = topology.n_atoms();
    if n > MAX_SERIAL {
        return Err(IoError::BadConfig(format!(
            "{n} atoms exceed the PDB serial column ({MAX_SERIAL})"
        )));
    }
    if topology.n_residues() > MAX_RESSEQ {
        return Err(IoError::BadConfig(format!(
            "{} residues exceed the PDB resSeq column ({MAX_RESSEQ})",
            topology.n_residues()
        )));
    }
    let level = frames[0].level();
    for (f, frame) in frames.iter().enumerate() {
        if frame.n_particles() != n {
            return Err(IoError::FrameMismatch {
                frame: f,
                expected: n,
                actual: frame.n_particles(),
            });
        }
        if frame.level() != level {
            return Err(IoError::BadConfig(format!(
                "frame {f} sits at level {}, frame 0 at level {level}",
                frame.level()
            )));
        }
    }
    let mut out = String::new();
    out.push_str(&format!("REMARK  42 LEVEL {level}\n"));
    for (f, frame) in frames.iter().enumerate() {
        out.push_str(&format!("MODEL     {:>4}\n", f + 1));
        for i in 0..n {
            let atom = topology.atom(i);
            let p = frame.position(i);
            for (axis, v) in ["x", "y", "z"].iter().zip(p) {
                if !(-999.999..=9999.999).contains(&v) {
                    return Err(IoError::BadConfig(format!(
                        "frame {f} atom {i}: {axis} = {v} leaves the fixed-column range"
                    )));
                }
            }
            // Names of up to three characters start in column 14, the
            // standard alignment for single-letter element symbols.
            let name = if atom.name.len() <= 3 {
                format!(" {:<3}", atom.name)
            } else {
                format!("{:<4}", atom.name)
            };
            out.push_str(&format!(
                "ATOM  {:>5} {} {:>3} A{:>4}    {:8.3}{:8.3}{:8.3}{:6.2}{:6.2}          {:>2}\n",
                i + 1,
                name,
                atom.residue_type,
                atom.residue_index + 1,
                p[0],
                p[1],
                p[2],
                1.0,
                0.0,
                atom.element.symbol(),
            ));
        }
        out.push_str("ENDMDL\n");
    }
    for &(a, b) in topology.bonds() {
        out.push_str(&format!("CONECT{:>5}{:>5}\n", a + 1, b + 1));
    }
    out.push_str("END\n");
    Ok(out)
}

/// Write a topology and its frames to a PDB file atomically.
pub fn write_pdb(topology: &Topology, frames: &[Conformation], path: &Path) -> Result<(), IoError> {
    let text = pdb_string(topology, frames)?;
    atomic_write(path, text.as_bytes())
}

fn field(line: &str, range: std::ops::Range<usize>) -> &str {
    let bytes = line.as_bytes();
    let start = range.start.min(bytes.len());
    let end = range.end.min(bytes.len());
    line[start..end].trim()
}

struct PendingAtom {
    serial: usize,
    name: String,
    residue_type: String,
    res_seq: i64,
    element: Element,
}

fn parse_atom_line(path: &Path, lineno: usize, line: &str) -> Result<(PendingAtom, [f64; 3]), IoError> {
    if line.len() < 54 {
        return Err(IoError::parse(
            path,
            lineno,
            "ATOM record shorter than the coordinate columns",
        ));
    }
    let serial: usize = field(line, 6..11).parse().map_err(|_| {
        IoError::parse(path, lineno, format!("bad serial {:?}", field(line, 6..11)))
    })?;
    let name = field(line, 12..16).to_string();
    if name.is_empty() {
        return Err(IoError::parse(path, lineno, "empty atom name"));
    }
    let residue_type = field(line, 17..20).to_string();
    let res_seq: i64 = field(line, 22..26).parse().map_err(|_| {
        IoError::parse(path, lineno, format!("bad resSeq {:?}", field(line, 22..26)))
    })?;
    let mut coords = [0.0; 3];
    for (d, range) in [30..38, 38..46, 46..54].into_iter().enumerate() {
        let text = field(line, range);
        coords[d] = text.parse().map_err(|_| {
            IoError::parse(path, lineno, format!("bad coordinate {text:?}"))
        })?;
    }
    let element_field = field(line, 76..78);
    let element = if element_field.is_empty() {
        // Fall back on the atom name: full match first, then its first
        // character (so CA and CB read as carbon).
        Element::from_symbol(&name)
            .or_else(|| Element::from_symbol(&name[..1]))
            .ok_or_else(|| {
                IoError::parse(
                    path,
                    lineno,
                    format!("no element column and name {name:?} is not one"),
                )
            })?
    } else {
        Element::from_symbol(element_field).ok_or_else(|| {
            IoError::parse(path, lineno, format!("unknown element {element_field:?}"))
        })?
    };
    Ok((
        PendingAtom {
            serial,
            name,
            residue_type,
            res_seq,
            element,
        },
        coords,
    ))
}

/// Parse PDB text into a topology and one conformation per model.
///
/// `path` labels error messages only; use [`parse_pdb`] to read a file.
pub fn parse_pdb_str(
    text: &str,
    path: &Path,
) -> Result<(Topology, Vec<Conformation>), IoError> {
    let mut level = 0usize;
    let mut atoms: Vec<PendingAtom> = Vec::new();
    let mut model_coords: Vec<Vec<[f64; 3]>> = Vec::new();
    let mut current: Option<Vec<[f64; 3]>> = None;
    let mut first_model_done = false;
    let mut conect: Vec<(usize, usize, usize)> = Vec::new(); // with line numbers
    let mut model_count = 0usize;

    for (idx, line) in text.lines().enumerate() {
        let lineno = idx + 1;
        let record = if line.len() >= 6 { &line[..6] } else { line };
        match record.trim_end() {
            "REMARK" => {
                let rest = field(line, 6..line.len());
                if let Some(value) = rest
                    .strip_prefix("42 LEVEL")
                    .map(str::trim)
                {
                    level = value.parse().map_err(|_| {
                        IoError::parse(path, lineno, format!("bad level {value:?}"))
                    })?;
                }
            }
            "MODEL" => {
                if current.is_some() {
                    return Err(IoError::parse(
                        path,
                        lineno,
                        "MODEL opened before the previous one ended",
                    ));
                }
                model_count += 1;
                current = Some(Vec::new());
            }
            "ENDMDL" => {
                let coords = current.take().ok_or_else(|| {
                    IoError::parse(path, lineno, "ENDMDL without an open MODEL")
                })?;
                if first_model_done && coords.len() != atoms.len() {
                    return Err(IoError::parse(
                        path,
                        lineno,
                        format!(
                            "model {model_count} holds {} atoms, model 1 holds {}",
                            coords.len(),
                            atoms.len()
                        ),
                    ));
                }
                first_model_done = true;
                model_coords.push(coords);
            }
            "ATOM" | "HETATM" => {
                let (atom, xyz) = parse_atom_line(path, lineno, line)?;
                let frame = current.get_or_insert_with(|| {
                    model_count += 1;
                    Vec::new()
                });
                if !first_model_done {
                    atoms.push(atom);
                } else if frame.len() >= atoms.len() {
                    return Err(IoError::parse(
                        path,
                        lineno,
                        format!(
                            "model {model_count} holds more atoms than model 1 ({})",
                            atoms.len()
                        ),
                    ));
                }
                frame.push(xyz);
            }
            "CONECT" => {
                let from: usize = field(line, 6..11).parse().map_err(|_| {
                    IoError::parse(path, lineno, "bad CONECT serial")
                })?;
                for start in [11, 16, 21, 26] {
                    let partner = field(line, start..start + 5);
                    if partner.is_empty() {
                        continue;
                    }
                    let to: usize = partner.parse().map_err(|_| {
                        IoError::parse(path, lineno, format!("bad CONECT partner {partner:?}"))
                    })?;
                    conect.push((from, to, lineno));
                }
            }
            _ => {}
        }
    }
    if let Some(coords) = current.take() {
        // File without a closing ENDMDL: accept the open block as a frame.
        if first_model_done && coords.len() != atoms.len() {
            return Err(IoError::content(
                path,
                format!(
                    "model {model_count} holds {} atoms, model 1 holds {}",
                    coords.len(),
                    atoms.len()
                ),
            ));
        }
        model_coords.push(coords);
    }
    if atoms.is_empty() {
        return Err(IoError::content(path, "no ATOM records"));
    }

    // Serial -> index map from the first model; consecutive runs of one
    // resSeq value become one residue.
    let mut serial_to_index = std::collections::HashMap::new();
    for (i, atom) in atoms.iter().enumerate() {
        if serial_to_index.insert(atom.serial, i).is_some() {
            return Err(IoError::content(
                path,
                format!("duplicate atom serial {}", atom.serial),
            ));
        }
    }
    let mut residue_index = 0usize;
    let mut built = Vec::with_capacity(atoms.len());
    for (i, atom) in atoms.iter().enumerate() {
        if i > 0 && atom.res_seq != atoms[i - 1].res_seq {
            residue_index += 1;
        }
        built.push(Atom::new(
            atom.element,
            atom.name.clone(),
            residue_index,
            atom.residue_type.clone(),
        ));
    }
    let mut bonds = Vec::new();
    for (from, to, lineno) in conect {
        let a = *serial_to_index.get(&from).ok_or_else(|| {
            IoError::parse(path, lineno, format!("CONECT names unknown serial {from}"))
        })?;
        let b = *serial_to_index.get(&to).ok_or_else(|| {
            IoError::parse(path, lineno, format!("CONECT names unknown serial {to}"))
        })?;
        let pair = (a.min(b), a.max(b));
        if !bonds.contains(&pair) {
            bonds.push(pair);
        }
    }
    let topology = Topology::new(built, bonds)?;
    let mut frames = Vec::with_capacity(model_coords.len());
    for rows in model_coords {
        let mut coords = Array2::zeros((rows.len(), 3));
        for (i, row) in rows.iter().enumerate() {
            for d in 0..3 {
                coords[[i, d]] = row[d];
            }
        }
        frames.push(Conformation::new(coords, level)?);
    }
    Ok((topology, frames))
}

/// Read a PDB file from disk.
pub fn parse_pdb(path: &Path) -> Result<(Topology, Vec<Conformation>), IoError> {
    let text = fs::read_to_string(path).map_err(|e| IoError::file(path, e))?;
    parse_pdb_str(&text, path)
}
