//! Plain-text persistence for coarse-grain mappings.
//!
//! The format is line-oriented and versioned:
//!
//! ```text
//! # cgmapping v1
//! from_level 0
//! n_coarse 2
//! 0 14.007
//! 0 12.011
//! 1 12.011
//! ```
//!
//! After the two header fields, line `i` carries particle `i`'s bead index
//! and its weight in the bead average. Blank lines and further `#` comments
//! are ignored.

use std::fs;
use std::path::Path;

use super::{atomic_write, IoError};
use crate::coarsen::CGMapping;

const HEADER: &str = "# cgmapping v1";

/// Render a mapping in the versioned text format.
pub fn mapping_string(mapping: &CGMapping) -> String {
    let mut out = String::new();
    out.push_str(HEADER);
    out.push('\n');
    out.push_str(&format!("from_level {}\n", mapping.from_level()));
    out.push_str(&format!("n_coarse {}\n", mapping.n_coarse()));
    for (&bead, &weight) in mapping.assignment().iter().zip(mapping.weights()) {
        out.push_str(&format!("{bead} {weight}\n"));
    }
    out
}

/// Write a mapping to disk atomically.
pub fn write_mapping(mapping: &CGMapping, path: &Path) -> Result<(), IoError> {
    atomic_write(path, mapping_string(mapping).as_bytes())
}

/// Parse the versioned mapping text format.
pub fn parse_mapping_str(text: &str, path: &Path) -> Result<CGMapping, IoError> {
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l.trim()));
    let (lineno, first) = lines
        .next()
        .ok_or_else(|| IoError::content(path, "empty mapping file"))?;
    if first != HEADER {
        return Err(IoError::parse(
            path,
            lineno,
            format!("expected header {HEADER:?}, found {first:?}"),
        ));
    }
    let mut from_level: Option<usize> = None;
    let mut n_coarse: Option<usize> = None;
    let mut assignment = Vec::new();
    let mut weights = Vec::new();
    for (lineno, line) in lines {
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut parts = line.split_whitespace();
        let (a, b) = (parts.next(), parts.next());
        if parts.next().is_some() {
            return Err(IoError::parse(path, lineno, "more than two fields"));
        }
        match (a, b) {
            (Some("from_level"), Some(v)) => {
                from_level = Some(v.parse().map_err(|_| {
                    IoError::parse(path, lineno, format!("bad from_level {v:?}"))
                })?);
            }
            (Some("n_coarse"), Some(v)) => {
                n_coarse = Some(v.parse().map_err(|_| {
                    IoError::parse(path, lineno, format!("bad n_coarse {v:?}"))
                })?);
            }
            (Some(bead), Some(weight)) => {
                assignment.push(bead.parse().map_err(|_| {
                    IoError::parse(path, lineno, format!("bad bead index {bead:?}"))
                })?);
                weights.push(weight.parse().map_err(|_| {
                    IoError::parse(path, lineno, format!("bad weight {weight:?}"))
                })?);
            }
            _ => {
                return Err(IoError::parse(
                    path,
                    lineno,
                    format!("expected two fields, found {line:?}"),
                ));
            }
        }
    }
    let from_level =
        from_level.ok_or_else(|| IoError::content(path, "missing from_level"))?;
    let n_coarse = n_coarse.ok_or_else(|| IoError::content(path, "missing n_coarse"))?;
    CGMapping::new(assignment, weights, n_coarse, from_level)
        .map_err(|e| IoError::content(path, e.to_string()))
}

/// Read a mapping file from disk.
pub fn parse_mapping(path: &Path) -> Result<CGMapping, IoError> {
    let text = fs::read_to_string(path).map_err(|e| IoError::file(path, e))?;
    parse_mapping_str(&text, path)
}
