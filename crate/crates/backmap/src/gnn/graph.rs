//! Directed interaction graphs over particle coordinates.

use crate::gnn::GnnError;
use ndarray::Array2;
use std::collections::{BTreeSet, VecDeque};

/// Directed edge list in deterministic lexicographic `(source, target)`
/// order. Distance-cutoff construction keeps a pair `(i, j)` iff
/// `i != j` and `distance(i, j) < cutoff`, which is symmetric, so every
/// edge appears in both directions.
#[derive(Clone, Debug)]
pub struct EdgeList {
    pairs: Vec<(usize, usize)>,
    cutoff: f64,
}

/// All unordered pairs within `order` hops of each other in a bond graph,
/// found by breadth-first search from every node.
pub fn hop_pairs(
    n_particles: usize,
    bonds: &[(usize, usize)],
    order: usize,
) -> Vec<(usize, usize)> {
    let mut adjacency = vec![Vec::new(); n_particles];
    for &(a, b) in bonds {
        adjacency[a].push(b);
        adjacency[b].push(a);
    }
    let mut pairs = BTreeSet::new();
    if order == 0 {
        return Vec::new();
    }
    for start in 0..n_particles {
        let mut depth = vec![usize::MAX; n_particles];
        depth[start] = 0;
        let mut queue = VecDeque::from([start]);
        while let Some(u) = queue.pop_front() {
            if depth[u] == order {
                continue;
            }
            for &v in &adjacency[u] {
                if depth[v] == usize::MAX {
                    depth[v] = depth[u] + 1;
                    queue.push_back(v);
                }
            }
        }
        for (v, &d) in depth.iter().enumerate() {
            if v != start && d != usize::MAX && d <= order {
                pairs.insert((start.min(v), start.max(v)));
            }
        }
    }
    pairs.into_iter().collect()
}

impl EdgeList {
    /// Pairs strictly within `cutoff`, both directions.
    pub fn from_cutoff(coords: &Array2<f64>, cutoff: f64) -> Result<Self, GnnError> {
        EdgeList::from_cutoff_and_pairs(coords, cutoff, &[])
    }

    /// Distance-cutoff edges joined with a static pair set (for multi-hop
    /// bond-graph neighborhoods that must stay connected past the cutoff).
    pub fn from_cutoff_and_pairs(
        coords: &Array2<f64>,
        cutoff: f64,
        extra_pairs: &[(usize, usize)],
    ) -> Result<Self, GnnError> {
        if !(cutoff > 0.0) || !cutoff.is_finite() {
            return Err(GnnError::BadCutoff(cutoff));
        }
        let n = coords.nrows();
        let mut members = BTreeSet::new();
        for i in 0..n {
            for j in (i + 1)..n {
                let mut d2 = 0.0;
                for k in 0..3 {
                    let delta = coords[[i, k]] - coords[[j, k]];
                    d2 += delta * delta;
                }
                if d2.sqrt() < cutoff {
                    members.insert((i, j));
                }
            }
        }
        for &(a, b) in extra_pairs {
            if a >= n || b >= n {
                return Err(GnnError::PairOutOfRange { a, b, count: n });
            }
            if a != b {
                members.insert((a.min(b), a.max(b)));
            }
        }
        let mut pairs = Vec::with_capacity(members.len() * 2);
        for &(i, j) in &members {
            pairs.push((i, j));
            pairs.push((j, i));
        }
        pairs.sort_unstable();
        Ok(EdgeList { pairs, cutoff })
    }

    /// Distance-cutoff edges plus all pairs within `order` hops of the bond
    /// graph.
    pub fn with_multi_hop(
        coords: &Array2<f64>,
        cutoff: f64,
        bonds: &[(usize, usize)],
        order: usize,
    ) -> Result<Self, GnnError> {
        let extra = hop_pairs(coords.nrows(), bonds, order);
        EdgeList::from_cutoff_and_pairs(coords, cutoff, &extra)
    }

    pub fn cutoff(&self) -> f64 {
        self.cutoff
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn pairs(&self) -> &[(usize, usize)] {
        &self.pairs
    }

    pub fn sources(&self) -> Vec<usize> {
        self.pairs.iter().map(|&(s, _)| s).collect()
    }

    pub fn targets(&self) -> Vec<usize> {
        self.pairs.iter().map(|&(_, t)| t).collect()
    }

    /// Euclidean edge lengths as an `(n_edges, 1)` column.
    pub fn distances(&self, coords: &Array2<f64>) -> Array2<f64> {
        let mut out = Array2::zeros((self.pairs.len(), 1));
        for (e, &(i, j)) in self.pairs.iter().enumerate() {
            let mut d2 = 0.0;
            for k in 0..3 {
                let delta = coords[[i, k]] - coords[[j, k]];
                d2 += delta * delta;
            }
            out[[e, 0]] = d2.sqrt();
        }
        out
    }

    /// Relative source-minus-target positions, one `(n_edges, 1)` column per
    /// Cartesian axis.
    pub fn relative_columns(&self, coords: &Array2<f64>) -> [Array2<f64>; 3] {
        let mut out = [
            Array2::zeros((self.pairs.len(), 1)),
            Array2::zeros((self.pairs.len(), 1)),
            Array2::zeros((self.pairs.len(), 1)),
        ];
        for (e, &(src, tgt)) in self.pairs.iter().enumerate() {
            for k in 0..3 {
                out[k][[e, 0]] = coords[[src, k]] - coords[[tgt, k]];
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn cutoff_edges_are_symmetric_and_irreflexive() {
        let coords = array![
            [0.0, 0.0, 0.0],
            [1.0, 0.0, 0.0],
            [5.0, 0.0, 0.0],
            [5.5, 0.0, 0.0],
        ];
        let edges = EdgeList::from_cutoff(&coords, 2.0).unwrap();
        assert_eq!(edges.pairs(), &[(0, 1), (1, 0), (2, 3), (3, 2)]);
        for &(s, t) in edges.pairs() {
            assert_ne!(s, t);
            assert!(edges.pairs().contains(&(t, s)));
        }
    }

    #[test]
    fn cutoff_is_strict() {
        let coords = array![[0.0, 0.0, 0.0], [2.0, 0.0, 0.0]];
        let edges = EdgeList::from_cutoff(&coords, 2.0).unwrap();
        assert!(edges.is_empty());
    }

    #[test]
    fn multi_hop_connects_chain_neighbors_past_cutoff() {
        // Linear chain with 3.0 A spacing; cutoff excludes everything.
        let coords = array![
            [0.0, 0.0, 0.0],
            [3.0, 0.0, 0.0],
            [6.0, 0.0, 0.0],
            [9.0, 0.0, 0.0],
        ];
        let bonds = [(0, 1), (1, 2), (2, 3)];
        let edges = EdgeList::with_multi_hop(&coords, 1.0, &bonds, 2).unwrap();
        let undirected: Vec<(usize, usize)> = edges
            .pairs()
            .iter()
            .filter(|&&(s, t)| s < t)
            .copied()
            .collect();
        assert_eq!(undirected, vec![(0, 1), (0, 2), (1, 2), (1, 3), (2, 3)]);
    }

    #[test]
    fn hop_order_zero_adds_nothing() {
        let coords = array![[0.0, 0.0, 0.0], [3.0, 0.0, 0.0]];
        let edges = EdgeList::with_multi_hop(&coords, 1.0, &[(0, 1)], 0).unwrap();
        assert!(edges.is_empty());
    }

    #[test]
    fn distances_match_coordinates() {
        let coords = array![[0.0, 0.0, 0.0], [3.0, 4.0, 0.0]];
        let edges = EdgeList::from_cutoff(&coords, 10.0).unwrap();
        let d = edges.distances(&coords);
        assert_eq!(d.dim(), (2, 1));
        assert!((d[[0, 0]] - 5.0).abs() < 1e-12);
        assert!((d[[1, 0]] - 5.0).abs() < 1e-12);
    }

    #[test]
    fn rejects_nonpositive_cutoff() {
        let coords = array![[0.0, 0.0, 0.0]];
        assert!(EdgeList::from_cutoff(&coords, 0.0).is_err());
        assert!(EdgeList::from_cutoff(&coords, -1.0).is_err());
    }
}
