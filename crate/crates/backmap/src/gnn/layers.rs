//! Graph layers: radial basis expansion, continuous-filter message passing,
//! and mean pooling from fine particles onto beads.

use crate::coarsen::CGMapping;
use crate::gnn::graph::EdgeList;
use crate::gnn::tape::{Tape, Var};
use crate::gnn::GnnError;
use ndarray::Array2;
use std::rc::Rc;

/// Gaussian radial basis expansion of edge distances with a smooth cosine
/// cutoff envelope.
///
/// `k` centers sit evenly on `[0, cutoff]`; each basis width equals the
/// center spacing. The envelope `0.5 (cos(pi d / cutoff) + 1)` fades features
/// smoothly to exactly zero at and beyond the cutoff.
pub fn rbf_expand(tape: &mut Tape, distances: Var, k: usize, cutoff: f64) -> Result<Var, GnnError> {
    if k == 0 {
        return Err(GnnError::BadBasisCount);
    }
    if !(cutoff > 0.0) || !cutoff.is_finite() {
        return Err(GnnError::BadCutoff(cutoff));
    }
    let d_value = tape.value(distances).clone();
    assert_eq!(d_value.ncols(), 1, "rbf_expand: distances are (n, 1)");
    let n = d_value.nrows();
    let spacing = if k > 1 { cutoff / (k - 1) as f64 } else { cutoff };
    let mut centers = Array2::zeros((n, k));
    for i in 0..n {
        for j in 0..k {
            centers[[i, j]] = spacing * j as f64;
        }
    }
    let centers = tape.leaf(centers);
    let spread = tape.broadcast_cols(distances, k);
    let diff = tape.sub(spread, centers);
    let sq = tape.mul(diff, diff);
    let scaled = tape.mul_scalar(sq, -0.5 / (spacing * spacing));
    let gauss = tape.exp(scaled);

    let phase = tape.mul_scalar(distances, std::f64::consts::PI / cutoff);
    let cosine = tape.cos(phase);
    let shifted = tape.add_scalar(cosine, 1.0);
    let envelope = tape.mul_scalar(shifted, 0.5);
    let mask = tape.leaf(d_value.mapv(|d| if d < cutoff { 1.0 } else { 0.0 }));
    let gated = tape.mul(envelope, mask);
    let gated_wide = tape.broadcast_cols(gated, k);
    Ok(tape.mul(gauss, gated_wide))
}

/// Invariant edge feature matrix: `k` RBF distance columns (identical to
/// [`rbf_expand`]) plus one chain-order column holding the sign of
/// `target - source` under the same smooth cutoff envelope.
///
/// Distances alone cannot tell a particle's forward neighbor from its
/// backward one — on a near-uniform chain both sit at the same distance —
/// so gates built from them are mirror-symmetric and cancel along the
/// chain tangent. The order column, pure connectivity metadata, breaks
/// that tie while staying exactly invariant under rigid motion. The whole
/// matrix is a function of fixed geometry, so it enters the tape as a
/// constant leaf.
pub fn edge_feature_matrix(
    distances: &Array2<f64>,
    pairs: &[(usize, usize)],
    k: usize,
    cutoff: f64,
) -> Result<Array2<f64>, GnnError> {
    if k == 0 {
        return Err(GnnError::BadBasisCount);
    }
    if !(cutoff > 0.0) || !cutoff.is_finite() {
        return Err(GnnError::BadCutoff(cutoff));
    }
    assert_eq!(distances.ncols(), 1, "edge_feature_matrix: distances are (n, 1)");
    let n = distances.nrows();
    assert_eq!(pairs.len(), n, "edge_feature_matrix: one distance per edge");
    let spacing = if k > 1 { cutoff / (k - 1) as f64 } else { cutoff };
    let mut feats = Array2::zeros((n, k + 1));
    for (i, &(s, t)) in pairs.iter().enumerate() {
        let d = distances[[i, 0]];
        let envelope = if d < cutoff {
            0.5 * ((std::f64::consts::PI * d / cutoff).cos() + 1.0)
        } else {
            0.0
        };
        for j in 0..k {
            let center = spacing * j as f64;
            let gauss = (-0.5 * (d - center) * (d - center) / (spacing * spacing)).exp();
            feats[[i, j]] = gauss * envelope;
        }
        feats[[i, k]] = (t as f64 - s as f64).signum() * envelope;
    }
    Ok(feats)
}

/// Affine layer `x W + b` for `(n, in)` inputs, `(in, out)` weights, and a
/// `(1, out)` bias row.
pub fn linear(tape: &mut Tape, x: Var, w: Var, b: Var) -> Var {
    let projected = tape.matmul(x, w);
    tape.add_row(projected, b)
}

/// Tape handles for one message-passing layer's parameters.
///
/// The filter network upsamples `k`-dimensional edge features to the node
/// feature width through a two-layer perceptron; the transform projects
/// source-node features before they are gated by the filter.
#[derive(Clone, Copy)]
pub struct ConvVars {
    pub filter_w1: Var,
    pub filter_b1: Var,
    pub filter_w2: Var,
    pub filter_b2: Var,
    pub transform_w: Var,
    pub transform_b: Var,
}

/// One continuous-filter convolution with a residual update:
///
/// `out[i] = h[i] + swish( sum over edges (src -> i) of
///            filter(edge_feats) * transform(h[src]) )`
///
/// With no incoming edges a node's output is exactly its input.
pub fn message_passing_layer(
    tape: &mut Tape,
    node_feats: Var,
    edges: &EdgeList,
    edge_feats: Var,
    params: &ConvVars,
) -> Result<Var, GnnError> {
    let (n_nodes, width) = tape.value(node_feats).dim();
    let (n_edges, k) = tape.value(edge_feats).dim();
    if n_edges != edges.len() {
        return Err(GnnError::ShapeMismatch {
            what: "edge feature rows",
            expected: edges.len(),
            actual: n_edges,
        });
    }
    let (k_w, f_w) = tape.value(params.filter_w1).dim();
    if k_w != k {
        return Err(GnnError::ShapeMismatch {
            what: "filter input width",
            expected: k,
            actual: k_w,
        });
    }
    if f_w != width {
        return Err(GnnError::ShapeMismatch {
            what: "filter output width",
            expected: width,
            actual: f_w,
        });
    }
    if tape.value(params.transform_w).dim() != (width, width) {
        return Err(GnnError::ShapeMismatch {
            what: "transform width",
            expected: width,
            actual: tape.value(params.transform_w).nrows(),
        });
    }
    for &(s, t) in edges.pairs() {
        if s >= n_nodes || t >= n_nodes {
            return Err(GnnError::PairOutOfRange {
                a: s,
                b: t,
                count: n_nodes,
            });
        }
    }

    let sources = Rc::new(edges.sources());
    let targets = Rc::new(edges.targets());
    let source_feats = tape.gather_rows(node_feats, sources);
    let transformed = linear(tape, source_feats, params.transform_w, params.transform_b);
    let hidden = linear(tape, edge_feats, params.filter_w1, params.filter_b1);
    let hidden = tape.swish(hidden);
    let filter = linear(tape, hidden, params.filter_w2, params.filter_b2);
    let messages = tape.mul(filter, transformed);
    let aggregated = tape.segment_sum(messages, targets, n_nodes);
    let update = tape.swish(aggregated);
    Ok(tape.add(node_feats, update))
}

/// Mean-pool fine-particle features onto beads: each bead's feature is the
/// plain mean over its member particles (mapping weights are for geometry,
/// not features).
pub fn pool_fg_to_cg(
    tape: &mut Tape,
    node_feats: Var,
    mapping: &CGMapping,
) -> Result<Var, GnnError> {
    let (n, width) = tape.value(node_feats).dim();
    if n != mapping.n_fine() {
        return Err(GnnError::ShapeMismatch {
            what: "pooled particle rows",
            expected: mapping.n_fine(),
            actual: n,
        });
    }
    let assignment = Rc::new(mapping.assignment().to_vec());
    let sums = tape.segment_sum(node_feats, assignment, mapping.n_coarse());
    let mut inverse_counts = Array2::zeros((mapping.n_coarse(), 1));
    for (b, count) in mapping.bead_counts().iter().enumerate() {
        inverse_counts[[b, 0]] = 1.0 / *count as f64;
    }
    let inv = tape.leaf(inverse_counts);
    let inv_wide = tape.broadcast_cols(inv, width);
    Ok(tape.mul(sums, inv_wide))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gnn::check::gradient_check;
    use ndarray::array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn scalar_rbf(d: f64, j: usize, k: usize, cutoff: f64) -> f64 {
        // Independent scalar reference for one feature entry.
        let spacing = if k > 1 { cutoff / (k - 1) as f64 } else { cutoff };
        let center = spacing * j as f64;
        let gauss = (-(d - center).powi(2) / (2.0 * spacing * spacing)).exp();
        let envelope = if d < cutoff {
            0.5 * ((std::f64::consts::PI * d / cutoff).cos() + 1.0)
        } else {
            0.0
        };
        gauss * envelope
    }

    #[test]
    fn rbf_at_zero_distance_starts_at_one() {
        let mut tape = Tape::new();
        let d = tape.leaf(array![[0.0]]);
        let feats = rbf_expand(&mut tape, d, 6, 5.0).unwrap();
        let row = tape.value(feats);
        assert!((row[[0, 0]] - 1.0).abs() < 1e-12);
        for j in 1..6 {
            assert!(row[[0, j]] < row[[0, j - 1]]);
        }
    }

    #[test]
    fn rbf_row_is_zero_at_and_beyond_cutoff() {
        let mut tape = Tape::new();
        let d = tape.leaf(array![[5.0], [7.5]]);
        let feats = rbf_expand(&mut tape, d, 6, 5.0).unwrap();
        assert!(tape.value(feats).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn rbf_matches_scalar_reference() {
        let k = 6;
        let cutoff = 5.0;
        let mut tape = Tape::new();
        let d = tape.leaf(array![[2.5], [0.7], [4.9]]);
        let feats = rbf_expand(&mut tape, d, k, cutoff).unwrap();
        for (i, &dv) in [2.5, 0.7, 4.9].iter().enumerate() {
            for j in 0..k {
                let expected = scalar_rbf(dv, j, k, cutoff);
                assert!(
                    (tape.value(feats)[[i, j]] - expected).abs() < 1e-12,
                    "feature ({i}, {j})"
                );
            }
        }
    }

    #[test]
    fn rbf_is_invariant_to_rigid_motion_of_the_frame() {
        // Features depend on distances only, so any isometry leaves them
        // unchanged up to floating-point noise.
        let coords = array![
            [0.0, 0.0, 0.0],
            [1.2, 0.3, -0.4],
            [-0.7, 2.0, 1.1],
            [2.2, -1.0, 0.5],
        ];
        let conf = crate::mol::Conformation::new(coords.clone(), 0).unwrap();
        let rot = crate::mol::rotation_about([0.3, 1.0, -0.2], 0.9);
        let moved = conf.rigid_transformed(&rot, [4.0, -2.0, 1.5]);
        let edges = EdgeList::from_cutoff(&coords, 6.0).unwrap();

        let mut tape_a = Tape::new();
        let d_a = tape_a.leaf(edges.distances(&coords));
        let f_a = rbf_expand(&mut tape_a, d_a, 6, 6.0).unwrap();
        let mut tape_b = Tape::new();
        let d_b = tape_b.leaf(edges.distances(moved.coords()));
        let f_b = rbf_expand(&mut tape_b, d_b, 6, 6.0).unwrap();

        let delta = tape_a.value(f_a) - tape_b.value(f_b);
        assert!(delta.iter().all(|d| d.abs() < 1e-9));
    }

    #[test]
    fn rbf_gradient_against_central_differences() {
        let err = gradient_check(
            &|tape, vars| {
                let feats = rbf_expand(tape, vars[0], 6, 5.0).unwrap();
                tape.sum_all(feats)
            },
            &[array![[1.3], [3.7], [0.4]]],
            1e-5,
        );
        assert!(err <= 1e-5, "max relative error {err}");
    }

    fn seeded_conv_inputs(
        rng: &mut ChaCha8Rng,
        n_nodes: usize,
        width: usize,
        k: usize,
    ) -> (Array2<f64>, Vec<Array2<f64>>) {
        let node = Array2::from_shape_fn((n_nodes, width), |_| rng.gen_range(-1.0..1.0));
        let params = vec![
            Array2::from_shape_fn((k, width), |_| rng.gen_range(-0.5..0.5)),
            Array2::from_shape_fn((1, width), |_| rng.gen_range(-0.5..0.5)),
            Array2::from_shape_fn((width, width), |_| rng.gen_range(-0.5..0.5)),
            Array2::from_shape_fn((1, width), |_| rng.gen_range(-0.5..0.5)),
            Array2::from_shape_fn((width, width), |_| rng.gen_range(-0.5..0.5)),
            Array2::from_shape_fn((1, width), |_| rng.gen_range(-0.5..0.5)),
        ];
        (node, params)
    }

    fn conv_vars(vars: &[Var]) -> ConvVars {
        ConvVars {
            filter_w1: vars[1],
            filter_b1: vars[2],
            filter_w2: vars[3],
            filter_b2: vars[4],
            transform_w: vars[5],
            transform_b: vars[6],
        }
    }

    #[test]
    fn empty_edge_list_copies_node_features() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let (node, params) = seeded_conv_inputs(&mut rng, 4, 5, 3);
        let coords = array![
            [0.0, 0.0, 0.0],
            [10.0, 0.0, 0.0],
            [20.0, 0.0, 0.0],
            [30.0, 0.0, 0.0],
        ];
        let edges = EdgeList::from_cutoff(&coords, 1.0).unwrap();
        let mut tape = Tape::new();
        let h = tape.leaf(node.clone());
        let e = tape.leaf(Array2::zeros((0, 3)));
        let mut vars = vec![h, e];
        for p in &params {
            vars.push(tape.leaf(p.clone()));
        }
        let cv = ConvVars {
            filter_w1: vars[2],
            filter_b1: vars[3],
            filter_w2: vars[4],
            filter_b2: vars[5],
            transform_w: vars[6],
            transform_b: vars[7],
        };
        let out = message_passing_layer(&mut tape, h, &edges, e, &cv).unwrap();
        assert_eq!(tape.value(out), &node);
    }

    #[test]
    fn symmetric_two_node_graph_stays_symmetric() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let width = 4;
        let k = 3;
        let (_, params) = seeded_conv_inputs(&mut rng, 2, width, k);
        let node = Array2::from_elem((2, width), 0.6);
        let coords = array![[0.0, 0.0, 0.0], [1.0, 0.0, 0.0]];
        let edges = EdgeList::from_cutoff(&coords, 2.0).unwrap();
        let mut tape = Tape::new();
        let h = tape.leaf(node);
        let dist = tape.leaf(edges.distances(&coords));
        let e = rbf_expand(&mut tape, dist, k, 2.0).unwrap();
        let vars: Vec<Var> = std::iter::once(h)
            .chain(params.iter().map(|p| tape.leaf(p.clone())))
            .collect();
        let cv = conv_vars(&vars);
        let out = message_passing_layer(&mut tape, h, &edges, e, &cv).unwrap();
        let value = tape.value(out);
        for j in 0..width {
            assert!((value[[0, j]] - value[[1, j]]).abs() < 1e-12);
        }
    }

    #[test]
    fn conv_matches_loop_reference_on_small_graph() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let n = 5;
        let width = 4;
        let k = 3;
        let (node, params) = seeded_conv_inputs(&mut rng, n, width, k);
        let coords = Array2::from_shape_fn((n, 3), |_| rng.gen_range(-2.0..2.0));
        let edges = EdgeList::from_cutoff(&coords, 3.5).unwrap();
        let edge_feats =
            Array2::from_shape_fn((edges.len(), k), |_| rng.gen_range(-1.0..1.0));

        let mut tape = Tape::new();
        let h = tape.leaf(node.clone());
        let e = tape.leaf(edge_feats.clone());
        let vars: Vec<Var> = std::iter::once(h)
            .chain(params.iter().map(|p| tape.leaf(p.clone())))
            .collect();
        let cv = conv_vars(&vars);
        let out = message_passing_layer(&mut tape, h, &edges, e, &cv).unwrap();

        // Loop-based reference, one edge at a time.
        let sig = |x: f64| 1.0 / (1.0 + (-x).exp());
        let swish = |x: f64| x * sig(x);
        let mut expected = node.clone();
        let mut agg = Array2::<f64>::zeros((n, width));
        for (row, &(src, tgt)) in edges.pairs().iter().enumerate() {
            for f in 0..width {
                let mut hidden_out = 0.0;
                for hidx in 0..width {
                    let mut pre = params[1][[0, hidx]];
                    for j in 0..k {
                        pre += edge_feats[[row, j]] * params[0][[j, hidx]];
                    }
                    hidden_out += swish(pre) * params[2][[hidx, f]];
                }
                let filter = hidden_out + params[3][[0, f]];
                let mut transform = params[5][[0, f]];
                for g in 0..width {
                    transform += node[[src, g]] * params[4][[g, f]];
                }
                agg[[tgt, f]] += filter * transform;
            }
        }
        for i in 0..n {
            for f in 0..width {
                expected[[i, f]] += swish(agg[[i, f]]);
            }
        }
        let delta = tape.value(out) - &expected;
        assert!(
            delta.iter().all(|d| d.abs() < 1e-10),
            "max delta {}",
            delta.iter().fold(0.0f64, |m, d| m.max(d.abs()))
        );
    }

    #[test]
    fn conv_rejects_mismatched_filter_width() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (node, params) = seeded_conv_inputs(&mut rng, 3, 4, 3);
        let coords = array![[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0]];
        let edges = EdgeList::from_cutoff(&coords, 2.0).unwrap();
        let mut tape = Tape::new();
        let h = tape.leaf(node);
        // Edge features two wide, filter expects three.
        let e = tape.leaf(Array2::zeros((edges.len(), 2)));
        let vars: Vec<Var> = std::iter::once(h)
            .chain(params.iter().map(|p| tape.leaf(p.clone())))
            .collect();
        let cv = conv_vars(&vars);
        let err = message_passing_layer(&mut tape, h, &edges, e, &cv).unwrap_err();
        assert!(err.to_string().contains("filter input width"));
    }

    #[test]
    fn conv_gradient_against_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(404);
        let n = 4;
        let width = 3;
        let k = 2;
        let coords = Array2::from_shape_fn((n, 3), |_| rng.gen_range(-1.5..1.5));
        let edges = EdgeList::from_cutoff(&coords, 3.0).unwrap();
        let (node, params) = seeded_conv_inputs(&mut rng, n, width, k);
        let edge_feats =
            Array2::from_shape_fn((edges.len(), k), |_| rng.gen_range(-1.0..1.0));
        let mut inputs = vec![node, edge_feats];
        inputs.extend(params);
        let edges_ref = &edges;
        let err = gradient_check(
            &move |tape, vars| {
                let cv = ConvVars {
                    filter_w1: vars[2],
                    filter_b1: vars[3],
                    filter_w2: vars[4],
                    filter_b2: vars[5],
                    transform_w: vars[6],
                    transform_b: vars[7],
                };
                let out =
                    message_passing_layer(tape, vars[0], edges_ref, vars[1], &cv).unwrap();
                let sq = tape.mul(out, out);
                tape.sum_all(sq)
            },
            &inputs,
            1e-5,
        );
        assert!(err <= 1e-4, "max relative error {err}");
    }

    #[test]
    fn pooling_single_bead_is_column_mean() {
        let mapping = CGMapping::uniform(vec![0, 0, 0], 1, 0).unwrap();
        let mut tape = Tape::new();
        let feats = tape.leaf(array![[1.0, 4.0], [2.0, 5.0], [3.0, 9.0]]);
        let pooled = pool_fg_to_cg(&mut tape, feats, &mapping).unwrap();
        let value = tape.value(pooled);
        assert!((value[[0, 0]] - 2.0).abs() < 1e-12);
        assert!((value[[0, 1]] - 6.0).abs() < 1e-12);
    }

    #[test]
    fn pooling_is_permutation_invariant_within_beads() {
        let mapping = CGMapping::uniform(vec![0, 0, 1, 1], 2, 0).unwrap();
        let feats = array![[1.0, 0.5], [3.0, -0.5], [2.0, 2.0], [4.0, 6.0]];
        let swapped = array![[3.0, -0.5], [1.0, 0.5], [4.0, 6.0], [2.0, 2.0]];
        let mut tape = Tape::new();
        let a = tape.leaf(feats);
        let pa = pool_fg_to_cg(&mut tape, a, &mapping).unwrap();
        let b = tape.leaf(swapped);
        let pb = pool_fg_to_cg(&mut tape, b, &mapping).unwrap();
        let delta = tape.value(pa) - tape.value(pb);
        assert!(delta.iter().all(|d| d.abs() < 1e-12));
    }

    #[test]
    fn pooling_matches_brute_force_means() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let assignment: Vec<usize> = (0..12).map(|_| rng.gen_range(0..4)).collect();
        let mut assignment = assignment;
        // Guarantee every bead is populated.
        for b in 0..4 {
            assignment[b] = b;
        }
        let mapping = CGMapping::uniform(assignment.clone(), 4, 0).unwrap();
        let feats = Array2::from_shape_fn((12, 5), |_| rng.gen_range(-2.0..2.0));
        let mut tape = Tape::new();
        let f = tape.leaf(feats.clone());
        let pooled = pool_fg_to_cg(&mut tape, f, &mapping).unwrap();
        for b in 0..4 {
            let members: Vec<usize> =
                (0..12).filter(|&i| assignment[i] == b).collect();
            for c in 0..5 {
                let mean: f64 =
                    members.iter().map(|&i| feats[[i, c]]).sum::<f64>() / members.len() as f64;
                assert!((tape.value(pooled)[[b, c]] - mean).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn pooling_is_linear_in_features() {
        // Pooling is a fixed linear projection of the feature matrix.
        let mapping = CGMapping::uniform(vec![0, 1, 0, 1, 1], 2, 0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = Array2::from_shape_fn((5, 3), |_| rng.gen_range(-1.0..1.0));
        let b = Array2::from_shape_fn((5, 3), |_| rng.gen_range(-1.0..1.0));
        let mut tape = Tape::new();
        let va = tape.leaf(a.clone());
        let vb = tape.leaf(b.clone());
        let vsum = tape.add(va, vb);
        let pa = pool_fg_to_cg(&mut tape, va, &mapping).unwrap();
        let pb = pool_fg_to_cg(&mut tape, vb, &mapping).unwrap();
        let psum = pool_fg_to_cg(&mut tape, vsum, &mapping).unwrap();
        let lhs = tape.value(psum).clone();
        let rhs = tape.value(pa) + tape.value(pb);
        assert!((lhs - rhs).iter().all(|d| d.abs() < 1e-12));
    }
}
