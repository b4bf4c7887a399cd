//! Central-difference verification of tape gradients.

use crate::gnn::tape::{Tape, Var};
use ndarray::Array2;

/// Evaluate a scalar-valued graph builder on fresh inputs.
fn evaluate<F>(build: &F, inputs: &[Array2<f64>]) -> f64
where
    F: Fn(&mut Tape, &[Var]) -> Var,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|a| tape.leaf(a.clone())).collect();
    let out = build(&mut tape, &vars);
    assert_eq!(
        tape.value(out).dim(),
        (1, 1),
        "gradient_check: builder must produce a scalar"
    );
    tape.value(out)[[0, 0]]
}

/// Compare reverse-mode gradients of `build` against central differences for
/// every entry of every input, returning the worst relative error
/// `|analytic - central| / (|central| + 1e-8)`.
pub fn gradient_check<F>(build: &F, inputs: &[Array2<f64>], eps: f64) -> f64
where
    F: Fn(&mut Tape, &[Var]) -> Var,
{
    assert!(eps > 0.0, "gradient_check: eps must be positive");
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|a| tape.leaf(a.clone())).collect();
    let out = build(&mut tape, &vars);
    assert_eq!(
        tape.value(out).dim(),
        (1, 1),
        "gradient_check: builder must produce a scalar"
    );
    let grads = tape.backward(out);

    let mut worst = 0.0f64;
    for (which, input) in inputs.iter().enumerate() {
        let analytic = grads.of(vars[which]);
        let (rows, cols) = input.dim();
        for r in 0..rows {
            for c in 0..cols {
                let mut plus = inputs.to_vec();
                plus[which][[r, c]] += eps;
                let mut minus = inputs.to_vec();
                minus[which][[r, c]] -= eps;
                let central = (evaluate(build, &plus) - evaluate(build, &minus)) / (2.0 * eps);
                let rel = (analytic[[r, c]] - central).abs() / (central.abs() + 1e-8);
                worst = worst.max(rel);
            }
        }
    }
    worst
}
