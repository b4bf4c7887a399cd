//! Named, ordered parameter storage shared by models and optimizers.

use crate::gnn::tape::{Tape, Var};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};
use std::collections::HashMap;

/// Ordered collection of named parameter matrices. Iteration order is
/// insertion order, which makes gradient layouts and checkpoints
/// deterministic.
#[derive(Clone, Debug, Default)]
pub struct ParamSet {
    names: Vec<String>,
    arrays: Vec<Array2<f64>>,
    index: HashMap<String, usize>,
}

impl ParamSet {
    pub fn new() -> Self {
        ParamSet::default()
    }

    pub fn push(&mut self, name: impl Into<String>, array: Array2<f64>) {
        let name = name.into();
        assert!(
            !self.index.contains_key(&name),
            "duplicate parameter name {name:?}"
        );
        self.index.insert(name.clone(), self.arrays.len());
        self.names.push(name);
        self.arrays.push(array);
    }

    pub fn len(&self) -> usize {
        self.arrays.len()
    }

    pub fn is_empty(&self) -> bool {
        self.arrays.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn arrays(&self) -> &[Array2<f64>] {
        &self.arrays
    }

    pub fn arrays_mut(&mut self) -> &mut [Array2<f64>] {
        &mut self.arrays
    }

    /// Replace a parameter's values; the new array must keep its shape.
    /// Panics on unknown names or shape changes — both are programmer
    /// errors, not runtime conditions.
    pub fn set(&mut self, name: &str, array: Array2<f64>) {
        let i = *self
            .index
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {name:?}"));
        assert_eq!(
            self.arrays[i].dim(),
            array.dim(),
            "parameter {name:?} cannot change shape"
        );
        self.arrays[i] = array;
    }

    pub fn get(&self, name: &str) -> Option<&Array2<f64>> {
        self.index.get(name).map(|&i| &self.arrays[i])
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn scalar_count(&self) -> usize {
        self.arrays.iter().map(|a| a.len()).sum()
    }

    /// Load every parameter onto a tape, in order.
    pub fn bind(&self, tape: &mut Tape) -> BoundParams {
        let vars = self.arrays.iter().map(|a| tape.leaf(a.clone())).collect();
        BoundParams {
            vars,
            index: self.index.clone(),
        }
    }

    /// Stable content digest over names, shapes, and raw values.
    pub fn digest(&self) -> String {
        let mut hasher = Sha256::new();
        for (name, array) in self.names.iter().zip(&self.arrays) {
            hasher.update(name.as_bytes());
            hasher.update(array.nrows().to_le_bytes());
            hasher.update(array.ncols().to_le_bytes());
            for v in array.iter() {
                hasher.update(v.to_le_bytes());
            }
        }
        let digest = hasher.finalize();
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Tape handles for one bound [`ParamSet`].
pub struct BoundParams {
    vars: Vec<Var>,
    index: HashMap<String, usize>,
}

impl BoundParams {
    /// View a caller-provided list of leaves as this parameter layout.
    /// The list must be ordered exactly like [`ParamSet::arrays`]; used by
    /// gradient checks that rebuild the forward pass from perturbed leaves.
    pub fn from_vars(names: &[String], vars: &[Var]) -> Self {
        assert_eq!(names.len(), vars.len(), "one leaf per parameter");
        let index = names
            .iter()
            .enumerate()
            .map(|(i, n)| (n.clone(), i))
            .collect();
        BoundParams {
            vars: vars.to_vec(),
            index,
        }
    }

    pub fn var(&self, name: &str) -> Var {
        self.vars[*self
            .index
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {name:?}"))]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

/// Seeded weight initializer: entries uniform in
/// `[-1/sqrt(fan_in), +1/sqrt(fan_in)]`.
pub fn uniform_init(rows: usize, cols: usize, fan_in: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
    assert!(fan_in > 0);
    let bound = 1.0 / (fan_in as f64).sqrt();
    Array2::from_shape_fn((rows, cols), |_| rng.gen_range(-bound..=bound))
}

/// RNG for parameter initialization, derived from a model seed.
pub fn init_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn digest_changes_with_values_and_names() {
        let mut a = ParamSet::new();
        a.push("w", array![[1.0, 2.0]]);
        let mut b = ParamSet::new();
        b.push("w", array![[1.0, 2.5]]);
        let mut c = ParamSet::new();
        c.push("v", array![[1.0, 2.0]]);
        assert_ne!(a.digest(), b.digest());
        assert_ne!(a.digest(), c.digest());
        assert_eq!(a.digest(), a.clone().digest());
    }

    #[test]
    fn init_is_seeded_and_bounded() {
        let mut rng_a = init_rng(5);
        let mut rng_b = init_rng(5);
        let wa = uniform_init(4, 3, 9, &mut rng_a);
        let wb = uniform_init(4, 3, 9, &mut rng_b);
        assert_eq!(wa, wb);
        assert!(wa.iter().all(|v| v.abs() <= 1.0 / 3.0));
        let wc = uniform_init(4, 3, 9, &mut rng_a);
        assert_ne!(wa, wc);
    }

    #[test]
    fn bound_params_resolve_by_name() {
        let mut set = ParamSet::new();
        set.push("first", array![[1.0]]);
        set.push("second", array![[2.0]]);
        let mut tape = Tape::new();
        let bound = set.bind(&mut tape);
        assert_eq!(tape.value(bound.var("second"))[[0, 0]], 2.0);
        assert_eq!(bound.vars().len(), 2);
    }
}
