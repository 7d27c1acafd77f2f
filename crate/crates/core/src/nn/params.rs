//! Named parameter store. Every trainable tensor lives here under a canonical
//! registry name (`lang.embed`, `vis.rnn.l0.w`, `att.w_q`, ...); checkpoints,
//! optimizers, warm starts, and finite-difference flattening all key off the
//! same names. BTreeMap keeps iteration order deterministic.

use std::collections::BTreeMap;

use ndarray::Array2;
use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::tape::{Tape, Var};

#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    map: BTreeMap<String, Array2<f64>>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, value: Array2<f64>) {
        assert!(
            self.map.insert(name.to_string(), value).is_none(),
            "duplicate parameter name `{name}`"
        );
    }

    pub fn get(&self, name: &str) -> Option<&Array2<f64>> {
        self.map.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Array2<f64>> {
        self.map.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.map.contains_key(name)
    }

    /// Absorbs every entry of `other`. Panics on a name collision.
    pub fn merge(&mut self, other: ParamStore) {
        for (name, value) in other.map {
            assert!(
                self.map.insert(name.clone(), value).is_none(),
                "duplicate parameter name `{name}`"
            );
        }
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Array2<f64>)> {
        self.map.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Array2<f64>)> {
        self.map.iter_mut()
    }

    pub fn names(&self) -> Vec<String> {
        self.map.keys().cloned().collect()
    }

    /// Total scalar count across all tensors.
    pub fn n_scalars(&self) -> usize {
        self.map.values().map(|v| v.len()).sum()
    }

    /// Bind every parameter as a tracked leaf on `tape`.
    pub fn bind<'t>(&self, tape: &'t Tape) -> BoundParams<'t> {
        let vars = self
            .map
            .iter()
            .map(|(name, value)| (name.clone(), tape.leaf(value.clone())))
            .collect();
        BoundParams { vars }
    }

    /// Flatten all tensors to one vector in name order, row-major.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.n_scalars());
        for value in self.map.values() {
            out.extend(value.iter());
        }
        out
    }

    /// Inverse of [`flatten`](Self::flatten).
    pub fn assign_from_flat(&mut self, flat: &[f64]) {
        let mut offset = 0;
        for value in self.map.values_mut() {
            let n = value.len();
            for (slot, &x) in value.iter_mut().zip(&flat[offset..offset + n]) {
                *slot = x;
            }
            offset += n;
        }
        assert_eq!(offset, flat.len(), "flat vector length mismatch");
    }

    /// Fail if any parameter contains a non-finite entry.
    pub fn check_finite(&self) -> Result<()> {
        for (name, value) in &self.map {
            if !value.iter().all(|v| v.is_finite()) {
                return Err(Error::NonFinite(format!("parameter `{name}`")));
            }
        }
        Ok(())
    }
}

/// Per-tape binding of a [`ParamStore`]: one tracked leaf per parameter.
pub struct BoundParams<'t> {
    vars: BTreeMap<String, Var<'t>>,
}

impl<'t> BoundParams<'t> {
    pub fn var(&self, name: &str) -> Var<'t> {
        *self
            .vars
            .get(name)
            .unwrap_or_else(|| panic!("unbound parameter `{name}`"))
    }

    pub fn try_var(&self, name: &str) -> Option<Var<'t>> {
        self.vars.get(name).copied()
    }

    /// Collect gradients from a backward sweep into a name-keyed store.
    /// Parameters the loss never touched get zero tensors.
    pub fn collect_grads(&self, grads: &[Option<Array2<f64>>], shapes: &ParamStore) -> GradStore {
        let map = self
            .vars
            .iter()
            .map(|(name, var)| {
                let g = grads[var.idx()].clone().unwrap_or_else(|| {
                    Array2::zeros(shapes.get(name).expect("shape for bound param").dim())
                });
                (name.clone(), g)
            })
            .collect();
        GradStore { map }
    }
}

#[derive(Clone, Debug, Default)]
pub struct GradStore {
    map: BTreeMap<String, Array2<f64>>,
}

impl GradStore {
    pub fn zeros_like(params: &ParamStore) -> Self {
        let map = params
            .iter()
            .map(|(name, value)| (name.clone(), Array2::zeros(value.dim())))
            .collect();
        Self { map }
    }

    pub fn get(&self, name: &str) -> Option<&Array2<f64>> {
        self.map.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Array2<f64>> {
        self.map.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Array2<f64>)> {
        self.map.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Array2<f64>)> {
        self.map.iter_mut()
    }

    pub fn add_scaled(&mut self, other: &GradStore, c: f64) {
        for (name, value) in &other.map {
            match self.map.get_mut(name) {
                Some(acc) => *acc += &(value * c),
                None => {
                    self.map.insert(name.clone(), value * c);
                }
            }
        }
    }

    /// Global L2 norm across all tensors.
    pub fn global_norm(&self) -> f64 {
        self.map
            .values()
            .map(|g| g.iter().map(|v| v * v).sum::<f64>())
            .sum::<f64>()
            .sqrt()
    }

    pub fn scale(&mut self, c: f64) {
        for g in self.map.values_mut() {
            *g *= c;
        }
    }

    pub fn check_finite(&self) -> Result<()> {
        for (name, g) in &self.map {
            if !g.iter().all(|v| v.is_finite()) {
                return Err(Error::NonFinite(format!("gradient of `{name}`")));
            }
        }
        Ok(())
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for value in self.map.values() {
            out.extend(value.iter());
        }
        out
    }
}

/// Uniform init in `[-bound, bound]`.
pub fn uniform_init(rng: &mut impl Rng, rows: usize, cols: usize, bound: f64) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| rng.random_range(-bound..bound))
}

/// Uniform init with the conventional `1/sqrt(fan_in)` bound.
pub fn fan_in_init(rng: &mut impl Rng, rows: usize, cols: usize) -> Array2<f64> {
    uniform_init(rng, rows, cols, 1.0 / (rows as f64).sqrt())
}
