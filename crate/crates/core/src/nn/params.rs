use std::collections::HashMap;

use ndarray::Array2;
use rand::Rng;

pub type ParamId = usize;

/// A named collection of 2-D parameter tensors. Logically rank-1 tensors
/// (layer-norm gains, biases) are stored as 1 x d with rank tag 1 so that
/// checkpoints preserve their shape.
#[derive(Debug, Clone)]
pub struct Params {
    names: Vec<String>,
    values: Vec<Array2<f64>>,
    ranks: Vec<u8>,
    index: HashMap<String, ParamId>,
}

impl Params {
    pub fn new() -> Self {
        Params {
            names: Vec::new(),
            values: Vec::new(),
            ranks: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn add(&mut self, name: &str, value: Array2<f64>, rank: u8) -> ParamId {
        assert!(
            !self.index.contains_key(name),
            "duplicate parameter {name}"
        );
        let id = self.values.len();
        self.names.push(name.to_string());
        self.values.push(value);
        self.ranks.push(rank);
        self.index.insert(name.to_string(), id);
        id
    }

    pub fn add_matrix(&mut self, name: &str, value: Array2<f64>) -> ParamId {
        self.add(name, value, 2)
    }

    pub fn add_vector(&mut self, name: &str, value: Vec<f64>) -> ParamId {
        let d = value.len();
        self.add(name, Array2::from_shape_vec((1, d), value).unwrap(), 1)
    }

    pub fn id(&self, name: &str) -> ParamId {
        *self
            .index
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
    }

    pub fn try_id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn get(&self, id: ParamId) -> &Array2<f64> {
        &self.values[id]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Array2<f64> {
        &mut self.values[id]
    }

    pub fn by_name(&self, name: &str) -> &Array2<f64> {
        self.get(self.id(name))
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id]
    }

    pub fn rank(&self, id: ParamId) -> u8 {
        self.ranks[id]
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Array2<f64>, u8)> {
        (0..self.len()).map(|i| (self.names[i].as_str(), &self.values[i], self.ranks[i]))
    }

    pub fn n_scalars(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }
}

impl Default for Params {
    fn default() -> Self {
        Self::new()
    }
}

/// Uniform(-bound, bound) matrix initialization.
pub fn uniform_matrix<R: Rng>(rng: &mut R, rows: usize, cols: usize, bound: f64) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| rng.gen_range(-bound..bound))
}

/// Per-parameter gradient accumulator. A disabled store drops every
/// accumulation, which is how frozen parameter sets never materialize
/// gradients.
#[derive(Debug)]
pub struct GradStore {
    grads: Vec<Option<Array2<f64>>>,
    enabled: bool,
}

impl GradStore {
    pub fn new(n_params: usize) -> Self {
        GradStore {
            grads: (0..n_params).map(|_| None).collect(),
            enabled: true,
        }
    }

    pub fn disabled() -> Self {
        GradStore {
            grads: Vec::new(),
            enabled: false,
        }
    }

    pub fn enabled(&self) -> bool {
        self.enabled
    }

    pub fn accumulate(&mut self, id: ParamId, grad: &Array2<f64>) {
        if !self.enabled {
            return;
        }
        match &mut self.grads[id] {
            Some(g) => *g += grad,
            slot => *slot = Some(grad.clone()),
        }
    }

    pub fn get(&self, id: ParamId) -> Option<&Array2<f64>> {
        if self.enabled {
            self.grads.get(id).and_then(|g| g.as_ref())
        } else {
            None
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for g in self.grads.iter_mut().flatten() {
            *g *= factor;
        }
    }

    /// Merges another store into this one (same parameter set).
    pub fn merge(&mut self, other: GradStore) {
        if !self.enabled {
            return;
        }
        for (id, g) in other.grads.into_iter().enumerate() {
            if let Some(g) = g {
                match &mut self.grads[id] {
                    Some(acc) => *acc += &g,
                    slot => *slot = Some(g),
                }
            }
        }
    }

    /// Global L2 norm over all stored gradients.
    pub fn global_norm(&self) -> f64 {
        self.grads
            .iter()
            .flatten()
            .map(|g| g.iter().map(|x| x * x).sum::<f64>())
            .sum::<f64>()
            .sqrt()
    }
}
