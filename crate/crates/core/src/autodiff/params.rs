use std::collections::HashMap;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::graph::{Graph, NodeId};
use super::tensor::Tensor;

/// Index of a parameter inside its [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    /// Node of this parameter in a graph produced by [`ParamStore::bind`].
    pub fn node(self) -> NodeId {
        NodeId(self.0)
    }

    pub fn index(self) -> usize {
        self.0
    }
}

/// Learning-rate group a parameter belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
pub enum ParamGroup {
    /// Point, voxel and point-fusion weights.
    Lidar,
    /// Everything else in the segmentation network.
    Rest,
    /// Association MLP.
    Tracker,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    groups: Vec<ParamGroup>,
    values: Vec<Tensor>,
    lookup: HashMap<String, usize>,
}

impl Default for ParamStore {
    fn default() -> Self {
        ParamStore::new()
    }
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore { names: Vec::new(), groups: Vec::new(), values: Vec::new(), lookup: HashMap::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, group: ParamGroup, value: Tensor) -> ParamId {
        let name = name.into();
        assert!(!self.lookup.contains_key(&name), "duplicate parameter `{name}`");
        self.lookup.insert(name.clone(), self.values.len());
        self.names.push(name);
        self.groups.push(group);
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    /// Glorot-normal matrix `[fan_in, fan_out]`.
    pub fn add_weight<R: Rng>(&mut self, name: impl Into<String>, group: ParamGroup, fan_in: usize, fan_out: usize, rng: &mut R) -> ParamId {
        let std = (2.0 / (fan_in + fan_out) as f64).sqrt();
        let normal = Normal::new(0.0, std).expect("finite std");
        let data = (0..fan_in * fan_out).map(|_| normal.sample(rng)).collect();
        self.add(name, group, Tensor::matrix(fan_in, fan_out, data))
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.lookup.get(name).map(|&i| ParamId(i))
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn group(&self, id: ParamId) -> ParamGroup {
        self.groups[id.0]
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor)> {
        self.values.iter().enumerate().map(|(i, t)| (ParamId(i), self.names[i].as_str(), t))
    }

    /// Start a graph whose first nodes are this store's parameters.
    pub fn bind(&self, trainable: bool) -> Graph {
        let mut g = Graph::new();
        for v in &self.values {
            let mut t = v.clone();
            t.requires_grad = trainable;
            g.leaf(t);
        }
        g
    }

    /// Like [`ParamStore::bind`] with only the listed groups trainable.
    pub fn bind_groups(&self, trainable: &[ParamGroup]) -> Graph {
        let mut g = Graph::new();
        for (v, grp) in self.values.iter().zip(&self.groups) {
            let mut t = v.clone();
            t.requires_grad = trainable.contains(grp);
            g.leaf(t);
        }
        g
    }

    /// Collect parameter gradients from a bound graph; absent ones are zero.
    pub fn grads_from(&self, g: &Graph) -> Vec<Tensor> {
        self.ids().map(|id| g.grad(id.node()).unwrap_or_else(|| Tensor::zeros(self.values[id.0].shape().to_vec()))).collect()
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }
}
