//! Dense layers recorded on an autodiff [`Graph`].

use rand::Rng;

use crate::autodiff::{AutodiffError, Graph, NodeId, ParamGroup, ParamId, ParamStore, Tensor};

type Result<T> = std::result::Result<T, AutodiffError>;

/// Errors shared by the encoder, decoder and model glue.
#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("invalid model config `{field}`: {detail}")]
    InvalidConfig { field: &'static str, detail: String },
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Geometry(#[from] crate::geometry::GeometryError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, group: ParamGroup, fan_in: usize, fan_out: usize, rng: &mut R) -> Self {
        let w = store.add_weight(format!("{name}.w"), group, fan_in, fan_out, rng);
        let b = store.add(format!("{name}.b"), group, Tensor::zeros(vec![1, fan_out]));
        Linear { w, b, fan_in, fan_out }
    }

    pub fn forward(&self, g: &mut Graph, x: NodeId) -> Result<NodeId> {
        let y = g.matmul(x, self.w.node())?;
        g.add_row(y, self.b.node())
    }

    /// Forward on plain tensors without recording a graph.
    pub fn apply(&self, store: &ParamStore, x: &Tensor) -> Tensor {
        let w = store.get(self.w);
        let b = store.get(self.b);
        let (n, k, m) = (x.rows(), self.fan_in, self.fan_out);
        let mut out = crate::autodiff::kernels::matmul_nn(x.data(), w.data(), n, k, m);
        for row in out.chunks_mut(m.max(1)) {
            for (o, bv) in row.iter_mut().zip(b.data()) {
                *o += bv;
            }
        }
        Tensor::matrix(n, m, out)
    }
}

/// Stack of linear layers with ReLU between them (none after the last).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

impl Mlp {
    /// `widths = [in, h1, ..., out]`.
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, group: ParamGroup, widths: &[usize], rng: &mut R) -> Self {
        assert!(widths.len() >= 2, "an MLP needs input and output widths");
        let layers = widths.windows(2).enumerate().map(|(i, w)| Linear::new(store, &format!("{name}.{i}"), group, w[0], w[1], rng)).collect();
        Mlp { layers }
    }

    pub fn forward(&self, g: &mut Graph, x: NodeId) -> Result<NodeId> {
        let mut h = x;
        for (i, l) in self.layers.iter().enumerate() {
            h = l.forward(g, h)?;
            if i + 1 < self.layers.len() {
                h = g.relu(h);
            }
        }
        Ok(h)
    }

    pub fn apply(&self, store: &ParamStore, x: &Tensor) -> Tensor {
        let mut h = x.clone();
        for (i, l) in self.layers.iter().enumerate() {
            h = l.apply(store, &h);
            if i + 1 < self.layers.len() {
                h.data_mut().iter_mut().for_each(|v| *v = v.max(0.0));
            }
        }
        h
    }

    pub fn params(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.layers.iter().flat_map(|l| [l.w, l.b])
    }

    pub fn input_width(&self) -> usize {
        self.layers[0].fan_in
    }

    pub fn output_width(&self) -> usize {
        self.layers[self.layers.len() - 1].fan_out
    }
}

/// Set every listed parameter to zero.
pub fn zero_params(store: &mut ParamStore, ids: impl IntoIterator<Item = ParamId>) {
    for id in ids {
        store.get_mut(id).data_mut().iter_mut().for_each(|v| *v = 0.0);
    }
}
