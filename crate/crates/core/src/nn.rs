//! Parameterized layers. Each layer registers its tensors in a
//! [`ParamStore`] under a name prefix and records its forward pass on a
//! [`Graph`]. Passing `frozen = true` reads the same parameters as constants
//! so that no gradient reaches them.

use rand::Rng;
use ssvc_autodiff::{Graph, ParamId, ParamStore, Tensor, Var};

use crate::error::Result;
use crate::rng::normal_tensor;

fn fetch(g: &mut Graph, store: &ParamStore, id: ParamId, frozen: bool) -> Var {
    if frozen {
        g.frozen_param(store, id)
    } else {
        g.param(store, id)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, input: usize, output: usize, rng: &mut impl Rng) -> Result<Self> {
        let w = store.add(format!("{name}.w"), normal_tensor(rng, &[input, output], 1.0 / (input as f32).sqrt()))?;
        let b = store.add(format!("{name}.b"), Tensor::zeros(&[output]))?;
        Ok(Self { w, b })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var, frozen: bool) -> Result<Var> {
        let w = fetch(g, store, self.w, frozen);
        let b = fetch(g, store, self.b, frozen);
        let y = g.matmul(x, w)?;
        Ok(g.add_row(y, b)?)
    }

    /// Plain forward on row-major values, without a graph.
    pub fn apply(&self, store: &ParamStore, x: &[f32], rows: usize) -> Vec<f32> {
        let (w, b) = (store.get(self.w), store.get(self.b));
        let (k, n) = (w.shape()[0], w.shape()[1]);
        let mut y: Vec<f32> = b.data().iter().copied().cycle().take(rows * n).collect();
        ssvc_autodiff::kernels::gemm(rows, k, n, x, false, w.data(), false, &mut y, 1.0);
        y
    }
}

#[derive(Clone, Copy, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Result<Self> {
        let gamma = store.add(format!("{name}.gamma"), Tensor::full(&[dim], 1.0))?;
        let beta = store.add(format!("{name}.beta"), Tensor::zeros(&[dim]))?;
        Ok(Self { gamma, beta })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var, frozen: bool) -> Result<Var> {
        let gamma = fetch(g, store, self.gamma, frozen);
        let beta = fetch(g, store, self.beta, frozen);
        Ok(g.layer_norm(x, gamma, beta)?)
    }

    pub fn apply(&self, store: &ParamStore, x: &mut [f32], dim: usize) {
        let (gamma, beta) = (store.get(self.gamma).data(), store.get(self.beta).data());
        for row in x.chunks_mut(dim) {
            let mean = row.iter().sum::<f32>() / dim as f32;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f32>() / dim as f32;
            let inv = 1.0 / (var + 1e-5).sqrt();
            for (j, v) in row.iter_mut().enumerate() {
                *v = (*v - mean) * inv * gamma[j] + beta[j];
            }
        }
    }
}

/// Temporal convolution with "same" padding inside each segment.
#[derive(Clone, Copy, Debug)]
pub struct Conv1d {
    pub w: ParamId,
    pub b: ParamId,
}

impl Conv1d {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        width: usize,
        input: usize,
        output: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let fan_in = (width * input) as f32;
        let w = store.add(format!("{name}.w"), normal_tensor(rng, &[width * input, output], 1.0 / fan_in.sqrt()))?;
        let b = store.add(format!("{name}.b"), Tensor::zeros(&[output]))?;
        Ok(Self { w, b })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var, segments: &[usize], frozen: bool) -> Result<Var> {
        let w = fetch(g, store, self.w, frozen);
        let b = fetch(g, store, self.b, frozen);
        Ok(g.conv1d(x, w, b, segments)?)
    }
}

/// Pre-layer-norm transformer block.
#[derive(Clone, Copy, Debug)]
pub struct TransformerBlock {
    pub ln1: LayerNorm,
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub ln2: LayerNorm,
    pub ff1: Linear,
    pub ff2: Linear,
    pub heads: usize,
}

impl TransformerBlock {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        ff_dim: usize,
        heads: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        Ok(Self {
            ln1: LayerNorm::new(store, &format!("{name}.ln1"), dim)?,
            q: Linear::new(store, &format!("{name}.q"), dim, dim, rng)?,
            k: Linear::new(store, &format!("{name}.k"), dim, dim, rng)?,
            v: Linear::new(store, &format!("{name}.v"), dim, dim, rng)?,
            o: Linear::new(store, &format!("{name}.o"), dim, dim, rng)?,
            ln2: LayerNorm::new(store, &format!("{name}.ln2"), dim)?,
            ff1: Linear::new(store, &format!("{name}.ff1"), dim, ff_dim, rng)?,
            ff2: Linear::new(store, &format!("{name}.ff2"), ff_dim, dim, rng)?,
            heads,
        })
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        x: Var,
        segments: &[usize],
        causal: bool,
        frozen: bool,
    ) -> Result<Var> {
        let h = self.ln1.forward(g, store, x, frozen)?;
        let q = self.q.forward(g, store, h, frozen)?;
        let k = self.k.forward(g, store, h, frozen)?;
        let v = self.v.forward(g, store, h, frozen)?;
        let a = g.attention(q, k, v, self.heads, segments, causal)?;
        let a = self.o.forward(g, store, a, frozen)?;
        let x = g.add(x, a)?;
        let h = self.ln2.forward(g, store, x, frozen)?;
        let h = self.ff1.forward(g, store, h, frozen)?;
        let h = g.gelu(h);
        let h = self.ff2.forward(g, store, h, frozen)?;
        Ok(g.add(x, h)?)
    }
}
