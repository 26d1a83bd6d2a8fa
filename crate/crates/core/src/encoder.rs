//! Frozen multi-layer encoder standing in for a pretrained SSL model.
//!
//! Layer 0 is a linear projection of the input frames. Each later layer
//! applies a fixed linear map, tanh and a width-3 temporal convolution;
//! from `norm_from` on, the output is also instance-normalized over time,
//! which removes the per-utterance (stationary) statistics. Early layers
//! therefore carry more speaker information than late ones.

use serde::{Deserialize, Serialize};
use ssvc_autodiff::kernels::gemm;
use ssvc_autodiff::Tensor;

use crate::rng::{domain, normal_tensor, rng_for};
use crate::synth::FeatureSequence;

const INSTANCE_NORM_EPS: f32 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    pub layers: usize,
    pub dim: usize,
    pub norm_from: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            layers: 6,
            dim: 32,
            norm_from: 3,
        }
    }
}

/// `L×T×D` hidden states.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerStack {
    pub layers: usize,
    pub frames: usize,
    pub dim: usize,
    pub data: Vec<f32>,
}

impl LayerStack {
    pub fn layer(&self, l: usize) -> &[f32] {
        let n = self.frames * self.dim;
        &self.data[l * n..(l + 1) * n]
    }

    pub fn layer_tensor(&self, l: usize) -> Tensor {
        Tensor::matrix(self.frames, self.dim, self.layer(l).to_vec()).unwrap()
    }

    /// Time-averaged state of layer `l`.
    pub fn layer_mean(&self, l: usize) -> Vec<f32> {
        let mut m = vec![0.0; self.dim];
        for t in self.layer(l).chunks(self.dim) {
            for (a, b) in m.iter_mut().zip(t) {
                *a += b;
            }
        }
        m.iter_mut().for_each(|v| *v /= self.frames as f32);
        m
    }

    /// Frames `start..start+len` of every layer.
    pub fn slice(&self, start: usize, len: usize) -> LayerStack {
        let mut data = Vec::with_capacity(self.layers * len * self.dim);
        for l in 0..self.layers {
            data.extend_from_slice(&self.layer(l)[start * self.dim..(start + len) * self.dim]);
        }
        LayerStack {
            layers: self.layers,
            frames: len,
            dim: self.dim,
            data,
        }
    }

    /// Stacks several utterances along time, layer by layer, giving an
    /// `L×(ΣT)×D` stack whose rows line up with the segment lengths.
    pub fn concat(stacks: &[&LayerStack]) -> LayerStack {
        let layers = stacks[0].layers;
        let dim = stacks[0].dim;
        let frames = stacks.iter().map(|s| s.frames).sum();
        let mut data = Vec::with_capacity(layers * frames * dim);
        for l in 0..layers {
            for s in stacks {
                data.extend_from_slice(s.layer(l));
            }
        }
        LayerStack {
            layers,
            frames,
            dim,
            data,
        }
    }

    /// `L×(T·D)` matrix view, the shape used for layer mixing.
    pub fn as_matrix(&self) -> Tensor {
        Tensor::matrix(self.layers, self.frames * self.dim, self.data.clone()).unwrap()
    }
}

struct FrozenLayer {
    proj: Tensor,
    /// `(3·D)×D`, tap-major
    conv: Tensor,
}

pub struct FrozenEncoder {
    pub config: EncoderConfig,
    input_proj: Tensor,
    layers: Vec<FrozenLayer>,
}

impl FrozenEncoder {
    pub fn new(corpus_seed: u64, input_dim: usize, config: EncoderConfig) -> Self {
        let mut rng = rng_for(corpus_seed, domain::ENCODER);
        let d = config.dim;
        let input_proj = normal_tensor(&mut rng, &[input_dim, d], 1.0 / (input_dim as f32).sqrt());
        let layers = (1..config.layers)
            .map(|_| {
                let proj = normal_tensor(&mut rng, &[d, d], 1.2 / (d as f32).sqrt());
                let mut conv = normal_tensor(&mut rng, &[3 * d, d], 0.15 / (d as f32).sqrt());
                // centre tap dominates so content stays temporally local
                for i in 0..d {
                    conv.data_mut()[(d + i) * d + i] += 1.0;
                }
                FrozenLayer { proj, conv }
            })
            .collect();
        Self {
            config,
            input_proj,
            layers,
        }
    }

    pub fn encode_layers(&self, features: &FeatureSequence) -> LayerStack {
        let t = features.len();
        let d = self.config.dim;
        let mut data = Vec::with_capacity(self.config.layers * t * d);
        let mut h = vec![0.0; t * d];
        gemm(t, features.dim(), d, features.frames.data(), false, self.input_proj.data(), false, &mut h, 0.0);
        data.extend_from_slice(&h);
        for (i, layer) in self.layers.iter().enumerate() {
            let l = i + 1;
            let mut u = vec![0.0; t * d];
            gemm(t, d, d, &h, false, layer.proj.data(), false, &mut u, 0.0);
            u.iter_mut().for_each(|v| *v = v.tanh());
            let mut cols = vec![0.0; t * 3 * d];
            for s in 0..t {
                for j in 0..3 {
                    let src = s as isize + j as isize - 1;
                    if src < 0 || src >= t as isize {
                        continue;
                    }
                    let src = src as usize;
                    cols[s * 3 * d + j * d..s * 3 * d + (j + 1) * d].copy_from_slice(&u[src * d..(src + 1) * d]);
                }
            }
            gemm(t, 3 * d, d, &cols, false, layer.conv.data(), false, &mut h, 0.0);
            if l >= self.config.norm_from {
                instance_norm(&mut h, t, d);
            }
            data.extend_from_slice(&h);
        }
        LayerStack {
            layers: self.config.layers,
            frames: t,
            dim: d,
            data,
        }
    }
}

fn instance_norm(h: &mut [f32], t: usize, d: usize) {
    for j in 0..d {
        let mean = (0..t).map(|s| h[s * d + j]).sum::<f32>() / t as f32;
        let var = (0..t).map(|s| (h[s * d + j] - mean).powi(2)).sum::<f32>() / t as f32;
        let inv = 1.0 / (var + INSTANCE_NORM_EPS).sqrt();
        for s in 0..t {
            h[s * d + j] = (h[s * d + j] - mean) * inv;
        }
    }
}
