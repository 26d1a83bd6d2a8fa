//! Residual vector quantization with EMA codebooks.
//!
//! Code 0 of every codebook is pinned to the zero vector. A stage can
//! therefore always leave the residual unchanged, so the reconstruction
//! error never grows from one stage to the next.

use rand::Rng;
use ssvc_autodiff::kernels::gemm;
use ssvc_autodiff::Tensor;

use crate::error::{invalid, Error, Result};

/// `frames × nq` code indices, row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CodeGrid {
    pub frames: usize,
    pub nq: usize,
    pub indices: Vec<u32>,
}

impl CodeGrid {
    pub fn new(frames: usize, nq: usize, indices: Vec<u32>) -> Result<Self> {
        if indices.len() != frames * nq {
            return Err(invalid(format!("{} indices for a {frames}x{nq} grid", indices.len())));
        }
        Ok(Self { frames, nq, indices })
    }

    pub fn empty(nq: usize) -> Self {
        Self {
            frames: 0,
            nq,
            indices: Vec::new(),
        }
    }

    pub fn row(&self, t: usize) -> &[u32] {
        &self.indices[t * self.nq..(t + 1) * self.nq]
    }

    pub fn get(&self, t: usize, stage: usize) -> u32 {
        self.indices[t * self.nq + stage]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RvqConfig {
    pub nq: usize,
    pub codebook_size: usize,
    pub dim: usize,
    pub decay: f32,
    pub dead_threshold: f32,
    pub dead_patience: u32,
}

#[derive(Clone, Debug)]
pub struct Rvq {
    pub config: RvqConfig,
    /// `K×D` per stage.
    pub books: Vec<Tensor>,
    /// EMA assignment counts per code.
    pub counts: Vec<Vec<f32>>,
    /// EMA sums of assigned residuals, `K×D` per stage.
    pub sums: Vec<Tensor>,
    /// Consecutive updates each code has spent below the dead threshold.
    pub dead_steps: Vec<Vec<u32>>,
}

/// Result of quantizing `rows × dim` features.
#[derive(Clone, Debug)]
pub struct Quantized {
    pub codes: CodeGrid,
    /// Sum of the selected codes, `rows × dim`.
    pub values: Vec<f32>,
    /// Residual entering each stage, `rows × dim` per stage.
    pub residuals: Vec<Vec<f32>>,
}

impl Rvq {
    pub fn new(config: RvqConfig, rng: &mut impl Rng) -> Self {
        let (k, d) = (config.codebook_size, config.dim);
        let books: Vec<Tensor> = (0..config.nq)
            .map(|stage| {
                let std = 0.5f32.powi(stage as i32);
                let mut t = crate::rng::normal_tensor(rng, &[k, d], std);
                t.row_mut(0).fill(0.0);
                t
            })
            .collect();
        let sums = books.clone();
        Self {
            counts: vec![vec![1.0; k]; config.nq],
            dead_steps: vec![vec![0; k]; config.nq],
            books,
            sums,
            config,
        }
    }

    /// Replaces every codebook by rows drawn from `features` and their
    /// successive residuals.
    pub fn init_from(&mut self, features: &[f32], rows: usize, rng: &mut impl Rng) -> Result<()> {
        let d = self.config.dim;
        self.check_dim(features, rows)?;
        let mut residual = features.to_vec();
        for stage in 0..self.config.nq {
            let book = &mut self.books[stage];
            for k in 1..self.config.codebook_size {
                let r = rng.gen_range(0..rows);
                book.row_mut(k).copy_from_slice(&residual[r * d..(r + 1) * d]);
            }
            self.sums[stage] = book.clone();
            self.counts[stage].fill(1.0);
            self.dead_steps[stage].fill(0);
            let (idx, _) = nearest(book, &residual, rows, d);
            for (row, &i) in residual.chunks_mut(d).zip(&idx) {
                for (v, c) in row.iter_mut().zip(book.row(i)) {
                    *v -= c;
                }
            }
        }
        Ok(())
    }

    fn check_dim(&self, features: &[f32], rows: usize) -> Result<()> {
        if features.len() != rows * self.config.dim {
            return Err(Error::Autodiff(ssvc_autodiff::AutodiffError::ShapeMismatch {
                op: "rvq_quantize",
                left: vec![rows, features.len() / rows.max(1)],
                right: vec![self.config.codebook_size, self.config.dim],
            }));
        }
        Ok(())
    }

    pub fn quantize(&self, features: &[f32], rows: usize) -> Result<Quantized> {
        self.check_dim(features, rows)?;
        let d = self.config.dim;
        let nq = self.config.nq;
        let mut residual = features.to_vec();
        let mut values = vec![0.0; rows * d];
        let mut indices = vec![0u32; rows * nq];
        let mut residuals = Vec::with_capacity(nq);
        for (stage, book) in self.books.iter().enumerate() {
            let (idx, _) = nearest(book, &residual, rows, d);
            residuals.push(residual.clone());
            for (t, &i) in idx.iter().enumerate() {
                indices[t * nq + stage] = i as u32;
                let code = book.row(i);
                for j in 0..d {
                    residual[t * d + j] -= code[j];
                    values[t * d + j] += code[j];
                }
            }
        }
        Ok(Quantized {
            codes: CodeGrid {
                frames: rows,
                nq,
                indices,
            },
            values,
            residuals,
        })
    }

    pub fn dequantize(&self, grid: &CodeGrid) -> Result<Vec<f32>> {
        if grid.nq != self.config.nq {
            return Err(invalid(format!("grid has {} stages, quantizer {}", grid.nq, self.config.nq)));
        }
        let d = self.config.dim;
        let mut out = vec![0.0; grid.frames * d];
        for t in 0..grid.frames {
            for (stage, &i) in grid.row(t).iter().enumerate() {
                if i as usize >= self.config.codebook_size {
                    return Err(invalid(format!(
                        "code {i} at frame {t} stage {stage} outside codebook of {}",
                        self.config.codebook_size
                    )));
                }
                let code = self.books[stage].row(i as usize);
                for (o, c) in out[t * d..(t + 1) * d].iter_mut().zip(code) {
                    *o += c;
                }
            }
        }
        Ok(out)
    }

    /// EMA codebook update from one batch, followed by dead-code reseeding.
    pub fn ema_update(&mut self, q: &Quantized, rng: &mut impl Rng) {
        let d = self.config.dim;
        let k = self.config.codebook_size;
        let decay = self.config.decay;
        let rows = q.codes.frames;
        for stage in 0..self.config.nq {
            let residual = &q.residuals[stage];
            let mut batch_counts = vec![0.0f32; k];
            let mut batch_sums = vec![0.0f32; k * d];
            for t in 0..rows {
                let i = q.codes.get(t, stage) as usize;
                batch_counts[i] += 1.0;
                for j in 0..d {
                    batch_sums[i * d + j] += residual[t * d + j];
                }
            }
            let counts = &mut self.counts[stage];
            let sums = self.sums[stage].data_mut();
            for i in 1..k {
                counts[i] = decay * counts[i] + (1.0 - decay) * batch_counts[i];
                for j in 0..d {
                    sums[i * d + j] = decay * sums[i * d + j] + (1.0 - decay) * batch_sums[i * d + j];
                }
            }
            let book = self.books[stage].data_mut();
            for i in 1..k {
                let c = counts[i].max(1e-5);
                for j in 0..d {
                    book[i * d + j] = sums[i * d + j] / c;
                }
            }
            for i in 1..k {
                if counts[i] < self.config.dead_threshold {
                    self.dead_steps[stage][i] += 1;
                } else {
                    self.dead_steps[stage][i] = 0;
                }
                if self.dead_steps[stage][i] >= self.config.dead_patience && rows > 0 {
                    let r = rng.gen_range(0..rows);
                    let src = &residual[r * d..(r + 1) * d];
                    book[i * d..(i + 1) * d].copy_from_slice(src);
                    sums[i * d..(i + 1) * d].copy_from_slice(src);
                    counts[i] = 1.0;
                    self.dead_steps[stage][i] = 0;
                }
            }
        }
    }

    /// Fraction of codes selected at least once, averaged over stages.
    pub fn utilization(&self, grid: &CodeGrid) -> f32 {
        let k = self.config.codebook_size;
        let mut total = 0.0;
        for stage in 0..grid.nq {
            let mut used = vec![false; k];
            for t in 0..grid.frames {
                used[grid.get(t, stage) as usize] = true;
            }
            total += used.iter().filter(|u| **u).count() as f32 / k as f32;
        }
        total / grid.nq.max(1) as f32
    }

    pub fn all_finite(&self) -> bool {
        self.books.iter().all(|b| b.is_finite()) && self.counts.iter().flatten().all(|c| *c >= 0.0 && c.is_finite())
    }
}

/// Index of the nearest code for each row, and the squared distance.
fn nearest(book: &Tensor, x: &[f32], rows: usize, d: usize) -> (Vec<usize>, Vec<f32>) {
    let k = book.rows();
    let norms: Vec<f32> = (0..k).map(|i| book.row(i).iter().map(|v| v * v).sum()).collect();
    let mut dots = vec![0.0; rows * k];
    gemm(rows, d, k, x, false, book.data(), true, &mut dots, 0.0);
    let mut idx = Vec::with_capacity(rows);
    let mut dist = Vec::with_capacity(rows);
    for t in 0..rows {
        let xn: f32 = x[t * d..(t + 1) * d].iter().map(|v| v * v).sum();
        // ties resolve to the lowest index, so the zero code wins on exact ties
        let mut best = (0, f32::INFINITY);
        for i in 0..k {
            let v = norms[i] - 2.0 * dots[t * k + i];
            if v < best.1 {
                best = (i, v);
            }
        }
        idx.push(best.0);
        dist.push((best.1 + xn).max(0.0));
    }
    (idx, dist)
}

/// Mean squared norm of `c − ĉ` over rows.
pub fn commitment(c: &[f32], c_hat: &[f32], rows: usize) -> f32 {
    let total: f64 = c.iter().zip(c_hat).map(|(a, b)| ((a - b) as f64).powi(2)).sum();
    (total / rows.max(1) as f64) as f32
}
