//! Forward definitions of every recorded operation.

use crate::error::{AutodiffError, Result};
use crate::graph::{Graph, Op, Var};
use crate::kernels::{gelu, gemm, gemm_strided, log_sum_exp, softmax_in_place};
use crate::tensor::Tensor;

const LN_EPS: f32 = 1e-5;
const COSINE_MIN_NORM: f32 = 1e-12;

fn mismatch(op: &'static str, a: &[usize], b: &[usize]) -> AutodiffError {
    AutodiffError::ShapeMismatch {
        op,
        left: a.to_vec(),
        right: b.to_vec(),
    }
}

pub(crate) fn check_segments(op: &'static str, segments: &[usize], rows: usize) -> Result<()> {
    let total: usize = segments.iter().sum();
    if total != rows || segments.contains(&0) {
        return Err(AutodiffError::Invalid(format!(
            "{op}: segments {segments:?} do not tile {rows} rows"
        )));
    }
    Ok(())
}

impl Graph {
    fn unary(&mut self, x: Var, op: Op, f: impl Fn(f32) -> f32) -> Var {
        let xv = self.value(x);
        let out = Tensor::new(xv.shape().to_vec(), xv.data().iter().map(|&a| f(a)).collect())
            .expect("same shape");
        let rg = self.rg(x);
        self.push(out, op, rg)
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        op: Op,
        f: impl Fn(f32, f32) -> f32,
    ) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(mismatch(name, av.shape(), bv.shape()));
        }
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect();
        let out = Tensor::new(av.shape().to_vec(), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, op, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, Op::Mul(a, b), |x, y| x * y)
    }

    /// Adds a length-`cols` vector to every row of `x`.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (xv, bv) = (self.value(x), self.value(bias));
        let (_, cols) = xv.dims2();
        if bv.numel() != cols {
            return Err(mismatch("add_row", xv.shape(), bv.shape()));
        }
        let mut out = xv.clone();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            *v += bv.data()[i % cols];
        }
        let rg = self.rg(x) || self.rg(bias);
        Ok(self.push(out, Op::AddRow(x, bias), rg))
    }

    /// Multiplies every element of `x` by the single value held in `s`.
    pub fn mul_scalar_var(&mut self, x: Var, s: Var) -> Result<Var> {
        if self.value(s).numel() != 1 {
            return Err(mismatch("mul_scalar_var", self.shape(x), self.shape(s)));
        }
        let k = self.value(s).item();
        let xv = self.value(x);
        let out = Tensor::new(xv.shape().to_vec(), xv.data().iter().map(|v| v * k).collect())?;
        let rg = self.rg(x) || self.rg(s);
        Ok(self.push(out, Op::MulScalarVar(x, s), rg))
    }

    /// `scale * x + shift`.
    pub fn affine(&mut self, x: Var, scale: f32, shift: f32) -> Var {
        self.unary(x, Op::Affine(x, scale), |v| scale * v + shift)
    }

    pub fn scale(&mut self, x: Var, scale: f32) -> Var {
        self.affine(x, scale, 0.0)
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.affine(x, -1.0, 0.0)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, Op::Tanh(x), f32::tanh)
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        self.unary(x, Op::Gelu(x), gelu)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, Op::Relu(x), |v| v.max(0.0))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, Op::Exp(x), f32::exp)
    }

    pub fn log(&mut self, x: Var) -> Var {
        self.unary(x, Op::Log(x), f32::ln)
    }

    pub fn abs(&mut self, x: Var) -> Var {
        self.unary(x, Op::Abs(x), f32::abs)
    }

    pub fn recip(&mut self, x: Var) -> Var {
        self.unary(x, Op::Recip(x), |v| 1.0 / v)
    }

    /// Matrix product of two 2-D tensors (vectors are treated as one row).
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let (m, k) = av.dims2();
        let (k2, n) = if bv.rank() == 1 {
            (bv.numel(), 1)
        } else {
            bv.dims2()
        };
        if k != k2 || bv.rank() > 2 {
            return Err(mismatch("matmul", av.shape(), bv.shape()));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, av.data(), false, bv.data(), false, &mut out, 0.0);
        let out = Tensor::new(vec![m, n], out)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::MatMul(a, b), rg))
    }

    pub fn transpose(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let (r, c) = xv.dims2();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = xv.data()[i * c + j];
            }
        }
        let rg = self.rg(x);
        self.push(Tensor::new(vec![c, r], out).unwrap(), Op::Transpose(x), rg)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape)?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::Reshape(x), rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s: f32 = self.value(x).data().iter().sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let s: f32 = xv.data().iter().sum::<f32>() / xv.numel() as f32;
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Mean(x), rg)
    }

    /// Mean of squared differences.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let d = self.sub(a, b)?;
        let sq = self.mul(d, d)?;
        Ok(self.mean(sq))
    }

    /// Per-segment mean over rows: `N×D → S×D`.
    pub fn segment_mean(&mut self, x: Var, segments: &[usize]) -> Result<Var> {
        let xv = self.value(x);
        let (rows, cols) = xv.dims2();
        check_segments("segment_mean", segments, rows)?;
        let mut out = vec![0.0; segments.len() * cols];
        let mut start = 0;
        for (s, &len) in segments.iter().enumerate() {
            let dst = &mut out[s * cols..(s + 1) * cols];
            for r in start..start + len {
                for (d, v) in dst.iter_mut().zip(xv.row(r)) {
                    *d += v;
                }
            }
            let inv = 1.0 / len as f32;
            dst.iter_mut().for_each(|v| *v *= inv);
            start += len;
        }
        let out = Tensor::new(vec![segments.len(), cols], out)?;
        let rg = self.rg(x);
        Ok(self.push(
            out,
            Op::SegmentMean {
                x,
                segments: segments.to_vec(),
            },
            rg,
        ))
    }

    /// Broadcasts row `s` of `x` (`S×D`) to every row of segment `s`.
    pub fn repeat_rows(&mut self, x: Var, segments: &[usize]) -> Result<Var> {
        let xv = self.value(x);
        let (rows, cols) = xv.dims2();
        if rows != segments.len() {
            return Err(AutodiffError::Invalid(format!(
                "repeat_rows: {rows} rows for {} segments",
                segments.len()
            )));
        }
        let total: usize = segments.iter().sum();
        let mut out = Vec::with_capacity(total * cols);
        for (s, &len) in segments.iter().enumerate() {
            for _ in 0..len {
                out.extend_from_slice(xv.row(s));
            }
        }
        let out = Tensor::new(vec![total, cols], out)?;
        let rg = self.rg(x);
        Ok(self.push(
            out,
            Op::RepeatRows {
                x,
                segments: segments.to_vec(),
            },
            rg,
        ))
    }

    /// Max-subtracted softmax along `axis`.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let xv = self.value(x);
        let shape = xv.shape().to_vec();
        let rank = shape.len().max(1);
        if axis >= rank {
            return Err(AutodiffError::InvalidAxis { axis, rank });
        }
        let dims = if shape.is_empty() { vec![1] } else { shape.clone() };
        let outer: usize = dims[..axis].iter().product();
        let len = dims[axis];
        let inner: usize = dims[axis + 1..].iter().product();
        let mut out = xv.data().to_vec();
        let mut buf = vec![0.0; len];
        for o in 0..outer {
            for i in 0..inner {
                let base = o * len * inner + i;
                for (j, b) in buf.iter_mut().enumerate() {
                    *b = out[base + j * inner];
                }
                softmax_in_place(&mut buf);
                for (j, b) in buf.iter().enumerate() {
                    out[base + j * inner] = *b;
                }
            }
        }
        let rg = self.rg(x);
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::Softmax {
                x,
                outer,
                len,
                inner,
            },
            rg,
        ))
    }

    /// Row-wise layer normalization with learned gain and shift.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let xv = self.value(x);
        let (rows, cols) = xv.dims2();
        if self.value(gamma).numel() != cols || self.value(beta).numel() != cols {
            return Err(mismatch("layer_norm", xv.shape(), self.shape(gamma)));
        }
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut xhat = vec![0.0; rows * cols];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; rows * cols];
        for r in 0..rows {
            let row = xv.row(r);
            let mean = row.iter().sum::<f32>() / cols as f32;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / cols as f32;
            let is = 1.0 / (var + LN_EPS).sqrt();
            inv_std[r] = is;
            for c in 0..cols {
                let h = (row[c] - mean) * is;
                xhat[r * cols + c] = h;
                out[r * cols + c] = h * g[c] + b[c];
            }
        }
        let out = Tensor::new(xv.shape().to_vec(), out)?;
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            rg,
        ))
    }

    /// Multi-head scaled dot-product attention over `N×D` query, key and
    /// value matrices. Rows attend only within their own segment; with
    /// `causal` a row also ignores later rows of its segment.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        segments: &[usize],
        causal: bool,
    ) -> Result<Var> {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        if qv.shape() != kv.shape() || qv.shape() != vv.shape() || qv.rank() != 2 {
            return Err(mismatch("attention", qv.shape(), kv.shape()));
        }
        let (rows, dim) = qv.dims2();
        if heads == 0 || dim % heads != 0 {
            return Err(AutodiffError::Invalid(format!(
                "attention: dim {dim} not divisible by {heads} heads"
            )));
        }
        check_segments("attention", segments, rows)?;
        let dh = dim / heads;
        let scale = 1.0 / (dh as f32).sqrt();
        let probs_len: usize = segments.iter().map(|l| l * l).sum::<usize>() * heads;
        let mut probs = vec![0.0f32; probs_len];
        let mut out = vec![0.0f32; rows * dim];
        let mut start = 0;
        let mut poff = 0;
        for &len in segments {
            for h in 0..heads {
                let p = &mut probs[poff..poff + len * len];
                let col = start * dim + h * dh;
                // SAFETY: rows start..start+len and columns h*dh..(h+1)*dh
                // lie inside the N×D buffers; p is len×len.
                unsafe {
                    gemm_strided(
                        len,
                        dh,
                        len,
                        qv.data().as_ptr().add(col),
                        dim as isize,
                        1,
                        kv.data().as_ptr().add(col),
                        1,
                        dim as isize,
                        p.as_mut_ptr(),
                        len as isize,
                        1,
                        scale,
                        0.0,
                    );
                }
                for i in 0..len {
                    let row = &mut p[i * len..(i + 1) * len];
                    if causal {
                        row[i + 1..].iter_mut().for_each(|x| *x = f32::NEG_INFINITY);
                    }
                    softmax_in_place(row);
                }
                unsafe {
                    gemm_strided(
                        len,
                        len,
                        dh,
                        p.as_ptr(),
                        len as isize,
                        1,
                        vv.data().as_ptr().add(col),
                        dim as isize,
                        1,
                        out.as_mut_ptr().add(col),
                        dim as isize,
                        1,
                        1.0,
                        0.0,
                    );
                }
                poff += len * len;
            }
            start += len;
        }
        let out = Tensor::new(vec![rows, dim], out)?;
        let rg = self.rg(q) || self.rg(k) || self.rg(v);
        Ok(self.push(
            out,
            Op::Attention {
                q,
                k,
                v,
                heads,
                segments: segments.to_vec(),
                probs,
            },
            rg,
        ))
    }

    /// Temporal convolution with zero "same" padding inside each segment.
    /// `w` is `(width·C_in)×C_out`, tap-major; `b` has `C_out` entries.
    pub fn conv1d(&mut self, x: Var, w: Var, b: Var, segments: &[usize]) -> Result<Var> {
        let (xv, wv, bv) = (self.value(x), self.value(w), self.value(b));
        let (rows, cin) = xv.dims2();
        let (wr, cout) = wv.dims2();
        if cin == 0 || wr % cin != 0 || (wr / cin) % 2 == 0 || bv.numel() != cout {
            return Err(mismatch("conv1d", xv.shape(), wv.shape()));
        }
        check_segments("conv1d", segments, rows)?;
        let width = wr / cin;
        let cols = im2col(xv.data(), cin, width, segments);
        let mut out = vec![0.0; rows * cout];
        gemm(rows, wr, cout, &cols, false, wv.data(), false, &mut out, 0.0);
        for r in 0..rows {
            for (o, bb) in out[r * cout..(r + 1) * cout].iter_mut().zip(bv.data()) {
                *o += bb;
            }
        }
        let out = Tensor::new(vec![rows, cout], out)?;
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        Ok(self.push(
            out,
            Op::Conv1d {
                x,
                w,
                b,
                segments: segments.to_vec(),
                width,
                cols,
            },
            rg,
        ))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let cols = self.value(parts[0]).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let pv = self.value(p);
            if pv.cols() != cols {
                return Err(mismatch("concat_rows", self.shape(parts[0]), pv.shape()));
            }
            rows += pv.rows();
            data.extend_from_slice(pv.data());
        }
        let rg = parts.iter().any(|p| self.rg(*p));
        Ok(self.push(
            Tensor::new(vec![rows, cols], data)?,
            Op::ConcatRows(parts.to_vec()),
            rg,
        ))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = self.value(parts[0]).rows();
        let mut total = 0;
        for &p in parts {
            let pv = self.value(p);
            if pv.rows() != rows {
                return Err(mismatch("concat_cols", self.shape(parts[0]), pv.shape()));
            }
            total += pv.cols();
        }
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(r));
            }
        }
        let rg = parts.iter().any(|p| self.rg(*p));
        Ok(self.push(
            Tensor::new(vec![rows, total], data)?,
            Op::ConcatCols(parts.to_vec()),
            rg,
        ))
    }

    /// Gathers rows by index (embedding lookup); indices may repeat.
    pub fn index_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let xv = self.value(x);
        let (rows, cols) = xv.dims2();
        let mut data = Vec::with_capacity(idx.len() * cols);
        for &i in idx {
            if i >= rows {
                return Err(AutodiffError::TargetOutOfRange {
                    target: i,
                    classes: rows,
                });
            }
            data.extend_from_slice(xv.row(i));
        }
        let rg = self.rg(x);
        Ok(self.push(
            Tensor::new(vec![idx.len(), cols], data)?,
            Op::IndexRows {
                x,
                idx: idx.to_vec(),
            },
            rg,
        ))
    }

    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        self.index_rows(table, ids)
    }

    /// Mean over rows of `-log softmax(logits)[target]`.
    pub fn cross_entropy_logits(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let lv = self.value(logits);
        let (rows, classes) = lv.dims2();
        if targets.len() != rows {
            return Err(mismatch("cross_entropy", lv.shape(), &[targets.len()]));
        }
        let mut probs = lv.data().to_vec();
        let mut loss = 0.0f64;
        for (r, &t) in targets.iter().enumerate() {
            if t >= classes {
                return Err(AutodiffError::TargetOutOfRange { target: t, classes });
            }
            let row = lv.row(r);
            loss += (log_sum_exp(row) - row[t]) as f64;
            softmax_in_place(&mut probs[r * classes..(r + 1) * classes]);
        }
        let loss = (loss / rows.max(1) as f64) as f32;
        let rg = self.rg(logits);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            rg,
        ))
    }

    /// Cosine similarity of two equally shaped tensors, flattened.
    pub fn cosine_similarity(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(mismatch("cosine_similarity", av.shape(), bv.shape()));
        }
        let (na, nb) = (av.norm(), bv.norm());
        for n in [na, nb] {
            if !(n >= COSINE_MIN_NORM) {
                return Err(AutodiffError::DegenerateVector { norm: n });
            }
        }
        let dot: f32 = av.data().iter().zip(bv.data()).map(|(x, y)| x * y).sum();
        let c = (dot / (na * nb)).clamp(-1.0, 1.0);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::scalar(c), Op::Cosine { a, b, na, nb }, rg))
    }

    /// Scales each row to unit Euclidean norm.
    pub fn normalize_rows(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let (rows, _) = xv.dims2();
        let mut out = xv.clone();
        let mut norms = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = out.row_mut(r);
            let n = row.iter().map(|v| v * v).sum::<f32>().sqrt();
            if !(n >= COSINE_MIN_NORM) {
                return Err(AutodiffError::DegenerateVector { norm: n });
            }
            row.iter_mut().for_each(|v| *v /= n);
            norms.push(n);
        }
        let rg = self.rg(x);
        Ok(self.push(out, Op::NormalizeRows { x, norms }, rg))
    }

    /// Identity forward; the backward pass multiplies gradients by `-scale`.
    pub fn gradient_reversal(&mut self, x: Var, scale: f32) -> Var {
        let out = self.value(x).clone();
        let rg = self.rg(x);
        self.push(out, Op::GradReverse { x, scale }, rg)
    }
}

/// Builds the `N×(width·C)` patch matrix for a same-padded convolution.
pub(crate) fn im2col(x: &[f32], cin: usize, width: usize, segments: &[usize]) -> Vec<f32> {
    let rows: usize = segments.iter().sum();
    let half = (width / 2) as isize;
    let mut cols = vec![0.0; rows * width * cin];
    let mut start = 0usize;
    for &len in segments {
        for t in 0..len {
            let dst_row = (start + t) * width * cin;
            for j in 0..width {
                let src = t as isize + j as isize - half;
                if src < 0 || src >= len as isize {
                    continue;
                }
                let src_row = (start + src as usize) * cin;
                cols[dst_row + j * cin..dst_row + (j + 1) * cin]
                    .copy_from_slice(&x[src_row..src_row + cin]);
            }
        }
        start += len;
    }
    cols
}
