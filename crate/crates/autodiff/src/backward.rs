//! Vector-Jacobian products for each recorded op.

use crate::graph::{accumulate, Graph, Op, Var};
use crate::kernels::{gelu_grad, gemm, gemm_strided};
use crate::tensor::Tensor;

fn like(g: &Graph, v: Var, data: Vec<f32>) -> Tensor {
    Tensor::new(g.value(v).shape().to_vec(), data).expect("gradient shape")
}

fn push(g: &Graph, grads: &mut [Option<Tensor>], v: Var, data: Vec<f32>) {
    if g.rg(v) {
        let t = like(g, v, data);
        accumulate(grads, v, t);
    }
}

fn elementwise(g: &Graph, grads: &mut [Option<Tensor>], x: Var, up: &Tensor, d: impl Fn(usize) -> f32) {
    if !g.rg(x) {
        return;
    }
    let data = up.data().iter().enumerate().map(|(i, u)| u * d(i)).collect();
    push(g, grads, x, data);
}

pub(crate) fn propagate(g: &Graph, node: usize, up: &Tensor, grads: &mut [Option<Tensor>]) {
    let out = &g.nodes[node].value;
    match &g.nodes[node].op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            push(g, grads, *a, up.data().to_vec());
            push(g, grads, *b, up.data().to_vec());
        }
        Op::Sub(a, b) => {
            push(g, grads, *a, up.data().to_vec());
            push(g, grads, *b, up.data().iter().map(|v| -v).collect());
        }
        Op::Mul(a, b) => {
            let (av, bv) = (g.value(*a).data(), g.value(*b).data());
            elementwise(g, grads, *a, up, |i| bv[i]);
            elementwise(g, grads, *b, up, |i| av[i]);
        }
        Op::AddRow(x, bias) => {
            push(g, grads, *x, up.data().to_vec());
            if g.rg(*bias) {
                let cols = g.value(*bias).numel();
                let mut db = vec![0.0; cols];
                for (i, u) in up.data().iter().enumerate() {
                    db[i % cols] += u;
                }
                push(g, grads, *bias, db);
            }
        }
        Op::MulScalarVar(x, s) => {
            let k = g.value(*s).item();
            elementwise(g, grads, *x, up, |_| k);
            if g.rg(*s) {
                let d: f32 = up.data().iter().zip(g.value(*x).data()).map(|(u, v)| u * v).sum();
                push(g, grads, *s, vec![d]);
            }
        }
        Op::Affine(x, scale) => elementwise(g, grads, *x, up, |_| *scale),
        Op::Tanh(x) => {
            let y = out.data();
            elementwise(g, grads, *x, up, |i| 1.0 - y[i] * y[i]);
        }
        Op::Gelu(x) => {
            let xv = g.value(*x).data();
            elementwise(g, grads, *x, up, |i| gelu_grad(xv[i]));
        }
        Op::Relu(x) => {
            let xv = g.value(*x).data();
            elementwise(g, grads, *x, up, |i| if xv[i] > 0.0 { 1.0 } else { 0.0 });
        }
        Op::Exp(x) => {
            let y = out.data();
            elementwise(g, grads, *x, up, |i| y[i]);
        }
        Op::Log(x) => {
            let xv = g.value(*x).data();
            elementwise(g, grads, *x, up, |i| 1.0 / xv[i]);
        }
        Op::Abs(x) => {
            let xv = g.value(*x).data();
            elementwise(g, grads, *x, up, |i| {
                if xv[i] > 0.0 {
                    1.0
                } else if xv[i] < 0.0 {
                    -1.0
                } else {
                    0.0
                }
            });
        }
        Op::Recip(x) => {
            let y = out.data();
            elementwise(g, grads, *x, up, |i| -y[i] * y[i]);
        }
        Op::MatMul(a, b) => {
            let (av, bv) = (g.value(*a), g.value(*b));
            let (m, k) = av.dims2();
            let n = out.cols();
            if g.rg(*a) {
                let mut da = vec![0.0; m * k];
                gemm(m, n, k, up.data(), false, bv.data(), true, &mut da, 0.0);
                push(g, grads, *a, da);
            }
            if g.rg(*b) {
                let mut db = vec![0.0; k * n];
                gemm(k, m, n, av.data(), true, up.data(), false, &mut db, 0.0);
                push(g, grads, *b, db);
            }
        }
        Op::Transpose(x) => {
            let (r, c) = out.dims2();
            let mut d = vec![0.0; r * c];
            for i in 0..r {
                for j in 0..c {
                    d[j * r + i] = up.data()[i * c + j];
                }
            }
            push(g, grads, *x, d);
        }
        Op::Reshape(x) => push(g, grads, *x, up.data().to_vec()),
        Op::Sum(x) => {
            let u = up.item();
            push(g, grads, *x, vec![u; g.value(*x).numel()]);
        }
        Op::Mean(x) => {
            let n = g.value(*x).numel();
            push(g, grads, *x, vec![up.item() / n as f32; n]);
        }
        Op::SegmentMean { x, segments } => {
            let cols = out.cols();
            let mut d = Vec::with_capacity(g.value(*x).numel());
            for (s, &len) in segments.iter().enumerate() {
                let inv = 1.0 / len as f32;
                let row = &up.data()[s * cols..(s + 1) * cols];
                for _ in 0..len {
                    d.extend(row.iter().map(|v| v * inv));
                }
            }
            push(g, grads, *x, d);
        }
        Op::RepeatRows { x, segments } => {
            let cols = out.cols();
            let mut d = vec![0.0; segments.len() * cols];
            let mut r = 0;
            for (s, &len) in segments.iter().enumerate() {
                for _ in 0..len {
                    for (dst, u) in d[s * cols..(s + 1) * cols]
                        .iter_mut()
                        .zip(&up.data()[r * cols..(r + 1) * cols])
                    {
                        *dst += u;
                    }
                    r += 1;
                }
            }
            push(g, grads, *x, d);
        }
        Op::Softmax {
            x,
            outer,
            len,
            inner,
        } => {
            let y = out.data();
            let u = up.data();
            let mut d = vec![0.0; y.len()];
            for o in 0..*outer {
                for i in 0..*inner {
                    let base = o * len * inner + i;
                    let dot: f32 = (0..*len).map(|j| y[base + j * inner] * u[base + j * inner]).sum();
                    for j in 0..*len {
                        let p = base + j * inner;
                        d[p] = y[p] * (u[p] - dot);
                    }
                }
            }
            push(g, grads, *x, d);
        }
        Op::LayerNorm {
            x,
            gamma,
            beta,
            xhat,
            inv_std,
        } => {
            let cols = out.cols();
            let rows = out.rows();
            let gm = g.value(*gamma).data();
            let u = up.data();
            if g.rg(*gamma) || g.rg(*beta) {
                let mut dg = vec![0.0; cols];
                let mut db = vec![0.0; cols];
                for r in 0..rows {
                    for c in 0..cols {
                        dg[c] += u[r * cols + c] * xhat[r * cols + c];
                        db[c] += u[r * cols + c];
                    }
                }
                push(g, grads, *gamma, dg);
                push(g, grads, *beta, db);
            }
            if g.rg(*x) {
                let mut dx = vec![0.0; rows * cols];
                let n = cols as f32;
                for r in 0..rows {
                    let mut sum_d = 0.0;
                    let mut sum_dx = 0.0;
                    for c in 0..cols {
                        let dxh = u[r * cols + c] * gm[c];
                        sum_d += dxh;
                        sum_dx += dxh * xhat[r * cols + c];
                    }
                    for c in 0..cols {
                        let dxh = u[r * cols + c] * gm[c];
                        dx[r * cols + c] =
                            inv_std[r] / n * (n * dxh - sum_d - xhat[r * cols + c] * sum_dx);
                    }
                }
                push(g, grads, *x, dx);
            }
        }
        Op::Attention {
            q,
            k,
            v,
            heads,
            segments,
            probs,
        } => attention_backward(g, grads, up, (*q, *k, *v), *heads, segments, probs),
        Op::Conv1d {
            x,
            w,
            b,
            segments,
            width,
            cols,
        } => {
            let rows = out.rows();
            let cout = out.cols();
            let cin = g.value(*x).cols();
            let wr = width * cin;
            if g.rg(*w) {
                let mut dw = vec![0.0; wr * cout];
                gemm(wr, rows, cout, cols, true, up.data(), false, &mut dw, 0.0);
                push(g, grads, *w, dw);
            }
            if g.rg(*b) {
                let mut db = vec![0.0; cout];
                for r in 0..rows {
                    for (d, u) in db.iter_mut().zip(&up.data()[r * cout..(r + 1) * cout]) {
                        *d += u;
                    }
                }
                push(g, grads, *b, db);
            }
            if g.rg(*x) {
                let mut dcols = vec![0.0; rows * wr];
                gemm(rows, cout, wr, up.data(), false, g.value(*w).data(), true, &mut dcols, 0.0);
                let mut dx = vec![0.0; rows * cin];
                let half = (*width / 2) as isize;
                let mut start = 0usize;
                for &len in segments {
                    for t in 0..len {
                        let src_row = (start + t) * wr;
                        for j in 0..*width {
                            let dst = t as isize + j as isize - half;
                            if dst < 0 || dst >= len as isize {
                                continue;
                            }
                            let dst_row = (start + dst as usize) * cin;
                            for c in 0..cin {
                                dx[dst_row + c] += dcols[src_row + j * cin + c];
                            }
                        }
                    }
                    start += len;
                }
                push(g, grads, *x, dx);
            }
        }
        Op::ConcatRows(parts) => {
            let mut off = 0;
            for p in parts {
                let n = g.value(*p).numel();
                push(g, grads, *p, up.data()[off..off + n].to_vec());
                off += n;
            }
        }
        Op::ConcatCols(parts) => {
            let rows = out.rows();
            let total = out.cols();
            let mut off = 0;
            for p in parts {
                let c = g.value(*p).cols();
                if g.rg(*p) {
                    let mut d = Vec::with_capacity(rows * c);
                    for r in 0..rows {
                        d.extend_from_slice(&up.data()[r * total + off..r * total + off + c]);
                    }
                    push(g, grads, *p, d);
                }
                off += c;
            }
        }
        Op::IndexRows { x, idx } => {
            if g.rg(*x) {
                let cols = out.cols();
                let mut d = vec![0.0; g.value(*x).numel()];
                for (r, &i) in idx.iter().enumerate() {
                    for (dst, u) in d[i * cols..(i + 1) * cols]
                        .iter_mut()
                        .zip(&up.data()[r * cols..(r + 1) * cols])
                    {
                        *dst += u;
                    }
                }
                push(g, grads, *x, d);
            }
        }
        Op::CrossEntropy {
            logits,
            targets,
            probs,
        } => {
            let classes = g.value(*logits).cols();
            let scale = up.item() / targets.len().max(1) as f32;
            let mut d: Vec<f32> = probs.iter().map(|p| p * scale).collect();
            for (r, &t) in targets.iter().enumerate() {
                d[r * classes + t] -= scale;
            }
            push(g, grads, *logits, d);
        }
        Op::Cosine { a, b, na, nb } => {
            let c = out.item();
            let u = up.item();
            let (av, bv) = (g.value(*a).data(), g.value(*b).data());
            let inv = 1.0 / (na * nb);
            if g.rg(*a) {
                let d = av
                    .iter()
                    .zip(bv)
                    .map(|(x, y)| u * (y * inv - c * x / (na * na)))
                    .collect();
                push(g, grads, *a, d);
            }
            if g.rg(*b) {
                let d = av
                    .iter()
                    .zip(bv)
                    .map(|(x, y)| u * (x * inv - c * y / (nb * nb)))
                    .collect();
                push(g, grads, *b, d);
            }
        }
        Op::NormalizeRows { x, norms } => {
            let cols = out.cols();
            let y = out.data();
            let u = up.data();
            let mut d = vec![0.0; y.len()];
            for (r, n) in norms.iter().enumerate() {
                let s = r * cols;
                let dot: f32 = (0..cols).map(|c| y[s + c] * u[s + c]).sum();
                for c in 0..cols {
                    d[s + c] = (u[s + c] - y[s + c] * dot) / n;
                }
            }
            push(g, grads, *x, d);
        }
        Op::GradReverse { x, scale } => elementwise(g, grads, *x, up, |_| -*scale),
    }
}

fn attention_backward(
    g: &Graph,
    grads: &mut [Option<Tensor>],
    up: &Tensor,
    (q, k, v): (Var, Var, Var),
    heads: usize,
    segments: &[usize],
    probs: &[f32],
) {
    let (qv, kv, vv) = (g.value(q), g.value(k), g.value(v));
    let (rows, dim) = qv.dims2();
    let dh = dim / heads;
    let scale = 1.0 / (dh as f32).sqrt();
    let mut dq = vec![0.0f32; rows * dim];
    let mut dk = vec![0.0f32; rows * dim];
    let mut dv = vec![0.0f32; rows * dim];
    let mut start = 0;
    let mut poff = 0;
    let max_len = segments.iter().copied().max().unwrap_or(0);
    let mut dp = vec![0.0f32; max_len * max_len];
    for &len in segments {
        for h in 0..heads {
            let p = &probs[poff..poff + len * len];
            let col = start * dim + h * dh;
            let ds = &mut dp[..len * len];
            // SAFETY: all views are len×dh column slices of N×D buffers or
            // len×len blocks, matching the forward pass.
            unsafe {
                // dV = Pᵀ dO
                gemm_strided(
                    len, len, dh,
                    p.as_ptr(), 1, len as isize,
                    up.data().as_ptr().add(col), dim as isize, 1,
                    dv.as_mut_ptr().add(col), dim as isize, 1,
                    1.0, 0.0,
                );
                // dP = dO Vᵀ
                gemm_strided(
                    len, dh, len,
                    up.data().as_ptr().add(col), dim as isize, 1,
                    vv.data().as_ptr().add(col), 1, dim as isize,
                    ds.as_mut_ptr(), len as isize, 1,
                    1.0, 0.0,
                );
            }
            for i in 0..len {
                let pr = &p[i * len..(i + 1) * len];
                let dr = &mut ds[i * len..(i + 1) * len];
                let dot: f32 = pr.iter().zip(dr.iter()).map(|(a, b)| a * b).sum();
                for (d, pp) in dr.iter_mut().zip(pr) {
                    *d = pp * (*d - dot);
                }
            }
            unsafe {
                // dQ = dS K · scale
                gemm_strided(
                    len, len, dh,
                    ds.as_ptr(), len as isize, 1,
                    kv.data().as_ptr().add(col), dim as isize, 1,
                    dq.as_mut_ptr().add(col), dim as isize, 1,
                    scale, 0.0,
                );
                // dK = dSᵀ Q · scale
                gemm_strided(
                    len, len, dh,
                    ds.as_ptr(), 1, len as isize,
                    qv.data().as_ptr().add(col), dim as isize, 1,
                    dk.as_mut_ptr().add(col), dim as isize, 1,
                    scale, 0.0,
                );
            }
            poff += len * len;
        }
        start += len;
    }
    push(g, grads, q, dq);
    push(g, grads, k, dk);
    push(g, grads, v, dv);
}
