// Forward ops recorded on a Graph, and their backward rules.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::kernels;
use super::{accumulate, Graph, Op, Var};
use crate::tensor::{Result, Tensor, TensorError};

fn shape_err(op: &'static str, lhs: &[usize], rhs: &[usize]) -> TensorError {
    TensorError::ShapeMismatch {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    }
}

fn invalid(op: &'static str, reason: impl Into<String>) -> TensorError {
    TensorError::InvalidArgument {
        op,
        reason: reason.into(),
    }
}

/// Builds the dropout keep-mask (already scaled by `1/(1-p)`) for `n` elements.
pub fn dropout_mask(n: usize, p: f64, seed: u64) -> Vec<f64> {
    if p == 0.0 {
        return vec![1.0; n];
    }
    let keep = 1.0 / (1.0 - p);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| if rng.random::<f64>() < p { 0.0 } else { keep })
        .collect()
}

impl Graph {
    fn binary_same(&mut self, name: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Result<(usize, usize, Tensor)> {
        let (ia, ib) = (self.index(a)?, self.index(b)?);
        let out = self.nodes[ia].value.zip_map(&self.nodes[ib].value, name, f)?;
        Ok((ia, ib, out))
    }

    fn unary(&mut self, name: &'static str, x: Var, f: impl Fn(f64) -> f64, op: impl FnOnce(usize) -> Op) -> Result<Var> {
        let ix = self.index(x)?;
        let out = self.nodes[ix].value.map(f);
        self.push(name, out, op(ix), &[ix])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib, out) = self.binary_same("add", a, b, |x, y| x + y)?;
        self.push("add", out, Op::Add(ia, ib), &[ia, ib])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib, out) = self.binary_same("sub", a, b, |x, y| x - y)?;
        self.push("sub", out, Op::Sub(ia, ib), &[ia, ib])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib, out) = self.binary_same("mul", a, b, |x, y| x * y)?;
        self.push("mul", out, Op::Mul(ia, ib), &[ia, ib])
    }

    fn trailing(&self, name: &'static str, ia: usize, ib: usize) -> Result<usize> {
        let (sa, sb) = (self.nodes[ia].value.shape(), self.nodes[ib].value.shape());
        if sb.len() > sa.len() || sa[sa.len() - sb.len()..] != *sb {
            return Err(shape_err(name, sa, sb));
        }
        Ok(self.nodes[ib].value.numel())
    }

    /// `a + b` where `b`'s shape equals the trailing dimensions of `a`.
    pub fn add_broadcast(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.index(a)?, self.index(b)?);
        let inner = self.trailing("add_broadcast", ia, ib)?;
        let bv = self.nodes[ib].value.data();
        let mut out = self.nodes[ia].value.clone();
        for chunk in out.data_mut().chunks_mut(inner) {
            for (o, &v) in chunk.iter_mut().zip(bv) {
                *o += v;
            }
        }
        self.push("add_broadcast", out, Op::AddTrailing(ia, ib), &[ia, ib])
    }

    /// `a * b` where `b`'s shape equals the trailing dimensions of `a`.
    pub fn mul_broadcast(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.index(a)?, self.index(b)?);
        let inner = self.trailing("mul_broadcast", ia, ib)?;
        let bv = self.nodes[ib].value.data();
        let mut out = self.nodes[ia].value.clone();
        for chunk in out.data_mut().chunks_mut(inner) {
            for (o, &v) in chunk.iter_mut().zip(bv) {
                *o *= v;
            }
        }
        self.push("mul_broadcast", out, Op::MulTrailing(ia, ib), &[ia, ib])
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        self.unary("scale", x, |v| v * c, |ix| Op::Scale(ix, c))
    }

    /// Batched matrix product over the last two axes.
    ///
    /// `b` is either rank 2 (shared across the batch) or has the same leading
    /// batch dimensions as `a`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.index(a)?, self.index(b)?);
        let (sa, sb) = (self.nodes[ia].value.shape(), self.nodes[ib].value.shape());
        if sa.len() < 2 || sb.len() < 2 {
            return Err(shape_err("matmul", sa, sb));
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (kb, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        let shared_rhs = sb.len() == 2;
        if k != kb || (!shared_rhs && sa[..sa.len() - 2] != sb[..sb.len() - 2]) {
            return Err(shape_err("matmul", sa, sb));
        }
        let batch: usize = sa[..sa.len() - 2].iter().product();
        let mut shape = sa[..sa.len() - 2].to_vec();
        shape.extend([m, n]);
        let data = kernels::matmul(
            self.nodes[ia].value.data(),
            self.nodes[ib].value.data(),
            batch,
            m,
            k,
            n,
            shared_rhs,
        );
        let out = Tensor::new(shape, data)?;
        self.push("matmul", out, Op::MatMul { a: ia, b: ib, shared_rhs }, &[ia, ib])
    }

    pub fn permute(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let ix = self.index(x)?;
        let shape = self.nodes[ix].value.shape();
        let mut sorted = axes.to_vec();
        sorted.sort_unstable();
        if axes.len() != shape.len() || sorted.iter().enumerate().any(|(i, &a)| i != a) {
            return Err(invalid("permute", format!("axes {axes:?} for shape {shape:?}")));
        }
        let (data, out_shape) = kernels::permute(self.nodes[ix].value.data(), shape, axes);
        let out = Tensor::new(out_shape, data)?;
        self.push("permute", out, Op::Permute { x: ix, axes: axes.to_vec() }, &[ix])
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let rank = self.value(x)?.rank();
        if rank < 2 {
            return Err(invalid("transpose", "rank < 2"));
        }
        let mut axes: Vec<usize> = (0..rank).collect();
        axes.swap(rank - 2, rank - 1);
        self.permute(x, &axes)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let ix = self.index(x)?;
        let out = self.nodes[ix].value.clone().reshape(shape)?;
        self.push("reshape", out, Op::Reshape(ix), &[ix])
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let ix = self.index(x)?;
        let out = Tensor::scalar(self.nodes[ix].value.sum());
        self.push("sum", out, Op::Sum(ix), &[ix])
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let ix = self.index(x)?;
        let v = &self.nodes[ix].value;
        if v.numel() == 0 {
            return Err(invalid("mean", "empty tensor"));
        }
        let out = Tensor::scalar(v.sum() / v.numel() as f64);
        self.push("mean", out, Op::Mean(ix), &[ix])
    }

    pub fn square(&mut self, x: Var) -> Result<Var> {
        self.unary("square", x, |v| v * v, Op::Square)
    }

    pub fn abs(&mut self, x: Var) -> Result<Var> {
        self.unary("abs", x, f64::abs, Op::Abs)
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.unary("exp", x, f64::exp, Op::Exp)
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        self.unary("gelu", x, kernels::gelu, Op::Gelu)
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let ix = self.index(x)?;
        let v = &self.nodes[ix].value;
        let d = *v.shape().last().ok_or_else(|| invalid("softmax", "scalar input"))?;
        let mut out = v.clone();
        for row in out.data_mut().chunks_mut(d) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for r in row.iter_mut() {
                *r = (*r - max).exp();
                total += *r;
            }
            for r in row.iter_mut() {
                *r /= total;
            }
        }
        self.push("softmax", out, Op::Softmax(ix), &[ix])
    }

    /// Normalizes the last axis to zero mean and unit variance.
    pub fn layer_norm(&mut self, x: Var, eps: f64) -> Result<Var> {
        let ix = self.index(x)?;
        let v = &self.nodes[ix].value;
        let d = *v.shape().last().ok_or_else(|| invalid("layer_norm", "scalar input"))?;
        let mut out = v.clone();
        let mut inv_std = Vec::with_capacity(v.numel() / d.max(1));
        for row in out.data_mut().chunks_mut(d) {
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|r| (r - mean) * (r - mean)).sum::<f64>() / d as f64;
            let r = 1.0 / (var + eps).sqrt();
            for val in row.iter_mut() {
                *val = (*val - mean) * r;
            }
            inv_std.push(r);
        }
        self.push("layer_norm", out, Op::LayerNorm { x: ix, inv_std }, &[ix])
    }

    /// Moving average with replicate padding along axis 1 of a `[B, L, C]` tensor.
    ///
    /// Output length equals input length. `kernel` must be odd.
    pub fn avg_pool1d(&mut self, x: Var, kernel: usize) -> Result<Var> {
        let ix = self.index(x)?;
        let v = &self.nodes[ix].value;
        let &[b, l, c] = v.shape() else {
            return Err(invalid("avg_pool1d", format!("expected [B, L, C], got {:?}", v.shape())));
        };
        if kernel == 0 || kernel % 2 == 0 {
            return Err(invalid("avg_pool1d", format!("kernel {kernel} must be odd")));
        }
        let out = Tensor::new(v.shape().to_vec(), kernels::avg_pool(v.data(), b, l, c, kernel))?;
        self.push("avg_pool1d", out, Op::AvgPool { x: ix, kernel }, &[ix])
    }

    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let ix = self.index(x)?;
        let v = &self.nodes[ix].value;
        if axis >= v.rank() || start + len > v.shape()[axis] {
            return Err(invalid("slice", format!("[{start}, {}) on axis {axis} of {:?}", start + len, v.shape())));
        }
        let (outer, n, inner) = kernels::axis_extents(v.shape(), axis);
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * n * inner + start * inner;
            data.extend_from_slice(&v.data()[base..base + len * inner]);
        }
        let mut shape = v.shape().to_vec();
        shape[axis] = len;
        let out = Tensor::new(shape, data)?;
        self.push("slice", out, Op::Slice { x: ix, axis, start }, &[ix])
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let idx: Vec<usize> = parts.iter().map(|&p| self.index(p)).collect::<Result<_>>()?;
        let first = idx.first().ok_or_else(|| invalid("concat", "no inputs"))?;
        let base_shape = self.nodes[*first].value.shape().to_vec();
        if axis >= base_shape.len() {
            return Err(invalid("concat", format!("axis {axis} out of range")));
        }
        let mut total = 0;
        for &i in &idx {
            let s = self.nodes[i].value.shape();
            let compatible = s.len() == base_shape.len()
                && s.iter().zip(&base_shape).enumerate().all(|(d, (a, b))| d == axis || a == b);
            if !compatible {
                return Err(shape_err("concat", &base_shape, s));
            }
            total += s[axis];
        }
        let (outer, _, inner) = kernels::axis_extents(&base_shape, axis);
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &i in &idx {
                let v = &self.nodes[i].value;
                let n = v.shape()[axis];
                data.extend_from_slice(&v.data()[o * n * inner..(o + 1) * n * inner]);
            }
        }
        let mut shape = base_shape;
        shape[axis] = total;
        let out = Tensor::new(shape, data)?;
        self.push("concat", out, Op::Concat { parts: idx.clone(), axis }, &idx)
    }

    /// Inverted dropout with a seeded mask: kept values are scaled by `1/(1-p)`.
    pub fn dropout(&mut self, x: Var, p: f64, seed: u64) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(invalid("dropout", format!("p = {p} outside [0, 1)")));
        }
        let ix = self.index(x)?;
        let mask = dropout_mask(self.nodes[ix].value.numel(), p, seed);
        let mut out = self.nodes[ix].value.clone();
        for (o, m) in out.data_mut().iter_mut().zip(&mask) {
            *o *= m;
        }
        self.push("dropout", out, Op::Dropout { x: ix, mask }, &[ix])
    }

    /// Multiplies by a constant mask; no gradient flows into the mask.
    pub fn mask_mul(&mut self, x: Var, mask: &Tensor) -> Result<Var> {
        let ix = self.index(x)?;
        let out = self.nodes[ix].value.zip_map(mask, "mask_mul", |a, m| a * m)?;
        let mask = mask.data().to_vec();
        self.push("mask_mul", out, Op::MaskMul { x: ix, mask }, &[ix])
    }

    /// Mean squared error between equally shaped tensors.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.index(a)?, self.index(b)?);
        let (va, vb) = (&self.nodes[ia].value, &self.nodes[ib].value);
        va.expect_same_shape(vb, "mse")?;
        if va.numel() == 0 {
            return Err(invalid("mse", "empty tensors"));
        }
        let total: f64 = va.data().iter().zip(vb.data()).map(|(x, y)| (x - y) * (x - y)).sum();
        let out = Tensor::scalar(total / va.numel() as f64);
        self.push("mse", out, Op::Mse(ia, ib), &[ia, ib])
    }

    /// Unfolds `[B, L, E]` into `[B, N, P*E]`, `N = (L - P) / S + 1`.
    pub fn patch(&mut self, x: Var, len: usize, stride: usize) -> Result<Var> {
        let ix = self.index(x)?;
        let v = &self.nodes[ix].value;
        let &[b, l, e] = v.shape() else {
            return Err(invalid("patch", format!("expected [B, L, E], got {:?}", v.shape())));
        };
        if len == 0 || stride == 0 || l < len {
            return Err(invalid("patch", format!("patch_len {len}, stride {stride}, length {l}")));
        }
        let n = (l - len) / stride + 1;
        let out = Tensor::new(vec![b, n, len * e], kernels::patch(v.data(), b, l, e, len, stride))?;
        self.push("patch", out, Op::Patch { x: ix, len, stride }, &[ix])
    }

    /// Pushes `g`'s contribution from node `i` to its inputs.
    pub(crate) fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let needs = |j: usize| nodes[j].requires_grad;
        let val = |j: usize| nodes[j].value.data();
        let mut send = |j: usize, contribution: Vec<f64>| {
            if nodes[j].requires_grad {
                accumulate(&mut grads[j], contribution);
            }
        };
        match &nodes[i].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                send(*a, g.to_vec());
                send(*b, g.to_vec());
            }
            Op::Sub(a, b) => {
                send(*a, g.to_vec());
                send(*b, g.iter().map(|v| -v).collect());
            }
            Op::Mul(a, b) => {
                if needs(*a) {
                    send(*a, g.iter().zip(val(*b)).map(|(g, y)| g * y).collect());
                }
                if needs(*b) {
                    send(*b, g.iter().zip(val(*a)).map(|(g, x)| g * x).collect());
                }
            }
            Op::AddTrailing(a, b) => {
                send(*a, g.to_vec());
                if needs(*b) {
                    let inner = nodes[*b].value.numel();
                    let mut gb = vec![0.0; inner];
                    for chunk in g.chunks(inner) {
                        for (o, v) in gb.iter_mut().zip(chunk) {
                            *o += v;
                        }
                    }
                    send(*b, gb);
                }
            }
            Op::MulTrailing(a, b) => {
                let inner = nodes[*b].value.numel();
                let bv = val(*b);
                if needs(*a) {
                    let mut ga = g.to_vec();
                    for chunk in ga.chunks_mut(inner) {
                        for (o, w) in chunk.iter_mut().zip(bv) {
                            *o *= w;
                        }
                    }
                    send(*a, ga);
                }
                if needs(*b) {
                    let mut gb = vec![0.0; inner];
                    for (gc, ac) in g.chunks(inner).zip(val(*a).chunks(inner)) {
                        for ((o, gv), av) in gb.iter_mut().zip(gc).zip(ac) {
                            *o += gv * av;
                        }
                    }
                    send(*b, gb);
                }
            }
            Op::Scale(x, c) => send(*x, g.iter().map(|v| v * c).collect()),
            Op::MatMul { a, b, shared_rhs } => {
                let sa = nodes[*a].value.shape();
                let sb = nodes[*b].value.shape();
                let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
                let n = sb[sb.len() - 1];
                let batch: usize = sa[..sa.len() - 2].iter().product();
                let (ga, gb) = kernels::matmul_backward(g, val(*a), val(*b), batch, m, k, n, *shared_rhs);
                send(*a, ga);
                send(*b, gb);
            }
            Op::Permute { x, axes } => {
                let out_shape = nodes[i].value.shape();
                let (gx, _) = kernels::permute(g, out_shape, &kernels::inverse_axes(axes));
                send(*x, gx);
            }
            Op::Reshape(x) => send(*x, g.to_vec()),
            Op::Sum(x) => send(*x, vec![g[0]; nodes[*x].value.numel()]),
            Op::Mean(x) => {
                let n = nodes[*x].value.numel();
                send(*x, vec![g[0] / n as f64; n]);
            }
            Op::Square(x) => send(*x, g.iter().zip(val(*x)).map(|(g, x)| 2.0 * x * g).collect()),
            Op::Abs(x) => send(
                *x,
                g.iter()
                    .zip(val(*x))
                    .map(|(g, x)| if *x > 0.0 { *g } else if *x < 0.0 { -g } else { 0.0 })
                    .collect(),
            ),
            Op::Exp(x) => send(*x, g.iter().zip(val(i)).map(|(g, y)| g * y).collect()),
            Op::Gelu(x) => send(*x, g.iter().zip(val(*x)).map(|(g, x)| g * kernels::gelu_grad(*x)).collect()),
            Op::Softmax(x) => {
                let y = val(i);
                let d = *nodes[i].value.shape().last().unwrap_or(&1);
                let mut gx = vec![0.0; g.len()];
                for ((gr, yr), out) in g.chunks(d).zip(y.chunks(d)).zip(gx.chunks_mut(d)) {
                    let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                    for ((o, gv), yv) in out.iter_mut().zip(gr).zip(yr) {
                        *o = yv * (gv - dot);
                    }
                }
                send(*x, gx);
            }
            Op::LayerNorm { x, inv_std } => {
                let y = val(i);
                let d = *nodes[i].value.shape().last().unwrap_or(&1);
                let mut gx = vec![0.0; g.len()];
                for (((gr, yr), out), r) in g.chunks(d).zip(y.chunks(d)).zip(gx.chunks_mut(d)).zip(inv_std) {
                    let mean_g = gr.iter().sum::<f64>() / d as f64;
                    let mean_gy = gr.iter().zip(yr).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                    for ((o, gv), yv) in out.iter_mut().zip(gr).zip(yr) {
                        *o = r * (gv - mean_g - yv * mean_gy);
                    }
                }
                send(*x, gx);
            }
            Op::AvgPool { x, kernel } => {
                let s = nodes[*x].value.shape();
                send(*x, kernels::avg_pool_backward(g, s[0], s[1], s[2], *kernel));
            }
            Op::Slice { x, axis, start } => {
                let s = nodes[*x].value.shape();
                let len = nodes[i].value.shape()[*axis];
                let (outer, n, inner) = kernels::axis_extents(s, *axis);
                let mut gx = vec![0.0; nodes[*x].value.numel()];
                for o in 0..outer {
                    let dst = o * n * inner + start * inner;
                    let src = o * len * inner;
                    gx[dst..dst + len * inner].copy_from_slice(&g[src..src + len * inner]);
                }
                send(*x, gx);
            }
            Op::Concat { parts, axis } => {
                let out_shape = nodes[i].value.shape();
                let (outer, total, inner) = kernels::axis_extents(out_shape, *axis);
                let mut offset = 0;
                for &p in parts {
                    let n = nodes[p].value.shape()[*axis];
                    if needs(p) {
                        let mut gp = Vec::with_capacity(outer * n * inner);
                        for o in 0..outer {
                            let src = o * total * inner + offset * inner;
                            gp.extend_from_slice(&g[src..src + n * inner]);
                        }
                        send(p, gp);
                    }
                    offset += n;
                }
            }
            Op::Dropout { x, mask } | Op::MaskMul { x, mask } => {
                send(*x, g.iter().zip(mask).map(|(g, m)| g * m).collect());
            }
            Op::Mse(a, b) => {
                let n = nodes[*a].value.numel() as f64;
                let scale = 2.0 * g[0] / n;
                let diff: Vec<f64> = val(*a).iter().zip(val(*b)).map(|(x, y)| scale * (x - y)).collect();
                if needs(*b) {
                    send(*b, diff.iter().map(|v| -v).collect());
                }
                send(*a, diff);
            }
            Op::Patch { x, len, stride } => {
                let s = nodes[*x].value.shape();
                send(*x, kernels::patch_backward(g, s[0], s[1], s[2], *len, *stride));
            }
        }
    }
}
