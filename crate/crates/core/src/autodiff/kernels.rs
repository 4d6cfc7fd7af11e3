// Raw numeric kernels shared by the forward and backward rules.

/// Splits `shape` around `axis` into (outer, axis length, inner) extents.
pub(crate) fn axis_extents(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

pub(crate) fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for d in (0..shape.len().saturating_sub(1)).rev() {
        s[d] = s[d + 1] * shape[d + 1];
    }
    s
}

/// `out[bt, i, j] = sum_p a[bt, i, p] * b[(bt), p, j]`.
pub(crate) fn matmul(a: &[f64], b: &[f64], batch: usize, m: usize, k: usize, n: usize, shared_rhs: bool) -> Vec<f64> {
    let mut out = vec![0.0; batch * m * n];
    for bt in 0..batch {
        let a_off = bt * m * k;
        let b_off = if shared_rhs { 0 } else { bt * k * n };
        let o_off = bt * m * n;
        for i in 0..m {
            let row = &mut out[o_off + i * n..o_off + (i + 1) * n];
            for p in 0..k {
                let av = a[a_off + i * k + p];
                if av == 0.0 {
                    continue;
                }
                let brow = &b[b_off + p * n..b_off + (p + 1) * n];
                for (o, &bv) in row.iter_mut().zip(brow) {
                    *o += av * bv;
                }
            }
        }
    }
    out
}

/// Gradients of [`matmul`] w.r.t. both operands.
#[allow(clippy::too_many_arguments)]
pub(crate) fn matmul_backward(
    g: &[f64],
    a: &[f64],
    b: &[f64],
    batch: usize,
    m: usize,
    k: usize,
    n: usize,
    shared_rhs: bool,
) -> (Vec<f64>, Vec<f64>) {
    let mut ga = vec![0.0; a.len()];
    let mut gb = vec![0.0; b.len()];
    for bt in 0..batch {
        let a_off = bt * m * k;
        let b_off = if shared_rhs { 0 } else { bt * k * n };
        let g_off = bt * m * n;
        for i in 0..m {
            let grow = &g[g_off + i * n..g_off + (i + 1) * n];
            for p in 0..k {
                let brow = &b[b_off + p * n..b_off + (p + 1) * n];
                let mut acc = 0.0;
                for (&gv, &bv) in grow.iter().zip(brow) {
                    acc += gv * bv;
                }
                ga[a_off + i * k + p] += acc;
                let av = a[a_off + i * k + p];
                if av != 0.0 {
                    let gbrow = &mut gb[b_off + p * n..b_off + (p + 1) * n];
                    for (o, &gv) in gbrow.iter_mut().zip(grow) {
                        *o += av * gv;
                    }
                }
            }
        }
    }
    (ga, gb)
}

pub(crate) fn permute(data: &[f64], shape: &[usize], axes: &[usize]) -> (Vec<f64>, Vec<usize>) {
    let rank = shape.len();
    let in_strides = strides(shape);
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let src_strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let mut out = Vec::with_capacity(data.len());
    if data.is_empty() {
        return (out, out_shape);
    }
    let mut idx = vec![0usize; rank];
    let mut offset = 0usize;
    loop {
        out.push(data[offset]);
        // odometer increment over the output index
        let mut d = rank;
        loop {
            if d == 0 {
                return (out, out_shape);
            }
            d -= 1;
            idx[d] += 1;
            offset += src_strides[d];
            if idx[d] < out_shape[d] {
                break;
            }
            offset -= src_strides[d] * idx[d];
            idx[d] = 0;
        }
    }
}

pub(crate) fn inverse_axes(axes: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; axes.len()];
    for (d, &a) in axes.iter().enumerate() {
        inv[a] = d;
    }
    inv
}

/// Replicate-padded moving average along axis 1 of a `[B, L, C]` buffer.
pub(crate) fn avg_pool(x: &[f64], b: usize, l: usize, c: usize, kernel: usize) -> Vec<f64> {
    let half = (kernel / 2) as isize;
    let inv = 1.0 / kernel as f64;
    let mut out = vec![0.0; x.len()];
    for bi in 0..b {
        let base = bi * l * c;
        for t in 0..l {
            for ci in 0..c {
                let mut acc = 0.0;
                for j in -half..=half {
                    let src = (t as isize + j).clamp(0, l as isize - 1) as usize;
                    acc += x[base + src * c + ci];
                }
                out[base + t * c + ci] = acc * inv;
            }
        }
    }
    out
}

pub(crate) fn avg_pool_backward(g: &[f64], b: usize, l: usize, c: usize, kernel: usize) -> Vec<f64> {
    let half = (kernel / 2) as isize;
    let inv = 1.0 / kernel as f64;
    let mut gx = vec![0.0; g.len()];
    for bi in 0..b {
        let base = bi * l * c;
        for t in 0..l {
            for ci in 0..c {
                let gv = g[base + t * c + ci] * inv;
                for j in -half..=half {
                    let src = (t as isize + j).clamp(0, l as isize - 1) as usize;
                    gx[base + src * c + ci] += gv;
                }
            }
        }
    }
    gx
}

/// Unfolds `[B, L, E]` into `[B, N, P*E]` patches with stride `s`.
pub(crate) fn patch(x: &[f64], b: usize, l: usize, e: usize, p: usize, s: usize) -> Vec<f64> {
    let n = (l - p) / s + 1;
    let mut out = Vec::with_capacity(b * n * p * e);
    for bi in 0..b {
        for i in 0..n {
            let start = bi * l * e + i * s * e;
            out.extend_from_slice(&x[start..start + p * e]);
        }
    }
    out
}

pub(crate) fn patch_backward(g: &[f64], b: usize, l: usize, e: usize, p: usize, s: usize) -> Vec<f64> {
    let n = (l - p) / s + 1;
    let mut gx = vec![0.0; b * l * e];
    let width = p * e;
    for bi in 0..b {
        for i in 0..n {
            let dst = bi * l * e + i * s * e;
            let src = (bi * n + i) * width;
            for (o, &gv) in gx[dst..dst + width].iter_mut().zip(&g[src..src + width]) {
                *o += gv;
            }
        }
    }
    gx
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044_715;

pub(crate) fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

pub(crate) fn gelu_grad(x: f64) -> f64 {
    let th = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn permute_transposes_matrix() {
        let (out, shape) = permute(&[1., 2., 3., 4., 5., 6.], &[2, 3], &[1, 0]);
        assert_eq!(shape, vec![3, 2]);
        assert_eq!(out, vec![1., 4., 2., 5., 3., 6.]);
    }

    #[test]
    fn permute_roundtrip_rank4() {
        let data: Vec<f64> = (0..120).map(f64::from).collect();
        let shape = [2, 3, 4, 5];
        let axes = [0, 2, 1, 3];
        let (p, pshape) = permute(&data, &shape, &axes);
        let (back, bshape) = permute(&p, &pshape, &inverse_axes(&axes));
        assert_eq!(bshape, shape.to_vec());
        assert_eq!(back, data);
    }

    #[test]
    fn patch_counts_and_layout() {
        // l=5, e=1, p=2, s=2 -> patches [0,1], [2,3]; timestep 4 dropped
        let out = patch(&[0., 1., 2., 3., 4.], 1, 5, 1, 2, 2);
        assert_eq!(out, vec![0., 1., 2., 3.]);
    }
}
