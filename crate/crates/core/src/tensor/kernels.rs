//! Slice-level kernels shared by the eager functions and the graph.

use super::Real;
use crate::error::{dim_err, Result};

/// Iteration geometry for "lanes" along one axis: `outer × len × inner`.
#[derive(Clone, Copy, Debug)]
pub struct Lanes {
    pub outer: usize,
    pub len: usize,
    pub inner: usize,
}

impl Lanes {
    pub fn new(shape: &[usize], axis: usize) -> Result<Self> {
        if axis >= shape.len() {
            return Err(dim_err!("axis {axis} out of range for shape {shape:?}"));
        }
        Ok(Self {
            outer: shape[..axis].iter().product(),
            len: shape[axis],
            inner: shape[axis + 1..].iter().product(),
        })
    }

    /// Calls `f(base, stride)` for every lane; lane element `j` lives at `base + j * stride`.
    #[inline]
    pub fn for_each(&self, mut f: impl FnMut(usize, usize)) {
        for o in 0..self.outer {
            for i in 0..self.inner {
                f(o * self.len * self.inner + i, self.inner);
            }
        }
    }
}

pub fn matmul_dims(a: &[usize], b: &[usize]) -> Result<(usize, usize, usize)> {
    if a.len() != 2 || b.len() != 2 || a[1] != b[0] {
        return Err(dim_err!("matmul of incompatible shapes {a:?} and {b:?}"));
    }
    Ok((a[0], a[1], b[1]))
}

/// `c = op(a) · op(b)` where `op` optionally transposes the stored matrix.
/// With `ta` the lhs is stored `k×m`, with `tb` the rhs is stored `n×k`.
#[allow(clippy::too_many_arguments)]
pub fn gemm_t<T: Real>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    ta: bool,
    b: &[T],
    tb: bool,
    c: &mut [T],
    accumulate: bool,
) {
    let sa = if ta { (1, m as isize) } else { (k as isize, 1) };
    let sb = if tb { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { T::one() } else { T::zero() };
    T::gemm(m, k, n, T::one(), a, sa, b, sb, beta, c);
}

pub fn softmax_forward<T: Real>(x: &[T], lanes: Lanes) -> Vec<T> {
    let mut y = vec![T::zero(); x.len()];
    lanes.for_each(|base, stride| {
        let mut max = T::neg_infinity();
        for j in 0..lanes.len {
            max = max.max(x[base + j * stride]);
        }
        let mut sum = T::zero();
        for j in 0..lanes.len {
            let e = (x[base + j * stride] - max).exp();
            y[base + j * stride] = e;
            sum += e;
        }
        let inv = T::one() / sum;
        for j in 0..lanes.len {
            y[base + j * stride] *= inv;
        }
    });
    y
}

pub fn softmax_backward<T: Real>(y: &[T], g: &[T], lanes: Lanes, dx: &mut [T]) {
    lanes.for_each(|base, stride| {
        let mut dot = T::zero();
        for j in 0..lanes.len {
            let idx = base + j * stride;
            dot += g[idx] * y[idx];
        }
        for j in 0..lanes.len {
            let idx = base + j * stride;
            dx[idx] += y[idx] * (g[idx] - dot);
        }
    });
}

/// Returns `(xhat, xhat, inv_std)`; the first copy is the caller's output buffer.
pub fn layer_norm_forward<T: Real>(x: &[T], n: usize, eps: T) -> (Vec<T>, Vec<T>, Vec<T>) {
    let rows = x.len() / n.max(1);
    let mut xhat = vec![T::zero(); x.len()];
    let mut inv_std = Vec::with_capacity(rows);
    let nf = T::from_f64(n as f64);
    for (r, row) in x.chunks(n).enumerate() {
        let mean = row.iter().copied().sum::<T>() / nf;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / nf;
        let is = T::one() / (var + eps).sqrt();
        inv_std.push(is);
        for (o, &v) in xhat[r * n..(r + 1) * n].iter_mut().zip(row) {
            *o = (v - mean) * is;
        }
    }
    (xhat.clone(), xhat, inv_std)
}

/// Gradient of plain (non-affine) normalisation given the gradient w.r.t. `xhat`.
pub fn layer_norm_backward<T: Real>(dxhat: &[T], xhat: &[T], inv_std: &[T], n: usize, dx: &mut [T]) {
    let nf = T::from_f64(n as f64);
    for (r, &is) in inv_std.iter().enumerate() {
        let span = r * n..(r + 1) * n;
        let g = &dxhat[span.clone()];
        let xh = &xhat[span.clone()];
        let sum_g = g.iter().copied().sum::<T>();
        let sum_gx = g.iter().zip(xh).map(|(&a, &b)| a * b).sum::<T>();
        for ((d, &gi), &xi) in dx[span].iter_mut().zip(g).zip(xh) {
            *d += is / nf * (nf * gi - sum_g - xi * sum_gx);
        }
    }
}

/// Returns the normalised values and the per-lane divisor.
pub fn l2_normalize_forward<T: Real>(x: &[T], lanes: Lanes, eps: T) -> (Vec<T>, Vec<T>) {
    let mut y = vec![T::zero(); x.len()];
    let mut norms = Vec::with_capacity(lanes.outer * lanes.inner);
    lanes.for_each(|base, stride| {
        let mut ss = T::zero();
        for j in 0..lanes.len {
            let v = x[base + j * stride];
            ss += v * v;
        }
        let d = ss.sqrt().max(eps);
        norms.push(d);
        for j in 0..lanes.len {
            y[base + j * stride] = x[base + j * stride] / d;
        }
    });
    (y, norms)
}

pub fn l2_normalize_backward<T: Real>(y: &[T], norms: &[T], g: &[T], lanes: Lanes, eps: T, dx: &mut [T]) {
    let mut lane = 0;
    lanes.for_each(|base, stride| {
        let d = norms[lane];
        lane += 1;
        if d <= eps {
            for j in 0..lanes.len {
                dx[base + j * stride] += g[base + j * stride] / d;
            }
            return;
        }
        let mut dot = T::zero();
        for j in 0..lanes.len {
            dot += g[base + j * stride] * y[base + j * stride];
        }
        for j in 0..lanes.len {
            let idx = base + j * stride;
            dx[idx] += (g[idx] - y[idx] * dot) / d;
        }
    });
}

pub const GELU_C: f64 = 0.797_884_560_8;
pub const GELU_A: f64 = 0.044_715;

/// `tanh(c·(x + a·x³))`, the inner term of the GELU approximation.
pub fn gelu_tanh<T: Real>(x: T) -> T {
    let u = T::from_f64(2.0 * GELU_C) * (x + T::from_f64(GELU_A) * x * x * x);
    // exp is markedly cheaper than tanh and only the absolute error matters
    // here; saturates cleanly to ±1.
    T::one() - T::from_f64(2.0) / (u.exp() + T::one())
}

pub fn gelu_from_tanh<T: Real>(x: T, t: T) -> T {
    T::from_f64(0.5) * x * (T::one() + t)
}

pub fn gelu_grad_from_tanh<T: Real>(x: T, t: T) -> T {
    let half = T::from_f64(0.5);
    let slope = T::from_f64(GELU_C) * (T::one() + T::from_f64(3.0 * GELU_A) * x * x);
    half * (T::one() + t) + half * x * (T::one() - t * t) * slope
}

pub fn broadcast_shape(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let nd = a.len().max(b.len());
    let mut out = vec![0; nd];
    for i in 0..nd {
        let da = if i + a.len() >= nd { a[i + a.len() - nd] } else { 1 };
        let db = if i + b.len() >= nd { b[i + b.len() - nd] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return Err(dim_err!("shapes {a:?} and {b:?} do not broadcast")),
        };
    }
    Ok(out)
}

/// Element strides of `shape` viewed inside `out` (0 along broadcast axes).
fn broadcast_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let nd = out.len();
    let mut strides = vec![0; nd];
    let mut acc = 1;
    for i in (0..shape.len()).rev() {
        let o = i + nd - shape.len();
        strides[o] = if shape[i] == 1 { 0 } else { acc };
        acc *= shape[i];
    }
    strides
}

/// How an operand maps onto a broadcast output.
enum Mapping {
    Same,
    /// Operand equals a trailing block of the output; index is `o % len`.
    Suffix(usize),
    General(Vec<usize>),
}

fn mapping(shape: &[usize], out: &[usize]) -> Mapping {
    let n: usize = shape.iter().product();
    let total: usize = out.iter().product();
    if n == total {
        return Mapping::Same;
    }
    let trimmed: Vec<usize> = shape.iter().copied().skip_while(|&d| d == 1).collect();
    if trimmed.len() <= out.len() && out[out.len() - trimmed.len()..] == trimmed[..] {
        return Mapping::Suffix(n);
    }
    Mapping::General(broadcast_strides(shape, out))
}

/// `f(a, b)` over the broadcast of `a` and `b`.
pub fn broadcast_binary<T: Real>(
    out: &[usize],
    (sa, av): (&[usize], &[T]),
    (sb, bv): (&[usize], &[T]),
    f: impl Fn(T, T) -> T,
) -> Vec<T> {
    let total: usize = out.iter().product();
    match (mapping(sa, out), mapping(sb, out)) {
        (Mapping::Same, Mapping::Same) => av.iter().zip(bv).map(|(&x, &y)| f(x, y)).collect(),
        (Mapping::Same, Mapping::Suffix(n)) => {
            let mut o = Vec::with_capacity(total);
            for chunk in av.chunks_exact(n) {
                o.extend(chunk.iter().zip(bv).map(|(&x, &y)| f(x, y)));
            }
            o
        }
        (Mapping::Suffix(n), Mapping::Same) => {
            let mut o = Vec::with_capacity(total);
            for chunk in bv.chunks_exact(n) {
                o.extend(av.iter().zip(chunk).map(|(&x, &y)| f(x, y)));
            }
            o
        }
        _ => {
            let mut o = vec![T::zero(); total];
            for_each_broadcast(out, sa, sb, |k, ia, ib| o[k] = f(av[ia], bv[ib]));
            o
        }
    }
}

/// Adds `g` (shaped `out`) into `dst` (shaped `shape`), summing over
/// broadcast axes.
pub fn reduce_into<T: Real>(dst: &mut [T], shape: &[usize], out: &[usize], g: &[T], sign: T) {
    match mapping(shape, out) {
        Mapping::Same => dst.iter_mut().zip(g).for_each(|(d, &x)| *d += sign * x),
        Mapping::Suffix(n) => {
            for chunk in g.chunks_exact(n) {
                dst.iter_mut().zip(chunk).for_each(|(d, &x)| *d += sign * x);
            }
        }
        Mapping::General(_) => for_each_broadcast(out, shape, out, |o, i, _| dst[i] += sign * g[o]),
    }
}

/// Visits each output element with the matching operand offsets.
pub fn for_each_broadcast(out: &[usize], a: &[usize], b: &[usize], mut f: impl FnMut(usize, usize, usize)) {
    let total: usize = out.iter().product();
    let ma = mapping(a, out);
    let mb = mapping(b, out);
    match (&ma, &mb) {
        (Mapping::Same, Mapping::Same) => (0..total).for_each(|o| f(o, o, o)),
        (Mapping::Same, Mapping::Suffix(n)) => (0..total).for_each(|o| f(o, o, o % n)),
        (Mapping::Suffix(n), Mapping::Same) => (0..total).for_each(|o| f(o, o % n, o)),
        _ => {
            let sa = match ma {
                Mapping::General(s) => s,
                _ => broadcast_strides(a, out),
            };
            let sb = match mb {
                Mapping::General(s) => s,
                _ => broadcast_strides(b, out),
            };
            let nd = out.len();
            let mut idx = vec![0usize; nd];
            let (mut ia, mut ib) = (0usize, 0usize);
            for o in 0..total {
                f(o, ia, ib);
                for d in (0..nd).rev() {
                    idx[d] += 1;
                    ia += sa[d];
                    ib += sb[d];
                    if idx[d] < out[d] {
                        break;
                    }
                    ia -= sa[d] * out[d];
                    ib -= sb[d] * out[d];
                    idx[d] = 0;
                }
            }
        }
    }
}

pub fn permute<T: Real>(x: &[T], shape: &[usize], axes: &[usize]) -> (Vec<usize>, Vec<T>) {
    let nd = shape.len();
    let mut in_strides = vec![1; nd];
    for i in (0..nd.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * shape[i + 1];
    }
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let mut out = Vec::with_capacity(x.len());
    if x.is_empty() {
        return (out_shape, out);
    }
    let last = nd - 1;
    let (inner_len, inner_stride) = (out_shape[last], strides[last]);
    let mut idx = vec![0usize; nd];
    let mut base = 0usize;
    loop {
        for j in 0..inner_len {
            out.push(x[base + j * inner_stride]);
        }
        let mut d = last;
        loop {
            if d == 0 {
                return (out_shape, out);
            }
            d -= 1;
            idx[d] += 1;
            base += strides[d];
            if idx[d] < out_shape[d] {
                break;
            }
            base -= strides[d] * out_shape[d];
            idx[d] = 0;
        }
    }
}
