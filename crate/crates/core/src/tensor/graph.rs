//! Define-by-run reverse-mode autodiff.
//!
//! A [`Graph`] is an append-only list of nodes; each op evaluates eagerly and
//! records what its backward rule needs. Node ids are handed out in
//! creation order, so the list is always topologically sorted.

use super::kernels::{self, Lanes};
use super::{Real, Tensor};
use crate::error::{contract, dim_err, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    MatMul { a: Var, b: Var, ta: bool, tb: bool, batch: usize, m: usize, k: usize, n: usize },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { a: Var, s: T },
    Gelu { a: Var, tanh: Vec<T> },
    Exp { a: Var },
    Softmax { a: Var, lanes: Lanes },
    LayerNorm { x: Var, gamma: Option<Var>, beta: Option<Var>, xhat: Vec<T>, inv_std: Vec<T> },
    L2Normalize { a: Var, lanes: Lanes, norms: Vec<T>, eps: T },
    Reshape { a: Var },
    Permute { a: Var, axes: Vec<usize> },
    MeanAxis { a: Var, lanes: Lanes },
    Sum { a: Var },
    CrossEntropy { logits: Var, targets: Vec<usize>, probs: Vec<T> },
}

#[derive(Debug)]
struct Node<T> {
    op: Op<T>,
    value: Tensor<T>,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Graph<T: Real> {
    nodes: Vec<Node<T>>,
}

/// Gradients of a scalar w.r.t. every leaf that requires them.
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, op: Op<T>, value: Tensor<T>, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|i| self.nodes[i.0].requires_grad);
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// A leaf whose gradient is tracked (parameters, saliency inputs).
    pub fn param(&mut self, t: Tensor<T>) -> Var {
        self.nodes.push(Node {
            op: Op::Leaf,
            value: t,
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.nodes.push(Node {
            op: Op::Leaf,
            value: t,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_t(a, b, false, false)
    }

    /// 2-D product with optional transposition of either stored operand.
    pub fn matmul_t(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 {
            return Err(dim_err!("matmul expects 2-D operands, got {sa:?} and {sb:?}"));
        }
        let (m, ka) = if ta { (sa[1], sa[0]) } else { (sa[0], sa[1]) };
        let (kb, n) = if tb { (sb[1], sb[0]) } else { (sb[0], sb[1]) };
        if ka != kb {
            return Err(dim_err!("matmul inner dimensions differ: {sa:?} and {sb:?}"));
        }
        let mut out = vec![T::zero(); m * n];
        kernels::gemm_t(m, ka, n, self.value(a).data(), ta, self.value(b).data(), tb, &mut out, false);
        let value = Tensor::new([m, n], out)?;
        Ok(self.push(Op::MatMul { a, b, ta, tb, batch: 1, m, k: ka, n }, value, &[a, b]))
    }

    /// Batched product of `[N, m, k]` and `[N, k, n]` (or `[N, n, k]` with `tb`).
    pub fn bmm(&mut self, a: Var, b: Var, tb: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] {
            return Err(dim_err!("bmm expects [N,m,k]x[N,k,n], got {sa:?} and {sb:?}"));
        }
        let (batch, m, k) = (sa[0], sa[1], sa[2]);
        let (kb, n) = if tb { (sb[2], sb[1]) } else { (sb[1], sb[2]) };
        if k != kb {
            return Err(dim_err!("bmm inner dimensions differ: {sa:?} and {sb:?}"));
        }
        let mut out = vec![T::zero(); batch * m * n];
        {
            let (av, bv) = (self.value(a).data(), self.value(b).data());
            for i in 0..batch {
                kernels::gemm_t(
                    m,
                    k,
                    n,
                    &av[i * m * k..(i + 1) * m * k],
                    false,
                    &bv[i * k * n..(i + 1) * k * n],
                    tb,
                    &mut out[i * m * n..(i + 1) * m * n],
                    false,
                );
            }
        }
        let value = Tensor::new([batch, m, n], out)?;
        Ok(self.push(Op::MatMul { a, b, ta: false, tb, batch, m, k, n }, value, &[a, b]))
    }

    fn binary(&mut self, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let out_shape = kernels::broadcast_shape(sa, sb)?;
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        let out = kernels::broadcast_binary(&out_shape, (sa, av), (sb, bv), f);
        Tensor::new(out_shape, out)
    }

    /// Element-wise sum with broadcasting.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.binary(a, b, |x, y| x + y)?;
        Ok(self.push(Op::Add { a, b }, value, &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.binary(a, b, |x, y| x - y)?;
        Ok(self.push(Op::Sub { a, b }, value, &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.binary(a, b, |x, y| x * y)?;
        Ok(self.push(Op::Mul { a, b }, value, &[a, b]))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let s = T::from_f64(s);
        let src = self.value(a);
        let value = Tensor {
            shape: src.shape.clone(),
            data: src.data.iter().map(|&v| v * s).collect(),
        };
        self.push(Op::Scale { a, s }, value, &[a])
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let src = self.value(a);
        let tanh: Vec<T> = src.data.iter().map(|&v| kernels::gelu_tanh(v)).collect();
        let value = Tensor {
            shape: src.shape.clone(),
            data: src.data.iter().zip(&tanh).map(|(&v, &t)| kernels::gelu_from_tanh(v, t)).collect(),
        };
        self.push(Op::Gelu { a, tanh }, value, &[a])
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let src = self.value(a);
        let value = Tensor {
            shape: src.shape.clone(),
            data: src.data.iter().map(|&v| v.exp()).collect(),
        };
        self.push(Op::Exp { a }, value, &[a])
    }

    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let lanes = Lanes::new(self.shape(a), axis)?;
        let src = self.value(a);
        let value = Tensor::new(src.shape.clone(), kernels::softmax_forward(&src.data, lanes))?;
        Ok(self.push(Op::Softmax { a, lanes }, value, &[a]))
    }

    /// Normalises the last axis to zero mean / unit variance, then applies
    /// the optional affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Option<Var>, beta: Option<Var>, eps: f64) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let n = *shape.last().ok_or_else(|| dim_err!("layer_norm of a 0-d tensor"))?;
        for p in [gamma, beta].into_iter().flatten() {
            if self.value(p).numel() != n {
                return Err(dim_err!(
                    "layer_norm affine shape {:?} does not match row length {n}",
                    self.shape(p)
                ));
            }
        }
        let (mut y, xhat, inv_std) = kernels::layer_norm_forward(self.value(x).data(), n, T::from_f64(eps));
        if let Some(g) = gamma {
            let gv = self.value(g).data();
            for row in y.chunks_mut(n) {
                row.iter_mut().zip(gv).for_each(|(v, &s)| *v *= s);
            }
        }
        if let Some(b) = beta {
            let bv = self.value(b).data();
            for row in y.chunks_mut(n) {
                row.iter_mut().zip(bv).for_each(|(v, &s)| *v += s);
            }
        }
        let value = Tensor::new(shape, y)?;
        let inputs: Vec<Var> = [Some(x), gamma, beta].into_iter().flatten().collect();
        Ok(self.push(
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            value,
            &inputs,
        ))
    }

    pub fn l2_normalize(&mut self, a: Var, axis: usize) -> Result<Var> {
        let lanes = Lanes::new(self.shape(a), axis)?;
        let eps = T::from_f64(super::L2_EPS);
        let src = self.value(a);
        let (y, norms) = kernels::l2_normalize_forward(&src.data, lanes, eps);
        let value = Tensor::new(src.shape.clone(), y)?;
        Ok(self.push(Op::L2Normalize { a, lanes, norms, eps }, value, &[a]))
    }

    pub fn reshape(&mut self, a: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let value = self.value(a).clone().reshape(shape)?;
        Ok(self.push(Op::Reshape { a }, value, &[a]))
    }

    pub fn permute(&mut self, a: Var, axes: &[usize]) -> Result<Var> {
        let shape = self.shape(a);
        let mut seen = vec![false; shape.len()];
        if axes.len() != shape.len() || axes.iter().any(|&i| i >= shape.len() || std::mem::replace(&mut seen[i], true)) {
            return Err(dim_err!("invalid permutation {axes:?} for shape {shape:?}"));
        }
        let (out_shape, data) = kernels::permute(self.value(a).data(), shape, axes);
        let value = Tensor::new(out_shape, data)?;
        Ok(self.push(Op::Permute { a, axes: axes.to_vec() }, value, &[a]))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        self.permute(a, &[1, 0])
    }

    /// Mean over one axis; the axis is removed from the shape.
    pub fn mean_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let lanes = Lanes::new(&shape, axis)?;
        let src = self.value(a).data();
        let inv = T::one() / T::from_f64(lanes.len as f64);
        let mut out = Vec::with_capacity(lanes.outer * lanes.inner);
        lanes.for_each(|base, stride| {
            let s: T = (0..lanes.len).map(|j| src[base + j * stride]).sum();
            out.push(s * inv);
        });
        let mut out_shape = shape;
        out_shape.remove(axis);
        if out_shape.is_empty() {
            out_shape.push(1);
        }
        let value = Tensor::new(out_shape, out)?;
        Ok(self.push(Op::MeanAxis { a, lanes }, value, &[a]))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s: T = self.value(a).data().iter().copied().sum();
        self.push(Op::Sum { a }, Tensor::scalar(s), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).numel() as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// Mean over rows of `logsumexp(row) - row[target]`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let shape = self.shape(logits).to_vec();
        if shape.len() != 2 || shape[0] != targets.len() {
            return Err(dim_err!(
                "cross_entropy logits {shape:?} do not match {} targets",
                targets.len()
            ));
        }
        let classes = shape[1];
        if let Some(&t) = targets.iter().find(|&&t| t >= classes) {
            return Err(dim_err!("cross_entropy target {t} out of range for {classes} classes"));
        }
        let lanes = Lanes::new(&shape, 1)?;
        let z = self.value(logits).data();
        let probs = kernels::softmax_forward(z, lanes);
        let mut loss = T::zero();
        for (i, &t) in targets.iter().enumerate() {
            let row = &z[i * classes..(i + 1) * classes];
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<T>().ln();
            loss += lse - row[t];
        }
        loss = loss / T::from_f64(targets.len() as f64);
        Ok(self.push(
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            Tensor::scalar(loss),
            &[logits],
        ))
    }

    /// Reverse sweep from a scalar node.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        contract!(loss.0 < self.nodes.len(), "loss node {} does not exist", loss.0);
        contract!(
            self.nodes[loss.0].value.numel() == 1,
            "backward requires a scalar loss, got shape {:?}",
            self.nodes[loss.0].value.shape()
        );
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        let loss_shape = self.nodes[loss.0].value.shape().to_vec();
        grads[loss.0] = Some(Tensor::ones(loss_shape));

        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            if !node.requires_grad {
                grads[id] = None;
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            self.backprop_node(node, &g, &mut grads)?;
        }
        Ok(Gradients { grads })
    }

    fn accumulate<'g>(&self, grads: &'g mut [Option<Tensor<T>>], v: Var) -> Option<&'g mut Vec<T>> {
        let node = &self.nodes[v.0];
        if !node.requires_grad {
            return None;
        }
        let slot = &mut grads[v.0];
        if slot.is_none() {
            *slot = Some(Tensor::zeros(node.value.shape().to_vec()));
        }
        slot.as_mut().map(|t| &mut t.data)
    }

    fn reduce_broadcast(&self, grads: &mut [Option<Tensor<T>>], out_shape: &[usize], g: &[T], a: Var, b: Var, wrt_a: bool, scale: impl Fn(usize, usize) -> T) {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let target = if wrt_a { a } else { b };
        if let Some(dst) = self.accumulate(grads, target) {
            kernels::for_each_broadcast(out_shape, &sa, &sb, |o, ia, ib| {
                let idx = if wrt_a { ia } else { ib };
                dst[idx] += g[o] * scale(ia, ib);
            });
        }
    }

    fn backprop_node(&self, node: &Node<T>, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) -> Result<()> {
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul { a, b, ta, tb, batch, m, k, n } => {
                let (av, bv) = (self.value(a).data(), self.value(b).data());
                if let Some(da) = self.accumulate(grads, a) {
                    for i in 0..batch {
                        let (gs, bs) = (&gd[i * m * n..(i + 1) * m * n], &bv[i * k * n..(i + 1) * k * n]);
                        let ds = &mut da[i * m * k..(i + 1) * m * k];
                        if ta {
                            kernels::gemm_t(k, n, m, bs, tb, gs, true, ds, true);
                        } else {
                            kernels::gemm_t(m, n, k, gs, false, bs, !tb, ds, true);
                        }
                    }
                }
                if let Some(db) = self.accumulate(grads, b) {
                    for i in 0..batch {
                        let (gs, as_) = (&gd[i * m * n..(i + 1) * m * n], &av[i * m * k..(i + 1) * m * k]);
                        let ds = &mut db[i * k * n..(i + 1) * k * n];
                        if tb {
                            kernels::gemm_t(n, m, k, gs, true, as_, ta, ds, true);
                        } else {
                            kernels::gemm_t(k, m, n, as_, !ta, gs, false, ds, true);
                        }
                    }
                }
            }
            &Op::Add { a, b } | &Op::Sub { a, b } => {
                let out = node.value.shape();
                let sign = if matches!(node.op, Op::Sub { .. }) { -T::one() } else { T::one() };
                for (v, s) in [(a, T::one()), (b, sign)] {
                    let shape = self.shape(v).to_vec();
                    if let Some(dst) = self.accumulate(grads, v) {
                        kernels::reduce_into(dst, &shape, out, gd, s);
                    }
                }
            }
            &Op::Mul { a, b } => {
                let out = node.value.shape();
                let (av, bv) = (self.value(a).data(), self.value(b).data());
                self.reduce_broadcast(grads, out, gd, a, b, true, |_, ib| bv[ib]);
                self.reduce_broadcast(grads, out, gd, a, b, false, |ia, _| av[ia]);
            }
            &Op::Scale { a, s } => {
                if let Some(da) = self.accumulate(grads, a) {
                    da.iter_mut().zip(gd).for_each(|(d, &gi)| *d += gi * s);
                }
            }
            Op::Gelu { a, tanh } => {
                let av = self.value(*a).data();
                if let Some(da) = self.accumulate(grads, *a) {
                    for (((d, &gi), &x), &t) in da.iter_mut().zip(gd).zip(av).zip(tanh) {
                        *d += gi * kernels::gelu_grad_from_tanh(x, t);
                    }
                }
            }
            &Op::Exp { a } => {
                let y = node.value.data();
                if let Some(da) = self.accumulate(grads, a) {
                    for ((d, &gi), &yi) in da.iter_mut().zip(gd).zip(y) {
                        *d += gi * yi;
                    }
                }
            }
            &Op::Softmax { a, lanes } => {
                let y = node.value.data();
                if let Some(da) = self.accumulate(grads, a) {
                    kernels::softmax_backward(y, gd, lanes, da);
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let n = *node.value.shape().last().unwrap_or(&1);
                if let Some(b) = *beta {
                    if let Some(db) = self.accumulate(grads, b) {
                        for row in gd.chunks(n) {
                            db.iter_mut().zip(row).for_each(|(d, &gi)| *d += gi);
                        }
                    }
                }
                let dxhat: Vec<T> = match *gamma {
                    Some(gm) => {
                        if let Some(dg) = self.accumulate(grads, gm) {
                            for (row, xr) in gd.chunks(n).zip(xhat.chunks(n)) {
                                for ((d, &gi), &xi) in dg.iter_mut().zip(row).zip(xr) {
                                    *d += gi * xi;
                                }
                            }
                        }
                        let gv = self.value(gm).data();
                        gd.chunks(n).flat_map(|row| row.iter().zip(gv).map(|(&gi, &s)| gi * s)).collect()
                    }
                    None => gd.to_vec(),
                };
                if let Some(dx) = self.accumulate(grads, *x) {
                    kernels::layer_norm_backward(&dxhat, xhat, inv_std, n, dx);
                }
            }
            Op::L2Normalize { a, lanes, norms, eps } => {
                let y = node.value.data();
                if let Some(da) = self.accumulate(grads, *a) {
                    kernels::l2_normalize_backward(y, norms, gd, *lanes, *eps, da);
                }
            }
            &Op::Reshape { a } => {
                if let Some(da) = self.accumulate(grads, a) {
                    da.iter_mut().zip(gd).for_each(|(d, &gi)| *d += gi);
                }
            }
            Op::Permute { a, axes } => {
                let mut inverse = vec![0; axes.len()];
                for (i, &ax) in axes.iter().enumerate() {
                    inverse[ax] = i;
                }
                let (_, back) = kernels::permute(gd, node.value.shape(), &inverse);
                if let Some(da) = self.accumulate(grads, *a) {
                    da.iter_mut().zip(&back).for_each(|(d, &gi)| *d += gi);
                }
            }
            &Op::MeanAxis { a, lanes } => {
                let inv = T::one() / T::from_f64(lanes.len as f64);
                if let Some(da) = self.accumulate(grads, a) {
                    let mut lane = 0;
                    lanes.for_each(|base, stride| {
                        let gi = gd[lane] * inv;
                        lane += 1;
                        for j in 0..lanes.len {
                            da[base + j * stride] += gi;
                        }
                    });
                }
            }
            &Op::Sum { a } => {
                let gi = gd[0];
                if let Some(da) = self.accumulate(grads, a) {
                    da.iter_mut().for_each(|d| *d += gi);
                }
            }
            Op::CrossEntropy { logits, targets, probs } => {
                let classes = self.shape(*logits)[1];
                let scale = gd[0] / T::from_f64(targets.len() as f64);
                if let Some(dz) = self.accumulate(grads, *logits) {
                    for (i, &t) in targets.iter().enumerate() {
                        for c in 0..classes {
                            let onehot = if c == t { T::one() } else { T::zero() };
                            dz[i * classes + c] += (probs[i * classes + c] - onehot) * scale;
                        }
                    }
                }
            }
        }
        Ok(())
    }
}
