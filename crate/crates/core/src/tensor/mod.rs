//! Dense row-major tensors, a define-by-run autodiff graph and Adam.
//!
//! Everything here is generic over [`Real`] so the same encoder code runs in
//! `f32` for training and `f64` for gradient checking.

mod adam;
mod graph;
pub(crate) mod kernels;
mod nsem;

use std::fmt::Debug;
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign};

pub use adam::{AdamConfig, AdamState};
pub use graph::{Gradients, Graph, Var};
pub use nsem::{read_nsem, read_nsem_any, read_nsem_any_from, read_nsem_from, write_nsem, write_nsem_to, AnyTensor, DType};

use crate::error::{dim_err, Result};

/// Floating-point element type of a [`Tensor`].
pub trait Real:
    num_traits::Float
    + Default
    + Debug
    + Send
    + Sync
    + Sum
    + AddAssign
    + MulAssign
    + 'static
{
    const DTYPE: DType;

    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;

    /// `c[m×n] = alpha · a[m×k] · b[k×n] + beta · c`, arbitrary element strides.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: &[Self],
        a_strides: (isize, isize),
        b: &[Self],
        b_strides: (isize, isize),
        beta: Self,
        c: &mut [Self],
    );

    fn write_le(self, out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Self;
}

fn check_gemm_bounds(m: usize, k: usize, n: usize, a: usize, sa: (isize, isize), b: usize, sb: (isize, isize), c: usize) {
    let extent = |rows: usize, cols: usize, s: (isize, isize)| {
        if rows == 0 || cols == 0 {
            0
        } else {
            (rows - 1) * s.0 as usize + (cols - 1) * s.1 as usize + 1
        }
    };
    assert!(extent(m, k, sa) <= a, "gemm: lhs buffer too small");
    assert!(extent(k, n, sb) <= b, "gemm: rhs buffer too small");
    assert!(m * n <= c, "gemm: output buffer too small");
}

impl Real for f32 {
    const DTYPE: DType = DType::F32;

    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn to_f64(self) -> f64 {
        f64::from(self)
    }

    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: &[Self],
        a_strides: (isize, isize),
        b: &[Self],
        b_strides: (isize, isize),
        beta: Self,
        c: &mut [Self],
    ) {
        check_gemm_bounds(m, k, n, a.len(), a_strides, b.len(), b_strides, c.len());
        // SAFETY: the extents of all three operands were bounds-checked above.
        unsafe {
            matrixmultiply::sgemm(
                m,
                k,
                n,
                alpha,
                a.as_ptr(),
                a_strides.0,
                a_strides.1,
                b.as_ptr(),
                b_strides.0,
                b_strides.1,
                beta,
                c.as_mut_ptr(),
                n as isize,
                1,
            );
        }
    }

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes.try_into().expect("4 bytes"))
    }
}

impl Real for f64 {
    const DTYPE: DType = DType::F64;

    fn from_f64(v: f64) -> Self {
        v
    }
    fn to_f64(self) -> f64 {
        self
    }

    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: &[Self],
        a_strides: (isize, isize),
        b: &[Self],
        b_strides: (isize, isize),
        beta: Self,
        c: &mut [Self],
    ) {
        check_gemm_bounds(m, k, n, a.len(), a_strides, b.len(), b_strides, c.len());
        // SAFETY: see the f32 impl.
        unsafe {
            matrixmultiply::dgemm(
                m,
                k,
                n,
                alpha,
                a.as_ptr(),
                a_strides.0,
                a_strides.1,
                b.as_ptr(),
                b_strides.0,
                b_strides.1,
                beta,
                c.as_mut_ptr(),
                n as isize,
                1,
            );
        }
    }

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes.try_into().expect("8 bytes"))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T = f32> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Real> Tensor<T> {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<T>) -> Result<Self> {
        let shape = shape.into();
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(dim_err!(
                "shape {:?} holds {} elements but {} were given",
                shape,
                numel,
                data.len()
            ));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn ones(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, T::one())
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: T) -> Self {
        let shape = shape.into();
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![value; n],
        }
    }

    pub fn scalar(value: T) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn from_fn(shape: impl Into<Vec<usize>>, mut f: impl FnMut(usize) -> T) -> Self {
        let shape = shape.into();
        let n: usize = shape.iter().product();
        Self {
            shape,
            data: (0..n).map(&mut f).collect(),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> Option<T> {
        (self.data.len() == 1).then(|| self.data[0])
    }

    pub fn reshape(mut self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        let shape = shape.into();
        if shape.iter().product::<usize>() != self.data.len() {
            return Err(dim_err!("cannot reshape {:?} to {:?}", self.shape, shape));
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| U::from_f64(v.to_f64())).collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Row `i` of a 2-D tensor.
    pub fn row(&self, i: usize) -> &[T] {
        let cols = *self.shape.last().unwrap_or(&1);
        &self.data[i * cols..(i + 1) * cols]
    }
}

/// Plain matrix product of two 2-D tensors.
pub fn matmul<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (m, k, n) = kernels::matmul_dims(a.shape(), b.shape())?;
    let mut out = vec![T::zero(); m * n];
    kernels::gemm_t(m, k, n, a.data(), false, b.data(), false, &mut out, false);
    Tensor::new([m, n], out)
}

pub fn softmax<T: Real>(x: &Tensor<T>, axis: usize) -> Result<Tensor<T>> {
    let lanes = kernels::Lanes::new(x.shape(), axis)?;
    Tensor::new(x.shape().to_vec(), kernels::softmax_forward(x.data(), lanes))
}

/// Layer normalisation over the last axis.
pub fn layer_norm<T: Real>(x: &Tensor<T>, gamma: &Tensor<T>, beta: &Tensor<T>, eps: f64) -> Result<Tensor<T>> {
    let n = *x.shape().last().ok_or_else(|| dim_err!("layer_norm of a 0-d tensor"))?;
    if gamma.numel() != n || beta.numel() != n {
        return Err(dim_err!(
            "layer_norm affine shapes {:?}/{:?} do not match row length {n}",
            gamma.shape(),
            beta.shape()
        ));
    }
    let (mut y, _, _) = kernels::layer_norm_forward(x.data(), n, T::from_f64(eps));
    for row in y.chunks_mut(n) {
        for ((v, &g), &b) in row.iter_mut().zip(gamma.data()).zip(beta.data()) {
            *v = *v * g + b;
        }
    }
    Tensor::new(x.shape().to_vec(), y)
}

pub const L2_EPS: f64 = 1e-12;

pub fn l2_normalize<T: Real>(x: &Tensor<T>, axis: usize) -> Result<Tensor<T>> {
    let lanes = kernels::Lanes::new(x.shape(), axis)?;
    let (y, _) = kernels::l2_normalize_forward(x.data(), lanes, T::from_f64(L2_EPS));
    Tensor::new(x.shape().to_vec(), y)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    #[test]
    fn matmul_identity_and_annihilation() {
        let i2 = Tensor::new([2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let m = Tensor::new([2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(matmul(&i2, &m).unwrap(), m);

        let a = Tensor::new([2, 2], vec![1.0, 0.0, 0.0, 0.0]).unwrap();
        let b = Tensor::new([2, 2], vec![0.0, 0.0, 0.0, 1.0]).unwrap();
        assert_eq!(matmul(&a, &b).unwrap().data(), &[0.0; 4]);
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let a = Tensor::<f64>::from_fn([3, 4], |_| rng.gen_range(-1.0..1.0));
        let b = Tensor::<f64>::from_fn([4, 2], |_| rng.gen_range(-1.0..1.0));
        let c = matmul(&a, &b).unwrap();
        for i in 0..3 {
            for j in 0..2 {
                let mut s = 0.0;
                for p in 0..4 {
                    s += a.data()[i * 4 + p] * b.data()[p * 2 + j];
                }
                assert!((c.data()[i * 2 + j] - s).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let a = Tensor::<f32>::zeros([2, 3]);
        let b = Tensor::<f32>::zeros([2, 3]);
        let msg = matmul(&a, &b).unwrap_err().to_string();
        assert!(msg.contains("[2, 3]"), "{msg}");
    }

    #[test]
    fn softmax_examples() {
        let x = Tensor::new([2], vec![0.0f64, 0.0]).unwrap();
        assert_eq!(softmax(&x, 0).unwrap().data(), &[0.5, 0.5]);

        let x = Tensor::new([2], vec![1000.0f64, 0.0]).unwrap();
        let y = softmax(&x, 0).unwrap();
        assert!((y.data()[0] - 1.0).abs() < 1e-12 && y.data()[1] < 1e-12);

        // exp/sum in extended precision: e^-2, e^-1, 1 over their sum
        let x = Tensor::new([3], vec![1.0f64, 2.0, 3.0]).unwrap();
        let y = softmax(&x, 0).unwrap();
        let expect = [0.090_030_573_170_380_46, 0.244_728_471_054_797_64, 0.665_240_955_774_821_9];
        for (a, b) in y.data().iter().zip(expect) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_over_middle_axis() {
        let x = Tensor::<f64>::from_fn([2, 3, 2], |i| i as f64 * 0.3);
        let y = softmax(&x, 1).unwrap();
        for o in 0..2 {
            for i in 0..2 {
                let s: f64 = (0..3).map(|j| y.data()[o * 6 + j * 2 + i]).sum();
                assert!((s - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn layer_norm_examples() {
        let g = Tensor::ones([3]);
        let b = Tensor::zeros([3]);
        let c = Tensor::new([1, 3], vec![2.0f64; 3]).unwrap();
        assert_eq!(layer_norm(&c, &g, &b, 1e-5).unwrap().data(), &[0.0; 3]);

        let x = Tensor::new([1, 3], vec![1.0f64, 2.0, 3.0]).unwrap();
        let y = layer_norm(&x, &g, &b, 1e-12).unwrap();
        let mean: f64 = y.data().iter().sum::<f64>() / 3.0;
        let var: f64 = y.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 3.0;
        assert!(mean.abs() < 1e-6 && (var - 1.0).abs() < 1e-6);
    }

    #[test]
    fn l2_normalize_examples() {
        let x = Tensor::new([2], vec![3.0f64, 4.0]).unwrap();
        let y = l2_normalize(&x, 0).unwrap();
        assert!((y.data()[0] - 0.6).abs() < 1e-15 && (y.data()[1] - 0.8).abs() < 1e-15);
        let z = Tensor::new([2], vec![0.0f64, 0.0]).unwrap();
        assert_eq!(l2_normalize(&z, 0).unwrap().data(), &[0.0, 0.0]);
    }

    proptest::proptest! {
        #[test]
        fn l2_normalize_gives_unit_rows(v in proptest::collection::vec(-10.0f64..10.0, 1..16)) {
            proptest::prop_assume!(v.iter().any(|x| x.abs() > 1e-3));
            let n = v.len();
            let y = l2_normalize(&Tensor::new([n], v).unwrap(), 0).unwrap();
            let norm = y.data().iter().map(|x| x * x).sum::<f64>().sqrt();
            proptest::prop_assert!((norm - 1.0).abs() < 1e-6);
        }

        #[test]
        fn softmax_is_a_distribution(v in proptest::collection::vec(-50.0f64..50.0, 1..12)) {
            let n = v.len();
            let y = softmax(&Tensor::new([n], v).unwrap(), 0).unwrap();
            proptest::prop_assert!(y.data().iter().all(|&p| p >= 0.0));
            proptest::prop_assert!((y.data().iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
    }
}
