//! Dense row-major `f64` tensors and the numeric kernels shared by the tape
//! and the tape-free inference paths.

use crate::error::{Error, Result};

/// Dense row-major array of 64-bit reals.
///
/// `grad` is only ever populated by [`crate::autodiff::Tape::backward`].
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(Error::contract(format!(
                "tensor extents must be positive, got {shape:?}"
            )));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::Dimension {
                op: "tensor",
                lhs: shape,
                rhs: vec![data.len()],
            });
        }
        Ok(Self {
            shape,
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: Vec::new(),
            data: vec![value],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn vector(data: Vec<f64>) -> Result<Self> {
        Self::new(vec![data.len()], data)
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    /// Stacks equal-length rows into a `[rows.len() × width]` matrix.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let width = rows.first().map(Vec::len).unwrap_or(0);
        if rows.iter().any(|r| r.len() != width) {
            return Err(Error::contract("ragged rows"));
        }
        let data = rows.iter().flatten().copied().collect();
        Self::matrix(rows.len(), width, data)
    }

    pub fn zeros(shape: Vec<usize>) -> Result<Self> {
        let n = shape.iter().product();
        Self::new(shape, vec![0.0; n])
    }

    pub fn with_requires_grad(mut self, flag: bool) -> Self {
        self.requires_grad = flag;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }

    pub(crate) fn accumulate_grad(&mut self, g: &[f64]) {
        match &mut self.grad {
            Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a += b),
            None => self.grad = Some(g.to_vec()),
        }
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> Result<f64> {
        if self.is_scalar() {
            Ok(self.data[0])
        } else {
            Err(Error::contract(format!(
                "item() on non-scalar tensor of shape {:?}",
                self.shape
            )))
        }
    }

    /// `(rows, cols)` of a rank-2 tensor.
    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape[..] {
            [r, c] => Ok((r, c)),
            _ => Err(Error::contract(format!(
                "expected a matrix, got shape {:?}",
                self.shape
            ))),
        }
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let w = *self.shape.last().unwrap_or(&1);
        &self.data[i * w..(i + 1) * w]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        let w = (*self.shape.last().unwrap_or(&1)).max(1);
        self.data.chunks(w)
    }

    /// Copies the selected rows of a matrix into a new matrix.
    pub fn select_rows(&self, indices: &[usize]) -> Result<Tensor> {
        let (n, w) = self.dims2()?;
        let mut data = Vec::with_capacity(indices.len() * w);
        for &i in indices {
            if i >= n {
                return Err(Error::contract(format!("row {i} out of range for {n} rows")));
            }
            data.extend_from_slice(self.row(i));
        }
        Tensor::matrix(indices.len(), w, data)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Raw kernels over flat slices. Both the tape and tape-free inference call
/// these so that the two paths produce bit-identical values.
pub mod kernels {
    /// `c = beta*c + a·b` for row-major `a[m×k]`, `b[k×n]`.
    ///
    /// `ta`/`tb` reinterpret the stored operand as transposed, so `a` is then
    /// stored as `[k×m]` and `b` as `[n×k]`.
    #[allow(clippy::too_many_arguments)]
    pub fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[f64],
        ta: bool,
        b: &[f64],
        tb: bool,
        beta: f64,
        c: &mut [f64],
    ) {
        let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
        let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
        debug_assert_eq!(a.len(), m * k);
        debug_assert_eq!(b.len(), k * n);
        debug_assert_eq!(c.len(), m * n);
        // SAFETY: slice lengths match the strided extents asserted above.
        unsafe {
            matrixmultiply::dgemm(
                m,
                k,
                n,
                1.0,
                a.as_ptr(),
                rsa,
                csa,
                b.as_ptr(),
                rsb,
                csb,
                beta,
                c.as_mut_ptr(),
                n as isize,
                1,
            );
        }
    }

    pub fn matmul(m: usize, k: usize, n: usize, a: &[f64], b: &[f64]) -> Vec<f64> {
        let mut c = vec![0.0; m * n];
        gemm(m, k, n, a, false, b, false, 0.0, &mut c);
        c
    }

    /// `x[m×i]·wᵀ + bias` with `w[o×i]`.
    pub fn linear(m: usize, i: usize, o: usize, x: &[f64], w: &[f64], bias: &[f64]) -> Vec<f64> {
        let mut y = vec![0.0; m * o];
        gemm(m, i, o, x, false, w, true, 0.0, &mut y);
        add_row_inplace(&mut y, bias);
        y
    }

    pub fn add_row_inplace(y: &mut [f64], row: &[f64]) {
        for chunk in y.chunks_mut(row.len()) {
            chunk.iter_mut().zip(row).for_each(|(v, b)| *v += b);
        }
    }

    pub fn relu_inplace(y: &mut [f64]) {
        y.iter_mut().for_each(|v| {
            if *v <= 0.0 {
                *v = 0.0
            }
        });
    }

    pub fn col_sum_into(g: &[f64], width: usize, out: &mut [f64]) {
        for chunk in g.chunks(width) {
            out.iter_mut().zip(chunk).for_each(|(o, v)| *o += v);
        }
    }

    /// Row-wise softmax with max subtraction.
    pub fn softmax_rows(x: &[f64], width: usize) -> Vec<f64> {
        let mut out = vec![0.0; x.len()];
        for (src, dst) in x.chunks(width).zip(out.chunks_mut(width)) {
            let max = src.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for (d, s) in dst.iter_mut().zip(src) {
                *d = (s - max).exp();
                total += *d;
            }
            dst.iter_mut().for_each(|d| *d /= total);
        }
        out
    }

    pub fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
    }
}
