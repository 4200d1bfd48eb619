//! Dense row-major tensors over `f64`, optionally complex.
//!
//! Complex tensors store interleaved `(re, im)` pairs, so `data.len()` is twice
//! the element count. Real and complex tensors never mix implicitly: use
//! [`Tensor::promote`] and [`Tensor::real`] to cross over.

use std::fmt;

use crate::error::{Error, Result};

#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    complex: bool,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let kind = if self.complex { "c64" } else { "f64" };
        write!(f, "Tensor<{kind}>{:?}", self.shape)?;
        if self.data.len() <= 16 {
            write!(f, " {:?}", self.data)?;
        }
        Ok(())
    }
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Dimension(format!(
                "shape {shape:?} holds {n} elements but {} values were given",
                data.len()
            )));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
            complex: false,
        })
    }

    /// Builds a complex tensor from interleaved `(re, im)` pairs.
    pub fn new_complex(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if 2 * n != data.len() {
            return Err(Error::Dimension(format!(
                "complex shape {shape:?} needs {} interleaved values, got {}",
                2 * n,
                data.len()
            )));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
            complex: true,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn zeros_complex(shape: &[usize]) -> Self {
        let n: usize = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; 2 * n],
            complex: true,
        }
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n: usize = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; n],
            complex: false,
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: Vec::new(),
            data: vec![value],
            complex: false,
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f64) -> Self {
        let n: usize = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: (0..n).map(&mut f).collect(),
            complex: false,
        }
    }

    /// A zero tensor with the same shape and kind as `self`.
    pub fn zeros_like(&self) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: vec![0.0; self.data.len()],
            complex: self.complex,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Number of (possibly complex) elements.
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_complex(&self) -> bool {
        self.complex
    }

    /// Raw storage; interleaved pairs for complex tensors.
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn last_dim(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }

    /// The single value of a one-element real tensor.
    pub fn item(&self) -> f64 {
        debug_assert!(!self.complex && self.data.len() == 1);
        self.data[0]
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        if n != self.numel() {
            return Err(Error::shapes("reshape", &self.shape, shape));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data: self.data.clone(),
            complex: self.complex,
        })
    }

    pub(crate) fn with_shape(mut self, shape: &[usize]) -> Tensor {
        debug_assert_eq!(shape.iter().product::<usize>(), self.numel());
        self.shape = shape.to_vec();
        self
    }

    /// Real to complex with zero imaginary part.
    pub fn promote(&self) -> Tensor {
        if self.complex {
            return self.clone();
        }
        let mut data = Vec::with_capacity(2 * self.data.len());
        for &x in &self.data {
            data.push(x);
            data.push(0.0);
        }
        Tensor {
            shape: self.shape.clone(),
            data,
            complex: true,
        }
    }

    /// Real part of a complex tensor (identity for real tensors).
    pub fn real(&self) -> Tensor {
        if !self.complex {
            return self.clone();
        }
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().step_by(2).copied().collect(),
            complex: false,
        }
    }

    pub fn imag(&self) -> Tensor {
        if !self.complex {
            return self.zeros_like();
        }
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().skip(1).step_by(2).copied().collect(),
            complex: false,
        }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
            complex: self.complex,
        }
    }

    pub(crate) fn zip_map(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
        debug_assert_eq!(self.data.len(), other.data.len());
        Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
            complex: self.complex,
        }
    }

    pub(crate) fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.data.len(), other.data.len());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Largest absolute elementwise difference; infinite on shape mismatch.
    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        if self.shape != other.shape || self.complex != other.complex {
            return f64::INFINITY;
        }
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// Row-major matrix product over the last two axes.
    ///
    /// Either operand may be a plain matrix that broadcasts against the other's
    /// leading batch axes; otherwise the batch axes must match exactly.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let plan = MatmulPlan::new(self, other)?;
        let mut out = vec![0.0; plan.out_len()];
        plan.run(&self.data, &other.data, &mut out);
        Tensor::new(&plan.out_shape, out)
    }

    /// Softmax over the last axis with max subtraction.
    pub fn softmax_lastdim(&self) -> Result<Tensor> {
        if self.complex {
            return Err(Error::Usage("softmax of a complex tensor".into()));
        }
        if self.data.iter().any(|x| x.is_nan()) {
            return Err(Error::Numeric("softmax input contains NaN".into()));
        }
        let mut out = self.data.clone();
        let w = self.last_dim().max(1);
        for row in out.chunks_mut(w) {
            softmax_in_place(row);
        }
        Tensor::new(&self.shape, out)
    }

    /// Swaps the last two axes.
    pub fn transpose_last2(&self) -> Result<Tensor> {
        if self.rank() < 2 || self.complex {
            return Err(Error::Usage("transpose needs a real tensor of rank >= 2".into()));
        }
        let r = self.rank();
        let (m, n) = (self.shape[r - 2], self.shape[r - 1]);
        let mut out = vec![0.0; self.data.len()];
        for (src, dst) in self.data.chunks(m * n).zip(out.chunks_mut(m * n)) {
            for i in 0..m {
                for j in 0..n {
                    dst[j * m + i] = src[i * n + j];
                }
            }
        }
        let mut shape = self.shape.clone();
        shape.swap(r - 2, r - 1);
        Tensor::new(&shape, out)
    }
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        total += *x;
    }
    for x in row.iter_mut() {
        *x /= total;
    }
}

/// `c (+)= op(a) * op(b)` for row-major `a: m x k`, `b: k x n`, with optional
/// transposition of either operand expressed through strides.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_trans: bool,
    b: &[f64],
    b_trans: bool,
    c: &mut [f64],
    accumulate: bool,
) {
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if a_trans { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_trans { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { 1.0 } else { 0.0 };
    debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    // SAFETY: the slices cover the strided extents checked above.
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

/// Shape bookkeeping for broadcast batched matmul.
#[derive(Debug, Clone)]
pub(crate) struct MatmulPlan {
    pub m: usize,
    pub k: usize,
    pub n: usize,
    pub batch: usize,
    pub a_batched: bool,
    pub b_batched: bool,
    pub out_shape: Vec<usize>,
}

impl MatmulPlan {
    pub fn new(a: &Tensor, b: &Tensor) -> Result<Self> {
        if a.complex || b.complex {
            return Err(Error::Usage("matmul is defined for real tensors".into()));
        }
        if a.rank() < 2 || b.rank() < 2 {
            return Err(Error::shapes("matmul needs rank >= 2", &a.shape, &b.shape));
        }
        let (ra, rb) = (a.rank(), b.rank());
        let (m, k) = (a.shape[ra - 2], a.shape[ra - 1]);
        let (k2, n) = (b.shape[rb - 2], b.shape[rb - 1]);
        if k != k2 {
            return Err(Error::shapes("matmul inner dimensions", &a.shape, &b.shape));
        }
        let a_lead = &a.shape[..ra - 2];
        let b_lead = &b.shape[..rb - 2];
        let lead = if b_lead.is_empty() {
            a_lead
        } else if a_lead.is_empty() || a_lead == b_lead {
            b_lead
        } else {
            return Err(Error::shapes("matmul batch dimensions", &a.shape, &b.shape));
        };
        let mut out_shape = lead.to_vec();
        out_shape.push(m);
        out_shape.push(n);
        Ok(MatmulPlan {
            m,
            k,
            n,
            batch: lead.iter().product(),
            a_batched: !a_lead.is_empty(),
            b_batched: !b_lead.is_empty(),
            out_shape,
        })
    }

    pub fn out_len(&self) -> usize {
        self.batch * self.m * self.n
    }

    pub fn run(&self, a: &[f64], b: &[f64], out: &mut [f64]) {
        let (m, k, n) = (self.m, self.k, self.n);
        if !self.b_batched {
            // Fold the batch into rows: one large product.
            gemm(self.batch * m, k, n, a, false, b, false, out, false);
            return;
        }
        for i in 0..self.batch {
            let ai = if self.a_batched { &a[i * m * k..] } else { a };
            let bi = &b[i * k * n..];
            gemm(m, k, n, ai, false, bi, false, &mut out[i * m * n..], false);
        }
    }

    /// Gradients of `out = a @ b` given `d_out`.
    pub fn backward(&self, a: &[f64], b: &[f64], d_out: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let (m, k, n) = (self.m, self.k, self.n);
        let a_len = if self.a_batched { self.batch * m * k } else { m * k };
        let b_len = if self.b_batched { self.batch * k * n } else { k * n };
        let mut da = vec![0.0; a_len];
        let mut db = vec![0.0; b_len];
        if !self.b_batched {
            let rows = self.batch * m;
            gemm(rows, n, k, d_out, false, b, true, &mut da, false);
            gemm(k, rows, n, a, true, d_out, false, &mut db, false);
            return (da, db);
        }
        for i in 0..self.batch {
            let go = &d_out[i * m * n..];
            let bi = &b[i * k * n..];
            let ai = if self.a_batched { &a[i * m * k..] } else { a };
            if self.a_batched {
                gemm(m, n, k, go, false, bi, true, &mut da[i * m * k..], false);
            } else {
                gemm(m, n, k, go, false, bi, true, &mut da, true);
            }
            gemm(k, m, n, ai, true, go, false, &mut db[i * k * n..], false);
        }
        (da, db)
    }
}
