//! Arbitrary-length discrete Fourier transforms.
//!
//! Powers of two use an iterative radix-2 kernel; every other length goes
//! through Bluestein's chirp-z reformulation on a padded power-of-two
//! convolution. Forward transforms are unnormalized, inverse ones scale by 1/N.

use std::f64::consts::PI;

use num_complex::Complex64;

use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    Forward,
    Inverse,
}

/// A reusable transform plan for one length.
#[derive(Debug, Clone)]
pub struct FftPlan {
    len: usize,
    kind: PlanKind,
}

#[derive(Debug, Clone)]
enum PlanKind {
    Trivial,
    Radix2(Radix2),
    Bluestein(Box<Bluestein>),
}

#[derive(Debug, Clone)]
struct Radix2 {
    len: usize,
    // e^{-2πik/len} for k < len/2
    twiddles: Vec<Complex64>,
}

impl Radix2 {
    fn new(len: usize) -> Self {
        debug_assert!(len.is_power_of_two());
        let twiddles = (0..len / 2)
            .map(|k| Complex64::from_polar(1.0, -2.0 * PI * k as f64 / len as f64))
            .collect();
        Radix2 { len, twiddles }
    }

    /// Unnormalized transform; `Inverse` flips the twiddle sign only.
    fn process(&self, buf: &mut [Complex64], dir: Direction) {
        let n = self.len;
        let bits = n.trailing_zeros();
        for i in 0..n {
            let j = i.reverse_bits() >> (usize::BITS - bits);
            if j > i {
                buf.swap(i, j);
            }
        }
        let mut half = 1;
        while half < n {
            let stride = n / (2 * half);
            for start in (0..n).step_by(2 * half) {
                for k in 0..half {
                    let mut w = self.twiddles[k * stride];
                    if dir == Direction::Inverse {
                        w = w.conj();
                    }
                    let t = w * buf[start + k + half];
                    let u = buf[start + k];
                    buf[start + k] = u + t;
                    buf[start + k + half] = u - t;
                }
            }
            half *= 2;
        }
    }
}

#[derive(Debug, Clone)]
struct Bluestein {
    len: usize,
    inner: Radix2,
    // w_k = e^{-iπk²/len}
    chirp: Vec<Complex64>,
    // FFT of the conjugate chirp, wrapped onto the padded length
    kernel_fft: Vec<Complex64>,
}

impl Bluestein {
    fn new(len: usize) -> Self {
        let padded = (2 * len - 1).next_power_of_two();
        let inner = Radix2::new(padded);
        let two_n = 2 * len as u128;
        let chirp: Vec<Complex64> = (0..len)
            .map(|k| {
                // k² mod 2N keeps the phase argument small and exact.
                let q = (k as u128 * k as u128) % two_n;
                Complex64::from_polar(1.0, -PI * q as f64 / len as f64)
            })
            .collect();
        let mut kernel = vec![Complex64::new(0.0, 0.0); padded];
        kernel[0] = chirp[0].conj();
        for k in 1..len {
            kernel[k] = chirp[k].conj();
            kernel[padded - k] = chirp[k].conj();
        }
        inner.process(&mut kernel, Direction::Forward);
        Bluestein {
            len,
            inner,
            chirp,
            kernel_fft: kernel,
        }
    }

    fn process(&self, buf: &mut [Complex64], scratch: &mut Vec<Complex64>, dir: Direction) {
        let m = self.inner.len;
        scratch.clear();
        scratch.resize(m, Complex64::new(0.0, 0.0));
        // The inverse transform is conj(F(conj(x))).
        let conj = dir == Direction::Inverse;
        for k in 0..self.len {
            let x = if conj { buf[k].conj() } else { buf[k] };
            scratch[k] = x * self.chirp[k];
        }
        self.inner.process(scratch, Direction::Forward);
        for (s, h) in scratch.iter_mut().zip(&self.kernel_fft) {
            *s *= h;
        }
        self.inner.process(scratch, Direction::Inverse);
        let scale = 1.0 / m as f64;
        for k in 0..self.len {
            let y = scratch[k] * scale * self.chirp[k];
            buf[k] = if conj { y.conj() } else { y };
        }
    }
}

impl FftPlan {
    pub fn new(len: usize) -> Self {
        let kind = if len <= 1 {
            PlanKind::Trivial
        } else if len.is_power_of_two() {
            PlanKind::Radix2(Radix2::new(len))
        } else {
            PlanKind::Bluestein(Box::new(Bluestein::new(len)))
        };
        FftPlan { len, kind }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// Transforms `buf` in place. The inverse includes the 1/N factor.
    pub fn process(&self, buf: &mut [Complex64], scratch: &mut Vec<Complex64>, dir: Direction) {
        debug_assert_eq!(buf.len(), self.len);
        match &self.kind {
            PlanKind::Trivial => {}
            PlanKind::Radix2(r) => r.process(buf, dir),
            PlanKind::Bluestein(b) => b.process(buf, scratch, dir),
        }
        if dir == Direction::Inverse && self.len > 1 {
            let s = 1.0 / self.len as f64;
            for z in buf.iter_mut() {
                *z *= s;
            }
        }
    }
}

/// Applies a transform along `axis` of a complex tensor.
pub fn fft_axis(x: &Tensor, axis: usize, dir: Direction) -> Result<Tensor> {
    if !x.is_complex() {
        return Err(Error::Usage(
            "fft expects a complex tensor; promote real input first".into(),
        ));
    }
    if axis >= x.rank() {
        return Err(Error::Dimension(format!(
            "fft axis {axis} out of range for shape {:?}",
            x.shape()
        )));
    }
    let shape = x.shape();
    let len = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    let outer: usize = shape[..axis].iter().product();
    let plan = FftPlan::new(len);
    let mut out = x.data().to_vec();
    let mut line = vec![Complex64::new(0.0, 0.0); len];
    let mut scratch = Vec::new();
    for o in 0..outer {
        for i in 0..inner {
            let base = o * len * inner + i;
            for (k, z) in line.iter_mut().enumerate() {
                let p = 2 * (base + k * inner);
                *z = Complex64::new(out[p], out[p + 1]);
            }
            plan.process(&mut line, &mut scratch, dir);
            for (k, z) in line.iter().enumerate() {
                let p = 2 * (base + k * inner);
                out[p] = z.re;
                out[p + 1] = z.im;
            }
        }
    }
    Tensor::new_complex(shape, out)
}

/// Forward DFT along the last axis.
pub fn fft(x: &Tensor) -> Result<Tensor> {
    let axis = x.rank().checked_sub(1).ok_or_else(|| {
        Error::Dimension("fft of a rank-0 tensor".into())
    })?;
    fft_axis(x, axis, Direction::Forward)
}

/// Inverse DFT along the last axis, scaled by 1/N.
pub fn ifft(x: &Tensor) -> Result<Tensor> {
    let axis = x.rank().checked_sub(1).ok_or_else(|| {
        Error::Dimension("ifft of a rank-0 tensor".into())
    })?;
    fft_axis(x, axis, Direction::Inverse)
}
