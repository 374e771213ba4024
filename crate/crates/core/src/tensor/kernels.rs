//! Slice-level numeric kernels shared by the graph ops.

use super::Scalar;

/// Strided read-only matrix view into a flat buffer.
#[derive(Clone, Copy)]
pub(crate) struct Mat<'a, T> {
    pub data: &'a [T],
    pub off: usize,
    pub rows: usize,
    pub cols: usize,
    pub rs: usize,
    pub cs: usize,
}

impl<'a, T> Mat<'a, T> {
    pub fn new(data: &'a [T], rows: usize, cols: usize) -> Self {
        Mat {
            data,
            off: 0,
            rows,
            cols,
            rs: cols,
            cs: 1,
        }
    }

    /// Sub-block of a row-major buffer with row stride `rs`.
    pub fn block(data: &'a [T], off: usize, rows: usize, cols: usize, rs: usize) -> Self {
        Mat {
            data,
            off,
            rows,
            cols,
            rs,
            cs: 1,
        }
    }

    pub fn t(self) -> Self {
        Mat {
            rows: self.cols,
            cols: self.rows,
            rs: self.cs,
            cs: self.rs,
            ..self
        }
    }

    fn last_index(&self) -> Option<usize> {
        if self.rows == 0 || self.cols == 0 {
            None
        } else {
            Some(self.off + (self.rows - 1) * self.rs + (self.cols - 1) * self.cs)
        }
    }
}

/// Strided mutable output region.
pub(crate) struct MatMut<'a, T> {
    pub data: &'a mut [T],
    pub off: usize,
    pub rs: usize,
    pub cs: usize,
}

impl<'a, T> MatMut<'a, T> {
    pub fn new(data: &'a mut [T], cols: usize) -> Self {
        MatMut {
            data,
            off: 0,
            rs: cols,
            cs: 1,
        }
    }

    pub fn block(data: &'a mut [T], off: usize, rs: usize) -> Self {
        MatMut {
            data,
            off,
            rs,
            cs: 1,
        }
    }
}

/// `c (+)= a · b`. Bounds are checked before handing raw pointers to the
/// blocked kernel.
pub(crate) fn gemm<T: Scalar>(a: Mat<'_, T>, b: Mat<'_, T>, c: MatMut<'_, T>, accumulate: bool) {
    assert_eq!(a.cols, b.rows, "gemm inner extent mismatch");
    let (m, k, n) = (a.rows, a.cols, b.cols);
    if m == 0 || n == 0 {
        return;
    }
    let c_last = c.off + (m - 1) * c.rs + (n - 1) * c.cs;
    assert!(c_last < c.data.len(), "gemm output out of bounds");
    if k == 0 {
        if !accumulate {
            for i in 0..m {
                for j in 0..n {
                    c.data[c.off + i * c.rs + j * c.cs] = T::zero();
                }
            }
        }
        return;
    }
    assert!(a.last_index().unwrap() < a.data.len(), "gemm lhs out of bounds");
    assert!(b.last_index().unwrap() < b.data.len(), "gemm rhs out of bounds");
    let beta = if accumulate { T::one() } else { T::zero() };
    // SAFETY: every addressed element was bounds-checked above; `c` is a
    // unique borrow so it cannot alias `a` or `b`.
    unsafe {
        T::gemm_raw(
            m,
            k,
            n,
            a.data.as_ptr().add(a.off),
            a.rs as isize,
            a.cs as isize,
            b.data.as_ptr().add(b.off),
            b.rs as isize,
            b.cs as isize,
            beta,
            c.data.as_mut_ptr().add(c.off),
            c.rs as isize,
            c.cs as isize,
        );
    }
}

/// Row-wise max-subtracted softmax over the first `valid` entries of `row`;
/// entries past `valid` are set to zero.
pub(crate) fn softmax_row<T: Scalar>(row: &mut [T], valid: usize) {
    let max = row[..valid].iter().copied().fold(T::neg_infinity(), T::max);
    let mut sum = T::zero();
    for v in &mut row[..valid] {
        *v = (*v - max).exp();
        sum += *v;
    }
    let inv = T::one() / sum;
    for v in &mut row[..valid] {
        *v *= inv;
    }
    for v in &mut row[valid..] {
        *v = T::zero();
    }
}

/// Softmax vector-Jacobian product for one row: `dx = y ⊙ (dy − ⟨dy, y⟩)`.
pub(crate) fn softmax_row_backward<T: Scalar>(y: &[T], dy: &[T], dx: &mut [T], scale: T) {
    let dot: T = y.iter().zip(dy).map(|(&a, &b)| a * b).sum();
    for ((d, &yv), &g) in dx.iter_mut().zip(y).zip(dy) {
        *d = yv * (g - dot) * scale;
    }
}

pub(crate) fn gelu<T: Scalar>(x: T) -> T {
    let half = T::from_f64(0.5);
    half * x * (T::one() + (x * T::from_f64(std::f64::consts::FRAC_1_SQRT_2)).erf())
}

pub(crate) fn gelu_grad<T: Scalar>(x: T) -> T {
    let half = T::from_f64(0.5);
    let cdf = half * (T::one() + (x * T::from_f64(std::f64::consts::FRAC_1_SQRT_2)).erf());
    let pdf = (-half * x * x).exp() * T::from_f64(0.398_942_280_401_432_7);
    cdf + x * pdf
}
