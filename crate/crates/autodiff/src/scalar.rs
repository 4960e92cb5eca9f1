use std::fmt::{Debug, Display};
use std::ops::{Add, AddAssign, Div, Mul, MulAssign, Neg, Sub, SubAssign};

/// Floating-point element type of a [`Tensor`](crate::Tensor).
///
/// Implemented for `f32` (training) and `f64` (gradient checking).
pub trait Scalar:
    Copy
    + Default
    + Debug
    + Display
    + PartialOrd
    + Send
    + Sync
    + 'static
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
    + AddAssign
    + SubAssign
    + MulAssign
{
    const ZERO: Self;
    const ONE: Self;
    const NEG_INFINITY: Self;
    const NAME: &'static str;

    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
    fn exp(self) -> Self;
    fn ln(self) -> Self;
    fn sqrt(self) -> Self;
    fn tanh(self) -> Self;
    fn abs(self) -> Self;
    fn is_finite(self) -> bool;

    fn from_usize(v: usize) -> Self {
        Self::from_f64(v as f64)
    }

    fn max(self, other: Self) -> Self {
        if other > self {
            other
        } else {
            self
        }
    }

    /// `c = alpha * op(a) * op(b) + beta * c` over strided row/column views.
    ///
    /// # Safety
    /// Strides must describe views that stay inside the given slices.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: &[Self],
        rsa: isize,
        csa: isize,
        b: &[Self],
        rsb: isize,
        csb: isize,
        beta: Self,
        c: &mut [Self],
        rsc: isize,
        csc: isize,
    );
}

/// Below this many rows (or inner dimension) the packing done by the blocked
/// kernels costs more than it saves.
const SMALL: usize = 4;

/// Dot product with independent partial sums so the loop vectorises.
fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    let mut acc = [T::ZERO; 8];
    let (ca, cb) = (a.chunks_exact(8), b.chunks_exact(8));
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for l in 0..8 {
            acc[l] += x[l] * y[l];
        }
    }
    let mut tail = T::ZERO;
    for (&x, &y) in ra.iter().zip(rb) {
        tail += x * y;
    }
    ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7])) + tail
}

/// Direct loops for thin products, ordered so the innermost loop walks
/// contiguous memory when the layout allows it.
#[allow(clippy::too_many_arguments)]
unsafe fn small_gemm<T: Scalar>(
    m: usize,
    k: usize,
    n: usize,
    alpha: T,
    a: &[T],
    rsa: isize,
    csa: isize,
    b: &[T],
    rsb: isize,
    csb: isize,
    beta: T,
    c: &mut [T],
    rsc: isize,
    csc: isize,
) {
    let at = |i: usize, p: usize| *a.get_unchecked((i as isize * rsa + p as isize * csa) as usize);
    let bt = |p: usize, j: usize| *b.get_unchecked((p as isize * rsb + j as isize * csb) as usize);
    let ci = |i: usize, j: usize| (i as isize * rsc + j as isize * csc) as usize;
    for i in 0..m {
        for j in 0..n {
            let v = c.get_unchecked_mut(ci(i, j));
            *v = if beta == T::ZERO { T::ZERO } else { beta * *v };
        }
    }
    if csb == 1 && csc == 1 {
        for i in 0..m {
            let row = &mut c[ci(i, 0)..ci(i, 0) + n];
            for p in 0..k {
                let x = alpha * at(i, p);
                let brow = &b[(p as isize * rsb) as usize..(p as isize * rsb) as usize + n];
                for (o, &w) in row.iter_mut().zip(brow) {
                    *o += x * w;
                }
            }
        }
    } else if rsb == 1 && csa == 1 {
        for i in 0..m {
            let arow = &a[(i as isize * rsa) as usize..(i as isize * rsa) as usize + k];
            for j in 0..n {
                let bcol = &b[(j as isize * csb) as usize..(j as isize * csb) as usize + k];
                *c.get_unchecked_mut(ci(i, j)) += alpha * dot(arow, bcol);
            }
        }
    } else {
        for i in 0..m {
            for p in 0..k {
                let x = alpha * at(i, p);
                for j in 0..n {
                    *c.get_unchecked_mut(ci(i, j)) += x * bt(p, j);
                }
            }
        }
    }
}

macro_rules! impl_scalar {
    ($t:ty, $name:literal, $gemm:path) => {
        impl Scalar for $t {
            const ZERO: Self = 0.0;
            const ONE: Self = 1.0;
            const NEG_INFINITY: Self = <$t>::NEG_INFINITY;
            const NAME: &'static str = $name;

            #[inline]
            fn from_f64(v: f64) -> Self {
                v as $t
            }
            #[inline]
            fn to_f64(self) -> f64 {
                self as f64
            }
            #[inline]
            fn exp(self) -> Self {
                <$t>::exp(self)
            }
            #[inline]
            fn ln(self) -> Self {
                <$t>::ln(self)
            }
            #[inline]
            fn sqrt(self) -> Self {
                <$t>::sqrt(self)
            }
            #[inline]
            fn tanh(self) -> Self {
                <$t>::tanh(self)
            }
            #[inline]
            fn abs(self) -> Self {
                <$t>::abs(self)
            }
            #[inline]
            fn is_finite(self) -> bool {
                <$t>::is_finite(self)
            }

            unsafe fn gemm(
                m: usize,
                k: usize,
                n: usize,
                alpha: Self,
                a: &[Self],
                rsa: isize,
                csa: isize,
                b: &[Self],
                rsb: isize,
                csb: isize,
                beta: Self,
                c: &mut [Self],
                rsc: isize,
                csc: isize,
            ) {
                if m <= SMALL || k <= SMALL {
                    return small_gemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
                }
                $gemm(
                    m,
                    k,
                    n,
                    alpha,
                    a.as_ptr(),
                    rsa,
                    csa,
                    b.as_ptr(),
                    rsb,
                    csb,
                    beta,
                    c.as_mut_ptr(),
                    rsc,
                    csc,
                );
            }
        }
    };
}

impl_scalar!(f32, "f32", matrixmultiply::sgemm);
impl_scalar!(f64, "f64", matrixmultiply::dgemm);
