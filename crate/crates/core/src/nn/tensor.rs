use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive, ToPrimitive};
use serde::{Deserialize, Serialize};

/// Floating-point element type usable by the substrate. `f32` is the
/// training precision; `f64` serves gradient verification.
pub trait Real:
    Float
    + FromPrimitive
    + ToPrimitive
    + Default
    + Debug
    + Display
    + Sum
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Send
    + Sync
    + 'static
{
    /// `c = alpha * a * b + beta * c` for row/column-strided matrices.
    /// `a` is `m x k`, `b` is `k x n`, `c` is `m x n`.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
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

    fn from_f64_lossy(v: f64) -> Self {
        Self::from_f64(v).expect("finite conversion")
    }
}

fn check_extent(len: usize, rows: usize, cols: usize, rs: isize, cs: isize) {
    if rows == 0 || cols == 0 {
        return;
    }
    let last = (rows as isize - 1) * rs + (cols as isize - 1) * cs;
    assert!(rs >= 0 && cs >= 0 && (last as usize) < len, "gemm operand out of bounds");
}

macro_rules! impl_real {
    ($t:ty, $gemm:path) => {
        impl Real for $t {
            fn gemm(
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
                check_extent(a.len(), m, k, rsa, csa);
                check_extent(b.len(), k, n, rsb, csb);
                check_extent(c.len(), m, n, rsc, csc);
                if m == 0 || n == 0 {
                    return;
                }
                // SAFETY: every operand extent was bounds-checked above.
                unsafe {
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
                    )
                }
            }
        }
    };
}

impl_real!(f32, matrixmultiply::sgemm);
impl_real!(f64, matrixmultiply::dgemm);

/// Dense row-major array. Images are `[N, C, H, W]`, feature batches `[N, D]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor<F> {
    pub shape: Vec<usize>,
    pub data: Vec<F>,
}

impl<F: Real> Tensor<F> {
    pub fn new(shape: Vec<usize>, data: Vec<F>) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "shape {shape:?} does not match {} elements",
            data.len()
        );
        Self { shape, data }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![F::zero(); n],
        }
    }

    pub fn filled(shape: Vec<usize>, value: F) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![value; n],
        }
    }

    /// Stacks equal-length rows into `[rows.len(), D]`.
    pub fn from_rows(rows: &[Vec<F>]) -> Self {
        let d = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * d);
        for r in rows {
            assert_eq!(r.len(), d, "ragged rows");
            data.extend_from_slice(r);
        }
        Self::new(vec![rows.len(), d], data)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Leading dimension.
    pub fn rows(&self) -> usize {
        self.shape.first().copied().unwrap_or(1)
    }

    /// Product of all but the leading dimension.
    pub fn row_len(&self) -> usize {
        self.shape.iter().skip(1).product()
    }

    pub fn row(&self, i: usize) -> &[F] {
        let d = self.row_len();
        &self.data[i * d..(i + 1) * d]
    }

    pub fn to_rows(&self) -> Vec<Vec<F>> {
        (0..self.rows()).map(|i| self.row(i).to_vec()).collect()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn cast<G: Real>(&self) -> Tensor<G> {
        Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .map(|v| G::from_f64_lossy(v.to_f64().unwrap_or(f64::NAN)))
                .collect(),
        }
    }
}

pub fn dot<F: Real>(a: &[F], b: &[F]) -> F {
    a.iter().zip(b).map(|(&x, &y)| x * y).sum()
}

pub fn l2_norm<F: Real>(a: &[F]) -> F {
    dot(a, a).sqrt()
}

pub fn sq_dist<F: Real>(a: &[F], b: &[F]) -> F {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| {
            let d = x - y;
            d * d
        })
        .sum()
}

/// Returns `v / ||v||`, or `v` unchanged when its norm is zero.
pub fn normalized<F: Real>(v: &[F]) -> Vec<F> {
    let n = l2_norm(v);
    if n > F::zero() {
        v.iter().map(|&x| x / n).collect()
    } else {
        v.to_vec()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_with_transposed_operand() {
        // a = [[1,2],[3,4]], b^T stored row-major as [[5,6],[7,8]] -> b = [[5,7],[6,8]]
        let a = [1.0f64, 2.0, 3.0, 4.0];
        let bt = [5.0f64, 6.0, 7.0, 8.0];
        let mut c = [0.0f64; 4];
        f64::gemm(2, 2, 2, 1.0, &a, 2, 1, &bt, 1, 2, 0.0, &mut c, 2, 1);
        assert_eq!(c, [17.0, 23.0, 39.0, 53.0]);
    }

    #[test]
    fn vector_helpers() {
        let v = [3.0f32, 4.0];
        assert_eq!(l2_norm(&v), 5.0);
        assert_eq!(normalized(&v), vec![0.6, 0.8]);
        assert_eq!(normalized(&[0.0f32, 0.0]), vec![0.0, 0.0]);
        assert_eq!(sq_dist(&[1.0f64, 0.0], &[0.0, 1.0]), 2.0);
    }
}
