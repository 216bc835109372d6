//! Dense kernels evaluated under a [`PrecisionContext`].
//!
//! Each elementary operation inside a kernel is computed in the storage type
//! and rounded to the context's format. Norms are diagnostics and always
//! accumulate in `f64`.

mod eig;
mod lu;
mod qr;

pub use eig::sym_eig;
pub use lu::invert;
pub use qr::{rrqr_truncate, thin_qr};

use crate::error::{Error, Result};
use crate::matrix::DenseMatrix;
use crate::precision::{Format, PrecisionFormat};
use crate::scalar::Real;

/// The precision a computation runs in.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PrecisionContext {
    pub fmt: PrecisionFormat,
}

impl PrecisionContext {
    pub fn new(fmt: Format) -> Self {
        Self { fmt: fmt.params() }
    }

    pub fn format(&self) -> Format {
        self.fmt.name
    }

    /// Unit roundoff of the context.
    pub fn u(&self) -> f64 {
        self.fmt.u
    }

    #[inline]
    pub fn round<T: Real>(&self, x: T) -> T {
        self.fmt.round(x)
    }

    #[inline]
    pub fn add<T: Real>(&self, a: T, b: T) -> T {
        self.round(a + b)
    }

    #[inline]
    pub fn sub<T: Real>(&self, a: T, b: T) -> T {
        self.round(a - b)
    }

    #[inline]
    pub fn mul<T: Real>(&self, a: T, b: T) -> T {
        self.round(a * b)
    }

    #[inline]
    pub fn div<T: Real>(&self, a: T, b: T) -> T {
        self.round(a / b)
    }

    #[inline]
    pub fn sqrt<T: Real>(&self, a: T) -> T {
        self.round(a.sqrt())
    }

    /// A constant as the nearest value of the context's format.
    #[inline]
    pub fn constant<T: Real>(&self, x: f64) -> T {
        self.round(T::of(x))
    }

    /// Inner product accumulated in index order.
    pub fn dot<T: Real>(&self, a: &[T], b: &[T]) -> T {
        let mut acc = T::zero();
        for (&x, &y) in a.iter().zip(b) {
            acc = self.add(acc, self.mul(x, y));
        }
        acc
    }

    /// Euclidean norm with scaling against overflow in narrow formats.
    pub fn norm2<T: Real>(&self, x: &[T]) -> T {
        let scale = x.iter().fold(T::zero(), |m, v| m.max(v.abs()));
        if scale.is_zero() || !scale.is_finite() {
            return scale;
        }
        let mut ssq = T::zero();
        for &v in x {
            let r = self.div(v, scale);
            ssq = self.add(ssq, self.mul(r, r));
        }
        self.mul(scale, self.sqrt(ssq))
    }

    pub fn round_matrix<T: Real>(&self, a: &DenseMatrix<T>) -> DenseMatrix<T> {
        a.map(|x| self.round(x))
    }

    /// `s * A`, each product rounded.
    pub fn scale<T: Real>(&self, a: &DenseMatrix<T>, s: T) -> DenseMatrix<T> {
        a.map(|x| self.mul(s, x))
    }

    /// `alpha * A + beta * B`, elementwise with every operation rounded.
    pub fn axpby<T: Real>(
        &self,
        alpha: T,
        a: &DenseMatrix<T>,
        beta: T,
        b: &DenseMatrix<T>,
    ) -> Result<DenseMatrix<T>> {
        if a.shape() != b.shape() {
            return Err(Error::DimensionMismatch {
                op: "axpby",
                left: a.shape(),
                right: b.shape(),
            });
        }
        let data = a
            .as_slice()
            .iter()
            .zip(b.as_slice())
            .map(|(&x, &y)| self.add(self.mul(alpha, x), self.mul(beta, y)))
            .collect();
        DenseMatrix::from_vec(a.rows(), a.cols(), data)
    }
}

impl From<Format> for PrecisionContext {
    fn from(f: Format) -> Self {
        Self::new(f)
    }
}

/// Size below which eigenvalues of a kernel `R M R^T` cannot be told apart
/// from cancellation noise: `2 u ||R |M|^(1/2)||_2^2`, where the columns of
/// `R` pair with the diagonal blocks `inner` of `M`. Zero when every block
/// is a nonnegative diagonal, since nothing can cancel then. Non-diagonal
/// blocks count as indefinite and use their Frobenius norm.
pub(crate) fn kernel_noise_floor<T: Real>(
    r: &DenseMatrix<T>,
    inner: &[&DenseMatrix<T>],
    ctx: &PrecisionContext,
) -> f64 {
    let mut w = Vec::with_capacity(r.cols());
    let mut signed = false;
    for m in inner {
        if is_diagonal(m) {
            let d = m.diag();
            signed |= d.iter().any(|v| *v < T::zero());
            w.extend(d.iter().map(|v| v.f64().abs()));
        } else {
            signed = true;
            w.extend(std::iter::repeat_n(norm_fro(*m), m.cols()));
        }
    }
    if !signed {
        return 0.0;
    }
    debug_assert_eq!(w.len(), r.cols());
    let rw = DenseMatrix::from_fn(r.rows(), r.cols(), |i, j| r[(i, j)].f64() * w[j].sqrt());
    2.0 * ctx.u() * spectral_norm_sq(&rw)
}

fn is_diagonal<T: Real>(m: &DenseMatrix<T>) -> bool {
    (0..m.rows()).all(|i| (0..m.cols()).all(|j| i == j || m[(i, j)].is_zero()))
}

/// `||R||_2^2` from the Gram matrix of the short side. Falls back to the
/// Frobenius norm if the eigensolver fails.
fn spectral_norm_sq(r: &DenseMatrix<f64>) -> f64 {
    if r.is_empty() {
        return 0.0;
    }
    let ctx = PrecisionContext::new(Format::Fp64);
    let rt = r.transpose();
    let gram = if r.rows() <= r.cols() {
        naive_product(r, &rt)
    } else {
        naive_product(&rt, r)
    };
    match sym_eig(&gram, &ctx) {
        Ok((_, vals)) => vals.iter().fold(0.0f64, |m, v| m.max(v.abs())),
        Err(_) => norm_fro(r).powi(2),
    }
}

fn naive_product(a: &DenseMatrix<f64>, b: &DenseMatrix<f64>) -> DenseMatrix<f64> {
    DenseMatrix::from_fn(a.rows(), b.cols(), |i, j| {
        (0..a.cols()).map(|k| a[(i, k)] * b[(k, j)]).sum()
    })
}

/// `A * B` with each multiply and add rounded; inner products run in index
/// order.
pub fn matmul<T: Real>(
    a: &DenseMatrix<T>,
    b: &DenseMatrix<T>,
    ctx: &PrecisionContext,
) -> Result<DenseMatrix<T>> {
    if a.cols() != b.rows() {
        return Err(Error::DimensionMismatch {
            op: "matmul",
            left: a.shape(),
            right: b.shape(),
        });
    }
    let (n, p, m) = (a.rows(), a.cols(), b.cols());
    let mut c = DenseMatrix::zeros(n, m);
    let bs = b.as_slice();
    let cs = c.as_mut_slice();
    for i in 0..n {
        let crow = &mut cs[i * m..(i + 1) * m];
        for k in 0..p {
            let aik = a[(i, k)];
            let brow = &bs[k * m..(k + 1) * m];
            for (cij, &bkj) in crow.iter_mut().zip(brow) {
                *cij = ctx.add(*cij, ctx.mul(aik, bkj));
            }
        }
    }
    Ok(c)
}

/// `A * B^T` without materializing the transpose.
pub fn matmul_nt<T: Real>(
    a: &DenseMatrix<T>,
    b: &DenseMatrix<T>,
    ctx: &PrecisionContext,
) -> Result<DenseMatrix<T>> {
    if a.cols() != b.cols() {
        return Err(Error::DimensionMismatch {
            op: "matmul_nt",
            left: a.shape(),
            right: b.shape(),
        });
    }
    Ok(DenseMatrix::from_fn(a.rows(), b.rows(), |i, j| {
        ctx.dot(a.row(i), b.row(j))
    }))
}

/// Frobenius norm, accumulated in `f64`.
pub fn norm_fro<T: Real>(a: &DenseMatrix<T>) -> f64 {
    a.as_slice()
        .iter()
        .map(|x| {
            let v = x.f64();
            v * v
        })
        .sum::<f64>()
        .sqrt()
}

/// Maximum absolute row sum, accumulated in `f64`.
pub fn norm_inf<T: Real>(a: &DenseMatrix<T>) -> f64 {
    (0..a.rows())
        .map(|i| a.row(i).iter().map(|x| x.f64().abs()).sum::<f64>())
        .fold(0.0, f64::max)
}

/// `||A + I||_inf` in `f64`, the sign-iteration convergence measure.
pub fn norm_inf_plus_identity<T: Real>(a: &DenseMatrix<T>) -> f64 {
    (0..a.rows())
        .map(|i| {
            a.row(i)
                .iter()
                .enumerate()
                .map(|(j, x)| {
                    let v = x.f64();
                    if i == j { (v + 1.0).abs() } else { v.abs() }
                })
                .sum::<f64>()
        })
        .fold(0.0, f64::max)
}

#[cfg(test)]
pub(crate) mod testutil {
    use crate::matrix::DenseMatrix;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    pub fn random(rows: usize, cols: usize, seed: u64) -> DenseMatrix<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        DenseMatrix::from_fn(rows, cols, |_, _| rng.gen_range(-1.0..1.0))
    }

    pub fn random_symmetric(n: usize, seed: u64) -> DenseMatrix<f64> {
        let r = random(n, n, seed);
        DenseMatrix::from_fn(n, n, |i, j| r[(i, j)] + r[(j, i)])
    }

    /// Plain f64 triple loop, independent of the context machinery.
    pub fn naive_mul(a: &DenseMatrix<f64>, b: &DenseMatrix<f64>) -> DenseMatrix<f64> {
        DenseMatrix::from_fn(a.rows(), b.cols(), |i, j| {
            let mut s = 0.0;
            for k in 0..a.cols() {
                s += a[(i, k)] * b[(k, j)];
            }
            s
        })
    }

    pub fn sub(a: &DenseMatrix<f64>, b: &DenseMatrix<f64>) -> DenseMatrix<f64> {
        DenseMatrix::from_fn(a.rows(), a.cols(), |i, j| a[(i, j)] - b[(i, j)])
    }
}

#[cfg(test)]
mod tests {
    use super::testutil::*;
    use super::*;

    #[test]
    fn matmul_identity_and_reference() {
        let ctx = PrecisionContext::new(Format::Fp64);
        let b = random(2, 3, 1);
        assert_eq!(matmul(&DenseMatrix::identity(2), &b, &ctx).unwrap(), b);

        let a = random(5, 4, 2);
        let b = random(4, 3, 3);
        assert_eq!(matmul(&a, &b, &ctx).unwrap(), naive_mul(&a, &b));
        assert!(matmul(&a, &a, &ctx).is_err());
    }

    #[test]
    fn matmul_overflows_in_fp16() {
        let ctx = PrecisionContext::new(Format::Fp16);
        let xmax = Format::Fp16.params().x_max;
        let a = DenseMatrix::from_rows(&[[1.0, 1.0]]);
        let b = DenseMatrix::column_vector(&[xmax, xmax]);
        assert_eq!(matmul(&a, &b, &ctx).unwrap()[(0, 0)], f64::INFINITY);
    }

    #[test]
    fn matmul_with_identity_rounds() {
        for f in Format::ALL {
            let ctx = PrecisionContext::new(f);
            let a = random(4, 5, 11);
            let c = matmul(&a, &DenseMatrix::identity(5), &ctx).unwrap();
            let r = ctx.round_matrix(&a);
            for (x, y) in c.as_slice().iter().zip(r.as_slice()) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
    }

    #[test]
    fn norms() {
        assert_eq!(norm_fro(&DenseMatrix::<f64>::identity(3)), 3f64.sqrt());
        let a = DenseMatrix::from_rows(&[[1.0, -2.0], [3.0, 4.0]]);
        assert_eq!(norm_inf(&a), 7.0);
        let r = random(6, 7, 5);
        let direct = r.as_slice().iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!((norm_fro(&r) - direct).abs() <= 1e-15 * direct);
        let m = DenseMatrix::from_rows(&[[-1.0, 0.5], [0.0, -0.5]]);
        assert_eq!(norm_inf_plus_identity(&m), 0.5);
    }

    #[test]
    fn matmul_nt_matches_transpose() {
        let ctx = PrecisionContext::new(Format::Fp32);
        let a = random(3, 4, 8);
        let b = random(5, 4, 9);
        assert_eq!(
            matmul_nt(&a, &b, &ctx).unwrap(),
            matmul(&a, &b.transpose(), &ctx).unwrap()
        );
    }

    #[test]
    fn norm2_survives_fp16_range() {
        let ctx = PrecisionContext::new(Format::Fp16);
        let v = [300.0, 400.0];
        assert_eq!(ctx.norm2(&v), 500.0);
    }
}
