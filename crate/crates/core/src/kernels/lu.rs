use super::PrecisionContext;
use crate::error::{Error, Result};
use crate::matrix::DenseMatrix;
use crate::scalar::Real;

/// Inverse via LU with partial pivoting, solved against the identity.
///
/// Pivots are the largest magnitude in the column, lowest row index on ties.
pub fn invert<T: Real>(a: &DenseMatrix<T>, ctx: &PrecisionContext) -> Result<DenseMatrix<T>> {
    if !a.is_square() {
        return Err(Error::NotSquare {
            op: "invert",
            rows: a.rows(),
            cols: a.cols(),
        });
    }
    let n = a.rows();
    let mut lu = ctx.round_matrix(a);
    let mut perm: Vec<usize> = (0..n).collect();

    for k in 0..n {
        let mut p = k;
        let mut best = lu[(k, k)].abs();
        for i in k + 1..n {
            let v = lu[(i, k)].abs();
            if v > best {
                best = v;
                p = i;
            }
        }
        if best.is_zero() {
            return Err(Error::Singular { column: k });
        }
        if !best.is_finite() {
            return Err(Error::Overflow {
                format: ctx.format(),
            });
        }
        if p != k {
            perm.swap(p, k);
            let s = lu.as_mut_slice();
            for j in 0..n {
                s.swap(p * n + j, k * n + j);
            }
        }
        let pivot = lu[(k, k)];
        for i in k + 1..n {
            let l = ctx.div(lu[(i, k)], pivot);
            lu[(i, k)] = l;
            if l.is_zero() {
                continue;
            }
            for j in k + 1..n {
                lu[(i, j)] = ctx.sub(lu[(i, j)], ctx.mul(l, lu[(k, j)]));
            }
        }
    }
    if !lu.is_finite() {
        return Err(Error::Overflow {
            format: ctx.format(),
        });
    }

    // Column j of the inverse solves L U x = P e_j; rows of P e_j are perm^-1.
    let mut inv = DenseMatrix::zeros(n, n);
    let mut x = vec![T::zero(); n];
    for j in 0..n {
        for (i, xi) in x.iter_mut().enumerate() {
            *xi = if perm[i] == j { T::one() } else { T::zero() };
        }
        for i in 0..n {
            let mut s = x[i];
            for k in 0..i {
                s = ctx.sub(s, ctx.mul(lu[(i, k)], x[k]));
            }
            x[i] = s;
        }
        for i in (0..n).rev() {
            let mut s = x[i];
            for k in i + 1..n {
                s = ctx.sub(s, ctx.mul(lu[(i, k)], x[k]));
            }
            x[i] = ctx.div(s, lu[(i, i)]);
        }
        for i in 0..n {
            inv[(i, j)] = x[i];
        }
    }
    if !inv.is_finite() {
        return Err(Error::Overflow {
            format: ctx.format(),
        });
    }
    Ok(inv)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernels::norm_fro;
    use crate::kernels::testutil::*;
    use crate::precision::Format;

    #[test]
    fn small_examples() {
        let ctx = PrecisionContext::new(Format::Fp64);
        let i3 = DenseMatrix::<f64>::identity(3);
        assert_eq!(invert(&i3, &ctx).unwrap(), i3);
        let d = DenseMatrix::from_diag(&[2.0, 4.0]);
        assert_eq!(
            invert(&d, &ctx).unwrap(),
            DenseMatrix::from_diag(&[0.5, 0.25])
        );
        let s = DenseMatrix::from_rows(&[[1.0, 1.0], [1.0, 1.0]]);
        assert!(matches!(invert(&s, &ctx), Err(Error::Singular { column: 1 })));
        assert!(invert(&DenseMatrix::<f64>::zeros(2, 3), &ctx).is_err());
    }

    #[test]
    fn pivoting_handles_zero_leading_entry() {
        let ctx = PrecisionContext::new(Format::Fp64);
        let a = DenseMatrix::from_rows(&[[0.0, 1.0], [1.0, 0.0]]);
        assert_eq!(invert(&a, &ctx).unwrap(), a);
    }

    #[test]
    fn overflow_is_reported() {
        let ctx = PrecisionContext::new(Format::Fp16);
        let a = DenseMatrix::from_diag(&[1.0e-6, 1.0]);
        // 1e-6 is an fp16 subnormal; its reciprocal exceeds x_max
        assert!(matches!(
            invert(&a, &ctx),
            Err(Error::Overflow { format: Format::Fp16 })
        ));
    }

    /// Random matrix with condition number at most about 10^3: diagonally
    /// shifted so the smallest singular value is bounded away from zero.
    fn well_conditioned(n: usize, seed: u64) -> DenseMatrix<f64> {
        let r = random(n, n, seed);
        DenseMatrix::from_fn(n, n, |i, j| r[(i, j)] + if i == j { n as f64 } else { 0.0 })
    }

    #[test]
    fn residual_bound_all_formats() {
        for f in Format::ALL {
            let ctx = PrecisionContext::new(f);
            for seed in 0..5 {
                let n = 8;
                let a = ctx.round_matrix(&well_conditioned(n, seed));
                let inv = invert(&a, &ctx).unwrap();
                let ai = invert(&a, &PrecisionContext::new(Format::Fp64)).unwrap();
                let kappa = norm_fro(&a) * norm_fro(&ai);
                assert!(kappa < 1e3);
                let resid = norm_fro(&sub(&naive_mul(&a, &inv), &DenseMatrix::identity(n)));
                assert!(
                    resid <= 100.0 * n as f64 * ctx.u() * kappa,
                    "{f}: {resid} kappa {kappa}"
                );
            }
        }
    }
}
