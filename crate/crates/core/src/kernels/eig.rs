use super::PrecisionContext;
use crate::error::{Error, Result};
use crate::matrix::DenseMatrix;
use crate::scalar::Real;

const MAX_SWEEPS: usize = 30;

fn off_norm<T: Real>(a: &DenseMatrix<T>) -> f64 {
    let n = a.rows();
    let mut s = 0.0;
    for i in 0..n {
        for j in 0..n {
            if i != j {
                s += a[(i, j)].f64().powi(2);
            }
        }
    }
    s.sqrt()
}

/// Symmetric eigendecomposition `A = Q diag(lambda) Q^T` by cyclic Jacobi.
///
/// The input is symmetrized as `(A + A^T) / 2` first. Sweeps stop once the
/// off-diagonal Frobenius mass is at most `n u ||A||_F` or after 30 sweeps.
/// Eigenvalues come back in descending order with matching columns of `Q`.
pub fn sym_eig<T: Real>(
    a: &DenseMatrix<T>,
    ctx: &PrecisionContext,
) -> Result<(DenseMatrix<T>, Vec<T>)> {
    if !a.is_square() {
        return Err(Error::NotSquare {
            op: "sym_eig",
            rows: a.rows(),
            cols: a.cols(),
        });
    }
    let n = a.rows();
    let half = T::of(0.5);
    let mut s = DenseMatrix::from_fn(n, n, |i, j| {
        if i == j {
            ctx.round(a[(i, i)])
        } else {
            ctx.mul(half, ctx.add(a[(i, j)], a[(j, i)]))
        }
    });
    let mut v = DenseMatrix::<T>::identity(n);
    let tol = n as f64 * ctx.u() * super::norm_fro(&s);

    for _ in 0..MAX_SWEEPS {
        if off_norm(&s) <= tol {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = s[(p, q)];
                if apq.is_zero() {
                    continue;
                }
                let (c, sn, t) = rotation(s[(p, p)], s[(q, q)], apq, ctx);
                s[(p, p)] = ctx.sub(s[(p, p)], ctx.mul(t, apq));
                s[(q, q)] = ctx.add(s[(q, q)], ctx.mul(t, apq));
                s[(p, q)] = T::zero();
                s[(q, p)] = T::zero();
                for r in 0..n {
                    if r != p && r != q {
                        let arp = s[(r, p)];
                        let arq = s[(r, q)];
                        let np = ctx.sub(ctx.mul(c, arp), ctx.mul(sn, arq));
                        let nq = ctx.add(ctx.mul(sn, arp), ctx.mul(c, arq));
                        s[(r, p)] = np;
                        s[(p, r)] = np;
                        s[(r, q)] = nq;
                        s[(q, r)] = nq;
                    }
                }
                for r in 0..n {
                    let vrp = v[(r, p)];
                    let vrq = v[(r, q)];
                    v[(r, p)] = ctx.sub(ctx.mul(c, vrp), ctx.mul(sn, vrq));
                    v[(r, q)] = ctx.add(ctx.mul(sn, vrp), ctx.mul(c, vrq));
                }
            }
        }
    }

    let mut order: Vec<usize> = (0..n).collect();
    // stable sort keeps lowest index first among equal eigenvalues
    order.sort_by(|&i, &j| s[(j, j)].partial_cmp(&s[(i, i)]).unwrap_or(std::cmp::Ordering::Equal));
    let lambda = order.iter().map(|&i| s[(i, i)]).collect();
    Ok((v.select_columns(&order), lambda))
}

/// Symmetric Schur rotation zeroing `a_pq`: returns `(c, s, t)`.
fn rotation<T: Real>(app: T, aqq: T, apq: T, ctx: &PrecisionContext) -> (T, T, T) {
    let two = T::of(2.0);
    let theta = ctx.div(ctx.sub(aqq, app), ctx.mul(two, apq));
    let theta2 = ctx.mul(theta, theta);
    let t = if theta2.is_finite() {
        let denom = ctx.add(theta.abs(), ctx.sqrt(ctx.add(theta2, T::one())));
        let t = ctx.div(T::one(), denom);
        if theta < T::zero() { -t } else { t }
    } else {
        ctx.div(T::of(0.5), theta)
    };
    let c = ctx.div(T::one(), ctx.sqrt(ctx.add(ctx.mul(t, t), T::one())));
    let s = ctx.mul(t, c);
    (c, s, t)
}
