use super::PrecisionContext;
use crate::error::Result;
use crate::matrix::DenseMatrix;
use crate::scalar::Real;

/// Elementary reflector `H = I - tau v v^T` with `v[0] = 1`.
struct Reflector<T> {
    v: Vec<T>,
    tau: T,
}

/// Generates the reflector annihilating `w[j+1.., j]` and applies it to the
/// trailing columns of `w`. Mirrors LAPACK's `larfg` + `larf`.
fn reflect_column<T: Real>(w: &mut DenseMatrix<T>, j: usize, ctx: &PrecisionContext) -> Reflector<T> {
    let m = w.rows();
    let alpha = w[(j, j)];
    let tail: Vec<T> = (j + 1..m).map(|i| w[(i, j)]).collect();
    let xnorm = ctx.norm2(&tail);
    let mut v = vec![T::one(); m - j];
    if xnorm.is_zero() {
        return Reflector { v, tau: T::zero() };
    }
    let mag = ctx.norm2(&[alpha, xnorm]);
    let beta = if alpha >= T::zero() { -mag } else { mag };
    let tau = ctx.div(ctx.sub(beta, alpha), beta);
    let scal = ctx.div(T::one(), ctx.sub(alpha, beta));
    for (vi, &xi) in v[1..].iter_mut().zip(&tail) {
        *vi = ctx.mul(xi, scal);
    }
    w[(j, j)] = beta;
    for i in j + 1..m {
        w[(i, j)] = T::zero();
    }
    let refl = Reflector { v, tau };
    apply_reflector(w, j, j + 1, &refl, ctx);
    refl
}

/// Applies `H` acting on rows `j..` to columns `col0..` of `w`.
fn apply_reflector<T: Real>(
    w: &mut DenseMatrix<T>,
    j: usize,
    col0: usize,
    h: &Reflector<T>,
    ctx: &PrecisionContext,
) {
    if h.tau.is_zero() {
        return;
    }
    let m = w.rows();
    for c in col0..w.cols() {
        let mut s = T::zero();
        for i in j..m {
            s = ctx.add(s, ctx.mul(h.v[i - j], w[(i, c)]));
        }
        let s = ctx.mul(h.tau, s);
        if s.is_zero() {
            continue;
        }
        for i in j..m {
            w[(i, c)] = ctx.sub(w[(i, c)], ctx.mul(s, h.v[i - j]));
        }
    }
}

/// Economy Householder QR, `A = Q R`.
///
/// `Q` is `rows x k` with orthonormal columns and `R` is `k x cols` upper
/// trapezoidal, `k = min(rows, cols)`. Diagonal entries of `R` are made
/// nonnegative by flipping signs of matching `Q` columns and `R` rows.
pub fn thin_qr<T: Real>(
    a: &DenseMatrix<T>,
    ctx: &PrecisionContext,
) -> Result<(DenseMatrix<T>, DenseMatrix<T>)> {
    let (m, n) = a.shape();
    let k = m.min(n);
    let mut w = ctx.round_matrix(a);
    let reflectors: Vec<Reflector<T>> = (0..k).map(|j| reflect_column(&mut w, j, ctx)).collect();

    let mut q = DenseMatrix::eye(m, k);
    for (j, h) in reflectors.iter().enumerate().rev() {
        apply_reflector(&mut q, j, j, h, ctx);
    }
    let mut r = w.row_block(0, k);
    for i in 0..k {
        if r[(i, i)] < T::zero() {
            for c in 0..n {
                r[(i, c)] = -r[(i, c)];
            }
            for row in 0..m {
                q[(row, i)] = -q[(row, i)];
            }
        }
    }
    Ok((q, r))
}

/// Rank truncation of a tall factor `Z` (n x c) that preserves `Z Z^T`.
///
/// Runs column-pivoted Householder QR on `Z^T`, `Z^T Pi = Q [T C; 0 S]`, and
/// stops at the first `k` whose trailing block satisfies
/// `||S||_F <= tol_rel * |r_11|`; `|r_11|` stands in for `||Z||_2`.
/// Returns `Pi [T C]^T`, an `n x k` factor. An all-zero input gives one zero
/// column.
pub fn rrqr_truncate<T: Real>(
    a: &DenseMatrix<T>,
    tol_rel: f64,
    ctx: &PrecisionContext,
) -> Result<DenseMatrix<T>> {
    let (n, c) = a.shape();
    let mut w = ctx.round_matrix(&a.transpose());
    let mut perm: Vec<usize> = (0..n).collect();
    let steps = n.min(c);
    let mut r11 = 0.0f64;
    let mut k = steps;

    for j in 0..steps {
        let norms: Vec<f64> = (j..n)
            .map(|p| (j..c).map(|i| w[(i, p)].f64().powi(2)).sum::<f64>())
            .collect();
        let trailing = norms.iter().sum::<f64>().sqrt();
        if j == 0 && trailing == 0.0 {
            return Ok(DenseMatrix::zeros(n, 1));
        }
        if j > 0 && trailing <= tol_rel * r11 {
            k = j;
            break;
        }
        let mut best = 0;
        for (idx, &v) in norms.iter().enumerate() {
            if v > norms[best] {
                best = idx;
            }
        }
        let p = j + best;
        if p != j {
            perm.swap(p, j);
            for i in 0..c {
                let tmp = w[(i, p)];
                w[(i, p)] = w[(i, j)];
                w[(i, j)] = tmp;
            }
        }
        reflect_column(&mut w, j, ctx);
        if j == 0 {
            r11 = w[(0, 0)].f64().abs();
        }
    }

    let mut z = DenseMatrix::zeros(n, k);
    for (pos, &orig) in perm.iter().enumerate() {
        for i in 0..k {
            z[(orig, i)] = w[(i, pos)];
        }
    }
    Ok(z)
}
