//! Sign-function Newton iteration for factored Lyapunov solutions.
//!
//! For Hurwitz `A`, the iteration `A_k = (mu A_{k-1} + mu^-1 A_{k-1}^-1) / 2`
//! converges to `sign(A) = -I`. The constant term rides along in factored
//! form, either as a Cholesky-type factor `Z_k` (`X = Z Z^T / 2`) or as an
//! `LDL^T`-type pair `(Z_k, Y_k)` (`X = Z Y Z^T / 2`). Columns double every
//! step, so factors are rank-truncated once they exceed `rho * n` columns.
//!
//! The A-side sequence does not depend on the right-hand side, which is what
//! lets one run drive several factors at once and lets [`InverseCache`]
//! reuse inverses across calls with the same `A`.

use crate::error::{Error, Result};
use crate::kernels::{
    invert, kernel_noise_floor, matmul, norm_fro, norm_inf_plus_identity, rrqr_truncate, sym_eig, thin_qr,
    PrecisionContext,
};
use crate::matrix::DenseMatrix;
use crate::precision::Format;
use crate::scalar::Real;

/// Once the relative iterate change drops below this, scaling is switched off
/// for the rest of the run and the roundoff indicator is armed.
const SCALING_FREEZE: f64 = 1e-2;
/// Iterations performed after a stopping trigger fires.
const EXTRA_ITERATIONS: usize = 2;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NewtonParams {
    /// Precision the iteration runs in.
    pub ctx: PrecisionContext,
    pub k_max: usize,
    /// Truncate once a factor has more than `rho * n` columns.
    pub rho: f64,
    /// Frobenius-norm scaling of the early iterates.
    pub scaling: bool,
}

impl NewtonParams {
    pub fn new(fmt: Format) -> Self {
        Self {
            ctx: PrecisionContext::new(fmt),
            k_max: 50,
            rho: 0.1,
            scaling: true,
        }
    }

    /// `tau_N = 10 sqrt(n u)`.
    pub fn tolerance(&self, n: usize) -> f64 {
        10.0 * (n as f64 * self.ctx.u()).sqrt()
    }

    fn validate(&self) -> Result<()> {
        if self.k_max == 0 {
            return Err(Error::InvalidConfig("k_max must be at least 1".into()));
        }
        if !(self.rho > 0.0 && self.rho <= 1.0) {
            return Err(Error::InvalidConfig(format!(
                "rho must lie in (0, 1], got {}",
                self.rho
            )));
        }
        Ok(())
    }
}

/// Why the countdown to termination started.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StopTrigger {
    /// `||A_k + I||_inf <= tau_N`.
    Tolerance,
    /// Relative change failed to halve after scaling was frozen.
    Roundoff,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct NewtonStats {
    /// Newton steps performed.
    pub iterations: usize,
    /// The tolerance `tau_N` was met at some step.
    pub converged: bool,
    pub tau: f64,
    /// First step with `||A_k + I||_inf <= tau_N`.
    pub tolerance_met_at: Option<usize>,
    /// Step at which the two-step countdown started, and why.
    pub countdown_from: Option<(usize, StopTrigger)>,
    /// First step at which scaling was switched off.
    pub scaling_frozen_at: Option<usize>,
    /// `mu_{k-1}` used in step k.
    pub mu: Vec<f64>,
    /// `delta_k = ||A_k - A_{k-1}||_F / ||A_k||_F`.
    pub delta: Vec<f64>,
    /// `||A_k + I||_inf` per step.
    pub sign_residual: Vec<f64>,
    /// Inverses computed in this call.
    pub inverses_computed: usize,
    /// Inverses taken from a cache.
    pub inverses_reused: usize,
    pub truncations: usize,
}

impl NewtonStats {
    pub fn final_sign_residual(&self) -> f64 {
        self.sign_residual.last().copied().unwrap_or(f64::NAN)
    }
}

/// `X = Z Z^T`.
#[derive(Clone, Debug, PartialEq)]
pub struct CholFactor<T> {
    pub z: DenseMatrix<T>,
}

impl<T: Real> CholFactor<T> {
    pub fn empty(n: usize) -> Self {
        Self {
            z: DenseMatrix::zeros(n, 0),
        }
    }

    pub fn rank(&self) -> usize {
        self.z.cols()
    }

    /// Forms `Z Z^T` in `f64`. Only for diagnostics on small problems.
    pub fn to_dense(&self) -> DenseMatrix<f64> {
        let z = self.z.cast::<f64>();
        let ctx = PrecisionContext::new(Format::Fp64);
        crate::kernels::matmul_nt(&z, &z, &ctx).expect("shapes agree")
    }
}

/// `X = Z Y Z^T`; `Y` is diagonal once any truncation has happened.
#[derive(Clone, Debug, PartialEq)]
pub struct LdltFactor<T> {
    pub z: DenseMatrix<T>,
    pub y: DenseMatrix<T>,
}

impl<T: Real> LdltFactor<T> {
    pub fn empty(n: usize) -> Self {
        Self {
            z: DenseMatrix::zeros(n, 0),
            y: DenseMatrix::zeros(0, 0),
        }
    }

    pub fn rank(&self) -> usize {
        self.z.cols()
    }

    /// Forms `Z Y Z^T` in `f64`. Only for diagnostics on small problems.
    pub fn to_dense(&self) -> DenseMatrix<f64> {
        let z = self.z.cast::<f64>();
        let ctx = PrecisionContext::new(Format::Fp64);
        let zy = matmul(&z, &self.y.cast(), &ctx).expect("shapes agree");
        crate::kernels::matmul_nt(&zy, &z, &ctx).expect("shapes agree")
    }
}

/// One stored Newton step: the inverse of `A_{k-1}`, the scaling used with it
/// and the resulting `A_k`.
#[derive(Clone, Debug, PartialEq)]
pub struct CachedStep<T> {
    pub a_inv: DenseMatrix<T>,
    pub mu: T,
    pub a_next: DenseMatrix<T>,
}

/// Append-only record of the A-side of the iteration for one coefficient
/// matrix, format and scaling choice.
///
/// Entry `j` can only be reached after entries `0..j` have been replayed, so
/// every call sees the identical prefix.
#[derive(Clone, Debug)]
pub struct InverseCache<T> {
    a0: DenseMatrix<T>,
    fmt: Format,
    scaling: bool,
    steps: Vec<CachedStep<T>>,
}

impl<T: Real> InverseCache<T> {
    pub fn new(a: &DenseMatrix<T>, fmt: Format, scaling: bool) -> Self {
        Self {
            a0: a.clone(),
            fmt,
            scaling,
            steps: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn steps(&self) -> &[CachedStep<T>] {
        &self.steps
    }

    fn matches(&self, a: &DenseMatrix<T>, params: &NewtonParams) -> bool {
        self.fmt == params.ctx.format() && self.scaling == params.scaling && &self.a0 == a
    }
}

/// Frobenius-norm scaling `(||A^-1||_F / ||A||_F)^(1/2)` in `f64`.
///
/// `None` when either norm is zero or not finite; callers then use `mu = 1`.
pub fn frobenius_scale<T: Real>(a: &DenseMatrix<T>, a_inv: &DenseMatrix<T>) -> Option<f64> {
    let na = norm_fro(a);
    let ni = norm_fro(a_inv);
    if na > 0.0 && ni > 0.0 && na.is_finite() && ni.is_finite() {
        Some((ni / na).sqrt())
    } else {
        None
    }
}

/// Cholesky-type truncation: pivoted QR of `Z^T` with relative threshold
/// `sqrt(u)`.
pub fn rank_trunc_chol<T: Real>(z: &DenseMatrix<T>, ctx: &PrecisionContext) -> Result<DenseMatrix<T>> {
    rrqr_truncate(z, ctx.u().sqrt(), ctx)
}

/// `LDL^T`-type truncation: `Z = Q R`, `R Y R^T = V Lambda V^T`, keep
/// eigenpairs with `|lambda| > u max|lambda|`, return `(Q V, Lambda)`.
/// When `Y` is indefinite, eigenvalues below `2 u ||R |Y|^(1/2)||_2^2` are
/// cancellation noise and dropped too.
///
/// Negative eigenvalues are kept; the correction equations inside refinement
/// have indefinite right-hand sides. If nothing survives, the factor has zero
/// columns.
pub fn rank_trunc_ldlt<T: Real>(
    z: &DenseMatrix<T>,
    y: &DenseMatrix<T>,
    ctx: &PrecisionContext,
) -> Result<(DenseMatrix<T>, DenseMatrix<T>)> {
    if z.cols() != y.rows() || !y.is_square() {
        return Err(Error::DimensionMismatch {
            op: "rank_trunc_ldlt",
            left: z.shape(),
            right: y.shape(),
        });
    }
    let n = z.rows();
    if z.cols() == 0 {
        return Ok((DenseMatrix::zeros(n, 0), DenseMatrix::zeros(0, 0)));
    }
    let (q, r) = thin_qr(z, ctx)?;
    let ry = matmul(&r, y, ctx)?;
    let kernel = crate::kernels::matmul_nt(&ry, &r, ctx)?;
    let (v, lam) = sym_eig(&kernel, ctx)?;
    let largest = lam.iter().fold(0.0f64, |m, l| m.max(l.f64().abs()));
    // cancellation between signed blocks leaves eigenvalues at roundoff level
    // of the operands, which a purely relative test would keep
    let floor = kernel_noise_floor(&r, &[y], ctx);
    let cut = (ctx.u() * largest).max(floor);
    let keep: Vec<usize> = (0..lam.len())
        .filter(|&i| lam[i].f64().abs() > cut)
        .collect();
    if keep.is_empty() {
        return Ok((DenseMatrix::zeros(n, 0), DenseMatrix::zeros(0, 0)));
    }
    let zt = matmul(&q, &v.select_columns(&keep), ctx)?;
    let d: Vec<T> = keep.iter().map(|&i| lam[i]).collect();
    Ok((zt, DenseMatrix::from_diag(&d)))
}

/// Drives the A-side of the iteration and the stopping logic, handing each
/// step's `(A_{k-1}^-1, mu_{k-1})` to `update` for the factor side.
fn run_sign_iteration<T, F>(
    a: &DenseMatrix<T>,
    params: &NewtonParams,
    mut cache: Option<&mut InverseCache<T>>,
    mut update: F,
) -> Result<NewtonStats>
where
    T: Real,
    F: FnMut(usize, &DenseMatrix<T>, T) -> Result<()>,
{
    params.validate()?;
    if !a.is_square() {
        return Err(Error::NotSquare {
            op: "sign iteration",
            rows: a.rows(),
            cols: a.cols(),
        });
    }
    if let Some(c) = cache.as_deref() {
        if !c.matches(a, params) {
            return Err(Error::InvalidConfig(
                "inverse cache was built for a different matrix, format or scaling".into(),
            ));
        }
    }
    let ctx = &params.ctx;
    let n = a.rows();
    let fmt = ctx.format();
    let mut stats = NewtonStats {
        tau: params.tolerance(n),
        ..NewtonStats::default()
    };
    let half = T::of(0.5);
    let mut frozen = !params.scaling;
    let mut armed = false;
    let mut countdown: Option<usize> = None;
    let mut current = ctx.round_matrix(a);

    for k in 1..=params.k_max {
        let cached = cache
            .as_deref()
            .and_then(|c| c.steps.get(k - 1))
            .cloned();
        let step = match cached {
            Some(s) => {
                stats.inverses_reused += 1;
                s
            }
            None => {
                let a_inv = invert(&current, ctx).map_err(|_| Error::Diverged { step: k, format: fmt })?;
                stats.inverses_computed += 1;
                let mu = if frozen {
                    T::one()
                } else {
                    frobenius_scale(&current, &a_inv)
                        .map(|m| ctx.constant::<T>(m))
                        .filter(|m| m.is_finite() && *m > T::zero())
                        .unwrap_or_else(T::one)
                };
                let mu_inv = ctx.div(T::one(), mu);
                let sum = ctx.axpby(mu, &current, mu_inv, &a_inv)?;
                let a_next = ctx.scale(&sum, half);
                if !a_next.is_finite() {
                    return Err(Error::Diverged { step: k, format: fmt });
                }
                let s = CachedStep { a_inv, mu, a_next };
                if let Some(c) = cache.as_deref_mut() {
                    c.steps.push(s.clone());
                }
                s
            }
        };
        stats.mu.push(step.mu.f64());

        update(k, &step.a_inv, step.mu)?;

        let diff = ctx.axpby(T::one(), &step.a_next, -T::one(), &current)?;
        let delta = norm_fro(&diff) / norm_fro(&step.a_next);
        let sres = norm_inf_plus_identity(&step.a_next);
        let prev_delta = stats.delta.last().copied();
        stats.delta.push(delta);
        stats.sign_residual.push(sres);
        current = step.a_next;
        stats.iterations = k;

        if sres <= stats.tau && stats.tolerance_met_at.is_none() {
            stats.tolerance_met_at = Some(k);
            stats.converged = true;
        }
        match countdown.as_mut() {
            Some(c) => {
                *c -= 1;
                if *c == 0 {
                    break;
                }
            }
            None => {
                if sres <= stats.tau {
                    countdown = Some(EXTRA_ITERATIONS);
                    stats.countdown_from = Some((k, StopTrigger::Tolerance));
                } else if armed && prev_delta.is_some_and(|p| delta > p / 2.0) {
                    countdown = Some(EXTRA_ITERATIONS);
                    stats.countdown_from = Some((k, StopTrigger::Roundoff));
                }
            }
        }
        if delta < SCALING_FREEZE {
            if !frozen {
                stats.scaling_frozen_at = Some(k);
            }
            frozen = true;
            armed = true;
        }
    }
    Ok(stats)
}

fn chol_step<T: Real>(
    z: &DenseMatrix<T>,
    a_inv: &DenseMatrix<T>,
    mu: T,
    params: &NewtonParams,
    truncations: &mut usize,
) -> Result<DenseMatrix<T>> {
    let ctx = &params.ctx;
    let n = z.rows();
    let half = T::of(0.5);
    let c1 = ctx.sqrt(ctx.mul(half, mu));
    let c2 = ctx.sqrt(ctx.div(half, mu));
    let az = matmul(a_inv, z, ctx)?;
    let mut next = DenseMatrix::hcat(&[&ctx.scale(z, c1), &ctx.scale(&az, c2)])?;
    if next.cols() as f64 > params.rho * n as f64 {
        next = rank_trunc_chol(&next, ctx)?;
        *truncations += 1;
    }
    Ok(next)
}

/// Solves `A X + X A^T + L_j L_j^T = 0` for several right-hand sides with one
/// shared A-side iteration; each factor is truncated independently.
///
/// Zero or empty right-hand sides yield `n x 0` factors. Returned factors are
/// `Z_k / sqrt(2)` rounded to `out`.
pub fn solve_chol_multi<T: Real>(
    a: &DenseMatrix<T>,
    rhs: &[&DenseMatrix<T>],
    params: &NewtonParams,
    out: Format,
    cache: Option<&mut InverseCache<T>>,
) -> Result<(Vec<CholFactor<T>>, NewtonStats)> {
    let n = a.rows();
    for l in rhs {
        if l.rows() != n {
            return Err(Error::DimensionMismatch {
                op: "solve_chol",
                left: a.shape(),
                right: l.shape(),
            });
        }
    }
    let ctx = params.ctx;
    let mut zs: Vec<DenseMatrix<T>> = rhs
        .iter()
        .map(|l| {
            if l.is_zero() {
                DenseMatrix::zeros(n, 0)
            } else {
                ctx.round_matrix(l)
            }
        })
        .collect();
    if zs.iter().all(|z| z.cols() == 0) {
        let stats = NewtonStats {
            converged: true,
            tau: params.tolerance(n),
            ..NewtonStats::default()
        };
        return Ok((zs.into_iter().map(|z| CholFactor { z }).collect(), stats));
    }

    let mut truncations = 0;
    let fmt = ctx.format();
    let mut stats = run_sign_iteration(a, params, cache, |k, a_inv, mu| {
        for z in zs.iter_mut().filter(|z| z.cols() > 0) {
            let next = chol_step(z, a_inv, mu, params, &mut truncations)?;
            if !next.is_finite() {
                return Err(Error::Diverged { step: k, format: fmt });
            }
            *z = next;
        }
        Ok(())
    })?;
    stats.truncations = truncations;

    let out = crate::precision::PrecisionFormat::new(out);
    let inv_sqrt2 = T::of(std::f64::consts::FRAC_1_SQRT_2);
    let factors = zs
        .into_iter()
        .map(|z| CholFactor {
            z: z.map(|x| out.round(x * inv_sqrt2)),
        })
        .collect();
    Ok((factors, stats))
}

/// Cholesky-type solve of `A X + X A^T + L L^T = 0`, `X ~ Z Z^T`.
pub fn solve_chol<T: Real>(
    a: &DenseMatrix<T>,
    l: &DenseMatrix<T>,
    params: &NewtonParams,
    out: Format,
    cache: Option<&mut InverseCache<T>>,
) -> Result<(CholFactor<T>, NewtonStats)> {
    let (mut f, stats) = solve_chol_multi(a, &[l], params, out, cache)?;
    Ok((f.pop().expect("one factor per right-hand side"), stats))
}

/// Inner factor kept as `diag(scales) (x) base` so doubling never forms the
/// block diagonal explicitly.
struct KronInner<T> {
    scales: Vec<T>,
    base: DenseMatrix<T>,
}

impl<T: Real> KronInner<T> {
    fn explicit(&self) -> DenseMatrix<T> {
        let b = self.base.rows();
        let mut y = DenseMatrix::zeros(self.scales.len() * b, self.scales.len() * b);
        for (blk, &s) in self.scales.iter().enumerate() {
            for i in 0..b {
                for j in 0..b {
                    y[(blk * b + i, blk * b + j)] = s * self.base[(i, j)];
                }
            }
        }
        y
    }
}

/// `LDL^T`-type solve of `A X + X A^T + L S L^T = 0`, `X ~ Z Y Z^T`.
///
/// `S` may be indefinite. Returns `(Z_k, Y_k / 2)` rounded to `out`.
pub fn solve_ldlt<T: Real>(
    a: &DenseMatrix<T>,
    l: &DenseMatrix<T>,
    s: &DenseMatrix<T>,
    params: &NewtonParams,
    out: Format,
    cache: Option<&mut InverseCache<T>>,
) -> Result<(LdltFactor<T>, NewtonStats)> {
    let n = a.rows();
    if l.rows() != n || s.rows() != l.cols() || !s.is_square() {
        return Err(Error::DimensionMismatch {
            op: "solve_ldlt",
            left: l.shape(),
            right: s.shape(),
        });
    }
    let ctx = params.ctx;
    if l.is_zero() || s.is_zero() {
        let stats = NewtonStats {
            converged: true,
            tau: params.tolerance(n),
            ..NewtonStats::default()
        };
        return Ok((LdltFactor::empty(n), stats));
    }

    let mut z = ctx.round_matrix(l);
    let mut inner = KronInner {
        scales: vec![T::one()],
        base: ctx.round_matrix(s),
    };
    let mut truncations = 0;
    let half = T::of(0.5);
    let fmt = ctx.format();
    let mut stats = run_sign_iteration(a, params, cache, |k, a_inv, mu| {
        if z.cols() == 0 {
            return Ok(());
        }
        let az = matmul(a_inv, &z, &ctx)?;
        let next_z = DenseMatrix::hcat(&[&z, &az])?;
        let up = ctx.mul(half, mu);
        let down = ctx.div(half, mu);
        let mut scales: Vec<T> = inner.scales.iter().map(|&s| ctx.mul(up, s)).collect();
        scales.extend(inner.scales.iter().map(|&s| ctx.mul(down, s)));
        inner.scales = scales;
        z = next_z;
        if z.cols() as f64 > params.rho * n as f64 {
            let (zt, yt) = rank_trunc_ldlt(&z, &inner.explicit(), &ctx)?;
            z = zt;
            inner = KronInner {
                scales: yt.diag(),
                base: DenseMatrix::identity(1),
            };
            truncations += 1;
        }
        if !z.is_finite() || inner.scales.iter().any(|v| !v.is_finite()) {
            return Err(Error::Diverged { step: k, format: fmt });
        }
        Ok(())
    })?;
    stats.truncations = truncations;

    let out = crate::precision::PrecisionFormat::new(out);
    let y = inner.explicit().map(|v| out.round(v * half));
    Ok((
        LdltFactor {
            z: z.map(|v| out.round(v)),
            y,
        },
        stats,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernels::testutil::{naive_mul, random, sub};

    fn fp64() -> NewtonParams {
        NewtonParams::new(Format::Fp64)
    }

    fn stable(n: usize, seed: u64) -> DenseMatrix<f64> {
        let r = random(n, n, seed);
        let k = random(n, n, seed + 1000);
        DenseMatrix::from_fn(n, n, |i, j| {
            let mut v = 0.0;
            for t in 0..n {
                v -= r[(i, t)] * r[(j, t)] / n as f64;
            }
            v + 0.5 * (k[(i, j)] - k[(j, i)]) - if i == j { 0.5 } else { 0.0 }
        })
    }

    fn lyap_residual(a: &DenseMatrix<f64>, x: &DenseMatrix<f64>, w: &DenseMatrix<f64>) -> f64 {
        let ax = naive_mul(a, x);
        let r = DenseMatrix::from_fn(a.rows(), a.rows(), |i, j| ax[(i, j)] + ax[(j, i)] + w[(i, j)]);
        norm_fro(&r)
    }

    #[test]
    fn frobenius_scale_examples() {
        let i = DenseMatrix::<f64>::identity(3);
        assert_eq!(frobenius_scale(&i, &i), Some(1.0));
        let two = i.scale_exact(2.0);
        let half = i.scale_exact(0.5);
        assert!((frobenius_scale(&two, &half).unwrap() - 0.5).abs() < 1e-15);
        let d = DenseMatrix::from_diag(&[1.0, 100.0]);
        let di = DenseMatrix::from_diag(&[1.0, 0.01]);
        let expect = (1.0001f64.sqrt() / 10001f64.sqrt()).sqrt();
        assert!((frobenius_scale(&d, &di).unwrap() - expect).abs() < 1e-15);
        assert!((expect - 0.1).abs() < 1e-3);
        assert_eq!(frobenius_scale(&DenseMatrix::<f64>::zeros(2, 2), &i.row_block(0, 2)), None);
    }

    #[test]
    fn chol_minus_identity() {
        let a = DenseMatrix::from_diag(&[-1.0, -1.0]);
        let l = DenseMatrix::column_vector(&[1.0, 0.0]);
        let (f, stats) = solve_chol(&a, &l, &fp64(), Format::Fp64, None).unwrap();
        let x = f.to_dense();
        assert!((x[(0, 0)] - 0.5).abs() < 1e-15);
        assert!(x[(1, 1)].abs() < 1e-15 && x[(0, 1)].abs() < 1e-15);
        assert!(stats.converged);
    }

    #[test]
    fn chol_scalar_closed_form() {
        for (a, l) in [(2.0, 3.0), (0.5, 1.0), (10.0, 0.1)] {
            let (f, _) = solve_chol(
                &DenseMatrix::from_rows(&[[-a]]),
                &DenseMatrix::from_rows(&[[l]]),
                &fp64(),
                Format::Fp64,
                None,
            )
            .unwrap();
            let x = f.to_dense()[(0, 0)];
            let exact = l * l / (2.0 * a);
            assert!((x - exact).abs() <= 1e-14 * exact, "{a} {l}: {x} vs {exact}");
        }
    }

    #[test]
    fn chol_random_stable_residual() {
        let n = 8;
        let a = stable(n, 3);
        let l = random(n, 2, 4);
        let (f, stats) = solve_chol(&a, &l, &fp64(), Format::Fp64, None).unwrap();
        let w = naive_mul(&l, &l.transpose());
        let x = f.to_dense();
        let rel = lyap_residual(&a, &x, &w) / (norm_fro(&w) + 2.0 * norm_fro(&x) * norm_fro(&a));
        assert!(rel < 1e-14, "{rel}");
        assert!(stats.converged);
    }

    #[test]
    fn zero_rhs_short_circuits() {
        let a = stable(4, 1);
        let (f, stats) =
            solve_chol(&a, &DenseMatrix::zeros(4, 2), &fp64(), Format::Fp64, None).unwrap();
        assert_eq!(f.rank(), 0);
        assert_eq!(stats.iterations, 0);
        assert!(stats.converged);
        let (g, stats) = solve_ldlt(
            &a,
            &DenseMatrix::zeros(4, 1),
            &DenseMatrix::identity(1),
            &fp64(),
            Format::Fp64,
            None,
        )
        .unwrap();
        assert_eq!(g.rank(), 0);
        assert_eq!(stats.iterations, 0);
    }

    #[test]
    fn ldlt_examples() {
        let a = DenseMatrix::from_diag(&[-1.0, -1.0]);
        let l = DenseMatrix::column_vector(&[1.0, 0.0]);
        let (f, _) = solve_ldlt(&a, &l, &DenseMatrix::identity(1), &fp64(), Format::Fp64, None)
            .unwrap();
        let x = f.to_dense();
        assert!((x[(0, 0)] - 0.5).abs() < 1e-15 && x[(1, 1)].abs() < 1e-15);

        let (f, _) = solve_ldlt(
            &DenseMatrix::from_rows(&[[-1.0]]),
            &DenseMatrix::from_rows(&[[1.0]]),
            &DenseMatrix::from_rows(&[[-1.0]]),
            &fp64(),
            Format::Fp64,
            None,
        )
        .unwrap();
        assert!((f.to_dense()[(0, 0)] + 0.5).abs() < 1e-15);
    }

    #[test]
    fn ldlt_matches_chol_with_identity_inner() {
        let n = 8;
        let a = stable(n, 7);
        let l = random(n, 2, 8);
        let (c, _) = solve_chol(&a, &l, &fp64(), Format::Fp64, None).unwrap();
        let (d, _) =
            solve_ldlt(&a, &l, &DenseMatrix::identity(2), &fp64(), Format::Fp64, None).unwrap();
        let xc = c.to_dense();
        let rel = norm_fro(&sub(&xc, &d.to_dense())) / norm_fro(&xc);
        assert!(rel < 1e-12, "{rel}");
    }

    #[test]
    fn multi_rhs_matches_separate_solves() {
        let a = stable(10, 2);
        let l1 = random(10, 1, 5);
        let l2 = random(10, 2, 6);
        let (both, _) = solve_chol_multi(&a, &[&l1, &l2], &fp64(), Format::Fp64, None).unwrap();
        let (s1, _) = solve_chol(&a, &l1, &fp64(), Format::Fp64, None).unwrap();
        let (s2, _) = solve_chol(&a, &l2, &fp64(), Format::Fp64, None).unwrap();
        assert_eq!(both[0], s1);
        assert_eq!(both[1], s2);
    }

    #[test]
    fn rank_trunc_ldlt_examples() {
        let ctx = PrecisionContext::new(Format::Fp64);
        let z = DenseMatrix::<f64>::eye(4, 2);
        let y = DenseMatrix::from_diag(&[3.0, 2.0]);
        let (zt, yt) = rank_trunc_ldlt(&z, &y, &ctx).unwrap();
        let before = naive_mul(&naive_mul(&z, &y), &z.transpose());
        let after = naive_mul(&naive_mul(&zt, &yt), &zt.transpose());
        assert!(norm_fro(&sub(&before, &after)) < 1e-15);

        let col = random(5, 1, 9);
        let zz = DenseMatrix::hcat(&[&col, &col]).unwrap();
        let (zt, yt) = rank_trunc_ldlt(&zz, &DenseMatrix::from_diag(&[1.0, -1.0]), &ctx).unwrap();
        assert_eq!(zt.shape(), (5, 0));
        assert_eq!(yt.shape(), (0, 0));
    }

    /// Oracle: the explicitly formed n x n product, compared in f64.
    #[test]
    fn rank_trunc_ldlt_preserves_indefinite_product() {
        let ctx = PrecisionContext::new(Format::Fp64);
        let z = random(30, 10, 12);
        let d: Vec<f64> = (0..10).map(|i| if i % 3 == 0 { -1.0 - i as f64 } else { 1.0 + i as f64 }).collect();
        let y = DenseMatrix::from_diag(&d);
        let (zt, yt) = rank_trunc_ldlt(&z, &y, &ctx).unwrap();
        assert_eq!(zt.cols(), 10);
        assert!(yt.diag().iter().any(|&v| v < 0.0));
        let before = naive_mul(&naive_mul(&z, &y), &z.transpose());
        let after = naive_mul(&naive_mul(&zt, &yt), &zt.transpose());
        assert!(norm_fro(&sub(&before, &after)) <= 1e-12 * norm_fro(&before));
    }

    #[test]
    fn column_bound_on_low_rank_problem() {
        let n = 40;
        let a = DenseMatrix::from_fn(n, n, |i, j| if i == j { -1.0 - 0.01 * i as f64 } else { 0.0 });
        let l = random(n, 1, 3);
        let params = fp64();
        let mut widest = 0;
        let mut z = params.ctx.round_matrix(&l);
        let mut t = 0;
        run_sign_iteration(&a, &params, None, |_, inv, mu| {
            z = chol_step(&z, inv, mu, &params, &mut t)?;
            widest = widest.max(z.cols());
            Ok(())
        })
        .unwrap();
        assert!(widest as f64 <= 2.0 * params.rho * n as f64, "{widest}");
    }

    #[test]
    fn cache_replays_identical_prefix() {
        let n = 12;
        let a = stable(n, 4);
        let params = fp64();
        let mut cache = InverseCache::new(&a, Format::Fp64, true);
        let l1 = random(n, 1, 1);
        let l2 = random(n, 2, 2);
        let (f1, s1) = solve_chol(&a, &l1, &params, Format::Fp64, Some(&mut cache)).unwrap();
        assert_eq!(s1.inverses_computed, s1.iterations);
        let snapshot = cache.steps().to_vec();
        let (f2, s2) = solve_chol(&a, &l2, &params, Format::Fp64, Some(&mut cache)).unwrap();
        assert_eq!(s2.inverses_computed, 0);
        assert_eq!(s2.inverses_reused, s2.iterations);
        assert_eq!(cache.steps(), &snapshot[..]);
        let (g1, _) = solve_chol(&a, &l1, &params, Format::Fp64, None).unwrap();
        let (g2, _) = solve_chol(&a, &l2, &params, Format::Fp64, None).unwrap();
        assert_eq!(f1, g1);
        assert_eq!(f2, g2);

        let other = stable(n, 5);
        assert!(solve_chol(&other, &l1, &params, Format::Fp64, Some(&mut cache)).is_err());
    }

    #[test]
    fn stopping_countdown_is_two() {
        let a = stable(20, 9);
        let l = random(20, 1, 10);
        let (_, stats) = solve_chol(&a, &l, &fp64(), Format::Fp64, None).unwrap();
        let met = stats.tolerance_met_at.unwrap();
        assert_eq!(stats.iterations, met + 2);
        assert!(stats.final_sign_residual() <= stats.tau);
        assert_eq!(stats.countdown_from, Some((met, StopTrigger::Tolerance)));
    }

    #[test]
    fn unconverged_when_k_max_too_small() {
        let a = stable(10, 9);
        let l = random(10, 1, 10);
        let mut p = fp64();
        p.k_max = 1;
        let (f, stats) = solve_chol(&a, &l, &p, Format::Fp64, None).unwrap();
        assert!(!stats.converged);
        assert_eq!(stats.iterations, 1);
        assert!(f.z.is_finite());
    }

    #[test]
    fn monotone_window_fp64() {
        for seed in 0..5 {
            let a = stable(15, 50 + seed);
            let l = random(15, 1, seed);
            let (_, stats) = solve_chol(&a, &l, &fp64(), Format::Fp64, None).unwrap();
            let r = &stats.sign_residual;
            let start = r.iter().position(|&v| v < 0.5).unwrap();
            for k in start + 1..r.len() {
                if r[k - 1] < 1e-13 {
                    break;
                }
                assert!(r[k] < r[k - 1], "seed {seed} step {k}: {r:?}");
            }
        }
    }

    #[test]
    fn singular_a_reports_divergence() {
        let a = DenseMatrix::from_rows(&[[1.0, 1.0], [1.0, 1.0]]);
        let l = DenseMatrix::column_vector(&[1.0, 0.0]);
        let err = solve_chol(&a, &l, &fp64(), Format::Fp64, None).unwrap_err();
        assert!(matches!(err, Error::Diverged { step: 1, .. }));
    }

    #[test]
    fn f32_storage_runs() {
        let a = stable(6, 3).cast::<f32>();
        let l = random(6, 1, 4).cast::<f32>();
        let (f, stats) = solve_chol(&a, &l, &NewtonParams::new(Format::Fp32), Format::Fp32, None).unwrap();
        assert!(stats.converged);
        assert!(f.z.is_finite());
    }
}
