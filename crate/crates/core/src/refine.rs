//! Mixed-precision iterative refinement for low-rank Lyapunov equations.
//!
//! Four precisions take part. The Newton solver runs at `u_s`, the solution
//! is stored at `u`, residuals are factored at `u_r` and the solution update
//! is projected at `u_c`. Neither the residual nor the update ever forms an
//! `n x n` matrix: both go through a thin QR of a tall block and a small
//! symmetric kernel `T M T^T`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels::{
    kernel_noise_floor, matmul, matmul_nt, norm_fro, sym_eig, thin_qr,
    PrecisionContext,
};
use crate::matrix::DenseMatrix;
use crate::newton::{
    solve_chol, solve_chol_multi, solve_ldlt, CholFactor, InverseCache, LdltFactor, NewtonParams,
    NewtonStats,
};
use crate::precision::Format;
use crate::scalar::Real;

/// Consecutive-residual ratio above which a step counts as stagnating.
const STAGNATION_RATIO: f64 = 0.9;
/// Stagnating steps in a row that end the refinement.
const STAGNATION_STEPS: usize = 2;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct IRConfig {
    /// Solver precision.
    pub us: Format,
    /// Working precision; the solution is stored here.
    pub u: Format,
    /// Residual precision.
    pub ur: Format,
    /// Update precision.
    pub uc: Format,
    /// `tau_I = tau_scale * n * u`.
    pub tau_scale: f64,
    pub i_max: usize,
    pub eta_r: f64,
    /// `eta_s = eta_s_scale * u`.
    pub eta_s_scale: f64,
    pub rho: f64,
    pub k_max: usize,
    pub scaling: bool,
    /// Reuse the Newton inverse sequence across all solves of one run.
    pub cache_inverses: bool,
}

impl IRConfig {
    /// Defaults with `u_r = u_c = u`.
    pub fn new(us: Format, u: Format) -> Self {
        Self {
            us,
            u,
            ur: u,
            uc: u,
            tau_scale: 1.0,
            i_max: 50,
            eta_r: 1e-4,
            eta_s_scale: 10.0,
            rho: 0.1,
            k_max: 50,
            scaling: true,
            cache_inverses: false,
        }
    }

    pub fn uniform(fmt: Format) -> Self {
        Self::new(fmt, fmt)
    }

    pub fn tau_i(&self, n: usize) -> f64 {
        self.tau_scale * n as f64 * self.u.unit_roundoff()
    }

    pub fn eta_s(&self) -> f64 {
        self.eta_s_scale * self.u.unit_roundoff()
    }

    pub fn newton_params(&self) -> NewtonParams {
        NewtonParams {
            ctx: PrecisionContext::new(self.us),
            k_max: self.k_max,
            rho: self.rho,
            scaling: self.scaling,
        }
    }

    /// Checks precision ordering and parameter ranges.
    pub fn validate(&self) -> Result<()> {
        let ur = |f: Format| f.unit_roundoff();
        if ur(self.us) < ur(self.u) {
            return Err(Error::InvalidConfig(format!(
                "solver precision {} is finer than working precision {}",
                self.us, self.u
            )));
        }
        if ur(self.uc) > ur(self.u) || ur(self.ur) > ur(self.u) {
            return Err(Error::InvalidConfig(format!(
                "residual ({}) and update ({}) precisions must be at least as fine as {}",
                self.ur, self.uc, self.u
            )));
        }
        let open_unit = |v: f64| v > 0.0 && v < 1.0;
        if self.tau_scale.is_nan() || self.tau_scale <= 0.0 {
            return Err(Error::InvalidConfig("tau scale must be positive".into()));
        }
        if !open_unit(self.eta_r) {
            return Err(Error::InvalidConfig(format!("eta_r = {} outside (0, 1)", self.eta_r)));
        }
        if !open_unit(self.eta_s()) {
            return Err(Error::InvalidConfig(format!("eta_s = {} outside (0, 1)", self.eta_s())));
        }
        if self.i_max == 0 {
            return Err(Error::InvalidConfig("i_max must be at least 1".into()));
        }
        if self.k_max == 0 || !(self.rho > 0.0 && self.rho <= 1.0) {
            return Err(Error::InvalidConfig("k_max >= 1 and rho in (0, 1] required".into()));
        }
        Ok(())
    }

    fn check_storage<T: Real>(&self) -> Result<()> {
        let finest = [self.u, self.ur, self.uc]
            .into_iter()
            .map(|f| f.bits().0)
            .max()
            .unwrap_or(0);
        if finest > T::MANTISSA_BITS {
            return Err(Error::InvalidConfig(format!(
                "storage type has {} significand bits, configuration needs {finest}",
                T::MANTISSA_BITS
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IRStatus {
    Converged,
    Stagnated,
    MaxSteps,
    SolverDiverged,
}

impl IRStatus {
    pub fn name(self) -> &'static str {
        match self {
            IRStatus::Converged => "converged",
            IRStatus::Stagnated => "stagnated",
            IRStatus::MaxSteps => "max_steps",
            IRStatus::SolverDiverged => "solver_diverged",
        }
    }
}

impl std::fmt::Display for IRStatus {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// One solve of the run. Step 0 is the initial solve.
#[derive(Clone, Debug, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    /// Relative residual of the iterate after this step, in `f64`.
    pub res: f64,
    /// Newton iterations of this step's solve.
    pub newton_iterations: usize,
    pub rank: usize,
    /// `res_i / res_{i-1}`; absent for the initial solve.
    pub theta: Option<f64>,
    pub truncations: usize,
    pub inverses_computed: usize,
    pub inverses_reused: usize,
    /// The Newton solve had to be repeated without scaling.
    pub unscaled_retry: bool,
}

/// A stopping check on the current iterate.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ResidualCheck {
    /// `sqrt(sum lambda^2)` from the residual fragment.
    pub norm: f64,
    /// `norm / (||W||_F + 2 ||X||_F ||A||_F)`, compared against `tau_I`.
    pub relative: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct IRReport {
    pub records: Vec<StepRecord>,
    pub checks: Vec<ResidualCheck>,
    pub status: IRStatus,
    pub tau_i: f64,
    /// Message of the last solver failure, if any.
    pub failure: Option<String>,
}

impl IRReport {
    pub fn final_res(&self) -> f64 {
        self.records.last().map_or(f64::NAN, |r| r.res)
    }

    pub fn final_rank(&self) -> usize {
        self.records.last().map_or(0, |r| r.rank)
    }

    pub fn total_newton_iterations(&self) -> usize {
        self.records.iter().map(|r| r.newton_iterations).sum()
    }

    pub fn max_newton_iterations(&self) -> usize {
        self.records.iter().map(|r| r.newton_iterations).max().unwrap_or(0)
    }

    pub fn total_inverses(&self) -> usize {
        self.records.iter().map(|r| r.inverses_computed).sum()
    }

    /// Refinement steps after the initial solve.
    pub fn refinement_steps(&self) -> usize {
        self.records.len().saturating_sub(1)
    }

    pub fn converged(&self) -> bool {
        self.status == IRStatus::Converged
    }
}

/// Cholesky-type residual split `R = L+ L+^T - L- L-^T`.
#[derive(Clone, Debug, PartialEq)]
pub struct CholResidual<T> {
    pub plus: DenseMatrix<T>,
    pub minus: DenseMatrix<T>,
    /// `sqrt(sum lambda^2)` over every kernel eigenvalue.
    pub norm: f64,
}

/// `LDL^T`-type residual `R = L_d S_d L_d^T`.
#[derive(Clone, Debug, PartialEq)]
pub struct LdltResidual<T> {
    pub l: DenseMatrix<T>,
    pub s: DenseMatrix<T>,
    pub norm: f64,
}

fn split_columns<T: Real>(m: &DenseMatrix<T>, widths: &[usize]) -> Vec<DenseMatrix<T>> {
    let mut start = 0;
    widths
        .iter()
        .map(|&w| {
            let b = m.columns(start, start + w);
            start += w;
            b
        })
        .collect()
}

/// Rounded `(H + H^T) / 2`; kernels are symmetric only up to summation order.
fn symmetrize<T: Real>(h: &DenseMatrix<T>, ctx: &PrecisionContext) -> DenseMatrix<T> {
    let half = T::of(0.5);
    DenseMatrix::from_fn(h.rows(), h.cols(), |i, j| {
        if i == j {
            h[(i, i)]
        } else {
            ctx.mul(half, ctx.add(h[(i, j)], h[(j, i)]))
        }
    })
}

struct KernelEig<T> {
    q: DenseMatrix<T>,
    r: DenseMatrix<T>,
    vecs: DenseMatrix<T>,
    vals: Vec<T>,
}

/// Thin QR `F = Q R` and eigendecomposition of `R M R^T`, where `weigh`
/// maps the column blocks of `R` to those of `R M`.
fn kernel_eig<T: Real>(
    f: &DenseMatrix<T>,
    widths: &[usize],
    ctx: &PrecisionContext,
    weigh: impl Fn(&[DenseMatrix<T>]) -> Result<Vec<DenseMatrix<T>>>,
) -> Result<KernelEig<T>> {
    let (q, r) = thin_qr(f, ctx)?;
    let blocks = split_columns(&r, widths);
    let weighted = weigh(&blocks)?;
    let refs: Vec<&DenseMatrix<T>> = weighted.iter().collect();
    let rm = DenseMatrix::hcat(&refs)?;
    let h = symmetrize(&matmul_nt(&rm, &r, ctx)?, ctx);
    let (vecs, vals) = sym_eig(&h, ctx)?;
    Ok(KernelEig { q, r, vecs, vals })
}

fn eigen_norm<T: Real>(vals: &[T]) -> f64 {
    vals.iter().map(|v| v.f64() * v.f64()).sum::<f64>().sqrt()
}

fn largest_magnitude<T: Real>(vals: &[T]) -> f64 {
    vals.iter().fold(0.0, |m, v| m.max(v.f64().abs()))
}

/// `Q V[:, idx] diag(sqrt(|lambda|))`.
fn scaled_columns<T: Real>(
    k: &KernelEig<T>,
    idx: &[usize],
    ctx: &PrecisionContext,
) -> Result<DenseMatrix<T>> {
    let n = k.q.rows();
    if idx.is_empty() {
        return Ok(DenseMatrix::zeros(n, 0));
    }
    let qv = matmul(&k.q, &k.vecs.select_columns(idx), ctx)?;
    let roots: Vec<T> = idx.iter().map(|&i| ctx.sqrt(k.vals[i].abs())).collect();
    Ok(DenseMatrix::from_fn(n, idx.len(), |i, j| ctx.mul(qv[(i, j)], roots[j])))
}

fn check_rows<T: Real>(op: &'static str, n: usize, ms: &[&DenseMatrix<T>]) -> Result<()> {
    for m in ms {
        if m.rows() != n {
            return Err(Error::DimensionMismatch {
                op,
                left: (n, n),
                right: m.shape(),
            });
        }
    }
    Ok(())
}

/// Factors `R(Z) = A Z Z^T + Z Z^T A^T + L L^T` without forming it.
///
/// `F = [Z, A Z, L] = U T`, kernel `T P T^T` with `P` swapping the first two
/// blocks; eigenpairs with `|lambda| >= eta_r max|lambda|` are split by sign.
pub fn res_fac_chol<T: Real>(
    a: &DenseMatrix<T>,
    l: &DenseMatrix<T>,
    z: &DenseMatrix<T>,
    eta_r: f64,
    ctx: &PrecisionContext,
) -> Result<CholResidual<T>> {
    let n = a.rows();
    check_rows("res_fac_chol", n, &[l, z])?;
    let az = matmul(a, z, ctx)?;
    let f = DenseMatrix::hcat(&[z, &az, l])?;
    let c = z.cols();
    let k = kernel_eig(&f, &[c, c, l.cols()], ctx, |b| {
        Ok(vec![b[1].clone(), b[0].clone(), b[2].clone()])
    })?;
    let norm = eigen_norm(&k.vals);
    let cut = eta_r * largest_magnitude(&k.vals);
    let pos: Vec<usize> = (0..k.vals.len())
        .filter(|&i| k.vals[i].f64() > 0.0 && k.vals[i].f64() >= cut)
        .collect();
    let neg: Vec<usize> = (0..k.vals.len())
        .filter(|&i| k.vals[i].f64() < 0.0 && -k.vals[i].f64() >= cut)
        .collect();
    Ok(CholResidual {
        plus: scaled_columns(&k, &pos, ctx)?,
        minus: scaled_columns(&k, &neg, ctx)?,
        norm,
    })
}

/// Projects `Z Z^T + Z+ Z+^T - Z- Z-^T` onto the positive semidefinite cone
/// and returns a factor of the result, dropping eigenvalues below
/// `eta_s max sigma`.
pub fn sol_upt_chol<T: Real>(
    z: &DenseMatrix<T>,
    z_plus: &DenseMatrix<T>,
    z_minus: &DenseMatrix<T>,
    eta_s: f64,
    ctx: &PrecisionContext,
) -> Result<DenseMatrix<T>> {
    let n = z.rows();
    check_rows("sol_upt_chol", n, &[z_plus, z_minus])?;
    let g = DenseMatrix::hcat(&[z, z_plus, z_minus])?;
    if g.cols() == 0 {
        return Ok(DenseMatrix::zeros(n, 0));
    }
    let k = kernel_eig(&g, &[z.cols(), z_plus.cols(), z_minus.cols()], ctx, |b| {
        Ok(vec![b[0].clone(), b[1].clone(), b[2].scale_exact(-T::one())])
    })?;
    let eye = |c: usize| DenseMatrix::identity(c);
    let inner = [eye(z.cols()), eye(z_plus.cols()), eye(z_minus.cols())];
    let keep = positive_part(&k, eta_s, &[&inner[0], &inner[1], &inner[2]], ctx);
    scaled_columns(&k, &keep, ctx)
}

/// Indices of eigenvalues `sigma >= eta_s max sigma` that also clear the
/// cancellation noise floor of the kernel.
fn positive_part<T: Real>(
    k: &KernelEig<T>,
    eta_s: f64,
    inner: &[&DenseMatrix<T>],
    ctx: &PrecisionContext,
) -> Vec<usize> {
    let top = k.vals.iter().fold(0.0f64, |m, v| m.max(v.f64()));
    if top <= 0.0 {
        return Vec::new();
    }
    let cut = (eta_s * top).max(kernel_noise_floor(&k.r, inner, ctx));
    (0..k.vals.len())
        .filter(|&i| k.vals[i].f64() > 0.0 && k.vals[i].f64() >= cut)
        .collect()
}

fn ldlt_residual_kernel<T: Real>(
    a: &DenseMatrix<T>,
    l: &DenseMatrix<T>,
    s: &DenseMatrix<T>,
    z: &DenseMatrix<T>,
    y: &DenseMatrix<T>,
    ctx: &PrecisionContext,
) -> Result<KernelEig<T>> {
    let az = matmul(a, z, ctx)?;
    let f = DenseMatrix::hcat(&[z, &az, l])?;
    let c = z.cols();
    kernel_eig(&f, &[c, c, l.cols()], ctx, |b| {
        Ok(vec![
            matmul(&b[1], y, ctx)?,
            matmul(&b[0], y, ctx)?,
            matmul(&b[2], s, ctx)?,
        ])
    })
}

/// Factors `R(Z, Y) = A Z Y Z^T + Z Y Z^T A^T + L S L^T` as `L_d S_d L_d^T`
/// with orthonormal `L_d` and diagonal, possibly indefinite `S_d`.
#[allow(clippy::too_many_arguments)]
pub fn res_fac_ldlt<T: Real>(
    a: &DenseMatrix<T>,
    l: &DenseMatrix<T>,
    s: &DenseMatrix<T>,
    z: &DenseMatrix<T>,
    y: &DenseMatrix<T>,
    eta_r: f64,
    ctx: &PrecisionContext,
) -> Result<LdltResidual<T>> {
    let n = a.rows();
    check_rows("res_fac_ldlt", n, &[l, z])?;
    if y.rows() != z.cols() || s.rows() != l.cols() {
        return Err(Error::DimensionMismatch {
            op: "res_fac_ldlt",
            left: y.shape(),
            right: s.shape(),
        });
    }
    let k = ldlt_residual_kernel(a, l, s, z, y, ctx)?;
    let norm = eigen_norm(&k.vals);
    let cut = eta_r * largest_magnitude(&k.vals);
    let keep: Vec<usize> = (0..k.vals.len())
        .filter(|&i| k.vals[i].f64() != 0.0 && k.vals[i].f64().abs() >= cut)
        .collect();
    let ld = if keep.is_empty() {
        DenseMatrix::zeros(n, 0)
    } else {
        matmul(&k.q, &k.vecs.select_columns(&keep), ctx)?
    };
    let d: Vec<T> = keep.iter().map(|&i| k.vals[i]).collect();
    Ok(LdltResidual {
        l: ld,
        s: DenseMatrix::from_diag(&d),
        norm,
    })
}

/// `LDL^T` analogue of [`sol_upt_chol`]: PSD part of
/// `Z Y Z^T + Z_d Y_d Z_d^T` as `(V, diag sigma)`.
pub fn sol_upt_ldlt<T: Real>(
    z: &DenseMatrix<T>,
    y: &DenseMatrix<T>,
    z_delta: &DenseMatrix<T>,
    y_delta: &DenseMatrix<T>,
    eta_s: f64,
    ctx: &PrecisionContext,
) -> Result<(DenseMatrix<T>, DenseMatrix<T>)> {
    ldlt_update(z, y, z_delta, y_delta, eta_s, false, ctx)
}

/// Like [`sol_upt_ldlt`] but keeps negative eigenvalues, for equations whose
/// solution need not be semidefinite. The cut is `eta_s max|sigma|`.
pub fn sol_upt_ldlt_signed<T: Real>(
    z: &DenseMatrix<T>,
    y: &DenseMatrix<T>,
    z_delta: &DenseMatrix<T>,
    y_delta: &DenseMatrix<T>,
    eta_s: f64,
    ctx: &PrecisionContext,
) -> Result<(DenseMatrix<T>, DenseMatrix<T>)> {
    ldlt_update(z, y, z_delta, y_delta, eta_s, true, ctx)
}

fn ldlt_update<T: Real>(
    z: &DenseMatrix<T>,
    y: &DenseMatrix<T>,
    z_delta: &DenseMatrix<T>,
    y_delta: &DenseMatrix<T>,
    eta_s: f64,
    signed: bool,
    ctx: &PrecisionContext,
) -> Result<(DenseMatrix<T>, DenseMatrix<T>)> {
    let n = z.rows();
    check_rows("sol_upt_ldlt", n, &[z_delta])?;
    if y.rows() != z.cols() || y_delta.rows() != z_delta.cols() {
        return Err(Error::DimensionMismatch {
            op: "sol_upt_ldlt",
            left: y.shape(),
            right: y_delta.shape(),
        });
    }
    let g = DenseMatrix::hcat(&[z, z_delta])?;
    if g.cols() == 0 {
        return Ok((DenseMatrix::zeros(n, 0), DenseMatrix::zeros(0, 0)));
    }
    let k = kernel_eig(&g, &[z.cols(), z_delta.cols()], ctx, |b| {
        Ok(vec![matmul(&b[0], y, ctx)?, matmul(&b[1], y_delta, ctx)?])
    })?;
    let inner = [y, y_delta];
    let keep = if signed {
        let cut = (eta_s * largest_magnitude(&k.vals)).max(kernel_noise_floor(&k.r, &inner, ctx));
        (0..k.vals.len())
            .filter(|&i| k.vals[i].f64() != 0.0 && k.vals[i].f64().abs() >= cut)
            .collect()
    } else {
        positive_part(&k, eta_s, &inner, ctx)
    };
    if keep.is_empty() {
        return Ok((DenseMatrix::zeros(n, 0), DenseMatrix::zeros(0, 0)));
    }
    let v = matmul(&k.q, &k.vecs.select_columns(&keep), ctx)?;
    let d: Vec<T> = keep.iter().map(|&i| k.vals[i]).collect();
    Ok((v, DenseMatrix::from_diag(&d)))
}

/// True when the symmetric `S` has an eigenvalue below `-u m max|lambda|`
/// in `f64`, so the solution may be indefinite.
fn is_indefinite<T: Real>(s: &DenseMatrix<T>) -> Result<bool> {
    let ctx = PrecisionContext::new(Format::Fp64);
    let (_, lam) = sym_eig(&s.cast::<f64>(), &ctx)?;
    let top = largest_magnitude(&lam);
    let tol = ctx.u() * s.rows() as f64 * top;
    Ok(lam.iter().any(|&l| l < -tol))
}

/// `||Z M Z^T||_F` in `f64` via `Z = Q R`; `M = I` when absent.
pub fn factored_norm<T: Real>(z: &DenseMatrix<T>, m: Option<&DenseMatrix<T>>) -> f64 {
    if z.cols() == 0 {
        return 0.0;
    }
    let ctx = PrecisionContext::new(Format::Fp64);
    let z = z.cast::<f64>();
    let (_, r) = thin_qr(&z, &ctx).expect("qr of a finite factor");
    let rm = match m {
        Some(m) => matmul(&r, &m.cast(), &ctx).expect("inner factor matches"),
        None => r.clone(),
    };
    norm_fro(&matmul_nt(&rm, &r, &ctx).expect("shapes agree"))
}

/// Relative residual `||A X + X A^T + W||_F / (||W||_F + 2 ||X||_F ||A||_F)`
/// of `X = Z Y Z^T`, `W = L S L^T`, all in `f64` and without `n x n`
/// products. Absent `S` or `Y` mean identity.
pub fn relative_residual<T: Real>(
    a: &DenseMatrix<T>,
    l: &DenseMatrix<T>,
    s: Option<&DenseMatrix<T>>,
    z: &DenseMatrix<T>,
    y: Option<&DenseMatrix<T>>,
) -> Result<f64> {
    let ctx = PrecisionContext::new(Format::Fp64);
    let a64 = a.cast::<f64>();
    let l64 = l.cast::<f64>();
    let z64 = z.cast::<f64>();
    let s64 = s.map_or_else(|| DenseMatrix::identity(l.cols()), |s| s.cast());
    let y64 = y.map_or_else(|| DenseMatrix::identity(z.cols()), |y| y.cast());
    check_rows("relative_residual", a.rows(), &[l, z])?;
    let num = eigen_norm(&ldlt_residual_kernel(&a64, &l64, &s64, &z64, &y64, &ctx)?.vals);
    let w = factored_norm(&l64, Some(&s64));
    let x = factored_norm(&z64, Some(&y64));
    let den = w + 2.0 * x * norm_fro(&a64);
    Ok(if den > 0.0 { num / den } else { num })
}

/// Newton solves for one run, with an optional shared inverse cache per
/// scaling choice and a retry without scaling on failure.
struct Solver<'a, T> {
    a: DenseMatrix<T>,
    cfg: &'a IRConfig,
    scaled: Option<InverseCache<T>>,
    unscaled: Option<InverseCache<T>>,
}

impl<'a, T: Real> Solver<'a, T> {
    fn new(a: &DenseMatrix<T>, cfg: &'a IRConfig) -> Self {
        let a = crate::precision::round_matrix(a, cfg.us);
        let cache = |scaling| cfg.cache_inverses.then(|| InverseCache::new(&a, cfg.us, scaling));
        Self {
            scaled: cache(true),
            unscaled: cache(false),
            a,
            cfg,
        }
    }

    fn run<R>(
        &mut self,
        mut f: impl FnMut(&DenseMatrix<T>, &NewtonParams, Option<&mut InverseCache<T>>) -> Result<R>,
    ) -> Result<(R, bool)> {
        let mut params = self.cfg.newton_params();
        let first = if params.scaling {
            f(&self.a, &params, self.scaled.as_mut())
        } else {
            f(&self.a, &params, self.unscaled.as_mut())
        };
        match first {
            Ok(r) => Ok((r, false)),
            Err(e) if !params.scaling => Err(e),
            Err(_) => {
                params.scaling = false;
                f(&self.a, &params, self.unscaled.as_mut()).map(|r| (r, true))
            }
        }
    }
}

fn record(step: usize, res: f64, prev: Option<f64>, rank: usize, stats: &NewtonStats, retry: bool) -> StepRecord {
    StepRecord {
        step,
        res,
        newton_iterations: stats.iterations,
        rank,
        theta: prev.map(|p| if p > 0.0 { res / p } else { f64::INFINITY }),
        truncations: stats.truncations,
        inverses_computed: stats.inverses_computed,
        inverses_reused: stats.inverses_reused,
        unscaled_retry: retry,
    }
}

/// Bookkeeping shared by both refinement loops.
struct Outer {
    records: Vec<StepRecord>,
    checks: Vec<ResidualCheck>,
    failure: Option<String>,
    tau: f64,
}

impl Outer {
    fn new(tau: f64) -> Self {
        Self {
            records: Vec::new(),
            checks: Vec::new(),
            failure: None,
            tau,
        }
    }

    fn check(&mut self, c: ResidualCheck) -> bool {
        self.checks.push(c);
        c.relative <= self.tau
    }

    /// Stagnation bookkeeping after a new record has been pushed.
    fn stagnating(&self) -> bool {
        let recent: Vec<f64> = self
            .records
            .iter()
            .rev()
            .take(STAGNATION_STEPS)
            .filter_map(|r| r.theta)
            .collect();
        recent.len() == STAGNATION_STEPS && recent.iter().all(|&t| t > STAGNATION_RATIO)
    }

    fn finish(self, status: IRStatus) -> IRReport {
        IRReport {
            records: self.records,
            checks: self.checks,
            status,
            tau_i: self.tau,
            failure: self.failure,
        }
    }
}

fn validate_problem<T: Real>(a: &DenseMatrix<T>, l: &DenseMatrix<T>, cfg: &IRConfig) -> Result<()> {
    cfg.validate()?;
    cfg.check_storage::<T>()?;
    if !a.is_square() {
        return Err(Error::NotSquare {
            op: "refinement",
            rows: a.rows(),
            cols: a.cols(),
        });
    }
    check_rows("refinement", a.rows(), &[l])
}

/// Mixed-precision refinement for `A X + X A^T + L L^T = 0` with
/// `X ~ Z Z^T`.
///
/// Fails only on invalid input; solver breakdown is reported through
/// [`IRStatus::SolverDiverged`] with the last good iterate.
pub fn ir_chol<T: Real>(
    a: &DenseMatrix<T>,
    l: &DenseMatrix<T>,
    cfg: &IRConfig,
) -> Result<(CholFactor<T>, IRReport)> {
    validate_problem(a, l, cfg)?;
    let n = a.rows();
    let (ctx_r, ctx_c) = (PrecisionContext::new(cfg.ur), PrecisionContext::new(cfg.uc));
    let a_u = crate::precision::round_matrix(a, cfg.u);
    let l_u = crate::precision::round_matrix(l, cfg.u);
    let l_s = crate::precision::round_matrix(l, cfg.us);
    let w_norm = factored_norm(&l_u, None);
    let a_norm = norm_fro(&a_u);
    let mut solver = Solver::new(a, cfg);
    let mut outer = Outer::new(cfg.tau_i(n));

    let (mut z, stats, retry) = match solver.run(|a_s, p, c| solve_chol(a_s, &l_s, p, cfg.u, c)) {
        Ok(((f, s), r)) => (f.z, s, r),
        Err(e) => {
            outer.failure = Some(e.to_string());
            return Ok((CholFactor::empty(n), outer.finish(IRStatus::SolverDiverged)));
        }
    };
    let res = relative_residual(&a_u, &l_u, None, &z, None)?;
    outer.records.push(record(0, res, None, z.cols(), &stats, retry));

    let check = |z: &DenseMatrix<T>| -> Result<(CholResidual<T>, ResidualCheck)> {
        let rf = res_fac_chol(&a_u, &l_u, z, cfg.eta_r, &ctx_r)?;
        let den = w_norm + 2.0 * factored_norm(z, None) * a_norm;
        let relative = if den > 0.0 { rf.norm / den } else { rf.norm };
        let c = ResidualCheck { norm: rf.norm, relative };
        Ok((rf, c))
    };

    let mut status = None;
    for i in 1..=cfg.i_max {
        let (rf, c) = check(&z)?;
        if outer.check(c) {
            status = Some(IRStatus::Converged);
            break;
        }
        let lp = crate::precision::round_matrix(&rf.plus, cfg.us);
        let lm = crate::precision::round_matrix(&rf.minus, cfg.us);
        let solved = solver.run(|a_s, p, cache| solve_chol_multi(a_s, &[&lp, &lm], p, cfg.u, cache));
        let ((factors, stats), retry) = match solved {
            Ok(v) => v,
            Err(e) => {
                outer.failure = Some(e.to_string());
                status = Some(IRStatus::SolverDiverged);
                break;
            }
        };
        let next = sol_upt_chol(&z, &factors[0].z, &factors[1].z, cfg.eta_s(), &ctx_c)?;
        z = crate::precision::round_matrix(&next, cfg.u);
        let prev = outer.records.last().map(|r| r.res);
        let res = relative_residual(&a_u, &l_u, None, &z, None)?;
        outer.records.push(record(i, res, prev, z.cols(), &stats, retry));
        if outer.stagnating() {
            status = Some(IRStatus::Stagnated);
            break;
        }
    }
    let status = match status {
        Some(IRStatus::Converged) => IRStatus::Converged,
        Some(IRStatus::SolverDiverged) => IRStatus::SolverDiverged,
        other => {
            let (_, c) = check(&z)?;
            if outer.check(c) {
                IRStatus::Converged
            } else {
                other.unwrap_or(IRStatus::MaxSteps)
            }
        }
    };
    Ok((CholFactor { z }, outer.finish(status)))
}

/// Mixed-precision refinement for `A X + X A^T + L S L^T = 0` with
/// `X ~ Z Y Z^T`. `S` may be indefinite; the update then keeps negative
/// eigenvalues instead of projecting onto the semidefinite cone.
pub fn ir_ldlt<T: Real>(
    a: &DenseMatrix<T>,
    l: &DenseMatrix<T>,
    s: &DenseMatrix<T>,
    cfg: &IRConfig,
) -> Result<(LdltFactor<T>, IRReport)> {
    validate_problem(a, l, cfg)?;
    if !s.is_square() || s.rows() != l.cols() {
        return Err(Error::DimensionMismatch {
            op: "ir_ldlt",
            left: l.shape(),
            right: s.shape(),
        });
    }
    let n = a.rows();
    let (ctx_r, ctx_c) = (PrecisionContext::new(cfg.ur), PrecisionContext::new(cfg.uc));
    let round = crate::precision::round_matrix::<T>;
    let (a_u, l_u, s_u) = (round(a, cfg.u), round(l, cfg.u), round(s, cfg.u));
    let (l_s, s_s) = (round(l, cfg.us), round(s, cfg.us));
    // with an indefinite S the solution can be indefinite too, and the
    // projection onto the semidefinite cone would discard part of it
    let indefinite = is_indefinite(&s_u)?;
    let w_norm = factored_norm(&l_u, Some(&s_u));
    let a_norm = norm_fro(&a_u);
    let mut solver = Solver::new(a, cfg);
    let mut outer = Outer::new(cfg.tau_i(n));

    let (mut z, mut y, stats, retry) =
        match solver.run(|a_s, p, c| solve_ldlt(a_s, &l_s, &s_s, p, cfg.u, c)) {
            Ok(((f, st), r)) => (f.z, f.y, st, r),
            Err(e) => {
                outer.failure = Some(e.to_string());
                return Ok((LdltFactor::empty(n), outer.finish(IRStatus::SolverDiverged)));
            }
        };
    let res = relative_residual(&a_u, &l_u, Some(&s_u), &z, Some(&y))?;
    outer.records.push(record(0, res, None, z.cols(), &stats, retry));

    let check = |z: &DenseMatrix<T>, y: &DenseMatrix<T>| -> Result<(LdltResidual<T>, ResidualCheck)> {
        let rf = res_fac_ldlt(&a_u, &l_u, &s_u, z, y, cfg.eta_r, &ctx_r)?;
        let den = w_norm + 2.0 * factored_norm(z, Some(y)) * a_norm;
        let relative = if den > 0.0 { rf.norm / den } else { rf.norm };
        let c = ResidualCheck { norm: rf.norm, relative };
        Ok((rf, c))
    };

    let mut status = None;
    for i in 1..=cfg.i_max {
        let (rf, c) = check(&z, &y)?;
        if outer.check(c) {
            status = Some(IRStatus::Converged);
            break;
        }
        let ld = round(&rf.l, cfg.us);
        let sd = round(&rf.s, cfg.us);
        let solved = solver.run(|a_s, p, cache| solve_ldlt(a_s, &ld, &sd, p, cfg.u, cache));
        let ((corr, stats), retry) = match solved {
            Ok(v) => v,
            Err(e) => {
                outer.failure = Some(e.to_string());
                status = Some(IRStatus::SolverDiverged);
                break;
            }
        };
        let (zn, yn) = if indefinite {
            sol_upt_ldlt_signed(&z, &y, &corr.z, &corr.y, cfg.eta_s(), &ctx_c)?
        } else {
            sol_upt_ldlt(&z, &y, &corr.z, &corr.y, cfg.eta_s(), &ctx_c)?
        };
        z = round(&zn, cfg.u);
        y = round(&yn, cfg.u);
        let prev = outer.records.last().map(|r| r.res);
        let res = relative_residual(&a_u, &l_u, Some(&s_u), &z, Some(&y))?;
        outer.records.push(record(i, res, prev, z.cols(), &stats, retry));
        if outer.stagnating() {
            status = Some(IRStatus::Stagnated);
            break;
        }
    }
    let status = match status {
        Some(IRStatus::Converged) => IRStatus::Converged,
        Some(IRStatus::SolverDiverged) => IRStatus::SolverDiverged,
        other => {
            let (_, c) = check(&z, &y)?;
            if outer.check(c) {
                IRStatus::Converged
            } else {
                other.unwrap_or(IRStatus::MaxSteps)
            }
        }
    };
    Ok((LdltFactor { z, y }, outer.finish(status)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernels::testutil::{naive_mul, random, sub};
    use crate::problems::{gen_synthetic, kron_oracle, random_stable};

    type M = DenseMatrix<f64>;

    fn fp64() -> PrecisionContext {
        PrecisionContext::new(Format::Fp64)
    }

    fn gram(z: &M) -> M {
        naive_mul(z, &z.transpose())
    }

    fn ldl(z: &M, y: &M) -> M {
        naive_mul(&naive_mul(z, y), &z.transpose())
    }

    fn rel(a: &M, b: &M) -> f64 {
        norm_fro(&sub(a, b)) / norm_fro(b)
    }

    /// Explicit `A X + X A^T + W`.
    fn explicit_residual(a: &M, x: &M, w: &M) -> M {
        let ax = naive_mul(a, x);
        M::from_fn(a.rows(), a.rows(), |i, j| ax[(i, j)] + ax[(j, i)] + w[(i, j)])
    }

    /// Oracle: PSD part of a symmetric matrix from its full eigendecomposition.
    fn psd_part(x: &M) -> M {
        let (q, lam) = sym_eig(x, &fp64()).unwrap();
        let top = lam.iter().cloned().fold(0.0, f64::max);
        let d: Vec<f64> = lam.iter().map(|&l| if l > 10.0 * 1.1e-16 * top { l } else { 0.0 }).collect();
        naive_mul(&naive_mul(&q, &M::from_diag(&d)), &q.transpose())
    }

    /// Oracle factor: eigenvectors of the Kronecker solution scaled by the
    /// roots of the eigenvalues.
    fn oracle_factor(x: &M) -> M {
        let (q, lam) = sym_eig(x, &fp64()).unwrap();
        let keep: Vec<usize> = (0..lam.len()).filter(|&i| lam[i] > 1e-15 * lam[0]).collect();
        M::from_fn(x.rows(), keep.len(), |i, j| q[(i, keep[j])] * lam[keep[j]].sqrt())
    }

    #[test]
    fn config_validation() {
        assert!(IRConfig::new(Format::Fp32, Format::Fp64).validate().is_ok());
        assert!(IRConfig::new(Format::Fp64, Format::Fp32).validate().is_err());
        let mut c = IRConfig::new(Format::Bf16, Format::Fp32);
        c.uc = Format::Bf16;
        assert!(c.validate().is_err());
        let mut c = IRConfig::uniform(Format::Fp64);
        c.eta_r = 1.0;
        assert!(c.validate().is_err());
        let c = IRConfig::new(Format::Fp32, Format::Fp64);
        assert!((c.tau_i(100) - 100.0 * Format::Fp64.unit_roundoff()).abs() < 1e-30);
        assert!((c.eta_s() - 10.0 * Format::Fp64.unit_roundoff()).abs() < 1e-30);
        // f32 storage cannot hold an fp64 working precision
        let p = random_stable(4, 1, 1).unwrap();
        assert!(ir_chol(&p.a.cast::<f32>(), &p.l.cast::<f32>(), &c).is_err());
    }

    #[test]
    fn res_fac_chol_empty_iterate() {
        let a = random_stable(6, 2, 1).unwrap().a;
        let l = random(6, 2, 2);
        let r = res_fac_chol(&a, &l, &M::zeros(6, 0), 1e-4, &fp64()).unwrap();
        assert_eq!(r.minus.cols(), 0);
        assert!(rel(&gram(&r.plus), &gram(&l)) <= 1e-13);
    }

    #[test]
    fn res_fac_matches_explicit_residual() {
        let n = 12;
        let p = random_stable(n, 2, 3).unwrap();
        let z = random(n, 3, 4);
        let w = p.w();
        let r_exp = explicit_residual(&p.a, &gram(&z), &w);
        let r = res_fac_chol(&p.a, &p.l, &z, 1e-4, &fp64()).unwrap();
        assert!((r.norm - norm_fro(&r_exp)).abs() <= 1e-12 * norm_fro(&r_exp));
        // retained split reproduces the residual up to the dropped mass
        let split = sub(&gram(&r.plus), &gram(&r.minus));
        assert!(rel(&split, &r_exp) <= 1e-3);

        let y = M::identity(3);
        let d = res_fac_ldlt(&p.a, &p.l, &M::identity(2), &z, &y, 1e-4, &fp64()).unwrap();
        assert!((d.norm - r.norm).abs() <= 1e-12 * r.norm);
        assert!(rel(&ldl(&d.l, &d.s), &r_exp) <= 1e-3);
    }

    #[test]
    fn res_fac_at_oracle_solution() {
        let p = random_stable(8, 2, 5).unwrap();
        let w = p.w();
        let x = kron_oracle(&p.a, &w).unwrap();
        let z = oracle_factor(&x);
        let den = norm_fro(&w) + 2.0 * norm_fro(&gram(&z)) * norm_fro(&p.a);
        let r = res_fac_chol(&p.a, &p.l, &z, 1e-4, &fp64()).unwrap();
        assert!(r.norm / den <= 1e-13, "{}", r.norm / den);
        let y = M::identity(z.cols());
        let d = res_fac_ldlt(&p.a, &p.l, &M::identity(2), &z, &y, 1e-4, &fp64()).unwrap();
        assert!(d.norm / den <= 1e-13);
        assert!(relative_residual(&p.a, &p.l, None, &z, None).unwrap() <= 1e-14);
    }

    #[test]
    fn res_fac_ldlt_empty_iterate() {
        let l = random(7, 3, 6);
        let a = random_stable(7, 1, 6).unwrap().a;
        let d = res_fac_ldlt(&a, &l, &M::identity(3), &M::zeros(7, 0), &M::zeros(0, 0), 1e-4, &fp64())
            .unwrap();
        assert!(rel(&ldl(&d.l, &d.s), &gram(&l)) <= 1e-13);
        let gl = naive_mul(&l.transpose(), &l);
        let (_, lam) = sym_eig(&gl, &fp64()).unwrap();
        for (s, e) in d.s.diag().iter().zip(&lam) {
            assert!((s - e).abs() <= 1e-12 * e);
        }
    }

    #[test]
    fn sol_upt_chol_examples() {
        let ctx = fp64();
        let z = random(10, 3, 1);
        let e = M::zeros(10, 0);
        let same = sol_upt_chol(&z, &e, &e, 1e-15, &ctx).unwrap();
        assert!(rel(&gram(&same), &gram(&z)) <= 1e-13);

        let zp = random(10, 2, 2);
        let out = sol_upt_chol(&z, &zp, &z, 1e-15, &ctx).unwrap();
        assert!(rel(&gram(&out), &gram(&zp)) <= 1e-12);

        let n = 20;
        let z = random(n, 4, 3);
        let zp = random(n, 2, 4);
        let zm = random(n, 3, 5).scale_exact(0.7);
        let xbp = sub(&M::from_fn(n, n, |i, j| gram(&z)[(i, j)] + gram(&zp)[(i, j)]), &gram(&zm));
        let out = sol_upt_chol(&z, &zp, &zm, 1e-15, &ctx).unwrap();
        assert!(rel(&gram(&out), &psd_part(&xbp)) <= 1e-11);
    }

    #[test]
    fn sol_upt_ldlt_examples() {
        let ctx = fp64();
        let z = random(10, 3, 1);
        let y = M::from_diag(&[3.0, 2.0, 0.5]);
        let (z1, y1) = sol_upt_ldlt(&z, &y, &M::zeros(10, 0), &M::zeros(0, 0), 1e-15, &ctx).unwrap();
        assert!(rel(&ldl(&z1, &y1), &ldl(&z, &y)) <= 1e-13);

        let (z2, y2) = sol_upt_ldlt(&z, &y, &z, &y.scale_exact(-1.0), 1e-15, &ctx).unwrap();
        assert_eq!(z2.cols(), 0);
        assert_eq!(y2.shape(), (0, 0));

        let n = 20;
        let zd = random(n, 3, 7);
        let yd = M::from_diag(&[1.0, -2.0, 0.3]);
        let z = random(n, 4, 8);
        let y = M::from_diag(&[4.0, 3.0, 2.0, 1.0]);
        let x = M::from_fn(n, n, |i, j| ldl(&z, &y)[(i, j)] + ldl(&zd, &yd)[(i, j)]);
        let (zo, yo) = sol_upt_ldlt(&z, &y, &zd, &yd, 1e-15, &ctx).unwrap();
        assert!(yo.diag().iter().all(|&v| v > 0.0));
        assert!(rel(&ldl(&zo, &yo), &psd_part(&x)) <= 1e-11);
    }

    #[test]
    fn relative_residual_examples() {
        let p = random_stable(6, 2, 2).unwrap();
        let one = relative_residual(&p.a, &p.l, None, &M::zeros(6, 0), None).unwrap();
        assert!((one - 1.0).abs() <= 1e-15);

        let n = 15;
        let p = random_stable(n, 3, 4).unwrap();
        let z = random(n, 4, 5);
        let x = gram(&z);
        let w = p.w();
        let expect = norm_fro(&explicit_residual(&p.a, &x, &w))
            / (norm_fro(&w) + 2.0 * norm_fro(&x) * norm_fro(&p.a));
        let got = relative_residual(&p.a, &p.l, None, &z, None).unwrap();
        assert!((got - expect).abs() <= 1e-12 * expect);
    }

    #[test]
    fn ir_minus_identity_converges_in_one_step() {
        let a = M::from_diag(&[-1.0; 4]);
        let l = random(4, 1, 3);
        let (f, rep) = ir_chol(&a, &l, &IRConfig::uniform(Format::Fp64)).unwrap();
        assert_eq!(rep.status, IRStatus::Converged);
        assert!(rep.refinement_steps() <= 1);
        assert!(rep.final_res() <= 40.0 * Format::Fp64.unit_roundoff());
        let (g, rep2) = ir_ldlt(&a, &l, &M::identity(1), &IRConfig::uniform(Format::Fp64)).unwrap();
        assert!(rep2.converged());
        assert!(rel(&g.to_dense(), &f.to_dense()) <= 1e-14);
    }

    #[test]
    fn ir_bf16_solver_reaches_fp32_accuracy() {
        let n = 10;
        let p = random_stable(n, 2, 11).unwrap();
        let cfg = IRConfig::new(Format::Bf16, Format::Fp32);
        let (f, rep) = ir_chol(&p.a.cast::<f32>(), &p.l.cast::<f32>(), &cfg).unwrap();
        let bound = 10.0 * n as f64 * Format::Fp32.unit_roundoff();
        assert!(rep.final_res() <= bound, "{rep:?}");
        let x = f.to_dense();
        let w = p.w();
        let direct = norm_fro(&explicit_residual(&p.a, &x, &w))
            / (norm_fro(&w) + 2.0 * norm_fro(&x) * norm_fro(&p.a));
        assert!(direct <= bound, "{direct}");
    }

    #[test]
    fn ir_ldlt_indefinite_rhs() {
        let n = 6;
        let p = random_stable(n, 2, 21).unwrap();
        let s = M::from_diag(&[1.0, -1.0]);
        let w = ldl(&p.l, &s);
        let x_or = kron_oracle(&p.a, &w).unwrap();
        let (f, rep) = ir_ldlt(&p.a, &p.l, &s, &IRConfig::uniform(Format::Fp64)).unwrap();
        assert!(rel(&f.to_dense(), &x_or) <= 1e-10, "{rep:?}");
        assert!(f.y.diag().iter().any(|&v| v < 0.0));
    }

    #[test]
    fn ir_ldlt_indefinite_w_with_psd_solution() {
        // W indefinite but X = oracle solution PSD: build X first, W from it
        let n = 6;
        let p = random_stable(n, 1, 31).unwrap();
        let zx = random(n, 2, 32);
        let x = gram(&zx);
        let ax = naive_mul(&p.a, &x);
        let w = M::from_fn(n, n, |i, j| -(ax[(i, j)] + ax[(j, i)]));
        let (q, lam) = sym_eig(&w, &fp64()).unwrap();
        let keep: Vec<usize> = (0..n).filter(|&i| lam[i].abs() > 1e-12 * lam[0].abs()).collect();
        let l = q.select_columns(&keep);
        let s = M::from_diag(&keep.iter().map(|&i| lam[i]).collect::<Vec<_>>());
        assert!(s.diag().iter().any(|&v| v < 0.0));
        let (f, rep) = ir_ldlt(&p.a, &l, &s, &IRConfig::uniform(Format::Fp64)).unwrap();
        assert!(rel(&f.to_dense(), &x) <= 1e-10, "{rep:?}");
    }

    #[test]
    fn formulations_agree() {
        let p = random_stable(10, 2, 41).unwrap();
        let cfg = IRConfig::uniform(Format::Fp64);
        let (c, rc) = ir_chol(&p.a, &p.l, &cfg).unwrap();
        let (d, rd) = ir_ldlt(&p.a, &p.l, &M::identity(2), &cfg).unwrap();
        let bound = 10.0 * rc.final_res().max(rd.final_res());
        assert!(rel(&d.to_dense(), &c.to_dense()) <= bound.max(1e-14));
    }

    #[test]
    fn psd_iterates_and_reporting() {
        let p = gen_synthetic(15, 2, 1.0, 3).unwrap();
        let cfg = IRConfig::new(Format::Bf16, Format::Fp64);
        let (f, rep) = ir_chol(&p.a, &p.l, &cfg).unwrap();
        let x = f.to_dense();
        let (_, lam) = sym_eig(&x, &fp64()).unwrap();
        assert!(*lam.last().unwrap() >= -1e-12 * norm_fro(&x));
        assert!(rep.records[0].theta.is_none());
        assert!(rep.records.iter().skip(1).all(|r| r.theta.is_some()));
        assert_eq!(rep.records.len(), rep.refinement_steps() + 1);
        assert_eq!(rep.total_newton_iterations(), rep.records.iter().map(|r| r.newton_iterations).sum::<usize>());
        assert!(rep.converged(), "{rep:?}");
    }

    #[test]
    fn solver_failure_is_reported() {
        // singular A: every Newton run fails, with and without scaling
        let a = M::from_rows(&[[1.0, 1.0], [1.0, 1.0]]);
        let l = M::column_vector(&[1.0, 0.0]);
        let (f, rep) = ir_chol(&a, &l, &IRConfig::uniform(Format::Fp64)).unwrap();
        assert_eq!(rep.status, IRStatus::SolverDiverged);
        assert_eq!(f.rank(), 0);
        assert!(rep.failure.is_some());
    }
}
