//! Test problems: the synthetic generator, Matrix Market files and a dense
//! Kronecker-system reference solver for small `n`.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

use crate::error::{Error, Result};
use crate::matrix::DenseMatrix;

type Matrix = DenseMatrix<f64>;

/// Largest `n` accepted by [`kron_oracle`]; the dense system has `n^2`
/// unknowns and costs `O(n^6)`.
pub const ORACLE_MAX_N: usize = 64;

/// `A X + X A^T + L S L^T = 0`; `S = I` when absent.
#[derive(Clone, Debug, PartialEq)]
pub struct LyapunovProblem {
    pub name: String,
    pub a: Matrix,
    pub l: Matrix,
    pub s: Option<Matrix>,
    /// Condition exponent of a synthetic problem.
    pub q: Option<f64>,
    pub seed: Option<u64>,
}

impl LyapunovProblem {
    pub fn new(name: impl Into<String>, a: Matrix, l: Matrix, s: Option<Matrix>) -> Result<Self> {
        if !a.is_square() {
            return Err(Error::NotSquare {
                op: "problem",
                rows: a.rows(),
                cols: a.cols(),
            });
        }
        if l.rows() != a.rows() {
            return Err(Error::DimensionMismatch {
                op: "problem",
                left: a.shape(),
                right: l.shape(),
            });
        }
        if let Some(s) = &s {
            if !s.is_square() || s.rows() != l.cols() {
                return Err(Error::DimensionMismatch {
                    op: "problem",
                    left: l.shape(),
                    right: s.shape(),
                });
            }
        }
        Ok(Self {
            name: name.into(),
            a,
            l,
            s,
            q: None,
            seed: None,
        })
    }

    pub fn n(&self) -> usize {
        self.a.rows()
    }

    pub fn m(&self) -> usize {
        self.l.cols()
    }

    /// The inner matrix, identity when none was given.
    pub fn s_or_identity(&self) -> Matrix {
        self.s.clone().unwrap_or_else(|| Matrix::identity(self.m()))
    }

    /// Dense `W = L S L^T`. Meant for small problems.
    pub fn w(&self) -> Matrix {
        let s = self.s_or_identity();
        let (n, m) = (self.n(), self.m());
        Matrix::from_fn(n, n, |i, j| {
            let mut acc = 0.0;
            for p in 0..m {
                for q in 0..m {
                    acc += self.l[(i, p)] * s[(p, q)] * self.l[(j, q)];
                }
            }
            acc
        })
    }
}

/// Standard normal samples: ChaCha20 seeded with `seed_from_u64`, uniform
/// doubles from `gen::<f64>()` and the Box-Muller transform, using both
/// outputs of each pair in order.
pub struct NormalStream {
    rng: ChaCha20Rng,
    spare: Option<f64>,
}

impl NormalStream {
    pub fn new(seed: u64) -> Self {
        Self {
            rng: ChaCha20Rng::seed_from_u64(seed),
            spare: None,
        }
    }

    pub fn sample(&mut self) -> f64 {
        if let Some(v) = self.spare.take() {
            return v;
        }
        // 1 - U keeps the log argument in (0, 1]
        let u1 = 1.0 - self.rng.gen::<f64>();
        let u2 = self.rng.gen::<f64>();
        let r = (-2.0 * u1.ln()).sqrt();
        let t = 2.0 * std::f64::consts::PI * u2;
        self.spare = Some(r * t.sin());
        r * t.cos()
    }

    /// `rows x cols` matrix filled row by row.
    pub fn matrix(&mut self, rows: usize, cols: usize) -> Matrix {
        Matrix::from_fn(rows, cols, |_, _| self.sample())
    }
}

/// Symmetric orthogonal sine matrix, `V(i, j) = sqrt(2/(n+1)) sin(i j pi/(n+1))`
/// with 1-based `i, j`.
pub fn sine_orthogonal(n: usize) -> Matrix {
    let c = (2.0 / (n as f64 + 1.0)).sqrt();
    let h = std::f64::consts::PI / (n as f64 + 1.0);
    Matrix::from_fn(n, n, |i, j| c * (((i + 1) * (j + 1)) as f64 * h).sin())
}

/// Synthetic problem with `A = -V diag(s) V^T`, `s_j = 10^(q (j-1)/(n-1))`,
/// so `A` is symmetric negative definite with 2-norm condition number `10^q`.
/// `L` is `n x m` standard normal.
pub fn gen_synthetic(n: usize, m: usize, q: f64, seed: u64) -> Result<LyapunovProblem> {
    if n < 2 || m == 0 || q.is_nan() || q < 0.0 {
        return Err(Error::InvalidConfig(format!(
            "synthetic problem needs n >= 2, m >= 1, q >= 0 (got n={n}, m={m}, q={q})"
        )));
    }
    let v = sine_orthogonal(n);
    let s: Vec<f64> = (0..n)
        .map(|j| 10f64.powf(q * j as f64 / (n - 1) as f64))
        .collect();
    let mut a = Matrix::from_fn(n, n, |i, j| {
        let mut acc = 0.0;
        for k in 0..n {
            acc -= v[(i, k)] * s[k] * v[(j, k)];
        }
        acc
    });
    for i in 0..n {
        for j in 0..i {
            let avg = 0.5 * (a[(i, j)] + a[(j, i)]);
            a[(i, j)] = avg;
            a[(j, i)] = avg;
        }
    }
    let l = NormalStream::new(seed).matrix(n, m);
    let mut p = LyapunovProblem::new(format!("synthetic_n{n}_q{q}"), a, l, None)?;
    p.q = Some(q);
    p.seed = Some(seed);
    Ok(p)
}

/// Random stable nonsymmetric problem: `A = -(B B^T/n + I/2) + (K - K^T)/2`
/// has eigenvalues with real part at most `-1/2`.
pub fn random_stable(n: usize, m: usize, seed: u64) -> Result<LyapunovProblem> {
    let mut g = NormalStream::new(seed);
    let b = g.matrix(n, n);
    let k = g.matrix(n, n);
    let a = Matrix::from_fn(n, n, |i, j| {
        let mut acc = 0.0;
        for t in 0..n {
            acc -= b[(i, t)] * b[(j, t)];
        }
        acc / n as f64 - if i == j { 0.5 } else { 0.0 } + 0.5 * (k[(i, j)] - k[(j, i)])
    });
    let l = g.matrix(n, m);
    let mut p = LyapunovProblem::new(format!("random_n{n}_m{m}_s{seed}"), a, l, None)?;
    p.seed = Some(seed);
    Ok(p)
}

/// Solves `A X + X A^T + W = 0` through the `n^2 x n^2` Kronecker system
/// `(I (x) A + A (x) I) vec(X) = -vec(W)` by Gaussian elimination with
/// partial pivoting in `f64`; returns the symmetrized solution.
pub fn kron_oracle(a: &Matrix, w: &Matrix) -> Result<Matrix> {
    let n = a.rows();
    if !a.is_square() || w.shape() != (n, n) {
        return Err(Error::DimensionMismatch {
            op: "kron_oracle",
            left: a.shape(),
            right: w.shape(),
        });
    }
    if n > ORACLE_MAX_N {
        return Err(Error::OracleTooLarge { n, max: ORACLE_MAX_N });
    }
    let big = n * n;
    // column-major vec: index of X(i, j) is i + j n
    let mut m = vec![0.0; big * big];
    for j in 0..n {
        for i in 0..n {
            let row = i + j * n;
            for k in 0..n {
                m[row * big + k + j * n] += a[(i, k)];
                m[row * big + i + k * n] += a[(j, k)];
            }
        }
    }
    let mut rhs: Vec<f64> = (0..big).map(|r| -w[(r % n, r / n)]).collect();
    gauss_solve(&mut m, &mut rhs, big)?;
    let x = Matrix::from_fn(n, n, |i, j| rhs[i + j * n]);
    Ok(Matrix::from_fn(n, n, |i, j| 0.5 * (x[(i, j)] + x[(j, i)])))
}

/// In-place solve of the dense row-major system `m x = b`.
fn gauss_solve(m: &mut [f64], b: &mut [f64], n: usize) -> Result<()> {
    for col in 0..n {
        let mut piv = col;
        for r in col + 1..n {
            if m[r * n + col].abs() > m[piv * n + col].abs() {
                piv = r;
            }
        }
        if m[piv * n + col] == 0.0 {
            return Err(Error::Singular { column: col });
        }
        if piv != col {
            for c in 0..n {
                m.swap(piv * n + c, col * n + c);
            }
            b.swap(piv, col);
        }
        let d = m[col * n + col];
        for r in col + 1..n {
            let f = m[r * n + col] / d;
            if f == 0.0 {
                continue;
            }
            for c in col..n {
                m[r * n + c] -= f * m[col * n + c];
            }
            b[r] -= f * b[col];
        }
    }
    for r in (0..n).rev() {
        let mut acc = b[r];
        for c in r + 1..n {
            acc -= m[r * n + c] * b[c];
        }
        b[r] = acc / m[r * n + r];
    }
    Ok(())
}

fn parse_err(path: &Path, line: usize, msg: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line,
        msg: msg.into(),
    }
}

/// Reads a real (or integer) Matrix Market file, coordinate or array,
/// general or symmetric, into a dense matrix.
///
/// Coordinate duplicates are summed; symmetric storage is mirrored.
pub fn read_matrix_market(path: &Path) -> Result<Matrix> {
    let text = fs::read_to_string(path)?;
    parse_matrix_market(&text, path)
}

pub fn parse_matrix_market(text: &str, path: &Path) -> Result<Matrix> {
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
    let (hline, header) = lines.next().ok_or_else(|| parse_err(path, 1, "empty file"))?;
    let words: Vec<String> = header.split_whitespace().map(str::to_ascii_lowercase).collect();
    if words.len() != 5 || words[0] != "%%matrixmarket" || words[1] != "matrix" {
        return Err(parse_err(path, hline, "expected a %%MatrixMarket matrix header"));
    }
    let coordinate = match words[2].as_str() {
        "coordinate" => true,
        "array" => false,
        other => return Err(parse_err(path, hline, format!("unsupported layout {other}"))),
    };
    if !matches!(words[3].as_str(), "real" | "integer" | "double") {
        return Err(parse_err(path, hline, format!("unsupported field {}", words[3])));
    }
    let symmetric = match words[4].as_str() {
        "general" => false,
        "symmetric" => true,
        other => return Err(parse_err(path, hline, format!("unsupported symmetry {other}"))),
    };

    let mut body = lines.filter(|(_, l)| !l.trim().is_empty() && !l.trim_start().starts_with('%'));
    let (sline, size) = body.next().ok_or_else(|| parse_err(path, hline, "missing size line"))?;
    let dims: Vec<usize> = size
        .split_whitespace()
        .map(|t| t.parse().map_err(|_| parse_err(path, sline, format!("bad size entry {t:?}"))))
        .collect::<Result<_>>()?;
    let number = |line: usize, t: &str| -> Result<f64> {
        t.parse::<f64>()
            .map_err(|_| parse_err(path, line, format!("bad number {t:?}")))
    };

    if coordinate {
        let [rows, cols, nnz] = dims[..] else {
            return Err(parse_err(path, sline, "coordinate size line needs rows cols nnz"));
        };
        let mut m = Matrix::zeros(rows, cols);
        let mut seen = 0;
        for (ln, l) in body {
            let t: Vec<&str> = l.split_whitespace().collect();
            if t.len() != 3 {
                return Err(parse_err(path, ln, "expected `row col value`"));
            }
            let idx = |s: &str, bound: usize| -> Result<usize> {
                match s.parse::<usize>() {
                    Ok(v) if v >= 1 && v <= bound => Ok(v - 1),
                    _ => Err(parse_err(path, ln, format!("index {s:?} out of range"))),
                }
            };
            let (i, j, v) = (idx(t[0], rows)?, idx(t[1], cols)?, number(ln, t[2])?);
            m[(i, j)] += v;
            if symmetric && i != j {
                m[(j, i)] += v;
            }
            seen += 1;
        }
        if seen != nnz {
            return Err(parse_err(path, sline, format!("expected {nnz} entries, found {seen}")));
        }
        Ok(m)
    } else {
        let [rows, cols] = dims[..] else {
            return Err(parse_err(path, sline, "array size line needs rows cols"));
        };
        if symmetric && rows != cols {
            return Err(parse_err(path, sline, "symmetric array must be square"));
        }
        let mut slots = Vec::new();
        for j in 0..cols {
            let start = if symmetric { j } else { 0 };
            for i in start..rows {
                slots.push((i, j));
            }
        }
        let mut m = Matrix::zeros(rows, cols);
        let mut k = 0;
        for (ln, l) in body {
            for t in l.split_whitespace() {
                let &(i, j) = slots
                    .get(k)
                    .ok_or_else(|| parse_err(path, ln, "more values than the size line allows"))?;
                let v = number(ln, t)?;
                m[(i, j)] = v;
                if symmetric {
                    m[(j, i)] = v;
                }
                k += 1;
            }
        }
        if k != slots.len() {
            return Err(parse_err(path, sline, format!("expected {} values, found {k}", slots.len())));
        }
        Ok(m)
    }
}

/// Dense array-format text; values use the shortest representation that
/// reads back to the same `f64`.
pub fn format_matrix_market(m: &Matrix) -> String {
    let mut out = String::from("%%MatrixMarket matrix array real general\n");
    let _ = writeln!(out, "{} {}", m.rows(), m.cols());
    for j in 0..m.cols() {
        for i in 0..m.rows() {
            let _ = writeln!(out, "{:e}", m[(i, j)]);
        }
    }
    out
}

pub fn write_matrix_market(path: &Path, m: &Matrix) -> Result<()> {
    fs::write(path, format_matrix_market(m))?;
    Ok(())
}

/// Loads `A`, `L` and optionally `S`. The problem is named after `A`'s file
/// stem with a trailing `_A` or `.A` removed.
pub fn load_problem(path_a: &Path, path_l: &Path, path_s: Option<&Path>) -> Result<LyapunovProblem> {
    let a = read_matrix_market(path_a)?;
    let l = read_matrix_market(path_l)?;
    let s = path_s.map(read_matrix_market).transpose()?;
    let stem = path_a
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "problem".into());
    let name = stem
        .strip_suffix("_A")
        .or_else(|| stem.strip_suffix(".A"))
        .unwrap_or(&stem)
        .to_string();
    LyapunovProblem::new(name, a, l, s)
}

/// Writes `{stem}_A.mtx`, `{stem}_L.mtx` and, when present, `{stem}_S.mtx`
/// into `dir`; returns the paths in that order.
pub fn write_problem(p: &LyapunovProblem, dir: &Path, stem: &str) -> Result<Vec<PathBuf>> {
    let mut paths = vec![dir.join(format!("{stem}_A.mtx")), dir.join(format!("{stem}_L.mtx"))];
    write_matrix_market(&paths[0], &p.a)?;
    write_matrix_market(&paths[1], &p.l)?;
    if let Some(s) = &p.s {
        let ps = dir.join(format!("{stem}_S.mtx"));
        write_matrix_market(&ps, s)?;
        paths.push(ps);
    }
    Ok(paths)
}
