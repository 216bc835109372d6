//! Command-line front end: single solves, synthetic sweeps and file-based
//! sweeps with CSV or markdown reports.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::DenseMatrix;
use crate::precision::Format;
use crate::problems::{gen_synthetic, load_problem, LyapunovProblem};
use crate::refine::{ir_chol, ir_ldlt, IRConfig, IRReport, IRStatus};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_UNCONVERGED: i32 = 2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Formulation {
    Chol,
    Ldlt,
}

impl Formulation {
    pub fn name(self) -> &'static str {
        match self {
            Formulation::Chol => "chol",
            Formulation::Ldlt => "ldlt",
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReportFormat {
    #[default]
    Csv,
    #[value(alias = "markdown")]
    #[serde(alias = "markdown")]
    Md,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Solve,
    BenchSynthetic,
    BenchFiles,
}

#[derive(Parser, Debug)]
#[command(name = "lyapir", version, about = "Mixed-precision iterative refinement for low-rank Lyapunov equations")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Solve one problem given as Matrix Market files.
    Solve {
        /// Coefficient matrix A.
        #[arg(long = "a", value_name = "PATH")]
        a: PathBuf,
        /// Right-hand side factor L.
        #[arg(long = "l", value_name = "PATH")]
        l: PathBuf,
        /// Optional inner matrix S of W = L S L^T.
        #[arg(long = "s", value_name = "PATH")]
        s: Option<PathBuf>,
        #[command(flatten)]
        opts: Options,
    },
    /// Sweep generated problems over sizes, condition exponents and seeds.
    BenchSynthetic {
        #[command(flatten)]
        opts: Options,
    },
    /// Sweep problems given as `A,L[,S]` path triplets.
    BenchFiles {
        #[arg(long = "problem", value_name = "A,L[,S]", required = true)]
        problems: Vec<String>,
        #[command(flatten)]
        opts: Options,
    },
}

#[derive(Args, Debug, Default)]
struct Options {
    /// TOML file with the same keys as the flags; flags win.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Solution factor form; sweeps run both when absent.
    #[arg(long, value_enum)]
    formulation: Option<Formulation>,
    /// Solver precision (bf16, fp16, fp32, fp64).
    #[arg(long)]
    us: Option<Format>,
    /// Working precision; residual and update precisions default to it.
    #[arg(long)]
    u: Option<Format>,
    /// Residual precision.
    #[arg(long)]
    ur: Option<Format>,
    /// Solution update precision.
    #[arg(long)]
    uc: Option<Format>,
    /// Problem size (repeatable, default 100).
    #[arg(long)]
    n: Vec<usize>,
    /// Synthetic A has 2-norm condition number 10^q (repeatable).
    #[arg(long)]
    q: Vec<f64>,
    /// Columns of L (default 3).
    #[arg(long)]
    m: Option<usize>,
    /// Generator seed (repeatable, default 1).
    #[arg(long)]
    seed: Vec<u64>,
    /// Newton truncation trigger: truncate above rho n columns (default 0.1).
    #[arg(long)]
    rho: Option<f64>,
    /// Multiplier on n u for the refinement tolerance.
    #[arg(long = "tau-scale")]
    tau_scale: Option<f64>,
    /// Relative residual truncation threshold (default 1e-4).
    #[arg(long = "eta-r")]
    eta_r: Option<f64>,
    /// Multiplier on u for the update truncation (default 10).
    #[arg(long = "eta-s-scale")]
    eta_s_scale: Option<f64>,
    /// Maximum refinement steps (default 50).
    #[arg(long)]
    imax: Option<usize>,
    /// Maximum Newton iterations per solve (default 50).
    #[arg(long)]
    kmax: Option<usize>,
    /// Reuse the A-side inverse sequence across solves.
    #[arg(long = "cache-inverses")]
    cache_inverses: bool,
    /// Turn off Frobenius-norm scaling in the Newton solver.
    #[arg(long = "no-scaling")]
    no_scaling: bool,
    /// Report file; standard output when absent.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Report format (default csv).
    #[arg(long, value_enum)]
    format: Option<ReportFormat>,
}

/// Keys accepted in a config file.
#[derive(Debug, Default, Deserialize)]
#[serde(rename_all = "kebab-case", deny_unknown_fields)]
pub struct ConfigFile {
    pub formulation: Option<Formulation>,
    pub us: Option<Format>,
    pub u: Option<Format>,
    pub ur: Option<Format>,
    pub uc: Option<Format>,
    pub n: Option<Vec<usize>>,
    pub q: Option<Vec<f64>>,
    pub m: Option<usize>,
    pub seed: Option<Vec<u64>>,
    pub rho: Option<f64>,
    pub tau_scale: Option<f64>,
    pub eta_r: Option<f64>,
    pub eta_s_scale: Option<f64>,
    pub imax: Option<usize>,
    pub kmax: Option<usize>,
    pub cache_inverses: Option<bool>,
    pub scaling: Option<bool>,
    pub out: Option<PathBuf>,
    pub format: Option<ReportFormat>,
    /// Path triplets for `bench-files`.
    pub problems: Option<Vec<Vec<PathBuf>>>,
}

impl ConfigFile {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        toml::from_str(&text).map_err(|e| Error::InvalidConfig(format!("{}: {e}", path.display())))
    }
}

/// Files making up one problem.
#[derive(Clone, Debug, PartialEq)]
pub struct ProblemFiles {
    pub a: PathBuf,
    pub l: PathBuf,
    pub s: Option<PathBuf>,
}

impl ProblemFiles {
    fn parse(spec: &str) -> Result<Self> {
        let parts: Vec<&str> = spec.split(',').map(str::trim).collect();
        match parts[..] {
            [a, l] => Ok(Self { a: a.into(), l: l.into(), s: None }),
            [a, l, s] => Ok(Self { a: a.into(), l: l.into(), s: Some(s.into()) }),
            _ => Err(Error::InvalidConfig(format!("expected A,L[,S] paths, got {spec:?}"))),
        }
    }

    fn from_list(paths: &[PathBuf]) -> Result<Self> {
        match paths {
            [a, l] => Ok(Self { a: a.clone(), l: l.clone(), s: None }),
            [a, l, s] => Ok(Self { a: a.clone(), l: l.clone(), s: Some(s.clone()) }),
            _ => Err(Error::InvalidConfig("problem entries need two or three paths".into())),
        }
    }
}

/// A fully resolved run.
#[derive(Clone, Debug, PartialEq)]
pub struct RunSpec {
    pub mode: Mode,
    /// Empty means "choose per problem": Cholesky unless `S` is given.
    pub formulations: Vec<Formulation>,
    pub combos: Vec<IRConfig>,
    pub n: Vec<usize>,
    pub q: Vec<f64>,
    pub m: usize,
    pub seeds: Vec<u64>,
    pub files: Vec<ProblemFiles>,
    pub out: Option<PathBuf>,
    pub format: ReportFormat,
}

/// The `(u_s, u)` pairs swept when no precision is given; residual and
/// update precisions equal `u`.
pub const DEFAULT_COMBOS: [(Format, Format); 5] = [
    (Format::Bf16, Format::Fp32),
    (Format::Fp32, Format::Fp32),
    (Format::Bf16, Format::Fp64),
    (Format::Fp32, Format::Fp64),
    (Format::Fp64, Format::Fp64),
];

pub const DEFAULT_Q: [f64; 8] = [0.1, 0.5, 1.0, 1.5, 2.0, 2.5, 3.0, 3.5];

impl RunSpec {
    /// Parses command-line arguments, the first being the program name.
    pub fn from_args<I, S>(args: I) -> std::result::Result<Self, clap::Error>
    where
        I: IntoIterator<Item = S>,
        S: Into<OsString> + Clone,
    {
        let cli = Cli::try_parse_from(args)?;
        Self::resolve(cli.command).map_err(|e| {
            clap::Error::raw(clap::error::ErrorKind::ValueValidation, format!("{e}\n"))
        })
    }

    fn resolve(cmd: Command) -> Result<Self> {
        let (mode, opts, mut files) = match cmd {
            Command::Solve { a, l, s, opts } => (Mode::Solve, opts, vec![ProblemFiles { a, l, s }]),
            Command::BenchSynthetic { opts } => (Mode::BenchSynthetic, opts, Vec::new()),
            Command::BenchFiles { problems, opts } => {
                let files = problems.iter().map(|p| ProblemFiles::parse(p)).collect::<Result<_>>()?;
                (Mode::BenchFiles, opts, files)
            }
        };
        let file = match &opts.config {
            Some(p) => ConfigFile::load(p)?,
            None => ConfigFile::default(),
        };
        if mode == Mode::BenchFiles && files.is_empty() {
            if let Some(list) = &file.problems {
                files = list.iter().map(|p| ProblemFiles::from_list(p)).collect::<Result<_>>()?;
            }
        }

        let us = opts.us.or(file.us);
        let u = opts.u.or(file.u);
        let pairs: Vec<(Format, Format)> = match (us, u) {
            (None, None) if mode == Mode::Solve => vec![(Format::Fp32, Format::Fp64)],
            (None, None) => DEFAULT_COMBOS.to_vec(),
            (us, u) => {
                let u = u.unwrap_or(Format::Fp64);
                vec![(us.unwrap_or(u), u)]
            }
        };
        let ur = opts.ur.or(file.ur);
        let uc = opts.uc.or(file.uc);
        let mut combos = Vec::new();
        for (us, u) in pairs {
            let mut c = IRConfig::new(us, u);
            c.ur = ur.unwrap_or(u);
            c.uc = uc.unwrap_or(u);
            if let Some(v) = opts.rho.or(file.rho) {
                c.rho = v;
            }
            if let Some(v) = opts.tau_scale.or(file.tau_scale) {
                c.tau_scale = v;
            }
            if let Some(v) = opts.eta_r.or(file.eta_r) {
                c.eta_r = v;
            }
            if let Some(v) = opts.eta_s_scale.or(file.eta_s_scale) {
                c.eta_s_scale = v;
            }
            if let Some(v) = opts.imax.or(file.imax) {
                c.i_max = v;
            }
            if let Some(v) = opts.kmax.or(file.kmax) {
                c.k_max = v;
            }
            c.cache_inverses = opts.cache_inverses || file.cache_inverses.unwrap_or(false);
            c.scaling = !opts.no_scaling && file.scaling.unwrap_or(true);
            c.validate()?;
            combos.push(c);
        }

        let formulations = match opts.formulation.or(file.formulation) {
            Some(f) => vec![f],
            None if mode == Mode::BenchSynthetic => vec![Formulation::Chol, Formulation::Ldlt],
            None => Vec::new(),
        };
        let m = opts.m.or(file.m).unwrap_or(3);
        if m == 0 {
            return Err(Error::InvalidConfig("m must be at least 1".into()));
        }
        let n = pick_vec(&opts.n, &file.n).unwrap_or_else(|| vec![100]);
        if n.iter().any(|&v| v < 2) {
            return Err(Error::InvalidConfig("every n must be at least 2".into()));
        }
        let q = pick_vec(&opts.q, &file.q).unwrap_or_else(|| DEFAULT_Q.to_vec());
        if q.iter().any(|v| v.is_nan() || *v < 0.0) {
            return Err(Error::InvalidConfig("q values must be nonnegative".into()));
        }
        let seeds = pick_vec(&opts.seed, &file.seed).unwrap_or_else(|| vec![1]);
        if mode == Mode::BenchFiles && files.is_empty() {
            return Err(Error::InvalidConfig("bench-files needs at least one --problem".into()));
        }
        Ok(Self {
            mode,
            formulations,
            combos,
            n,
            q,
            m,
            seeds,
            files,
            out: opts.out.or(file.out),
            format: opts.format.or(file.format).unwrap_or_default(),
        })
    }
}

/// Flag values win over the config file; an empty flag list defers to it.
fn pick_vec<T: Clone>(flag: &[T], cfg: &Option<Vec<T>>) -> Option<Vec<T>> {
    if flag.is_empty() {
        cfg.clone()
    } else {
        Some(flag.to_vec())
    }
}

/// One line of a report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub dataset: String,
    pub n: usize,
    pub m: usize,
    pub q: Option<f64>,
    pub seed: Option<u64>,
    pub formulation: String,
    pub us: Format,
    pub u: Format,
    pub ur: Format,
    pub uc: Format,
    pub res: f64,
    pub iter_total: usize,
    pub iter_max_single_call: usize,
    pub rank: usize,
    pub steps: usize,
    pub status: String,
    pub message: String,
}

impl ReportRow {
    pub fn converged(&self) -> bool {
        self.status == IRStatus::Converged.name()
    }
}

pub const REPORT_COLUMNS: [&str; 17] = [
    "dataset",
    "n",
    "m",
    "q",
    "seed",
    "formulation",
    "us",
    "u",
    "ur",
    "uc",
    "res",
    "iter_total",
    "iter_max_single_call",
    "rank",
    "steps",
    "status",
    "message",
];

enum Source {
    Synthetic { n: usize, q: f64, seed: u64 },
    File(ProblemFiles),
}

impl Source {
    fn load(&self, m: usize) -> Result<LyapunovProblem> {
        match self {
            Source::Synthetic { n, q, seed } => gen_synthetic(*n, m, *q, *seed),
            Source::File(f) => load_problem(&f.a, &f.l, f.s.as_deref()),
        }
    }

    /// Placeholder row for a problem that could not be built.
    fn error_row(&self, spec: &RunSpec, cfg: &IRConfig, err: &Error) -> ReportRow {
        let (dataset, n, q, seed) = match self {
            Source::Synthetic { n, q, seed } => (format!("synthetic_n{n}_q{q}"), *n, Some(*q), Some(*seed)),
            Source::File(f) => (f.a.display().to_string(), 0, None, None),
        };
        ReportRow {
            dataset,
            n,
            m: spec.m,
            q,
            seed,
            formulation: String::new(),
            us: cfg.us,
            u: cfg.u,
            ur: cfg.ur,
            uc: cfg.uc,
            res: f64::NAN,
            iter_total: 0,
            iter_max_single_call: 0,
            rank: 0,
            steps: 0,
            status: "error".into(),
            message: err.to_string(),
        }
    }
}

enum Job<'a> {
    Solve(&'a LyapunovProblem, Formulation, &'a IRConfig),
    Failed(&'a Source, &'a Error, &'a IRConfig),
}

fn solve_row(p: &LyapunovProblem, f: Formulation, cfg: &IRConfig) -> ReportRow {
    let outcome: Result<IRReport> = match f {
        Formulation::Chol if p.s.is_some() => Err(Error::InvalidConfig(
            "the Cholesky formulation needs W = L L^T; use ldlt for a problem with S".into(),
        )),
        Formulation::Chol => ir_chol(&p.a, &p.l, cfg).map(|(_, r)| r),
        Formulation::Ldlt => {
            let s = p.s.clone().unwrap_or_else(|| DenseMatrix::identity(p.m()));
            ir_ldlt(&p.a, &p.l, &s, cfg).map(|(_, r)| r)
        }
    };
    let mut row = ReportRow {
        dataset: p.name.clone(),
        n: p.n(),
        m: p.m(),
        q: p.q,
        seed: p.seed,
        formulation: f.name().into(),
        us: cfg.us,
        u: cfg.u,
        ur: cfg.ur,
        uc: cfg.uc,
        res: f64::NAN,
        iter_total: 0,
        iter_max_single_call: 0,
        rank: 0,
        steps: 0,
        status: "error".into(),
        message: String::new(),
    };
    match outcome {
        Ok(r) => {
            row.res = r.final_res();
            row.iter_total = r.total_newton_iterations();
            row.iter_max_single_call = r.max_newton_iterations();
            row.rank = r.final_rank();
            row.steps = r.refinement_steps();
            row.status = r.status.name().into();
            row.message = r.failure.unwrap_or_default();
        }
        Err(e) => row.message = e.to_string(),
    }
    row
}

/// Runs every solve of `spec` in parallel with rows kept in sweep order, writes the
/// report and returns the exit code.
pub fn run(spec: &RunSpec) -> i32 {
    let sources: Vec<Source> = match spec.mode {
        Mode::BenchSynthetic => {
            let mut v = Vec::new();
            for &n in &spec.n {
                for &q in &spec.q {
                    for &seed in &spec.seeds {
                        v.push(Source::Synthetic { n, q, seed });
                    }
                }
            }
            v
        }
        Mode::Solve | Mode::BenchFiles => spec.files.iter().cloned().map(Source::File).collect(),
    };
    let loaded: Vec<Result<LyapunovProblem>> = sources.par_iter().map(|s| s.load(spec.m)).collect();
    let mut jobs = Vec::new();
    for (src, p) in sources.iter().zip(&loaded) {
        match p {
            Ok(p) => {
                let forms = if spec.formulations.is_empty() {
                    vec![if p.s.is_some() { Formulation::Ldlt } else { Formulation::Chol }]
                } else {
                    spec.formulations.clone()
                };
                for f in forms {
                    jobs.extend(spec.combos.iter().map(|c| Job::Solve(p, f, c)));
                }
            }
            Err(e) => jobs.extend(spec.combos.iter().map(|c| Job::Failed(src, e, c))),
        }
    }
    // collect keeps job order, so the report does not depend on scheduling
    let rows: Vec<ReportRow> = jobs
        .par_iter()
        .map(|job| match job {
            Job::Solve(p, f, c) => solve_row(p, *f, c),
            Job::Failed(src, e, c) => src.error_row(spec, c, e),
        })
        .collect();
    if let Err(e) = emit_report(&rows, spec.format, spec.out.as_deref()) {
        eprintln!("error: writing report: {e}");
        return EXIT_USAGE;
    }
    for r in rows.iter().filter(|r| r.status == "error") {
        eprintln!("error: {}: {}", r.dataset, r.message);
    }
    exit_code(&rows)
}

pub fn exit_code(rows: &[ReportRow]) -> i32 {
    if rows.iter().any(|r| r.status == "error") {
        EXIT_USAGE
    } else if rows.iter().all(ReportRow::converged) {
        EXIT_OK
    } else {
        EXIT_UNCONVERGED
    }
}

/// Renders rows as CSV (full precision) or a markdown pipe table (`res` to
/// three significant digits, `--` rank for unconverged rows).
pub fn render_report(rows: &[ReportRow], format: ReportFormat) -> Result<String> {
    match format {
        ReportFormat::Csv => {
            let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(Vec::new());
            w.write_record(REPORT_COLUMNS).map_err(csv_err)?;
            for r in rows {
                w.serialize(r).map_err(csv_err)?;
            }
            let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
            Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
        }
        ReportFormat::Md => {
            let mut out = String::new();
            let _ = writeln!(out, "| {} |", REPORT_COLUMNS.join(" | "));
            let _ = writeln!(out, "|{}", "---|".repeat(REPORT_COLUMNS.len()));
            for r in rows {
                let opt = |v: Option<String>| v.unwrap_or_default();
                let cells = [
                    r.dataset.clone(),
                    r.n.to_string(),
                    r.m.to_string(),
                    opt(r.q.map(|v| v.to_string())),
                    opt(r.seed.map(|v| v.to_string())),
                    r.formulation.clone(),
                    r.us.to_string(),
                    r.u.to_string(),
                    r.ur.to_string(),
                    r.uc.to_string(),
                    format!("{:.2e}", r.res),
                    r.iter_total.to_string(),
                    r.iter_max_single_call.to_string(),
                    if r.converged() { r.rank.to_string() } else { "--".into() },
                    r.steps.to_string(),
                    r.status.clone(),
                    r.message.replace('|', "\\|").replace('\n', " "),
                ];
                let _ = writeln!(out, "| {} |", cells.join(" | "));
            }
            Ok(out)
        }
    }
}

fn csv_err(e: csv::Error) -> Error {
    Error::InvalidConfig(format!("csv: {e}"))
}

/// Writes the report to `path`, or to standard output when absent.
pub fn emit_report(rows: &[ReportRow], format: ReportFormat, path: Option<&Path>) -> Result<()> {
    let text = render_report(rows, format)?;
    match path {
        Some(p) => fs::write(p, text)?,
        None => std::io::stdout().write_all(text.as_bytes())?,
    }
    Ok(())
}

/// Reads rows back from CSV text.
pub fn parse_csv_report(text: &str) -> Result<Vec<ReportRow>> {
    let mut r = csv::Reader::from_reader(text.as_bytes());
    r.deserialize().map(|row| row.map_err(csv_err)).collect()
}

/// Entry point used by the binary.
pub fn main_with_args<I, S>(args: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    match RunSpec::from_args(args) {
        Ok(spec) => run(&spec),
        Err(e) => {
            let _ = e.print();
            match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => EXIT_OK,
                _ => EXIT_USAGE,
            }
        }
    }
}
