//! `ualangevin`: experiment presets, sweeps and the verification suite from the command line.

mod config;

use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use config::ConfigFile;
use ualangevin::mc::{self, ExperimentConfig, OrthRow, SweepRow, TestFunction};
use ualangevin::{oracle, Error, NoiseKind, Result, SchemeId};

#[derive(Parser, Debug)]
#[command(name = "ualangevin", version, about = "Uniformly accurate Langevin integrators near manifolds")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// One Monte Carlo estimate of E[φ(X_N)]
    Simulate(RunArgs),
    /// Weak error of each scheme against the UA reference over an ε grid
    SweepEps(RunArgs),
    /// Weak error of each scheme against the UA reference over a timestep grid
    SweepH(RunArgs),
    /// max_n |ζ(X_n)| of the UA scheme over an ε grid, with its log-log slope
    ZetaDecay(RunArgs),
    /// Coupled-noise gap between UA and constrained Euler over an ε grid
    StrongGap(RunArgs),
    /// Invariant-measure errors on the torus over ε ∈ {2⁰..2⁻¹⁶}
    Invariant(RunArgs),
    /// J(m) = E[Tr X_T] on O(m) by UA and constrained Euler
    TableOrth(RunArgs),
    /// Deterministic identity and oracle suites
    Check(RunArgs),
}

#[derive(Args, Debug, Clone, Default)]
struct RunArgs {
    /// key = value file with [experiment], [sweep] and [run] sections
    #[arg(long)]
    config: Option<PathBuf>,
    /// torus | orth
    #[arg(long)]
    preset: Option<String>,
    /// Matrix size for the orth preset
    #[arg(long)]
    m: Option<usize>,
    #[arg(long)]
    h: Option<f64>,
    /// h = 2^-k · T
    #[arg(long, allow_hyphen_values = true)]
    h_exp: Option<i32>,
    #[arg(long)]
    h_ref: Option<f64>,
    /// h_ref = 2^-k · T
    #[arg(long)]
    h_ref_exp: Option<i32>,
    #[arg(long)]
    eps: Option<f64>,
    #[arg(long)]
    t_final: Option<f64>,
    /// Number of trajectories M
    #[arg(long)]
    traj: Option<usize>,
    #[arg(long)]
    sigma: Option<f64>,
    /// euler-rd | euler-constrained | euler-constrained-implicit | ua | ua-implicit | ua-expansion
    #[arg(long)]
    scheme: Option<String>,
    /// abs2 | trace
    #[arg(long)]
    test_fn: Option<String>,
    /// discrete | gaussian
    #[arg(long)]
    noise: Option<String>,
    #[arg(long)]
    tol: Option<f64>,
    #[arg(long)]
    max_iter: Option<usize>,
    /// Comma-separated initial state
    #[arg(long, allow_hyphen_values = true)]
    x0: Option<String>,
    /// Comma-separated ε values (overrides the default grid)
    #[arg(long)]
    eps_list: Option<String>,
    /// ε grid 2⁰..2^-k
    #[arg(long)]
    eps_exp_max: Option<i32>,
    /// Comma-separated k for h = 2^-k · T
    #[arg(long)]
    h_exps: Option<String>,
    /// Comma-separated scheme names
    #[arg(long)]
    schemes: Option<String>,
    /// Comma-separated matrix sizes for table-orth
    #[arg(long)]
    m_list: Option<String>,
    /// Defaults to $LANGEVIN_SEED, then 0
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads (default: available parallelism)
    #[arg(long)]
    threads: Option<usize>,
    /// CSV destination (default: stdout)
    #[arg(long, short)]
    output: Option<PathBuf>,
}

/// Everything a subcommand needs after flags, file and environment are merged.
#[derive(Debug, Clone)]
struct RunManifest {
    subcommand: &'static str,
    preset: String,
    config: ExperimentConfig,
    eps_list: Vec<f64>,
    h_list: Vec<f64>,
    schemes: Vec<SchemeId>,
    m_list: Vec<usize>,
    threads: Option<usize>,
    output: Option<PathBuf>,
}

fn pick<T: std::str::FromStr>(flag: Option<T>, file: &ConfigFile, key: &str) -> Result<Option<T>>
where
    T::Err: std::fmt::Display,
{
    match flag {
        Some(v) => Ok(Some(v)),
        None => file.get(key),
    }
}

fn parse_list<T: std::str::FromStr>(key: &str, s: &str) -> Result<Vec<T>>
where
    T::Err: std::fmt::Display,
{
    s.split(',')
        .map(str::trim)
        .filter(|p| !p.is_empty())
        .map(|p| p.parse::<T>().map_err(|e| Error::config(key, format!("cannot parse `{p}`: {e}"))))
        .collect()
}

fn parse_named<T: std::str::FromStr<Err = String>>(key: &str, s: &str) -> Result<T> {
    s.parse::<T>().map_err(|e| Error::config(key, e))
}

fn default_seed() -> Result<u64> {
    match std::env::var("LANGEVIN_SEED") {
        Ok(v) => v
            .trim()
            .parse()
            .map_err(|e| Error::config("LANGEVIN_SEED", format!("cannot parse `{v}`: {e}"))),
        Err(_) => Ok(0),
    }
}

fn pow2_times(t: f64, k: i32) -> f64 {
    t * 2f64.powi(-k)
}

impl RunManifest {
    fn resolve(subcommand: &'static str, a: &RunArgs) -> Result<Self> {
        let file = match &a.config {
            Some(p) => ConfigFile::load(p)?,
            None => ConfigFile::default(),
        };
        let default_preset = if subcommand == "table-orth" { "orth" } else { "torus" };
        let preset = pick(a.preset.clone(), &file, "preset")?.unwrap_or_else(|| default_preset.to_string());
        let m = pick(a.m, &file, "m")?;
        let mut c = match preset.as_str() {
            "torus" => ExperimentConfig::torus(),
            "orth" | "orthogonal" => ExperimentConfig::orthogonal(m.unwrap_or(2)),
            other => return Err(Error::config("preset", format!("unknown preset `{other}` (expected torus|orth)"))),
        };
        if let Some(t) = pick(a.t_final, &file, "t_final")? {
            c.t_final = t;
        }
        match (pick(a.h, &file, "h")?, pick(a.h_exp, &file, "h_exp")?) {
            (Some(_), Some(_)) => return Err(Error::config("h", "give either h or h_exp, not both")),
            (Some(h), None) => c.h = h,
            (None, Some(k)) => c.h = pow2_times(c.t_final, k),
            (None, None) => {}
        }
        match (pick(a.h_ref, &file, "h_ref")?, pick(a.h_ref_exp, &file, "h_ref_exp")?) {
            (Some(_), Some(_)) => return Err(Error::config("h_ref", "give either h_ref or h_ref_exp, not both")),
            (Some(h), None) => c.h_ref = h,
            (None, Some(k)) => c.h_ref = pow2_times(c.t_final, k),
            (None, None) => {}
        }
        if let Some(v) = pick(a.eps, &file, "eps")? {
            c.eps = v;
        }
        if let Some(v) = pick(a.traj, &file, "traj")? {
            c.trajectories = v;
        }
        if let Some(v) = pick(a.sigma, &file, "sigma")? {
            c.sigma = v;
        }
        if let Some(v) = pick(a.scheme.clone(), &file, "scheme")? {
            c.scheme = parse_named("scheme", &v)?;
        }
        if let Some(v) = pick(a.test_fn.clone(), &file, "test_fn")? {
            c.test_fn = parse_named::<TestFunction>("test_fn", &v)?;
        }
        if let Some(v) = pick(a.noise.clone(), &file, "noise")? {
            c.noise = parse_named::<NoiseKind>("noise", &v)?;
        }
        if let Some(v) = pick(a.tol, &file, "tol")? {
            c.tol = v;
        }
        if let Some(v) = pick(a.max_iter, &file, "max_iter")? {
            c.max_iter = v;
        }
        if let Some(v) = pick(a.x0.clone(), &file, "x0")? {
            c.x0 = parse_list("x0", &v)?;
        }
        c.seed = match pick(a.seed, &file, "seed")? {
            Some(s) => s,
            None => default_seed()?,
        };

        let eps_list = match pick(a.eps_list.clone(), &file, "eps_list")? {
            Some(s) => parse_list("eps_list", &s)?,
            None => match subcommand {
                "zeta-decay" | "strong-gap" => (2..=7).map(|k| 10f64.powi(-k)).collect(),
                _ => {
                    let default_max = if subcommand == "invariant" { 16 } else { 20 };
                    mc::pow2_grid(pick(a.eps_exp_max, &file, "eps_exp_max")?.unwrap_or(default_max))
                }
            },
        };
        let h_list = match pick(a.h_exps.clone(), &file, "h_exps")? {
            Some(s) => parse_list::<i32>("h_exps", &s)?
                .into_iter()
                .map(|k| pow2_times(c.t_final, k))
                .collect(),
            None => (6..=9).map(|k| pow2_times(c.t_final, k)).collect(),
        };
        let schemes = match pick(a.schemes.clone(), &file, "schemes")? {
            Some(s) => s
                .split(',')
                .map(|p| parse_named::<SchemeId>("schemes", p.trim()))
                .collect::<Result<_>>()?,
            None => vec![SchemeId::Ua, SchemeId::EulerConstrained, SchemeId::EulerRd],
        };
        let m_list = match pick(a.m_list.clone(), &file, "m_list")? {
            Some(s) => parse_list("m_list", &s)?,
            None => vec![m.unwrap_or(2)],
        };
        if m_list.iter().any(|&m| m < 2) {
            return Err(Error::config("m_list", "matrix sizes must be at least 2"));
        }
        let threads = pick(a.threads, &file, "threads")?;
        if threads == Some(0) {
            return Err(Error::config("threads", "need at least one worker"));
        }
        let output = pick(a.output.clone(), &file, "output")?;
        if eps_list.iter().any(|e| !(*e > 0.0)) {
            return Err(Error::config("eps_list", "every ε must be positive"));
        }
        if subcommand != "check" {
            c.validate()?;
        }
        Ok(Self {
            subcommand,
            preset,
            config: c,
            eps_list,
            h_list,
            schemes,
            m_list,
            threads,
            output,
        })
    }

    /// `#` lines recording everything that determines the numbers in the file.
    fn header(&self) -> Vec<String> {
        let c = &self.config;
        let list = |v: &[f64]| v.iter().map(|x| num(*x)).collect::<Vec<_>>().join(",");
        let mut lines = vec![
            format!("ualangevin {}", env!("CARGO_PKG_VERSION")),
            format!("subcommand = {}", self.subcommand),
            format!("preset = {}", self.preset),
            format!("manifold = {:?}", c.manifold),
            format!("force = {:?}", c.force),
            format!("x0 = {}", list(&c.x0)),
            format!("sigma = {}", num(c.sigma)),
            format!("t_final = {}", num(c.t_final)),
            format!("h = {}", num(c.h)),
            format!("h_ref = {}", num(c.h_ref)),
            format!("eps = {}", num(c.eps)),
            format!("traj = {}", c.trajectories),
            format!("scheme = {}", c.scheme),
            format!("test_fn = {}", c.test_fn),
            format!("noise = {}", c.noise),
            format!("tol = {}", num(c.tol)),
            format!("max_iter = {}", c.max_iter),
            format!("seed = {}", c.seed),
        ];
        match self.subcommand {
            "sweep-eps" | "invariant" | "zeta-decay" | "strong-gap" => {
                lines.push(format!("eps_list = {}", list(&self.eps_list)))
            }
            "sweep-h" => lines.push(format!("h_list = {}", list(&self.h_list))),
            "table-orth" => lines.push(format!(
                "m_list = {}",
                self.m_list.iter().map(|m| m.to_string()).collect::<Vec<_>>().join(",")
            )),
            _ => {}
        }
        if matches!(self.subcommand, "sweep-eps" | "sweep-h" | "invariant") {
            let names: Vec<&str> = self.schemes.iter().map(|s| s.as_str()).collect();
            lines.push(format!("schemes = {}", names.join(",")));
        }
        lines
    }
}

/// 17 significant digits, enough to round-trip any f64.
fn num(v: f64) -> String {
    if v.is_nan() {
        "NaN".into()
    } else if v.is_infinite() {
        if v > 0.0 { "inf" } else { "-inf" }.into()
    } else {
        format!("{v:.16e}")
    }
}

/// Every field is numeric or a scheme name, so no quoting is ever needed.
struct CsvSink {
    out: Box<dyn Write>,
}

fn io_err(e: impl std::fmt::Display) -> Error {
    Error::config("output", e.to_string())
}

impl CsvSink {
    fn open(manifest: &RunManifest, columns: &[&str]) -> Result<Self> {
        let mut out: Box<dyn Write> = match &manifest.output {
            Some(p) => Box::new(std::io::BufWriter::new(std::fs::File::create(p).map_err(|e| {
                Error::config("output", format!("cannot create {}: {e}", p.display()))
            })?)),
            None => Box::new(std::io::stdout()),
        };
        for line in manifest.header() {
            writeln!(out, "# {line}").map_err(io_err)?;
        }
        writeln!(out, "{}", columns.join(",")).map_err(io_err)?;
        out.flush().map_err(io_err)?;
        Ok(Self { out })
    }

    /// Rows are flushed one by one so an interrupted sweep keeps what it finished.
    fn row(&mut self, fields: &[String]) -> Result<()> {
        writeln!(self.out, "{}", fields.join(",")).map_err(io_err)?;
        self.out.flush().map_err(io_err)
    }

    fn comment(&mut self, line: &str) -> Result<()> {
        writeln!(self.out, "# {line}").map_err(io_err)?;
        self.out.flush().map_err(io_err)
    }
}

const SWEEP_COLUMNS: [&str; 10] = [
    "eps",
    "h",
    "scheme",
    "estimate",
    "stderr",
    "error_vs_ref",
    "M",
    "mean_fp_iters",
    "diverged",
    "wall_s",
];

fn sweep_fields(r: &SweepRow) -> Vec<String> {
    vec![
        num(r.eps),
        num(r.h),
        r.scheme.to_string(),
        num(r.estimate),
        num(r.stderr),
        num(r.error_vs_ref),
        r.trajectories.to_string(),
        num(r.mean_fp_iters),
        r.diverged.to_string(),
        num(r.wall_s),
    ]
}

fn orth_fields(r: &OrthRow) -> Vec<String> {
    vec![
        r.m.to_string(),
        r.dim.to_string(),
        r.codim.to_string(),
        num(r.j_ref),
        num(r.j_ua),
        num(r.err_ua),
        num(r.j_ec),
        num(r.err_ec),
    ]
}

fn run(manifest: &RunManifest) -> Result<bool> {
    let c = &manifest.config;
    match manifest.subcommand {
        "simulate" => {
            let mut sink = CsvSink::open(manifest, &SWEEP_COLUMNS)?;
            let r = mc::weak_estimate(c)?;
            let row = SweepRow {
                eps: c.eps,
                h: c.h,
                scheme: c.scheme,
                estimate: r.mean,
                stderr: r.stderr,
                reference: f64::NAN,
                reference_stderr: f64::NAN,
                error_vs_ref: f64::NAN,
                trajectories: r.trajectories,
                mean_fp_iters: r.mean_iterations,
                diverged: r.lost(),
                wall_s: r.wall_s,
            };
            sink.row(&sweep_fields(&row))?;
        }
        "sweep-eps" | "invariant" => {
            let mut sink = CsvSink::open(manifest, &SWEEP_COLUMNS)?;
            mc::sweep_eps(c, &manifest.eps_list, &manifest.schemes, |r| sink.row(&sweep_fields(r)))?;
        }
        "sweep-h" => {
            let mut sink = CsvSink::open(manifest, &SWEEP_COLUMNS)?;
            mc::sweep_h(c, &manifest.h_list, &manifest.schemes, |r| sink.row(&sweep_fields(r)))?;
        }
        "zeta-decay" => {
            let mut sink = CsvSink::open(manifest, &["eps", "mean_max_abs_zeta"])?;
            let fit = mc::zeta_decay_vs_eps(c, &manifest.eps_list)?;
            for (e, z) in &fit.points {
                sink.row(&[num(*e), num(*z)])?;
            }
            sink.comment(&format!("slope = {}, intercept = {}", num(fit.slope), num(fit.intercept)))?;
            eprintln!("log-log slope {:.4}", fit.slope);
        }
        "strong-gap" => {
            let mut sink = CsvSink::open(manifest, &["eps", "mean_sq_final_gap", "mean_max_gap", "max_max_gap", "M"])?;
            let gaps = mc::gap_vs_eps(c, &manifest.eps_list)?;
            for g in &gaps {
                sink.row(&[
                    num(g.eps),
                    num(g.mean_sq_final),
                    num(g.mean_max),
                    num(g.max_max),
                    g.trajectories.to_string(),
                ])?;
            }
            let fit = mc::fit_loglog(&gaps.iter().map(|g| (g.eps, g.mean_sq_final)).collect::<Vec<_>>())?;
            sink.comment(&format!("slope of mean_sq_final_gap = {}", num(fit.slope)))?;
            eprintln!("log-log slope of E|X^eps - X^0|^2: {:.4}", fit.slope);
        }
        "table-orth" => {
            let mut sink = CsvSink::open(manifest, &["m", "dim", "codim", "J_ref", "J_ua", "err_ua", "J_ec", "err_ec"])?;
            mc::orth_group_table(&manifest.m_list, c, |r| sink.row(&orth_fields(r)))?;
        }
        "check" => {
            let mut ok = true;
            let mut failed = Vec::new();
            for r in oracle::check_suite(c.seed) {
                println!("{} {}: {}", if r.passed { "PASS" } else { "FAIL" }, r.name, r.detail);
                if !r.passed {
                    ok = false;
                    failed.push(r.name);
                }
            }
            if !ok {
                eprintln!("check failed: {}", failed.join(", "));
            }
            return Ok(ok);
        }
        other => unreachable!("unknown subcommand {other}"),
    }
    Ok(true)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (name, args) = match &cli.command {
        Command::Simulate(a) => ("simulate", a),
        Command::SweepEps(a) => ("sweep-eps", a),
        Command::SweepH(a) => ("sweep-h", a),
        Command::ZetaDecay(a) => ("zeta-decay", a),
        Command::StrongGap(a) => ("strong-gap", a),
        Command::Invariant(a) => ("invariant", a),
        Command::TableOrth(a) => ("table-orth", a),
        Command::Check(a) => ("check", a),
    };
    let manifest = match RunManifest::resolve(name, args) {
        Ok(m) => m,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    };
    let result = match manifest.threads {
        Some(n) => match rayon::ThreadPoolBuilder::new().num_threads(n).build() {
            Ok(pool) => pool.install(|| run(&manifest)),
            Err(e) => Err(Error::config("threads", e.to_string())),
        },
        None => run(&manifest),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
