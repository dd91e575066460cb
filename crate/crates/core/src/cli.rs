//! `jsrlab` command line.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use nalgebra::DVector;

use crate::dist::MatrixDistribution;
use crate::error::{Error, Result};
use crate::jsr::{jsr_gap_report, jsr_limit_formula};
use crate::lyapunov::{
    synth_cone_norm, synth_quadratic, verify_certificate, CertificateForm, LyapunovCertificate,
    StateFunction, VerificationStatus, VerifyMode,
};
use crate::output::fmt_sig;
use crate::pradius::{p_radius_exact, p_radius_montecarlo, p_radius_sequence, SequenceRow};
use crate::simulate::{count_increases, level_set, levels_csv, simulate_stochastic, EuclideanNorm};

#[derive(Parser, Debug)]
#[command(name = "jsrlab", version, about = "p-radius, joint spectral radius and stochastic Lyapunov functions")]
pub struct Cli {
    /// Worker threads (defaults to all cores)
    #[arg(long, global = true, env = "JSRLAB_THREADS")]
    pub threads: Option<usize>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// p-radius of a distribution
    Pradius(PradiusArgs),
    /// Limit-formula sequence for the joint spectral radius of the support
    Jsr(JsrArgs),
    /// Synthesize or verify a stochastic Lyapunov function
    Lyapunov(LyapunovArgs),
    /// Simulate sample paths
    Simulate(SimulateArgs),
}

#[derive(Args, Debug)]
pub struct PradiusArgs {
    #[arg(long)]
    pub dist: PathBuf,
    /// Single degree
    #[arg(long, conflicts_with = "pmax")]
    pub p: Option<usize>,
    /// Sweep p = 1..=pmax
    #[arg(long)]
    pub pmax: Option<usize>,
    /// Use the Monte-Carlo estimator with this horizon
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long, default_value_t = 100_000)]
    pub samples: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct JsrArgs {
    #[arg(long)]
    pub dist: PathBuf,
    #[arg(long)]
    pub pmax: usize,
    /// Brute-force horizon for the gap report (finite distributions)
    #[arg(long)]
    pub kmax: Option<usize>,
    #[arg(long)]
    pub even_only: bool,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum FormArg {
    Auto,
    Quadratic,
    ConeNorm,
}

#[derive(Args, Debug)]
pub struct LyapunovArgs {
    #[arg(long)]
    pub dist: PathBuf,
    #[arg(long)]
    pub p: Option<usize>,
    #[arg(long)]
    pub gamma: Option<f64>,
    /// Quadratic for even p, cone norm for odd p under `auto`
    #[arg(long, value_enum, default_value_t = FormArg::Auto)]
    pub form: FormArg,
    /// Verify an existing certificate instead of synthesizing
    #[arg(long)]
    pub cert: Option<PathBuf>,
    /// Also run the Monte-Carlo check with this many states
    #[arg(long)]
    pub mc_states: Option<usize>,
    #[arg(long, default_value_t = 10_000)]
    pub mc_draws: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct SimulateArgs {
    #[arg(long)]
    pub dist: PathBuf,
    /// Initial state, comma separated
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    pub x0: Vec<f64>,
    #[arg(long)]
    pub steps: usize,
    #[arg(long, default_value_t = 200)]
    pub paths: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Certificates whose sample means are tracked (repeatable)
    #[arg(long)]
    pub cert: Vec<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Parses `args`, runs the command and returns the process exit code.
pub fn run<I, T>(args: I, stdout: &mut (dyn Write + Send), stderr: &mut (dyn Write + Send)) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = write!(stderr, "{}", e.render());
            return code;
        }
    };
    match execute(cli, stdout, stderr) {
        Ok(code) => code,
        Err(e) => {
            let _ = writeln!(stderr, "error: {e}");
            e.exit_code()
        }
    }
}

fn execute(cli: Cli, out: &mut (dyn Write + Send), err: &mut (dyn Write + Send)) -> Result<i32> {
    let run = |out: &mut (dyn Write + Send), err: &mut (dyn Write + Send)| match cli.command {
        Command::Pradius(a) => cmd_pradius(a, out),
        Command::Jsr(a) => cmd_jsr(a, out, err),
        Command::Lyapunov(a) => cmd_lyapunov(a, out),
        Command::Simulate(a) => cmd_simulate(a, out),
    };
    match cli.threads {
        Some(0) => Err(Error::invalid("--threads must be >= 1")),
        Some(t) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(t)
                .build()
                .map_err(|e| Error::invalid(format!("cannot start thread pool: {e}")))?;
            pool.install(|| run(out, err))
        }
        None => run(out, err),
    }
}

fn write_file(dir: &Option<PathBuf>, name: &str, contents: &str) -> Result<Option<PathBuf>> {
    let Some(dir) = dir else { return Ok(None) };
    std::fs::create_dir_all(dir)?;
    let path = dir.join(name);
    std::fs::write(&path, contents)?;
    Ok(Some(path))
}

fn load(path: &Path) -> Result<MatrixDistribution> {
    MatrixDistribution::from_path(path)
}

fn cmd_pradius(a: PradiusArgs, out: &mut (dyn Write + Send)) -> Result<i32> {
    let d = load(&a.dist)?;
    let mut csv = String::from("p,value,method,assumption\n");
    let push = |csv: &mut String, p: usize, v: &str, m: &str, s: &str| {
        let _ = writeln!(csv, "{p},{v},{m},{s}");
    };
    match (a.p, a.pmax) {
        (Some(p), _) => {
            let r = match a.k {
                Some(k) => p_radius_montecarlo(&d, p, k, a.samples, a.seed)?,
                None => p_radius_exact(&d, p)?,
            };
            push(&mut csv, p, &fmt_sig(r.value), &r.method.to_string(), &r.assumption_used.to_string());
        }
        (None, Some(pmax)) => {
            if pmax == 0 {
                return Err(Error::invalid("--pmax must be >= 1"));
            }
            let ps: Vec<usize> = (1..=pmax).collect();
            for row in p_radius_sequence(&d, &ps) {
                match row {
                    SequenceRow::Computed(r) => push(
                        &mut csv,
                        r.p,
                        &fmt_sig(r.value),
                        &r.method.to_string(),
                        &r.assumption_used.to_string(),
                    ),
                    SequenceRow::Skipped { p, reason } => {
                        push(&mut csv, p, "NA", "skipped", &reason.replace(',', ";"))
                    }
                }
            }
        }
        (None, None) => return Err(Error::invalid("one of --p or --pmax is required")),
    }
    out.write_all(csv.as_bytes())?;
    write_file(&a.out, "pradius.csv", &csv)?;
    Ok(0)
}

fn cmd_jsr(a: JsrArgs, out: &mut (dyn Write + Send), err: &mut (dyn Write + Send)) -> Result<i32> {
    let d = load(&a.dist)?;
    let even_only = a.even_only || !d.support_is_cone_invariant();
    if even_only && !a.even_only {
        writeln!(err, "note: support is not cone invariant; using even p only")?;
    }
    let table = match a.kmax {
        Some(k) => {
            if !d.is_finite() {
                return Err(Error::invalid("--kmax needs a finite distribution"));
            }
            let g = jsr_gap_report(&d, a.pmax, k)?;
            writeln!(
                err,
                "brute force k={k}: lower {} upper {}{} residual {}",
                fmt_sig(g.bounds.lower),
                fmt_sig(g.bounds.upper),
                if g.bounds.upper_certified { "" } else { " (pruned, not certified)" },
                fmt_sig(g.residual)
            )?;
            g.table
        }
        None => jsr_limit_formula(&d, a.pmax, even_only)?,
    };
    if table.heuristic {
        writeln!(err, "heuristic: outside stated assumptions")?;
    }
    let csv = table.to_csv();
    out.write_all(csv.as_bytes())?;
    write_file(&a.out, "jsr.csv", &csv)?;
    Ok(0)
}

fn cmd_lyapunov(a: LyapunovArgs, out: &mut (dyn Write + Send)) -> Result<i32> {
    let d = load(&a.dist)?;
    let cert = match &a.cert {
        Some(path) => LyapunovCertificate::from_path(path)?,
        None => {
            let p = a.p.ok_or_else(|| Error::invalid("--p is required when synthesizing"))?;
            let gamma = a
                .gamma
                .ok_or_else(|| Error::invalid("--gamma is required when synthesizing"))?;
            let quadratic = match a.form {
                FormArg::Auto => p % 2 == 0,
                FormArg::Quadratic => true,
                FormArg::ConeNorm => false,
            };
            if quadratic {
                synth_quadratic(&d, p, gamma)?
            } else {
                synth_cone_norm(&d, p, gamma)?
            }
        }
    };
    let report = verify_certificate(&d, &cert, VerifyMode::Exact)?;
    let mut text = String::new();
    let form = match cert.form() {
        CertificateForm::Quadratic { .. } => "quadratic",
        CertificateForm::ConeNorm { .. } => "cone_norm",
    };
    let _ = writeln!(text, "form: {form}");
    let _ = writeln!(text, "degree: {}", cert.degree());
    let _ = writeln!(text, "gamma: {}", fmt_sig(cert.gamma()));
    let _ = writeln!(text, "lifted: {}", cert.is_lifted());
    match cert.form() {
        CertificateForm::Quadratic { h } => {
            let _ = writeln!(text, "lambda_min(H): {}", fmt_sig(h.min_eigenvalue()));
            let _ = writeln!(text, "lambda_max(H): {}", fmt_sig(h.max_eigenvalue()));
        }
        CertificateForm::ConeNorm { g } => {
            let gs: Vec<String> = g.as_vector().iter().map(|v| fmt_sig(*v)).collect();
            let _ = writeln!(text, "g: {}", gs.join(","));
        }
    }
    if let Some(r) = report.residual {
        let _ = writeln!(text, "residual: {}", fmt_sig(r));
    }
    let _ = writeln!(text, "C1: {}", fmt_sig(report.c1));
    let _ = writeln!(text, "C2: {}", fmt_sig(report.c2));
    let _ = writeln!(text, "exact: {:?}", report.status);
    let mut status = report.status;
    if let Some(n_x) = a.mc_states {
        let mc = verify_certificate(
            &d,
            &cert,
            VerifyMode::MonteCarlo {
                n_x,
                n_a: a.mc_draws,
                seed: a.seed,
            },
        )?;
        let _ = writeln!(
            text,
            "montecarlo: {:?} max_ratio {} se {} target {}",
            mc.status,
            fmt_sig(mc.max_ratio.unwrap_or(f64::NAN)),
            fmt_sig(mc.max_ratio_se.unwrap_or(f64::NAN)),
            fmt_sig(mc.target)
        );
        if mc.status == VerificationStatus::Fail {
            status = VerificationStatus::Fail;
        }
    }
    if a.cert.is_none() {
        if let Some(path) = write_file(&a.out, "certificate.json", &(cert.to_json_string() + "\n"))? {
            let _ = writeln!(text, "certificate: {}", path.display());
        }
    }
    out.write_all(text.as_bytes())?;
    Ok(if status == VerificationStatus::Fail { 2 } else { 0 })
}

fn cmd_simulate(a: SimulateArgs, out: &mut (dyn Write + Send)) -> Result<i32> {
    let d = load(&a.dist)?;
    let x0 = DVector::from_vec(a.x0.clone());
    let certs = a
        .cert
        .iter()
        .map(LyapunovCertificate::from_path)
        .collect::<Result<Vec<_>>>()?;
    let evals: Vec<&dyn StateFunction> = certs.iter().map(|c| c as &dyn StateFunction).collect();
    let e = simulate_stochastic(&d, &x0, a.steps, a.paths, a.seed, &evals)?;

    write_file(&a.out, "paths.csv", &e.paths_csv())?;
    write_file(&a.out, "stats.csv", &e.stats_csv())?;
    if d.dim() == 2 {
        let euclid = EuclideanNorm(2);
        let mut levels = vec![(0, x0.norm(), level_set(&euclid, x0.norm(), 256)?)];
        for (i, f) in evals.iter().enumerate() {
            let c = f.eval(&x0);
            if c > 0.0 {
                levels.push((i + 1, c, level_set(*f, c, 256)?));
            }
        }
        write_file(&a.out, "levels.csv", &levels_csv(&levels))?;
    }

    let mut text = format!(
        "increasing steps: mean_norm {}",
        count_increases(&e.mean_norm)
    );
    for (i, v) in e.mean_v.iter().enumerate() {
        let _ = write!(text, ", mean_V_{} {}", i + 1, count_increases(v));
    }
    text.push('\n');
    let _ = writeln!(text, "final mean_norm: {}", fmt_sig(e.mean_norm[a.steps]));
    out.write_all(text.as_bytes())?;
    if a.out.is_none() {
        out.write_all(e.stats_csv().as_bytes())?;
    }
    Ok(0)
}
