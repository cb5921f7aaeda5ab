//! Command-line interface: subcommands, report rendering, exit codes.
//!
//! Every command is deterministic given its flags and seed; JSON is the
//! default output format and tables are opt-in. The parallelism used by the
//! simulation kernel can be capped with the `GAMMA_GUARD_THREADS`
//! environment variable.

use crate::archspec::{build_canonical, parse_arch, ArchError, ArchSpec, CanonicalName};
use crate::classify::{make_plan, DecayPolicy, PlanError};
use crate::efflr::{
    update_norm_experiment, EfflrError, RegressionFit, ScalePoint, DEFAULT_ETA,
};
use crate::simkernel::{compare_profiles, mc_variance_profile, McConfig, ProfileComparison, SimError};
use crate::varprop::{dominance_check, full_profile, ProfileExport, ProfileSource, VarianceError};
use clap::error::ErrorKind;
use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;
use std::ffi::OsString;
use std::path::{Path, PathBuf};
use std::sync::Once;

/// Process exit codes: 0 success, 1 input or validation error, 2 a check or
/// threshold failed, 3 internal error.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExitStatus {
    Success = 0,
    InputError = 1,
    CheckFailed = 2,
    Internal = 3,
}

impl ExitStatus {
    pub fn code(self) -> u8 {
        self as u8
    }
}

/// Captured result of one command invocation.
#[derive(Debug, Clone, PartialEq)]
pub struct CmdOutput {
    pub stdout: String,
    pub stderr: String,
    pub status: ExitStatus,
}

impl CmdOutput {
    fn ok(stdout: String) -> Self {
        CmdOutput {
            stdout,
            stderr: String::new(),
            status: ExitStatus::Success,
        }
    }
}

struct Failure {
    status: ExitStatus,
    message: String,
}

impl Failure {
    fn input(message: impl Into<String>) -> Self {
        Failure {
            status: ExitStatus::InputError,
            message: message.into(),
        }
    }
}

macro_rules! input_failure_from {
    ($($ty:ty),*) => {$(
        impl From<$ty> for Failure {
            fn from(e: $ty) -> Self {
                Failure::input(e.to_string())
            }
        }
    )*};
}

input_failure_from!(ArchError, PlanError, VarianceError, SimError, EfflrError);

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Format {
    Json,
    Table,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum PolicyArg {
    /// Decay gamma_last and gamma_others only.
    Guidelines,
    /// Decay every gamma.
    All,
    /// Decay no gamma.
    WeightsOnly,
}

impl From<PolicyArg> for DecayPolicy {
    fn from(p: PolicyArg) -> Self {
        match p {
            PolicyArg::Guidelines => DecayPolicy::Guidelines,
            PolicyArg::All => DecayPolicy::AllParams,
            PolicyArg::WeightsOnly => DecayPolicy::WeightsOnly,
        }
    }
}

#[derive(Parser)]
#[command(
    name = "gamma-guard",
    version,
    about = "Role-aware L2 decay plans and variance diagnostics for normalization scales"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Write a canonical architecture file.
    Gen {
        /// resnet18|resnet34|resnet50|resnet101|resnet152|preact18|preact50|txstackN
        name: String,
        /// Initial value for every gamma.
        #[arg(long, default_value_t = 1.0)]
        gamma: f64,
        /// Output path.
        #[arg(short, long)]
        out: PathBuf,
    },
    /// Emit the per-parameter decay plan for an architecture file.
    Plan {
        arch: PathBuf,
        /// L2 coefficient recorded in the plan.
        #[arg(long, default_value_t = 1e-4)]
        lambda: f64,
        #[arg(long, value_enum, default_value_t = PolicyArg::Guidelines)]
        policy: PolicyArg,
        #[arg(long, value_enum, default_value_t = Format::Json)]
        format: Format,
    },
    /// Analytic variance profile with per-block dominance flags.
    Varprop {
        arch: PathBuf,
        #[arg(long, value_enum, default_value_t = Format::Json)]
        format: Format,
    },
    /// Measure the empirical profile and compare it to the analytic one.
    Simulate {
        arch: PathBuf,
        #[arg(long, default_value_t = 8192)]
        batch: usize,
        #[arg(long, default_value_t = 8)]
        trials: usize,
        /// Simulation width; defaults to the width of the architecture file.
        #[arg(long)]
        width: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Exit with status 2 when the max relative error exceeds this.
        #[arg(long, default_value_t = 0.15)]
        threshold: f64,
        #[arg(long, value_enum, default_value_t = Format::Json)]
        format: Format,
    },
    /// First-update norm of the gamma direction across initial scales.
    Efflr {
        #[arg(long, value_delimiter = ',', default_value = "0.5,1,2,4,8")]
        scales: Vec<f64>,
        #[arg(long, default_value_t = 64)]
        width: usize,
        #[arg(long, default_value_t = 1024)]
        batch: usize,
        #[arg(long, default_value_t = DEFAULT_ETA)]
        eta: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, value_enum, default_value_t = Format::Json)]
        format: Format,
    },
    /// Run the built-in acceptance checks; optionally include an
    /// architecture file in the run.
    Verify {
        arch: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn init_thread_pool() {
    static INIT: Once = Once::new();
    INIT.call_once(|| {
        if let Some(n) = std::env::var("GAMMA_GUARD_THREADS")
            .ok()
            .and_then(|s| s.parse::<usize>().ok())
            .filter(|&n| n > 0)
        {
            // Ignore the error if a global pool already exists.
            let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
        }
    });
}

/// Parse `args` (argv[0] included) and execute. Never panics on bad input;
/// all user-visible output is captured in the returned [`CmdOutput`].
pub fn run<I, T>(args: I) -> CmdOutput
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    init_thread_pool();
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let rendered = e.render().to_string();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => CmdOutput {
                    stdout: rendered,
                    stderr: String::new(),
                    status: ExitStatus::Success,
                },
                _ => CmdOutput {
                    stdout: String::new(),
                    stderr: rendered,
                    status: ExitStatus::InputError,
                },
            };
        }
    };
    match dispatch(cli.cmd) {
        Ok(out) => out,
        Err(f) => CmdOutput {
            stdout: String::new(),
            stderr: format!("error: {}\n", f.message),
            status: f.status,
        },
    }
}

fn load_arch(path: &Path) -> Result<ArchSpec, Failure> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Failure::input(format!("cannot read {}: {e}", path.display())))?;
    Ok(parse_arch(&text)?)
}

fn dispatch(cmd: Cmd) -> Result<CmdOutput, Failure> {
    match cmd {
        Cmd::Gen { name, gamma, out } => cmd_gen(&name, gamma, &out),
        Cmd::Plan {
            arch,
            lambda,
            policy,
            format,
        } => cmd_plan(&arch, lambda, policy, format),
        Cmd::Varprop { arch, format } => cmd_varprop(&arch, format),
        Cmd::Simulate {
            arch,
            batch,
            trials,
            width,
            seed,
            threshold,
            format,
        } => cmd_simulate(&arch, batch, trials, width, seed, threshold, format),
        Cmd::Efflr {
            scales,
            width,
            batch,
            eta,
            seed,
            format,
        } => cmd_efflr(&scales, width, batch, eta, seed, format),
        Cmd::Verify { arch, seed } => cmd_verify(arch.as_deref(), seed),
    }
}

fn cmd_gen(name: &str, gamma: f64, out: &Path) -> Result<CmdOutput, Failure> {
    let name: CanonicalName = name.parse()?;
    if !gamma.is_finite() || gamma <= 0.0 {
        return Err(Failure::input(format!("--gamma must be positive, got {gamma}")));
    }
    let spec = build_canonical(name, gamma);
    std::fs::write(out, crate::archspec::serialize(&spec))
        .map_err(|e| Failure::input(format!("cannot write {}: {e}", out.display())))?;
    Ok(CmdOutput::ok(format!("{}\n", out.display())))
}

fn cmd_plan(
    arch: &Path,
    lambda: f64,
    policy: PolicyArg,
    format: Format,
) -> Result<CmdOutput, Failure> {
    let spec = load_arch(arch)?;
    let plan = make_plan(&spec, lambda, &policy.into())?;
    let text = match format {
        Format::Json => format!("{}\n", plan.to_json()),
        Format::Table => plan.render_table(),
    };
    Ok(CmdOutput::ok(text))
}

#[derive(Serialize)]
struct VarpropRow {
    stage: usize,
    block: usize,
    skip_var: f64,
    branch_var: f64,
    out_var: f64,
    dominant: bool,
}

#[derive(Serialize)]
struct VarpropReport {
    source: ProfileSource,
    rows: Vec<VarpropRow>,
}

fn cmd_varprop(arch: &Path, format: Format) -> Result<CmdOutput, Failure> {
    let spec = load_arch(arch)?;
    let profile = full_profile(&spec)?;
    let text = match format {
        Format::Json => {
            let dominant = dominance_check(&profile);
            let rows = profile
                .positions
                .iter()
                .enumerate()
                .map(|(i, &(stage, block))| VarpropRow {
                    stage,
                    block,
                    skip_var: profile.skip_var[i],
                    branch_var: profile.branch_var[i],
                    out_var: profile.out_var[i],
                    dominant: dominant[i],
                })
                .collect();
            let report = VarpropReport {
                source: profile.source,
                rows,
            };
            format!("{}\n", crate::jsonfmt::to_string_pretty(&report))
        }
        Format::Table => profile.render_table(),
    };
    Ok(CmdOutput::ok(text))
}

#[derive(Serialize)]
struct SimulateReport {
    seed: u64,
    batch: usize,
    width: usize,
    trials: usize,
    threshold: f64,
    analytic: ProfileExport,
    empirical: ProfileExport,
    comparison: ProfileComparison,
    pass: bool,
}

fn cmd_simulate(
    arch: &Path,
    batch: usize,
    trials: usize,
    width: Option<usize>,
    seed: u64,
    threshold: f64,
    format: Format,
) -> Result<CmdOutput, Failure> {
    let spec = load_arch(arch)?;
    if trials == 0 {
        return Err(Failure::input("--trials must be at least 1"));
    }
    if !threshold.is_finite() || threshold < 0.0 {
        return Err(Failure::input(format!(
            "--threshold must be nonnegative, got {threshold}"
        )));
    }
    let width = width.unwrap_or(spec.width);
    if width < 2 {
        return Err(Failure::input("--width must be at least 2"));
    }
    let cfg = McConfig {
        batch,
        width,
        trials,
        seed,
    };
    let analytic = full_profile(&spec)?;
    let empirical = mc_variance_profile(&spec, &cfg)?;
    let comparison = compare_profiles(&analytic, &empirical).expect("positions match");
    let pass = comparison.max_rel_err <= threshold;
    let text = match format {
        Format::Json => {
            let report = SimulateReport {
                seed,
                batch,
                width,
                trials,
                threshold,
                analytic: analytic.export(),
                empirical: empirical.export(),
                comparison: comparison.clone(),
                pass,
            };
            format!("{}\n", crate::jsonfmt::to_string_pretty(&report))
        }
        Format::Table => format!(
            "seed {seed}  batch {batch}  width {width}  trials {trials}\n\nanalytic:\n{}\nempirical:\n{}\nmax rel err {:.6}  mean rel err {:.6}  threshold {threshold}  {}\n",
            analytic.render_table(),
            empirical.render_table(),
            comparison.max_rel_err,
            comparison.mean_rel_err,
            if pass { "PASS" } else { "FAIL" },
        ),
    };
    Ok(CmdOutput {
        stdout: text,
        stderr: String::new(),
        status: if pass {
            ExitStatus::Success
        } else {
            ExitStatus::CheckFailed
        },
    })
}

#[derive(Serialize)]
struct EfflrReport {
    seed: u64,
    eta: f64,
    width: usize,
    batch: usize,
    points: Vec<ScalePoint>,
    fit: RegressionFit,
    slope_in_range: bool,
}

const EXPECTED_SLOPE: (f64, f64) = (-2.2, -1.8);

fn cmd_efflr(
    scales: &[f64],
    width: usize,
    batch: usize,
    eta: f64,
    seed: u64,
    format: Format,
) -> Result<CmdOutput, Failure> {
    if !eta.is_finite() || eta <= 0.0 {
        return Err(Failure::input(format!("--eta must be positive, got {eta}")));
    }
    if width < 2 || batch < 2 {
        return Err(Failure::input("--width and --batch must be at least 2"));
    }
    let exp = update_norm_experiment(scales, width, batch, eta, seed)?;
    let slope_in_range = exp.fit.slope >= EXPECTED_SLOPE.0 && exp.fit.slope <= EXPECTED_SLOPE.1;
    let text = match format {
        Format::Json => {
            let report = EfflrReport {
                seed,
                eta,
                width,
                batch,
                points: exp.points.clone(),
                fit: exp.fit,
                slope_in_range,
            };
            format!("{}\n", crate::jsonfmt::to_string_pretty(&report))
        }
        Format::Table => {
            let mut out = format!("seed {seed}  eta {eta:e}  width {width}  batch {batch}\n");
            out.push_str("scale     update_norm\n");
            for p in &exp.points {
                out.push_str(&format!("{:<8}  {:.6e}\n", p.scale, p.update_norm));
            }
            out.push_str(&format!(
                "slope {:.6}  intercept {:.6}  r2 {:.6}  {}\n",
                exp.fit.slope,
                exp.fit.intercept,
                exp.fit.r2,
                if slope_in_range { "PASS" } else { "FAIL" },
            ));
            out
        }
    };
    Ok(CmdOutput {
        stdout: text,
        stderr: String::new(),
        status: if slope_in_range {
            ExitStatus::Success
        } else {
            ExitStatus::CheckFailed
        },
    })
}

fn cmd_verify(arch: Option<&Path>, seed: u64) -> Result<CmdOutput, Failure> {
    let spec = arch.map(load_arch).transpose()?;
    let outcomes = crate::verify::run_all(seed, spec.as_ref());
    let mut stdout = format!("seed {seed}\n");
    let mut stderr = String::new();
    let mut all_passed = true;
    for o in &outcomes {
        all_passed &= o.passed;
        stdout.push_str(&format!(
            "{} {}: {}\n",
            if o.passed { "PASS" } else { "FAIL" },
            o.name,
            o.detail
        ));
        stderr.push_str(&format!("{}: {:.1}s\n", o.name, o.elapsed.as_secs_f64()));
    }
    let passed = outcomes.iter().filter(|o| o.passed).count();
    stdout.push_str(&format!("{passed}/{} checks passed\n", outcomes.len()));
    Ok(CmdOutput {
        stdout,
        stderr,
        status: if all_passed {
            ExitStatus::Success
        } else {
            ExitStatus::CheckFailed
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run_args(args: &[&str]) -> CmdOutput {
        run(std::iter::once("gamma-guard").chain(args.iter().copied()))
    }

    #[test]
    fn unknown_subcommand_is_an_input_error() {
        let out = run_args(&["frobnicate"]);
        assert_eq!(out.status, ExitStatus::InputError);
    }

    #[test]
    fn help_exits_clean() {
        let out = run_args(&["--help"]);
        assert_eq!(out.status, ExitStatus::Success);
        assert!(out.stdout.contains("gamma-guard"));
    }

    #[test]
    fn gen_unknown_name_is_an_input_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.json");
        let out = run_args(&["gen", "resnet19", "-o", path.to_str().unwrap()]);
        assert_eq!(out.status, ExitStatus::InputError);
        assert!(out.stderr.contains("resnet19"));
    }

    #[test]
    fn gen_rejects_nonpositive_gamma() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.json");
        let out = run_args(&["gen", "resnet18", "--gamma", "0", "-o", path.to_str().unwrap()]);
        assert_eq!(out.status, ExitStatus::InputError);
    }

    #[test]
    fn plan_on_missing_file_is_an_input_error() {
        let out = run_args(&["plan", "/nonexistent/arch.json"]);
        assert_eq!(out.status, ExitStatus::InputError);
    }

    #[test]
    fn simulate_rejects_tiny_batches() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.json");
        let gen = run_args(&["gen", "resnet18", "-o", path.to_str().unwrap()]);
        assert_eq!(gen.status, ExitStatus::Success);
        let out = run_args(&["simulate", path.to_str().unwrap(), "--batch", "8"]);
        assert_eq!(out.status, ExitStatus::InputError);
        assert!(out.stderr.contains("batch"));
    }

    #[test]
    fn efflr_needs_three_scales() {
        let out = run_args(&["efflr", "--scales", "1,2", "--width", "16", "--batch", "128"]);
        assert_eq!(out.status, ExitStatus::InputError);
    }
}
