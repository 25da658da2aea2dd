//! Command-line front end.
//!
//! Exit codes: 0 success, 1 numerical failure, 2 invalid input or
//! configuration, 3 fit did not converge.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use nalgebra::DVector;
use num_complex::Complex64;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Uniform};
use serde::Serialize;

use crate::analytic::{closed_form_fields, TwoEmitterParams};
use crate::config::{OracleConfig, PortSelection, RunConfig, SchemeKind};
use crate::ensemble::Normalization;
use crate::error::{Error, Result};
use crate::fit::{default_t_start, fit_biexponential, BiExpFit, Enhancement};
use crate::liouvillian::Port;
use crate::model::{build_system, EmitterParams, PhaseLags};
use crate::propagate::{evolve_single_excitation, TimeGrid};
use crate::sweep::{run_sweep, simulate_point};
use crate::trace_io::{fmt_float, load_trace, write_peaks, write_simulation, write_sweep};

#[derive(Debug, Parser)]
#[command(name = "wgqed", version, about = "Super- and subradiant emission of waveguide-coupled emitters")]
pub struct Cli {
    /// Worker threads for sweeps and ensemble averages.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Simulate one configuration and write a trace CSV.
    Simulate(RunArgs),
    /// Sweep the detuning of one emitter and write a long-format CSV.
    Sweep(RunArgs),
    /// Fit a bi-exponential decay to a measured or simulated trace.
    Fit(FitArgs),
    /// Compare closed-form output fields with numerical propagation.
    OracleCheck(OracleArgs),
}

#[derive(Debug, Args)]
pub struct RunArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// 1, 2 or both.
    #[arg(long)]
    pub ports: Option<PortSelection>,
    /// max, sum or none.
    #[arg(long)]
    pub normalize: Option<Normalization>,
    /// Seed for Monte-Carlo diffusion averaging.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct FitArgs {
    /// CSV with columns time_ns,counts[,port].
    #[arg(long)]
    pub trace: PathBuf,
    /// Config whose `fit` and `irf` sections supply defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Port to read when the trace has a port column (1 or 2).
    #[arg(long)]
    pub port: Option<u8>,
    #[arg(long)]
    pub t_start_ns: Option<f64>,
    /// Add a third, slow background exponential.
    #[arg(long)]
    pub background: bool,
    /// Detector FWHM used to place the default fit window.
    #[arg(long)]
    pub irf_fwhm_ns: Option<f64>,
    /// Report path; a JSON twin is written next to it.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Print JSON instead of key=value text when no --out is given.
    #[arg(long)]
    pub json: bool,
}

#[derive(Debug, Args)]
pub struct OracleArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub draws: Option<usize>,
}

fn resolve(args: &RunArgs) -> Result<RunConfig> {
    let mut cfg = RunConfig::load(&args.config)?;
    if let Some(p) = args.ports {
        cfg.ports = p;
    }
    if let Some(n) = args.normalize {
        cfg.normalize = n;
    }
    if let Some(seed) = args.seed {
        match cfg.diffusion.as_mut() {
            Some(d) if d.scheme == SchemeKind::MonteCarlo => d.seed = seed,
            _ => eprintln!("note: --seed only affects Monte-Carlo diffusion averaging; ignored"),
        }
    }
    Ok(cfg)
}

/// `trace.csv` → `trace<suffix>`.
fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let stem = path.file_stem().map_or_else(|| "out".into(), |s| s.to_string_lossy().into_owned());
    path.with_file_name(format!("{stem}{suffix}"))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn write_resolved(out: &Path, cfg: &RunConfig) -> Result<()> {
    write_text(&sibling(out, ".config.json"), &(cfg.to_json() + "\n"))
}

pub fn cmd_simulate(args: &RunArgs) -> Result<()> {
    let cfg = resolve(args)?;
    let system = cfg.system()?;
    let pipe = cfg.pipeline()?;
    let res = simulate_point(&system, &pipe)?;
    let ports = cfg.ports.ports();
    let pick = |p: Port| ports.contains(&p).then(|| res.trace(p).values.as_slice());
    write_simulation(
        &args.out,
        &res.port1.times,
        pick(Port::Right),
        pick(Port::Left),
        res.raw.populations.as_deref(),
    )?;
    write_resolved(&args.out, &cfg)
}

pub fn cmd_sweep(args: &RunArgs) -> Result<()> {
    let cfg = resolve(args)?;
    let plan = cfg.sweep_plan()?;
    let map = run_sweep(&plan)?;
    write_sweep(&args.out, &map)?;
    write_peaks(&sibling(&args.out, "_peaks.csv"), &map)?;
    write_resolved(&args.out, &cfg)
}

/// Options actually used for a fit, embedded in its report.
#[derive(Debug, Clone, Serialize)]
pub struct FitOptions {
    pub trace: PathBuf,
    pub port: Option<u8>,
    pub t_start_ns: f64,
    pub background: bool,
    pub irf_fwhm_ns: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct FitReport {
    pub options: FitOptions,
    pub fit: BiExpFit,
    pub enhancement: Enhancement,
}

impl FitReport {
    pub fn to_text(&self) -> String {
        let f = &self.fit;
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k}={v}");
        };
        kv("trace", self.options.trace.display().to_string());
        kv("port", self.options.port.map_or_else(String::new, |p| p.to_string()));
        kv("background", self.options.background.to_string());
        kv("irf_fwhm_ns", fmt_float(self.options.irf_fwhm_ns));
        kv("t_start_ns", fmt_float(f.t_start));
        kv("n_samples", f.n_samples.to_string());
        kv("single_exponential", f.single_exponential.to_string());
        kv("gamma_fast_ghz", fmt_float(f.gamma_fast));
        kv("gamma_slow_ghz", fmt_float(f.gamma_slow));
        kv("a_fast", fmt_float(f.a_fast));
        kv("a_slow", fmt_float(f.a_slow));
        if let (Some(a), Some(g)) = (f.a_bg, f.gamma_bg) {
            kv("gamma_bg_ghz", fmt_float(g));
            kv("a_bg", fmt_float(a));
        }
        kv(
            "enhancement",
            match self.enhancement {
                Enhancement::Finite(x) => fmt_float(x),
                Enhancement::Unbounded => "inf".into(),
            },
        );
        kv("std_errors", f.std_errors.iter().map(|&e| fmt_float(e)).collect::<Vec<_>>().join(" "));
        kv("residual_rms", fmt_float(f.residual_rms));
        kv("iterations", f.iterations.to_string());
        s
    }
}

pub fn cmd_fit(args: &FitArgs) -> Result<FitReport> {
    let cfg = args.config.as_deref().map(RunConfig::load).transpose()?;
    let port = args
        .port
        .map(|k| Port::from_number(k).ok_or_else(|| Error::invalid("port", "expected 1 or 2")))
        .transpose()?;
    let trace = load_trace(&args.trace, port)?;
    let irf_fwhm = match (args.irf_fwhm_ns, &cfg) {
        (Some(f), _) => f,
        (None, Some(c)) => c.irf()?.map_or(0.0, |i| i.fwhm),
        (None, None) => 0.0,
    };
    let t_start = match args.t_start_ns.or(cfg.as_ref().and_then(|c| c.fit.t_start_ns)) {
        Some(t) => t,
        None => default_t_start(&trace, irf_fwhm)?,
    };
    let background = args.background || cfg.as_ref().is_some_and(|c| c.fit.background);
    let fit = fit_biexponential(&trace, t_start, background)?;
    let report = FitReport {
        options: FitOptions {
            trace: args.trace.clone(),
            port: args.port,
            t_start_ns: t_start,
            background,
            irf_fwhm_ns: irf_fwhm,
        },
        enhancement: fit.enhancement(),
        fit,
    };
    let json = serde_json::to_string_pretty(&report).expect("report serializes") + "\n";
    match &args.out {
        Some(out) => {
            write_text(out, &report.to_text())?;
            write_text(&sibling(out, ".json"), &json)?;
        }
        None if args.json => print!("{json}"),
        None => print!("{}", report.to_text()),
    }
    Ok(report)
}

#[derive(Debug, Clone, Serialize)]
pub struct OracleReport {
    pub settings: OracleConfig,
    /// Largest |I_closed − I_numerical| over draws, times and both ports, GHz.
    pub max_abs_error: f64,
    pub worst_draw: Option<TwoEmitterParams>,
    /// Ideal dark pair: largest subradiant intensity at the right port.
    pub dark_sub_intensity: f64,
    /// Ideal dark pair: |rate_sup/2Γ − 1|.
    pub dark_rate_error: f64,
}

impl OracleReport {
    pub fn to_text(&self) -> String {
        format!(
            "draws={}\ntimes={}\nt_max_ns={}\nseed={}\nmax_abs_error={}\ndark_sub_intensity={}\ndark_rate_error={}\n",
            self.settings.draws,
            self.settings.times,
            fmt_float(self.settings.t_max_ns),
            self.settings.seed,
            fmt_float(self.max_abs_error),
            fmt_float(self.dark_sub_intensity),
            fmt_float(self.dark_rate_error),
        )
    }
}

fn pair_system(p: &TwoEmitterParams) -> Result<crate::model::SystemModel> {
    build_system(
        vec![
            EmitterParams::new(p.gamma1, p.beta1).with_detuning(p.delta),
            EmitterParams::new(p.gamma2, p.beta2),
        ],
        PhaseLags::pair(p.phi),
    )
}

fn max_port_error(p: &TwoEmitterParams, grid: &TimeGrid) -> Result<f64> {
    let c0 = DVector::from_vec(vec![Complex64::new(1.0, 0.0), Complex64::new(0.0, 0.0)]);
    let tr = evolve_single_excitation(&pair_system(p)?, &c0, grid)?;
    let mut worst = 0.0f64;
    for port in [Port::Right, Port::Left] {
        for (&t, &num) in tr.times.iter().zip(tr.intensity(port)) {
            let closed = closed_form_fields(p, port, t)?.intensity();
            worst = worst.max((closed - num).abs());
        }
    }
    Ok(worst)
}

/// Random two-emitter draws: closed-form intensities against no-jump
/// propagation, plus the ideal dark-state limit.
pub fn oracle_check(settings: &OracleConfig) -> Result<OracleReport> {
    if settings.draws == 0 || settings.times < 2 {
        return Err(Error::invalid("oracle", "need at least one draw and two times"));
    }
    let grid = TimeGrid::new(0.0, settings.t_max_ns, settings.times)?;
    let mut rng = ChaCha8Rng::seed_from_u64(settings.seed);
    let uni = |a: f64, b: f64| Uniform::new(a, b).expect("valid range");
    let (gamma, beta, delta, phi) = (uni(0.3, 1.5), uni(0.3, 1.0), uni(-4.0, 4.0), uni(0.0, std::f64::consts::TAU));

    let mut worst = 0.0f64;
    let mut worst_draw = None;
    for _ in 0..settings.draws {
        let p = TwoEmitterParams {
            gamma1: gamma.sample(&mut rng),
            gamma2: gamma.sample(&mut rng),
            beta1: beta.sample(&mut rng),
            beta2: beta.sample(&mut rng),
            delta: delta.sample(&mut rng),
            phi: phi.sample(&mut rng),
        };
        let e = max_port_error(&p, &grid)?;
        if e > worst || worst_draw.is_none() {
            worst = worst.max(e);
            worst_draw = Some(p);
        }
    }

    let dark = TwoEmitterParams {
        gamma1: 1.0,
        gamma2: 1.0,
        beta1: 1.0,
        beta2: 1.0,
        delta: 0.0,
        phi: 0.0,
    };
    let mut dark_sub = 0.0f64;
    let mut dark_rate = 0.0f64;
    for t in grid.times() {
        let f = closed_form_fields(&dark, Port::Right, t)?;
        dark_sub = dark_sub.max(f.e_sub.norm_sqr());
        dark_rate = dark_rate.max((f.rate_sup / 2.0 - 1.0).abs());
    }
    Ok(OracleReport {
        settings: settings.clone(),
        max_abs_error: worst,
        worst_draw,
        dark_sub_intensity: dark_sub,
        dark_rate_error: dark_rate,
    })
}

/// Oracle agreement required for a zero exit code.
pub const ORACLE_TOLERANCE: f64 = 1e-8;

pub fn cmd_oracle_check(args: &OracleArgs) -> Result<OracleReport> {
    let mut settings = match &args.config {
        Some(p) => RunConfig::load(p)?.oracle,
        None => OracleConfig::default(),
    };
    if let Some(s) = args.seed {
        settings.seed = s;
    }
    if let Some(d) = args.draws {
        settings.draws = d;
    }
    let report = oracle_check(&settings)?;
    match &args.out {
        Some(out) => {
            write_text(out, &report.to_text())?;
            let json = serde_json::to_string_pretty(&report).expect("report serializes") + "\n";
            write_text(&sibling(out, ".json"), &json)?;
        }
        None => print!("{}", report.to_text()),
    }
    if report.max_abs_error >= ORACLE_TOLERANCE || report.dark_sub_intensity >= 1e-12 {
        return Err(Error::InvariantViolation {
            time_ns: settings.t_max_ns,
            detail: format!(
                "oracle disagreement {:e} (tolerance {ORACLE_TOLERANCE:e})",
                report.max_abs_error
            ),
        });
    }
    Ok(report)
}

pub fn run(cli: &Cli) -> Result<()> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(Error::invalid("threads", "must be positive"));
        }
        // a second call only fails if a pool already exists, which is harmless
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    match &cli.command {
        Command::Simulate(a) => cmd_simulate(a),
        Command::Sweep(a) => cmd_sweep(a),
        Command::Fit(a) => cmd_fit(a).map(|_| ()),
        Command::OracleCheck(a) => cmd_oracle_check(a).map(|_| ()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sibling_paths() {
        assert_eq!(sibling(Path::new("/a/map.csv"), "_peaks.csv"), PathBuf::from("/a/map_peaks.csv"));
        assert_eq!(sibling(Path::new("fit.txt"), ".json"), PathBuf::from("fit.json"));
    }

    #[test]
    fn small_oracle_run_agrees() {
        let r = oracle_check(&OracleConfig {
            draws: 5,
            times: 20,
            t_max_ns: 3.0,
            seed: 3,
        })
        .unwrap();
        assert!(r.max_abs_error < ORACLE_TOLERANCE);
        assert!(r.dark_sub_intensity < 1e-12);
        assert!(r.dark_rate_error < 1e-9);
    }

    #[test]
    fn cli_parses_flags() {
        let cli = Cli::try_parse_from([
            "wgqed", "--threads", "2", "simulate", "--config", "c.json", "--out", "o.csv", "--ports", "1",
            "--normalize", "max",
        ])
        .unwrap();
        match cli.command {
            Command::Simulate(a) => {
                assert_eq!(a.ports, Some(PortSelection::One));
                assert_eq!(a.normalize, Some(Normalization::Max));
            }
            other => panic!("{other:?}"),
        }
        assert!(Cli::try_parse_from(["wgqed", "simulate", "--config", "c.json", "--out", "o", "--ports", "3"]).is_err());
    }
}
