//! Batch front-end: `hartree-inverse <command> --config <path> [--set key=value ...] [--out <dir>]`.

use crate::fields::{write_field, Grid3, PolyGaussian, Precision};
use crate::hartree::{pairing, scattering_apply, BornQuadrature, SolverConfig};
use crate::indexcomb::{
    forward_difference, magic_sum, ordered_basis, q_minimality_check, EpsilonMask, MultiIndex,
};
use crate::phi::{assemble_m, psi_at, write_moment_csv, ExampleData, Line1, LogTimeConfig, MomentConfig};
use crate::potentials::{check_v1, GaussianTerm, PotentialSpec};
use crate::recon::{
    default_probes, recover, stability_family, write_recovery_csv, Extrapolation, OracleKind, ReconstructionProblem,
    DEFAULT_LAMBDAS,
};
use crate::{Complex64, Error, Result};
use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

const CSV_SCHEMA: &str = "\
CSV outputs:
  moments.csv    j,k,alpha,exponent,mu_j,re,im,tail_estimate
  recovery.csv   lambda,k,exponent,re,im,ref_re,ref_im,abs_error   (lambda = 0 is the extrapolated limit)
  sweep.csv      n,eps,mu,log10_abs_det,condition_number,invertible
  stability.csv  delta,operator_norm,left,right,ratio
  verify.csv     check,pass,detail";

#[derive(Parser, Debug)]
#[command(name = "hartree-inverse", version, about = "Recover Fourier derivatives of a Hartree interaction potential from scattering data", after_help = CSV_SCHEMA)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(clap::Args, Debug, Clone)]
pub struct CommonArgs {
    /// TOML configuration file.
    #[arg(long)]
    pub config: PathBuf,
    /// Override a configuration key, e.g. `--set problem.mu=0.25`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Recover the derivative vector for one `(N, ε)`.
    Reconstruct(CommonArgs),
    /// Run the exact-identity checks.
    Verify(CommonArgs),
    /// Determinant and conditioning of the moment matrix over a μ sweep.
    SweepMu(CommonArgs),
    /// Stability of the scattering map under potential perturbations.
    Stability(CommonArgs),
    /// Apply the scattering operator to a Gaussian and checkpoint the result.
    Solve(CommonArgs),
}

impl Command {
    fn args(&self) -> &CommonArgs {
        match self {
            Command::Reconstruct(a)
            | Command::Verify(a)
            | Command::SweepMu(a)
            | Command::Stability(a)
            | Command::Solve(a) => a,
        }
    }

    fn name(&self) -> &'static str {
        match self {
            Command::Reconstruct(_) => "reconstruct",
            Command::Verify(_) => "verify",
            Command::SweepMu(_) => "sweep-mu",
            Command::Stability(_) => "stability",
            Command::Solve(_) => "solve",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProblemSection {
    pub n: u32,
    pub eps: [u8; 3],
    pub mu: f64,
    pub lambdas: Vec<f64>,
    pub oracle: OracleKind,
    pub extrapolation: Extrapolation,
    pub amplitude_ceiling: f64,
    /// Widths of the three Gaussian profiles.
    pub profile_widths: [f64; 3],
    /// Hermite weights `c` in `(1 + c(x/s)²)e^{-x²/(2s²)}`.
    pub profile_hermite: [f64; 3],
}

impl Default for ProblemSection {
    fn default() -> Self {
        ProblemSection {
            n: 0,
            eps: [0, 0, 0],
            mu: 0.5,
            lambdas: DEFAULT_LAMBDAS.to_vec(),
            oracle: OracleKind::BornPairing,
            extrapolation: Extrapolation::Even,
            amplitude_ceiling: 1.0,
            profile_widths: [1.0; 3],
            profile_hermite: [0.0; 3],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MomentSection {
    pub line_points: usize,
    pub line_length: f64,
    pub lens_threshold: f64,
    pub condition_threshold: f64,
    pub sigma_lo: f64,
    pub sigma_hi: f64,
    pub panel_width: f64,
    pub order: usize,
}

impl Default for MomentSection {
    fn default() -> Self {
        let m = MomentConfig::default();
        MomentSection {
            line_points: m.line.n,
            line_length: m.line.length,
            lens_threshold: m.lens_threshold,
            condition_threshold: m.condition_threshold,
            sigma_lo: m.log_time.sigma_lo,
            sigma_hi: m.log_time.sigma_hi,
            panel_width: m.log_time.panel_width,
            order: m.log_time.order,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SolverSection {
    pub points: usize,
    pub box_length: f64,
    pub t_horizon: f64,
    pub dt: f64,
    pub interaction_cutoff: f64,
    pub phase_step_limit: f64,
    pub born_step: f64,
    pub tail_tolerance: f64,
    pub min_lambda: f64,
    pub allow_large_n: bool,
}

impl Default for SolverSection {
    fn default() -> Self {
        SolverSection {
            points: 32,
            box_length: 16.0,
            t_horizon: 4.0,
            dt: 0.02,
            interaction_cutoff: 1e-8,
            phase_step_limit: 50.0,
            born_step: 0.05,
            tail_tolerance: 1e-10,
            min_lambda: 0.2,
            allow_large_n: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepSection {
    pub mus: Vec<f64>,
    pub n_max: u32,
}

impl Default for SweepSection {
    fn default() -> Self {
        SweepSection {
            mus: vec![0.5, 0.25, 0.1, 0.05],
            n_max: 2,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StabilitySection {
    pub deltas: Vec<f64>,
    pub beta: [u32; 3],
    pub bump: GaussianTerm,
}

impl Default for StabilitySection {
    fn default() -> Self {
        StabilitySection {
            deltas: vec![1e-1, 1e-2, 1e-3],
            beta: [0, 0, 0],
            bump: GaussianTerm {
                amp: 1.0,
                width: 0.7,
                center: [0.3, 0.0, 0.0],
            },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SolveSection {
    pub amplitude: f64,
    pub width: f64,
    pub checkpoint: bool,
    pub single_precision: bool,
}

impl Default for SolveSection {
    fn default() -> Self {
        SolveSection {
            amplitude: 0.1,
            width: 1.0,
            checkpoint: true,
            single_precision: false,
        }
    }
}

/// Fully resolved configuration; embedded in every output.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub potential: PotentialSpec,
    #[serde(default)]
    pub problem: ProblemSection,
    #[serde(default)]
    pub moments: MomentSection,
    #[serde(default)]
    pub solver: SolverSection,
    #[serde(default)]
    pub sweep: SweepSection,
    #[serde(default)]
    pub stability: StabilitySection,
    #[serde(default)]
    pub solve: SolveSection,
}

impl RunConfig {
    pub fn eps(&self) -> Result<EpsilonMask> {
        let e = self.problem.eps;
        EpsilonMask::new(e[0], e[1], e[2])
    }

    pub fn moment_config(&self) -> MomentConfig {
        let m = &self.moments;
        MomentConfig {
            line: Line1 {
                n: m.line_points,
                length: m.line_length,
            },
            lens_threshold: m.lens_threshold,
            log_time: LogTimeConfig {
                sigma_lo: m.sigma_lo,
                sigma_hi: m.sigma_hi,
                panel_width: m.panel_width,
                order: m.order,
                time_cut: None,
            },
            condition_threshold: m.condition_threshold,
        }
    }

    pub fn solver_config(&self) -> Result<SolverConfig> {
        let s = &self.solver;
        let mut cfg = SolverConfig::new(Grid3::new(s.points, s.box_length)?, s.t_horizon, s.dt);
        cfg.interaction_cutoff = s.interaction_cutoff;
        cfg.phase_step_limit = s.phase_step_limit;
        Ok(cfg)
    }

    pub fn example(&self) -> Result<ExampleData> {
        let p = &self.problem;
        let profiles = [0, 1, 2].map(|i| PolyGaussian::hermite(p.profile_widths[i], p.profile_hermite[i]));
        Ok(ExampleData {
            profiles,
            eps: self.eps()?,
        })
    }

    pub fn problem(&self) -> Result<ReconstructionProblem> {
        let p = &self.problem;
        let eps = self.eps()?;
        let mut prob = ReconstructionProblem::new(p.n, eps, p.mu, p.oracle, self.solver_config()?);
        prob.example = self.example()?;
        prob.lambdas = p.lambdas.clone();
        prob.extrapolation = p.extrapolation;
        prob.amplitude_ceiling = p.amplitude_ceiling;
        prob.moments = self.moment_config();
        prob.field.born_quadrature = BornQuadrature::TanhSinh { h: self.solver.born_step };
        prob.field.tail_tolerance = self.solver.tail_tolerance;
        prob.field.min_lambda = self.solver.min_lambda;
        prob.field.allow_large_n = self.solver.allow_large_n;
        Ok(prob)
    }

    /// Checks every numeric parameter before any computation.
    pub fn validate(&self) -> Result<()> {
        self.potential.validate()?;
        self.problem()?.validate()?;
        self.solver_config()?.validate()?;
        let m = &self.moments;
        if !m.line_points.is_power_of_two() || m.line_points < 8 || !(m.line_length > 0.0) {
            return Err(Error::Config("moments.line_points must be a power of two and line_length positive".into()));
        }
        if !(m.lens_threshold > 0.0) || !(m.sigma_lo < m.sigma_hi) || !(m.panel_width > 0.0) || m.order < 2 {
            return Err(Error::Config("invalid moments quadrature settings".into()));
        }
        if self.sweep.mus.iter().any(|&mu| !(mu > 0.0 && mu < 1.0)) {
            return Err(Error::Config("sweep.mus must lie in (0, 1)".into()));
        }
        if self.stability.deltas.is_empty() || self.stability.deltas.iter().any(|&d| !(d > 0.0)) {
            return Err(Error::Config("stability.deltas must be positive".into()));
        }
        if !(self.solve.amplitude > 0.0 && self.solve.width > 0.0) {
            return Err(Error::Config("solve.amplitude and solve.width must be positive".into()));
        }
        Ok(())
    }
}

/// Parses `key=value` and writes it into the TOML tree along the dotted key.
fn apply_override(root: &mut toml::Table, spec: &str) -> Result<()> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override `{spec}` is not key=value")))?;
    let value: toml::Value = format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let parts: Vec<&str> = key.trim().split('.').collect();
    let mut table = root;
    for part in &parts[..parts.len() - 1] {
        table = table
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()))
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("`{part}` in `{key}` is not a table")))?;
    }
    table.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

pub fn load_config(path: &Path, overrides: &[String]) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
    let mut table: toml::Table = text
        .parse()
        .map_err(|e: toml::de::Error| Error::Config(format!("{}: {e}", path.display())))?;
    for o in overrides {
        apply_override(&mut table, o)?;
    }
    let cfg: RunConfig = toml::Value::Table(table)
        .try_into()
        .map_err(|e: toml::de::Error| Error::Config(format!("{}: {e}", path.display())))?;
    cfg.validate()?;
    Ok(cfg)
}

/// Artifacts of one command.
pub struct Outcome {
    pub result: serde_json::Value,
    pub summary: String,
    pub csv: Vec<(String, Vec<u8>)>,
    pub binary: Vec<(String, Vec<u8>)>,
    /// Set when an invariant check failed.
    pub violation: Option<String>,
}

fn c_fmt(z: Complex64) -> String {
    format!("{:+.8e}{:+.8e}i", z.re, z.im)
}

pub fn reconstruct(cfg: &RunConfig) -> Result<Outcome> {
    let prob = cfg.problem()?;
    let report = recover(&prob, &cfg.potential)?;
    let (m, _) = assemble_m(prob.n, prob.eps, &prob.example, prob.mu, &prob.moments)?;
    let mut moments = Vec::new();
    write_moment_csv(&mut moments, &m)?;
    let mut rec = Vec::new();
    write_recovery_csv(&mut rec, &report)?;
    let mut s = String::new();
    writeln!(s, "reconstruct N={} eps={:?} mu={} oracle={:?}", prob.n, prob.eps.0, prob.mu, prob.oracle).unwrap();
    writeln!(
        s,
        "moment matrix: condition {:.3e}, log10|det| {:.3}",
        report.matrix.condition_number, report.matrix.log10_abs_det
    )
    .unwrap();
    for (k, b) in report.exponents.iter().enumerate() {
        let rel = (report.a_limit[k] - report.reference[k]).norm() / report.reference[k].norm().max(1e-300);
        writeln!(
            s,
            "  d^{b} FV(0): recovered {}  reference {}  rel.err {rel:.3e}  slope {:?}",
            c_fmt(report.a_limit[k]),
            c_fmt(report.reference[k]),
            report.slope_vs_reference[k]
        )
        .unwrap();
    }
    for w in &report.warnings {
        writeln!(s, "warning: {w}").unwrap();
    }
    Ok(Outcome {
        result: serde_json::to_value(&report).map_err(json_err)?,
        summary: s,
        csv: vec![("moments.csv".into(), moments), ("recovery.csv".into(), rec)],
        binary: vec![],
        violation: None,
    })
}

#[derive(Clone, Debug, Serialize)]
pub struct Check {
    pub check: String,
    pub pass: bool,
    pub detail: String,
}

pub fn verify(cfg: &RunConfig) -> Result<Outcome> {
    let mut checks = Vec::new();
    let mut magic_ok = true;
    for l in 0..=12 {
        for k in 0..=l {
            let v = magic_sum(l, k)?;
            let expect = if k == l { 1 } else { 0 };
            magic_ok &= v == num_rational::BigRational::from_integer(expect.into());
        }
    }
    checks.push(Check {
        check: "magic_sum".into(),
        pass: magic_ok,
        detail: "0 <= k <= L <= 12".into(),
    });
    let mut order_ok = true;
    for n in 0..=10 {
        for eps in EpsilonMask::all() {
            order_ok &= ordered_basis(n, eps).is_ok();
        }
    }
    checks.push(Check {
        check: "ordered_basis".into(),
        pass: order_ok,
        detail: "strict P order for N <= 10, all masks".into(),
    });
    for (n, eps) in [(1, EpsilonMask::ZERO), (2, EpsilonMask::new(1, 0, 0)?)] {
        let r = q_minimality_check(n, eps)?;
        checks.push(Check {
            check: format!("q_minimality N={n} eps={:?}", eps.0),
            pass: r.holds,
            detail: format!("Q={} Q~={} permutations={}", r.q, r.q_tilde, r.permutations_checked),
        });
    }
    let mut fd_ok = true;
    for l in 0..=6u32 {
        let samples: Vec<f64> = (0..=l).map(|i| ((i + 1) as f64 * 0.25).powi(l as i32)).collect();
        let v = forward_difference(&samples, l)? * 4f64.powi(l as i32);
        fd_ok &= v == (1..=l).product::<u32>() as f64;
    }
    checks.push(Check {
        check: "forward_difference".into(),
        pass: fd_ok,
        detail: "lambda^-L nabla^L x^L = L! at lambda = 1/4".into(),
    });
    let rho = PolyGaussian::gaussian(1.0);
    let rhop = rho.derivative();
    let mc = cfg.moment_config();
    let zetas: Vec<f64> = (-12..=12).map(|i| 0.25 * i as f64).collect();
    let mut worst: f64 = 0.0;
    for t in [0.0, 0.2, -0.6, 1.5, -4.0, 20.0] {
        let mixed = psi_at(&rho, &rhop, t, &zetas, mc.line, mc.lens_threshold);
        let plain = psi_at(&rho, &rho, t, &zetas, mc.line, mc.lens_threshold);
        let scale = plain.iter().map(|p| p.norm()).fold(0.0, f64::max);
        for ((m, p), z) in mixed.iter().zip(&plain).zip(&zetas) {
            worst = worst.max((m.im + 0.5 * z * p.re).abs() / scale);
        }
    }
    checks.push(Check {
        check: "psi_identity".into(),
        pass: worst < 1e-10,
        detail: format!("max relative defect {worst:.3e}"),
    });
    let v1 = check_v1(&cfg.potential)?;
    checks.push(Check {
        check: "v1_decay".into(),
        pass: v1.pass,
        detail: v1.diagnostics.clone(),
    });

    let mut csv = Vec::new();
    {
        let mut wr = csv::Writer::from_writer(&mut csv);
        for c in &checks {
            wr.serialize(c).map_err(crate::phi::csv_err)?;
        }
        wr.flush()?;
    }
    let mut s = String::new();
    for c in &checks {
        writeln!(s, "{} {}: {}", if c.pass { "PASS" } else { "FAIL" }, c.check, c.detail).unwrap();
    }
    let failed: Vec<&str> = checks.iter().filter(|c| !c.pass).map(|c| c.check.as_str()).collect();
    Ok(Outcome {
        result: serde_json::to_value(&checks).map_err(json_err)?,
        summary: s,
        csv: vec![("verify.csv".into(), csv)],
        binary: vec![],
        violation: (!failed.is_empty()).then(|| format!("failed checks: {}", failed.join(", "))),
    })
}

#[derive(Clone, Debug, Serialize)]
pub struct SweepRow {
    pub n: u32,
    pub eps: String,
    pub mu: f64,
    pub log10_abs_det: f64,
    pub condition_number: f64,
    pub invertible: bool,
}

pub fn sweep_mu(cfg: &RunConfig) -> Result<Outcome> {
    let mc = cfg.moment_config();
    let mut rows = Vec::new();
    for n in 0..=cfg.sweep.n_max {
        for eps in EpsilonMask::all() {
            let mut example = cfg.example()?;
            example.eps = eps;
            for &mu in &cfg.sweep.mus {
                let (_, r) = assemble_m(n, eps, &example, mu, &mc)?;
                rows.push(SweepRow {
                    n,
                    eps: format!("{}{}{}", eps.0[0], eps.0[1], eps.0[2]),
                    mu,
                    log10_abs_det: r.log10_abs_det,
                    condition_number: r.condition_number,
                    invertible: r.invertible,
                });
            }
        }
    }
    let mut csv = Vec::new();
    {
        let mut wr = csv::Writer::from_writer(&mut csv);
        for r in &rows {
            wr.serialize(r).map_err(crate::phi::csv_err)?;
        }
        wr.flush()?;
    }
    let mut s = String::new();
    let bad: Vec<&SweepRow> = rows.iter().filter(|r| !r.invertible).collect();
    writeln!(s, "sweep-mu: {} matrices, {} flagged non-invertible", rows.len(), bad.len()).unwrap();
    for r in &bad {
        writeln!(s, "  N={} eps={} mu={} condition {:.3e}", r.n, r.eps, r.mu, r.condition_number).unwrap();
    }
    let worst = rows.iter().map(|r| r.condition_number).fold(0.0, f64::max);
    writeln!(s, "largest condition number {worst:.3e}").unwrap();
    Ok(Outcome {
        result: serde_json::to_value(&rows).map_err(json_err)?,
        summary: s,
        csv: vec![("sweep.csv".into(), csv)],
        binary: vec![],
        violation: None,
    })
}

pub fn stability(cfg: &RunConfig) -> Result<Outcome> {
    let st = &cfg.stability;
    let b = MultiIndex::new(st.beta[0], st.beta[1], st.beta[2]);
    let report = stability_family(
        &cfg.potential,
        &st.bump,
        &st.deltas,
        &default_probes(),
        b,
        &cfg.solver_config()?,
    )?;
    let mut csv = Vec::new();
    {
        let mut wr = csv::Writer::from_writer(&mut csv);
        wr.write_record(["delta", "operator_norm", "left", "right", "ratio"])
            .map_err(crate::phi::csv_err)?;
        for p in &report.points {
            wr.write_record([
                format!("{:e}", p.delta),
                format!("{:e}", p.operator_norm),
                format!("{:e}", p.left),
                format!("{:e}", p.right),
                format!("{:e}", p.left / p.right),
            ])
            .map_err(crate::phi::csv_err)?;
        }
        wr.flush()?;
    }
    let mut s = String::new();
    writeln!(s, "stability beta={b} exponent {:.4}", report.exponent).unwrap();
    for p in &report.points {
        writeln!(
            s,
            "  delta {:.1e}: ||S1-S2|| {:.3e}  left {:.3e}  right {:.3e}",
            p.delta, p.operator_norm, p.left, p.right
        )
        .unwrap();
        for e in &p.excluded {
            writeln!(s, "    excluded {e}").unwrap();
        }
        if let Some(n) = p.notes.first() {
            writeln!(s, "    {} probe warning(s), first: {n}", p.notes.len()).unwrap();
        }
    }
    writeln!(s, "fitted constant {:.3e}, bound holds: {}", report.fitted_constant, report.holds).unwrap();
    Ok(Outcome {
        result: serde_json::to_value(&report).map_err(json_err)?,
        violation: (!report.holds).then(|| "stability bound violated".to_string()),
        summary: s,
        csv: vec![("stability.csv".into(), csv)],
        binary: vec![],
    })
}

#[derive(Clone, Debug, Serialize)]
pub struct SolveResult {
    pub input_norm: f64,
    pub output_norm: f64,
    pub pairing_difference: Complex64,
    pub diagnostics: crate::hartree::ScatteringDiagnostics,
}

pub fn solve(cfg: &RunConfig) -> Result<Outcome> {
    let solver = cfg.solver_config()?;
    let grid = solver.grid;
    let w = cfg.solve.width;
    let amp = cfg.solve.amplitude;
    let phi = crate::fields::Field3::from_fn(grid, crate::fields::Space::Position, |x| {
        Complex64::new(amp * (-(x[0] * x[0] + x[1] * x[1] + x[2] * x[2]) / (2.0 * w * w)).exp(), 0.0)
    });
    let res = scattering_apply(&phi, &cfg.potential.sample(grid), &solver)?;
    let diff = res.phi_plus.sub(&phi)?;
    let out = SolveResult {
        input_norm: phi.norm_l2(),
        output_norm: res.phi_plus.norm_l2(),
        pairing_difference: pairing(&diff, &phi)?,
        diagnostics: res.diagnostics.clone(),
    };
    let mut binary = Vec::new();
    if cfg.solve.checkpoint {
        let mut buf = Vec::new();
        let prec = if cfg.solve.single_precision {
            Precision::Single
        } else {
            Precision::Double
        };
        write_field(&mut buf, &res.phi_plus, prec)?;
        binary.push(("phi_plus.hf3".to_string(), buf));
    }
    let mut s = String::new();
    writeln!(
        s,
        "solve: |phi-| {:.6e}  |phi+| {:.6e}  <(S-id)phi, phi> {}",
        out.input_norm,
        out.output_norm,
        c_fmt(out.pairing_difference)
    )
    .unwrap();
    writeln!(
        s,
        "mass drift {:.3e}, interaction tails {:.3e} / {:.3e}, steps {}",
        out.diagnostics.mass_drift, out.diagnostics.tail_minus, out.diagnostics.tail_plus, out.diagnostics.steps
    )
    .unwrap();
    for w in &out.diagnostics.warnings {
        writeln!(s, "warning: {w}").unwrap();
    }
    Ok(Outcome {
        result: serde_json::to_value(&out).map_err(json_err)?,
        summary: s,
        csv: vec![],
        binary,
        violation: None,
    })
}

fn json_err(e: serde_json::Error) -> Error {
    Error::Numerical(format!("json: {e}"))
}

fn write_outputs(dir: &Path, command: &str, cfg: &RunConfig, outcome: &Outcome) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let doc = serde_json::json!({
        "command": command,
        "config": cfg,
        "result": outcome.result,
        "violation": outcome.violation,
    });
    std::fs::write(
        dir.join("result.json"),
        serde_json::to_string_pretty(&doc).map_err(json_err)? + "\n",
    )?;
    let cfg_text = toml::to_string(cfg).map_err(|e| Error::Config(e.to_string()))?;
    let mut summary = outcome.summary.clone();
    writeln!(summary, "\n# resolved configuration\n{cfg_text}").unwrap();
    std::fs::write(dir.join("summary.txt"), summary)?;
    let header: String = cfg_text.lines().map(|l| format!("# {l}\n")).collect();
    for (name, data) in &outcome.csv {
        let mut bytes = header.clone().into_bytes();
        bytes.extend_from_slice(data);
        std::fs::write(dir.join(name), bytes)?;
    }
    for (name, data) in &outcome.binary {
        std::fs::write(dir.join(name), data)?;
    }
    Ok(())
}

/// Process exit code for an error: 1 for validation, 2 for numerical failure.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Numerical(_) => 2,
        _ => 1,
    }
}

/// Runs a parsed command; returns the process exit code.
pub fn run(cli: Cli) -> i32 {
    let args = cli.command.args().clone();
    let cfg = match load_config(&args.config, &args.overrides) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return 1;
        }
    };
    let outcome = match &cli.command {
        Command::Reconstruct(_) => reconstruct(&cfg),
        Command::Verify(_) => verify(&cfg),
        Command::SweepMu(_) => sweep_mu(&cfg),
        Command::Stability(_) => stability(&cfg),
        Command::Solve(_) => solve(&cfg),
    };
    let outcome = match outcome {
        Ok(o) => o,
        Err(e) => {
            eprintln!("error: {e}");
            return exit_code(&e);
        }
    };
    if let Err(e) = write_outputs(&args.out, cli.command.name(), &cfg, &outcome) {
        eprintln!("error: {e}");
        return 1;
    }
    print!("{}", outcome.summary);
    match outcome.violation {
        Some(v) => {
            eprintln!("invariant violation: {v}");
            2
        }
        None => 0,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn base() -> toml::Table {
        "[potential]\nfamily = \"gaussian\"\namp = 1.0\nwidth = 1.0\ndecay = 1.0\n"
            .parse()
            .unwrap()
    }

    #[test]
    fn overrides_set_nested_keys() {
        let mut t = base();
        apply_override(&mut t, "problem.mu=0.25").unwrap();
        apply_override(&mut t, "problem.oracle=full_solver").unwrap();
        apply_override(&mut t, "problem.eps=[1,0,0]").unwrap();
        let cfg: RunConfig = toml::Value::Table(t).try_into().unwrap();
        assert_eq!(cfg.problem.mu, 0.25);
        assert_eq!(cfg.problem.oracle, OracleKind::FullSolver);
        assert_eq!(cfg.problem.eps, [1, 0, 0]);
    }

    #[test]
    fn invalid_values_are_rejected_before_compute() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.toml");
        std::fs::write(&path, toml::to_string(&base()).unwrap()).unwrap();
        assert!(load_config(&path, &[]).is_ok());
        for bad in ["problem.mu=1.5", "problem.lambdas=[0.1,0.2]", "solver.dt=-1", "problem.eps=[2,0,0]"] {
            let e = load_config(&path, &[bad.to_string()]).unwrap_err();
            assert_eq!(exit_code(&e), 1, "{bad}");
        }
        let e = load_config(&path, &["problem.unknown=1".to_string()]).unwrap_err();
        assert!(e.to_string().contains("unknown"));
    }
}
