//! Reconstruction of `∂^β F V(0)` from scattering data, the derivative
//! table, and the stability experiment.

use crate::fields::{scale_compose, Field3, Grid3, ScalingMatrix, Space};
use crate::hartree::{
    born_scattering_with, pairing, scattering_apply_with, BornQuadrature, Interaction, SolverConfig,
    SQRT_2PI_CUBED,
};
use crate::indexcomb::{forward_difference, ordered_basis, EpsilonMask, MultiIndex};
use crate::phi::{
    assemble_m, csv_err, ln_dispersion, row_ln_mu, AxisWeight, ExampleData, MatrixReport, MomentConfig,
    SeparableIntegrator,
};
use crate::potentials::{
    exact_derivative_vector, exact_fourier_derivative, DerivativeTable, DerivativeVector, Family, GaussianTerm,
    PotentialSpec,
};
use crate::{Complex64, Error, Result};
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

const I: Complex64 = Complex64 { re: 0.0, im: 1.0 };

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OracleKind {
    /// Born pairing through the `Φ` identity, evaluated on the whole time line.
    BornPairing,
    /// First Born approximation of `S` on the periodic grid.
    BornField,
    /// Split-step scattering operator on the periodic grid.
    FullSolver,
}

/// Settings for the grid-based oracles.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FieldOracleConfig {
    pub solver: SolverConfig,
    pub born_quadrature: BornQuadrature,
    /// Relative mass allowed outside the box when sampling `φ∘D`.
    pub tail_tolerance: f64,
    /// Smallest stencil scale accepted by the full solver.
    pub min_lambda: f64,
    /// Permits the full solver for `N > 0`.
    pub allow_large_n: bool,
}

impl FieldOracleConfig {
    pub fn new(solver: SolverConfig) -> Self {
        FieldOracleConfig {
            solver,
            born_quadrature: BornQuadrature::TanhSinh { h: 0.05 },
            tail_tolerance: 1e-10,
            min_lambda: 0.2,
            allow_large_n: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReconstructionProblem {
    pub n: u32,
    pub eps: EpsilonMask,
    pub example: ExampleData,
    pub mu: f64,
    /// Strictly decreasing.
    pub lambdas: Vec<f64>,
    pub oracle: OracleKind,
    pub extrapolation: Extrapolation,
    pub moments: MomentConfig,
    pub field: FieldOracleConfig,
    /// Upper bound on `λ^{N+4}‖φ∘D‖₂` for the grid oracles.
    pub amplitude_ceiling: f64,
}

/// Model for the `λ → 0` limit of the per-scale estimates.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Extrapolation {
    /// `a + bλ`.
    Linear,
    /// `a + bλ² + cλ⁴`, truncated to the number of scales; the parity of `Φ`
    /// removes odd powers of `λ` from `J^λ`.
    Even,
}

impl Extrapolation {
    pub fn powers(&self, points: usize) -> Vec<i32> {
        match self {
            Extrapolation::Linear => vec![0, 1][..points.min(2)].to_vec(),
            Extrapolation::Even => vec![0, 2, 4][..points.min(3)].to_vec(),
        }
    }
}

pub const DEFAULT_LAMBDAS: [f64; 4] = [0.4, 0.2, 0.1, 0.05];

impl ReconstructionProblem {
    pub fn new(n: u32, eps: EpsilonMask, mu: f64, oracle: OracleKind, solver: SolverConfig) -> Self {
        ReconstructionProblem {
            n,
            eps,
            example: ExampleData::gaussian(eps),
            mu,
            lambdas: DEFAULT_LAMBDAS.to_vec(),
            oracle,
            extrapolation: Extrapolation::Even,
            moments: MomentConfig::default(),
            field: FieldOracleConfig::new(solver),
            amplitude_ceiling: 1.0,
        }
    }

    pub fn order(&self) -> u32 {
        2 * self.n + self.eps.weight()
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.mu > 0.0 && self.mu < 1.0) {
            return Err(Error::Argument(format!("mu must lie in (0, 1), got {}", self.mu)));
        }
        if self.lambdas.is_empty() {
            return Err(Error::Argument("lambda schedule is empty".into()));
        }
        if self.lambdas.iter().any(|&l| !(l > 0.0 && l.is_finite())) {
            return Err(Error::Argument("lambda schedule must be positive".into()));
        }
        if self.lambdas.windows(2).any(|w| w[1] >= w[0]) {
            return Err(Error::Argument("lambda schedule must be strictly decreasing".into()));
        }
        if self.example.eps != self.eps {
            return Err(Error::Argument("example data built for a different mask".into()));
        }
        if !(self.amplitude_ceiling > 0.0) {
            return Err(Error::Argument("amplitude ceiling must be positive".into()));
        }
        if self.oracle != OracleKind::BornPairing {
            self.field.solver.validate()?;
        }
        Ok(())
    }
}

/// Scales `(l+1)λ`, `l = 0..=L`.
pub fn lambda_stencil(lambda: f64, order: u32) -> Vec<f64> {
    (0..=order).map(|l| (l as f64 + 1.0) * lambda).collect()
}

/// One oracle query, normalized as `q(λ') = iμ^{N+2}(2π)^{-3/2}λ'^{-3N-7}⟨(S-id)(λ'^{N+4}φ∘D), φ̃∘D⟩`
/// so that `J^λ = λ^{-L}∇^L_λ q`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OracleSample {
    pub lambda: f64,
    pub value: Complex64,
    pub error_estimate: f64,
    pub valid: bool,
    pub notes: Vec<String>,
}

/// `∫ F V(D^{λ',μ}ξ) Φ(φ, φ̃, μ; t, ξ) d(t, ξ)` for each `λ'`, by the separable integrator.
/// With `time_window = Some(T)` only `|t| ≤ T` in the unscaled time of `φ∘D` contributes.
pub fn born_pairing_reduced(
    problem: &ReconstructionProblem,
    v: &PotentialSpec,
    ln_mu: f64,
    lambda_primes: &[f64],
    time_window: Option<f64>,
) -> Result<Vec<(Complex64, f64)>> {
    let terms = v
        .separable_terms()
        .ok_or_else(|| Error::Unsupported("the Born pairing oracle needs a Gaussian-family potential".into()))?;
    let cfg = &problem.moments;
    let kernels = problem.example.kernels(cfg.line, cfg.lens_threshold);
    let ln_c = ln_dispersion(problem.n, problem.eps, ln_mu);
    let d = ln_c.map(|l| (0.5 * l).exp());
    let weight = |lp: f64, t: &crate::potentials::SeparableTerm| -> [AxisWeight; 3] {
        [0, 1, 2].map(|i| AxisWeight::GaussianPhase {
            quad: t.width * t.width * lp * lp * d[i] * d[i] / 4.0,
            lin: t.center[i] * lp * d[i],
        })
    };
    let run = |lps: &[f64], cut: Option<f64>| -> Vec<(Complex64, f64)> {
        let mut log_time = cfg.log_time;
        log_time.time_cut = cut;
        let integ = SeparableIntegrator {
            kernels: [&kernels[0], &kernels[1], &kernels[2]],
            ln_coeffs: ln_c,
            config: log_time,
        };
        let weights: Vec<[AxisWeight; 3]> = lps
            .iter()
            .flat_map(|&lp| terms.iter().map(move |t| (lp, t)))
            .map(|(lp, t)| weight(lp, t))
            .collect();
        let vals = integ.integrate(&weights);
        lps.iter()
            .enumerate()
            .map(|(li, _)| {
                let mut acc = Complex64::new(0.0, 0.0);
                let mut err = 0.0;
                for (ti, t) in terms.iter().enumerate() {
                    let v = vals[li * terms.len() + ti];
                    acc += v.value * t.coeff;
                    err += v.error * t.coeff.abs();
                }
                (acc, err)
            })
            .collect()
    };
    Ok(match time_window {
        None => run(lambda_primes, None),
        Some(t) => lambda_primes
            .iter()
            .map(|&lp| run(&[lp], Some(lp * lp * t))[0])
            .collect(),
    })
}

/// `⟨(S_Born - id)(λ'^{N+4}φ∘D), φ̃∘D⟩` from the reduced integral.
pub fn born_pairing_value(problem: &ReconstructionProblem, v: &PotentialSpec, mu_j: f64, lambda_prime: f64) -> Result<Complex64> {
    let (h, _) = born_pairing_reduced(problem, v, mu_j.ln(), &[lambda_prime], None)?[0];
    let n = problem.n as i32;
    Ok(-I * SQRT_2PI_CUBED * lambda_prime.powi(3 * n + 7) * mu_j.powi(-n - 2) * h)
}

fn normalize(problem: &ReconstructionProblem, mu_j: f64, lambda_prime: f64, p: Complex64) -> Complex64 {
    let n = problem.n as i32;
    I * mu_j.powi(n + 2) / SQRT_2PI_CUBED * lambda_prime.powi(-3 * n - 7) * p
}

/// Grid oracle: samples `φ∘D`, applies `S` (or its Born approximation), pairs with `φ̃∘D`.
pub fn field_pairing(
    problem: &ReconstructionProblem,
    inter: &Interaction,
    mu_j: f64,
    lambda_prime: f64,
) -> Result<OracleSample> {
    let mut notes = Vec::new();
    let mut valid = true;
    let n = problem.n;
    let cfg = &problem.field;
    if problem.oracle == OracleKind::FullSolver && !cfg.allow_large_n {
        if n > 0 {
            valid = false;
            notes.push("full solver restricted to N = 0".into());
        }
        if lambda_prime < cfg.min_lambda {
            valid = false;
            notes.push(format!("scale {lambda_prime} below the full-solver minimum {}", cfg.min_lambda));
        }
    }
    let grid = cfg.solver.grid;
    let d = ScalingMatrix::new(lambda_prime, mu_j, n, problem.eps);
    let (f, rf) = scale_compose(&problem.example.phi(), &d, grid, cfg.tail_tolerance);
    let (g, rg) = scale_compose(&problem.example.phit(), &d, grid, cfg.tail_tolerance);
    notes.extend(rf.warning);
    notes.extend(rg.warning);
    let amp = lambda_prime.powi(n as i32 + 4);
    let data = f.scale(Complex64::new(amp, 0.0));
    let size = data.norm_l2();
    if size > problem.amplitude_ceiling {
        valid = false;
        notes.push(format!("data norm {size:.3e} above the amplitude ceiling"));
    }
    let diff = match problem.oracle {
        _ if inter.is_zero() => Field3::zeros(grid, Space::Position),
        OracleKind::BornField => {
            let (out, diag) = born_scattering_with(&data, inter, &cfg.solver, &cfg.born_quadrature)?;
            notes.extend(diag.warnings);
            out.sub(&data)?
        }
        OracleKind::FullSolver => {
            let res = scattering_apply_with(&data, inter, &cfg.solver)?;
            notes.extend(res.diagnostics.warnings);
            res.phi_plus.sub(&data)?
        }
        OracleKind::BornPairing => unreachable!(),
    };
    let p = pairing(&diff, &g)?;
    Ok(OracleSample {
        lambda: lambda_prime,
        value: normalize(problem, mu_j, lambda_prime, p),
        error_estimate: 0.0,
        valid,
        notes,
    })
}

/// Normalized oracle values for row `j` (1-based) at each scale.
pub fn normalized_pairings(
    problem: &ReconstructionProblem,
    v: &PotentialSpec,
    j: usize,
    lambda_primes: &[f64],
) -> Result<Vec<OracleSample>> {
    let ln_mu = row_ln_mu(problem.n, problem.mu, j);
    match problem.oracle {
        OracleKind::BornPairing => Ok(born_pairing_reduced(problem, v, ln_mu, lambda_primes, None)?
            .into_iter()
            .zip(lambda_primes)
            .map(|((value, err), &lp)| OracleSample {
                lambda: lp,
                value,
                error_estimate: err,
                valid: true,
                notes: Vec::new(),
            })
            .collect()),
        _ => {
            let mu_j = ln_mu.exp();
            if mu_j == 0.0 {
                return Err(Error::Unsupported(format!(
                    "row {j} needs mu_j = exp({ln_mu:.3e}), below floating-point range for a grid oracle"
                )));
            }
            let inter = Interaction::new(&v.sample(problem.field.solver.grid))?;
            lambda_primes
                .iter()
                .map(|&lp| field_pairing(problem, &inter, mu_j, lp))
                .collect()
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JEntry {
    pub j: usize,
    pub lambda: f64,
    pub ln_mu_j: f64,
    pub value: Complex64,
    pub valid: bool,
    pub samples: Vec<OracleSample>,
}

fn combine(lambda: f64, order: u32, samples: &[OracleSample]) -> Result<Complex64> {
    let vals: Vec<Complex64> = samples.iter().map(|s| s.value).collect();
    Ok(forward_difference(&vals, order)? * lambda.powi(-(order as i32)))
}

/// `J^λ_{N,ε}[φ, φ̃, μ_j]` for row `j` (1-based).
pub fn j_entry(problem: &ReconstructionProblem, v: &PotentialSpec, lambda: f64, j: usize) -> Result<JEntry> {
    let order = problem.order();
    let samples = normalized_pairings(problem, v, j, &lambda_stencil(lambda, order))?;
    Ok(JEntry {
        j,
        lambda,
        ln_mu_j: row_ln_mu(problem.n, problem.mu, j),
        value: combine(lambda, order, &samples)?,
        valid: samples.iter().all(|s| s.valid),
        samples,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LambdaEstimate {
    pub lambda: f64,
    pub j: Vec<Complex64>,
    pub a_hat: Vec<Complex64>,
    pub valid: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecoveryReport {
    pub n: u32,
    pub eps: EpsilonMask,
    pub mu: f64,
    pub oracle: OracleKind,
    /// Derivative exponents `2α(N,ε;k)+ε`.
    pub exponents: Vec<MultiIndex>,
    pub matrix: MatrixReport,
    pub per_lambda: Vec<LambdaEstimate>,
    pub extrapolation: Extrapolation,
    /// Intercept of the least-squares fit selected by `extrapolation`.
    pub a_limit: Vec<Complex64>,
    /// Intercept of a least-squares line in `λ`.
    pub a_linear: Vec<Complex64>,
    pub a_smallest: Vec<Complex64>,
    /// Log-log slope of `|a_hat(λ) - a_limit|`.
    pub slope_vs_limit: Vec<Option<f64>>,
    /// Values from the potential oracle.
    pub reference: Vec<Complex64>,
    /// `|a_hat(λ) - reference|`, indexed `[λ][k]`.
    pub errors: Vec<Vec<f64>>,
    pub slope_vs_reference: Vec<Option<f64>>,
    pub warnings: Vec<String>,
}

/// Least-squares intercept of `y ≈ Σ_p c_p x^p` over the given powers (the first must be 0).
pub fn polynomial_intercept(x: &[f64], y: &[Complex64], powers: &[i32]) -> Complex64 {
    let a = DMatrix::from_fn(x.len(), powers.len(), |i, j| x[i].powi(powers[j]));
    let svd = a.svd(true, true);
    let solve = |b: Vec<f64>| svd.solve(&DVector::from_vec(b), 1e-14).map(|c| c[0]).unwrap_or(f64::NAN);
    Complex64::new(
        solve(y.iter().map(|v| v.re).collect()),
        solve(y.iter().map(|v| v.im).collect()),
    )
}

/// Least-squares intercept of `y ≈ a + bx`.
pub fn linear_intercept(x: &[f64], y: &[Complex64]) -> Complex64 {
    polynomial_intercept(x, y, &Extrapolation::Linear.powers(x.len()))
}

/// Least-squares slope of `ln y` against `ln x` over positive entries.
pub fn log_log_slope(x: &[f64], y: &[f64]) -> Option<f64> {
    let pts: Vec<(f64, f64)> = x
        .iter()
        .zip(y)
        .filter(|(a, b)| **a > 0.0 && **b > 0.0)
        .map(|(a, b)| (a.ln(), b.ln()))
        .collect();
    if pts.len() < 2 {
        return None;
    }
    let n = pts.len() as f64;
    let (sx, sy) = pts.iter().fold((0.0, 0.0), |(a, b), p| (a + p.0, b + p.1));
    let (mx, my) = (sx / n, sy / n);
    let num: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let den: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    (den > 0.0).then(|| num / den)
}

/// Solves `𝔐 a = 𝔍^λ` on the schedule and extrapolates to `λ → 0`.
pub fn recover(problem: &ReconstructionProblem, v: &PotentialSpec) -> Result<RecoveryReport> {
    problem.validate()?;
    v.validate()?;
    let (m, report) = assemble_m(problem.n, problem.eps, &problem.example, problem.mu, &problem.moments)?;
    if !report.invertible {
        return Err(Error::Numerical(format!(
            "moment matrix not invertible at mu = {}: condition number {:.3e}",
            problem.mu, report.condition_number
        )));
    }
    let ns = m.size();
    let order = problem.order();
    let stencils: Vec<Vec<f64>> = problem.lambdas.iter().map(|&l| lambda_stencil(l, order)).collect();
    let flat: Vec<f64> = stencils.iter().flatten().copied().collect();
    let mut jvals = vec![vec![Complex64::new(0.0, 0.0); ns]; problem.lambdas.len()];
    let mut valid = vec![true; problem.lambdas.len()];
    let mut warnings = Vec::new();
    for j in 1..=ns {
        let samples = normalized_pairings(problem, v, j, &flat)?;
        for (li, chunk) in samples.chunks(order as usize + 1).enumerate() {
            jvals[li][j - 1] = combine(problem.lambdas[li], order, chunk)?;
            if chunk.iter().any(|s| !s.valid) {
                valid[li] = false;
            }
            for s in chunk {
                for note in &s.notes {
                    warnings.push(format!("row {j}, scale {}: {note}", s.lambda));
                }
            }
        }
    }
    let mut per_lambda = Vec::new();
    for (li, &lambda) in problem.lambdas.iter().enumerate() {
        per_lambda.push(LambdaEstimate {
            lambda,
            a_hat: m.solve(&jvals[li])?,
            j: jvals[li].clone(),
            valid: valid[li],
        });
    }
    let used: Vec<&LambdaEstimate> = per_lambda.iter().filter(|e| e.valid).collect();
    if used.is_empty() {
        return Err(Error::Numerical("no admissible scale in the lambda schedule".into()));
    }
    let xs: Vec<f64> = used.iter().map(|e| e.lambda).collect();
    let column = |k: usize| used.iter().map(|e| e.a_hat[k]).collect::<Vec<_>>();
    let powers = problem.extrapolation.powers(xs.len());
    let a_limit: Vec<Complex64> = (0..ns).map(|k| polynomial_intercept(&xs, &column(k), &powers)).collect();
    let a_linear: Vec<Complex64> = (0..ns).map(|k| linear_intercept(&xs, &column(k))).collect();
    let a_smallest = used.last().unwrap().a_hat.clone();
    let reference = exact_derivative_vector(v, problem.n, problem.eps)?.entries;
    let errors: Vec<Vec<f64>> = per_lambda
        .iter()
        .map(|e| (0..ns).map(|k| (e.a_hat[k] - reference[k]).norm()).collect())
        .collect();
    let mut slope_vs_limit = Vec::new();
    let mut slope_vs_reference = Vec::new();
    for k in 0..ns {
        let dev: Vec<f64> = used.iter().map(|e| (e.a_hat[k] - a_limit[k]).norm()).collect();
        slope_vs_limit.push(log_log_slope(&xs, &dev));
        let err: Vec<f64> = used.iter().map(|e| (e.a_hat[k] - reference[k]).norm()).collect();
        slope_vs_reference.push(log_log_slope(&xs, &err));
        if err.windows(2).any(|w| w[1] > w[0]) {
            warnings.push(format!(
                "component {}: error not monotone in lambda (quadrature floor reached)",
                k + 1
            ));
        }
    }
    Ok(RecoveryReport {
        n: problem.n,
        eps: problem.eps,
        mu: problem.mu,
        oracle: problem.oracle,
        exponents: m.basis.exponents(),
        matrix: report,
        per_lambda,
        extrapolation: problem.extrapolation,
        a_limit,
        a_linear,
        a_smallest,
        slope_vs_limit,
        reference,
        errors,
        slope_vs_reference,
        warnings,
    })
}

/// CSV rows `lambda,k,exponent,re,im,ref_re,ref_im,abs_error`; the limit uses `lambda = 0`.
pub fn write_recovery_csv<W: std::io::Write>(w: W, r: &RecoveryReport) -> Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    wr.write_record(["lambda", "k", "exponent", "re", "im", "ref_re", "ref_im", "abs_error"])
        .map_err(csv_err)?;
    let rows = r
        .per_lambda
        .iter()
        .map(|e| (e.lambda, &e.a_hat))
        .chain(std::iter::once((0.0, &r.a_limit)));
    for (lambda, a) in rows {
        for (k, val) in a.iter().enumerate() {
            wr.write_record([
                format!("{lambda}"),
                (k + 1).to_string(),
                r.exponents[k].to_string(),
                format!("{:e}", val.re),
                format!("{:e}", val.im),
                format!("{:e}", r.reference[k].re),
                format!("{:e}", r.reference[k].im),
                format!("{:e}", (val - r.reference[k]).norm()),
            ])
            .map_err(csv_err)?;
        }
    }
    wr.flush()?;
    Ok(())
}

/// `β = 2α(N,ε;k) + ε`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BetaDecomposition {
    pub n: u32,
    pub eps: EpsilonMask,
    /// 1-based position in the ordered basis.
    pub k: usize,
    pub alpha: MultiIndex,
}

pub fn decompose(beta: MultiIndex) -> Result<BetaDecomposition> {
    let (alpha, eps) = beta.split_parity();
    let n = alpha.order();
    let basis = ordered_basis(n, eps)?;
    let k = basis
        .position(alpha)
        .ok_or_else(|| Error::Numerical(format!("{alpha} missing from the ordered basis")))?;
    Ok(BetaDecomposition { n, eps, k: k + 1, alpha })
}

/// Assembles `∂^β F V(0)` for `|β| ≤ order` from per-`(N, ε)` vectors.
pub fn derivative_table(runs: &[DerivativeVector], order: u32) -> Result<DerivativeTable> {
    let mut table = DerivativeTable::new();
    let mut missing = Vec::new();
    for beta in MultiIndex::up_to_order(order) {
        let d = decompose(beta)?;
        match runs.iter().find(|r| r.n == d.n && r.eps == d.eps) {
            Some(r) if r.entries.len() > d.k - 1 => {
                if table.insert(beta, r.entries[d.k - 1]).is_some() {
                    return Err(Error::Numerical(format!("{beta} assigned twice")));
                }
            }
            _ => missing.push(beta.to_string()),
        }
    }
    if !missing.is_empty() {
        return Err(Error::Argument(format!("uncovered derivatives: {}", missing.join(" "))));
    }
    Ok(table)
}

/// `(N, ε)` pairs needed for a table through `order`.
pub fn required_runs(order: u32) -> Vec<(u32, EpsilonMask)> {
    let mut out = Vec::new();
    for eps in EpsilonMask::all() {
        let mut n = 0;
        while 2 * n + eps.weight() <= order {
            out.push((n, eps));
            n += 1;
        }
    }
    out
}

/// A small probe `amp · e^{-|x|²/(2w²)} e^{i k·x}`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Probe {
    pub amplitude: f64,
    pub width: f64,
    pub modulation: [f64; 3],
}

impl Probe {
    pub fn sample(&self, grid: Grid3) -> Field3 {
        Field3::from_fn(grid, Space::Position, |x| {
            let r2 = x[0] * x[0] + x[1] * x[1] + x[2] * x[2];
            let ph = self.modulation[0] * x[0] + self.modulation[1] * x[1] + self.modulation[2] * x[2];
            Complex64::from_polar(self.amplitude * (-r2 / (2.0 * self.width * self.width)).exp(), ph)
        })
    }
}

/// Plain and modulated Gaussians at three amplitudes.
pub fn default_probes() -> Vec<Probe> {
    let mut out = Vec::new();
    for modulation in [[0.0; 3], [1.0, 0.5, 0.0]] {
        for amplitude in [0.05, 0.1, 0.2] {
            out.push(Probe {
                amplitude,
                width: 1.0,
                modulation,
            });
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StabilityPoint {
    pub delta: f64,
    /// `max_φ ‖(S₁-S₂)φ‖_{H¹}/‖φ‖³_{H¹}` over admitted probes.
    pub operator_norm: f64,
    pub per_probe: Vec<Option<f64>>,
    /// `|∂^β F(V₁-V₂)(0)|`.
    pub left: f64,
    /// `s^{1/(|β|+2)} + s` with `s` the operator norm.
    pub right: f64,
    pub excluded: Vec<String>,
    /// Solver warnings for admitted probes.
    pub notes: Vec<String>,
}

type Scattered = std::result::Result<(Field3, Vec<String>), String>;

fn scatter_probes(v: &PotentialSpec, probes: &[Field3], solver: &SolverConfig) -> Result<Vec<Scattered>> {
    let inter = Interaction::new(&v.sample(solver.grid))?;
    Ok(probes
        .iter()
        .map(|p| {
            scattering_apply_with(p, &inter, solver)
                .map(|r| (r.phi_plus, r.diagnostics.warnings))
                .map_err(|e| e.to_string())
        })
        .collect())
}

fn stability_point(
    delta: f64,
    s1: &[Scattered],
    s2: &[Scattered],
    probes: &[Field3],
    left: f64,
    exponent: f64,
) -> Result<StabilityPoint> {
    let mut per_probe = Vec::new();
    let mut excluded = Vec::new();
    let mut notes = Vec::new();
    for (i, ((a, b), p)) in s1.iter().zip(s2).zip(probes).enumerate() {
        match (a, b) {
            (Ok((a, wa)), Ok((b, wb))) => {
                per_probe.push(Some(a.sub(b)?.norm_h1() / p.norm_h1().powi(3)));
                if let Some(w) = wa.iter().chain(wb).next() {
                    notes.push(format!("probe {}: {w}", i + 1));
                }
            }
            (Err(e), _) | (_, Err(e)) => {
                per_probe.push(None);
                excluded.push(format!("probe {}: {e}", i + 1));
            }
        }
    }
    let operator_norm = per_probe.iter().flatten().copied().fold(0.0, f64::max);
    Ok(StabilityPoint {
        delta,
        operator_norm,
        per_probe,
        left,
        right: operator_norm.powf(exponent) + operator_norm,
        excluded,
        notes,
    })
}

/// Both sides of the stability bound for one pair of potentials.
pub fn stability_experiment(
    spec1: &PotentialSpec,
    spec2: &PotentialSpec,
    probes: &[Probe],
    beta: MultiIndex,
    solver: &SolverConfig,
) -> Result<StabilityPoint> {
    let fields: Vec<Field3> = probes.iter().map(|p| p.sample(solver.grid)).collect();
    let s1 = scatter_probes(spec1, &fields, solver)?;
    let s2 = scatter_probes(spec2, &fields, solver)?;
    let left = (exact_fourier_derivative(spec1, beta)? - exact_fourier_derivative(spec2, beta)?).norm();
    stability_point(0.0, &s1, &s2, &fields, left, 1.0 / (beta.order() as f64 + 2.0))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StabilityReport {
    pub beta: MultiIndex,
    pub exponent: f64,
    pub points: Vec<StabilityPoint>,
    /// `left/right` at the largest `δ`.
    pub fitted_constant: f64,
    /// `left ≤ C·right` at every `δ`.
    pub holds: bool,
}

/// `V₂ = V₁ + δ·bump`.
pub fn perturbed(base: &PotentialSpec, bump: &GaussianTerm, delta: f64) -> Result<PotentialSpec> {
    let mut terms = base
        .gaussian_terms()
        .ok_or_else(|| Error::Unsupported("perturbation needs a Gaussian-family base potential".into()))?;
    terms.push(GaussianTerm {
        amp: delta * bump.amp,
        ..bump.clone()
    });
    Ok(PotentialSpec {
        family: Family::GaussianMixture { terms },
        decay: base.decay,
    })
}

/// Stability sweep over `δ` with the constant fitted at the largest `δ`.
pub fn stability_family(
    base: &PotentialSpec,
    bump: &GaussianTerm,
    deltas: &[f64],
    probes: &[Probe],
    beta: MultiIndex,
    solver: &SolverConfig,
) -> Result<StabilityReport> {
    if deltas.is_empty() {
        return Err(Error::Argument("no perturbation sizes given".into()));
    }
    let fields: Vec<Field3> = probes.iter().map(|p| p.sample(solver.grid)).collect();
    let s1 = scatter_probes(base, &fields, solver)?;
    let exponent = 1.0 / (beta.order() as f64 + 2.0);
    let d1 = exact_fourier_derivative(base, beta)?;
    let mut points = Vec::new();
    for &delta in deltas {
        let v2 = perturbed(base, bump, delta)?;
        let s2 = scatter_probes(&v2, &fields, solver)?;
        let left = (d1 - exact_fourier_derivative(&v2, beta)?).norm();
        points.push(stability_point(delta, &s1, &s2, &fields, left, exponent)?);
    }
    let anchor = points
        .iter()
        .max_by(|a, b| a.delta.partial_cmp(&b.delta).unwrap())
        .unwrap();
    let fitted_constant = if anchor.right > 0.0 {
        anchor.left / anchor.right
    } else {
        f64::INFINITY
    };
    let holds = points
        .iter()
        .all(|p| p.left <= fitted_constant * p.right * (1.0 + 1e-12));
    Ok(StabilityReport {
        beta,
        exponent,
        points,
        fitted_constant,
        holds,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::potentials::exact_derivative_table;

    fn solver() -> SolverConfig {
        SolverConfig::new(Grid3::new(32, 16.0).unwrap(), 2.0, 0.02)
    }

    #[test]
    fn decomposition_examples() {
        let d = decompose(MultiIndex::new(1, 1, 0)).unwrap();
        assert_eq!((d.n, d.eps, d.k), (0, EpsilonMask::new(1, 1, 0).unwrap(), 1));
        let d = decompose(MultiIndex::new(2, 0, 0)).unwrap();
        assert_eq!((d.n, d.eps, d.alpha), (1, EpsilonMask::ZERO, MultiIndex::new(1, 0, 0)));
        let d = decompose(MultiIndex::ZERO).unwrap();
        assert_eq!((d.n, d.eps, d.k), (0, EpsilonMask::ZERO, 1));
    }

    #[test]
    fn table_round_trip_and_missing_runs() {
        let v = PotentialSpec::shifted_gaussian(1.0, 1.0, [0.5, -0.2, 0.1], 3.0);
        let runs: Vec<DerivativeVector> = required_runs(4)
            .into_iter()
            .map(|(n, e)| exact_derivative_vector(&v, n, e).unwrap())
            .collect();
        let table = derivative_table(&runs, 4).unwrap();
        let direct = exact_derivative_table(&v, 4).unwrap();
        assert_eq!(table.len(), direct.len());
        for (b, val) in &direct {
            assert!((table[b] - val).norm() < 1e-15);
        }
        let err = derivative_table(&runs[1..], 4).unwrap_err().to_string();
        assert!(err.contains("uncovered"));
    }

    #[test]
    fn zero_potential_gives_zero_entries() {
        let v = PotentialSpec::gaussian(0.0, 1.0, 1.0);
        let mut p = ReconstructionProblem::new(0, EpsilonMask::ZERO, 0.5, OracleKind::BornPairing, solver());
        let e = j_entry(&p, &v, 0.2, 1).unwrap();
        assert_eq!(e.value, Complex64::new(0.0, 0.0));
        p.oracle = OracleKind::FullSolver;
        let e = j_entry(&p, &v, 0.4, 1).unwrap();
        assert_eq!(e.value, Complex64::new(0.0, 0.0));
    }

    #[test]
    fn stencil_annihilates_low_degree_symbols() {
        // For a narrow Gaussian F V(Dξ) is a constant up to a relative O(w²) quadratic,
        // and the second difference removes the constant.
        let p = ReconstructionProblem::new(1, EpsilonMask::ZERO, 0.5, OracleKind::BornPairing, solver());
        let narrow = j_entry(&p, &PotentialSpec::gaussian(1.0, 1e-3, 1.0), 0.2, 1).unwrap();
        let scale = narrow.samples.iter().map(|s| s.value.norm()).fold(0.0, f64::max);
        assert!(narrow.value.norm() < 1e-5 * scale, "{} vs {scale}", narrow.value);
        let wide = j_entry(&p, &PotentialSpec::gaussian(1.0, 1.0, 1.0), 0.2, 1).unwrap();
        let scale = wide.samples.iter().map(|s| s.value.norm()).fold(0.0, f64::max);
        assert!(wide.value.norm() > 1e-2 * scale);
    }

    #[test]
    fn born_pairing_matches_grid_with_same_window() {
        let v = PotentialSpec::gaussian(1.0, 1.0, 1.0);
        let grid = Grid3::new(64, 24.0).unwrap();
        let t = 1.5;
        let mut p = ReconstructionProblem::new(0, EpsilonMask::ZERO, 0.5, OracleKind::BornField, SolverConfig::new(grid, t, 0.05));
        p.field.born_quadrature = BornQuadrature::TanhSinh { h: 0.2 };
        let lp = 0.8;
        let field = normalized_pairings(&p, &v, 1, &[lp]).unwrap()[0].value;
        let (sep, _) = born_pairing_reduced(&p, &v, 0.5f64.ln(), &[lp], Some(t)).unwrap()[0];
        assert!((field - sep).norm() < 1e-6 * sep.norm(), "{field} vs {sep}");
    }

    #[test]
    fn identical_potentials_are_stable() {
        let v = PotentialSpec::gaussian(1.0, 1.0, 1.0);
        let probes = &default_probes()[..2];
        let r = stability_experiment(&v, &v, probes, MultiIndex::ZERO, &solver()).unwrap();
        assert_eq!(r.operator_norm, 0.0);
        assert_eq!(r.left, 0.0);
    }

    #[test]
    fn fits_and_slopes() {
        let x = [0.4, 0.2, 0.1];
        let y: Vec<Complex64> = x.iter().map(|v| Complex64::new(1.0 + 2.0 * v, -3.0 * v)).collect();
        assert!((linear_intercept(&x, &y) - Complex64::new(1.0, 0.0)).norm() < 1e-14);
        let y: Vec<Complex64> = x.iter().map(|v| Complex64::new(2.0 - v * v + 3.0 * v.powi(4), 0.5)).collect();
        let a = polynomial_intercept(&x, &y, &Extrapolation::Even.powers(3));
        assert!((a - Complex64::new(2.0, 0.5)).norm() < 1e-12);
        let s = log_log_slope(&x, &x.map(|v| 5.0 * v * v)).unwrap();
        assert!((s - 2.0).abs() < 1e-12);
    }
}
