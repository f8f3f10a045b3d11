//! Direct problem: split-step scattering operator and its first Born approximation.

use crate::fields::{apply_quadratic_phase, fourier, inverse_fourier, Field3, Grid3, Space};
use crate::quadrature::tanh_sinh;
use crate::{Complex64, Error, Result};
use serde::{Deserialize, Serialize};

pub const SQRT_2PI_CUBED: f64 = 15.749_609_945_722_419;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SolverConfig {
    /// Evolution runs over `[-T, T]`.
    pub t_horizon: f64,
    pub dt: f64,
    pub grid: Grid3,
    /// Relative size of `(V∗|u|²)u` at `±T` above which free asymptotics are doubtful.
    pub interaction_cutoff: f64,
    /// Upper bound on `dt · max|ξ|²`.
    pub phase_step_limit: f64,
    /// Abort threshold for relative mass drift.
    pub mass_drift_limit: f64,
}

impl SolverConfig {
    pub fn new(grid: Grid3, t_horizon: f64, dt: f64) -> Self {
        SolverConfig {
            t_horizon,
            dt,
            grid,
            interaction_cutoff: 1e-8,
            phase_step_limit: 50.0,
            mass_drift_limit: 1e-10,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(Error::Argument(format!("dt must be positive, got {}", self.dt)));
        }
        if !(self.t_horizon > 0.0 && self.t_horizon.is_finite()) {
            return Err(Error::Argument(format!(
                "time horizon must be positive, got {}",
                self.t_horizon
            )));
        }
        let phase = self.dt * self.grid.max_k_sq();
        if phase > self.phase_step_limit {
            return Err(Error::Argument(format!(
                "dt·max|ξ|² = {phase:.3} exceeds the phase-step limit {}",
                self.phase_step_limit
            )));
        }
        Ok(())
    }

    pub fn steps(&self, span: f64) -> usize {
        ((span.abs() / self.dt) - 1e-9).ceil().max(1.0) as usize
    }
}

/// `ξ ↦ (2π)^{3/2} F V(ξ)` on the grid, with the unpaired Nyquist planes zeroed.
#[derive(Clone, Debug)]
pub struct Interaction {
    pub kernel: Field3,
}

impl Interaction {
    pub fn new(v: &Field3) -> Result<Self> {
        let mut kernel = fourier(v)?.scale(Complex64::new(SQRT_2PI_CUBED, 0.0));
        let n = kernel.grid.n;
        for (idx, val) in kernel.values.iter_mut().enumerate() {
            let i = kernel.grid.unindex(idx);
            if i.contains(&0) {
                *val = Complex64::new(0.0, 0.0);
            }
        }
        debug_assert_eq!(n, v.grid.n);
        Ok(Interaction { kernel })
    }

    /// `V∗|u|²` for position-space `u`.
    pub fn mean_field(&self, u: &Field3) -> Result<Vec<f64>> {
        let rho = Field3 {
            grid: u.grid,
            values: u.values.iter().map(|v| Complex64::new(v.norm_sqr(), 0.0)).collect(),
            space: Space::Position,
        };
        let mut spec = fourier(&rho)?;
        for (s, k) in spec.values.iter_mut().zip(&self.kernel.values) {
            *s *= k;
        }
        Ok(inverse_fourier(&spec)?.values.iter().map(|v| v.re).collect())
    }

    pub fn is_zero(&self) -> bool {
        self.kernel.values.iter().all(|k| *k == Complex64::new(0.0, 0.0))
    }

    /// `‖(V∗|u|²)u‖₂ / ‖u‖₂`.
    pub fn relative_strength(&self, u: &Field3) -> Result<f64> {
        let w = self.mean_field(u)?;
        let num: f64 = u.values.iter().zip(&w).map(|(a, b)| (a * b).norm_sqr()).sum();
        let den: f64 = u.values.iter().map(|a| a.norm_sqr()).sum();
        Ok((num / den.max(f64::MIN_POSITIVE)).sqrt())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvolveStats {
    pub steps: usize,
    pub mass_drift: f64,
}

const FREE: [f64; 3] = [1.0, 1.0, 1.0];

/// Strang split-step solution of `i∂ₜu + Δu = (V∗|u|²)u` from `t0` to `t1`.
pub fn evolve(u0: &Field3, t0: f64, t1: f64, v: &Field3, cfg: &SolverConfig) -> Result<(Field3, EvolveStats)> {
    let inter = Interaction::new(v)?;
    evolve_with(u0, t0, t1, &inter, cfg)
}

pub fn evolve_with(
    u0: &Field3,
    t0: f64,
    t1: f64,
    inter: &Interaction,
    cfg: &SolverConfig,
) -> Result<(Field3, EvolveStats)> {
    cfg.validate()?;
    u0.check_compatible(&Field3::zeros(inter.kernel.grid, Space::Position))?;
    let steps = cfg.steps(t1 - t0);
    let h = (t1 - t0) / steps as f64;
    let mass0 = u0.norm_sq();
    let mut spec = fourier(u0)?;
    apply_quadratic_phase(&mut spec, 0.5 * h, FREE);
    for s in 0..steps {
        let mut u = inverse_fourier(&spec)?;
        let w = inter.mean_field(&u)?;
        for (val, wi) in u.values.iter_mut().zip(&w) {
            *val *= Complex64::from_polar(1.0, -h * wi);
        }
        spec = fourier(&u)?;
        let last = s + 1 == steps;
        apply_quadratic_phase(&mut spec, if last { 0.5 * h } else { h }, FREE);
    }
    let u1 = inverse_fourier(&spec)?;
    let mass_drift = ((u1.norm_sq().sqrt() - mass0.sqrt()) / mass0.sqrt().max(f64::MIN_POSITIVE)).abs();
    if mass_drift > cfg.mass_drift_limit {
        return Err(Error::Numerical(format!(
            "mass drift {mass_drift:.3e} exceeds {:.1e}; reduce dt or enlarge the box",
            cfg.mass_drift_limit
        )));
    }
    Ok((u1, EvolveStats { steps, mass_drift }))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScatteringDiagnostics {
    pub mass_drift: f64,
    pub tail_minus: f64,
    pub tail_plus: f64,
    pub steps: usize,
    pub warnings: Vec<String>,
}

#[derive(Clone, Debug)]
pub struct ScatteringResult {
    pub phi_plus: Field3,
    pub diagnostics: ScatteringDiagnostics,
}

/// `S φ₋`: free flow back to `-T`, nonlinear flow to `+T`, free flow back to `0`.
pub fn scattering_apply(phi_minus: &Field3, v: &Field3, cfg: &SolverConfig) -> Result<ScatteringResult> {
    let inter = Interaction::new(v)?;
    scattering_apply_with(phi_minus, &inter, cfg)
}

pub fn scattering_apply_with(phi_minus: &Field3, inter: &Interaction, cfg: &SolverConfig) -> Result<ScatteringResult> {
    let t = cfg.t_horizon;
    let u_minus = crate::fields::free_propagate(phi_minus, -t)?;
    let tail_minus = inter.relative_strength(&u_minus)?;
    let (u_plus, stats) = evolve_with(&u_minus, -t, t, inter, cfg)?;
    let tail_plus = inter.relative_strength(&u_plus)?;
    let phi_plus = crate::fields::free_propagate(&u_plus, -t)?;
    let mut warnings = Vec::new();
    for (name, tail) in [("-T", tail_minus), ("+T", tail_plus)] {
        if tail > cfg.interaction_cutoff {
            warnings.push(format!(
                "interaction at {name} is {tail:.3e} of the mass, above cutoff {:.1e}",
                cfg.interaction_cutoff
            ));
        }
    }
    Ok(ScatteringResult {
        phi_plus,
        diagnostics: ScatteringDiagnostics {
            mass_drift: stats.mass_drift,
            tail_minus,
            tail_plus,
            steps: stats.steps,
            warnings,
        },
    })
}

/// Time nodes for the Born integral over `[-T, T]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "scheme", rename_all = "snake_case")]
pub enum BornQuadrature {
    /// Step midpoints of the split-step solver with the same `dt`; this is the
    /// exact linearization of the discrete solver in the data amplitude.
    Midpoint,
    /// Tanh-sinh on `[0, T]`, mirrored.
    TanhSinh { h: f64 },
}

impl BornQuadrature {
    pub fn nodes(&self, cfg: &SolverConfig) -> (Vec<f64>, Vec<f64>) {
        let t = cfg.t_horizon;
        match self {
            BornQuadrature::Midpoint => {
                let steps = cfg.steps(2.0 * t);
                let h = 2.0 * t / steps as f64;
                let nodes = (0..steps).map(|s| -t + (s as f64 + 0.5) * h).collect();
                (nodes, vec![h; steps])
            }
            BornQuadrature::TanhSinh { h } => {
                let (x, w) = tanh_sinh(t, *h);
                let mut nodes: Vec<f64> = x.iter().rev().map(|v| -v).collect();
                let mut weights: Vec<f64> = w.iter().rev().copied().collect();
                nodes.extend(x);
                weights.extend(w);
                (nodes, weights)
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BornDiagnostics {
    pub nodes: usize,
    pub tail_minus: f64,
    pub tail_plus: f64,
    pub warnings: Vec<String>,
}

/// `φ₋ - i ∫ U(-t)(V∗|U(t)φ₋|²)U(t)φ₋ dt` over `[-T, T]`.
pub fn born_scattering(
    phi_minus: &Field3,
    v: &Field3,
    cfg: &SolverConfig,
    quad: &BornQuadrature,
) -> Result<(Field3, BornDiagnostics)> {
    let inter = Interaction::new(v)?;
    born_scattering_with(phi_minus, &inter, cfg, quad)
}

pub fn born_scattering_with(
    phi_minus: &Field3,
    inter: &Interaction,
    cfg: &SolverConfig,
    quad: &BornQuadrature,
) -> Result<(Field3, BornDiagnostics)> {
    cfg.validate()?;
    let phi_hat = fourier(phi_minus)?;
    let (nodes, weights) = quad.nodes(cfg);
    let mut acc = Field3::zeros(phi_hat.grid, Space::Frequency);
    for (&t, &w) in nodes.iter().zip(&weights) {
        let mut s = phi_hat.clone();
        apply_quadratic_phase(&mut s, t, FREE);
        let mut u = inverse_fourier(&s)?;
        let mf = inter.mean_field(&u)?;
        for (val, m) in u.values.iter_mut().zip(&mf) {
            *val *= m;
        }
        let mut g = fourier(&u)?;
        apply_quadratic_phase(&mut g, -t, FREE);
        for (a, b) in acc.values.iter_mut().zip(&g.values) {
            *a += b * w;
        }
    }
    let correction = inverse_fourier(&acc)?;
    let out = phi_minus.sub(&correction.scale(Complex64::new(0.0, 1.0)))?;
    let tail = |t: f64| -> Result<f64> {
        inter.relative_strength(&crate::fields::free_propagate(phi_minus, t)?)
    };
    let (tail_minus, tail_plus) = (tail(-cfg.t_horizon)?, tail(cfg.t_horizon)?);
    let warnings = [tail_minus, tail_plus]
        .iter()
        .filter(|&&x| x > cfg.interaction_cutoff)
        .map(|x| format!("Born integrand at the horizon is {x:.3e}, above cutoff"))
        .collect();
    Ok((
        out,
        BornDiagnostics {
            nodes: nodes.len(),
            tail_minus,
            tail_plus,
            warnings,
        },
    ))
}

/// `⟨f, g⟩ = Σ f·conj(g)·Δx³`, conjugate-linear in the second slot.
pub fn pairing(f: &Field3, g: &Field3) -> Result<Complex64> {
    f.check_compatible(g)?;
    if f.space != Space::Position {
        return Err(Error::Argument("pairing expects position-space fields".into()));
    }
    let s: Complex64 = f.values.iter().zip(&g.values).map(|(a, b)| a * b.conj()).sum();
    Ok(s * f.grid.cell(Space::Position))
}

/// `⟨(S_Born - id)φ, φ̃⟩` through the identity
/// `-i (2π)^{3/2} ∫ F V(ξ) Φ(φ, φ̃, 1; t, ξ) d(t, ξ)` on the same periodic grid.
pub fn born_pairing_via_phi(
    phi: &Field3,
    phit: &Field3,
    inter: &Interaction,
    cfg: &SolverConfig,
    quad: &BornQuadrature,
) -> Result<Complex64> {
    let (nodes, weights) = quad.nodes(cfg);
    let cell = phi.grid.cell(Space::Frequency);
    let mut acc = Complex64::new(0.0, 0.0);
    for (&t, &w) in nodes.iter().zip(&weights) {
        let p = crate::phi::phi_mu(phi, phit, 1.0, 0, crate::indexcomb::EpsilonMask::ZERO, t)?;
        let s: Complex64 = p.values.iter().zip(&inter.kernel.values).map(|(a, k)| a * k).sum();
        acc += s * (w * cell);
    }
    Ok(Complex64::new(0.0, -1.0) * acc)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fields::free_propagate;
    use crate::potentials::PotentialSpec;

    fn setup(n: usize) -> (Grid3, Field3, Field3) {
        let grid = Grid3::new(n, 12.0).unwrap();
        let phi = Field3::from_fn(grid, Space::Position, |x| {
            let r2 = x[0] * x[0] + x[1] * x[1] + x[2] * x[2];
            Complex64::new((-r2 / 2.0).exp() * (1.0 + 0.3 * x[0]), 0.2 * x[1] * (-r2).exp())
        });
        let v = PotentialSpec::gaussian(1.0, 1.0, 3.0).sample(grid);
        (grid, phi, v)
    }

    #[test]
    fn zero_potential_is_identity() {
        let (grid, phi, _) = setup(16);
        let zero = Field3::zeros(grid, Space::Position);
        let cfg = SolverConfig::new(grid, 0.5, 0.05);
        let s = scattering_apply(&phi, &zero, &cfg).unwrap();
        assert!(s.phi_plus.sub(&phi).unwrap().norm_l2() < 1e-12 * phi.norm_l2());
        let (b, _) = born_scattering(&phi, &zero, &cfg, &BornQuadrature::Midpoint).unwrap();
        assert!(b.sub(&phi).unwrap().norm_l2() < 1e-12 * phi.norm_l2());
        let (u, _) = evolve(&phi, 0.0, 0.4, &zero, &cfg).unwrap();
        let f = free_propagate(&phi, 0.4).unwrap();
        assert!(u.sub(&f).unwrap().norm_l2() < 1e-12 * phi.norm_l2());
    }

    #[test]
    fn mass_is_conserved() {
        let (grid, phi, v) = setup(16);
        let cfg = SolverConfig::new(grid, 0.5, 0.05);
        let (_, stats) = evolve(&phi.scale(Complex64::new(2.0, 0.0)), -0.5, 0.5, &v, &cfg).unwrap();
        assert!(stats.mass_drift < 1e-12);
    }

    #[test]
    fn born_is_cubic() {
        let (grid, phi, v) = setup(16);
        let cfg = SolverConfig::new(grid, 0.4, 0.1);
        let q = BornQuadrature::Midpoint;
        let (b1, _) = born_scattering(&phi, &v, &cfg, &q).unwrap();
        let e = Complex64::new(0.3, 0.0);
        let (be, _) = born_scattering(&phi.scale(e), &v, &cfg, &q).unwrap();
        let lhs = be.sub(&phi.scale(e)).unwrap();
        let rhs = b1.sub(&phi).unwrap().scale(e * e * e);
        assert!(lhs.sub(&rhs).unwrap().norm_l2() < 1e-12 * rhs.norm_l2());
    }

    #[test]
    fn born_pairing_two_ways() {
        let (grid, phi, v) = setup(16);
        let phit = Field3::from_fn(grid, Space::Position, |x| {
            Complex64::new(x[0] * (-(x[0] * x[0] + x[1] * x[1] + x[2] * x[2]) / 2.0).exp(), 0.0)
        });
        let cfg = SolverConfig::new(grid, 0.6, 0.1);
        let inter = Interaction::new(&v).unwrap();
        for q in [BornQuadrature::Midpoint, BornQuadrature::TanhSinh { h: 0.3 }] {
            let (b, _) = born_scattering_with(&phi, &inter, &cfg, &q).unwrap();
            let lhs = pairing(&b.sub(&phi).unwrap(), &phit).unwrap();
            let rhs = born_pairing_via_phi(&phi, &phit, &inter, &cfg, &q).unwrap();
            assert!((lhs - rhs).norm() < 1e-12 * lhs.norm(), "{lhs} vs {rhs}");
        }
    }

    #[test]
    fn pairing_properties() {
        let (_, phi, v) = setup(8);
        let g = v;
        let a = pairing(&phi, &g).unwrap();
        let b = pairing(&g, &phi).unwrap();
        assert!((a - b.conj()).norm() < 1e-14);
        assert!(pairing(&phi, &phi).unwrap().re > 0.0);
        let ua = free_propagate(&phi, 0.3).unwrap();
        let ub = free_propagate(&g, 0.3).unwrap();
        assert!((pairing(&ua, &ub).unwrap() - a).norm() < 1e-11 * a.norm());
    }

    #[test]
    fn deviation_from_free_flow_is_cubic() {
        let (grid, phi, v) = setup(16);
        let cfg = SolverConfig::new(grid, 0.5, 0.05);
        let dev = |amp: f64| {
            let u0 = phi.scale(Complex64::new(amp, 0.0));
            let (u, _) = evolve(&u0, 0.0, 0.5, &v, &cfg).unwrap();
            u.sub(&free_propagate(&u0, 0.5).unwrap()).unwrap().norm_l2()
        };
        let slope = (dev(0.03) / dev(0.01)).ln() / 3f64.ln();
        assert!((slope - 3.0).abs() < 0.3, "{slope}");
    }
}
