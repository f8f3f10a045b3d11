//! Correlation functions `Φ`, their `(t, ξ)` moments, and the moment matrix.
//!
//! For `τ` beyond a threshold each axis is evaluated in the lens
//! representation `U(τ)ρ(x) = (2iτ)^{-1/2} e^{ix²/4τ} F[e^{iy²/4τ}ρ](x/2τ)`, which is
//! exact and keeps the relevant frequencies `ξ ~ 1/τ` resolved on a fixed grid.

use crate::fields::{
    aniso_coefficients, axis_coefficients, fourier, inverse_fourier, line_plan, quadratic_propagate,
    transform_axis, Field3, Grid3, PolyGaussian, ProductData, Sign, Space,
};
use crate::indexcomb::{factorial, ordered_basis, p_weight, EpsilonMask, MultiIndex, OrderedBasis};
use crate::quadrature::{gauss_legendre, tanh_sinh};
use crate::{Complex64, Error, Result};
use nalgebra::{DMatrix, DVector};
use num_traits::ToPrimitive;
use serde::{Deserialize, Serialize};
use std::f64::consts::LN_2;

const ZERO: Complex64 = Complex64 { re: 0.0, im: 0.0 };

/// `F|Uφ|² · conj F(conj(Uφ)·Uφ̃)` after both fields were evolved.
fn correlate(u: &Field3, v: &Field3) -> Result<Field3> {
    let grid = u.grid;
    let rho = Field3 {
        grid,
        values: u.values.iter().map(|a| Complex64::new(a.norm_sqr(), 0.0)).collect(),
        space: Space::Position,
    };
    let cross = Field3 {
        grid,
        values: u.values.iter().zip(&v.values).map(|(a, b)| a.conj() * b).collect(),
        space: Space::Position,
    };
    let fa = fourier(&rho)?;
    let fw = fourier(&cross)?;
    Ok(Field3 {
        grid,
        values: fa.values.iter().zip(&fw.values).map(|(a, b)| a * b.conj()).collect(),
        space: Space::Frequency,
    })
}

/// `Φ_{N,ε}(φ, φ̃, μ; t, ·)` on the frequency grid.
pub fn phi_mu(phi: &Field3, phit: &Field3, mu: f64, n: u32, eps: EpsilonMask, t: f64) -> Result<Field3> {
    phi.check_compatible(phit)?;
    let c = aniso_coefficients(mu, n, eps);
    correlate(&quadratic_propagate(phi, t, c)?, &quadratic_propagate(phit, t, c)?)
}

/// `Φ_ε(φ, φ̃; t, ·)`, the `μ → 0` limit.
pub fn phi_limit(phi: &Field3, phit: &Field3, eps: EpsilonMask, t: f64) -> Result<Field3> {
    phi.check_compatible(phit)?;
    let c = axis_coefficients(eps);
    correlate(&quadratic_propagate(phi, t, c)?, &quadratic_propagate(phit, t, c)?)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TimeScheme {
    TanhSinh,
    CompositeGauss,
}

/// Symmetric time nodes on `[-T_q, T_q]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimeQuadrature {
    pub t_max: f64,
    pub scheme: TimeScheme,
    pub nodes: Vec<f64>,
    pub weights: Vec<f64>,
}

impl TimeQuadrature {
    /// Tanh-sinh on `[0, T_q]` with step `h`, mirrored to negative times.
    pub fn tanh_sinh(t_max: f64, h: f64) -> Self {
        let (x, w) = tanh_sinh(t_max, h);
        Self::mirrored(t_max, TimeScheme::TanhSinh, x, w)
    }

    /// Gauss–Legendre of the given order on `panels` equal panels of `[0, T_q]`, mirrored.
    pub fn composite_gauss(t_max: f64, panels: usize, order: usize) -> Self {
        let (gx, gw) = gauss_legendre(order);
        let h = t_max / panels as f64;
        let mut x = Vec::new();
        let mut w = Vec::new();
        for p in 0..panels {
            for (a, b) in gx.iter().zip(&gw) {
                x.push((p as f64 + 0.5 + 0.5 * a) * h);
                w.push(0.5 * h * b);
            }
        }
        Self::mirrored(t_max, TimeScheme::CompositeGauss, x, w)
    }

    fn mirrored(t_max: f64, scheme: TimeScheme, x: Vec<f64>, w: Vec<f64>) -> Self {
        let mut nodes: Vec<f64> = x.iter().rev().map(|v| -v).collect();
        let mut weights: Vec<f64> = w.iter().rev().copied().collect();
        nodes.extend(x);
        weights.extend(w);
        TimeQuadrature {
            t_max,
            scheme,
            nodes,
            weights,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }
}

/// Power-law extrapolation of `∫_{T}^{∞} |f|` from samples at `T/2` and `T`.
fn power_tail(f_half: f64, f_end: f64, t_max: f64) -> f64 {
    if f_end == 0.0 {
        return 0.0;
    }
    let p = (f_half / f_end).log2();
    if p > 1.05 {
        f_end * t_max / (p - 1.0)
    } else {
        f64::INFINITY
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MomentValue {
    pub value: Complex64,
    /// Estimated contribution of `|t| > T_q`.
    pub tail_estimate: f64,
    /// `∫ |Σ_ξ ξ^β Φ|` over the nodes, a scale for roundoff-level comparisons.
    pub abs_scale: f64,
}

/// Which propagator family drives the moment.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MuChoice {
    Mu(f64),
    Limit,
}

impl MuChoice {
    pub fn coefficients(&self, n: u32, eps: EpsilonMask) -> [f64; 3] {
        match *self {
            MuChoice::Mu(mu) => aniso_coefficients(mu, n, eps),
            MuChoice::Limit => axis_coefficients(eps),
        }
    }
}

/// Per-axis hybrid evolution of both fields; returns `∫ ξ^β Φ dξ` for every `β`.
pub fn phi_moments_at(
    phi: &Field3,
    phit: &Field3,
    coeffs: [f64; 3],
    t: f64,
    betas: &[MultiIndex],
    lens_threshold: f64,
) -> Result<Vec<Complex64>> {
    phi.check_compatible(phit)?;
    let grid = phi.grid;
    let n = grid.n;
    let (dx, dk) = (grid.dx(), grid.dk());
    let xs = grid.xs();
    let ks = grid.ks();
    let mut u = phi.values.clone();
    let mut v = phit.values.clone();
    let mut lens = [false; 3];
    for axis in 0..3 {
        let tau = t * coeffs[axis];
        if tau == 0.0 {
            continue;
        }
        if tau.abs() <= lens_threshold {
            let phase: Vec<Complex64> = ks.iter().map(|k| Complex64::from_polar(1.0, -tau * k * k)).collect();
            for f in [&mut u, &mut v] {
                transform_axis(f, n, axis, Sign::Minus, dx);
                scale_along_axis(f, n, axis, &phase);
                transform_axis(f, n, axis, Sign::Plus, dk);
            }
        } else {
            lens[axis] = true;
            let chirp: Vec<Complex64> = xs
                .iter()
                .map(|x| Complex64::from_polar(1.0, x * x / (4.0 * tau)))
                .collect();
            for f in [&mut u, &mut v] {
                scale_along_axis(f, n, axis, &chirp);
                transform_axis(f, n, axis, Sign::Minus, dx);
            }
        }
    }
    let mut a: Vec<Complex64> = u.iter().map(|z| Complex64::new(z.norm_sqr(), 0.0)).collect();
    let mut w: Vec<Complex64> = u.iter().zip(&v).map(|(p, q)| p.conj() * q).collect();
    let mut coord = [ks.clone(), ks.clone(), ks.clone()];
    let mut cell = 1.0;
    for axis in 0..3 {
        let spacing = if lens[axis] { dk } else { dx };
        transform_axis(&mut a, n, axis, Sign::Minus, spacing);
        transform_axis(&mut w, n, axis, Sign::Minus, spacing);
        if lens[axis] {
            let tau = t * coeffs[axis];
            coord[axis] = xs.iter().map(|x| x / (2.0 * tau)).collect();
            cell *= dx / (2.0 * tau.abs());
        } else {
            cell *= dk;
        }
    }
    let mut out = vec![ZERO; betas.len()];
    for i0 in 0..n {
        for i1 in 0..n {
            let base = (i0 * n + i1) * n;
            for i2 in 0..n {
                let idx = base + i2;
                let val = a[idx] * w[idx].conj();
                for (o, b) in out.iter_mut().zip(betas) {
                    let m = coord[0][i0].powi(b.0[0] as i32)
                        * coord[1][i1].powi(b.0[1] as i32)
                        * coord[2][i2].powi(b.0[2] as i32);
                    *o += val * m;
                }
            }
        }
    }
    Ok(out.into_iter().map(|o| o * cell).collect())
}

fn scale_along_axis(f: &mut [Complex64], n: usize, axis: usize, factor: &[Complex64]) {
    for (idx, val) in f.iter_mut().enumerate() {
        let j = match axis {
            0 => idx / (n * n),
            1 => (idx / n) % n,
            _ => idx % n,
        };
        *val *= factor[j];
    }
}

/// `∫ ξ^β Φ(φ, φ̃, μ; t, ξ) d(t, ξ)` on the 3D grid with the given time nodes.
#[allow(clippy::too_many_arguments)]
pub fn moment_integrals(
    betas: &[MultiIndex],
    n: u32,
    eps: EpsilonMask,
    phi: &Field3,
    phit: &Field3,
    mu: MuChoice,
    quad: &TimeQuadrature,
    lens_threshold: f64,
) -> Result<Vec<MomentValue>> {
    let c = mu.coefficients(n, eps);
    let mut acc = vec![ZERO; betas.len()];
    let mut abs = vec![0.0; betas.len()];
    for (&t, &w) in quad.nodes.iter().zip(&quad.weights) {
        let m = phi_moments_at(phi, phit, c, t, betas, lens_threshold)?;
        for i in 0..betas.len() {
            acc[i] += m[i] * w;
            abs[i] += m[i].norm() * w;
        }
    }
    let tm = quad.t_max;
    let mut tails = vec![0.0; betas.len()];
    for sign in [1.0, -1.0] {
        let half = phi_moments_at(phi, phit, c, sign * tm / 2.0, betas, lens_threshold)?;
        let end = phi_moments_at(phi, phit, c, sign * tm, betas, lens_threshold)?;
        for i in 0..betas.len() {
            tails[i] += power_tail(half[i].norm(), end[i].norm(), tm);
        }
    }
    Ok((0..betas.len())
        .map(|i| MomentValue {
            value: acc[i],
            tail_estimate: tails[i],
            abs_scale: abs[i],
        })
        .collect())
}

/// Single-moment form with the tail check.
#[allow(clippy::too_many_arguments)]
pub fn moment_integral(
    beta: MultiIndex,
    n: u32,
    eps: EpsilonMask,
    phi: &Field3,
    phit: &Field3,
    mu: MuChoice,
    quad: &TimeQuadrature,
    lens_threshold: f64,
    tail_tolerance: f64,
) -> Result<MomentValue> {
    let m = moment_integrals(&[beta], n, eps, phi, phit, mu, quad, lens_threshold)?[0];
    if m.tail_estimate > tail_tolerance * m.abs_scale.max(m.value.norm()) {
        return Err(Error::Numerical(format!(
            "time tail {:.3e} beyond T_q = {} exceeds tolerance; increase T_q",
            m.tail_estimate, quad.t_max
        )));
    }
    Ok(m)
}

/// Periodic 1D grid for the separable oracle.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Line1 {
    pub n: usize,
    pub length: f64,
}

impl Line1 {
    pub fn grid(&self) -> Grid3 {
        Grid3 {
            n: self.n,
            box_length: self.length,
        }
    }
}

/// Samples of `ζ ↦ Ψ(τ, ζ)·dζ` at nodes `coords`, so `∫ g Ψ ≈ Σ g(ζ_j) w_j`.
#[derive(Clone, Debug, PartialEq)]
pub struct AxisKernel {
    pub tau: f64,
    pub coords: Vec<f64>,
    pub weights: Vec<Complex64>,
}

impl AxisKernel {
    pub fn integrate(&self, w: &AxisWeight) -> Complex64 {
        self.coords
            .iter()
            .zip(&self.weights)
            .map(|(&z, &k)| w.eval(z) * k)
            .sum()
    }
}

/// One-dimensional `Ψ(ρ, ρ̃; τ, ·)` evaluator.
#[derive(Clone, Debug)]
pub struct Kernel1D {
    pub line: Line1,
    pub lens_threshold: f64,
    rho: Vec<Complex64>,
    rhot: Vec<Complex64>,
    rho_hat: Vec<Complex64>,
    rhot_hat: Vec<Complex64>,
}

impl Kernel1D {
    pub fn new(rho: &PolyGaussian, rhot: &PolyGaussian, line: Line1, lens_threshold: f64) -> Self {
        let g = line.grid();
        let xs = g.xs();
        let rv: Vec<Complex64> = xs.iter().map(|&x| Complex64::new(rho.eval(x), 0.0)).collect();
        let tv: Vec<Complex64> = xs.iter().map(|&x| Complex64::new(rhot.eval(x), 0.0)).collect();
        let plan = line_plan(line.n);
        let mut rh = rv.clone();
        plan.apply(&mut rh, Sign::Minus, g.dx());
        let mut th = tv.clone();
        plan.apply(&mut th, Sign::Minus, g.dx());
        Kernel1D {
            line,
            lens_threshold,
            rho: rv,
            rhot: tv,
            rho_hat: rh,
            rhot_hat: th,
        }
    }

    fn correlate(&self, mut u: Vec<Complex64>, mut v: Vec<Complex64>, spacing: f64) -> Vec<Complex64> {
        let plan = line_plan(self.line.n);
        let mut a: Vec<Complex64> = u.iter().map(|z| Complex64::new(z.norm_sqr(), 0.0)).collect();
        for (p, q) in u.iter_mut().zip(v.iter_mut()) {
            *q *= p.conj();
        }
        plan.apply(&mut a, Sign::Minus, spacing);
        plan.apply(&mut v, Sign::Minus, spacing);
        a.iter().zip(&v).map(|(x, y)| x * y.conj()).collect()
    }

    /// Kernel at time `τ`, exact for every `τ` up to discretization.
    pub fn at(&self, tau: f64) -> AxisKernel {
        let g = self.line.grid();
        let (dx, dk) = (g.dx(), g.dk());
        let plan = line_plan(self.line.n);
        if tau.abs() <= self.lens_threshold {
            let ks = g.ks();
            let evolve = |hat: &[Complex64]| {
                let mut s: Vec<Complex64> = hat
                    .iter()
                    .zip(&ks)
                    .map(|(h, k)| h * Complex64::from_polar(1.0, -tau * k * k))
                    .collect();
                plan.apply(&mut s, Sign::Plus, dk);
                s
            };
            let psi = self.correlate(evolve(&self.rho_hat), evolve(&self.rhot_hat), dx);
            AxisKernel {
                tau,
                coords: ks,
                weights: psi.into_iter().map(|p| p * dk).collect(),
            }
        } else {
            let xs = g.xs();
            let chirped = |f: &[Complex64]| {
                let mut s: Vec<Complex64> = f
                    .iter()
                    .zip(&xs)
                    .map(|(v, x)| v * Complex64::from_polar(1.0, x * x / (4.0 * tau)))
                    .collect();
                plan.apply(&mut s, Sign::Minus, dx);
                s
            };
            let psi = self.correlate(chirped(&self.rho), chirped(&self.rhot), dk);
            let jac = dx / (2.0 * tau.abs());
            AxisKernel {
                tau,
                coords: xs.iter().map(|x| x / (2.0 * tau)).collect(),
                weights: psi.into_iter().map(|p| p * jac).collect(),
            }
        }
    }

    /// `|τ| → ∞` profile in the lens variable `η = 2τζ`, without the `1/(2|τ|)` factor.
    pub fn asymptotic(&self) -> AxisKernel {
        let g = self.line.grid();
        let psi = self.correlate(self.rho_hat.clone(), self.rhot_hat.clone(), g.dk());
        AxisKernel {
            tau: f64::INFINITY,
            coords: g.xs(),
            weights: psi.into_iter().map(|p| p * g.dx()).collect(),
        }
    }
}

/// `Ψ(ρ, ρ̃; t, ζ)` sampled at the nodes of the chosen representation.
pub fn psi_1d(rho: &PolyGaussian, rhot: &PolyGaussian, t: f64, line: Line1, lens_threshold: f64) -> (Vec<f64>, Vec<Complex64>) {
    let k = Kernel1D::new(rho, rhot, line, lens_threshold).at(t);
    let g = line.grid();
    let cell = if t.abs() <= lens_threshold {
        g.dk()
    } else {
        g.dx() / (2.0 * t.abs())
    };
    (k.coords, k.weights.into_iter().map(|w| w / cell).collect())
}

/// `Ψ(ρ, ρ̃; t, ζ)` at arbitrary points `ζ`.
///
/// Points outside the band `|ζ| < π/(s·dy)` resolved by the sampled densities return zero.
pub fn psi_at(
    rho: &PolyGaussian,
    rhot: &PolyGaussian,
    t: f64,
    zetas: &[f64],
    line: Line1,
    lens_threshold: f64,
) -> Vec<Complex64> {
    let kern = Kernel1D::new(rho, rhot, line, lens_threshold);
    let g = line.grid();
    let plan = line_plan(line.n);
    // Densities on a uniform grid `y` with spacing `dy`; `F a(ζ) = (2π)^{-1/2} Σ a(y) e^{-i s ζ y} dy`.
    let (u, v, ys, dy, s) = if t.abs() <= lens_threshold {
        let ks = g.ks();
        let evolve = |hat: &[Complex64]| {
            let mut f: Vec<Complex64> = hat
                .iter()
                .zip(&ks)
                .map(|(h, k)| h * Complex64::from_polar(1.0, -t * k * k))
                .collect();
            plan.apply(&mut f, Sign::Plus, g.dk());
            f
        };
        (evolve(&kern.rho_hat), evolve(&kern.rhot_hat), g.xs(), g.dx(), 1.0)
    } else {
        let xs = g.xs();
        let chirped = |f: &[Complex64]| {
            let mut c: Vec<Complex64> = f
                .iter()
                .zip(&xs)
                .map(|(v, x)| v * Complex64::from_polar(1.0, x * x / (4.0 * t)))
                .collect();
            plan.apply(&mut c, Sign::Minus, g.dx());
            c
        };
        (chirped(&kern.rho), chirped(&kern.rhot), g.ks(), g.dk(), 2.0 * t)
    };
    let a: Vec<f64> = u.iter().map(|z| z.norm_sqr()).collect();
    let w: Vec<Complex64> = u.iter().zip(&v).map(|(p, q)| p.conj() * q).collect();
    let c = crate::fields::INV_SQRT_2PI * dy;
    let band = std::f64::consts::PI / (s.abs() * dy);
    zetas
        .iter()
        .map(|&z| {
            if z.abs() >= band {
                return ZERO;
            }
            let mut fa = ZERO;
            let mut fw = ZERO;
            for ((y, av), wv) in ys.iter().zip(&a).zip(&w) {
                let e = Complex64::from_polar(1.0, -s * z * y);
                fa += e * *av;
                fw += e * wv;
            }
            fa * c * (fw * c).conj()
        })
        .collect()
}

/// Per-axis weight in a separable moment.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum AxisWeight {
    /// `ζ^k`.
    Monomial(u32),
    /// `exp(-quad·ζ² - i·lin·ζ)`.
    GaussianPhase { quad: f64, lin: f64 },
}

impl AxisWeight {
    pub fn eval(&self, z: f64) -> Complex64 {
        match *self {
            AxisWeight::Monomial(k) => Complex64::new(z.powi(k as i32), 0.0),
            AxisWeight::GaussianPhase { quad, lin } => Complex64::from_polar((-quad * z * z).exp(), -lin * z),
        }
    }

    /// Exponent `p` in the large-`τ` law `(2τ)^{-p} (2|τ|)^{-1} C`.
    fn power(&self) -> i32 {
        match *self {
            AxisWeight::Monomial(k) => k as i32,
            AxisWeight::GaussianPhase { .. } => 0,
        }
    }

    fn asymptotic_constant(&self, kinf: &AxisKernel) -> Complex64 {
        match *self {
            AxisWeight::Monomial(_) => kinf.integrate(self),
            AxisWeight::GaussianPhase { .. } => kinf.weights.iter().sum(),
        }
    }
}

/// Window in `σ = ln|τ|` outside which an axis is treated as frozen (`τ ≈ 0`)
/// or asymptotic (`|τ| → ∞`).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogTimeConfig {
    pub sigma_lo: f64,
    pub sigma_hi: f64,
    pub panel_width: f64,
    pub order: usize,
    /// Restricts the time integral to `|t| ≤ time_cut`.
    #[serde(default)]
    pub time_cut: Option<f64>,
}

impl Default for LogTimeConfig {
    fn default() -> Self {
        LogTimeConfig {
            sigma_lo: (1e-10f64).ln(),
            sigma_hi: (1e10f64).ln(),
            panel_width: 1.0,
            order: 16,
            time_cut: None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct IntegralValue {
    pub value: Complex64,
    pub error: f64,
    pub finite: bool,
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum AxisState {
    Frozen,
    Transitional,
    Asymptotic,
}

/// `∫_ℝ dt ∏_i ∫ g_i(ξ_i) Ψ_i(t·c_i, ξ_i) dξ_i` over the whole time line, for
/// each weight triple. Axes are given by their kernels and `ln c_i`
/// (`-∞` for an axis that never evolves).
pub struct SeparableIntegrator<'a> {
    pub kernels: [&'a Kernel1D; 3],
    pub ln_coeffs: [f64; 3],
    pub config: LogTimeConfig,
}

struct WeightConsts {
    frozen: [Complex64; 3],
    asym: [Complex64; 3],
    power: [i32; 3],
}

impl<'a> SeparableIntegrator<'a> {
    fn state(&self, axis: usize, s: f64) -> AxisState {
        let lc = self.ln_coeffs[axis];
        if lc == f64::NEG_INFINITY {
            return AxisState::Frozen;
        }
        let sigma = s + lc;
        if sigma < self.config.sigma_lo {
            AxisState::Frozen
        } else if sigma > self.config.sigma_hi {
            AxisState::Asymptotic
        } else {
            AxisState::Transitional
        }
    }

    /// Asymptotic factor as `(coefficient, log magnitude)`.
    fn asym_parts(c: &WeightConsts, axis: usize, sign: f64, sigma: f64) -> (Complex64, f64) {
        let p = c.power[axis];
        let sgn = if sign < 0.0 && p % 2 == 1 { -1.0 } else { 1.0 };
        (c.asym[axis] * sgn, -(p as f64 + 1.0) * (LN_2 + sigma))
    }

    pub fn integrate(&self, weights: &[[AxisWeight; 3]]) -> Vec<IntegralValue> {
        let k0: Vec<AxisKernel> = self.kernels.iter().map(|k| k.at(0.0)).collect();
        let kinf: Vec<AxisKernel> = self.kernels.iter().map(|k| k.asymptotic()).collect();
        let consts: Vec<WeightConsts> = weights
            .iter()
            .map(|w| WeightConsts {
                frozen: [0, 1, 2].map(|i| k0[i].integrate(&w[i])),
                asym: [0, 1, 2].map(|i| w[i].asymptotic_constant(&kinf[i])),
                power: [0, 1, 2].map(|i| w[i].power()),
            })
            .collect();

        let mut bps: Vec<f64> = Vec::new();
        for lc in self.ln_coeffs {
            if lc.is_finite() {
                bps.push(self.config.sigma_lo - lc);
                bps.push(self.config.sigma_hi - lc);
            }
        }
        let ln_cut = self.config.time_cut.map(f64::ln).unwrap_or(f64::INFINITY);
        if ln_cut.is_finite() {
            bps.push(ln_cut);
        }
        if bps.is_empty() {
            bps.push(0.0);
        }
        bps.sort_by(|a, b| a.partial_cmp(b).unwrap());
        bps.dedup();

        let mut out = vec![
            IntegralValue {
                value: ZERO,
                error: 0.0,
                finite: true,
            };
            weights.len()
        ];
        let rule_hi = gauss_legendre(self.config.order);
        let rule_lo = gauss_legendre(self.config.order / 2);
        for sign in [1.0, -1.0] {
            let mut segments: Vec<(f64, f64)> = Vec::new();
            segments.push((f64::NEG_INFINITY, bps[0]));
            for w in bps.windows(2) {
                segments.push((w[0], w[1]));
            }
            segments.push((*bps.last().unwrap(), f64::INFINITY));
            for (a, b) in segments {
                if a >= ln_cut {
                    continue;
                }
                let probe = if a.is_infinite() {
                    b - 1.0
                } else if b.is_infinite() {
                    a + 1.0
                } else {
                    0.5 * (a + b)
                };
                let states = [0, 1, 2].map(|i| self.state(i, probe));
                if states.contains(&AxisState::Transitional) {
                    let hi = self.numeric_segment(a, b, sign, &consts, weights, &rule_hi);
                    let lo = self.numeric_segment(a, b, sign, &consts, weights, &rule_lo);
                    for i in 0..weights.len() {
                        out[i].value += hi[i];
                        out[i].error += (hi[i] - lo[i]).norm();
                    }
                } else {
                    for (i, c) in consts.iter().enumerate() {
                        match Self::analytic_segment(a, b, sign, &states, c, &self.ln_coeffs) {
                            Some(v) => out[i].value += v,
                            None => out[i].finite = false,
                        }
                    }
                }
            }
        }
        for o in &mut out {
            if !o.finite {
                o.value = Complex64::new(f64::INFINITY, 0.0);
                o.error = f64::INFINITY;
            } else {
                o.error += 1e-14 * o.value.norm();
            }
        }
        out
    }

    fn analytic_segment(
        a: f64,
        b: f64,
        sign: f64,
        states: &[AxisState; 3],
        c: &WeightConsts,
        ln_coeffs: &[f64; 3],
    ) -> Option<Complex64> {
        let mut k = Complex64::new(1.0, 0.0);
        let mut kappa = 1.0;
        let mut big_l = 0.0;
        for i in 0..3 {
            match states[i] {
                AxisState::Frozen => k *= c.frozen[i],
                AxisState::Asymptotic => {
                    let p = c.power[i];
                    let sgn = if sign < 0.0 && p % 2 == 1 { -1.0 } else { 1.0 };
                    k *= c.asym[i] * sgn;
                    kappa -= p as f64 + 1.0;
                    big_l -= (p as f64 + 1.0) * (LN_2 + ln_coeffs[i]);
                }
                AxisState::Transitional => unreachable!(),
            }
        }
        if k == ZERO {
            return Some(ZERO);
        }
        let len = b - a;
        let mag = if kappa == 0.0 {
            if len.is_infinite() {
                return None;
            }
            len * big_l.exp()
        } else if kappa > 0.0 {
            if b.is_infinite() {
                return None;
            }
            (kappa * b + big_l).exp() * (-(-kappa * len).exp_m1()) / kappa
        } else {
            if a.is_infinite() {
                return None;
            }
            (kappa * a + big_l).exp() * (-(kappa * len).exp_m1()) / (-kappa)
        };
        Some(k * mag)
    }

    fn numeric_segment(
        &self,
        a: f64,
        b: f64,
        sign: f64,
        consts: &[WeightConsts],
        weights: &[[AxisWeight; 3]],
        rule: &(Vec<f64>, Vec<f64>),
    ) -> Vec<Complex64> {
        let panels = ((b - a) / self.config.panel_width).ceil().max(1.0) as usize;
        let h = (b - a) / panels as f64;
        let mut acc = vec![ZERO; weights.len()];
        for p in 0..panels {
            let mid = a + (p as f64 + 0.5) * h;
            for (x, wq) in rule.0.iter().zip(&rule.1) {
                let s = mid + 0.5 * h * x;
                let mut kern: [Option<AxisKernel>; 3] = [None, None, None];
                let states = [0, 1, 2].map(|i| self.state(i, s));
                for i in 0..3 {
                    if states[i] == AxisState::Transitional {
                        let tau = sign * (s + self.ln_coeffs[i]).exp();
                        kern[i] = Some(self.kernels[i].at(tau));
                    }
                }
                for (wi, (c, w)) in consts.iter().zip(weights).enumerate() {
                    // e^s and the asymptotic power laws are combined before exponentiating.
                    let mut ln_mag = s;
                    let mut prod = Complex64::new(0.5 * h * wq, 0.0);
                    for i in 0..3 {
                        prod *= match states[i] {
                            AxisState::Frozen => c.frozen[i],
                            AxisState::Asymptotic => {
                                let (v, l) = Self::asym_parts(c, i, sign, s + self.ln_coeffs[i]);
                                ln_mag += l;
                                v
                            }
                            AxisState::Transitional => kern[i].as_ref().unwrap().integrate(&w[i]),
                        };
                    }
                    if prod != ZERO {
                        acc[wi] += prod * ln_mag.exp();
                    }
                }
            }
        }
        acc
    }
}

/// Node-by-node separable moments `Σ_t w_t ∏_i ∫ ζ^{β_i} Ψ_i(t c_i, ζ) dζ`,
/// the 1D counterpart of [`moment_integrals`] on the same time nodes.
pub fn separable_moments_on_nodes(
    kernels: [&Kernel1D; 3],
    coeffs: [f64; 3],
    betas: &[MultiIndex],
    quad: &TimeQuadrature,
) -> Vec<Complex64> {
    let mut acc = vec![ZERO; betas.len()];
    for (&t, &w) in quad.nodes.iter().zip(&quad.weights) {
        let ks: Vec<AxisKernel> = (0..3).map(|i| kernels[i].at(t * coeffs[i])).collect();
        for (o, b) in acc.iter_mut().zip(betas) {
            let mut prod = Complex64::new(w, 0.0);
            for i in 0..3 {
                prod *= ks[i].integrate(&AxisWeight::Monomial(b.0[i]));
            }
            *o += prod;
        }
    }
    acc
}

/// `∫ ζ^k Ψ(ρ, ρ̃; t, ζ) dζ`.
pub fn separable_moment(rho: &PolyGaussian, rhot: &PolyGaussian, t: f64, k: u32, line: Line1, lens_threshold: f64) -> Complex64 {
    Kernel1D::new(rho, rhot, line, lens_threshold)
        .at(t)
        .integrate(&AxisWeight::Monomial(k))
}

/// Product data `φ = ρ₁⊗ρ₂⊗ρ₃` with `φ̃ = ∂^ε φ`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExampleData {
    pub profiles: [PolyGaussian; 3],
    pub eps: EpsilonMask,
}

impl ExampleData {
    pub fn gaussian(eps: EpsilonMask) -> Self {
        ExampleData {
            profiles: [
                PolyGaussian::gaussian(1.0),
                PolyGaussian::gaussian(1.0),
                PolyGaussian::gaussian(1.0),
            ],
            eps,
        }
    }

    pub fn phi(&self) -> ProductData {
        ProductData {
            factors: self.profiles.clone(),
        }
    }

    pub fn phit(&self) -> ProductData {
        self.phi().derivative(self.eps.as_u32())
    }

    pub fn kernels(&self, line: Line1, lens_threshold: f64) -> [Kernel1D; 3] {
        let phit = self.phit();
        [0, 1, 2].map(|i| Kernel1D::new(&self.profiles[i], &phit.factors[i], line, lens_threshold))
    }
}

/// Discretization settings for separable moments.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MomentConfig {
    pub line: Line1,
    pub lens_threshold: f64,
    pub log_time: LogTimeConfig,
    /// Scaled condition numbers above this flag the matrix as non-invertible.
    pub condition_threshold: f64,
}

impl Default for MomentConfig {
    fn default() -> Self {
        MomentConfig {
            line: Line1 { n: 1024, length: 64.0 },
            lens_threshold: 1.0,
            log_time: LogTimeConfig::default(),
            condition_threshold: 1e8,
        }
    }
}

/// `value = mantissa · e^{ln_scale}`; keeps entries with `μ_j^{P}` far below `f64` range.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogScaled {
    pub mantissa: Complex64,
    pub ln_scale: f64,
}

impl LogScaled {
    pub fn value(&self) -> Complex64 {
        self.mantissa * self.ln_scale.exp()
    }

    pub fn ln_abs(&self) -> f64 {
        self.mantissa.norm().ln() + self.ln_scale
    }
}

/// `ln μ_j = (N+1)^{2(j-1)} ln μ` for 1-based `j`.
pub fn row_ln_mu(n: u32, mu: f64, j: usize) -> f64 {
    ((n as f64 + 1.0).powi(2 * (j as i32 - 1))) * mu.ln()
}

/// `ln` of the squared `D^{1,μ_j}` diagonal.
pub fn ln_dispersion(n: u32, eps: EpsilonMask, ln_mu: f64) -> [f64; 3] {
    let base = [0.0, 2.0 * ln_mu, 2.0 * (n as f64 + 1.0) * ln_mu];
    eps.apply(base)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MomentEntry {
    pub j: usize,
    pub k: usize,
    pub alpha: MultiIndex,
    pub exponent: MultiIndex,
    pub ln_mu_j: f64,
    pub moment: IntegralValue,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MomentMatrix {
    pub n: u32,
    pub eps: EpsilonMask,
    pub mu: f64,
    pub basis: OrderedBasis,
    /// Row-major `N*×N*` entries.
    pub entries: Vec<Vec<LogScaled>>,
    pub moments: Vec<MomentEntry>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MatrixReport {
    pub ln_abs_det: f64,
    pub log10_abs_det: f64,
    /// 2-norm condition number after row/column equilibration.
    pub condition_number: f64,
    /// Condition number of the unscaled matrix, when representable.
    pub raw_condition_number: Option<f64>,
    pub invertible: bool,
    pub threshold: f64,
}

/// Row and column log-scales from the dual of the max-weight assignment on
/// `g = ln|entry|`: afterwards the optimal permutation has unit-modulus entries
/// and every other entry is at most one in modulus.
fn equilibrate(g: &[Vec<f64>]) -> (Vec<f64>, Vec<f64>) {
    let n = g.len();
    let finite_min = g.iter().flatten().copied().filter(|x| x.is_finite()).fold(f64::INFINITY, f64::min);
    let finite_max = g.iter().flatten().copied().filter(|x| x.is_finite()).fold(f64::NEG_INFINITY, f64::max);
    if !finite_min.is_finite() {
        return (vec![0.0; n], vec![0.0; n]);
    }
    let floor = finite_min - (finite_max - finite_min) - 1e3;
    // Kuhn–Munkres on cost -g with 1-based potentials.
    let cost = |i: usize, j: usize| -> f64 {
        let x = g[i - 1][j - 1];
        -(if x.is_finite() { x } else { floor })
    };
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=n {
                if !used[j] {
                    let cur = cost(i0, j) - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    // u_i + v_j <= -g_ij with equality on the assignment.
    ((1..=n).map(|i| -u[i]).collect(), (1..=n).map(|j| -v[j]).collect())
}

impl MomentMatrix {
    pub fn size(&self) -> usize {
        self.basis.len()
    }

    fn scaled(&self) -> (DMatrix<Complex64>, Vec<f64>, Vec<f64>) {
        let n = self.size();
        let g: Vec<Vec<f64>> = self
            .entries
            .iter()
            .map(|row| row.iter().map(|e| e.ln_abs()).collect())
            .collect();
        let (r, c) = equilibrate(&g);
        let m = DMatrix::from_fn(n, n, |j, k| {
            let e = self.entries[j][k];
            e.mantissa * (e.ln_scale - r[j] - c[k]).exp()
        });
        (m, r, c)
    }

    pub fn report(&self, threshold: f64) -> MatrixReport {
        let (m, r, c) = self.scaled();
        let det = m.clone().determinant();
        let ln_abs_det = det.norm().ln() + r.iter().sum::<f64>() + c.iter().sum::<f64>();
        let sv = m.clone().svd(false, false).singular_values;
        let smax = sv.iter().cloned().fold(0.0, f64::max);
        let smin = sv.iter().cloned().fold(f64::INFINITY, f64::min);
        let cond = if smin > 0.0 { smax / smin } else { f64::INFINITY };
        let raw_condition_number = {
            let n = self.size();
            let vals: Vec<Complex64> = self.entries.iter().flatten().map(|e| e.value()).collect();
            if vals.iter().all(|v| v.norm() > 0.0 && v.norm().is_finite()) {
                let raw = DMatrix::from_fn(n, n, |j, k| self.entries[j][k].value());
                let sv = raw.svd(false, false).singular_values;
                let smin = sv.iter().cloned().fold(f64::INFINITY, f64::min);
                Some(if smin > 0.0 { sv.max() / smin } else { f64::INFINITY })
            } else {
                None
            }
        };
        MatrixReport {
            ln_abs_det,
            log10_abs_det: ln_abs_det / std::f64::consts::LN_10,
            condition_number: cond,
            raw_condition_number,
            invertible: det.norm() > 0.0 && cond.is_finite() && cond < threshold,
            threshold,
        }
    }

    /// Solves `𝔐 a = b` by LU with partial pivoting on the equilibrated system.
    pub fn solve(&self, b: &[Complex64]) -> Result<Vec<Complex64>> {
        let n = self.size();
        if b.len() != n {
            return Err(Error::Argument(format!("right-hand side has length {}, expected {n}", b.len())));
        }
        let (m, r, c) = self.scaled();
        let rhs = DVector::from_fn(n, |j, _| b[j] * (-r[j]).exp());
        let y = m
            .lu()
            .solve(&rhs)
            .ok_or_else(|| Error::Numerical("moment matrix is singular".into()))?;
        Ok((0..n).map(|k| y[k] * (-c[k]).exp()).collect())
    }
}

/// Builds `𝔐_{N,ε}[φ, φ̃, μ]` for product example data.
pub fn assemble_m(
    n: u32,
    eps: EpsilonMask,
    example: &ExampleData,
    mu: f64,
    cfg: &MomentConfig,
) -> Result<(MomentMatrix, MatrixReport)> {
    if !(mu > 0.0 && mu < 1.0) {
        return Err(Error::Argument(format!("mu must lie in (0, 1), got {mu}")));
    }
    if example.eps != eps {
        return Err(Error::Argument("example data built for a different mask".into()));
    }
    let basis = ordered_basis(n, eps)?;
    let ns = basis.len();
    let exps = basis.exponents();
    let big_l = 2 * n + eps.weight();
    let kernels = example.kernels(cfg.line, cfg.lens_threshold);
    let weights: Vec<[AxisWeight; 3]> = exps
        .iter()
        .map(|b| [AxisWeight::Monomial(b.0[0]), AxisWeight::Monomial(b.0[1]), AxisWeight::Monomial(b.0[2])])
        .collect();
    let lfact = factorial(big_l);
    let mut entries = Vec::with_capacity(ns);
    let mut moments = Vec::new();
    for j in 1..=ns {
        let ln_mu = row_ln_mu(n, mu, j);
        let integ = SeparableIntegrator {
            kernels: [&kernels[0], &kernels[1], &kernels[2]],
            ln_coeffs: ln_dispersion(n, eps, ln_mu),
            config: cfg.log_time,
        };
        let vals = integ.integrate(&weights);
        let mut row = Vec::with_capacity(ns);
        for (k, v) in vals.iter().enumerate() {
            if !v.finite {
                return Err(Error::Numerical(format!("moment ({j},{}) diverges", k + 1)));
            }
            if !(v.value.re.is_finite() && v.value.im.is_finite()) {
                return Err(Error::Numerical(format!("moment ({j},{}) is not representable", k + 1)));
            }
            let coef = (lfact.clone() * 1u32).to_f64().unwrap() / exps[k].factorial().to_f64().unwrap();
            row.push(LogScaled {
                mantissa: v.value * coef,
                ln_scale: p_weight(n, eps, exps[k]) as f64 * ln_mu,
            });
            moments.push(MomentEntry {
                j,
                k: k + 1,
                alpha: basis.seq[k],
                exponent: exps[k],
                ln_mu_j: ln_mu,
                moment: *v,
            });
        }
        entries.push(row);
    }
    let m = MomentMatrix {
        n,
        eps,
        mu,
        basis,
        entries,
        moments,
    };
    let report = m.report(cfg.condition_threshold);
    Ok((m, report))
}

/// Writes moment rows as CSV: `j,k,alpha,exponent,mu_j,re,im,tail_estimate`.
pub fn write_moment_csv<W: std::io::Write>(w: W, m: &MomentMatrix) -> Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    wr.write_record(["j", "k", "alpha", "exponent", "mu_j", "re", "im", "tail_estimate"])
        .map_err(csv_err)?;
    for e in &m.moments {
        wr.write_record([
            e.j.to_string(),
            e.k.to_string(),
            e.alpha.to_string(),
            e.exponent.to_string(),
            format!("{:e}", e.ln_mu_j.exp()),
            format!("{:e}", e.moment.value.re),
            format!("{:e}", e.moment.value.im),
            format!("{:e}", e.moment.error),
        ])
        .map_err(csv_err)?;
    }
    wr.flush()?;
    Ok(())
}

pub(crate) fn csv_err(e: csv::Error) -> Error {
    Error::Numerical(format!("csv: {e}"))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct C3Entry {
    pub alpha: MultiIndex,
    pub exponent: MultiIndex,
    pub value: Complex64,
    pub error: f64,
    pub finite: bool,
    pub significant: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConditionReport {
    pub c1: bool,
    pub c1_defect: f64,
    pub c2: bool,
    pub c2_defect: f64,
    pub c3: Vec<C3Entry>,
    pub c3_pass: bool,
    /// For `ε = 0` with `φ̃ = φ`, positivity makes C3 automatic.
    pub c3_automatic: bool,
}

/// Significance factor: a C3 moment must exceed this multiple of its error.
pub const C3_SIGNIFICANCE: f64 = 100.0;

/// Checks reflection symmetries by sampling and computes the limit moments.
pub fn check_conditions(example: &ExampleData, n: u32, cfg: &MomentConfig) -> Result<ConditionReport> {
    let eps = example.eps;
    let phi = example.phi();
    let phit = example.phit();
    let mut c1_defect: f64 = 0.0;
    let mut c2_defect: f64 = 0.0;
    let mut seed = 0x2545_f491_4f6c_dd1du64;
    let mut next = || {
        seed ^= seed << 13;
        seed ^= seed >> 7;
        seed ^= seed << 17;
        (seed >> 11) as f64 / (1u64 << 53) as f64 * 6.0 - 3.0
    };
    for _ in 0..64 {
        let x = [next(), next(), next()];
        let scale = phi.eval(x).abs().max(phit.eval(x).abs()).max(1e-300);
        for jax in 0..3 {
            let mut y = x;
            y[jax] = -y[jax];
            c1_defect = c1_defect.max((phi.eval(y) - phi.eval(x)).abs() / scale);
            let s = if eps.0[jax] == 1 { -1.0 } else { 1.0 };
            c2_defect = c2_defect.max((phit.eval(y) - s * phit.eval(x)).abs() / scale);
        }
    }
    let basis = ordered_basis(n, eps)?;
    let kernels = example.kernels(cfg.line, cfg.lens_threshold);
    let mut ln = [f64::NEG_INFINITY; 3];
    ln[eps.lead_axis()] = 0.0;
    let integ = SeparableIntegrator {
        kernels: [&kernels[0], &kernels[1], &kernels[2]],
        ln_coeffs: ln,
        config: cfg.log_time,
    };
    let exps = basis.exponents();
    let weights: Vec<[AxisWeight; 3]> = exps
        .iter()
        .map(|b| [AxisWeight::Monomial(b.0[0]), AxisWeight::Monomial(b.0[1]), AxisWeight::Monomial(b.0[2])])
        .collect();
    let vals = integ.integrate(&weights);
    let c3: Vec<C3Entry> = vals
        .iter()
        .zip(basis.seq.iter().zip(&exps))
        .map(|(v, (a, b))| C3Entry {
            alpha: *a,
            exponent: *b,
            value: v.value,
            error: v.error,
            finite: v.finite,
            significant: v.finite && v.value.norm() > C3_SIGNIFICANCE * v.error,
        })
        .collect();
    let c3_automatic = eps.weight() == 0 && phi == phit;
    let c3_pass = c3_automatic || c3.iter().all(|e| e.significant);
    Ok(ConditionReport {
        c1: c1_defect < 1e-12,
        c1_defect,
        c2: c2_defect < 1e-12,
        c2_defect,
        c3,
        c3_pass,
        c3_automatic,
    })
}

/// Samples analytic product data on a 3D grid.
pub fn sample_pair(example: &ExampleData, grid: Grid3) -> (Field3, Field3) {
    (example.phi().sample(grid), example.phit().sample(grid))
}

/// `F^{-1}` of a frequency field; convenience for diagnostics.
pub fn to_position(f: &Field3) -> Result<Field3> {
    inverse_fourier(f)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quadrature::adaptive_gl;

    fn line() -> Line1 {
        Line1 { n: 1024, length: 64.0 }
    }

    #[test]
    fn phi_nonnegative_for_equal_data() {
        let grid = Grid3::new(16, 12.0).unwrap();
        let ex = ExampleData::gaussian(EpsilonMask::ZERO);
        let (p, _) = sample_pair(&ex, grid);
        for t in [0.0, 0.4, -1.3] {
            let f = phi_mu(&p, &p, 0.3, 1, EpsilonMask::ZERO, t).unwrap();
            for v in &f.values {
                assert!(v.re >= 0.0 && v.im == 0.0);
            }
        }
    }

    #[test]
    fn limit_matches_mu_at_time_zero() {
        let grid = Grid3::new(16, 12.0).unwrap();
        let eps = EpsilonMask::new(0, 1, 0).unwrap();
        let (p, q) = sample_pair(&ExampleData::gaussian(eps), grid);
        let a = phi_mu(&p, &q, 0.2, 1, eps, 0.0).unwrap();
        let b = phi_limit(&p, &q, eps, 0.0).unwrap();
        assert_eq!(a.values, b.values);
    }

    #[test]
    fn lens_and_direct_kernels_agree() {
        let rho = PolyGaussian::gaussian(1.0);
        let rhot = rho.derivative();
        let direct = Kernel1D::new(&rho, &rhot, line(), 10.0);
        let lens = Kernel1D::new(&rho, &rhot, line(), 0.1);
        for tau in [0.5, 2.0, -3.0] {
            for k in 0..5 {
                let w = AxisWeight::Monomial(k);
                let a = direct.at(tau).integrate(&w);
                let b = lens.at(tau).integrate(&w);
                assert!((a - b).norm() < 1e-10 * (1.0 + a.norm()), "tau {tau} k {k}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn psi_imaginary_part_identity() {
        let rho = PolyGaussian::hermite(1.0, 0.3);
        let rhop = rho.derivative();
        let zetas: Vec<f64> = (-8..=8).map(|i| 0.25 * i as f64).collect();
        for t in [0.0, 0.3, -0.8, 2.5, -7.0] {
            let mixed = psi_at(&rho, &rhop, t, &zetas, line(), 1.0);
            let plain = psi_at(&rho, &rho, t, &zetas, line(), 1.0);
            let scale = plain.iter().map(|p| p.norm()).fold(0.0, f64::max);
            for ((m, p), z) in mixed.iter().zip(&plain).zip(&zetas) {
                assert!((m.im + 0.5 * z * p.re).abs() < 1e-10 * scale, "t {t} z {z}");
            }
        }
    }

    #[test]
    fn psi_at_matches_grid_samples() {
        let rho = PolyGaussian::gaussian(1.0);
        let rhot = rho.derivative();
        for t in [0.5, 3.0] {
            let (z, v) = psi_1d(&rho, &rhot, t, line(), 1.0);
            let pick: Vec<usize> = vec![500, 512, 530];
            let pts: Vec<f64> = pick.iter().map(|&i| z[i]).collect();
            let w = psi_at(&rho, &rhot, t, &pts, line(), 1.0);
            for (i, wv) in pick.iter().zip(&w) {
                assert!((v[*i] - wv).norm() < 1e-12, "t {t}");
            }
        }
    }

    #[test]
    fn even_profile_moments() {
        let rho = PolyGaussian::gaussian(1.0);
        for m in 0..3 {
            let even = separable_moment(&rho, &rho, 0.0, 2 * m + 2, line(), 1.0);
            let odd = separable_moment(&rho, &rho, 0.0, 2 * m + 1, line(), 1.0);
            assert!(even.re > 0.0);
            assert!(odd.norm() < 1e-14);
        }
    }

    #[test]
    fn three_dimensional_moments_factorize() {
        let grid = Grid3::new(64, 20.0).unwrap();
        let eps = EpsilonMask::new(1, 0, 0).unwrap();
        let ex = ExampleData::gaussian(eps);
        let (p, q) = sample_pair(&ex, grid);
        let quad = TimeQuadrature::composite_gauss(3.0, 1, 2);
        let betas = [MultiIndex::new(1, 0, 0), MultiIndex::new(3, 2, 0), MultiIndex::new(1, 0, 2)];
        let mu = MuChoice::Mu(0.5);
        let m3 = moment_integrals(&betas, 1, eps, &p, &q, mu, &quad, 1.0).unwrap();
        let ks = ex.kernels(line(), 1.0);
        let m1 = separable_moments_on_nodes([&ks[0], &ks[1], &ks[2]], mu.coefficients(1, eps), &betas, &quad);
        for (a, b) in m3.iter().zip(&m1) {
            assert!((a.value - b).norm() < 1e-8 * b.norm(), "{} vs {}", a.value, b);
        }
    }

    #[test]
    fn log_time_integrator_matches_direct_quadrature() {
        let ex = ExampleData::gaussian(EpsilonMask::ZERO);
        let ks = ex.kernels(line(), 1.0);
        let ln_c = [0.0, 2.0 * 0.5f64.ln(), 2.0 * 0.5f64.ln()];
        let integ = SeparableIntegrator {
            kernels: [&ks[0], &ks[1], &ks[2]],
            ln_coeffs: ln_c,
            config: LogTimeConfig::default(),
        };
        let w = [AxisWeight::Monomial(2), AxisWeight::Monomial(0), AxisWeight::Monomial(0)];
        let full = integ.integrate(&[w])[0];
        let c = ln_c.map(f64::exp);
        let f = |t: f64| -> f64 {
            (0..3).map(|i| ks[i].at(t * c[i]).integrate(&w[i])).product::<Complex64>().re
        };
        let t_end = 400.0;
        let (body, _) = adaptive_gl(f, 0.0, t_end, 1e-10).unwrap();
        // Large-time law: ∏_i (2 τ_i)^{-p_i} (2|τ_i|)^{-1} C_i with total power t^{-5}.
        let kinf: Vec<AxisKernel> = ks.iter().map(|k| k.asymptotic()).collect();
        let mut amp = 1.0;
        for i in 0..3 {
            let p = if i == 0 { 2 } else { 0 };
            amp *= kinf[i].integrate(&w[i]).re / (2.0 * c[i]).powi(p + 1);
        }
        let tail = amp / (4.0 * t_end.powi(4));
        let expect = 2.0 * (body + tail);
        assert!((full.value.re - expect).abs() < 1e-7 * expect, "{} vs {}", full.value.re, expect);
        assert!(full.error < 1e-8 * expect);
    }

    #[test]
    fn scalar_matrix_is_positive() {
        let ex = ExampleData::gaussian(EpsilonMask::ZERO);
        let (m, r) = assemble_m(0, EpsilonMask::ZERO, &ex, 0.5, &MomentConfig::default()).unwrap();
        let v = m.entries[0][0].value();
        assert!(v.re > 0.0 && v.im.abs() < 1e-12 * v.re);
        assert!(r.invertible);
        let a = m.solve(&[v * 2.0]).unwrap();
        assert!((a[0] - 2.0).norm() < 1e-12);
    }

    #[test]
    fn solve_inverts_small_mu_matrix() {
        let eps = EpsilonMask::new(0, 1, 1).unwrap();
        let ex = ExampleData::gaussian(eps);
        let (m, r) = assemble_m(1, eps, &ex, 0.1, &MomentConfig::default()).unwrap();
        assert!(r.invertible, "{r:?}");
        let truth = [Complex64::new(0.0, 1.0), Complex64::new(-0.5, 0.0), Complex64::new(0.25, 0.0)];
        let b: Vec<Complex64> = (0..3)
            .map(|j| (0..3).map(|k| m.entries[j][k].value() * truth[k]).sum())
            .collect();
        let a = m.solve(&b).unwrap();
        for k in 0..3 {
            assert!((a[k] - truth[k]).norm() < 1e-4, "{k}: {}", a[k]);
        }
    }

    #[test]
    fn conditions_for_example_data() {
        let eps = EpsilonMask::new(1, 0, 1).unwrap();
        let ex = ExampleData::gaussian(eps);
        let r = check_conditions(&ex, 1, &MomentConfig::default()).unwrap();
        assert!(r.c1 && r.c2 && r.c3_pass, "{r:?}");

        let zero = check_conditions(&ExampleData::gaussian(EpsilonMask::ZERO), 1, &MomentConfig::default()).unwrap();
        assert!(zero.c3_automatic && zero.c3_pass);
    }

    #[test]
    fn wrong_parity_fails_c2() {
        let eps = EpsilonMask::new(1, 0, 0).unwrap();
        let mut ex = ExampleData::gaussian(eps);
        ex.eps = EpsilonMask::new(0, 1, 0).unwrap();
        let phit = ex.phit();
        ex.eps = eps;
        // φ̃ odd along x₂ while the mask asks for oddness along x₁.
        let (phi, _) = (ex.phi(), ());
        let grid_ok = check_conditions(&ex, 0, &MomentConfig::default()).unwrap();
        assert!(grid_ok.c2);
        let mut bad = 0.0f64;
        for x in [[0.3, 0.7, -0.2], [1.1, -0.4, 0.9]] {
            let y = [-x[0], x[1], x[2]];
            bad = bad.max((phit.eval(y) + phit.eval(x)).abs());
        }
        assert!(bad > 1e-3);
        assert!(phi.eval([0.1, 0.2, 0.3]) > 0.0);
    }
}
