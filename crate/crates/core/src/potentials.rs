//! Interaction potentials with exponential decay and exact Fourier-derivative oracles.

use crate::fields::{Field3, Grid3, Space, INV_SQRT_2PI};
use crate::indexcomb::{EpsilonMask, MultiIndex, ordered_basis};
use crate::quadrature::{adaptive_gl, gauss_legendre};
use crate::{Complex64, Error, Result};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::f64::consts::PI;

/// `amp · exp(-|x - center|² / width²)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GaussianTerm {
    pub amp: f64,
    pub width: f64,
    pub center: [f64; 3],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum Family {
    Gaussian { amp: f64, width: f64 },
    ShiftedGaussian { amp: f64, width: f64, center: [f64; 3] },
    GaussianMixture { terms: Vec<GaussianTerm> },
    /// `amp · exp(-rate · (1 + |x|²)^{1/2})`.
    ExpDecaySmooth { amp: f64, rate: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PotentialSpec {
    #[serde(flatten)]
    pub family: Family,
    /// Declared decay constant `A` in `e^{A|x|} V ∈ L¹`.
    pub decay: f64,
}

/// One separable summand of `F V`: `coeff · ∏_i exp(-w²ξ_i²/4 - i c_i ξ_i)`.
#[derive(Clone, Debug, PartialEq)]
pub struct SeparableTerm {
    pub coeff: f64,
    pub width: f64,
    pub center: [f64; 3],
}

impl SeparableTerm {
    pub fn axis_factor(&self, axis: usize, xi: f64) -> Complex64 {
        Complex64::from_polar(
            (-self.width * self.width * xi * xi / 4.0).exp(),
            -self.center[axis] * xi,
        )
    }
}

impl PotentialSpec {
    pub fn gaussian(amp: f64, width: f64, decay: f64) -> Self {
        PotentialSpec {
            family: Family::Gaussian { amp, width },
            decay,
        }
    }

    pub fn shifted_gaussian(amp: f64, width: f64, center: [f64; 3], decay: f64) -> Self {
        PotentialSpec {
            family: Family::ShiftedGaussian { amp, width, center },
            decay,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let pos = |v: f64, what: &str| {
            if v.is_finite() && v > 0.0 {
                Ok(())
            } else {
                Err(Error::Argument(format!("{what} must be positive, got {v}")))
            }
        };
        pos(self.decay, "decay constant A")?;
        match &self.family {
            Family::Gaussian { width, .. } | Family::ShiftedGaussian { width, .. } => {
                pos(*width, "width")
            }
            Family::GaussianMixture { terms } => {
                if terms.is_empty() {
                    return Err(Error::Argument("mixture needs at least one term".into()));
                }
                terms.iter().try_for_each(|t| pos(t.width, "width"))
            }
            Family::ExpDecaySmooth { rate, .. } => pos(*rate, "rate"),
        }
    }

    /// Gaussian summands, if the family has them.
    pub fn gaussian_terms(&self) -> Option<Vec<GaussianTerm>> {
        match &self.family {
            Family::Gaussian { amp, width } => Some(vec![GaussianTerm {
                amp: *amp,
                width: *width,
                center: [0.0; 3],
            }]),
            Family::ShiftedGaussian { amp, width, center } => Some(vec![GaussianTerm {
                amp: *amp,
                width: *width,
                center: *center,
            }]),
            Family::GaussianMixture { terms } => Some(terms.clone()),
            Family::ExpDecaySmooth { .. } => None,
        }
    }

    pub fn eval(&self, x: [f64; 3]) -> f64 {
        match &self.family {
            Family::ExpDecaySmooth { amp, rate } => {
                let r2 = x[0] * x[0] + x[1] * x[1] + x[2] * x[2];
                amp * (-rate * (1.0 + r2).sqrt()).exp()
            }
            _ => self
                .gaussian_terms()
                .unwrap()
                .iter()
                .map(|t| {
                    let d2: f64 = (0..3).map(|i| (x[i] - t.center[i]).powi(2)).sum();
                    t.amp * (-d2 / (t.width * t.width)).exp()
                })
                .sum(),
        }
    }

    pub fn sample(&self, grid: Grid3) -> Field3 {
        Field3::from_fn(grid, Space::Position, |x| Complex64::new(self.eval(x), 0.0))
    }

    /// `F V` as a sum of separable terms (Gaussian families only).
    pub fn separable_terms(&self) -> Option<Vec<SeparableTerm>> {
        self.gaussian_terms().map(|ts| {
            ts.iter()
                .map(|t| SeparableTerm {
                    coeff: t.amp * (t.width * t.width / 2.0).powf(1.5),
                    width: t.width,
                    center: t.center,
                })
                .collect()
        })
    }

    /// `F V(ξ)`: closed form for Gaussian families, radial quadrature otherwise.
    pub fn fourier_value(&self, xi: [f64; 3]) -> Result<Complex64> {
        if let Some(terms) = self.separable_terms() {
            return Ok(terms
                .iter()
                .map(|t| {
                    t.axis_factor(0, xi[0]) * t.axis_factor(1, xi[1]) * t.axis_factor(2, xi[2]) * t.coeff
                })
                .sum());
        }
        let k = (xi[0] * xi[0] + xi[1] * xi[1] + xi[2] * xi[2]).sqrt();
        let r_max = self.radial_extent();
        let (v, _) = adaptive_gl(
            |r| {
                let s = if k * r < 1e-8 { 1.0 } else { (k * r).sin() / (k * r) };
                r * r * self.eval([r, 0.0, 0.0]) * s
            },
            0.0,
            r_max,
            1e-13,
        )?;
        Ok(Complex64::new(4.0 * PI * INV_SQRT_2PI.powi(3) * v, 0.0))
    }

    fn radial_extent(&self) -> f64 {
        match &self.family {
            Family::ExpDecaySmooth { rate, .. } => 60.0 / rate + 10.0,
            _ => {
                let ts = self.gaussian_terms().unwrap();
                ts.iter()
                    .map(|t| t.center.iter().map(|c| c * c).sum::<f64>().sqrt() + 8.0 * t.width)
                    .fold(0.0, f64::max)
            }
        }
    }

    /// `‖V‖₁`.
    pub fn l1_norm(&self) -> Result<f64> {
        if let Some(ts) = self.gaussian_terms() {
            if ts.iter().all(|t| t.amp >= 0.0) {
                return Ok(ts
                    .iter()
                    .map(|t| t.amp * (PI.sqrt() * t.width).powi(3))
                    .sum());
            }
        }
        Ok(shell_integrals(self, 0.0, 2.0, (self.radial_extent() / 2.0).ceil() as usize)
            .iter()
            .sum())
    }
}

/// `∫ x^k e^{-(x-c)²/w²} dx`, exact through Gaussian central moments.
pub fn gaussian_moment_1d(k: u32, width: f64, center: f64) -> f64 {
    // E[(c + σZ)^k] with σ² = w²/2; Σ_{j even} C(k,j) c^{k-j} σ^j (j-1)!!
    let s2 = width * width / 2.0;
    let mut acc = 0.0;
    let mut binom = 1.0;
    let mut dfact = 1.0;
    for j in 0..=k {
        if j > 0 {
            binom *= (k - j + 1) as f64 / j as f64;
        }
        if j % 2 == 0 {
            if j >= 2 {
                dfact *= (j - 1) as f64;
            }
            acc += binom * center.powi((k - j) as i32) * s2.powi(j as i32 / 2) * dfact;
        }
    }
    PI.sqrt() * width * acc
}

fn minus_i_pow(k: u32) -> Complex64 {
    match k % 4 {
        0 => Complex64::new(1.0, 0.0),
        1 => Complex64::new(0.0, -1.0),
        2 => Complex64::new(-1.0, 0.0),
        _ => Complex64::new(0.0, 1.0),
    }
}

/// `∂^β F V(0) = (2π)^{-3/2} ∫ (-ix)^β V(x) dx`.
pub fn exact_fourier_derivative(spec: &PotentialSpec, beta: MultiIndex) -> Result<Complex64> {
    spec.validate()?;
    let phase = minus_i_pow(beta.order());
    if let Some(ts) = spec.gaussian_terms() {
        let mut acc = 0.0;
        for t in &ts {
            let mut prod = t.amp;
            for i in 0..3 {
                prod *= INV_SQRT_2PI * gaussian_moment_1d(beta.0[i], t.width, t.center[i]);
            }
            acc += prod;
        }
        return Ok(phase * acc);
    }
    Ok(phase * radial_moment(spec, beta, 1e-13)?)
}

/// Same quantity by numerical quadrature, independent of the closed forms.
pub fn quadrature_fourier_derivative(spec: &PotentialSpec, beta: MultiIndex, tol: f64) -> Result<Complex64> {
    spec.validate()?;
    let phase = minus_i_pow(beta.order());
    if let Some(ts) = spec.gaussian_terms() {
        let mut acc = 0.0;
        for t in &ts {
            let mut prod = t.amp;
            for i in 0..3 {
                let c = t.center[i];
                let r = 9.0 * t.width;
                let k = beta.0[i] as i32;
                let (v, _) = adaptive_gl(
                    |x| x.powi(k) * (-(x - c) * (x - c) / (t.width * t.width)).exp(),
                    c - r,
                    c + r,
                    tol,
                )?;
                prod *= INV_SQRT_2PI * v;
            }
            acc += prod;
        }
        return Ok(phase * acc);
    }
    Ok(phase * radial_moment(spec, beta, tol)?)
}

/// `(2π)^{-3/2} ∫ x^β V(|x|) dx` for radial `V`.
fn radial_moment(spec: &PotentialSpec, beta: MultiIndex, tol: f64) -> Result<f64> {
    if beta.0.iter().any(|b| b % 2 == 1) {
        return Ok(0.0);
    }
    let k = beta.order() as i32;
    let (radial, _) = adaptive_gl(
        |r| r.powi(k + 2) * spec.eval([r, 0.0, 0.0]),
        0.0,
        spec.radial_extent(),
        tol,
    )?;
    Ok(INV_SQRT_2PI.powi(3) * radial * sphere_moment(beta))
}

/// `∫_{S²} ω^β dω` for even `β`.
fn sphere_moment(beta: MultiIndex) -> f64 {
    // 2 Γ((b1+1)/2) Γ((b2+1)/2) Γ((b3+1)/2) / Γ((|b|+3)/2)
    let half_gamma = |two_x: u32| -> f64 {
        // Γ(two_x/2) for two_x ≥ 1
        let mut v = if two_x % 2 == 0 { 1.0 } else { PI.sqrt() };
        let mut a = if two_x % 2 == 0 { 2 } else { 1 };
        while a < two_x {
            v *= a as f64 / 2.0;
            a += 2;
        }
        v
    };
    2.0 * beta.0.iter().map(|b| half_gamma(b + 1)).product::<f64>() / half_gamma(beta.order() + 3)
}

/// `𝔞_{N,ε}`: entry `k` is `∂^{2α(N,ε;k)+ε} F V(0)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DerivativeVector {
    pub n: u32,
    pub eps: EpsilonMask,
    pub entries: Vec<Complex64>,
}

impl DerivativeVector {
    /// Largest ratio of the off-parity part to the entry magnitude. Real
    /// entries are expected for `|ε|` even, imaginary ones for `|ε|` odd.
    pub fn parity_defect(&self) -> f64 {
        let odd = self.eps.weight() % 2 == 1;
        self.entries
            .iter()
            .map(|e| {
                let cross = if odd { e.re.abs() } else { e.im.abs() };
                cross / e.norm().max(f64::MIN_POSITIVE)
            })
            .fold(0.0, f64::max)
    }
}

pub fn exact_derivative_vector(spec: &PotentialSpec, n: u32, eps: EpsilonMask) -> Result<DerivativeVector> {
    let basis = ordered_basis(n, eps)?;
    let entries = basis
        .exponents()
        .into_iter()
        .map(|b| exact_fourier_derivative(spec, b))
        .collect::<Result<_>>()?;
    Ok(DerivativeVector { n, eps, entries })
}

pub type DerivativeTable = BTreeMap<MultiIndex, Complex64>;

pub fn exact_derivative_table(spec: &PotentialSpec, order: u32) -> Result<DerivativeTable> {
    MultiIndex::up_to_order(order)
        .into_iter()
        .map(|b| Ok((b, exact_fourier_derivative(spec, b)?)))
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaylorValue {
    pub value: Complex64,
    /// `|ξ| < A/3`.
    pub inside_radius: bool,
}

/// `Σ_{|β|≤K} ∂^β F V(0)/β! ξ^β`.
pub fn taylor_eval(derivs: &DerivativeTable, order: u32, xi: [f64; 3], decay: f64) -> Result<TaylorValue> {
    let mut value = Complex64::new(0.0, 0.0);
    for b in MultiIndex::up_to_order(order) {
        let d = derivs.get(&b).ok_or_else(|| {
            Error::Argument(format!("derivative table lacks β = {b}"))
        })?;
        let fact: f64 = b.0.iter().map(|&k| (1..=k).map(|i| i as f64).product::<f64>()).product();
        let mono: f64 = (0..3).map(|i| xi[i].powi(b.0[i] as i32)).product();
        value += d * (mono / fact);
    }
    let r = (xi[0] * xi[0] + xi[1] * xi[1] + xi[2] * xi[2]).sqrt();
    Ok(TaylorValue {
        value,
        inside_radius: r < decay / 3.0,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct V1Report {
    pub a_declared: f64,
    pub integral: f64,
    pub shell_contributions: Vec<f64>,
    pub pass: bool,
    pub diagnostics: String,
}

/// `∫_{r0 + k h < |x| < r0 + (k+1)h} f(x) dx` for `k = 0..shells`, `f = e^{A|x|}|V|`
/// with `A = 0` giving plain `|V|` shells.
fn shell_integrals(spec: &PotentialSpec, a: f64, h: f64, shells: usize) -> Vec<f64> {
    let gl_r = gauss_legendre(8);
    let gl_c = gauss_legendre(24);
    let n_phi = 24;
    let mut out = Vec::with_capacity(shells);
    for s in 0..shells {
        let (r0, r1) = (s as f64 * h, (s + 1) as f64 * h);
        let mut acc = 0.0;
        for (xr, wr) in gl_r.0.iter().zip(&gl_r.1) {
            let r = 0.5 * (r0 + r1) + 0.5 * (r1 - r0) * xr;
            let mut ang = 0.0;
            for (ct, wc) in gl_c.0.iter().zip(&gl_c.1) {
                let st = (1.0 - ct * ct).sqrt();
                for p in 0..n_phi {
                    let ph = 2.0 * PI * p as f64 / n_phi as f64;
                    let x = [r * st * ph.cos(), r * st * ph.sin(), r * ct];
                    ang += wc * spec.eval(x).abs();
                }
            }
            ang *= 2.0 * PI / n_phi as f64;
            acc += wr * 0.5 * (r1 - r0) * r * r * (a * r).exp() * ang;
        }
        out.push(acc);
    }
    out
}

/// Integrates `e^{A|x|}|V|` over growing balls and checks the shell
/// contributions shrink geometrically.
pub fn check_v1(spec: &PotentialSpec) -> Result<V1Report> {
    spec.validate()?;
    let a = spec.decay;
    let shells = shell_integrals(spec, a, 2.0, 30);
    let total: f64 = shells.iter().sum();
    let tail = &shells[shells.len() - 6..];
    let decreasing = tail.windows(2).all(|w| w[1] <= 0.9 * w[0]);
    let small = *tail.last().unwrap() <= 1e-6 * total;
    let pass = total.is_finite() && decreasing && small;
    let diagnostics = format!(
        "last shell {:.3e}, total {:.3e}, geometric tail: {decreasing}",
        tail.last().unwrap(),
        total
    );
    Ok(V1Report {
        a_declared: a,
        integral: total,
        shell_contributions: shells,
        pass,
        diagnostics,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn gaussian_derivative_examples() {
        let v = PotentialSpec::gaussian(1.0, 1.0, 3.0);
        let d0 = exact_fourier_derivative(&v, MultiIndex::ZERO).unwrap();
        assert_relative_eq!(d0.re, 0.353_553_390_593_273_7, epsilon = 1e-15);
        assert_eq!(d0.im, 0.0);
        let d1 = exact_fourier_derivative(&v, MultiIndex::new(1, 0, 0)).unwrap();
        assert_eq!(d1.norm(), 0.0);
        let d2 = exact_fourier_derivative(&v, MultiIndex::new(2, 0, 0)).unwrap();
        assert_relative_eq!(d2.re, -0.176_776_695_296_636_9, epsilon = 1e-15);
        let s = PotentialSpec::shifted_gaussian(1.0, 1.0, [0.5, 0.0, 0.0], 3.0);
        let ds = exact_fourier_derivative(&s, MultiIndex::new(1, 0, 0)).unwrap();
        assert_relative_eq!(ds.im, -0.176_776_695_296_636_9, epsilon = 1e-15);
        assert!(ds.re.abs() < 1e-16);
    }

    #[test]
    fn closed_form_matches_quadrature() {
        let v = PotentialSpec {
            family: Family::GaussianMixture {
                terms: vec![
                    GaussianTerm { amp: 1.0, width: 1.0, center: [0.3, -0.2, 0.1] },
                    GaussianTerm { amp: -0.4, width: 0.7, center: [0.0, 0.5, 0.0] },
                ],
            },
            decay: 2.0,
        };
        for b in MultiIndex::up_to_order(8) {
            let e = exact_fourier_derivative(&v, b).unwrap();
            let q = quadrature_fourier_derivative(&v, b, 1e-14).unwrap();
            assert!((e - q).norm() <= 1e-10 * e.norm().max(1e-3), "{b}: {e} vs {q}");
        }
    }

    #[test]
    fn fourier_value_matches_derivative_at_origin() {
        let v = PotentialSpec {
            family: Family::ExpDecaySmooth { amp: 1.0, rate: 1.0 },
            decay: 0.5,
        };
        let f0 = v.fourier_value([0.0; 3]).unwrap();
        let d0 = exact_fourier_derivative(&v, MultiIndex::ZERO).unwrap();
        assert_relative_eq!(f0.re, d0.re, max_relative = 1e-10);
        // Second derivative against a finite difference of the radial transform.
        let h = 1e-3;
        let fp = v.fourier_value([h, 0.0, 0.0]).unwrap().re;
        let fd = 2.0 * (fp - f0.re) / (h * h);
        let d2 = exact_fourier_derivative(&v, MultiIndex::new(2, 0, 0)).unwrap().re;
        assert_relative_eq!(fd, d2, max_relative = 1e-4);
    }

    #[test]
    fn taylor_gaussian() {
        let v = PotentialSpec::gaussian(1.0, 1.0, 3.0);
        let table = exact_derivative_table(&v, 8).unwrap();
        let xi = [0.2, 0.0, 0.0];
        let t = taylor_eval(&table, 8, xi, 3.0).unwrap();
        let exact = 2f64.powf(-1.5) * (-0.04f64 / 4.0).exp();
        assert!((t.value.re - exact).abs() < 1e-4 * exact);
        assert!(t.inside_radius);
        let t0 = taylor_eval(&table, 8, [0.0; 3], 3.0).unwrap();
        assert_eq!(t0.value, table[&MultiIndex::ZERO]);
        assert!(!taylor_eval(&table, 8, [1.5, 0.0, 0.0], 3.0).unwrap().inside_radius);
    }

    #[test]
    fn v1_checks() {
        assert!(check_v1(&PotentialSpec::gaussian(1.0, 1.0, 5.0)).unwrap().pass);
        let pass = PotentialSpec {
            family: Family::ExpDecaySmooth { amp: 1.0, rate: 1.0 },
            decay: 0.5,
        };
        assert!(check_v1(&pass).unwrap().pass);
        let fail = PotentialSpec {
            family: Family::ExpDecaySmooth { amp: 1.0, rate: 1.0 },
            decay: 2.0,
        };
        assert!(!check_v1(&fail).unwrap().pass);
    }

    #[test]
    fn parity_of_vectors() {
        let s = PotentialSpec::shifted_gaussian(1.0, 1.0, [0.5, 0.2, 0.0], 3.0);
        for e in EpsilonMask::all() {
            let dv = exact_derivative_vector(&s, 1, e).unwrap();
            assert!(dv.parity_defect() < 1e-14, "{e}");
        }
    }
}
