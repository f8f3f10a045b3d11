//! Periodic grids, centered Fourier transforms and free propagators.
//!
//! The transform convention is `F f(ξ) = (2π)^{-3/2} ∫ e^{-ix·ξ} f(x) dx`,
//! discretized on a center-origin grid `x_j = (j - n/2)Δx`, `ξ_m = (m - n/2)Δξ`.

use crate::indexcomb::EpsilonMask;
use crate::{Complex64, Error, Result};
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::f64::consts::PI;
use std::io::{Read, Write};
use std::sync::{Arc, Mutex, OnceLock};

pub const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Grid3 {
    pub n: usize,
    pub box_length: f64,
}

impl Grid3 {
    pub fn new(n: usize, box_length: f64) -> Result<Self> {
        if n < 2 || !n.is_power_of_two() {
            return Err(Error::Argument(format!(
                "grid size must be a power of two >= 2, got {n}"
            )));
        }
        if !(box_length.is_finite() && box_length > 0.0) {
            return Err(Error::Argument(format!(
                "box length must be positive, got {box_length}"
            )));
        }
        Ok(Grid3 { n, box_length })
    }

    pub fn dx(&self) -> f64 {
        self.box_length / self.n as f64
    }

    pub fn dk(&self) -> f64 {
        2.0 * PI / self.box_length
    }

    pub fn len(&self) -> usize {
        self.n * self.n * self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn x(&self, j: usize) -> f64 {
        (j as f64 - (self.n / 2) as f64) * self.dx()
    }

    pub fn k(&self, m: usize) -> f64 {
        (m as f64 - (self.n / 2) as f64) * self.dk()
    }

    pub fn xs(&self) -> Vec<f64> {
        (0..self.n).map(|j| self.x(j)).collect()
    }

    pub fn ks(&self) -> Vec<f64> {
        (0..self.n).map(|m| self.k(m)).collect()
    }

    pub fn index(&self, i: [usize; 3]) -> usize {
        (i[0] * self.n + i[1]) * self.n + i[2]
    }

    pub fn unindex(&self, idx: usize) -> [usize; 3] {
        let n = self.n;
        [idx / (n * n), (idx / n) % n, idx % n]
    }

    /// Volume element of the given space.
    pub fn cell(&self, space: Space) -> f64 {
        match space {
            Space::Position => self.dx().powi(3),
            Space::Frequency => self.dk().powi(3),
        }
    }

    /// Largest `|ξ|²` on the dual grid.
    pub fn max_k_sq(&self) -> f64 {
        3.0 * (PI / self.dx()).powi(2)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Space {
    Position,
    Frequency,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Field3 {
    pub grid: Grid3,
    pub values: Vec<Complex64>,
    pub space: Space,
}

impl Field3 {
    pub fn zeros(grid: Grid3, space: Space) -> Self {
        Field3 {
            grid,
            values: vec![Complex64::new(0.0, 0.0); grid.len()],
            space,
        }
    }

    /// Samples `f` at grid coordinates of the given space.
    pub fn from_fn<F: FnMut([f64; 3]) -> Complex64>(grid: Grid3, space: Space, mut f: F) -> Self {
        let c: Vec<f64> = match space {
            Space::Position => grid.xs(),
            Space::Frequency => grid.ks(),
        };
        let n = grid.n;
        let mut values = Vec::with_capacity(grid.len());
        for i0 in 0..n {
            for i1 in 0..n {
                for i2 in 0..n {
                    values.push(f([c[i0], c[i1], c[i2]]));
                }
            }
        }
        Field3 {
            grid,
            values,
            space,
        }
    }

    pub fn norm_sq(&self) -> f64 {
        self.values.iter().map(|v| v.norm_sqr()).sum::<f64>() * self.grid.cell(self.space)
    }

    pub fn norm_l2(&self) -> f64 {
        self.norm_sq().sqrt()
    }

    /// Discrete `H¹` surrogate `(Σ (1+|ξ|²)|F f|² Δξ³)^{1/2}`.
    pub fn norm_h1(&self) -> f64 {
        let spec = match self.space {
            Space::Position => fourier(self).expect("position-space field"),
            Space::Frequency => self.clone(),
        };
        let ks = self.grid.ks();
        let mut acc = 0.0;
        for (idx, v) in spec.values.iter().enumerate() {
            let [a, b, c] = self.grid.unindex(idx);
            let k2 = ks[a] * ks[a] + ks[b] * ks[b] + ks[c] * ks[c];
            acc += (1.0 + k2) * v.norm_sqr();
        }
        (acc * self.grid.cell(Space::Frequency)).sqrt()
    }

    pub fn scale(&self, s: Complex64) -> Field3 {
        Field3 {
            grid: self.grid,
            values: self.values.iter().map(|v| v * s).collect(),
            space: self.space,
        }
    }

    pub fn sub(&self, other: &Field3) -> Result<Field3> {
        self.check_compatible(other)?;
        Ok(Field3 {
            grid: self.grid,
            values: self
                .values
                .iter()
                .zip(&other.values)
                .map(|(a, b)| a - b)
                .collect(),
            space: self.space,
        })
    }

    pub fn add(&self, other: &Field3) -> Result<Field3> {
        self.check_compatible(other)?;
        Ok(Field3 {
            grid: self.grid,
            values: self
                .values
                .iter()
                .zip(&other.values)
                .map(|(a, b)| a + b)
                .collect(),
            space: self.space,
        })
    }

    pub fn check_compatible(&self, other: &Field3) -> Result<()> {
        if self.grid != other.grid || self.space != other.space {
            return Err(Error::Argument("fields live on different grids or spaces".into()));
        }
        Ok(())
    }

    fn require(&self, space: Space) -> Result<()> {
        if self.space != space {
            return Err(Error::Argument(format!(
                "expected a {space:?}-space field, got {:?}",
                self.space
            )));
        }
        Ok(())
    }
}

/// Centered 1D transform plan of length `n`.
pub struct LinePlan {
    n: usize,
    fwd: Arc<dyn Fft<f64>>,
    inv: Arc<dyn Fft<f64>>,
    /// `(-1)^{n/2}`, the phase left over from centering both grids.
    center_sign: f64,
}

fn plan_cache() -> &'static Mutex<HashMap<usize, Arc<LinePlan>>> {
    static CACHE: OnceLock<Mutex<HashMap<usize, Arc<LinePlan>>>> = OnceLock::new();
    CACHE.get_or_init(|| Mutex::new(HashMap::new()))
}

pub fn line_plan(n: usize) -> Arc<LinePlan> {
    let mut cache = plan_cache().lock().expect("plan cache poisoned");
    cache
        .entry(n)
        .or_insert_with(|| {
            let mut planner = FftPlanner::new();
            Arc::new(LinePlan {
                n,
                fwd: planner.plan_fft_forward(n),
                inv: planner.plan_fft_inverse(n),
                center_sign: if (n / 2) % 2 == 0 { 1.0 } else { -1.0 },
            })
        })
        .clone()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Sign {
    /// Kernel `e^{-ixξ}`.
    Minus,
    /// Kernel `e^{+ixξ}`.
    Plus,
}

impl LinePlan {
    /// In place: `out_m = (2π)^{-1/2} h Σ_j e^{∓ i y_m z_j} in_j` on centered grids,
    /// `h` the input spacing.
    pub fn apply(&self, buf: &mut [Complex64], sign: Sign, spacing: f64) {
        debug_assert_eq!(buf.len() % self.n, 0);
        let scale = INV_SQRT_2PI * spacing * self.center_sign;
        for line in buf.chunks_mut(self.n) {
            for v in line.iter_mut().skip(1).step_by(2) {
                *v = -*v;
            }
        }
        match sign {
            Sign::Minus => self.fwd.process(buf),
            Sign::Plus => self.inv.process(buf),
        }
        for line in buf.chunks_mut(self.n) {
            for (m, v) in line.iter_mut().enumerate() {
                let s = if m % 2 == 0 { scale } else { -scale };
                *v *= s;
            }
        }
    }
}

/// Applies the centered 1D transform along `axis` of an `n³` array.
pub fn transform_axis(data: &mut [Complex64], n: usize, axis: usize, sign: Sign, spacing: f64) {
    let plan = line_plan(n);
    match axis {
        2 => plan.apply(data, sign, spacing),
        0 | 1 => {
            // Lines along `axis` have stride `stride`; each block holds `inner` of them.
            let (outer, inner, stride) = if axis == 1 { (n, n, n) } else { (1, n * n, n * n) };
            let mut buf = vec![Complex64::new(0.0, 0.0); inner * n];
            for o in 0..outer {
                let base = o * n * n;
                for l in 0..inner {
                    for j in 0..n {
                        buf[l * n + j] = data[base + l + j * stride];
                    }
                }
                plan.apply(&mut buf, sign, spacing);
                for l in 0..inner {
                    for j in 0..n {
                        data[base + l + j * stride] = buf[l * n + j];
                    }
                }
            }
        }
        _ => panic!("axis out of range: {axis}"),
    }
}

/// Continuous-convention Fourier transform `F`.
pub fn fourier(f: &Field3) -> Result<Field3> {
    f.require(Space::Position)?;
    let mut values = f.values.clone();
    let dx = f.grid.dx();
    for axis in 0..3 {
        transform_axis(&mut values, f.grid.n, axis, Sign::Minus, dx);
    }
    Ok(Field3 {
        grid: f.grid,
        values,
        space: Space::Frequency,
    })
}

/// Inverse transform `F^{-1}`.
pub fn inverse_fourier(f: &Field3) -> Result<Field3> {
    f.require(Space::Frequency)?;
    let mut values = f.values.clone();
    let dk = f.grid.dk();
    for axis in 0..3 {
        transform_axis(&mut values, f.grid.n, axis, Sign::Plus, dk);
    }
    Ok(Field3 {
        grid: f.grid,
        values,
        space: Space::Position,
    })
}

/// Multiplies a frequency-space field by `exp(-it Σ_i c_i ξ_i²)`.
pub fn apply_quadratic_phase(spec: &mut Field3, t: f64, coeffs: [f64; 3]) {
    let n = spec.grid.n;
    let ks = spec.grid.ks();
    let axis_phase: Vec<[f64; 3]> = ks
        .iter()
        .map(|k| [coeffs[0] * k * k, coeffs[1] * k * k, coeffs[2] * k * k])
        .collect();
    for i0 in 0..n {
        for i1 in 0..n {
            let base = (i0 * n + i1) * n;
            let p01 = axis_phase[i0][0] + axis_phase[i1][1];
            for i2 in 0..n {
                let phase = -t * (p01 + axis_phase[i2][2]);
                spec.values[base + i2] *= Complex64::from_polar(1.0, phase);
            }
        }
    }
}

/// `F^{-1} exp(-it Σ c_i ξ_i²) F f`.
pub fn quadratic_propagate(f: &Field3, t: f64, coeffs: [f64; 3]) -> Result<Field3> {
    let mut spec = fourier(f)?;
    apply_quadratic_phase(&mut spec, t, coeffs);
    inverse_fourier(&spec)
}

/// Free Schrödinger group `U(t) = e^{itΔ}`.
pub fn free_propagate(f: &Field3, t: f64) -> Result<Field3> {
    quadratic_propagate(f, t, [1.0, 1.0, 1.0])
}

/// Squared diagonal of `D^{1,μ}_{N,ε}`, the anisotropic dispersion coefficients.
pub fn aniso_coefficients(mu: f64, n: u32, eps: EpsilonMask) -> [f64; 3] {
    let d = ScalingMatrix::new(1.0, mu, n, eps).diag();
    [d[0] * d[0], d[1] * d[1], d[2] * d[2]]
}

/// `U^μ_{N,ε}(t)`, symbol `exp(-it|D^{1,μ}_{N,ε} ξ|²)`.
pub fn aniso_propagate(f: &Field3, t: f64, mu: f64, n: u32, eps: EpsilonMask) -> Result<Field3> {
    if !(mu > 0.0) {
        return Err(Error::Argument(format!("mu must be positive, got {mu}")));
    }
    quadratic_propagate(f, t, aniso_coefficients(mu, n, eps))
}

/// Dispersion coefficients of `U_ε(t)`: unit along `m(ε)`, zero elsewhere.
pub fn axis_coefficients(eps: EpsilonMask) -> [f64; 3] {
    let mut c = [0.0; 3];
    c[eps.lead_axis()] = 1.0;
    c
}

/// `U_ε(t)`, one-dimensional free flow along axis `m(ε)`.
pub fn axis_propagate(f: &Field3, t: f64, eps: EpsilonMask) -> Result<Field3> {
    quadratic_propagate(f, t, axis_coefficients(eps))
}

/// `D^{λ,μ}_{N,ε} = λ I(ε) diag(1, μ, μ^{N+1}) I(ε)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScalingMatrix {
    pub lambda: f64,
    pub mu: f64,
    pub n: u32,
    pub eps: EpsilonMask,
}

impl ScalingMatrix {
    pub fn new(lambda: f64, mu: f64, n: u32, eps: EpsilonMask) -> Self {
        ScalingMatrix {
            lambda,
            mu,
            n,
            eps,
        }
    }

    /// Diagonal entries in axis order.
    pub fn diag(&self) -> [f64; 3] {
        let base = [1.0, self.mu, self.mu.powi(self.n as i32 + 1)];
        let p = self.eps.apply(base);
        [self.lambda * p[0], self.lambda * p[1], self.lambda * p[2]]
    }

    /// Natural logarithms of the diagonal, usable when `μ^{N+1}` underflows.
    pub fn ln_diag(&self) -> [f64; 3] {
        let lm = self.mu.ln();
        let base = [0.0, lm, (self.n as f64 + 1.0) * lm];
        let p = self.eps.apply(base);
        let ll = self.lambda.ln();
        [ll + p[0], ll + p[1], ll + p[2]]
    }

    pub fn det(&self) -> f64 {
        self.lambda.powi(3) * self.mu.powi(self.n as i32 + 2)
    }
}

/// `p(x) e^{-x²/(2s²)}` with polynomial `p`: an analytic profile with closed-form moments.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PolyGaussian {
    /// Coefficients of `x^0, x^1, ...`.
    pub coeffs: Vec<f64>,
    pub width: f64,
}

impl PolyGaussian {
    pub fn gaussian(width: f64) -> Self {
        PolyGaussian {
            coeffs: vec![1.0],
            width,
        }
    }

    /// `(1 + c (x/s)²) e^{-x²/(2s²)}`.
    pub fn hermite(width: f64, c: f64) -> Self {
        PolyGaussian {
            coeffs: vec![1.0, 0.0, c / (width * width)],
            width,
        }
    }

    pub fn eval(&self, x: f64) -> f64 {
        let p = self.coeffs.iter().rev().fold(0.0, |acc, c| acc * x + c);
        p * (-x * x / (2.0 * self.width * self.width)).exp()
    }

    pub fn derivative(&self) -> PolyGaussian {
        let s2 = self.width * self.width;
        let deg = self.coeffs.len();
        let mut out = vec![0.0; deg + 1];
        for (k, &c) in self.coeffs.iter().enumerate() {
            if k > 0 {
                out[k - 1] += k as f64 * c;
            }
            out[k + 1] -= c / s2;
        }
        while out.len() > 1 && *out.last().unwrap() == 0.0 {
            out.pop();
        }
        PolyGaussian {
            coeffs: out,
            width: self.width,
        }
    }

    pub fn nth_derivative(&self, order: u32) -> PolyGaussian {
        (0..order).fold(self.clone(), |p, _| p.derivative())
    }

    /// `+1` for even, `-1` for odd, `0` for mixed parity.
    pub fn parity(&self) -> i32 {
        let even = self.coeffs.iter().skip(1).step_by(2).all(|&c| c == 0.0);
        let odd = self.coeffs.iter().step_by(2).all(|&c| c == 0.0);
        match (even, odd) {
            (true, false) => 1,
            (false, true) => -1,
            (true, true) => 1,
            _ => 0,
        }
    }

    /// `∫ |ρ(x)|² dx`, exact.
    pub fn norm_sq(&self) -> f64 {
        let mut sq = vec![0.0; 2 * self.coeffs.len()];
        for (i, a) in self.coeffs.iter().enumerate() {
            for (j, b) in self.coeffs.iter().enumerate() {
                sq[i + j] += a * b;
            }
        }
        // ∫ x^{2k} e^{-x²/s²} dx = s^{2k+1} Γ(k+1/2)
        let s = self.width;
        let mut gamma_half = PI.sqrt();
        let mut acc = 0.0;
        for (k, c) in sq.iter().step_by(2).enumerate() {
            acc += c * s.powi(2 * k as i32 + 1) * gamma_half;
            gamma_half *= k as f64 + 0.5;
        }
        acc
    }
}

/// `φ(x) = ρ₁(x₁)ρ₂(x₂)ρ₃(x₃)`, analytic product data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProductData {
    pub factors: [PolyGaussian; 3],
}

impl ProductData {
    pub fn eval(&self, x: [f64; 3]) -> f64 {
        self.factors[0].eval(x[0]) * self.factors[1].eval(x[1]) * self.factors[2].eval(x[2])
    }

    pub fn norm_sq(&self) -> f64 {
        self.factors.iter().map(|f| f.norm_sq()).product()
    }

    /// `∂^ε_x φ`.
    pub fn derivative(&self, orders: [u32; 3]) -> ProductData {
        ProductData {
            factors: [
                self.factors[0].nth_derivative(orders[0]),
                self.factors[1].nth_derivative(orders[1]),
                self.factors[2].nth_derivative(orders[2]),
            ],
        }
    }

    pub fn sample(&self, grid: Grid3) -> Field3 {
        Field3::from_fn(grid, Space::Position, |x| Complex64::new(self.eval(x), 0.0))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScaleReport {
    /// Relative mass of `φ∘D` not captured by the box.
    pub leakage: f64,
    pub tolerance: f64,
    pub warning: Option<String>,
}

/// Samples `x ↦ φ(Dx)` on the grid directly from the analytic form.
pub fn scale_compose(
    phi: &ProductData,
    d: &ScalingMatrix,
    grid: Grid3,
    tail_tolerance: f64,
) -> (Field3, ScaleReport) {
    let diag = d.diag();
    let field = Field3::from_fn(grid, Space::Position, |x| {
        Complex64::new(phi.eval([diag[0] * x[0], diag[1] * x[1], diag[2] * x[2]]), 0.0)
    });
    let exact = phi.norm_sq() / (diag[0] * diag[1] * diag[2]);
    let leakage = ((exact - field.norm_sq()) / exact).abs();
    let warning = (leakage > tail_tolerance).then(|| {
        format!("mass outside the box {leakage:.3e} exceeds tolerance {tail_tolerance:.1e}")
    });
    (
        field,
        ScaleReport {
            leakage,
            tolerance: tail_tolerance,
            warning,
        },
    )
}

const FIELD_MAGIC: &[u8; 4] = b"HF3\0";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Precision {
    Single,
    Double,
}

/// Writes a raw little-endian checkpoint: magic, `n: u32`, `box_length: f64`,
/// space flag, precision flag, then interleaved real/imaginary values.
pub fn write_field<W: Write>(w: &mut W, f: &Field3, precision: Precision) -> Result<()> {
    w.write_all(FIELD_MAGIC)?;
    w.write_all(&(f.grid.n as u32).to_le_bytes())?;
    w.write_all(&f.grid.box_length.to_le_bytes())?;
    w.write_all(&[
        match f.space {
            Space::Position => 0,
            Space::Frequency => 1,
        },
        match precision {
            Precision::Single => 4,
            Precision::Double => 8,
        },
    ])?;
    for v in &f.values {
        match precision {
            Precision::Single => {
                w.write_all(&(v.re as f32).to_le_bytes())?;
                w.write_all(&(v.im as f32).to_le_bytes())?;
            }
            Precision::Double => {
                w.write_all(&v.re.to_le_bytes())?;
                w.write_all(&v.im.to_le_bytes())?;
            }
        }
    }
    Ok(())
}

pub fn read_field<R: Read>(r: &mut R) -> Result<Field3> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != FIELD_MAGIC {
        return Err(Error::Argument("not a field checkpoint".into()));
    }
    let mut b4 = [0u8; 4];
    let mut b8 = [0u8; 8];
    r.read_exact(&mut b4)?;
    let n = u32::from_le_bytes(b4) as usize;
    r.read_exact(&mut b8)?;
    let grid = Grid3::new(n, f64::from_le_bytes(b8))?;
    let mut flags = [0u8; 2];
    r.read_exact(&mut flags)?;
    let space = match flags[0] {
        0 => Space::Position,
        1 => Space::Frequency,
        s => return Err(Error::Argument(format!("bad space flag {s}"))),
    };
    let mut values = Vec::with_capacity(grid.len());
    for _ in 0..grid.len() {
        let v = match flags[1] {
            4 => {
                r.read_exact(&mut b4)?;
                let re = f32::from_le_bytes(b4) as f64;
                r.read_exact(&mut b4)?;
                Complex64::new(re, f32::from_le_bytes(b4) as f64)
            }
            8 => {
                r.read_exact(&mut b8)?;
                let re = f64::from_le_bytes(b8);
                r.read_exact(&mut b8)?;
                Complex64::new(re, f64::from_le_bytes(b8))
            }
            p => return Err(Error::Argument(format!("bad precision flag {p}"))),
        };
        values.push(v);
    }
    Ok(Field3 {
        grid,
        values,
        space,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rel(a: &Field3, b: &Field3) -> f64 {
        a.sub(b).unwrap().norm_l2() / b.norm_l2()
    }

    fn gaussian_field(grid: Grid3) -> Field3 {
        Field3::from_fn(grid, Space::Position, |x| {
            Complex64::new((-(x[0] * x[0] + x[1] * x[1] + x[2] * x[2]) / 2.0).exp(), 0.0)
        })
    }

    #[test]
    fn gaussian_is_self_dual() {
        let grid = Grid3::new(64, 24.0).unwrap();
        let f = gaussian_field(grid);
        let g = fourier(&f).unwrap();
        let expect = Field3::from_fn(grid, Space::Frequency, |k| {
            Complex64::new((-(k[0] * k[0] + k[1] * k[1] + k[2] * k[2]) / 2.0).exp(), 0.0)
        });
        let err = g
            .values
            .iter()
            .zip(&expect.values)
            .map(|(a, b)| (a - b).norm())
            .fold(0.0, f64::max);
        assert!(err < 1e-12, "{err}");
    }

    #[test]
    fn round_trip_and_parseval() {
        let grid = Grid3::new(16, 9.0).unwrap();
        let mut s = 12345u64;
        let f = Field3::from_fn(grid, Space::Position, |_| {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            let a = (s >> 11) as f64 / (1u64 << 53) as f64;
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            let b = (s >> 11) as f64 / (1u64 << 53) as f64;
            Complex64::new(a - 0.5, b - 0.5)
        });
        let g = fourier(&f).unwrap();
        assert!(((g.norm_l2() - f.norm_l2()) / f.norm_l2()).abs() < 1e-12);
        assert!(rel(&inverse_fourier(&g).unwrap(), &f) < 1e-12);
        assert!(fourier(&g).is_err());
    }

    #[test]
    fn free_gaussian_matches_closed_form() {
        let grid = Grid3::new(64, 24.0).unwrap();
        let f = gaussian_field(grid);
        let t = 0.7;
        let u = free_propagate(&f, t).unwrap();
        // e^{-x²/2} evolves to (1+2it)^{-1/2} e^{-x²/(2(1+2it))} per axis.
        let z = Complex64::new(1.0, 2.0 * t);
        let expect = Field3::from_fn(grid, Space::Position, |x| {
            let r2 = x[0] * x[0] + x[1] * x[1] + x[2] * x[2];
            z.powf(-1.5) * (-r2 / (2.0 * z)).exp()
        });
        assert!(rel(&u, &expect) < 1e-10);
    }

    #[test]
    fn group_law_and_mu_one() {
        let grid = Grid3::new(16, 12.0).unwrap();
        let f = gaussian_field(grid);
        let a = free_propagate(&free_propagate(&f, 0.3).unwrap(), 0.4).unwrap();
        let b = free_propagate(&f, 0.7).unwrap();
        assert!(rel(&a, &b) < 1e-11);
        let e = EpsilonMask([1, 0, 1]);
        let c = aniso_propagate(&f, 0.5, 1.0, 2, e).unwrap();
        assert_eq!(c, free_propagate(&f, 0.5).unwrap());
    }

    #[test]
    fn aniso_symbol_for_mask_101() {
        let c = aniso_coefficients(0.5, 1, EpsilonMask([1, 0, 1]));
        assert_eq!(c, [1.0, 0.25, 0.0625]);
        let c = aniso_coefficients(0.5, 1, EpsilonMask([0, 0, 1]));
        assert_eq!(c, [0.0625, 0.25, 1.0]);
    }

    #[test]
    fn scaling_matrix_det() {
        let d = ScalingMatrix::new(0.5, 0.3, 2, EpsilonMask([0, 1, 0]));
        let g = d.diag();
        assert!((g[0] * g[1] * g[2] - d.det()).abs() < 1e-15);
        assert!((d.det() - 0.125 * 0.3f64.powi(4)).abs() < 1e-15);
    }

    #[test]
    fn scale_compose_norm() {
        let grid = Grid3::new(64, 30.0).unwrap();
        let phi = ProductData {
            factors: [
                PolyGaussian::gaussian(1.0),
                PolyGaussian::gaussian(1.0),
                PolyGaussian::gaussian(1.0),
            ],
        };
        let d = ScalingMatrix::new(0.8, 0.7, 1, EpsilonMask::ZERO);
        let (f, rep) = scale_compose(&phi, &d, grid, 1e-10);
        let expect = (phi.norm_sq() / d.det()).sqrt();
        assert!((f.norm_l2() - expect).abs() / expect < 1e-10);
        assert!(rep.warning.is_none());
    }

    #[test]
    fn poly_gaussian_derivative_and_norm() {
        let p = PolyGaussian::hermite(1.3, 0.4);
        let d = p.derivative();
        let h = 1e-5;
        for &x in &[-1.0, 0.3, 2.0] {
            let fd = (p.eval(x + h) - p.eval(x - h)) / (2.0 * h);
            assert!((fd - d.eval(x)).abs() < 1e-8);
        }
        assert_eq!(d.parity(), -1);
        // Riemann sum oracle for the norm.
        let dx = 1e-3;
        let num: f64 = (-20000..=20000)
            .map(|i| p.eval(i as f64 * dx).powi(2) * dx)
            .sum();
        assert!((num - p.norm_sq()).abs() < 1e-10);
    }

    #[test]
    fn field_checkpoint_round_trip() {
        let grid = Grid3::new(4, 3.0).unwrap();
        let f = gaussian_field(grid).scale(Complex64::new(0.5, -0.25));
        let mut buf = Vec::new();
        write_field(&mut buf, &f, Precision::Double).unwrap();
        assert_eq!(read_field(&mut buf.as_slice()).unwrap(), f);
        let mut buf = Vec::new();
        write_field(&mut buf, &f, Precision::Single).unwrap();
        let g = read_field(&mut buf.as_slice()).unwrap();
        assert!(rel(&g, &f) < 1e-6);
    }
}
