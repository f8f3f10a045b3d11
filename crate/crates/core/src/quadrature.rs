//! One-dimensional quadrature rules shared by the potential and moment code.

use crate::{Error, Result};
use std::f64::consts::PI;

/// Gauss–Legendre nodes and weights on `[-1, 1]`.
pub fn gauss_legendre(order: usize) -> (Vec<f64>, Vec<f64>) {
    let mut nodes = vec![0.0; order];
    let mut weights = vec![0.0; order];
    for i in 0..order.div_ceil(2) {
        let mut x = (PI * (i as f64 + 0.75) / (order as f64 + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            let (mut p0, mut p1) = (1.0, x);
            for k in 2..=order {
                let p2 = ((2 * k - 1) as f64 * x * p1 - (k - 1) as f64 * p0) / k as f64;
                p0 = p1;
                p1 = p2;
            }
            if order == 1 {
                p1 = x;
                p0 = 1.0;
            }
            dp = order as f64 * (x * p1 - p0) / (x * x - 1.0);
            let dx = p1 / dp;
            x -= dx;
            if dx.abs() < 1e-16 {
                break;
            }
        }
        if order == 1 {
            x = 0.0;
            dp = 1.0;
        }
        nodes[i] = -x;
        nodes[order - 1 - i] = x;
        let w = 2.0 / ((1.0 - x * x) * dp * dp);
        weights[i] = w;
        weights[order - 1 - i] = w;
    }
    if order == 1 {
        weights[0] = 2.0;
    }
    (nodes, weights)
}

/// Composite Gauss–Legendre rule with `panels` equal panels.
pub fn composite_gl<F: FnMut(f64) -> f64>(
    mut f: F,
    a: f64,
    b: f64,
    panels: usize,
    rule: &(Vec<f64>, Vec<f64>),
) -> f64 {
    let h = (b - a) / panels as f64;
    let mut acc = 0.0;
    for p in 0..panels {
        let mid = a + (p as f64 + 0.5) * h;
        for (x, w) in rule.0.iter().zip(&rule.1) {
            acc += w * f(mid + 0.5 * h * x);
        }
    }
    acc * 0.5 * h
}

/// Panel-doubling Gauss–Legendre integration to relative tolerance `tol`,
/// relative to `∫|f|`. Returns the value and the last change.
pub fn adaptive_gl<F: FnMut(f64) -> f64>(mut f: F, a: f64, b: f64, tol: f64) -> Result<(f64, f64)> {
    let rule = gauss_legendre(16);
    let mut panels = 4;
    let mut prev = composite_gl(&mut f, a, b, panels, &rule);
    while panels < 1 << 16 {
        panels *= 2;
        let mut scale = 0.0;
        let cur = composite_gl(
            |x| {
                let v = f(x);
                scale += v.abs();
                v
            },
            a,
            b,
            panels,
            &rule,
        );
        let scale = scale * (b - a).abs() / (panels * rule.0.len()) as f64;
        let err = (cur - prev).abs();
        if err <= tol * scale.max(cur.abs()) || err == 0.0 {
            return Ok((cur, err));
        }
        prev = cur;
    }
    Err(Error::Numerical(format!(
        "quadrature on [{a}, {b}] did not reach relative tolerance {tol:.1e}"
    )))
}

/// Tanh-sinh nodes and weights on `[0, t_max]`, step `h`, truncated where
/// weights fall below `1e-300` relative to the interval.
pub fn tanh_sinh(t_max: f64, h: f64) -> (Vec<f64>, Vec<f64>) {
    let half = 0.5 * t_max;
    let mut nodes = Vec::new();
    let mut weights = Vec::new();
    let mut k: i64 = -((6.0 / h).ceil() as i64);
    let k_max = -k;
    while k <= k_max {
        let s = k as f64 * h;
        let u = 0.5 * PI * s.sinh();
        let c = u.cosh();
        // 1 + tanh(u) computed without cancellation for negative u.
        let one_plus = 2.0 / (1.0 + (-2.0 * u).exp());
        let w = half * h * 0.5 * PI * s.cosh() / (c * c);
        let x = half * one_plus;
        if w > 1e-300 && x > 0.0 && x < t_max {
            nodes.push(x);
            weights.push(w);
        }
        k += 1;
    }
    (nodes, weights)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gl_integrates_polynomials_exactly() {
        for order in [1usize, 2, 5, 16] {
            let rule = gauss_legendre(order);
            for deg in 0..(2 * order) {
                let v: f64 = rule
                    .0
                    .iter()
                    .zip(&rule.1)
                    .map(|(x, w)| w * x.powi(deg as i32))
                    .sum();
                let expect = if deg % 2 == 1 { 0.0 } else { 2.0 / (deg as f64 + 1.0) };
                assert!((v - expect).abs() < 1e-13, "order {order} deg {deg}: {v}");
            }
        }
    }

    #[test]
    fn tanh_sinh_on_smooth_integrand() {
        let (x, w) = tanh_sinh(3.0, 0.05);
        let v: f64 = x.iter().zip(&w).map(|(x, w)| w * (-x).exp()).sum();
        assert!((v - (1.0 - (-3.0f64).exp())).abs() < 1e-13);
    }

    #[test]
    fn adaptive_converges() {
        let (v, _) = adaptive_gl(|x| x.sin(), 0.0, PI, 1e-13).unwrap();
        assert!((v - 2.0).abs() < 1e-12);
    }
}
