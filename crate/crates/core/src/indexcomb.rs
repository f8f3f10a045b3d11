//! Multi-index combinatorics: parity masks, weight orderings, forward differences.
//!
//! Everything here is exact. Factorials and binomials are big integers, sums
//! of rationals are big rationals, and weights are plain unsigned integers.

use crate::{Error, Result};
use num_bigint::{BigInt, BigUint};
use num_rational::BigRational;
use num_traits::{One, ToPrimitive, Zero};
use serde::{Deserialize, Serialize};
use std::fmt;
use std::ops::{Add, Mul};

/// Multi-index `α ∈ ℕ₀³`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct MultiIndex(pub [u32; 3]);

impl MultiIndex {
    pub const ZERO: MultiIndex = MultiIndex([0, 0, 0]);

    pub fn new(a1: u32, a2: u32, a3: u32) -> Self {
        MultiIndex([a1, a2, a3])
    }

    pub fn order(&self) -> u32 {
        self.0.iter().sum()
    }

    /// `α! = α₁!α₂!α₃!`, exact.
    pub fn factorial(&self) -> BigUint {
        self.0
            .iter()
            .fold(BigUint::one(), |acc, &a| acc * factorial(a))
    }

    /// `2α + ε`.
    pub fn doubled_plus(&self, eps: EpsilonMask) -> MultiIndex {
        let e = eps.as_u32();
        MultiIndex([
            2 * self.0[0] + e[0],
            2 * self.0[1] + e[1],
            2 * self.0[2] + e[2],
        ])
    }

    /// Unique `(α, ε)` with `self = 2α + ε`.
    pub fn split_parity(&self) -> (MultiIndex, EpsilonMask) {
        let eps = EpsilonMask([
            (self.0[0] % 2) as u8,
            (self.0[1] % 2) as u8,
            (self.0[2] % 2) as u8,
        ]);
        let alpha = MultiIndex([self.0[0] / 2, self.0[1] / 2, self.0[2] / 2]);
        (alpha, eps)
    }

    /// All multi-indices of total order `n`, in lexicographically descending order.
    pub fn of_order(n: u32) -> Vec<MultiIndex> {
        let mut out = Vec::with_capacity(n_star(n));
        for a1 in (0..=n).rev() {
            for a2 in (0..=n - a1).rev() {
                out.push(MultiIndex([a1, a2, n - a1 - a2]));
            }
        }
        out
    }

    /// All multi-indices with total order at most `k`.
    pub fn up_to_order(k: u32) -> Vec<MultiIndex> {
        (0..=k).flat_map(MultiIndex::of_order).collect()
    }
}

impl fmt::Display for MultiIndex {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({},{},{})", self.0[0], self.0[1], self.0[2])
    }
}

/// Parity mask `ε ∈ {0,1}³`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct EpsilonMask(pub [u8; 3]);

impl EpsilonMask {
    pub const ZERO: EpsilonMask = EpsilonMask([0, 0, 0]);

    pub fn new(e1: u8, e2: u8, e3: u8) -> Result<Self> {
        if e1 > 1 || e2 > 1 || e3 > 1 {
            return Err(Error::Argument(format!(
                "mask entries must be 0 or 1, got ({e1},{e2},{e3})"
            )));
        }
        Ok(EpsilonMask([e1, e2, e3]))
    }

    /// The eight masks in binary order `(0,0,0), (0,0,1), ..., (1,1,1)`.
    pub fn all() -> [EpsilonMask; 8] {
        let mut out = [EpsilonMask::ZERO; 8];
        for (i, m) in out.iter_mut().enumerate() {
            *m = EpsilonMask([(i >> 2 & 1) as u8, (i >> 1 & 1) as u8, (i & 1) as u8]);
        }
        out
    }

    pub fn weight(&self) -> u32 {
        self.0.iter().map(|&e| e as u32).sum()
    }

    pub fn as_u32(&self) -> [u32; 3] {
        [self.0[0] as u32, self.0[1] as u32, self.0[2] as u32]
    }

    pub fn as_multi_index(&self) -> MultiIndex {
        MultiIndex(self.as_u32())
    }

    /// `m(ε)`, 1-based: 1 for the zero mask, else the first set coordinate.
    pub fn m(&self) -> usize {
        self.0.iter().position(|&e| e == 1).map_or(1, |p| p + 1)
    }

    /// 0-based axis of `m(ε)`.
    pub fn lead_axis(&self) -> usize {
        self.m() - 1
    }

    /// `I(ε)` as an index map: `(I(ε)v)[i] = v[perm[i]]`.
    pub fn perm(&self) -> [usize; 3] {
        let m = self.lead_axis();
        let mut p = [0, 1, 2];
        p.swap(0, m);
        p
    }

    /// `I(ε)·v` for a 3-vector.
    pub fn apply<T: Copy>(&self, v: [T; 3]) -> [T; 3] {
        let p = self.perm();
        [v[p[0]], v[p[1]], v[p[2]]]
    }

    /// `I(ε)` as a 3×3 integer matrix.
    pub fn matrix(&self) -> [[i64; 3]; 3] {
        let p = self.perm();
        let mut out = [[0i64; 3]; 3];
        for (i, row) in out.iter_mut().enumerate() {
            row[p[i]] = 1;
        }
        out
    }
}

impl fmt::Display for EpsilonMask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({},{},{})", self.0[0], self.0[1], self.0[2])
    }
}

/// `N* = (N+1)(N+2)/2`, the number of multi-indices of order `N`.
pub fn n_star(n: u32) -> usize {
    ((n as usize + 1) * (n as usize + 2)) / 2
}

pub fn factorial(n: u32) -> BigUint {
    (1..=n).fold(BigUint::one(), |acc, k| acc * BigUint::from(k))
}

pub fn binomial(n: u32, k: u32) -> BigUint {
    if k > n {
        return BigUint::zero();
    }
    factorial(n) / (factorial(k) * factorial(n - k))
}

/// `P_{N,ε}(α) = (0, 1, N+1)·I(ε)α`.
pub fn p_weight(n: u32, eps: EpsilonMask, alpha: MultiIndex) -> u64 {
    let v = eps.apply(alpha.0);
    v[1] as u64 + (n as u64 + 1) * v[2] as u64
}

/// Per-axis exponents `w` with `P_{N,ε}(α) = Σ_i w_i α_i`.
pub fn p_axis_weights(n: u32, eps: EpsilonMask) -> [u64; 3] {
    let mut w = [0u64; 3];
    for (i, wi) in w.iter_mut().enumerate() {
        let mut unit = [0u32; 3];
        unit[i] = 1;
        *wi = p_weight(n, eps, MultiIndex(unit));
    }
    w
}

/// All multi-indices of order `N` sorted strictly by `P_{N,ε}`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct OrderedBasis {
    pub n: u32,
    pub eps: EpsilonMask,
    pub seq: Vec<MultiIndex>,
}

impl OrderedBasis {
    pub fn len(&self) -> usize {
        self.seq.len()
    }

    pub fn is_empty(&self) -> bool {
        self.seq.is_empty()
    }

    pub fn weights(&self) -> Vec<u64> {
        self.seq
            .iter()
            .map(|a| p_weight(self.n, self.eps, *a))
            .collect()
    }

    /// Exponents `2α(N,ε;k)+ε` in basis order.
    pub fn exponents(&self) -> Vec<MultiIndex> {
        self.seq.iter().map(|a| a.doubled_plus(self.eps)).collect()
    }

    /// 0-based position of `alpha` in the sequence.
    pub fn position(&self, alpha: MultiIndex) -> Option<usize> {
        self.seq.iter().position(|a| *a == alpha)
    }
}

pub fn ordered_basis(n: u32, eps: EpsilonMask) -> Result<OrderedBasis> {
    let mut seq = MultiIndex::of_order(n);
    seq.sort_by_key(|a| p_weight(n, eps, *a));
    for w in seq.windows(2) {
        if p_weight(n, eps, w[0]) == p_weight(n, eps, w[1]) {
            return Err(Error::Numerical(format!(
                "P_{{{n},{eps}}} is not injective: {} and {} share weight {}",
                w[0],
                w[1],
                p_weight(n, eps, w[0])
            )));
        }
    }
    Ok(OrderedBasis { n, eps, seq })
}

/// Signed coefficients `(-1)^{L-l} C(L,l)` of the forward difference stencil.
pub fn forward_difference_coefficients(l_order: u32) -> Vec<BigInt> {
    (0..=l_order)
        .map(|l| {
            let c = BigInt::from(binomial(l_order, l));
            if (l_order - l) % 2 == 1 {
                -c
            } else {
                c
            }
        })
        .collect()
}

/// `∇_λ^L h(λ) = Σ_l (-1)^{L-l} C(L,l) h((l+1)λ)` from samples `h((l+1)λ)`, `l = 0..L`.
pub fn forward_difference<T>(samples: &[T], l_order: u32) -> Result<T>
where
    T: Copy + Zero + Add<Output = T> + Mul<f64, Output = T>,
{
    if samples.len() != l_order as usize + 1 {
        return Err(Error::Argument(format!(
            "forward difference of order {l_order} needs {} samples, got {}",
            l_order + 1,
            samples.len()
        )));
    }
    let coeffs = forward_difference_coefficients(l_order);
    Ok(samples
        .iter()
        .zip(coeffs.iter())
        .fold(T::zero(), |acc, (&s, c)| {
            acc + s * c.to_f64().expect("binomial fits in f64")
        }))
}

/// Exact rational forward difference.
pub fn forward_difference_exact(samples: &[BigRational], l_order: u32) -> Result<BigRational> {
    if samples.len() != l_order as usize + 1 {
        return Err(Error::Argument(format!(
            "forward difference of order {l_order} needs {} samples, got {}",
            l_order + 1,
            samples.len()
        )));
    }
    let coeffs = forward_difference_coefficients(l_order);
    Ok(samples
        .iter()
        .zip(coeffs)
        .fold(BigRational::zero(), |acc, (s, c)| {
            acc + s * BigRational::from_integer(c)
        }))
}

/// `Σ_{l=0}^L (-1)^{L-l} l^k / (l!(L-l)!)` with `0⁰ = 1`.
pub fn magic_sum(l_order: u32, k: u32) -> Result<BigRational> {
    if k > l_order {
        return Err(Error::Argument(format!(
            "magic_sum requires k <= L, got k={k}, L={l_order}"
        )));
    }
    let mut acc = BigRational::zero();
    for l in 0..=l_order {
        let num = BigInt::from(l).pow(k);
        let den = BigInt::from(factorial(l) * factorial(l_order - l));
        let term = BigRational::new(num, den);
        if (l_order - l) % 2 == 1 {
            acc -= term;
        } else {
            acc += term;
        }
    }
    Ok(acc)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct QReport {
    pub n: u32,
    pub eps: EpsilonMask,
    /// Weight of the reversal `σ₀(j) = N*+1-j`.
    pub q: u128,
    /// Minimum weight over every other permutation.
    pub q_tilde: u128,
    pub permutations_checked: u64,
    pub holds: bool,
}

/// Largest `N*` accepted by [`q_minimality_check`].
pub const Q_CHECK_MAX_NSTAR: usize = 10;

/// Exhaustive check that the reversal permutation uniquely minimizes
/// `Σ_j 2(N+1)^{2(j-1)} P_{N,ε}(α(N,ε;σ(j)))`.
pub fn q_minimality_check(n: u32, eps: EpsilonMask) -> Result<QReport> {
    if n == 0 {
        return Err(Error::Argument("q_minimality_check needs N >= 1".into()));
    }
    let ns = n_star(n);
    if ns > Q_CHECK_MAX_NSTAR {
        return Err(Error::Argument(format!(
            "N* = {ns} exceeds the enumeration bound {Q_CHECK_MAX_NSTAR}"
        )));
    }
    let basis = ordered_basis(n, eps)?;
    let p: Vec<u128> = basis.weights().into_iter().map(|w| w as u128).collect();
    let base = (n as u128 + 1).pow(2);
    let row_w: Vec<u128> = (0..ns).map(|j| 2 * base.pow(j as u32)).collect();
    let cost = |sigma: &[usize]| -> u128 { (0..ns).map(|j| row_w[j] * p[sigma[j]]).sum() };

    let sigma0: Vec<usize> = (0..ns).map(|j| ns - 1 - j).collect();
    let q = cost(&sigma0);

    let mut perm: Vec<usize> = (0..ns).collect();
    let mut q_tilde = u128::MAX;
    let mut checked = 0u64;
    heap_permutations(&mut perm, |s| {
        checked += 1;
        if s != sigma0.as_slice() {
            q_tilde = q_tilde.min(cost(s));
        }
    });
    Ok(QReport {
        n,
        eps,
        q,
        q_tilde,
        permutations_checked: checked,
        holds: q < q_tilde,
    })
}

/// Visits every permutation of `items` (Heap's algorithm, iterative).
pub fn heap_permutations<F: FnMut(&[usize])>(items: &mut [usize], mut visit: F) {
    let n = items.len();
    let mut c = vec![0usize; n];
    visit(items);
    let mut i = 1;
    while i < n {
        if c[i] < i {
            if i % 2 == 0 {
                items.swap(0, i);
            } else {
                items.swap(c[i], i);
            }
            visit(items);
            c[i] += 1;
            i = 1;
        } else {
            c[i] = 0;
            i += 1;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn eps(a: u8, b: u8, c: u8) -> EpsilonMask {
        EpsilonMask::new(a, b, c).unwrap()
    }

    #[test]
    fn p_weight_examples() {
        assert_eq!(p_weight(1, eps(1, 0, 1), MultiIndex::new(0, 1, 0)), 1);
        assert_eq!(p_weight(3, eps(0, 0, 1), MultiIndex::new(1, 1, 0)), 5);
        for e in EpsilonMask::all() {
            assert_eq!(p_weight(4, e, MultiIndex::ZERO), 0);
        }
    }

    #[test]
    fn p_weight_matches_matrix_product() {
        for e in EpsilonMask::all() {
            let m = e.matrix();
            for n in 0..4u32 {
                for a in MultiIndex::up_to_order(5) {
                    let ia: Vec<i64> = (0..3)
                        .map(|i| (0..3).map(|j| m[i][j] * a.0[j] as i64).sum())
                        .collect();
                    let expect = ia[1] + (n as i64 + 1) * ia[2];
                    assert_eq!(p_weight(n, e, a) as i64, expect);
                }
            }
        }
    }

    #[test]
    fn lead_axis_and_involution() {
        assert_eq!(EpsilonMask::ZERO.m(), 1);
        assert_eq!(eps(0, 1, 1).m(), 2);
        assert_eq!(eps(0, 0, 1).m(), 3);
        for e in EpsilonMask::all() {
            let v = [10, 20, 30];
            assert_eq!(e.apply(e.apply(v)), v);
            if e.weight() > 0 {
                assert_eq!(e.apply(e.0)[0], 1);
            }
        }
    }

    #[test]
    fn ordered_basis_examples() {
        let b = ordered_basis(1, EpsilonMask::ZERO).unwrap();
        assert_eq!(
            b.seq,
            vec![
                MultiIndex::new(1, 0, 0),
                MultiIndex::new(0, 1, 0),
                MultiIndex::new(0, 0, 1)
            ]
        );
        for e in EpsilonMask::all() {
            assert_eq!(ordered_basis(0, e).unwrap().seq, vec![MultiIndex::ZERO]);
        }
        assert_eq!(ordered_basis(2, EpsilonMask::ZERO).unwrap().len(), 6);
    }

    #[test]
    fn forward_difference_examples() {
        assert_eq!(forward_difference(&[3.5], 0).unwrap(), 3.5);
        assert_eq!(forward_difference(&[2.0, 7.0], 1).unwrap(), 5.0);
        assert!(forward_difference(&[1.0, 2.0], 2).is_err());
    }

    #[test]
    fn forward_difference_of_power_is_factorial() {
        // λ = 1/4 keeps every sample an exact dyadic.
        let lam = BigRational::new(BigInt::from(1), BigInt::from(4));
        for big_l in 0..=8u32 {
            for j in 0..=big_l {
                let samples: Vec<BigRational> = (0..=big_l)
                    .map(|l| {
                        let x = &lam * BigRational::from_integer(BigInt::from(l + 1));
                        num_traits::pow(x, j as usize)
                    })
                    .collect();
                let d = forward_difference_exact(&samples, big_l).unwrap();
                let scaled = d / num_traits::pow(lam.clone(), big_l as usize);
                let expect = if j == big_l {
                    BigRational::from_integer(BigInt::from(factorial(big_l)))
                } else {
                    BigRational::zero()
                };
                assert_eq!(scaled, expect, "L={big_l}, j={j}");
            }
        }
    }

    #[test]
    fn magic_examples() {
        assert_eq!(magic_sum(3, 3).unwrap(), BigRational::one());
        assert_eq!(magic_sum(3, 1).unwrap(), BigRational::zero());
        assert_eq!(magic_sum(0, 0).unwrap(), BigRational::one());
        assert!(magic_sum(2, 3).is_err());
    }

    #[test]
    fn q_check_small_cases() {
        let r = q_minimality_check(1, EpsilonMask::ZERO).unwrap();
        assert!(r.holds);
        assert_eq!(r.permutations_checked, 6);
        // Explicit sum for the reversal: P = (0,1,2), weights 2·4^j.
        assert_eq!(r.q, 2 * 2 + 2 * 4 + 2 * 16 * 0);
        let r2 = q_minimality_check(2, eps(1, 0, 0)).unwrap();
        assert!(r2.holds);
        assert_eq!(r2.permutations_checked, 720);
        assert!(q_minimality_check(4, EpsilonMask::ZERO).is_err());
        assert!(q_minimality_check(0, EpsilonMask::ZERO).is_err());
    }

    #[test]
    fn heap_visits_all() {
        let mut v: Vec<usize> = (0..5).collect();
        let mut seen = std::collections::BTreeSet::new();
        heap_permutations(&mut v, |p| {
            seen.insert(p.to_vec());
        });
        assert_eq!(seen.len(), 120);
    }
}
