//! Gauss–Legendre quadrature and tensor Legendre bases on axis-aligned boxes.

use std::f64::consts::PI;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::poly::{graded_multi_indices, MonomialSet, MultiIndex, Polynomial};

/// `(P_k(t), P_k'(t))` by the three-term recurrence.
pub fn legendre_1d(k: u32, t: f64) -> (f64, f64) {
    if k == 0 {
        return (1.0, 0.0);
    }
    let (mut p0, mut p1) = (1.0, t);
    let (mut d0, mut d1) = (0.0, 1.0);
    for j in 1..k {
        let jf = j as f64;
        let p2 = ((2.0 * jf + 1.0) * t * p1 - jf * p0) / (jf + 1.0);
        let d2 = d0 + (2.0 * jf + 1.0) * p1;
        p0 = p1;
        p1 = p2;
        d0 = d1;
        d1 = d2;
    }
    (p1, d1)
}

/// Nodes and weights of the `q`-point rule on `[−1, 1]`.
pub fn gauss_legendre(q: usize) -> (Vec<f64>, Vec<f64>) {
    assert!(q >= 1, "quadrature needs at least one node");
    let mut nodes = vec![0.0; q];
    let mut weights = vec![0.0; q];
    for i in 0..q.div_ceil(2) {
        let mut t = (PI * (i as f64 + 0.75) / (q as f64 + 0.5)).cos();
        for _ in 0..100 {
            let (p, dp) = legendre_1d(q as u32, t);
            let dt = p / dp;
            t -= dt;
            if dt.abs() < 1e-16 {
                break;
            }
        }
        let (_, dp) = legendre_1d(q as u32, t);
        let w = 2.0 / ((1.0 - t * t) * dp * dp);
        nodes[i] = -t;
        nodes[q - 1 - i] = t;
        weights[i] = w;
        weights[q - 1 - i] = w;
    }
    if q % 2 == 1 {
        nodes[q / 2] = 0.0;
    }
    (nodes, weights)
}

/// Axis-aligned box `Π [lower_i, upper_i]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IntervalBox {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl IntervalBox {
    pub fn new(lower: Vec<f64>, upper: Vec<f64>) -> Result<Self> {
        if lower.len() != upper.len() || lower.is_empty() {
            return Err(Error::Parameter("box bounds must be nonempty and equally long".into()));
        }
        if lower.iter().zip(&upper).any(|(l, u)| !(l < u) || !l.is_finite() || !u.is_finite()) {
            return Err(Error::Parameter(format!("degenerate box {lower:?} x {upper:?}")));
        }
        Ok(Self { lower, upper })
    }

    /// `[−a_1, a_1] × … × [−a_n, a_n]`.
    pub fn symmetric(half_widths: &[f64]) -> Result<Self> {
        Self::new(half_widths.iter().map(|a| -a).collect(), half_widths.to_vec())
    }

    /// Axis-aligned hull of `points`, each side widened by `inflate` times its length.
    pub fn hull(points: &[Vec<f64>], inflate: f64) -> Result<Self> {
        let first = points
            .first()
            .ok_or_else(|| Error::Parameter("hull of an empty point set".into()))?;
        let mut lower = first.clone();
        let mut upper = first.clone();
        for p in points {
            for (j, &v) in p.iter().enumerate() {
                lower[j] = lower[j].min(v);
                upper[j] = upper[j].max(v);
            }
        }
        for j in 0..lower.len() {
            let pad = inflate * (upper[j] - lower[j]).max(f64::EPSILON);
            lower[j] -= pad;
            upper[j] += pad;
        }
        Self::new(lower, upper)
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    pub fn volume(&self) -> f64 {
        self.lower.iter().zip(&self.upper).map(|(l, u)| u - l).product()
    }

    pub fn center(&self) -> Vec<f64> {
        self.lower.iter().zip(&self.upper).map(|(l, u)| 0.5 * (l + u)).collect()
    }

    pub fn contains(&self, w: &[f64]) -> bool {
        w.len() == self.dim()
            && w.iter().enumerate().all(|(j, &v)| {
                let slack = 1e-12 * (self.upper[j] - self.lower[j]);
                v >= self.lower[j] - slack && v <= self.upper[j] + slack
            })
    }

    /// Affine image of `w` in `[−1, 1]ⁿ`.
    pub fn to_reference(&self, w: &[f64]) -> Vec<f64> {
        w.iter()
            .enumerate()
            .map(|(j, &v)| (2.0 * v - self.lower[j] - self.upper[j]) / (self.upper[j] - self.lower[j]))
            .collect()
    }

    pub fn from_reference(&self, t: &[f64]) -> Vec<f64> {
        t.iter()
            .enumerate()
            .map(|(j, &s)| 0.5 * (self.lower[j] + self.upper[j]) + 0.5 * s * (self.upper[j] - self.lower[j]))
            .collect()
    }

    pub fn tensor_quadrature(&self, q: usize) -> TensorQuadrature {
        TensorQuadrature::new(self, q)
    }
}

/// Tensor Gauss–Legendre points and unnormalized weights (they sum to the box volume).
#[derive(Debug, Clone)]
pub struct TensorQuadrature {
    pub points: Vec<Vec<f64>>,
    pub weights: Vec<f64>,
}

impl TensorQuadrature {
    pub fn new(domain: &IntervalBox, q: usize) -> Self {
        let (t, w) = gauss_legendre(q);
        let n = domain.dim();
        let jac = domain.volume() / 2f64.powi(n as i32);
        let total = q.pow(n as u32);
        let mut points = Vec::with_capacity(total);
        let mut weights = Vec::with_capacity(total);
        let mut idx = vec![0usize; n];
        for _ in 0..total {
            let refp: Vec<f64> = idx.iter().map(|&i| t[i]).collect();
            points.push(domain.from_reference(&refp));
            weights.push(jac * idx.iter().map(|&i| w[i]).product::<f64>());
            for d in (0..n).rev() {
                idx[d] += 1;
                if idx[d] < q {
                    break;
                }
                idx[d] = 0;
            }
        }
        Self { points, weights }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn integrate(&self, f: impl Fn(&[f64]) -> f64) -> f64 {
        self.points.iter().zip(&self.weights).map(|(p, w)| w * f(p)).sum()
    }
}

/// Products of 1-D Legendre polynomials in the box's reference coordinates.
#[derive(Debug, Clone)]
pub struct LegendreTensorBasis {
    domain: IntervalBox,
    max_degree: u32,
    indices: Vec<MultiIndex>,
}

impl LegendreTensorBasis {
    /// All multi-indices of total degree `<= max_degree`, graded then lexicographic.
    pub fn new(domain: IntervalBox, max_degree: u32) -> Self {
        let indices = graded_multi_indices(domain.dim(), max_degree);
        Self {
            domain,
            max_degree,
            indices,
        }
    }

    pub fn dim(&self) -> usize {
        self.domain.dim()
    }

    pub fn max_degree(&self) -> u32 {
        self.max_degree
    }

    pub fn domain(&self) -> &IntervalBox {
        &self.domain
    }

    pub fn indices(&self) -> &[MultiIndex] {
        &self.indices
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    /// `∫ P_α² dw` over the box.
    pub fn norm_squared(&self, idx: &[u32]) -> f64 {
        let factor: f64 = idx.iter().map(|&k| 1.0 / (2 * k + 1) as f64).product();
        self.domain.volume() * factor
    }

    /// `P_α` expanded in monomials of the original coordinates `w`.
    pub fn to_polynomial(&self, idx: &[u32], set: &Arc<MonomialSet>) -> Polynomial {
        let n = self.dim();
        let mut out = Polynomial::constant(set, 1.0);
        for (j, &k) in idx.iter().enumerate() {
            let (l, u) = (self.domain.lower[j], self.domain.upper[j]);
            let mut lin = vec![0.0; n];
            lin[j] = 2.0 / (u - l);
            let t = Polynomial::linear(set, &lin).add(&Polynomial::constant(set, -(l + u) / (u - l)));
            let mut p0 = Polynomial::constant(set, 1.0);
            let mut p1 = t.clone();
            let pk = if k == 0 {
                p0
            } else {
                for m in 1..k {
                    let mf = m as f64;
                    let mut p2 = t.mul(&p1).scale((2.0 * mf + 1.0) / (mf + 1.0));
                    p2.add_scaled(&p0, -mf / (mf + 1.0));
                    p0 = p1;
                    p1 = p2;
                }
                p1
            };
            out = out.mul(&pk);
        }
        out
    }
}

fn check_point(basis: &LegendreTensorBasis, idx: &[u32], w: &[f64]) -> Result<Vec<f64>> {
    if idx.len() != basis.dim() {
        return Err(Error::Parameter(format!(
            "multi-index of length {} for a {}-dimensional basis",
            idx.len(),
            basis.dim()
        )));
    }
    if !basis.domain.contains(w) {
        return Err(Error::Domain { point: w.to_vec() });
    }
    Ok(basis.domain.to_reference(w))
}

/// `P_α(w) = Π_j P_{α_j}(t_j(w))`.
pub fn legendre_eval(basis: &LegendreTensorBasis, idx: &[u32], w: &[f64]) -> Result<f64> {
    let t = check_point(basis, idx, w)?;
    Ok(idx.iter().zip(&t).map(|(&k, &tj)| legendre_1d(k, tj).0).product())
}

/// Gradient of `P_α` with respect to `w`.
pub fn legendre_gradient(basis: &LegendreTensorBasis, idx: &[u32], w: &[f64]) -> Result<Vec<f64>> {
    let t = check_point(basis, idx, w)?;
    let vals: Vec<(f64, f64)> = idx.iter().zip(&t).map(|(&k, &tj)| legendre_1d(k, tj)).collect();
    Ok((0..idx.len())
        .map(|j| {
            let scale = 2.0 / (basis.domain.upper[j] - basis.domain.lower[j]);
            vals.iter()
                .enumerate()
                .map(|(m, &(p, dp))| if m == j { dp * scale } else { p })
                .product()
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn default_box() -> IntervalBox {
        IntervalBox::symmetric(&[0.65, 0.1]).unwrap()
    }

    #[test]
    fn gauss_rule_integrates_polynomials() {
        let (t, w) = gauss_legendre(6);
        assert_abs_diff_eq!(w.iter().sum::<f64>(), 2.0, epsilon = 1e-14);
        // exact up to degree 11
        let int: f64 = t.iter().zip(&w).map(|(x, wi)| wi * x.powi(10)).sum();
        assert_abs_diff_eq!(int, 2.0 / 11.0, epsilon = 1e-14);
        assert!(t.windows(2).all(|p| p[1] > p[0]));
    }

    #[test]
    fn legendre_derivative() {
        for k in 0..8 {
            let t = 0.3;
            let e = 1e-6;
            let fd = (legendre_1d(k, t + e).0 - legendre_1d(k, t - e).0) / (2.0 * e);
            assert_abs_diff_eq!(fd, legendre_1d(k, t).1, epsilon = 1e-7);
        }
        assert_abs_diff_eq!(legendre_1d(3, 0.5).0, 0.5 * (5.0 * 0.125 - 1.5), epsilon = 1e-15);
    }

    #[test]
    fn tensor_examples() {
        let b = LegendreTensorBasis::new(default_box(), 3);
        assert_eq!(legendre_eval(&b, &[0, 0], &[0.3, -0.05]).unwrap(), 1.0);
        assert_abs_diff_eq!(legendre_eval(&b, &[1, 0], &b.domain().center()).unwrap(), 0.0);
        assert!(matches!(
            legendre_eval(&b, &[1, 0], &[0.7, 0.0]),
            Err(Error::Domain { .. })
        ));
        let quad = b.domain().tensor_quadrature(6);
        let int = quad.integrate(|w| legendre_eval(&b, &[2, 0], w).unwrap().powi(2));
        assert_abs_diff_eq!(int, b.domain().volume() / 5.0, epsilon = 1e-10);
        assert_abs_diff_eq!(int, b.norm_squared(&[2, 0]), epsilon = 1e-10);
    }

    #[test]
    fn tensor_orthogonality() {
        let b = LegendreTensorBasis::new(default_box(), 11);
        let quad = b.domain().tensor_quadrature(12);
        let vals: Vec<Vec<f64>> = quad
            .points
            .iter()
            .map(|w| b.indices().iter().map(|i| legendre_eval(&b, i, w).unwrap()).collect())
            .collect();
        let mut worst: f64 = 0.0;
        for a in 0..b.len() {
            for c in 0..b.len() {
                let g: f64 = vals.iter().zip(&quad.weights).map(|(v, w)| w * v[a] * v[c]).sum();
                let expect = if a == c { b.norm_squared(&b.indices()[a]) } else { 0.0 };
                worst = worst.max((g - expect).abs() / b.domain().volume());
            }
        }
        assert!(worst < 1e-8, "worst {worst}");
    }

    #[test]
    fn gradient_and_monomial_form() {
        let b = LegendreTensorBasis::new(default_box(), 5);
        let set = MonomialSet::new(2, 5);
        let w = [0.21, -0.033];
        for idx in b.indices() {
            let p = b.to_polynomial(idx, &set);
            let (v, g) = p.eval_gradient(&w);
            assert_abs_diff_eq!(v, legendre_eval(&b, idx, &w).unwrap(), epsilon = 1e-10);
            let ga = legendre_gradient(&b, idx, &w).unwrap();
            for (x, y) in g.iter().zip(ga) {
                assert_abs_diff_eq!(*x, y, epsilon = 1e-8 * (1.0 + y.abs()));
            }
        }
    }

    #[test]
    fn hull_inflation() {
        let h = IntervalBox::hull(&[vec![0.0, 1.0], vec![1.0, 3.0]], 0.1).unwrap();
        assert_abs_diff_eq!(h.lower[0], -0.1);
        assert_abs_diff_eq!(h.upper[1], 3.2);
    }
}
