//! Dense multivariate polynomials truncated at a fixed total degree.
//!
//! Monomials are stored in graded order: increasing total degree, and within
//! one degree in descending lexicographic order of the exponent tuple
//! (`x1^2, x1 x2, x2^2`). Every polynomial carries a shared [`MonomialSet`]
//! so products can be truncated without re-hashing exponents.

use std::collections::HashMap;
use std::fmt;
use std::sync::Arc;

use nalgebra::DMatrix;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

/// Exponent tuple of a monomial.
pub type MultiIndex = Vec<u32>;

/// Enumerates all multi-indices in `nvars` variables with total degree
/// `<= max_degree`, in graded descending-lexicographic order.
pub fn graded_multi_indices(nvars: usize, max_degree: u32) -> Vec<MultiIndex> {
    let mut out = Vec::new();
    for d in 0..=max_degree {
        homogeneous_indices(nvars, d, &mut Vec::with_capacity(nvars), &mut out);
    }
    out
}

fn homogeneous_indices(nvars: usize, remaining: u32, prefix: &mut Vec<u32>, out: &mut Vec<MultiIndex>) {
    if prefix.len() + 1 == nvars {
        let mut idx = prefix.clone();
        idx.push(remaining);
        out.push(idx);
        return;
    }
    if nvars == 0 {
        if remaining == 0 {
            out.push(Vec::new());
        }
        return;
    }
    for first in (0..=remaining).rev() {
        prefix.push(first);
        homogeneous_indices(nvars, remaining - first, prefix, out);
        prefix.pop();
    }
}

pub fn total_degree(idx: &[u32]) -> u32 {
    idx.iter().sum()
}

/// The monomial basis shared by a family of polynomials.
#[derive(Debug, Clone)]
pub struct MonomialSet {
    nvars: usize,
    max_degree: u32,
    exponents: Vec<MultiIndex>,
    lookup: HashMap<MultiIndex, usize>,
    degree_start: Vec<usize>,
}

impl MonomialSet {
    pub fn new(nvars: usize, max_degree: u32) -> Arc<Self> {
        let exponents = graded_multi_indices(nvars, max_degree);
        let lookup = exponents
            .iter()
            .enumerate()
            .map(|(i, e)| (e.clone(), i))
            .collect();
        let mut degree_start = vec![0; max_degree as usize + 2];
        for (i, e) in exponents.iter().enumerate().rev() {
            degree_start[total_degree(e) as usize] = i;
        }
        degree_start[max_degree as usize + 1] = exponents.len();
        Arc::new(Self {
            nvars,
            max_degree,
            exponents,
            lookup,
            degree_start,
        })
    }

    pub fn nvars(&self) -> usize {
        self.nvars
    }

    pub fn max_degree(&self) -> u32 {
        self.max_degree
    }

    pub fn len(&self) -> usize {
        self.exponents.len()
    }

    pub fn is_empty(&self) -> bool {
        self.exponents.is_empty()
    }

    pub fn exponents(&self) -> &[MultiIndex] {
        &self.exponents
    }

    pub fn position(&self, idx: &[u32]) -> Option<usize> {
        self.lookup.get(idx).copied()
    }

    /// Range of positions holding the monomials of total degree `d`.
    pub fn degree_range(&self, d: u32) -> std::ops::Range<usize> {
        if d > self.max_degree {
            return self.len()..self.len();
        }
        self.degree_start[d as usize]..self.degree_start[d as usize + 1]
    }
}

#[derive(Clone)]
pub struct Polynomial {
    set: Arc<MonomialSet>,
    coeffs: Vec<f64>,
}

impl fmt::Debug for Polynomial {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let terms: Vec<_> = self
            .terms()
            .filter(|(_, c)| *c != 0.0)
            .map(|(e, c)| format!("{c:+.6e}*{e:?}"))
            .collect();
        write!(f, "Polynomial[{}]", terms.join(" "))
    }
}

impl Polynomial {
    pub fn zero(set: &Arc<MonomialSet>) -> Self {
        Self {
            set: Arc::clone(set),
            coeffs: vec![0.0; set.len()],
        }
    }

    pub fn constant(set: &Arc<MonomialSet>, c: f64) -> Self {
        let mut p = Self::zero(set);
        p.coeffs[0] = c;
        p
    }

    /// The coordinate polynomial `x_var`.
    pub fn variable(set: &Arc<MonomialSet>, var: usize) -> Self {
        Self::linear(set, &unit(set.nvars(), var))
    }

    /// `sum_j a_j x_j`.
    pub fn linear(set: &Arc<MonomialSet>, a: &[f64]) -> Self {
        let mut p = Self::zero(set);
        for (j, &aj) in a.iter().enumerate() {
            let mut e = vec![0; set.nvars()];
            e[j] = 1;
            if let Some(pos) = set.position(&e) {
                p.coeffs[pos] = aj;
            }
        }
        p
    }

    pub fn from_terms(set: &Arc<MonomialSet>, terms: &[(MultiIndex, f64)]) -> Self {
        let mut p = Self::zero(set);
        for (e, c) in terms {
            if let Some(pos) = set.position(e) {
                p.coeffs[pos] += c;
            }
        }
        p
    }

    pub fn set(&self) -> &Arc<MonomialSet> {
        &self.set
    }

    pub fn coeffs(&self) -> &[f64] {
        &self.coeffs
    }

    pub fn coeffs_mut(&mut self) -> &mut [f64] {
        &mut self.coeffs
    }

    pub fn coefficient(&self, idx: &[u32]) -> f64 {
        self.set.position(idx).map_or(0.0, |p| self.coeffs[p])
    }

    pub fn set_coefficient(&mut self, idx: &[u32], value: f64) {
        let pos = self
            .set
            .position(idx)
            .expect("multi-index outside the monomial set");
        self.coeffs[pos] = value;
    }

    pub fn terms(&self) -> impl Iterator<Item = (&MultiIndex, f64)> + '_ {
        self.set.exponents().iter().zip(self.coeffs.iter().copied())
    }

    /// Highest total degree carrying a nonzero coefficient.
    pub fn degree(&self) -> Option<u32> {
        self.terms()
            .filter(|(_, c)| *c != 0.0)
            .map(|(e, _)| total_degree(e))
            .max()
    }

    pub fn scale(&self, s: f64) -> Self {
        Self {
            set: Arc::clone(&self.set),
            coeffs: self.coeffs.iter().map(|c| c * s).collect(),
        }
    }

    pub fn add_scaled(&mut self, other: &Polynomial, s: f64) {
        debug_assert!(Arc::ptr_eq(&self.set, &other.set) || self.set.len() == other.set.len());
        for (a, b) in self.coeffs.iter_mut().zip(&other.coeffs) {
            *a += s * b;
        }
    }

    pub fn add(&self, other: &Polynomial) -> Self {
        let mut out = self.clone();
        out.add_scaled(other, 1.0);
        out
    }

    pub fn sub(&self, other: &Polynomial) -> Self {
        let mut out = self.clone();
        out.add_scaled(other, -1.0);
        out
    }

    /// Product truncated at the set's maximum degree.
    pub fn mul(&self, other: &Polynomial) -> Self {
        let mut out = Self::zero(&self.set);
        let max = self.set.max_degree();
        let mut buf = vec![0u32; self.set.nvars()];
        for (ea, &ca) in self.set.exponents().iter().zip(&self.coeffs) {
            if ca == 0.0 {
                continue;
            }
            let da = total_degree(ea);
            for (eb, &cb) in other.set.exponents().iter().zip(&other.coeffs) {
                if cb == 0.0 || da + total_degree(eb) > max {
                    continue;
                }
                for ((o, a), b) in buf.iter_mut().zip(ea).zip(eb) {
                    *o = a + b;
                }
                let pos = self.set.position(&buf).expect("product exponent in set");
                out.coeffs[pos] += ca * cb;
            }
        }
        out
    }

    pub fn derivative(&self, var: usize) -> Self {
        let mut out = Self::zero(&self.set);
        let mut buf = vec![0u32; self.set.nvars()];
        for (e, c) in self.terms() {
            if c == 0.0 || e[var] == 0 {
                continue;
            }
            buf.copy_from_slice(e);
            buf[var] -= 1;
            let pos = self.set.position(&buf).expect("derivative exponent in set");
            out.coeffs[pos] += c * e[var] as f64;
        }
        out
    }

    /// Part of total degree exactly `d`.
    pub fn homogeneous(&self, d: u32) -> Self {
        let mut out = Self::zero(&self.set);
        let r = self.set.degree_range(d);
        out.coeffs[r.clone()].copy_from_slice(&self.coeffs[r]);
        out
    }

    /// Drops every term of total degree greater than `d`.
    pub fn truncate(&self, d: u32) -> Self {
        let mut out = self.clone();
        let start = self.set.degree_range(d + 1).start;
        for c in &mut out.coeffs[start..] {
            *c = 0.0;
        }
        out
    }

    pub fn eval(&self, x: &[f64]) -> f64 {
        let powers = power_table(x, self.set.max_degree());
        self.eval_with(&powers)
    }

    fn eval_with(&self, powers: &[Vec<f64>]) -> f64 {
        self.terms()
            .filter(|(_, c)| *c != 0.0)
            .map(|(e, c)| {
                c * e
                    .iter()
                    .enumerate()
                    .map(|(j, &p)| powers[j][p as usize])
                    .product::<f64>()
            })
            .sum()
    }

    /// Value and gradient at `x`.
    pub fn eval_gradient(&self, x: &[f64]) -> (f64, Vec<f64>) {
        let n = self.set.nvars();
        let powers = power_table(x, self.set.max_degree());
        let mut value = 0.0;
        let mut grad = vec![0.0; n];
        for (e, c) in self.terms() {
            if c == 0.0 {
                continue;
            }
            let mono: f64 = (0..n).map(|j| powers[j][e[j] as usize]).product();
            value += c * mono;
            for (k, g) in grad.iter_mut().enumerate() {
                if e[k] == 0 {
                    continue;
                }
                let partial: f64 = (0..n)
                    .map(|j| {
                        if j == k {
                            e[j] as f64 * powers[j][e[j] as usize - 1]
                        } else {
                            powers[j][e[j] as usize]
                        }
                    })
                    .product();
                *g += c * partial;
            }
        }
        (value, grad)
    }

    /// `p(T v)` as a polynomial in `v`, where `T` is square.
    pub fn compose_linear(&self, t: &DMatrix<f64>) -> Self {
        let n = self.set.nvars();
        assert_eq!(t.nrows(), n);
        assert_eq!(t.ncols(), n);
        let forms: Vec<Polynomial> = (0..n)
            .map(|j| {
                let row: Vec<f64> = (0..n).map(|k| t[(j, k)]).collect();
                Self::linear(&self.set, &row)
            })
            .collect();
        // powers[j][p] = (T v)_j^p
        let max = self.set.max_degree() as usize;
        let powers: Vec<Vec<Polynomial>> = forms
            .iter()
            .map(|f| {
                let mut v = vec![Self::constant(&self.set, 1.0)];
                for p in 1..=max {
                    let next = v[p - 1].mul(f);
                    v.push(next);
                }
                v
            })
            .collect();
        let mut out = Self::zero(&self.set);
        for (e, c) in self.terms() {
            if c == 0.0 {
                continue;
            }
            let mut mono = Self::constant(&self.set, c);
            for (j, &p) in e.iter().enumerate() {
                if p > 0 {
                    mono = mono.mul(&powers[j][p as usize]);
                }
            }
            out.add_scaled(&mono, 1.0);
        }
        out
    }

    pub fn max_abs_coefficient(&self) -> f64 {
        self.coeffs.iter().fold(0.0, |m, c| m.max(c.abs()))
    }
}

/// One nonzero coefficient, as stored in map files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Term {
    pub exponents: Vec<u32>,
    pub coeff: f64,
}

#[derive(Serialize, Deserialize)]
struct PolynomialTable {
    nvars: usize,
    max_degree: u32,
    terms: Vec<Term>,
}

impl Serialize for Polynomial {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        PolynomialTable {
            nvars: self.set.nvars(),
            max_degree: self.set.max_degree(),
            terms: self
                .terms()
                .filter(|(_, c)| *c != 0.0)
                .map(|(e, c)| Term {
                    exponents: e.clone(),
                    coeff: c,
                })
                .collect(),
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for Polynomial {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let table = PolynomialTable::deserialize(d)?;
        let set = MonomialSet::new(table.nvars, table.max_degree);
        let mut p = Polynomial::zero(&set);
        for t in table.terms {
            let pos = set.position(&t.exponents).ok_or_else(|| {
                serde::de::Error::custom(format!(
                    "exponent {:?} outside {} variables of degree <= {}",
                    t.exponents, table.nvars, table.max_degree
                ))
            })?;
            p.coeffs[pos] += t.coeff;
        }
        Ok(p)
    }
}

fn unit(n: usize, i: usize) -> Vec<f64> {
    let mut v = vec![0.0; n];
    v[i] = 1.0;
    v
}

fn power_table(x: &[f64], max_degree: u32) -> Vec<Vec<f64>> {
    x.iter()
        .map(|&xi| {
            let mut row = Vec::with_capacity(max_degree as usize + 1);
            let mut acc = 1.0;
            for _ in 0..=max_degree {
                row.push(acc);
                acc *= xi;
            }
            row
        })
        .collect()
}

/// Evaluates a vector of polynomials and their Jacobian (row `i` = gradient of component `i`).
pub fn eval_jacobian(polys: &[Polynomial], x: &[f64]) -> (Vec<f64>, DMatrix<f64>) {
    let mut values = Vec::with_capacity(polys.len());
    let mut jac = DMatrix::zeros(polys.len(), x.len());
    for (i, p) in polys.iter().enumerate() {
        let (v, g) = p.eval_gradient(x);
        values.push(v);
        for (j, gj) in g.into_iter().enumerate() {
            jac[(i, j)] = gj;
        }
    }
    (values, jac)
}
