//! Feedback-linearizing synthesis for `ẇ = Λw + (b + Nw)u`: pole placement,
//! the non-resonance check, power-series and Galerkin solutions of
//! `∂Φ(w)(Λw + (b + Nw)(α(w) − kᵀΦ(w))) = ÃΦ(w)`, and reference simulations.

use std::sync::Arc;

use log::{debug, warn};
use nalgebra::{DMatrix, DVector};
use ode_solvers::{Dopri5, System};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dictionary::Dictionary;
use crate::edmd::Eigenfunctional;
use crate::error::{Error, Result};
use crate::lifting::{lift, BilinearModel};
use crate::linalg::{krylov_matrix, numerical_rank, real_diagonalize};
use crate::plant::Controller;
use crate::poly::{eval_jacobian, graded_multi_indices, MonomialSet, Polynomial};
use crate::spatial::{legendre_1d, IntervalBox, StateProfile};

/// `Λ`, `b`, `N` of the lifted model.
#[derive(Debug, Clone, PartialEq)]
pub struct Bilinear {
    pub lambda: DVector<f64>,
    pub b: DVector<f64>,
    pub n: DMatrix<f64>,
}

impl Bilinear {
    pub fn new(lambda: DVector<f64>, b: DVector<f64>, n: DMatrix<f64>) -> Result<Self> {
        let dim = lambda.len();
        if b.len() != dim || n.shape() != (dim, dim) {
            return Err(Error::Parameter(format!(
                "bilinear system with inconsistent shapes: {dim}, {}, {:?}",
                b.len(),
                n.shape()
            )));
        }
        Ok(Self { lambda, b, n })
    }

    pub fn from_model(m: &BilinearModel) -> Self {
        Self {
            lambda: DVector::from_column_slice(&m.lambda),
            b: m.b_vector(),
            n: m.n_mat(),
        }
    }

    pub fn dim(&self) -> usize {
        self.lambda.len()
    }

    pub fn lambda_matrix(&self) -> DMatrix<f64> {
        DMatrix::from_diagonal(&self.lambda)
    }

    /// `Λw + (b + Nw)u`.
    pub fn vector_field(&self, w: &DVector<f64>, u: f64) -> DVector<f64> {
        self.lambda.component_mul(w) + (&self.b + &self.n * w) * u
    }
}

/// Desired closed-loop eigenvalues: real, distinct and negative.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetSpec {
    pub eigenvalues: Vec<f64>,
}

impl TargetSpec {
    pub fn new(eigenvalues: Vec<f64>) -> Result<Self> {
        if eigenvalues.iter().any(|v| !(*v < 0.0) || !v.is_finite()) {
            return Err(Error::Parameter(format!("target eigenvalues must be negative: {eigenvalues:?}")));
        }
        let mut sorted = eigenvalues.clone();
        sorted.sort_by(f64::total_cmp);
        if sorted.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::Parameter(format!("target eigenvalues must be distinct: {eigenvalues:?}")));
        }
        Ok(Self { eigenvalues })
    }
}

/// Single-input Ackermann placement: `kᵀ = e_nᵀ C⁻¹ p(Λ)`, `Ã = Λ − bkᵀ`.
pub fn place_poles(sys: &Bilinear, targets: &TargetSpec) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let n = sys.dim();
    if targets.eigenvalues.len() != n {
        return Err(Error::Parameter(format!(
            "{} target eigenvalues for a system of order {n}",
            targets.eigenvalues.len()
        )));
    }
    let lam = sys.lambda_matrix();
    let c = krylov_matrix(&lam, &sys.b);
    let rank = numerical_rank(&c, 1e-10);
    if rank < n {
        return Err(Error::Uncontrollable { rank, n });
    }
    let mut p = DMatrix::identity(n, n);
    for &t in &targets.eigenvalues {
        p *= &lam - DMatrix::identity(n, n) * t;
    }
    let cinv = c
        .try_inverse()
        .ok_or(Error::Uncontrollable { rank: n - 1, n })?;
    let k: DVector<f64> = (cinv.row(n - 1) * p).transpose();
    let a_tilde = &lam - &sys.b * k.transpose();
    Ok((k, a_tilde))
}

/// Rank of `[kᵀ; kᵀÃ; …]` equals `n`.
pub fn is_observable(k: &DVector<f64>, a_tilde: &DMatrix<f64>) -> bool {
    let n = k.len();
    let o = krylov_matrix(&a_tilde.transpose(), k).transpose();
    numerical_rank(&o, 1e-10) == n
}

/// Outcome of the non-resonance enumeration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NonResonance {
    pub passed: bool,
    /// Smallest `|λ_i − Σ p_j λ̃_j|` seen and where.
    pub min_divisor: f64,
    pub component: usize,
    pub exponents: Vec<u32>,
}

/// Checks `|λ_i − Σ p_j λ̃_j| >= tol` for all `2 <= Σp <= max_degree`.
pub fn check_nonresonance(lambda: &[f64], targets: &[f64], max_degree: u32, tol: f64) -> NonResonance {
    let mut worst = NonResonance {
        passed: true,
        min_divisor: f64::INFINITY,
        component: 0,
        exponents: vec![0; targets.len()],
    };
    for p in graded_multi_indices(targets.len(), max_degree) {
        if p.iter().sum::<u32>() < 2 {
            continue;
        }
        let s: f64 = p.iter().zip(targets).map(|(&pj, t)| pj as f64 * t).sum();
        for (i, &l) in lambda.iter().enumerate() {
            let d = (l - s).abs();
            if d < worst.min_divisor {
                worst.min_divisor = d;
                worst.component = i;
                worst.exponents = p.clone();
            }
        }
    }
    worst.passed = worst.min_divisor >= tol;
    worst
}

pub const TOL_RESONANCE: f64 = 1e-6;

/// Degree-by-degree power series in the eigen-coordinates of `Ã`.
///
/// With `w = Tv`, `Ã = T D T⁻¹` and `Ψ(v) = Φ(Tv)`, the degree-`d` part of
/// `Ψ_i` at monomial `v^p` solves `(Σ p_j D_j − λ_i) c = −E_{i,p}`, where `E`
/// is the equation defect of the lower-degree truncation.
pub fn solve_singular_pde(
    sys: &Bilinear,
    k: &DVector<f64>,
    a_tilde: &DMatrix<f64>,
    d_max: u32,
    alpha: Option<&Polynomial>,
) -> Result<Vec<Polynomial>> {
    let n = sys.dim();
    let expected = sys.lambda_matrix() - &sys.b * k.transpose();
    if (&expected - a_tilde).amax() > 1e-10 * expected.amax().max(1.0) {
        return Err(Error::Parameter("target matrix must equal Λ − bkᵀ".into()));
    }
    if let Some(a) = alpha {
        if a.set().nvars() != n || a.coefficient(&vec![0; n]) != 0.0 || (0..n).any(|j| {
            let mut e = vec![0; n];
            e[j] = 1;
            a.coefficient(&e) != 0.0
        }) {
            return Err(Error::Parameter("α must start at degree 2 in n variables".into()));
        }
    }
    let (d, t) = real_diagonalize(a_tilde, 1e-9)?;
    let tinv = t
        .clone()
        .try_inverse()
        .ok_or_else(|| Error::UnsupportedStructure("target matrix is not diagonalizable".into()))?;
    let set = MonomialSet::new(n, d_max.max(1));
    let m1 = &tinv * sys.lambda_matrix() * &t;
    let bb = &tinv * &sys.b;
    let nn = &tinv * &sys.n * &t;
    let var: Vec<Polynomial> = (0..n).map(|j| Polynomial::variable(&set, j)).collect();
    let alpha_v = match alpha {
        Some(a) => {
            let mut lifted = Polynomial::zero(&set);
            lifted.coeffs_mut().iter_mut().zip(a.compose_linear(&t).coeffs()).for_each(|(o, c)| *o = *c);
            lifted
        }
        None => Polynomial::zero(&set),
    };
    let mut psi: Vec<Polynomial> = (0..n)
        .map(|i| Polynomial::linear(&set, &t.row(i).iter().copied().collect::<Vec<_>>()))
        .collect();
    let nvx: Vec<Polynomial> = (0..n)
        .map(|j| (0..n).fold(Polynomial::zero(&set), |acc, l| acc.add(&var[l].scale(nn[(j, l)]))))
        .collect();
    let drift: Vec<Polynomial> = (0..n)
        .map(|j| (0..n).fold(Polynomial::zero(&set), |acc, l| acc.add(&var[l].scale(m1[(j, l)]))))
        .collect();
    for deg in 2..=d_max {
        let mut s = alpha_v.clone();
        for (i, p) in psi.iter().enumerate() {
            s.add_scaled(p, -k[i]);
        }
        let nu: Vec<Polynomial> = (0..n)
            .map(|j| {
                let mut v = drift[j].add(&s.scale(bb[j]));
                v.add_scaled(&nvx[j].mul(&s), 1.0);
                v.truncate(deg)
            })
            .collect();
        let range = set.degree_range(deg);
        let mut updates: Vec<Vec<f64>> = Vec::with_capacity(n);
        for i in 0..n {
            let mut e = Polynomial::zero(&set);
            for (j, nuj) in nu.iter().enumerate() {
                e.add_scaled(&psi[i].derivative(j).mul(nuj), 1.0);
            }
            for (m, pm) in psi.iter().enumerate() {
                e.add_scaled(pm, -a_tilde[(i, m)]);
            }
            let mut coeffs = Vec::with_capacity(range.len());
            for pos in range.clone() {
                let p = &set.exponents()[pos];
                let divisor: f64 = p.iter().zip(d.iter()).map(|(&pj, dj)| pj as f64 * dj).sum::<f64>() - sys.lambda[i];
                if divisor.abs() < TOL_RESONANCE {
                    return Err(Error::Resonance {
                        component: i,
                        exponents: p.clone(),
                        divisor,
                    });
                }
                coeffs.push(-e.coeffs()[pos] / divisor);
            }
            updates.push(coeffs);
        }
        for (i, coeffs) in updates.into_iter().enumerate() {
            psi[i].coeffs_mut()[range.clone()].copy_from_slice(&coeffs);
        }
        debug!("power series degree {deg} solved");
    }
    Ok(psi.iter().map(|p| p.compose_linear(&tinv)).collect())
}

/// Synthesized change of coordinates with its controller data.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LinearizingMap {
    pub k: Vec<f64>,
    /// Row-major `Ã`.
    pub a_tilde: Vec<Vec<f64>>,
    pub lambda: Vec<f64>,
    pub b: Vec<f64>,
    pub n_matrix: Vec<Vec<f64>>,
    pub d_max: u32,
    pub domain: IntervalBox,
    pub residual_norm: f64,
    pub quadrature_order: usize,
    /// How `phi` was obtained.
    pub method: String,
    pub phi: Vec<Polynomial>,
    pub alpha: Option<Polynomial>,
}

impl LinearizingMap {
    pub fn dim(&self) -> usize {
        self.k.len()
    }

    pub fn system(&self) -> Bilinear {
        let n = self.dim();
        Bilinear {
            lambda: DVector::from_column_slice(&self.lambda),
            b: DVector::from_column_slice(&self.b),
            n: DMatrix::from_fn(n, n, |i, j| self.n_matrix[i][j]),
        }
    }

    pub fn k_vector(&self) -> DVector<f64> {
        DVector::from_column_slice(&self.k)
    }

    pub fn a_tilde_matrix(&self) -> DMatrix<f64> {
        let n = self.dim();
        DMatrix::from_fn(n, n, |i, j| self.a_tilde[i][j])
    }

    pub fn eval(&self, w: &[f64]) -> DVector<f64> {
        DVector::from_iterator(self.dim(), self.phi.iter().map(|p| p.eval(w)))
    }

    pub fn alpha_at(&self, w: &[f64]) -> f64 {
        self.alpha.as_ref().map_or(0.0, |a| a.eval(w))
    }

    /// `u = α(w) − kᵀΦ(w)`.
    pub fn feedback(&self, w: &[f64]) -> f64 {
        self.alpha_at(w) - self.k_vector().dot(&self.eval(w))
    }

    /// `∂Φ(w)(Λw + (b + Nw)u) − ÃΦ(w)` with the closed-loop `u`.
    pub fn defect(&self, sys: &Bilinear, k: &DVector<f64>, at: &DMatrix<f64>, w: &[f64]) -> DVector<f64> {
        let (vals, jac) = eval_jacobian(&self.phi, w);
        let phi = DVector::from_vec(vals);
        let wv = DVector::from_column_slice(w);
        let u = self.alpha_at(w) - k.dot(&phi);
        jac * sys.vector_field(&wv, u) - at * phi
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn from_toml(s: &str) -> Result<Self> {
        let m: Self = toml::from_str(s).map_err(|e| Error::Config(e.to_string()))?;
        let n = m.dim();
        if m.phi.len() != n || m.a_tilde.len() != n || m.lambda.len() != n || m.domain.dim() != n {
            return Err(Error::Config(format!("linearizing map with inconsistent dimensions (n = {n})")));
        }
        Ok(m)
    }
}

/// Power series plus residual certificate on `domain`.
#[allow(clippy::too_many_arguments)]
pub fn synthesize(
    sys: &Bilinear,
    targets: &TargetSpec,
    d_max: u32,
    domain: IntervalBox,
    alpha: Option<Polynomial>,
    quadrature_order: usize,
) -> Result<LinearizingMap> {
    let (k, a_tilde) = place_poles(sys, targets)?;
    if !is_observable(&k, &a_tilde) {
        warn!("(kᵀ, Ã) is not observable; Φ may fail to be a change of coordinates");
    }
    let nr = check_nonresonance(sys.lambda.as_slice(), &targets.eigenvalues, d_max, TOL_RESONANCE);
    if !nr.passed {
        return Err(Error::Resonance {
            component: nr.component,
            exponents: nr.exponents,
            divisor: nr.min_divisor,
        });
    }
    let phi = solve_singular_pde(sys, &k, &a_tilde, d_max, alpha.as_ref())?;
    let n = sys.dim();
    let mut map = LinearizingMap {
        k: k.iter().copied().collect(),
        a_tilde: (0..n).map(|i| a_tilde.row(i).iter().copied().collect()).collect(),
        lambda: sys.lambda.iter().copied().collect(),
        b: sys.b.iter().copied().collect(),
        n_matrix: (0..n).map(|i| sys.n.row(i).iter().copied().collect()).collect(),
        d_max,
        domain,
        residual_norm: f64::NAN,
        quadrature_order,
        method: "power-series".into(),
        phi,
        alpha,
    };
    map.residual_norm = pde_residual(&map, quadrature_order)?;
    Ok(map)
}

/// Default quadrature order: exact for the squared residual of degree `2·d_max`.
pub fn default_quadrature_order(d_max: u32) -> usize {
    2 * (d_max as usize + 1)
}

/// `(∫_{I_w} Σ_i r_i(w)² dw)^{1/2}` by tensor Gauss–Legendre with `q` points per axis.
pub fn pde_residual(map: &LinearizingMap, q: usize) -> Result<f64> {
    if q < map.d_max as usize + 1 {
        return Err(Error::Parameter(format!(
            "quadrature order {q} below d_max + 1 = {}",
            map.d_max + 1
        )));
    }
    let sys = map.system();
    let k = map.k_vector();
    let at = map.a_tilde_matrix();
    let quad = map.domain.tensor_quadrature(q);
    let vals: Vec<f64> = quad
        .points
        .par_iter()
        .map(|w| map.defect(&sys, &k, &at, w).norm_squared())
        .collect();
    Ok(vals.iter().zip(&quad.weights).map(|(v, w)| v * w).sum::<f64>().sqrt())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GalerkinReport {
    pub initial_residual: f64,
    pub final_residual: f64,
    pub iterations: usize,
    pub converged: bool,
}

/// Values and gradients of `P_α(w) − P_α(0) − ∇P_α(0)·w` at `w`, skipping the box check.
fn modified_legendre(domain: &IntervalBox, idx: &[u32], w: &[f64]) -> (f64, Vec<f64>) {
    let t = domain.to_reference(w);
    let n = idx.len();
    let scale: Vec<f64> = (0..n).map(|j| 2.0 / (domain.upper[j] - domain.lower[j])).collect();
    let at_w: Vec<(f64, f64)> = idx.iter().zip(&t).map(|(&k, &tj)| legendre_1d(k, tj)).collect();
    let t0 = domain.to_reference(&vec![0.0; n]);
    let at_0: Vec<(f64, f64)> = idx.iter().zip(&t0).map(|(&k, &tj)| legendre_1d(k, tj)).collect();
    let prod = |vals: &[(f64, f64)], deriv: Option<usize>| -> f64 {
        vals.iter()
            .enumerate()
            .map(|(m, &(p, dp))| if Some(m) == deriv { dp * scale[m] } else { p })
            .product()
    };
    let p0 = prod(&at_0, None);
    let g0: Vec<f64> = (0..n).map(|j| prod(&at_0, Some(j))).collect();
    let value = prod(&at_w, None) - p0 - g0.iter().zip(w).map(|(g, x)| g * x).sum::<f64>();
    let grad = (0..n).map(|j| prod(&at_w, Some(j)) - g0[j]).collect();
    (value, grad)
}

/// Gauss–Newton on the residual over coefficients of modified tensor Legendre
/// functions of degree `2..=d_max`; constant and linear parts stay at the identity.
pub fn galerkin_refine(
    init: &LinearizingMap,
    d_max: u32,
    domain: &IntervalBox,
    max_iters: usize,
    tol: f64,
    q: usize,
) -> Result<(LinearizingMap, GalerkinReport)> {
    let n = init.dim();
    let mut start = init.clone();
    start.domain = domain.clone();
    start.quadrature_order = q;
    let initial_residual = pde_residual(&start, q)?;
    start.residual_norm = initial_residual;
    let report0 = GalerkinReport {
        initial_residual,
        final_residual: initial_residual,
        iterations: 0,
        converged: initial_residual < tol,
    };
    if initial_residual < tol {
        return Ok((start, report0));
    }
    let sys = init.system();
    let indices: Vec<Vec<u32>> = graded_multi_indices(n, d_max)
        .into_iter()
        .filter(|p| p.iter().sum::<u32>() >= 2)
        .collect();
    let nb = indices.len();
    let set = MonomialSet::new(n, d_max);
    // monomial coefficients of each modified basis function
    let basis_polys: Vec<Polynomial> = indices
        .iter()
        .map(|idx| {
            let tensor = crate::spatial::LegendreTensorBasis::new(domain.clone(), d_max);
            let mut p = tensor.to_polynomial(idx, &set);
            for pos in set.degree_range(0).start..set.degree_range(1).end {
                p.coeffs_mut()[pos] = 0.0;
            }
            p
        })
        .collect();
    let mono_range = set.degree_range(2).start..set.len();
    let change = DMatrix::from_fn(nb, nb, |r, c| basis_polys[c].coeffs()[mono_range.start + r]);
    let change_lu = change.clone().lu();

    // initial coefficients: nonlinear part of the initializer in this basis
    let mut theta = DVector::zeros(n * nb);
    for i in 0..n {
        let mut target = DVector::zeros(nb);
        for (r, pos) in mono_range.clone().enumerate() {
            let e = &set.exponents()[pos];
            target[r] = init.phi[i].coefficient(e);
        }
        let c = change_lu
            .solve(&target)
            .ok_or_else(|| Error::Numerical("modified Legendre change of basis is singular".into()))?;
        theta.rows_mut(i * nb, nb).copy_from(&c);
    }

    let quad = domain.tensor_quadrature(q);
    let sqrt_w: Vec<f64> = quad.weights.iter().map(|w| w.sqrt()).collect();
    let basis_at: Vec<Vec<(f64, Vec<f64>)>> = quad
        .points
        .par_iter()
        .map(|w| indices.iter().map(|idx| modified_legendre(domain, idx, w)).collect())
        .collect();
    let k = init.k_vector();
    let at = init.a_tilde_matrix();
    let alpha = init.alpha.clone();

    let residual_and_jacobian = |theta: &DVector<f64>, want_jac: bool| -> (DVector<f64>, Option<DMatrix<f64>>) {
        let npts = quad.points.len();
        let rows: Vec<(Vec<f64>, Vec<f64>)> = (0..npts)
            .into_par_iter()
            .map(|qi| {
                let w = &quad.points[qi];
                let wv = DVector::from_column_slice(w);
                let mut phi = wv.clone();
                let mut jac = DMatrix::identity(n, n);
                for i in 0..n {
                    for (a, (bv, bg)) in basis_at[qi].iter().enumerate() {
                        let c = theta[i * nb + a];
                        phi[i] += c * bv;
                        for j in 0..n {
                            jac[(i, j)] += c * bg[j];
                        }
                    }
                }
                let alpha_w = alpha.as_ref().map_or(0.0, |p| p.eval(w));
                let s = alpha_w - k.dot(&phi);
                let gain = &sys.b + &sys.n * &wv;
                let field = sys.lambda.component_mul(&wv) + &gain * s;
                let r = &jac * &field - &at * &phi;
                let sw = sqrt_w[qi];
                let res: Vec<f64> = r.iter().map(|v| v * sw).collect();
                let mut jrow = Vec::new();
                if want_jac {
                    // d r_i / d c_{m,a} = δ_im ∇B_a·F − (∇Φ_i·gain) k_m B_a − Ã_im B_a
                    let jg = &jac * &gain;
                    jrow = vec![0.0; n * n * nb];
                    for i in 0..n {
                        for m in 0..n {
                            for (a, (bv, bg)) in basis_at[qi].iter().enumerate() {
                                let mut v = -(jg[i] * k[m] + at[(i, m)]) * bv;
                                if i == m {
                                    v += bg.iter().zip(field.iter()).map(|(g, f)| g * f).sum::<f64>();
                                }
                                jrow[i * n * nb + m * nb + a] = v * sw;
                            }
                        }
                    }
                }
                (res, jrow)
            })
            .collect();
        let r = DVector::from_iterator(npts * n, rows.iter().flat_map(|(res, _)| res.iter().copied()));
        let jac = want_jac.then(|| {
            let mut j = DMatrix::zeros(npts * n, n * nb);
            for (qi, (_, jrow)) in rows.iter().enumerate() {
                for i in 0..n {
                    for col in 0..n * nb {
                        j[(qi * n + i, col)] = jrow[i * n * nb + col];
                    }
                }
            }
            j
        });
        (r, jac)
    };

    let (r0, _) = residual_and_jacobian(&theta, false);
    let mut best = r0.norm();
    let mut iterations = 0;
    let mut converged = false;
    for it in 0..max_iters {
        iterations = it + 1;
        let (r, jac) = residual_and_jacobian(&theta, true);
        let jac = jac.expect("requested");
        let step = jac
            .svd(true, true)
            .solve(&(-&r), 1e-13 * 1.0)
            .map_err(|e| Error::Numerical(e.to_string()))?;
        let mut scale = 1.0;
        let mut accepted = false;
        while scale > 1e-6 {
            let trial = &theta + &step * scale;
            let (rt, _) = residual_and_jacobian(&trial, false);
            let norm = rt.norm();
            if norm.is_finite() && norm < best {
                let gain = (best - norm) / best;
                theta = trial;
                best = norm;
                accepted = true;
                if gain < 1e-6 {
                    converged = true;
                }
                break;
            }
            scale *= 0.5;
        }
        debug!("galerkin iteration {iterations}: residual {best:e}");
        if !accepted || converged || best < tol {
            converged = converged || best < tol || !accepted;
            break;
        }
    }

    let mut out = start.clone();
    out.phi = (0..n)
        .map(|i| {
            let mut p = Polynomial::variable(&set, i);
            for a in 0..nb {
                p.add_scaled(&basis_polys[a], theta[i * nb + a]);
            }
            p
        })
        .collect();
    out.d_max = d_max;
    out.method = "galerkin".into();
    let final_residual = pde_residual(&out, q)?;
    if !(final_residual < initial_residual) {
        warn!("Galerkin refinement did not improve the residual; keeping the initializer");
        return Ok((
            start,
            GalerkinReport {
                initial_residual,
                final_residual: initial_residual,
                iterations,
                converged: false,
            },
        ));
    }
    out.residual_norm = final_residual;
    Ok((
        out,
        GalerkinReport {
            initial_residual,
            final_residual,
            iterations,
            converged,
        },
    ))
}

/// Which law a [`LiftedFeedback`] applies to `w = φ̂ₙ[x]`.
#[derive(Debug, Clone)]
pub enum FeedbackLaw {
    /// `u = α(w) − kᵀΦ(w)`.
    Linearizing(Arc<LinearizingMap>),
    /// `u = −kᵀw`.
    Linear(DVector<f64>),
}

impl FeedbackLaw {
    pub fn input(&self, w: &[f64]) -> f64 {
        match self {
            Self::Linearizing(map) => map.feedback(w),
            Self::Linear(k) => -k.iter().zip(w).map(|(a, b)| a * b).sum::<f64>(),
        }
    }
}

/// State feedback through the lifted coordinates.
#[derive(Debug, Clone)]
pub struct LiftedFeedback {
    pub dict: Dictionary,
    pub functionals: Vec<Eigenfunctional>,
    pub law: FeedbackLaw,
}

impl LiftedFeedback {
    pub fn lift(&self, x: &StateProfile) -> Result<DVector<f64>> {
        lift(&self.dict, &self.functionals, x)
    }
}

impl Controller for LiftedFeedback {
    fn input(&self, x: &StateProfile) -> f64 {
        match self.lift(x) {
            Ok(w) => self.law.input(w.as_slice()),
            Err(_) => f64::NAN,
        }
    }
}

pub fn make_controller(map: Arc<LinearizingMap>, dict: Dictionary, functionals: Vec<Eigenfunctional>) -> Result<LiftedFeedback> {
    if functionals.len() != map.dim() {
        return Err(Error::Parameter(format!(
            "{} functionals for a map of dimension {}",
            functionals.len(),
            map.dim()
        )));
    }
    Ok(LiftedFeedback {
        dict,
        functionals,
        law: FeedbackLaw::Linearizing(map),
    })
}

pub fn make_linear_controller(k: DVector<f64>, dict: Dictionary, functionals: Vec<Eigenfunctional>) -> LiftedFeedback {
    LiftedFeedback {
        dict,
        functionals,
        law: FeedbackLaw::Linear(k),
    }
}

/// Solution of the lifted model on a uniform output grid.
#[derive(Debug, Clone)]
pub struct LiftedTrajectory {
    pub times: Vec<f64>,
    pub states: Vec<DVector<f64>>,
    pub blowup: Option<f64>,
}

struct ClosedLoop<'a> {
    sys: &'a Bilinear,
    law: &'a (dyn Fn(&[f64]) -> f64 + Sync),
    blowup_norm: f64,
}

impl System<f64, DVector<f64>> for ClosedLoop<'_> {
    fn system(&self, _t: f64, y: &DVector<f64>, dy: &mut DVector<f64>) {
        // frozen past the guard; trajectories are cut at the first output beyond it
        if !(y.amax() <= self.blowup_norm) {
            dy.fill(0.0);
            return;
        }
        let u = (self.law)(y.as_slice());
        dy.copy_from(&self.sys.vector_field(y, u));
    }
}

/// `ẇ = Λw + (b + Nw)u(w)` by Dormand–Prince 5(4) at relative tolerance `rtol`.
///
/// Output is on the grid `dt_out`; `blowup` is the first output time with
/// `‖w‖∞ > blowup_norm`, where the trajectory ends.
pub fn simulate_bilinear(
    sys: &Bilinear,
    law: &(dyn Fn(&[f64]) -> f64 + Sync),
    w0: &DVector<f64>,
    horizon: f64,
    dt_out: f64,
    rtol: f64,
    blowup_norm: f64,
) -> Result<LiftedTrajectory> {
    if !(horizon > 0.0) || !(dt_out > 0.0) {
        return Err(Error::Parameter("horizon and output step must be positive".into()));
    }
    let ode = ClosedLoop { sys, law, blowup_norm };
    let atol = rtol * 1e-2;
    let mut solver = Dopri5::new(ode, 0.0, horizon, dt_out, w0.clone(), rtol, atol);
    if let Err(e) = solver.integrate() {
        warn!("bilinear integration failed: {e}");
        return Err(Error::Integration {
            time: solver.x_out().last().copied().unwrap_or(0.0),
            last_state: solver.y_out().last().map(|v| v.iter().copied().collect()).unwrap_or_default(),
        });
    }
    let mut times = solver.x_out().clone();
    let mut states = solver.y_out().clone();
    let cut = states.iter().position(|w| !(w.amax() <= blowup_norm));
    let blowup = cut.map(|i| times[i]);
    if let Some(i) = cut {
        times.truncate(i + 1);
        states.truncate(i + 1);
    }
    Ok(LiftedTrajectory { times, states, blowup })
}

/// `w̃(t) = e^{Ãt} w̃0` at `times`.
pub fn simulate_linear_target(a_tilde: &DMatrix<f64>, w0: &DVector<f64>, times: &[f64]) -> Vec<DVector<f64>> {
    times.iter().map(|&t| (a_tilde * t).exp() * w0).collect()
}

/// `‖dΦ(w)/dt − ÃΦ(w)‖` along a lifted trajectory, with `dΦ/dt` from
/// five-point central differences of `Φ(w(t))` at interior samples.
pub fn linearization_defect(map: &LinearizingMap, traj: &LiftedTrajectory) -> Vec<(f64, f64)> {
    let at = map.a_tilde_matrix();
    let phis: Vec<DVector<f64>> = traj.states.iter().map(|w| map.eval(w.as_slice())).collect();
    let mut out = Vec::new();
    for i in 2..phis.len().saturating_sub(2) {
        let h = traj.times[i + 1] - traj.times[i];
        let d = (&phis[i - 2] - &phis[i - 1] * 8.0 + &phis[i + 1] * 8.0 - &phis[i + 2]) / (12.0 * h);
        out.push((traj.times[i], (d - &at * &phis[i]).norm()));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn reference_system() -> Bilinear {
        Bilinear::new(
            DVector::from_vec(vec![0.5179569537349507, -9.023136174280983]),
            DVector::from_vec(vec![0.7820893415213207, -0.432243978263584]),
            DMatrix::from_row_slice(
                2,
                2,
                &[-1.426499899052762, -0.11868726365609746, -0.17898740498757898, 0.20472928025907114],
            ),
        )
        .unwrap()
    }

    /// Coefficients from symbolic coefficient matching of the degree-11 ansatz.
    #[test]
    fn series_matches_symbolic_oracle() {
        let sys = reference_system();
        let t = TargetSpec::new(vec![-1.0, -12.0]).unwrap();
        let map = synthesize(&sys, &t, 11, IntervalBox::symmetric(&[0.65, 0.1]).unwrap(), None, 24).unwrap();
        let oracle: [(usize, [u32; 2], f64); 10] = [
            (0, [2, 0], 1.0940880787132958),
            (0, [1, 1], 0.14415383335651463),
            (0, [0, 2], -0.001460945866539603),
            (0, [5, 0], 3.9993231833684995),
            (0, [11, 0], 127.65157253981158),
            (0, [4, 3], -0.10168180938307711),
            (1, [1, 1], -0.41803857610017614),
            (1, [0, 2], -0.05044883629569015),
            (1, [11, 0], 26.563596248751214),
            (1, [0, 11], 0.001530845578491502),
        ];
        for (i, e, c) in oracle {
            assert_abs_diff_eq!(map.phi[i].coefficient(&e), c, epsilon = 1e-8 * c.abs().max(1e-3));
        }
    }

    #[test]
    fn placement_examples() {
        let sys = Bilinear::new(DVector::from_vec(vec![1.0]), DVector::from_vec(vec![1.0]), DMatrix::zeros(1, 1)).unwrap();
        let (k, at) = place_poles(&sys, &TargetSpec::new(vec![-1.0]).unwrap()).unwrap();
        assert_abs_diff_eq!(k[0], 2.0, epsilon = 1e-14);
        assert_abs_diff_eq!(at[(0, 0)], -1.0, epsilon = 1e-14);

        let sys = Bilinear::new(DVector::from_vec(vec![-1.0, -12.0]), DVector::from_vec(vec![1.0, 0.3]), DMatrix::zeros(2, 2)).unwrap();
        let (k, _) = place_poles(&sys, &TargetSpec::new(vec![-1.0, -12.0]).unwrap()).unwrap();
        assert!(k.amax() < 1e-12);

        let (_, at) = place_poles(&reference_system(), &TargetSpec::new(vec![-1.0, -12.0]).unwrap()).unwrap();
        let mut ev: Vec<f64> = at.complex_eigenvalues().iter().map(|c| c.re).collect();
        ev.sort_by(f64::total_cmp);
        assert_abs_diff_eq!(ev[0], -12.0, epsilon = 1e-8);
        assert_abs_diff_eq!(ev[1], -1.0, epsilon = 1e-8);
    }

    #[test]
    fn uncontrollable_pair() {
        let sys = Bilinear::new(DVector::from_vec(vec![0.5, -2.0]), DVector::from_vec(vec![1.0, 0.0]), DMatrix::zeros(2, 2)).unwrap();
        assert!(matches!(
            place_poles(&sys, &TargetSpec::new(vec![-1.0, -3.0]).unwrap()),
            Err(Error::Uncontrollable { rank: 1, n: 2 })
        ));
    }

    #[test]
    fn nonresonance_examples() {
        assert!(check_nonresonance(&[0.5, -9.37], &[-1.0, -12.0], 11, TOL_RESONANCE).passed);
        let r = check_nonresonance(&[-2.0], &[-1.0], 2, TOL_RESONANCE);
        assert!(!r.passed);
        assert_eq!(r.exponents, vec![2]);
        assert!(check_nonresonance(&[5.0], &[-1.0], 2, TOL_RESONANCE).passed);
    }

    #[test]
    fn identity_when_uncoupled() {
        let sys = Bilinear::new(DVector::from_vec(vec![0.5, -9.0]), DVector::from_vec(vec![1.0, 0.4]), DMatrix::zeros(2, 2)).unwrap();
        let t = TargetSpec::new(vec![-1.0, -12.0]).unwrap();
        let map = synthesize(&sys, &t, 6, IntervalBox::symmetric(&[0.5, 0.1]).unwrap(), None, 14).unwrap();
        for (i, p) in map.phi.iter().enumerate() {
            for (e, c) in p.terms() {
                let expect = if e.iter().sum::<u32>() == 1 && e[i] == 1 { 1.0 } else { 0.0 };
                assert_abs_diff_eq!(c, expect, epsilon = 1e-12);
            }
        }
        assert!(map.residual_norm < 1e-12);
    }

    /// Hand recursion for n = 1: Φ = Σ c_d w^d, F = λw + (b + Nw)s, s = −kΦ.
    fn scalar_recursion(lambda: f64, b: f64, nn: f64, k: f64, d_max: usize) -> Vec<f64> {
        let lt = lambda - b * k;
        let mut c = vec![0.0; d_max + 1];
        c[1] = 1.0;
        for d in 2..=d_max {
            // degree-d coefficient of Φ'(w)·(λw − bkΦ − Nk wΦ) − λ̃Φ with c_d = 0
            let mut e = 0.0;
            for j in 1..d {
                // Φ' term j c_j w^{j-1} times degree (d-j+1) part of the field
                let m = d - j + 1;
                let field = if m == 1 { lt } else { -b * k * c[m] } + if m >= 2 { -nn * k * c[m - 1] } else { 0.0 };
                e += j as f64 * c[j] * field;
            }
            c[d] = -e / (d as f64 * lt - lambda);
        }
        c
    }

    #[test]
    fn scalar_series_matches_recursion() {
        let (lambda, b, nn) = (0.7, 0.9, -0.6);
        let sys = Bilinear::new(DVector::from_vec(vec![lambda]), DVector::from_vec(vec![b]), DMatrix::from_element(1, 1, nn)).unwrap();
        let t = TargetSpec::new(vec![-2.0]).unwrap();
        let map = synthesize(&sys, &t, 9, IntervalBox::symmetric(&[0.3]).unwrap(), None, 20).unwrap();
        let c = scalar_recursion(lambda, b, nn, map.k[0], 9);
        for d in 1..=9u32 {
            assert_abs_diff_eq!(map.phi[0].coefficient(&[d]), c[d as usize], epsilon = 1e-10 * c[d as usize].abs().max(1.0));
        }
    }

    #[test]
    fn series_truncation_leaves_only_high_degrees() {
        let sys = reference_system();
        let t = TargetSpec::new(vec![-1.0, -12.0]).unwrap();
        let (k, at) = place_poles(&sys, &t).unwrap();
        let d = 5;
        let phi = solve_singular_pde(&sys, &k, &at, d, None).unwrap();
        // expand the equation with a set big enough to hold every product
        let big = MonomialSet::new(2, 2 * d + 1);
        let lift_poly = |p: &Polynomial| Polynomial::from_terms(&big, &p.terms().map(|(e, c)| (e.clone(), c)).collect::<Vec<_>>());
        let phib: Vec<Polynomial> = phi.iter().map(lift_poly).collect();
        let w: Vec<Polynomial> = (0..2).map(|j| Polynomial::variable(&big, j)).collect();
        let mut s = Polynomial::zero(&big);
        for i in 0..2 {
            s.add_scaled(&phib[i], -k[i]);
        }
        let scale = phib.iter().map(|p| p.max_abs_coefficient()).fold(1.0, f64::max);
        for i in 0..2 {
            let mut e = Polynomial::zero(&big);
            for j in 0..2 {
                let mut f = w[j].scale(sys.lambda[j]).add(&s.scale(sys.b[j]));
                for l in 0..2 {
                    f.add_scaled(&w[l].mul(&s), sys.n[(j, l)]);
                }
                e.add_scaled(&phib[i].derivative(j).mul(&f), 1.0);
            }
            for m in 0..2 {
                e.add_scaled(&phib[m], -at[(i, m)]);
            }
            for (ex, c) in e.terms() {
                if ex.iter().sum::<u32>() <= d {
                    assert!(c.abs() < 1e-12 * scale, "degree {:?} coefficient {c}", ex);
                }
            }
        }
    }

    #[test]
    fn residual_decreases_with_degree() {
        let sys = reference_system();
        let t = TargetSpec::new(vec![-1.0, -12.0]).unwrap();
        let dom = IntervalBox::symmetric(&[0.1, 0.05]).unwrap();
        let low = synthesize(&sys, &t, 2, dom.clone(), None, 24).unwrap();
        let high = synthesize(&sys, &t, 11, dom, None, 24).unwrap();
        assert!(high.residual_norm < low.residual_norm);
    }

    #[test]
    fn galerkin_improves_low_degree() {
        let sys = reference_system();
        let t = TargetSpec::new(vec![-1.0, -12.0]).unwrap();
        let dom = IntervalBox::symmetric(&[0.65, 0.1]).unwrap();
        let init = synthesize(&sys, &t, 2, dom.clone(), None, 8).unwrap();
        let (refined, rep) = galerkin_refine(&init, 2, &dom, 10, 1e-14, 8).unwrap();
        assert!(rep.final_residual < rep.initial_residual);
        assert_abs_diff_eq!(refined.residual_norm, rep.final_residual);
        // linear part untouched
        assert_eq!(refined.phi[0].coefficient(&[1, 0]), 1.0);
        assert_eq!(refined.phi[0].coefficient(&[0, 1]), 0.0);
        assert_eq!(refined.phi[1].coefficient(&[0, 0]), 0.0);
    }

    /// Same refinement done with a finite-difference Jacobian over scaled
    /// monomials converges to 7.0423590547e-3.
    #[test]
    fn galerkin_matches_independent_refinement() {
        let sys = reference_system();
        let t = TargetSpec::new(vec![-1.0, -12.0]).unwrap();
        let dom = IntervalBox::symmetric(&[0.65, 0.1]).unwrap();
        let init = synthesize(&sys, &t, 11, dom.clone(), None, 24).unwrap();
        assert_abs_diff_eq!(init.residual_norm, 13.8512, epsilon = 1e-3);
        let (_, rep) = galerkin_refine(&init, 11, &dom, 60, 1e-14, 24).unwrap();
        assert_abs_diff_eq!(rep.final_residual, 7.0423590547e-3, epsilon = 1e-8);
    }

    #[test]
    fn galerkin_noop_cases() {
        let sys = Bilinear::new(DVector::from_vec(vec![0.5, -9.0]), DVector::from_vec(vec![1.0, 0.4]), DMatrix::zeros(2, 2)).unwrap();
        let t = TargetSpec::new(vec![-1.0, -12.0]).unwrap();
        let dom = IntervalBox::symmetric(&[0.5, 0.1]).unwrap();
        let map = synthesize(&sys, &t, 4, dom.clone(), None, 10).unwrap();
        let (same, rep) = galerkin_refine(&map, 4, &dom, 5, 1e-10, 10).unwrap();
        assert_eq!(rep.iterations, 0);
        assert_eq!(same.phi[0].coeffs(), map.phi[0].coeffs());
    }

    #[test]
    fn bilinear_open_loop() {
        let sys = reference_system();
        let zero = |_: &[f64]| 0.0;
        let tr = simulate_bilinear(&sys, &zero, &DVector::from_vec(vec![0.0, 1.0]), 0.5, 0.01, 1e-8, 1e3).unwrap();
        let last = tr.states.last().unwrap();
        let t = *tr.times.last().unwrap();
        assert_abs_diff_eq!(t, 0.5, epsilon = 1e-12);
        assert_abs_diff_eq!(last[1], (sys.lambda[1] * t).exp(), epsilon = 1e-8);
        assert_eq!(last[0], 0.0);
        let grow = simulate_bilinear(&sys, &zero, &DVector::from_vec(vec![1.0, 0.0]), 1.0, 0.1, 1e-8, 1e3).unwrap();
        assert_abs_diff_eq!(grow.states.last().unwrap()[0], sys.lambda[0].exp(), epsilon = 1e-7);
    }

    #[test]
    fn bilinear_blowup_guard() {
        let sys = Bilinear::new(DVector::from_vec(vec![1.0]), DVector::from_vec(vec![0.0]), DMatrix::from_element(1, 1, 1.0)).unwrap();
        // ẇ = w + w·w
        let law = |w: &[f64]| w[0];
        let tr = simulate_bilinear(&sys, &law, &DVector::from_vec(vec![1.0]), 5.0, 0.01, 1e-8, 1e3).unwrap();
        let tb = tr.blowup.unwrap();
        assert!(tb > 0.692 && tb <= 0.70 + 1e-9, "blow-up at {tb}");
    }

    #[test]
    fn linear_target() {
        let a = DMatrix::from_element(1, 1, -1.0);
        let out = simulate_linear_target(&a, &DVector::from_vec(vec![1.0]), &[0.0, 1.0]);
        assert_abs_diff_eq!(out[1][0], (-1.0f64).exp(), epsilon = 1e-14);
        let z = simulate_linear_target(&a, &DVector::zeros(1), &[2.0]);
        assert_eq!(z[0][0], 0.0);
    }
}
