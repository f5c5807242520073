//! Dense linear-algebra helpers on top of nalgebra.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;

use crate::error::{Error, Result};

/// Moore–Penrose pseudoinverse with singular values below `rank_tol · σ_max` dropped.
pub fn pinv(a: &DMatrix<f64>, rank_tol: f64) -> Result<(DMatrix<f64>, usize)> {
    let svd = a.clone().svd(true, true);
    let smax = svd.singular_values.max();
    if smax == 0.0 || !smax.is_finite() {
        return Err(Error::DegenerateData(format!(
            "pseudoinverse of a matrix with largest singular value {smax}"
        )));
    }
    let u = svd.u.as_ref().expect("computed U");
    let vt = svd.v_t.as_ref().expect("computed Vᵀ");
    let cut = rank_tol * smax;
    let mut out = DMatrix::zeros(a.ncols(), a.nrows());
    let mut rank = 0;
    for (i, &s) in svd.singular_values.iter().enumerate() {
        if s > cut {
            rank += 1;
            out += (vt.row(i).transpose() / s) * u.column(i).transpose();
        }
    }
    Ok((out, rank))
}

/// Number of singular values above `tol · σ_max`.
pub fn numerical_rank(a: &DMatrix<f64>, tol: f64) -> usize {
    let s = a.singular_values();
    let smax = s.max();
    if smax == 0.0 {
        return 0;
    }
    s.iter().filter(|&&v| v > tol * smax).count()
}

/// Left eigenpair `wᵀK = μwᵀ`.
#[derive(Debug, Clone)]
pub struct LeftEigenpair {
    pub value: Complex64,
    /// Unit 2-norm; the largest-magnitude entry is real and positive.
    pub vector: DVector<Complex64>,
    /// `‖wᵀK − μwᵀ‖₂ / ‖K‖₂`.
    pub relative_residual: f64,
}

fn to_complex(a: &DMatrix<f64>) -> DMatrix<Complex64> {
    a.map(|v| Complex64::new(v, 0.0))
}

/// Rotates and scales so that `‖v‖₂ = 1` and the largest entry is positive real.
pub fn normalize_phase(v: &mut DVector<Complex64>) {
    let norm = v.iter().map(|c| c.norm_sqr()).sum::<f64>().sqrt();
    if norm == 0.0 {
        return;
    }
    let (imax, _) = v
        .iter()
        .enumerate()
        .fold((0, -1.0), |(bi, bm), (i, c)| if c.norm() > bm { (i, c.norm()) } else { (bi, bm) });
    let pivot = v[imax];
    let rot = pivot.conj() / (pivot.norm() * norm);
    for c in v.iter_mut() {
        *c *= rot;
    }
    v[imax] = Complex64::new(v[imax].norm(), 0.0);
}

fn left_residual(kt: &DMatrix<Complex64>, mu: Complex64, w: &DVector<Complex64>) -> f64 {
    (kt * w - w * mu).norm()
}

/// Eigenvalues from the real Schur form, left eigenvectors by complex inverse
/// iteration on `Kᵀ − μI`. Conjugate pairs get conjugate vectors.
pub fn left_eigenpairs(k: &DMatrix<f64>) -> Result<Vec<LeftEigenpair>> {
    if !k.is_square() {
        return Err(Error::Parameter("eigenproblem needs a square matrix".into()));
    }
    let n = k.nrows();
    if n == 0 {
        return Ok(Vec::new());
    }
    let values = k
        .clone()
        .try_schur(f64::EPSILON, 10_000)
        .ok_or_else(|| Error::Numerical("Schur iteration did not converge".into()))?
        .complex_eigenvalues();
    let knorm = k.norm().max(f64::MIN_POSITIVE);
    let kt = to_complex(&k.transpose());
    let mut out: Vec<LeftEigenpair> = Vec::with_capacity(n);
    for &mu in values.iter() {
        if mu.im < 0.0 {
            // filled from the partner with positive imaginary part
            continue;
        }
        let w = inverse_iteration(&kt, mu, knorm)?;
        let res = left_residual(&kt, mu, &w) / knorm;
        let mut w = w;
        normalize_phase(&mut w);
        let pair = LeftEigenpair {
            value: mu,
            vector: w,
            relative_residual: res,
        };
        if mu.im > 0.0 {
            let conj = LeftEigenpair {
                value: mu.conj(),
                vector: pair.vector.map(|c| c.conj()),
                relative_residual: res,
            };
            out.push(pair);
            out.push(conj);
        } else {
            out.push(LeftEigenpair {
                value: Complex64::new(mu.re, 0.0),
                ..pair
            });
        }
    }
    if out.len() != n {
        return Err(Error::Numerical(format!(
            "eigenvalue pairing produced {} of {n} eigenpairs",
            out.len()
        )));
    }
    Ok(out)
}

fn inverse_iteration(kt: &DMatrix<Complex64>, mu: Complex64, knorm: f64) -> Result<DVector<Complex64>> {
    let n = kt.nrows();
    let mut best: Option<(DVector<Complex64>, f64)> = None;
    for &shift_scale in &[1e-13, 1e-11, 1e-9] {
        let shift = mu + Complex64::new(shift_scale * knorm, shift_scale * knorm * 0.5);
        let a = kt - DMatrix::<Complex64>::identity(n, n) * shift;
        let lu = a.lu();
        let mut v = DVector::from_fn(n, |i, _| Complex64::new(1.0 + 0.1 * i as f64, 0.05 * (i % 3) as f64));
        for _ in 0..4 {
            let Some(next) = lu.solve(&v) else { break };
            let nrm = next.norm();
            if !nrm.is_finite() || nrm == 0.0 {
                break;
            }
            v = next / Complex64::new(nrm, 0.0);
        }
        let res = left_residual(kt, mu, &v) / knorm;
        if best.as_ref().is_none_or(|(_, r)| res < *r) {
            best = Some((v, res));
        }
        if res <= 1e-12 {
            break;
        }
    }
    let (v, _) = best.ok_or_else(|| Error::Numerical(format!("inverse iteration failed at {mu}")))?;
    Ok(v)
}

/// `[v, Av, …, A^{n−1}v]`.
pub fn krylov_matrix(a: &DMatrix<f64>, v: &DVector<f64>) -> DMatrix<f64> {
    let n = a.nrows();
    let mut c = DMatrix::zeros(n, n);
    let mut col = v.clone();
    for j in 0..n {
        c.set_column(j, &col);
        col = a * &col;
    }
    c
}

/// Eigen-decomposition `A = T D T⁻¹` for a real matrix with real distinct eigenvalues.
pub fn real_diagonalize(a: &DMatrix<f64>, tol: f64) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let n = a.nrows();
    let values = a
        .clone()
        .try_schur(f64::EPSILON, 10_000)
        .ok_or_else(|| Error::Numerical("Schur iteration did not converge".into()))?
        .complex_eigenvalues();
    let scale = a.norm().max(1.0);
    if values.iter().any(|v| v.im.abs() > tol * scale) {
        return Err(Error::UnsupportedStructure(format!(
            "target matrix has non-real eigenvalues {values:?}"
        )));
    }
    let mut re: Vec<f64> = values.iter().map(|v| v.re).collect();
    re.sort_by(|x, y| y.total_cmp(x));
    for w in re.windows(2) {
        if (w[0] - w[1]).abs() <= tol * scale {
            return Err(Error::UnsupportedStructure(format!(
                "repeated eigenvalue {} is not supported",
                w[0]
            )));
        }
    }
    let mut t = DMatrix::zeros(n, n);
    for (j, &lam) in re.iter().enumerate() {
        let m = a - DMatrix::identity(n, n) * lam;
        let svd = m.svd(false, true);
        let vt = svd.v_t.expect("computed Vᵀ");
        let (imin, _) = svd
            .singular_values
            .iter()
            .enumerate()
            .fold((0, f64::INFINITY), |(bi, bv), (i, &s)| if s < bv { (i, s) } else { (bi, bv) });
        let mut v = vt.row(imin).transpose();
        let (amax, _) = v.iter().enumerate().fold((0, 0.0), |(bi, bv), (i, &x)| {
            if x.abs() > bv { (i, x.abs()) } else { (bi, bv) }
        });
        if v[amax] < 0.0 {
            v = -v;
        }
        t.set_column(j, &v);
    }
    Ok((DVector::from_vec(re), t))
}
