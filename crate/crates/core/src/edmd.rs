//! Extended DMD: Koopman-matrix regression, left eigen-decomposition,
//! eigenpair validation and principal selection.

use log::warn;
use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dictionary::Dictionary;
use crate::error::{Error, Result};
use crate::linalg::{left_eigenpairs, numerical_rank, pinv};
use crate::plant::{DerivativeSample, Trajectory};
use crate::spatial::StateProfile;

/// Snapshot pairs `(xⁱ, xⁱ⁺)` taken `t_s` apart.
#[derive(Debug, Clone)]
pub struct SnapshotDataset {
    pairs: Vec<(StateProfile, StateProfile)>,
    t_s: f64,
    pub derivative: Option<DerivativeSample>,
}

impl SnapshotDataset {
    pub fn new(pairs: Vec<(StateProfile, StateProfile)>, t_s: f64) -> Result<Self> {
        if pairs.is_empty() {
            return Err(Error::Parameter("dataset needs at least one pair".into()));
        }
        if !(t_s >= 0.0) || !t_s.is_finite() {
            return Err(Error::Parameter(format!("sampling time must be >= 0, got {t_s}")));
        }
        let grid = pairs[0].0.grid().clone();
        for (i, (a, b)) in pairs.iter().enumerate() {
            if a.grid().len() != grid.len() || b.grid().len() != grid.len() {
                return Err(Error::Dataset {
                    sample: i,
                    reason: "snapshots live on different grids".into(),
                });
            }
        }
        Ok(Self {
            pairs,
            t_s,
            derivative: None,
        })
    }

    pub fn with_derivative(mut self, sample: DerivativeSample) -> Self {
        self.derivative = Some(sample);
        self
    }

    pub fn pairs(&self) -> &[(StateProfile, StateProfile)] {
        &self.pairs
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn sampling_time(&self) -> f64 {
        self.t_s
    }

    pub fn initial_states(&self) -> impl Iterator<Item = &StateProfile> {
        self.pairs.iter().map(|p| &p.0)
    }
}

fn feature_columns<'a>(
    dict: &Dictionary,
    states: impl IndexedParallelIterator<Item = &'a StateProfile>,
) -> Result<DMatrix<f64>> {
    let cols: Vec<DVector<f64>> = states
        .enumerate()
        .map(|(i, x)| {
            let v = dict.feature_map(x)?;
            if v.iter().any(|c| !c.is_finite()) {
                return Err(Error::Dataset {
                    sample: i,
                    reason: "non-finite feature".into(),
                });
            }
            Ok(v)
        })
        .collect::<Result<_>>()?;
    Ok(DMatrix::from_columns(&cols))
}

/// `(Ψ(x), Ψ(x⁺))`, each `L × M`.
pub fn build_data_matrices(dict: &Dictionary, data: &SnapshotDataset) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let psi = feature_columns(dict, data.pairs.par_iter().map(|p| &p.0))?;
    let psi_plus = feature_columns(dict, data.pairs.par_iter().map(|p| &p.1))?;
    if data.len() < dict.len() {
        warn!("{} snapshots for {} observables", data.len(), dict.len());
    }
    let rank = numerical_rank(&psi, 1e-10);
    if rank < dict.len() {
        warn!("feature matrix has numerical rank {rank} < {}", dict.len());
    }
    Ok((psi, psi_plus))
}

#[derive(Debug, Clone)]
pub struct KoopmanFit {
    pub matrix: DMatrix<f64>,
    pub rank: usize,
    /// `‖K̂Ψ − Ψ⁺‖_F`.
    pub residual: f64,
}

/// `K̂ = Ψ⁺Ψᵀ(ΨΨᵀ)†`.
pub fn koopman_matrix(psi: &DMatrix<f64>, psi_plus: &DMatrix<f64>, rank_tol: f64) -> Result<KoopmanFit> {
    if psi.shape() != psi_plus.shape() {
        return Err(Error::Parameter(format!(
            "data matrices differ in shape: {:?} vs {:?}",
            psi.shape(),
            psi_plus.shape()
        )));
    }
    if psi.iter().all(|v| *v == 0.0) {
        return Err(Error::DegenerateData("feature matrix is identically zero".into()));
    }
    let gram = psi * psi.transpose();
    let (gp, rank) = pinv(&gram, rank_tol)?;
    let matrix = psi_plus * psi.transpose() * gp;
    let residual = (&matrix * psi - psi_plus).norm();
    Ok(KoopmanFit {
        matrix,
        rank,
        residual,
    })
}

/// One left eigenpair of `K̂` with its continuous-time eigenvalue.
#[derive(Debug, Clone)]
pub struct Eigenpair {
    pub mu: Complex64,
    pub lambda: Complex64,
    pub weights: DVector<Complex64>,
    pub relative_residual: f64,
    /// False when `μ` is real and negative (no real logarithm).
    pub physical: bool,
}

impl Eigenpair {
    pub fn is_real(&self) -> bool {
        self.mu.im == 0.0
    }

    /// `φ̂[x] = wᵀψ[x]`.
    pub fn evaluate(&self, dict: &Dictionary, x: &StateProfile) -> Result<Complex64> {
        let psi = dict.feature_map(x)?;
        Ok(self.weights.iter().zip(psi.iter()).map(|(w, p)| w * p).sum())
    }
}

/// Left eigenpairs sorted by `Re λ̂` descending, conjugates adjacent with
/// positive imaginary part first.
pub fn spectrum(k: &DMatrix<f64>, t_s: f64) -> Result<Vec<Eigenpair>> {
    if !(t_s > 0.0) {
        return Err(Error::Parameter(format!("sampling time must be positive, got {t_s}")));
    }
    let mut out: Vec<Eigenpair> = left_eigenpairs(k)?
        .into_iter()
        .map(|p| {
            let physical = !(p.value.im == 0.0 && p.value.re < 0.0);
            let lambda = if p.value.im == 0.0 && p.value.re > 0.0 {
                Complex64::new(p.value.re.ln() / t_s, 0.0)
            } else {
                p.value.ln() / t_s
            };
            if p.relative_residual > 1e-8 {
                warn!("left eigenpair at mu = {} has relative residual {:e}", p.value, p.relative_residual);
            }
            Eigenpair {
                mu: p.value,
                lambda,
                weights: p.vector,
                relative_residual: p.relative_residual,
                physical,
            }
        })
        .collect();
    out.sort_by(|a, b| {
        b.lambda
            .re
            .total_cmp(&a.lambda.re)
            .then(b.lambda.im.total_cmp(&a.lambda.im))
    });
    Ok(out)
}

/// A real eigenfunctional `φ̂[x] = wᵀψ[x]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Eigenfunctional {
    pub lambda: f64,
    pub weights: Vec<f64>,
}

impl Eigenfunctional {
    pub fn weights_vector(&self) -> DVector<f64> {
        DVector::from_column_slice(&self.weights)
    }

    pub fn evaluate(&self, dict: &Dictionary, x: &StateProfile) -> Result<f64> {
        dict.evaluate(&self.weights_vector(), x)
    }

    /// Hard error unless the pair is real.
    pub fn from_pair(pair: &Eigenpair) -> Result<Self> {
        let tol = 1e-8 * pair.mu.norm().max(1.0);
        let imag = pair.weights.iter().fold(0.0f64, |m, c| m.max(c.im.abs()));
        if pair.mu.im.abs() > tol || !pair.physical || imag > 1e-6 {
            return Err(Error::Numerical(format!(
                "selected principal eigenvalue {} is not real and physical",
                pair.lambda
            )));
        }
        Ok(Self {
            lambda: pair.lambda.re,
            weights: pair.weights.iter().map(|c| c.re).collect(),
        })
    }
}

/// Prediction defects of one eigenpair along a trajectory.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ValidationError {
    /// `‖e^{λ̂t}φ̂[x(0)] − φ̂[x(t)]‖₂` over the horizon.
    pub absolute: f64,
    /// Absolute error over `‖φ̂[x(t)]‖₂`.
    pub relative: f64,
}

/// Discrete L²-in-time prediction defect by the trapezoidal rule over samples with `t <= horizon`.
pub fn validate_eigenpair(
    dict: &Dictionary,
    weights: &DVector<Complex64>,
    lambda: Complex64,
    traj: &Trajectory,
    horizon: f64,
) -> Result<ValidationError> {
    let psi: Vec<Complex64> = traj
        .times
        .iter()
        .zip(&traj.profiles)
        .take_while(|(t, _)| **t <= horizon * (1.0 + 1e-12))
        .map(|(_, x)| {
            let f = dict.feature_map(x)?;
            Ok(weights.iter().zip(f.iter()).map(|(w, p)| w * p).sum())
        })
        .collect::<Result<_>>()?;
    if psi.len() < 2 {
        return Err(Error::Parameter("validation needs at least two samples within the horizon".into()));
    }
    let times = &traj.times[..psi.len()];
    let defect: Vec<f64> = times
        .iter()
        .zip(&psi)
        .map(|(&t, &p)| ((lambda * t).exp() * psi[0] - p).norm_sqr())
        .collect();
    let mag: Vec<f64> = psi.iter().map(|p| p.norm_sqr()).collect();
    let trap = |v: &[f64]| -> f64 {
        times
            .windows(2)
            .zip(v.windows(2))
            .map(|(t, y)| 0.5 * (t[1] - t[0]) * (y[0] + y[1]))
            .sum()
    };
    let absolute = trap(&defect).sqrt();
    let scale = trap(&mag).sqrt();
    Ok(ValidationError {
        absolute,
        relative: if scale > 0.0 { absolute / scale } else { f64::INFINITY },
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SelectionOptions {
    /// Candidates need a relative validation error at most this large.
    pub score_threshold: f64,
    /// Allowed distance per unit of combination order in the integer sieve.
    pub integer_tol: f64,
    /// Largest combination order tested by the sieve; `0` disables it.
    pub max_order: u32,
    /// Explicit spectrum indices, returned verbatim.
    pub manual: Option<Vec<usize>>,
}

impl Default for SelectionOptions {
    fn default() -> Self {
        Self {
            score_threshold: 0.1,
            integer_tol: 0.15,
            max_order: 11,
            manual: None,
        }
    }
}

/// Whether `lambda` lies near `Σ μ_j sel_j` for some nonnegative integers with `2 <= Σμ <= max_order`.
pub fn is_integer_combination(lambda: f64, selected: &[f64], integer_tol: f64, max_order: u32) -> bool {
    fn rec(target: f64, sel: &[f64], acc: f64, order: u32, max: u32, tol: f64) -> bool {
        if sel.is_empty() {
            return order >= 2 && (target - acc).abs() <= tol * order as f64;
        }
        (0..=max - order).any(|m| rec(target, &sel[1..], acc + m as f64 * sel[0], order + m, max, tol))
    }
    if max_order < 2 || selected.is_empty() {
        return false;
    }
    rec(lambda, selected, 0.0, 0, max_order, integer_tol)
}

/// Principal indices into `spectrum`, in spectrum order.
///
/// Real physical pairs scoring at or below the threshold are visited by
/// increasing `|λ̂|`; a pair is taken unless it is an integer combination of
/// pairs already taken. `scores` holds relative validation errors.
pub fn select_principal(
    spectrum: &[Eigenpair],
    n: usize,
    scores: &[f64],
    opts: &SelectionOptions,
) -> Result<Vec<usize>> {
    if n > spectrum.len() {
        return Err(Error::Parameter(format!(
            "cannot select {n} of {} eigenpairs",
            spectrum.len()
        )));
    }
    if let Some(manual) = &opts.manual {
        if let Some(bad) = manual.iter().find(|&&i| i >= spectrum.len()) {
            return Err(Error::Parameter(format!("manual principal index {bad} out of range")));
        }
        return Ok(manual.clone());
    }
    if scores.len() != spectrum.len() {
        return Err(Error::Parameter("one validation score per eigenpair is required".into()));
    }
    let mut candidates: Vec<usize> = (0..spectrum.len())
        .filter(|&i| spectrum[i].is_real() && spectrum[i].physical && scores[i] <= opts.score_threshold)
        .collect();
    candidates.sort_by(|&a, &b| spectrum[a].lambda.re.abs().total_cmp(&spectrum[b].lambda.re.abs()));
    let mut chosen: Vec<usize> = Vec::with_capacity(n);
    for &i in &candidates {
        if chosen.len() == n {
            break;
        }
        let sel: Vec<f64> = chosen.iter().map(|&j| spectrum[j].lambda.re).collect();
        if !is_integer_combination(spectrum[i].lambda.re, &sel, opts.integer_tol, opts.max_order) {
            chosen.push(i);
        }
    }
    if chosen.len() < n {
        return Err(Error::Selection {
            needed: n,
            candidates,
        });
    }
    chosen.sort_unstable();
    Ok(chosen)
}

/// Regression result with validated, selected eigenpairs.
#[derive(Debug, Clone)]
pub struct KoopmanModel {
    pub fit: KoopmanFit,
    pub t_s: f64,
    pub spectrum: Vec<Eigenpair>,
    /// Relative validation errors used for selection.
    pub scores: Vec<f64>,
    pub principal: Vec<usize>,
}

impl KoopmanModel {
    /// Principal eigenfunctionals, sorted by eigenvalue descending.
    pub fn principal_functionals(&self) -> Result<Vec<Eigenfunctional>> {
        self.principal
            .iter()
            .map(|&i| Eigenfunctional::from_pair(&self.spectrum[i]))
            .collect()
    }
}

/// Fits `K̂` and its spectrum without validation or selection.
pub fn fit_spectrum(dict: &Dictionary, data: &SnapshotDataset, rank_tol: f64) -> Result<(KoopmanFit, Vec<Eigenpair>)> {
    let (psi, psi_plus) = build_data_matrices(dict, data)?;
    let fit = koopman_matrix(&psi, &psi_plus, rank_tol)?;
    let spec = spectrum(&fit.matrix, data.sampling_time())?;
    Ok((fit, spec))
}

/// Scores every eigenpair on `traj` and selects `n` principal pairs.
pub fn identify(
    dict: &Dictionary,
    data: &SnapshotDataset,
    rank_tol: f64,
    selection_traj: &Trajectory,
    horizon: f64,
    n: usize,
    opts: &SelectionOptions,
) -> Result<KoopmanModel> {
    let (fit, spec) = fit_spectrum(dict, data, rank_tol)?;
    let scores: Vec<f64> = spec
        .par_iter()
        .map(|p| validate_eigenpair(dict, &p.weights, p.lambda, selection_traj, horizon).map(|v| v.relative))
        .collect::<Result<_>>()?;
    let principal = select_principal(&spec, n, &scores, opts)?;
    let model = KoopmanModel {
        fit,
        t_s: data.sampling_time(),
        spectrum: spec,
        scores,
        principal,
    };
    model.principal_functionals()?;
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn real_pair(lambda: f64) -> Eigenpair {
        Eigenpair {
            mu: Complex64::new((lambda * 0.1).exp(), 0.0),
            lambda: Complex64::new(lambda, 0.0),
            weights: DVector::from_element(1, Complex64::new(1.0, 0.0)),
            relative_residual: 0.0,
            physical: true,
        }
    }

    #[test]
    fn koopman_small_cases() {
        let k = koopman_matrix(&DMatrix::from_element(1, 1, 2.0), &DMatrix::from_element(1, 1, 6.0), 1e-10).unwrap();
        assert_abs_diff_eq!(k.matrix[(0, 0)], 3.0, epsilon = 1e-14);
        let psi = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 0.5, -1.0]);
        let plus = DMatrix::from_row_slice(2, 2, &[0.3, 1.0, 2.0, 0.0]);
        let k = koopman_matrix(&psi, &plus, 1e-12).unwrap();
        let exact = &plus * psi.clone().try_inverse().unwrap();
        assert!((k.matrix - exact).amax() < 1e-12);
        assert!(matches!(
            koopman_matrix(&DMatrix::zeros(2, 3), &DMatrix::zeros(2, 3), 1e-10),
            Err(Error::DegenerateData(_))
        ));
    }

    #[test]
    fn diagonal_spectrum() {
        let k = DMatrix::from_diagonal(&DVector::from_vec(vec![(-9.37f64 * 0.1).exp(), (0.05f64).exp()]));
        let s = spectrum(&k, 0.1).unwrap();
        assert_abs_diff_eq!(s[0].lambda.re, 0.5, epsilon = 1e-10);
        assert_abs_diff_eq!(s[1].lambda.re, -9.37, epsilon = 1e-10);
        assert!(s.iter().all(|p| p.physical));
    }

    #[test]
    fn negative_mu_is_flagged() {
        let k = DMatrix::from_diagonal(&DVector::from_vec(vec![-0.5, 0.8]));
        let s = spectrum(&k, 0.1).unwrap();
        let neg = s.iter().find(|p| p.mu.re < 0.0).unwrap();
        assert!(!neg.physical);
        assert_abs_diff_eq!(neg.lambda.im, std::f64::consts::PI / 0.1, epsilon = 1e-10);
        assert!(Eigenfunctional::from_pair(neg).is_err());
    }

    #[test]
    fn sieve_example() {
        let spec: Vec<Eigenpair> = [4.0, 2.0, 1.0, 0.5, -9.37].iter().map(|&l| real_pair(l)).collect();
        let p = select_principal(&spec, 2, &[0.0; 5], &SelectionOptions::default()).unwrap();
        assert_eq!(p, vec![3, 4]);
        let all = SelectionOptions {
            max_order: 0,
            score_threshold: f64::INFINITY,
            ..Default::default()
        };
        assert_eq!(select_principal(&spec, 5, &[1.0; 5], &all).unwrap(), vec![0, 1, 2, 3, 4]);
        let manual = SelectionOptions {
            manual: Some(vec![4, 3]),
            ..Default::default()
        };
        assert_eq!(select_principal(&spec, 2, &[0.0; 5], &manual).unwrap(), vec![4, 3]);
        assert!(matches!(
            select_principal(&spec, 3, &[0.0; 5], &SelectionOptions::default()),
            Err(Error::Selection { .. })
        ));
    }

    #[test]
    fn integer_combinations() {
        assert!(is_integer_combination(1.0, &[0.5], 0.01, 4));
        assert!(!is_integer_combination(0.5, &[0.5], 0.01, 4));
        assert!(is_integer_combination(-8.87, &[0.5, -9.37], 0.01, 3));
        assert!(!is_integer_combination(-8.87, &[0.5, -9.37], 0.01, 0));
    }
}
