//! Lifted bilinear model `ẇ = Λw + (b + Nw)u` in principal eigenfunctional
//! coordinates: diffusion estimate, least-squares and Gramian fits of
//! `(b, N)`, and the lifting defect along trajectories.

use log::warn;
use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dictionary::{Dictionary, ObservableSpec};
use crate::edmd::{Eigenfunctional, SnapshotDataset};
use crate::error::{Error, Result};
use crate::linalg::pinv;
use crate::plant::{DerivativeSample, Trajectory};
use crate::spatial::{seeded_rng, unit_uniform, CosineBasis, Grid, IntervalBox, StateProfile};

/// Pseudoinverse cutoff for the affine fits.
const FIT_RANK_TOL: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BilinearModel {
    /// Diagonal of `Λₙ`, descending.
    pub lambda: Vec<f64>,
    pub b: Vec<f64>,
    /// Row-major `N`.
    pub n_matrix: Vec<Vec<f64>>,
    pub rho: f64,
    pub fit_error: f64,
    pub grid_nodes: usize,
    pub dictionary: Vec<ObservableSpec>,
    pub functionals: Vec<Eigenfunctional>,
}

impl BilinearModel {
    pub fn dim(&self) -> usize {
        self.lambda.len()
    }

    pub fn lambda_matrix(&self) -> DMatrix<f64> {
        DMatrix::from_diagonal(&DVector::from_column_slice(&self.lambda))
    }

    pub fn b_vector(&self) -> DVector<f64> {
        DVector::from_column_slice(&self.b)
    }

    pub fn n_mat(&self) -> DMatrix<f64> {
        let n = self.dim();
        DMatrix::from_fn(n, n, |i, j| self.n_matrix[i][j])
    }

    /// Rebuilds the dictionary these functionals are expressed in.
    pub fn dictionary(&self, grid: &std::sync::Arc<Grid>) -> Result<Dictionary> {
        if grid.len() != self.grid_nodes {
            return Err(Error::GridMismatch {
                left: self.grid_nodes,
                right: grid.len(),
            });
        }
        Dictionary::new(self.dictionary.clone(), grid)
    }

    /// `φ̂ₙ[x]`.
    pub fn lift(&self, dict: &Dictionary, x: &StateProfile) -> Result<DVector<f64>> {
        lift(dict, &self.functionals, x)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.dim();
        if self.b.len() != n || self.n_matrix.len() != n || self.n_matrix.iter().any(|r| r.len() != n) {
            return Err(Error::Config(format!("bilinear model with inconsistent dimensions (n = {n})")));
        }
        if self.functionals.len() != n || self.functionals.iter().any(|f| f.weights.len() != self.dictionary.len()) {
            return Err(Error::Config("eigenfunctional weights do not match the dictionary".into()));
        }
        if !(self.rho > 0.0) {
            return Err(Error::Config(format!("rho estimate must be positive, got {}", self.rho)));
        }
        if self.lambda.windows(2).any(|w| w[0] < w[1]) {
            return Err(Error::Config("eigenvalues must be sorted descending".into()));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn from_toml(s: &str) -> Result<Self> {
        let m: Self = toml::from_str(s).map_err(|e| Error::Config(e.to_string()))?;
        m.validate()?;
        Ok(m)
    }
}

pub fn lift(dict: &Dictionary, functionals: &[Eigenfunctional], x: &StateProfile) -> Result<DVector<f64>> {
    let psi = dict.feature_map(x)?;
    Ok(DVector::from_iterator(
        functionals.len(),
        functionals.iter().map(|f| f.weights.iter().zip(psi.iter()).map(|(w, p)| w * p).sum()),
    ))
}

/// `(δφ̂ₙ[x])(1)` stacked over the functionals.
pub fn boundary_gains(dict: &Dictionary, functionals: &[Eigenfunctional], x: &StateProfile) -> Result<DVector<f64>> {
    let g = dict.boundary_gradient(x)?;
    Ok(DVector::from_iterator(
        functionals.len(),
        functionals.iter().map(|f| f.weights.iter().zip(g.iter()).map(|(w, p)| w * p).sum()),
    ))
}

/// `ρ̂ = (dφ̂/dt − λ̂φ̂) / ((δφ̂)(1) u0)` with `dφ̂/dt = ⟨δφ̂[x], ẋ⟩`.
pub fn rho_estimate(
    dict: &Dictionary,
    functional: &Eigenfunctional,
    sample: &DerivativeSample,
    tol_denominator: f64,
) -> Result<f64> {
    let w = functional.weights_vector();
    let denominator = dict.boundary_variational_derivative(&w, &sample.x)? * sample.u0;
    if !(denominator.abs() > tol_denominator) {
        return Err(Error::SingularEstimate {
            denominator: denominator.abs(),
        });
    }
    let dphi = dict.chain_rule_derivative(&w, &sample.x, &sample.xdot)?;
    let phi = dict.evaluate(&w, &sample.x)?;
    Ok((dphi - functional.lambda * phi) / denominator)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RhoEstimate {
    pub value: f64,
    /// Index of the functional that produced `value`.
    pub source: usize,
    /// Per-functional estimates (absent where the denominator was too small).
    pub per_functional: Vec<Option<f64>>,
    /// Largest minus smallest valid estimate.
    pub spread: f64,
}

/// Uses the functional with the largest `|(δφ̂)(1)|`, or the mean over all
/// valid functionals when `average` is set.
pub fn rho_estimate_all(
    dict: &Dictionary,
    functionals: &[Eigenfunctional],
    sample: &DerivativeSample,
    tol_denominator: f64,
    average: bool,
) -> Result<RhoEstimate> {
    let gains = boundary_gains(dict, functionals, &sample.x)?;
    let per: Vec<Option<f64>> = functionals
        .iter()
        .map(|f| rho_estimate(dict, f, sample, tol_denominator).ok())
        .collect();
    let valid: Vec<f64> = per.iter().flatten().copied().collect();
    if valid.is_empty() {
        return Err(Error::SingularEstimate {
            denominator: gains.amax() * sample.u0.abs(),
        });
    }
    let source = gains.iamax();
    let value = if average {
        valid.iter().sum::<f64>() / valid.len() as f64
    } else {
        per[source].ok_or(Error::SingularEstimate {
            denominator: gains[source].abs() * sample.u0.abs(),
        })?
    };
    let lo = valid.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = valid.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    Ok(RhoEstimate {
        value,
        source,
        per_functional: per,
        spread: hi - lo,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct AffineFit {
    pub b: DVector<f64>,
    pub n: DMatrix<f64>,
    /// `‖D − [b, N]F‖_F`.
    pub residual: f64,
    pub rank: usize,
}

/// `[b, N] = D F†` with `F = [1; Φ]`, columns are samples.
pub fn fit_affine(d: &DMatrix<f64>, phi: &DMatrix<f64>) -> Result<AffineFit> {
    let (n, m) = phi.shape();
    if d.shape() != (n, m) {
        return Err(Error::Parameter(format!(
            "gain matrix {:?} does not match coordinates {:?}",
            d.shape(),
            phi.shape()
        )));
    }
    let mut f = DMatrix::from_element(n + 1, m, 1.0);
    f.view_mut((1, 0), (n, m)).copy_from(phi);
    let (fp, rank) = pinv(&f, FIT_RANK_TOL)?;
    if rank < n + 1 {
        warn!("affine fit: F has rank {rank} < {}; data are uninformative", n + 1);
    }
    let bn = d * fp;
    let residual = (d - &bn * &f).norm();
    Ok(AffineFit {
        b: bn.column(0).into_owned(),
        n: bn.columns(1, n).into_owned(),
        residual,
        rank,
    })
}

/// Least-squares `(b, N)` from the dataset's initial states.
pub fn fit_bn(dict: &Dictionary, data: &SnapshotDataset, functionals: &[Eigenfunctional], rho: f64) -> Result<AffineFit> {
    let n = functionals.len();
    if data.len() < n + 1 {
        return Err(Error::Parameter(format!(
            "{} samples cannot determine an affine gain in {n} coordinates",
            data.len()
        )));
    }
    let cols: Vec<(DVector<f64>, DVector<f64>)> = data
        .pairs()
        .par_iter()
        .map(|(x, _)| Ok((boundary_gains(dict, functionals, x)? * rho, lift(dict, functionals, x)?)))
        .collect::<Result<_>>()?;
    let d = DMatrix::from_columns(&cols.iter().map(|c| c.0.clone()).collect::<Vec<_>>());
    let phi = DMatrix::from_columns(&cols.iter().map(|c| c.1.clone()).collect::<Vec<_>>());
    fit_affine(&d, &phi)
}

/// Monte Carlo setup for the cylinder-coordinate Gramian.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CylinderConfig {
    /// Truncation order `m` of `x = Σ ξ_i ϑ_i`.
    pub order: usize,
    pub domain: IntervalBox,
    pub samples: usize,
    pub seed: u64,
}

impl CylinderConfig {
    /// Hull of the dataset's cosine coefficients.
    pub fn from_data(data: &SnapshotDataset, order: usize, samples: usize, seed: u64) -> Result<Self> {
        let grid = data.pairs()[0].0.grid();
        let basis = CosineBasis::new(grid, order);
        let points: Vec<Vec<f64>> = data
            .initial_states()
            .map(|x| basis.coefficients(x))
            .collect::<Result<_>>()?;
        Ok(Self {
            order,
            domain: IntervalBox::hull(&points, 0.0)?,
            samples,
            seed,
        })
    }
}

/// `G = mean φ̄φ̄ᵀ`, `R = mean g φ̄ᵀ` over uniform samples of the box, `[b, N] = R G†`.
pub fn gramian_solve(
    domain: &IntervalBox,
    samples: usize,
    seed: u64,
    strict: bool,
    eval: impl Fn(&[f64]) -> Result<(DVector<f64>, DVector<f64>)> + Sync,
) -> Result<(DVector<f64>, DMatrix<f64>)> {
    if samples == 0 {
        return Err(Error::Parameter("Monte Carlo needs at least one sample".into()));
    }
    let mut rng = seeded_rng(seed);
    let points: Vec<Vec<f64>> = (0..samples)
        .map(|_| {
            domain
                .lower
                .iter()
                .zip(&domain.upper)
                .map(|(l, u)| l + (u - l) * unit_uniform(&mut rng))
                .collect()
        })
        .collect();
    let evals: Vec<(DVector<f64>, DVector<f64>)> = points.par_iter().map(|p| eval(p)).collect::<Result<_>>()?;
    let n = evals[0].0.len();
    let mut g = DMatrix::zeros(n + 1, n + 1);
    let mut r = DMatrix::zeros(n, n + 1);
    for (phi, gain) in &evals {
        let mut bar = DVector::from_element(n + 1, 1.0);
        bar.rows_mut(1, n).copy_from(phi);
        g += &bar * bar.transpose();
        r += gain * bar.transpose();
    }
    g /= samples as f64;
    r /= samples as f64;
    let (gp, rank) = pinv(&g, FIT_RANK_TOL)?;
    if rank < n + 1 {
        if strict {
            return Err(Error::SingularGramian(format!("rank {rank} < {}", n + 1)));
        }
        warn!("Gramian has rank {rank} < {}; using the minimum-norm solution", n + 1);
    }
    let bn = r * gp;
    Ok((bn.column(0).into_owned(), bn.columns(1, n).into_owned()))
}

/// `(b, N)` from the Gramian over cylinder functionals.
pub fn gramian_bilinearize(
    cfg: &CylinderConfig,
    dict: &Dictionary,
    functionals: &[Eigenfunctional],
    rho: f64,
    strict: bool,
) -> Result<(DVector<f64>, DMatrix<f64>)> {
    if cfg.domain.dim() != cfg.order {
        return Err(Error::Parameter(format!(
            "cylinder box has dimension {} but the order is {}",
            cfg.domain.dim(),
            cfg.order
        )));
    }
    if cfg.order < functionals.len() {
        return Err(Error::Parameter("cylinder order must be at least n".into()));
    }
    let basis = CosineBasis::new(dict.grid(), cfg.order);
    gramian_solve(&cfg.domain, cfg.samples, cfg.seed, strict, |xi| {
        let x = basis.synthesize(xi);
        Ok((lift(dict, functionals, &x)?, boundary_gains(dict, functionals, &x)? * rho))
    })
}

/// `‖dφ̂/dt − Λφ̂ − (b + Nφ̂)u‖` at interior samples.
#[derive(Debug, Clone, PartialEq)]
pub struct DefectSeries {
    pub times: Vec<f64>,
    pub defect: Vec<f64>,
    /// `‖Λφ̂‖` at the same samples.
    pub reference: Vec<f64>,
    pub max: f64,
    pub mean: f64,
}

pub fn lifting_defect(dict: &Dictionary, model: &BilinearModel, traj: &Trajectory) -> Result<DefectSeries> {
    if traj.len() < 3 {
        return Err(Error::Parameter("lifting defect needs at least three samples".into()));
    }
    let phis: Vec<DVector<f64>> = traj
        .profiles
        .par_iter()
        .map(|x| model.lift(dict, x))
        .collect::<Result<_>>()?;
    let lam = model.lambda_matrix();
    let b = model.b_vector();
    let nm = model.n_mat();
    let mut times = Vec::new();
    let mut defect = Vec::new();
    let mut reference = Vec::new();
    for i in 1..traj.len() - 1 {
        let dt = traj.times[i + 1] - traj.times[i - 1];
        let dphi = (&phis[i + 1] - &phis[i - 1]) / dt;
        let drift = &lam * &phis[i];
        let gain = &b + &nm * &phis[i];
        let e = dphi - &drift - gain * traj.inputs[i];
        times.push(traj.times[i]);
        defect.push(e.norm());
        reference.push(drift.norm());
    }
    let max = defect.iter().copied().fold(0.0, f64::max);
    let mean = defect.iter().sum::<f64>() / defect.len() as f64;
    Ok(DefectSeries {
        times,
        defect,
        reference,
        max,
        mean,
    })
}
