//! Observables `ψ_ikl[x] = ⟨f_i, x^k⟩^l` and their variational derivatives.

use std::collections::{HashMap, HashSet};
use std::sync::Arc;

use log::warn;
use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::plant::Trajectory;
use crate::spatial::{cosine_function, inner_product, CosineBasis, Grid, StateProfile};

/// The triple `(i, k, l)`; serialized as `[i, k, l]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "[u32; 3]", into = "[u32; 3]")]
pub struct ObservableSpec {
    pub i: u32,
    pub k: u32,
    pub l: u32,
}

impl ObservableSpec {
    pub fn new(i: u32, k: u32, l: u32) -> Result<Self> {
        if i == 0 || k == 0 || l == 0 {
            return Err(Error::Parameter(format!(
                "observable indices must be >= 1, got ({i}, {k}, {l})"
            )));
        }
        Ok(Self { i, k, l })
    }
}

impl TryFrom<[u32; 3]> for ObservableSpec {
    type Error = Error;

    fn try_from(v: [u32; 3]) -> Result<Self> {
        Self::new(v[0], v[1], v[2])
    }
}

impl From<ObservableSpec> for [u32; 3] {
    fn from(s: ObservableSpec) -> Self {
        [s.i, s.k, s.l]
    }
}

/// All triples with entries in `1..=3`, lexicographic.
pub fn default_specs() -> Vec<ObservableSpec> {
    let mut out = Vec::with_capacity(27);
    for i in 1..=3 {
        for k in 1..=3 {
            for l in 1..=3 {
                out.push(ObservableSpec { i, k, l });
            }
        }
    }
    out
}

/// `⟨f_i, x⟩` for `i = 1..=count`.
pub fn linear_specs(count: u32) -> Vec<ObservableSpec> {
    (1..=count).map(|i| ObservableSpec { i, k: 1, l: 1 }).collect()
}

#[derive(Debug, Clone)]
pub struct Dictionary {
    specs: Vec<ObservableSpec>,
    basis: CosineBasis,
    boundary: Vec<f64>,
}

impl Dictionary {
    pub fn new(specs: Vec<ObservableSpec>, grid: &Arc<Grid>) -> Result<Self> {
        if specs.is_empty() {
            return Err(Error::Parameter("dictionary is empty".into()));
        }
        let mut seen = HashSet::new();
        for s in &specs {
            if s.i == 0 || s.k == 0 || s.l == 0 {
                return Err(Error::Parameter(format!("invalid observable {s:?}")));
            }
            if !seen.insert(*s) {
                return Err(Error::Parameter(format!("duplicate observable {s:?}")));
            }
        }
        let max_i = specs.iter().map(|s| s.i).max().expect("nonempty") as usize;
        let basis = CosineBasis::new(grid, max_i);
        let boundary = (1..=max_i).map(|i| cosine_function(i, 1.0)).collect();
        Ok(Self {
            specs,
            basis,
            boundary,
        })
    }

    /// The 27-element default with lexicographic `(i, k, l) ∈ {1,2,3}³`.
    pub fn standard(grid: &Arc<Grid>) -> Self {
        Self::new(default_specs(), grid).expect("default specs are valid")
    }

    pub fn len(&self) -> usize {
        self.specs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.specs.is_empty()
    }

    pub fn specs(&self) -> &[ObservableSpec] {
        &self.specs
    }

    pub fn grid(&self) -> &Arc<Grid> {
        self.basis.grid()
    }

    fn moments(&self, x: &StateProfile) -> Result<HashMap<(u32, u32), f64>> {
        let mut m = HashMap::new();
        let mut powers: HashMap<u32, StateProfile> = HashMap::new();
        for s in &self.specs {
            if m.contains_key(&(s.i, s.k)) {
                continue;
            }
            let xk = powers.entry(s.k).or_insert_with(|| x.powi(s.k as i32));
            m.insert((s.i, s.k), inner_product(self.basis.get(s.i as usize), xk)?);
        }
        Ok(m)
    }

    /// `ψ[x]`.
    pub fn feature_map(&self, x: &StateProfile) -> Result<DVector<f64>> {
        let m = self.moments(x)?;
        Ok(DVector::from_iterator(
            self.len(),
            self.specs.iter().map(|s| m[&(s.i, s.k)].powi(s.l as i32)),
        ))
    }

    /// Per-observable `(δψ_j[x])(1)`, without any diffusion factor.
    pub fn boundary_gradient(&self, x: &StateProfile) -> Result<DVector<f64>> {
        let m = self.moments(x)?;
        let x1 = x.boundary_value();
        Ok(DVector::from_iterator(
            self.len(),
            self.specs.iter().map(|s| {
                let (l, k) = (s.l as i32, s.k as i32);
                l as f64
                    * m[&(s.i, s.k)].powi(l - 1)
                    * k as f64
                    * self.boundary[s.i as usize - 1]
                    * x1.powi(k - 1)
            }),
        ))
    }

    /// `(δθ[x])(1)` for `θ = wᵀψ`.
    pub fn boundary_variational_derivative(&self, weights: &DVector<f64>, x: &StateProfile) -> Result<f64> {
        self.check_weights(weights)?;
        Ok(weights.dot(&self.boundary_gradient(x)?))
    }

    /// The full variational derivative `δθ[x](z)` sampled on the grid.
    pub fn variational_derivative(&self, weights: &DVector<f64>, x: &StateProfile) -> Result<StateProfile> {
        self.check_weights(weights)?;
        let m = self.moments(x)?;
        let n = x.grid().len();
        let mut out = vec![0.0; n];
        for (s, &w) in self.specs.iter().zip(weights.iter()) {
            if w == 0.0 {
                continue;
            }
            let (l, k) = (s.l as i32, s.k as i32);
            let c = w * l as f64 * m[&(s.i, s.k)].powi(l - 1) * k as f64;
            let f = self.basis.get(s.i as usize).values();
            for ((o, &fz), &xz) in out.iter_mut().zip(f).zip(x.values()) {
                *o += c * fz * xz.powi(k - 1);
            }
        }
        StateProfile::new(Arc::clone(x.grid()), out)
    }

    /// `d/dt θ[x(t)] = ⟨δθ[x], ẋ⟩`.
    pub fn chain_rule_derivative(&self, weights: &DVector<f64>, x: &StateProfile, xdot: &StateProfile) -> Result<f64> {
        inner_product(&self.variational_derivative(weights, x)?, xdot)
    }

    pub fn evaluate(&self, weights: &DVector<f64>, x: &StateProfile) -> Result<f64> {
        self.check_weights(weights)?;
        Ok(weights.dot(&self.feature_map(x)?))
    }

    fn check_weights(&self, weights: &DVector<f64>) -> Result<()> {
        if weights.len() != self.len() {
            return Err(Error::Parameter(format!(
                "{} weights for a dictionary of {} observables",
                weights.len(),
                self.len()
            )));
        }
        Ok(())
    }
}

/// Finite-difference time derivative of an observable along a trajectory.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimeDerivative {
    pub value: f64,
    /// Richardson estimate of the differencing error.
    pub error_estimate: f64,
}

/// `d/dt θ[x(t)]` at the trajectory sample nearest `t0`.
///
/// Interior samples use central differences over one and two neighbours,
/// combined by Richardson extrapolation on uniformly spaced samples.
pub fn observable_time_derivative(
    dict: &Dictionary,
    weights: &DVector<f64>,
    traj: &Trajectory,
    t0: f64,
) -> Result<TimeDerivative> {
    let n = traj.len();
    if n < 2 {
        return Err(Error::Parameter("need at least two trajectory samples".into()));
    }
    let i = traj
        .times
        .iter()
        .enumerate()
        .min_by(|a, b| (a.1 - t0).abs().total_cmp(&(b.1 - t0).abs()))
        .map(|(i, _)| i)
        .expect("nonempty");
    let theta = |j: usize| dict.evaluate(weights, &traj.profiles[j]);
    let t = &traj.times;
    let slope = |a: usize, b: usize| -> Result<f64> { Ok((theta(b)? - theta(a)?) / (t[b] - t[a])) };
    if i == 0 || i == n - 1 {
        warn!("t0 = {t0} at the end of the trajectory span; using a one-sided difference");
        let (a, b) = if i == 0 { (0, 1) } else { (n - 2, n - 1) };
        let d1 = slope(a, b)?;
        let err = if n >= 3 {
            let (a2, b2) = if i == 0 { (0, 2) } else { (n - 3, n - 1) };
            (slope(a2, b2)? - d1).abs()
        } else {
            f64::NAN
        };
        return Ok(TimeDerivative {
            value: d1,
            error_estimate: err,
        });
    }
    let d1 = slope(i - 1, i + 1)?;
    if i < 2 || i + 2 >= n {
        return Ok(TimeDerivative {
            value: d1,
            error_estimate: f64::NAN,
        });
    }
    let d2 = slope(i - 2, i + 2)?;
    let uniform = ((t[i + 1] - t[i]) - (t[i] - t[i - 1])).abs() < 1e-9 * (t[i + 1] - t[i - 1]);
    let (value, err) = if uniform {
        ((4.0 * d1 - d2) / 3.0, (d1 - d2).abs() / 3.0)
    } else {
        (d1, (d1 - d2).abs())
    };
    let rel = err / value.abs().max(f64::MIN_POSITIVE);
    if rel > 1e-5 && err > 1e-12 {
        warn!("observable derivative at t0 = {t0}: relative error estimate {rel:e}");
    }
    Ok(TimeDerivative {
        value,
        error_estimate: err,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::plant::{simulate, uniform_times, ConstantInput, PlantSpec, SimOptions};
    use approx::assert_abs_diff_eq;
    use std::f64::consts::{PI, SQRT_2};

    fn grid() -> Arc<Grid> {
        Grid::uniform(101).unwrap()
    }

    fn single(i: u32, k: u32, l: u32) -> Dictionary {
        Dictionary::new(vec![ObservableSpec::new(i, k, l).unwrap()], &grid()).unwrap()
    }

    #[test]
    fn default_is_lexicographic() {
        let s = default_specs();
        assert_eq!(s.len(), 27);
        assert!(s.windows(2).all(|w| w[0] < w[1]));
        assert_eq!(s[1], ObservableSpec { i: 1, k: 1, l: 2 });
    }

    #[test]
    fn rejects_invalid_specs() {
        assert!(ObservableSpec::new(0, 1, 1).is_err());
        let s = ObservableSpec::new(1, 1, 1).unwrap();
        assert!(Dictionary::new(vec![s, s], &grid()).is_err());
    }

    #[test]
    fn feature_map_examples() {
        let g = grid();
        let d = Dictionary::standard(&g);
        assert!(d.feature_map(&StateProfile::zeros(&g)).unwrap().iter().all(|v| *v == 0.0));
        let one = StateProfile::constant(&g, 1.0);
        assert_abs_diff_eq!(single(1, 1, 1).feature_map(&one).unwrap()[0], 1.0, epsilon = 1e-14);
        assert!(single(2, 3, 2).feature_map(&one).unwrap()[0].abs() < 1e-18);
    }

    #[test]
    fn boundary_derivative_examples() {
        let g = grid();
        let x = StateProfile::from_fn(&g, |z| 0.3 + z * z);
        let w = DVector::from_element(1, 1.0);
        assert_abs_diff_eq!(single(1, 1, 1).boundary_variational_derivative(&w, &x).unwrap(), 1.0);
        assert_abs_diff_eq!(
            single(2, 1, 1).boundary_variational_derivative(&w, &x).unwrap(),
            -SQRT_2,
            epsilon = 1e-14
        );
        let one = StateProfile::constant(&g, 1.0);
        assert_abs_diff_eq!(single(1, 2, 1).boundary_variational_derivative(&w, &one).unwrap(), 2.0);
    }

    #[test]
    fn variational_derivative_matches_directional_difference() {
        let g = grid();
        let d = Dictionary::standard(&g);
        let w = DVector::from_fn(27, |i, _| ((i * 7 % 5) as f64 - 2.0) * 0.3);
        let x = StateProfile::from_fn(&g, |z| 0.4 + 0.2 * (PI * z).cos());
        let dir = StateProfile::from_fn(&g, |z| (2.0 * z).sin());
        let e = 1e-6;
        let plus = d.evaluate(&w, &x.add(&dir.scaled(e)).unwrap()).unwrap();
        let minus = d.evaluate(&w, &x.sub(&dir.scaled(e)).unwrap()).unwrap();
        let fd = (plus - minus) / (2.0 * e);
        let exact = d.chain_rule_derivative(&w, &x, &dir).unwrap();
        assert_abs_diff_eq!(fd, exact, epsilon = 1e-7 * (1.0 + exact.abs()));
        let bd = d.boundary_variational_derivative(&w, &x).unwrap();
        let full = d.variational_derivative(&w, &x).unwrap();
        assert_abs_diff_eq!(bd, full.boundary_value(), epsilon = 1e-12);
    }

    #[test]
    fn observable_derivative_on_linear_mode() {
        let g = grid();
        let plant = PlantSpec::linear(1.0, 0.5).unwrap();
        let x0 = StateProfile::from_fn(&g, |z| (PI * z).cos());
        let tr = simulate(&plant, &x0, &ConstantInput(0.0), 0.2, &uniform_times(0.2, 200), &SimOptions::default()).unwrap();
        let d = single(2, 1, 1);
        let w = DVector::from_element(1, 1.0);
        let td = observable_time_derivative(&d, &w, &tr, 0.1).unwrap();
        let h = g.spacing();
        let lam = 0.5 - (2.0 - 2.0 * (PI * h).cos()) / (h * h);
        let theta = d.evaluate(&w, &tr.profiles[100]).unwrap();
        assert_abs_diff_eq!(td.value, lam * theta, epsilon = 1e-4);
        let zero = DVector::zeros(1);
        assert_eq!(observable_time_derivative(&d, &zero, &tr, 0.1).unwrap().value, 0.0);
    }

    #[test]
    fn observable_derivative_of_constant_trajectory() {
        let g = grid();
        let x = StateProfile::constant(&g, 0.7);
        let tr = Trajectory {
            times: vec![0.0, 0.1, 0.2, 0.3, 0.4],
            profiles: vec![x.clone(); 5],
            inputs: vec![0.0; 5],
            blowup: None,
        };
        let d = Dictionary::standard(&g);
        let w = DVector::from_element(27, 1.0);
        assert_eq!(observable_time_derivative(&d, &w, &tr, 0.2).unwrap().value, 0.0);
        assert_eq!(observable_time_derivative(&d, &w, &tr, 0.0).unwrap().value, 0.0);
    }
}
