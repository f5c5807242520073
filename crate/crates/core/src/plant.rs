//! Method-of-lines simulator for `ẋ = ρx'' + a(z)x + f(z,x)` on `[0, 1]`
//! with `x'(0) = 0`, `x'(1) = u`.
//!
//! Time stepping is the two-stage L-stable Rosenbrock pair of `ode23s`
//! with an exact tridiagonal Jacobian.

use std::fmt;
use std::sync::Arc;

use log::{debug, warn};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::edmd::SnapshotDataset;
use crate::error::{Error, Result};
use crate::spatial::{seeded_rng, Grid, IcSampler, StateProfile};

/// Pointwise nonlinearity `f(z, x)` with its partial derivative in `x`.
pub trait Nonlinearity: Send + Sync {
    fn value(&self, z: f64, x: f64) -> f64;
    fn dx(&self, z: f64, x: f64) -> f64;
}

/// `f(x) = Σ_p c_p x^p`, with `c_0 = c_1 = 0` enforced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolynomialNonlinearity {
    coeffs: Vec<f64>,
}

impl PolynomialNonlinearity {
    /// `coeffs[p]` multiplies `x^p`; entries 0 and 1 must vanish.
    pub fn new(coeffs: Vec<f64>) -> Result<Self> {
        if coeffs.iter().take(2).any(|c| *c != 0.0) {
            return Err(Error::Parameter(
                "nonlinearity must satisfy f(z,0) = f_x(z,0) = 0".into(),
            ));
        }
        Ok(Self { coeffs })
    }

    pub fn quadratic(c: f64) -> Self {
        Self {
            coeffs: vec![0.0, 0.0, c],
        }
    }

    pub fn zero() -> Self {
        Self { coeffs: Vec::new() }
    }

    pub fn coeffs(&self) -> &[f64] {
        &self.coeffs
    }
}

impl Nonlinearity for PolynomialNonlinearity {
    fn value(&self, _z: f64, x: f64) -> f64 {
        self.coeffs.iter().rev().fold(0.0, |acc, c| acc * x + c)
    }

    fn dx(&self, _z: f64, x: f64) -> f64 {
        self.coeffs
            .iter()
            .enumerate()
            .skip(1)
            .rev()
            .fold(0.0, |acc, (p, c)| acc * x + p as f64 * c)
    }
}

/// Ground-truth plant. The identification pipeline never reads these fields.
#[derive(Clone)]
pub struct PlantSpec {
    rho: f64,
    reaction: Arc<dyn Fn(f64) -> f64 + Send + Sync>,
    nonlinearity: Arc<dyn Nonlinearity>,
}

impl fmt::Debug for PlantSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("PlantSpec")
            .field("rho", &self.rho)
            .field("a(0)", &(self.reaction)(0.0))
            .finish_non_exhaustive()
    }
}

impl PlantSpec {
    pub fn new(
        rho: f64,
        reaction: Arc<dyn Fn(f64) -> f64 + Send + Sync>,
        nonlinearity: Arc<dyn Nonlinearity>,
    ) -> Result<Self> {
        if !(rho > 0.0) || !rho.is_finite() {
            return Err(Error::Parameter(format!("diffusion must be positive, got {rho}")));
        }
        Ok(Self {
            rho,
            reaction,
            nonlinearity,
        })
    }

    /// Constant reaction coefficient and polynomial nonlinearity.
    pub fn polynomial(rho: f64, a: f64, coeffs: Vec<f64>) -> Result<Self> {
        Self::new(
            rho,
            Arc::new(move |_| a),
            Arc::new(PolynomialNonlinearity::new(coeffs)?),
        )
    }

    /// `ρ = 1`, `a = 0.5`, `f = 0.5x²`.
    pub fn reaction_diffusion_example() -> Self {
        Self::polynomial(1.0, 0.5, vec![0.0, 0.0, 0.5]).expect("valid constants")
    }

    pub fn linear(rho: f64, a: f64) -> Result<Self> {
        Self::polynomial(rho, a, Vec::new())
    }

    pub fn rho(&self) -> f64 {
        self.rho
    }

    fn discretize(&self, grid: &Arc<Grid>) -> Result<Semidiscrete> {
        let reaction: Vec<f64> = grid.nodes().iter().map(|&z| (self.reaction)(z)).collect();
        for &z in grid.nodes() {
            if self.nonlinearity.value(z, 0.0) != 0.0 {
                return Err(Error::Parameter(format!("f({z}, 0) != 0")));
            }
        }
        Ok(Semidiscrete {
            rho: self.rho,
            h: grid.spacing(),
            nodes: grid.nodes().to_vec(),
            reaction,
            nonlinearity: Arc::clone(&self.nonlinearity),
        })
    }
}

/// Boundary input as a function of the current state.
pub trait Controller: Send + Sync {
    fn input(&self, x: &StateProfile) -> f64;
}

/// Constant boundary input.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConstantInput(pub f64);

impl Controller for ConstantInput {
    fn input(&self, _x: &StateProfile) -> f64 {
        self.0
    }
}

impl<F> Controller for F
where
    F: Fn(&StateProfile) -> f64 + Send + Sync,
{
    fn input(&self, x: &StateProfile) -> f64 {
        self(x)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimOptions {
    pub rtol: f64,
    pub atol: f64,
    /// Longest accepted step; also bounds the controller's hold interval.
    pub max_step: f64,
    pub initial_step: f64,
    /// Blow-up threshold on `‖x‖_∞`.
    pub blowup_norm: f64,
    pub max_steps: usize,
}

impl Default for SimOptions {
    fn default() -> Self {
        Self {
            rtol: 1e-8,
            atol: 1e-10,
            max_step: 5e-3,
            initial_step: 1e-5,
            blowup_norm: 1e3,
            max_steps: 2_000_000,
        }
    }
}

impl SimOptions {
    pub fn with_tolerance(mut self, rtol: f64, atol: f64) -> Self {
        self.rtol = rtol;
        self.atol = atol;
        self
    }
}

/// Sampled solution. Truncated at the blow-up time if the detector fired.
#[derive(Debug, Clone)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub profiles: Vec<StateProfile>,
    /// Input held over the step that starts at each output time.
    pub inputs: Vec<f64>,
    pub blowup: Option<f64>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn last(&self) -> &StateProfile {
        self.profiles.last().expect("trajectory holds the initial state")
    }

    pub fn grid(&self) -> &Arc<Grid> {
        self.profiles[0].grid()
    }

    pub fn sup_norms(&self) -> Vec<f64> {
        self.profiles.iter().map(StateProfile::sup_norm).collect()
    }
}

struct Semidiscrete {
    rho: f64,
    h: f64,
    nodes: Vec<f64>,
    reaction: Vec<f64>,
    nonlinearity: Arc<dyn Nonlinearity>,
}

impl Semidiscrete {
    fn rhs(&self, x: &[f64], u: f64, out: &mut [f64]) {
        let n = x.len();
        let c = self.rho / (self.h * self.h);
        out[0] = 2.0 * c * (x[1] - x[0]);
        for j in 1..n - 1 {
            out[j] = c * (x[j + 1] - 2.0 * x[j] + x[j - 1]);
        }
        out[n - 1] = 2.0 * c * (x[n - 2] - x[n - 1]) + 2.0 * self.rho * u / self.h;
        for j in 0..n {
            out[j] += self.reaction[j] * x[j] + self.nonlinearity.value(self.nodes[j], x[j]);
        }
    }

    /// Diagonal of the tridiagonal Jacobian; the off-diagonals are `ρ/h²`
    /// except `2ρ/h²` in the first and last rows.
    fn jacobian_diagonal(&self, x: &[f64], out: &mut [f64]) {
        let c = self.rho / (self.h * self.h);
        for j in 0..x.len() {
            out[j] = -2.0 * c + self.reaction[j] + self.nonlinearity.dx(self.nodes[j], x[j]);
        }
    }
}

/// LU factors of `I − γJ` for the tridiagonal Jacobian, reusing its buffers.
struct TridiagonalLu {
    lo: Vec<f64>,
    up: Vec<f64>,
    piv: Vec<f64>,
    /// `piv[j-1]` folded into the forward sweep.
    inv: Vec<f64>,
}

impl TridiagonalLu {
    fn new(n: usize) -> Self {
        Self {
            lo: vec![0.0; n],
            up: vec![0.0; n],
            piv: vec![0.0; n],
            inv: vec![0.0; n],
        }
    }

    fn factor(&mut self, c: f64, diag: &[f64], gamma: f64) -> bool {
        let n = diag.len();
        self.lo.fill(-gamma * c);
        self.up.fill(-gamma * c);
        self.up[0] = -2.0 * gamma * c;
        self.lo[n - 1] = -2.0 * gamma * c;
        self.lo[0] = 0.0;
        self.up[n - 1] = 0.0;
        self.piv[0] = 1.0 - gamma * diag[0];
        for j in 1..n {
            let p = self.piv[j - 1];
            if p == 0.0 || !p.is_finite() {
                return false;
            }
            self.inv[j - 1] = 1.0 / p;
            self.piv[j] = 1.0 - gamma * diag[j] - self.lo[j] * self.up[j - 1] * self.inv[j - 1];
        }
        let p = self.piv[n - 1];
        if p == 0.0 || !p.is_finite() {
            return false;
        }
        self.inv[n - 1] = 1.0 / p;
        true
    }

    fn solve(&self, rhs: &mut [f64]) {
        let n = rhs.len();
        for j in 1..n {
            rhs[j] -= self.lo[j] * self.inv[j - 1] * rhs[j - 1];
        }
        rhs[n - 1] *= self.inv[n - 1];
        for j in (0..n - 1).rev() {
            rhs[j] = (rhs[j] - self.up[j] * rhs[j + 1]) * self.inv[j];
        }
    }
}

/// Integrates from `x0` over `[0, horizon]`, recording `x` at `output_times`
/// (which must increase and lie in `(0, horizon]`; time 0 is always recorded).
pub fn simulate(
    plant: &PlantSpec,
    x0: &StateProfile,
    controller: &dyn Controller,
    horizon: f64,
    output_times: &[f64],
    opts: &SimOptions,
) -> Result<Trajectory> {
    if !(horizon > 0.0) {
        return Err(Error::Parameter(format!("horizon must be positive, got {horizon}")));
    }
    if output_times.windows(2).any(|w| !(w[1] > w[0]))
        || output_times.iter().any(|&t| !(t > 0.0 && t <= horizon * (1.0 + 1e-14)))
    {
        return Err(Error::Parameter("output times must increase within (0, horizon]".into()));
    }
    let grid = Arc::clone(x0.grid());
    let sys = plant.discretize(&grid)?;
    let n = grid.len();

    let d = 1.0 / (2.0 + std::f64::consts::SQRT_2);
    let e32 = 6.0 + std::f64::consts::SQRT_2;

    let mut t = 0.0;
    let mut y = x0.values().to_vec();
    let mut h = opts.initial_step.min(opts.max_step);
    let mut times = vec![0.0];
    let mut profiles = vec![x0.clone()];
    let mut u = controller.input(x0);
    let mut inputs = vec![u];
    let mut next = 0usize;

    let mut f0 = vec![0.0; n];
    let mut f1 = vec![0.0; n];
    let mut f2 = vec![0.0; n];
    let mut k1 = vec![0.0; n];
    let mut k2 = vec![0.0; n];
    let mut k3 = vec![0.0; n];
    let mut tmp = vec![0.0; n];
    let mut ynew = vec![0.0; n];
    let mut jdiag = vec![0.0; n];
    let mut lu = TridiagonalLu::new(n);
    let coupling = sys.rho / (sys.h * sys.h);

    let mut steps = 0usize;
    let mut fresh_state = true;
    while next < output_times.len() {
        let target = output_times[next];
        if fresh_state {
            let current = StateProfile::from_raw(Arc::clone(&grid), y.clone());
            u = controller.input(&current);
            if !u.is_finite() {
                return Err(Error::Numerical(format!("controller returned {u} at t = {t}")));
            }
            sys.rhs(&y, u, &mut f0);
            fresh_state = false;
        }
        steps += 1;
        if steps > opts.max_steps {
            return Err(Error::Integration {
                time: t,
                last_state: y,
            });
        }
        let hmin = 16.0 * f64::EPSILON * t.abs().max(1e-3);
        let mut step = h.min(opts.max_step);
        let hits_output = t + step >= target - hmin;
        if hits_output {
            step = target - t;
        }
        if step < hmin {
            return Err(Error::Integration {
                time: t,
                last_state: y,
            });
        }

        sys.jacobian_diagonal(&y, &mut jdiag);
        if !lu.factor(coupling, &jdiag, step * d) {
            h = 0.5 * step;
            continue;
        }
        k1.copy_from_slice(&f0);
        lu.solve(&mut k1);
        for j in 0..n {
            tmp[j] = y[j] + 0.5 * step * k1[j];
        }
        sys.rhs(&tmp, u, &mut f1);
        for j in 0..n {
            k2[j] = f1[j] - k1[j];
        }
        lu.solve(&mut k2);
        for j in 0..n {
            k2[j] += k1[j];
            ynew[j] = y[j] + step * k2[j];
        }
        sys.rhs(&ynew, u, &mut f2);
        for j in 0..n {
            k3[j] = f2[j] - e32 * (k2[j] - f1[j]) - 2.0 * (k1[j] - f0[j]);
        }
        lu.solve(&mut k3);

        let mut err: f64 = 0.0;
        for j in 0..n {
            let e = step / 6.0 * (k1[j] - 2.0 * k2[j] + k3[j]);
            let sc = opts.atol + opts.rtol * y[j].abs().max(ynew[j].abs());
            err = err.max((e / sc).abs());
        }
        if !err.is_finite() {
            h = 0.2 * step;
            continue;
        }
        let factor = (0.9 * err.max(1e-12).powf(-1.0 / 3.0)).clamp(0.2, 5.0);
        if err > 1.0 {
            h = step * factor.min(0.9);
            continue;
        }

        t = if hits_output { target } else { t + step };
        std::mem::swap(&mut y, &mut ynew);
        fresh_state = true;
        let proposal = step * factor;
        // a step shortened to land on an output time says little about h
        h = if step < h { h.min(proposal).max(step) } else { proposal };

        let sup = y.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        if sup > opts.blowup_norm || !sup.is_finite() {
            debug!("blow-up detector fired at t = {t}");
            times.push(t);
            profiles.push(StateProfile::from_raw(Arc::clone(&grid), y.clone()));
            inputs.push(u);
            return Ok(Trajectory {
                times,
                profiles,
                inputs,
                blowup: Some(t),
            });
        }
        if hits_output {
            times.push(t);
            profiles.push(StateProfile::from_raw(Arc::clone(&grid), y.clone()));
            let current = profiles.last().expect("just pushed");
            inputs.push(controller.input(current));
            next += 1;
        }
    }
    Ok(Trajectory {
        times,
        profiles,
        inputs,
        blowup: None,
    })
}

/// `count` equally spaced times in `(0, horizon]`.
pub fn uniform_times(horizon: f64, count: usize) -> Vec<f64> {
    (1..=count).map(|i| horizon * i as f64 / count as f64).collect()
}

/// Draws `m` initial conditions from one generator seeded with `seed`, in
/// sample order, and simulates each for `t_s` under `u ≡ 0` in parallel.
pub fn collect_snapshots(
    plant: &PlantSpec,
    sampler: &IcSampler,
    m: usize,
    t_s: f64,
    seed: u64,
    opts: &SimOptions,
) -> Result<SnapshotDataset> {
    if m == 0 {
        return Err(Error::Parameter("snapshot count must be positive".into()));
    }
    let mut rng = seeded_rng(seed);
    let initial: Vec<StateProfile> = (0..m).map(|_| sampler.sample(&mut rng)).collect();
    let pairs: Vec<(StateProfile, StateProfile)> = initial
        .into_par_iter()
        .enumerate()
        .map(|(i, x)| {
            if t_s == 0.0 {
                return Ok((x.clone(), x));
            }
            let traj = simulate(plant, &x, &ConstantInput(0.0), t_s, &[t_s], opts).map_err(|e| {
                Error::Dataset {
                    sample: i,
                    reason: e.to_string(),
                }
            })?;
            if let Some(tb) = traj.blowup {
                return Err(Error::Dataset {
                    sample: i,
                    reason: format!("blow-up at t = {tb} before t_s = {t_s}"),
                });
            }
            let next = traj.last().clone();
            Ok((x, next))
        })
        .collect::<Result<_>>()?;
    SnapshotDataset::new(pairs, t_s)
}

/// `x(t0)` and a central-difference estimate of `ẋ(t0)` under constant input `u0`.
#[derive(Debug, Clone)]
pub struct DerivativeSample {
    pub t0: f64,
    pub u0: f64,
    pub x: StateProfile,
    pub xdot: StateProfile,
    /// Richardson estimate of the differencing error (sup norm).
    pub error_estimate: f64,
}

pub fn derivative_sample(
    plant: &PlantSpec,
    x0: &StateProfile,
    u0: f64,
    t0: f64,
    opts: &SimOptions,
) -> Result<DerivativeSample> {
    if !(t0 >= 0.0) {
        return Err(Error::Parameter(format!("t0 must be nonnegative, got {t0}")));
    }
    const TARGET: f64 = 1e-6;
    let fine = opts.with_tolerance(opts.rtol.min(1e-11), opts.atol.min(1e-13));
    let mut steps: Vec<f64> = (0..8).map(|k| 1e-2 * 0.5f64.powi(k)).collect();
    steps.retain(|&dt| dt <= t0 || t0 == 0.0);
    let central = t0 > 0.0 && !steps.is_empty();
    if !central {
        // one-sided second-order stencil from t0 forward
        steps = (0..8).map(|k| 1e-2 * 0.5f64.powi(k)).collect();
    } else if steps.len() < 2 {
        steps.push(steps[0] * 0.5);
    }
    let mut want: Vec<f64> = Vec::new();
    for &dt in &steps {
        if central {
            want.push(t0 - dt);
            want.push(t0 + dt);
        } else {
            want.push(t0 + dt);
            want.push(t0 + 2.0 * dt);
        }
    }
    want.push(t0);
    want.retain(|&t| t > 0.0);
    want.sort_by(f64::total_cmp);
    want.dedup_by(|a, b| (*a - *b).abs() < 1e-15);
    let horizon = *want.last().expect("nonempty stencil");
    let traj = simulate(plant, x0, &ConstantInput(u0), horizon, &want, &fine)?;
    if traj.blowup.is_some() {
        return Err(Error::Numerical("blow-up inside the derivative stencil".into()));
    }
    let at = |t: f64| -> &StateProfile {
        if t == 0.0 {
            return &traj.profiles[0];
        }
        let i = traj
            .times
            .iter()
            .position(|&s| (s - t).abs() < 1e-14)
            .expect("stencil time recorded");
        &traj.profiles[i]
    };
    let x = at(t0).clone();
    let estimate = |dt: f64| -> Vec<f64> {
        if central {
            let (a, b) = (at(t0 + dt).values(), at(t0 - dt).values());
            a.iter().zip(b).map(|(p, m)| (p - m) / (2.0 * dt)).collect()
        } else {
            let (x1, x2) = (at(t0 + dt).values(), at(t0 + 2.0 * dt).values());
            x.values()
                .iter()
                .zip(x1.iter().zip(x2))
                .map(|(a, (b, c))| (-3.0 * a + 4.0 * b - c) / (2.0 * dt))
                .collect()
        }
    };
    let mut best: Option<(Vec<f64>, f64)> = None;
    let mut prev = estimate(steps[0]);
    for &dt in &steps[1..] {
        let cur = estimate(dt);
        let err = prev
            .iter()
            .zip(&cur)
            .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()))
            / 3.0;
        let better = best.as_ref().is_none_or(|(_, e)| err < *e);
        if better {
            best = Some((cur.clone(), err));
        }
        if err <= TARGET {
            break;
        }
        prev = cur;
    }
    let (xdot, err) = best.expect("at least two stencil widths");
    if err > TARGET {
        warn!("derivative sample error estimate {err:e} exceeds {TARGET:e}");
    }
    Ok(DerivativeSample {
        t0,
        u0,
        x,
        xdot: StateProfile::from_raw(Arc::clone(x0.grid()), xdot),
        error_estimate: err,
    })
}
