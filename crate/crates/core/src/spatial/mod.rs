//! Spatial grid on `[0, 1]`, Simpson quadrature, the cosine basis and the
//! initial-condition generator.

mod legendre;

pub use legendre::{
    gauss_legendre, legendre_1d, legendre_eval, legendre_gradient, IntervalBox,
    LegendreTensorBasis, TensorQuadrature,
};

use std::f64::consts::{PI, SQRT_2};
use std::sync::Arc;

use rand::RngCore;
use rand_xoshiro::rand_core::SeedableRng;
use rand_xoshiro::SplitMix64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Uniform grid with composite Simpson weights.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    nodes: Vec<f64>,
    weights: Vec<f64>,
    h: f64,
}

impl Grid {
    pub const DEFAULT_NODES: usize = 101;

    pub fn uniform(n: usize) -> Result<Arc<Self>> {
        if n < 11 || n % 2 == 0 {
            return Err(Error::Parameter(format!(
                "grid needs an odd node count >= 11 for Simpson quadrature, got {n}"
            )));
        }
        let h = 1.0 / (n - 1) as f64;
        let nodes: Vec<f64> = (0..n)
            .map(|j| if j == n - 1 { 1.0 } else { j as f64 * h })
            .collect();
        let weights = (0..n)
            .map(|j| {
                let c = if j == 0 || j == n - 1 {
                    1.0
                } else if j % 2 == 1 {
                    4.0
                } else {
                    2.0
                };
                c * h / 3.0
            })
            .collect();
        Ok(Arc::new(Self { nodes, weights, h }))
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn spacing(&self) -> f64 {
        self.h
    }

    pub fn nodes(&self) -> &[f64] {
        &self.nodes
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// `∫₀¹ v dz` by Simpson's rule.
    pub fn integrate(&self, values: &[f64]) -> f64 {
        debug_assert_eq!(values.len(), self.len());
        self.weights.iter().zip(values).map(|(w, v)| w * v).sum()
    }
}

fn same_grid(a: &Arc<Grid>, b: &Arc<Grid>) -> bool {
    Arc::ptr_eq(a, b) || a.as_ref() == b.as_ref()
}

/// A function sampled on a [`Grid`].
#[derive(Debug, Clone)]
pub struct StateProfile {
    grid: Arc<Grid>,
    values: Vec<f64>,
}

impl PartialEq for StateProfile {
    fn eq(&self, other: &Self) -> bool {
        same_grid(&self.grid, &other.grid) && self.values == other.values
    }
}

impl StateProfile {
    pub fn new(grid: Arc<Grid>, values: Vec<f64>) -> Result<Self> {
        if values.len() != grid.len() {
            return Err(Error::GridMismatch {
                left: grid.len(),
                right: values.len(),
            });
        }
        if let Some(j) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::Parameter(format!(
                "profile value at node {j} is not finite"
            )));
        }
        Ok(Self { grid, values })
    }

    /// Skips the finiteness scan; callers guarantee the length.
    pub(crate) fn from_raw(grid: Arc<Grid>, values: Vec<f64>) -> Self {
        debug_assert_eq!(values.len(), grid.len());
        Self { grid, values }
    }

    pub fn from_fn(grid: &Arc<Grid>, f: impl Fn(f64) -> f64) -> Self {
        let values = grid.nodes().iter().map(|&z| f(z)).collect();
        Self::from_raw(Arc::clone(grid), values)
    }

    pub fn constant(grid: &Arc<Grid>, c: f64) -> Self {
        Self::from_raw(Arc::clone(grid), vec![c; grid.len()])
    }

    pub fn zeros(grid: &Arc<Grid>) -> Self {
        Self::constant(grid, 0.0)
    }

    pub fn grid(&self) -> &Arc<Grid> {
        &self.grid
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    /// Value at the actuated end `z = 1`.
    pub fn boundary_value(&self) -> f64 {
        *self.values.last().expect("grid is nonempty")
    }

    pub fn sup_norm(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn l2_norm(&self) -> f64 {
        let sq: Vec<f64> = self.values.iter().map(|v| v * v).collect();
        self.grid.integrate(&sq).sqrt()
    }

    pub fn scaled(&self, s: f64) -> Self {
        self.map(|v| v * s)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self::from_raw(Arc::clone(&self.grid), self.values.iter().map(|&v| f(v)).collect())
    }

    pub fn powi(&self, k: i32) -> Self {
        self.map(|v| v.powi(k))
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.check_grid(other)?;
        Ok(Self::from_raw(
            Arc::clone(&self.grid),
            self.values.iter().zip(&other.values).map(|(a, b)| a + b).collect(),
        ))
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.add(&other.scaled(-1.0))
    }

    fn check_grid(&self, other: &Self) -> Result<()> {
        if same_grid(&self.grid, &other.grid) {
            Ok(())
        } else {
            Err(Error::GridMismatch {
                left: self.grid.len(),
                right: other.grid.len(),
            })
        }
    }
}

/// `⟨a, b⟩ = Σ_j w_j a_j b_j`.
pub fn inner_product(a: &StateProfile, b: &StateProfile) -> Result<f64> {
    a.check_grid(b)?;
    Ok(a
        .grid
        .weights()
        .iter()
        .zip(a.values.iter().zip(&b.values))
        .map(|(w, (x, y))| w * x * y)
        .sum())
}

/// `f_1 = 1`, `f_i = √2 cos((i−1)πz)`, sampled on a grid.
#[derive(Debug, Clone)]
pub struct CosineBasis {
    functions: Vec<StateProfile>,
}

impl CosineBasis {
    pub fn new(grid: &Arc<Grid>, count: usize) -> Self {
        let functions = (1..=count)
            .map(|i| StateProfile::from_fn(grid, |z| cosine_function(i, z)))
            .collect();
        Self { functions }
    }

    pub fn len(&self) -> usize {
        self.functions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.functions.is_empty()
    }

    pub fn grid(&self) -> &Arc<Grid> {
        self.functions[0].grid()
    }

    /// The sampled `f_i`, one-based.
    pub fn get(&self, i: usize) -> &StateProfile {
        &self.functions[i - 1]
    }

    pub fn coefficients(&self, x: &StateProfile) -> Result<Vec<f64>> {
        self.functions.iter().map(|f| inner_product(f, x)).collect()
    }

    /// `Σ c_i f_i`.
    pub fn synthesize(&self, coeffs: &[f64]) -> StateProfile {
        let grid = self.grid();
        let mut values = vec![0.0; grid.len()];
        for (c, f) in coeffs.iter().zip(&self.functions) {
            for (v, fv) in values.iter_mut().zip(f.values()) {
                *v += c * fv;
            }
        }
        StateProfile::from_raw(Arc::clone(grid), values)
    }

    pub fn gram_matrix(&self) -> nalgebra::DMatrix<f64> {
        let n = self.len();
        nalgebra::DMatrix::from_fn(n, n, |i, j| {
            inner_product(&self.functions[i], &self.functions[j]).expect("shared grid")
        })
    }
}

/// Closed-form `f_i(z)`, one-based.
pub fn cosine_function(i: usize, z: f64) -> f64 {
    assert!(i >= 1, "cosine basis is one-based");
    if i == 1 {
        1.0
    } else {
        SQRT_2 * ((i - 1) as f64 * PI * z).cos()
    }
}

/// Parameters of the initial-condition shape `g`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IcShape {
    pub amp: f64,
    pub freq: f64,
    pub phase: f64,
}

impl Default for IcShape {
    fn default() -> Self {
        Self {
            amp: 0.8,
            freq: 0.42,
            phase: 2.0 / 3.0,
        }
    }
}

impl IcShape {
    pub fn value(&self, z: f64) -> f64 {
        let c = self.freq * PI;
        let theta = c * z + PI * self.phase;
        -(self.amp / c.powi(3))
            * ((c * c * (z - 1.0) * z - 2.0) * theta.sin() + c * (2.0 * z - 1.0) * theta.cos())
    }

    /// `g'(z) = −a z (z−1) cos(ωπz + πφ₀)`.
    pub fn slope(&self, z: f64) -> f64 {
        -self.amp * z * (z - 1.0) * (self.freq * PI * z + PI * self.phase).cos()
    }
}

/// Samples `g` on `grid`.
pub fn make_ic_g(amp: f64, freq: f64, phase: f64, grid: &Arc<Grid>) -> Result<StateProfile> {
    if freq == 0.0 || !freq.is_finite() {
        return Err(Error::Parameter(format!(
            "initial-condition frequency must be nonzero and finite, got {freq}"
        )));
    }
    let shape = IcShape { amp, freq, phase };
    StateProfile::new(
        Arc::clone(grid),
        grid.nodes().iter().map(|&z| shape.value(z)).collect(),
    )
}

/// Random profiles `Σ c_i h_i` with `c_i ~ U[g_i − δ, g_i + δ]`.
#[derive(Debug, Clone)]
pub struct IcSampler {
    basis: CosineBasis,
    center: Vec<f64>,
    half_width: f64,
}

impl IcSampler {
    pub fn new(basis: CosineBasis, center: Vec<f64>, half_width: f64) -> Result<Self> {
        if !(half_width >= 0.0) {
            return Err(Error::Parameter(format!(
                "half width must be nonnegative, got {half_width}"
            )));
        }
        if center.len() > basis.len() {
            return Err(Error::Parameter(format!(
                "{} coefficients for a basis of {} functions",
                center.len(),
                basis.len()
            )));
        }
        Ok(Self {
            basis,
            center,
            half_width,
        })
    }

    /// Projects `g` onto the first `count` cosine functions.
    pub fn from_shape(grid: &Arc<Grid>, shape: &IcShape, count: usize, half_width: f64) -> Result<Self> {
        let basis = CosineBasis::new(grid, count);
        let g = make_ic_g(shape.amp, shape.freq, shape.phase, grid)?;
        let center = basis.coefficients(&g)?;
        Self::new(basis, center, half_width)
    }

    pub fn center(&self) -> &[f64] {
        &self.center
    }

    pub fn half_width(&self) -> f64 {
        self.half_width
    }

    pub fn basis(&self) -> &CosineBasis {
        &self.basis
    }

    pub fn center_profile(&self) -> StateProfile {
        self.basis.synthesize(&self.center)
    }

    /// Draws coefficients from `rng`, one uniform per coefficient in order.
    pub fn draw_coefficients(&self, rng: &mut impl RngCore) -> Vec<f64> {
        self.center
            .iter()
            .map(|&g| g - self.half_width + 2.0 * self.half_width * unit_uniform(rng))
            .collect()
    }

    pub fn sample(&self, rng: &mut impl RngCore) -> StateProfile {
        let c = self.draw_coefficients(rng);
        self.basis.synthesize(&c)
    }
}

/// Uniform in `[0, 1)` from the top 53 bits of one `u64`.
pub fn unit_uniform(rng: &mut impl RngCore) -> f64 {
    (rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

pub fn seeded_rng(seed: u64) -> SplitMix64 {
    SplitMix64::seed_from_u64(seed)
}

/// One random profile from a fresh generator seeded with `seed`.
pub fn random_ic(basis: &CosineBasis, g_coeffs: &[f64], half_width: f64, seed: u64) -> Result<StateProfile> {
    let sampler = IcSampler::new(basis.clone(), g_coeffs.to_vec(), half_width)?;
    Ok(sampler.sample(&mut seeded_rng(seed)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    /// max |g| for the default shape on the 101-node grid.
    const G_SUP_NORM: f64 = 0.373_435_349_265_389_6;

    fn grid() -> Arc<Grid> {
        Grid::uniform(101).unwrap()
    }

    #[test]
    fn grid_rejects_even_or_small() {
        assert!(Grid::uniform(100).is_err());
        assert!(Grid::uniform(9).is_err());
        let g = Grid::uniform(11).unwrap();
        assert_eq!(g.nodes()[0], 0.0);
        assert_eq!(*g.nodes().last().unwrap(), 1.0);
        assert!(g.nodes().windows(2).all(|w| w[1] > w[0]));
    }

    #[test]
    fn simpson_exact_on_cubics() {
        for n in [11, 21, 101] {
            let g = Grid::uniform(n).unwrap();
            for (p, exact) in [(0, 1.0), (1, 0.5), (2, 1.0 / 3.0), (3, 0.25)] {
                let v: Vec<f64> = g.nodes().iter().map(|z| z.powi(p)).collect();
                assert_abs_diff_eq!(g.integrate(&v), exact, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn inner_product_examples() {
        let g = grid();
        let one = StateProfile::constant(&g, 1.0);
        let basis = CosineBasis::new(&g, 2);
        assert_abs_diff_eq!(inner_product(&one, &one).unwrap(), 1.0, epsilon = 1e-14);
        assert_abs_diff_eq!(inner_product(basis.get(2), basis.get(2)).unwrap(), 1.0, epsilon = 1e-6);
        assert_abs_diff_eq!(inner_product(basis.get(2), &one).unwrap(), 0.0, epsilon = 1e-10);
    }

    #[test]
    fn grid_mismatch_is_an_error() {
        let a = StateProfile::constant(&Grid::uniform(11).unwrap(), 1.0);
        let b = StateProfile::constant(&Grid::uniform(21).unwrap(), 1.0);
        assert!(matches!(inner_product(&a, &b), Err(Error::GridMismatch { .. })));
    }

    #[test]
    fn cosine_gram_is_identity() {
        let gram = CosineBasis::new(&grid(), 8).gram_matrix();
        let id = nalgebra::DMatrix::<f64>::identity(8, 8);
        assert!((gram - id).amax() < 1e-6);
    }

    #[test]
    fn ic_golden_value() {
        let s = IcShape::default();
        let g = make_ic_g(s.amp, s.freq, s.phase, &grid()).unwrap();
        assert_abs_diff_eq!(g.sup_norm(), G_SUP_NORM, epsilon = 1e-14);
        assert_abs_diff_eq!(g.values()[0].abs(), g.sup_norm(), epsilon = 1e-15);
        assert!(make_ic_g(0.8, 0.0, 0.5, &grid()).is_err());
    }

    #[test]
    fn ic_slope_matches_difference_of_closed_form() {
        let s = IcShape::default();
        for z in [0.1, 0.37, 0.8] {
            let e = 1e-6;
            let fd = (s.value(z + e) - s.value(z - e)) / (2.0 * e);
            assert_abs_diff_eq!(fd, s.slope(z), epsilon = 1e-8);
        }
        assert_eq!(s.slope(0.0), 0.0);
        assert_eq!(s.slope(1.0), 0.0);
    }

    fn boundary_slopes(n: usize) -> (f64, f64) {
        let grid = Grid::uniform(n).unwrap();
        let s = IcShape::default();
        let g = make_ic_g(s.amp, s.freq, s.phase, &grid).unwrap();
        let v = g.values();
        let h = grid.spacing();
        let m = v.len();
        let left = (-3.0 * v[0] + 4.0 * v[1] - v[2]) / (2.0 * h);
        let right = (3.0 * v[m - 1] - 4.0 * v[m - 2] + v[m - 3]) / (2.0 * h);
        (left, right)
    }

    #[test]
    fn ic_neumann_slopes_are_second_order() {
        let (l1, r1) = boundary_slopes(51);
        let (l2, r2) = boundary_slopes(101);
        let (l3, r3) = boundary_slopes(201);
        assert!(l2.abs() < 1e-3 && r2.abs() < 1e-3);
        for ratio in [l1 / l2, l2 / l3, r1 / r2, r2 / r3] {
            assert!((3.5..4.5).contains(&ratio), "ratio {ratio}");
        }
    }

    #[test]
    fn ic_coefficients_golden() {
        let s = IcShape::default();
        let sampler = IcSampler::from_shape(&grid(), &s, 5, 0.0).unwrap();
        let expected: [f64; 5] = [3.17577354e-1, 4.17509461e-2, -2.12352905e-3, 2.46575170e-5, -1.17978118e-4];
        for (c, e) in sampler.center().iter().zip(expected) {
            assert_abs_diff_eq!(*c, e, epsilon = 2e-8 * e.abs());
        }
    }

    #[test]
    fn random_ic_zero_width_is_center() {
        let s = IcShape::default();
        let sampler = IcSampler::from_shape(&grid(), &s, 5, 0.0).unwrap();
        let x = random_ic(sampler.basis(), sampler.center(), 0.0, 7).unwrap();
        assert_eq!(x, sampler.center_profile());
    }

    #[test]
    fn random_ic_is_deterministic_and_boxed() {
        let s = IcShape::default();
        let sampler = IcSampler::from_shape(&grid(), &s, 5, 0.04).unwrap();
        let a = random_ic(sampler.basis(), sampler.center(), 0.04, 42).unwrap();
        let b = random_ic(sampler.basis(), sampler.center(), 0.04, 42).unwrap();
        assert_eq!(a, b);
        let mut rng = seeded_rng(3);
        for _ in 0..200 {
            let c = sampler.draw_coefficients(&mut rng);
            for (ci, gi) in c.iter().zip(sampler.center()) {
                assert!((ci - gi).abs() <= 0.04);
            }
            let x = sampler.basis().synthesize(&c);
            let back = sampler.basis().coefficients(&x).unwrap();
            for (bi, gi) in back.iter().zip(sampler.center()) {
                assert!((bi - gi).abs() <= 0.04 + 1e-5);
            }
        }
    }

    #[test]
    fn unit_uniform_range() {
        let mut rng = seeded_rng(0);
        for _ in 0..1000 {
            let u = unit_uniform(&mut rng);
            assert!((0.0..1.0).contains(&u));
        }
    }
}
