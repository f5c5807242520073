//! Experiment configuration. Every field has a default; the defaults are the
//! reaction-diffusion benchmark run end to end.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::dictionary::{default_specs, ObservableSpec};
use crate::edmd::SelectionOptions;
use crate::error::{Error, Result};
use crate::spatial::{IcShape, IntervalBox};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PlantConfig {
    pub rho: f64,
    pub a: f64,
    /// `f(x) = Σ_j c_j x^j`.
    pub f_coeffs: Vec<f64>,
}

impl Default for PlantConfig {
    fn default() -> Self {
        Self {
            rho: 1.0,
            a: 0.5,
            f_coeffs: vec![0.0, 0.0, 0.5],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverConfig {
    pub rtol: f64,
    pub atol: f64,
    pub max_step: f64,
    pub blowup_norm: f64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            rtol: 1e-8,
            atol: 1e-10,
            max_step: 5e-3,
            blowup_norm: 1e3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub samples: usize,
    pub sampling_time: f64,
    pub seed: u64,
    pub ic: IcShape,
    /// Half width `δ` of the coefficient box.
    pub delta: f64,
    /// Cosine modes carrying the random perturbation.
    pub ic_modes: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            samples: 200,
            sampling_time: 0.1,
            seed: 1,
            ic: IcShape::default(),
            delta: 0.04,
            ic_modes: 5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EdmdConfig {
    pub rank_tol: f64,
    pub n: usize,
    /// Horizon of the validation trajectory from the IC center profile.
    pub selection_horizon: f64,
    pub selection_samples: usize,
    pub selection: SelectionOptions,
    /// Constant IC `x(z, 0)` of the prediction-error test trajectory.
    pub prediction_ic: f64,
    pub prediction_horizon: f64,
}

impl Default for EdmdConfig {
    fn default() -> Self {
        Self {
            rank_tol: 1e-10,
            n: 2,
            selection_horizon: 0.6,
            selection_samples: 60,
            selection: SelectionOptions::default(),
            prediction_ic: 0.8,
            prediction_horizon: 0.6,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RhoConfig {
    pub t0: f64,
    pub u0: f64,
    pub tol_denominator: f64,
    pub average: bool,
}

impl Default for RhoConfig {
    fn default() -> Self {
        Self {
            t0: 0.05,
            u0: 0.1,
            tol_denominator: 1e-8,
            average: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BoxMode {
    /// `lower`/`upper` as given.
    Fixed,
    /// Hull of the lifted training states inflated by 10%.
    Data,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MapChoice {
    PowerSeries,
    Galerkin,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthesisConfig {
    pub targets: Vec<f64>,
    pub d_max: u32,
    pub box_mode: BoxMode,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    /// Gauss points per axis; `0` picks `2(d_max + 1)`.
    pub quadrature: usize,
    pub galerkin_iters: usize,
    pub galerkin_tol: f64,
    /// Map used by the controllers.
    pub deploy: MapChoice,
}

impl Default for SynthesisConfig {
    fn default() -> Self {
        Self {
            targets: vec![-1.0, -12.0],
            d_max: 11,
            box_mode: BoxMode::Fixed,
            lower: vec![-0.65, -0.1],
            upper: vec![0.65, 0.1],
            quadrature: 0,
            galerkin_iters: 30,
            galerkin_tol: 1e-12,
            deploy: MapChoice::PowerSeries,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClosedLoopConfig {
    /// `w(0) = φ̂ₙ[s·g]` for the lifted-model comparison and the linear controller.
    pub bilinear_ic_scale: f64,
    /// `x(0) = s·g` for the PDE closed loop.
    pub pde_ic_scale: f64,
    pub horizon: f64,
    pub dt_out: f64,
    pub bilinear_rtol: f64,
}

impl Default for ClosedLoopConfig {
    fn default() -> Self {
        Self {
            bilinear_ic_scale: 2.4,
            pde_ic_scale: 3.1,
            horizon: 5.0,
            dt_out: 1e-3,
            bilinear_rtol: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub grid_points: usize,
    pub plant: PlantConfig,
    pub solver: SolverConfig,
    pub dictionary: Vec<ObservableSpec>,
    pub data: DataConfig,
    pub edmd: EdmdConfig,
    pub rho: RhoConfig,
    pub synthesis: SynthesisConfig,
    pub closed_loop: ClosedLoopConfig,
    pub output_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            grid_points: 101,
            plant: PlantConfig::default(),
            solver: SolverConfig::default(),
            dictionary: default_specs(),
            data: DataConfig::default(),
            edmd: EdmdConfig::default(),
            rho: RhoConfig::default(),
            synthesis: SynthesisConfig::default(),
            closed_loop: ClosedLoopConfig::default(),
            output_dir: PathBuf::from("out"),
        }
    }
}

fn check(cond: bool, msg: impl FnOnce() -> String) -> Result<()> {
    if cond {
        Ok(())
    } else {
        Err(Error::Config(msg()))
    }
}

impl ExperimentConfig {
    pub fn from_toml(s: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(s).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        check(self.grid_points >= 11 && self.grid_points % 2 == 1, || {
            format!("grid_points must be odd and at least 11, got {}", self.grid_points)
        })?;
        check(self.plant.rho > 0.0, || "plant.rho must be positive".into())?;
        check(self.solver.rtol > 0.0 && self.solver.atol > 0.0 && self.solver.max_step > 0.0, || {
            "solver tolerances and max_step must be positive".into()
        })?;
        check(!self.dictionary.is_empty(), || "dictionary must not be empty".into())?;
        check(self.data.samples > 0, || "data.samples must be positive".into())?;
        check(self.data.sampling_time > 0.0, || "data.sampling_time must be positive".into())?;
        check(self.data.delta >= 0.0 && self.data.ic_modes > 0, || "data.delta and data.ic_modes are invalid".into())?;
        let n = self.edmd.n;
        check(n >= 1 && n <= self.dictionary.len(), || format!("edmd.n = {n} is out of range"))?;
        check(self.synthesis.targets.len() == n, || {
            format!("{} target eigenvalues for n = {n}", self.synthesis.targets.len())
        })?;
        check(self.synthesis.d_max >= 2, || "synthesis.d_max must be at least 2".into())?;
        if self.synthesis.box_mode == BoxMode::Fixed {
            check(self.synthesis.lower.len() == n && self.synthesis.upper.len() == n, || {
                "synthesis.lower/upper must have n entries".into()
            })?;
            IntervalBox::new(self.synthesis.lower.clone(), self.synthesis.upper.clone())
                .map_err(|e| Error::Config(e.to_string()))?;
        }
        let q = self.synthesis.quadrature;
        check(q == 0 || q > self.synthesis.d_max as usize, || {
            "synthesis.quadrature must exceed d_max".into()
        })?;
        check(self.rho.u0 != 0.0 && self.rho.t0 >= 0.0, || "rho.u0 must be nonzero".into())?;
        check(self.closed_loop.horizon > 0.0 && self.closed_loop.dt_out > 0.0, || {
            "closed_loop horizon and dt_out must be positive".into()
        })?;
        Ok(())
    }

    pub fn quadrature_order(&self) -> usize {
        match self.synthesis.quadrature {
            0 => crate::control::default_quadrature_order(self.synthesis.d_max),
            q => q,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        let cfg = ExperimentConfig::default();
        cfg.validate().unwrap();
        let text = cfg.to_toml().unwrap();
        assert_eq!(ExperimentConfig::from_toml(&text).unwrap(), cfg);
        assert_eq!(ExperimentConfig::from_toml("").unwrap(), cfg);
        assert_eq!(cfg.quadrature_order(), 24);
    }

    #[test]
    fn partial_and_bad_files() {
        let cfg = ExperimentConfig::from_toml("grid_points = 51\n[data]\nseed = 7\n").unwrap();
        assert_eq!(cfg.grid_points, 51);
        assert_eq!(cfg.data.seed, 7);
        assert_eq!(cfg.data.samples, 200);
        assert!(matches!(ExperimentConfig::from_toml("grid_points = 50"), Err(Error::Config(_))));
        assert!(matches!(ExperimentConfig::from_toml("typo = 1"), Err(Error::Config(_))));
        assert!(matches!(
            ExperimentConfig::from_toml("[synthesis]\ntargets = [-1.0]"),
            Err(Error::Config(_))
        ));
    }
}
