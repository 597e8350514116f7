//! Simulated energy measurement: per-region power surfaces over the grid, a
//! static platform offset and multiplicative measurement noise.

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::freqspace::{ConfigState, FrequencyGrid};
use crate::rng::{rng_from_seed, SimRng};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EnergyError {
    #[error("power table is {rows}x{cols}, grid is {core}x{uncore}")]
    TableShape {
        rows: usize,
        cols: usize,
        core: usize,
        uncore: usize,
    },
    #[error("power must be strictly positive and finite, got {0} W")]
    NonPositivePower(f64),
    #[error("bowl curvature must be positive, got core={0} uncore={1}")]
    BadCurvature(f64, f64),
    #[error("invalid {0}: {1}")]
    BadParameter(&'static str, f64),
}

/// Energy measured over one region invocation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EnergySample {
    pub joules: f64,
    pub duration_ms: f64,
    pub state: ConfigState,
}

/// Frequency-dependent power draw of one region (excluding the static offset).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EnergySurface {
    /// `base_w + curv_core·(f_c − c*)² + curv_uncore·(f_u − u*)²`
    Bowl {
        min_core_ghz: f64,
        min_uncore_ghz: f64,
        curv_core: f64,
        curv_uncore: f64,
        base_w: f64,
    },
    /// Explicit watts per grid point, indexed `[core][uncore]`.
    Table { powers_w: Vec<Vec<f64>> },
}

impl EnergySurface {
    pub fn validate(&self, grid: &FrequencyGrid) -> Result<(), EnergyError> {
        match self {
            EnergySurface::Bowl {
                curv_core,
                curv_uncore,
                base_w,
                min_core_ghz,
                min_uncore_ghz,
            } => {
                if !(*curv_core > 0.0 && *curv_uncore > 0.0) {
                    return Err(EnergyError::BadCurvature(*curv_core, *curv_uncore));
                }
                if !(*base_w > 0.0 && base_w.is_finite()) {
                    return Err(EnergyError::NonPositivePower(*base_w));
                }
                for (name, v) in [("min_core_ghz", min_core_ghz), ("min_uncore_ghz", min_uncore_ghz)] {
                    if !v.is_finite() {
                        return Err(EnergyError::BadParameter(name, *v));
                    }
                }
                Ok(())
            }
            EnergySurface::Table { powers_w } => {
                let rows = powers_w.len();
                let cols = powers_w.first().map_or(0, Vec::len);
                if rows != grid.core_count() || powers_w.iter().any(|r| r.len() != grid.uncore_count()) {
                    return Err(EnergyError::TableShape {
                        rows,
                        cols,
                        core: grid.core_count(),
                        uncore: grid.uncore_count(),
                    });
                }
                match powers_w.iter().flatten().find(|p| !(**p > 0.0 && p.is_finite())) {
                    Some(p) => Err(EnergyError::NonPositivePower(*p)),
                    None => Ok(()),
                }
            }
        }
    }
}

/// Deterministic power at `s` (no offset, no noise).
pub fn surface_power(surface: &EnergySurface, s: ConfigState, grid: &FrequencyGrid) -> f64 {
    match surface {
        EnergySurface::Bowl {
            min_core_ghz,
            min_uncore_ghz,
            curv_core,
            curv_uncore,
            base_w,
        } => {
            let dc = grid.core_ghz(s) - min_core_ghz;
            let du = grid.uncore_ghz(s) - min_uncore_ghz;
            base_w + curv_core * dc * dc + curv_uncore * du * du
        }
        EnergySurface::Table { powers_w } => powers_w[s.core_idx][s.uncore_idx],
    }
}

/// Per-invocation runtime as a function of the configuration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RuntimeModel {
    #[default]
    Constant,
    /// A `sensitivity` share of the runtime scales with `ref_core_ghz / f_core`.
    InverseCore { sensitivity: f64, ref_core_ghz: f64 },
}

impl RuntimeModel {
    pub fn validate(&self) -> Result<(), EnergyError> {
        match *self {
            RuntimeModel::Constant => Ok(()),
            RuntimeModel::InverseCore {
                sensitivity,
                ref_core_ghz,
            } => {
                if !(0.0..=1.0).contains(&sensitivity) {
                    return Err(EnergyError::BadParameter("sensitivity", sensitivity));
                }
                if !(ref_core_ghz > 0.0 && ref_core_ghz.is_finite()) {
                    return Err(EnergyError::BadParameter("ref_core_ghz", ref_core_ghz));
                }
                Ok(())
            }
        }
    }

    pub fn duration_ms(&self, base_ms: f64, s: ConfigState, grid: &FrequencyGrid) -> f64 {
        match *self {
            RuntimeModel::Constant => base_ms,
            RuntimeModel::InverseCore {
                sensitivity,
                ref_core_ghz,
            } => base_ms * ((1.0 - sensitivity) + sensitivity * ref_core_ghz / grid.core_ghz(s)),
        }
    }
}

/// Everything needed to turn a configuration into joules for one region.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionEnergy {
    pub surface: EnergySurface,
    pub duration_ms: f64,
    #[serde(default)]
    pub runtime: RuntimeModel,
}

impl RegionEnergy {
    pub fn new(surface: EnergySurface, duration_ms: f64) -> Self {
        Self {
            surface,
            duration_ms,
            runtime: RuntimeModel::Constant,
        }
    }

    pub fn validate(&self, grid: &FrequencyGrid) -> Result<(), EnergyError> {
        if !(self.duration_ms > 0.0 && self.duration_ms.is_finite()) {
            return Err(EnergyError::BadParameter("duration_ms", self.duration_ms));
        }
        self.runtime.validate()?;
        self.surface.validate(grid)
    }

    pub fn duration_at(&self, s: ConfigState, grid: &FrequencyGrid) -> f64 {
        self.runtime.duration_ms(self.duration_ms, s, grid)
    }

    /// Energy without noise, including the static offset.
    pub fn noiseless_joules(&self, s: ConfigState, grid: &FrequencyGrid, static_offset_w: f64) -> f64 {
        (surface_power(&self.surface, s, grid) + static_offset_w) * self.duration_at(s, grid) / 1000.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeterConfig {
    #[serde(default = "default_offset")]
    pub static_offset_w: f64,
    #[serde(default = "default_noise")]
    pub noise_sigma_rel: f64,
}

fn default_offset() -> f64 {
    70.0
}

fn default_noise() -> f64 {
    0.005
}

impl Default for MeterConfig {
    fn default() -> Self {
        Self {
            static_offset_w: default_offset(),
            noise_sigma_rel: default_noise(),
        }
    }
}

impl MeterConfig {
    pub fn noiseless() -> Self {
        Self {
            noise_sigma_rel: 0.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), EnergyError> {
        if !(self.static_offset_w >= 0.0 && self.static_offset_w.is_finite()) {
            return Err(EnergyError::BadParameter("static_offset_w", self.static_offset_w));
        }
        if !(self.noise_sigma_rel >= 0.0 && self.noise_sigma_rel.is_finite()) {
            return Err(EnergyError::BadParameter("noise_sigma_rel", self.noise_sigma_rel));
        }
        Ok(())
    }
}

/// Simulated energy counter. Owns its noise stream.
#[derive(Debug, Clone)]
pub struct Meter {
    config: MeterConfig,
    noise: Option<Normal<f64>>,
    rng: SimRng,
}

impl Meter {
    pub fn new(config: MeterConfig, seed: u64) -> Self {
        Self::with_rng(config, rng_from_seed(seed))
    }

    pub fn with_rng(config: MeterConfig, rng: SimRng) -> Self {
        let noise = (config.noise_sigma_rel > 0.0)
            .then(|| Normal::new(0.0, config.noise_sigma_rel).expect("sigma validated"));
        Self { config, noise, rng }
    }

    pub fn config(&self) -> &MeterConfig {
        &self.config
    }

    pub fn rng(&self) -> &SimRng {
        &self.rng
    }

    pub fn measure(&mut self, region: &RegionEnergy, s: ConfigState, grid: &FrequencyGrid) -> EnergySample {
        let duration_ms = region.duration_at(s, grid);
        let clean = region.noiseless_joules(s, grid, self.config.static_offset_w);
        let factor = match &self.noise {
            Some(n) => 1.0 + n.sample(&mut self.rng),
            None => 1.0,
        };
        EnergySample {
            joules: (clean * factor).max(0.0),
            duration_ms,
            state: s,
        }
    }
}

/// Exhaustive scan for the lowest noiseless energy. Ties go to the lowest core
/// index, then the lowest uncore index.
pub fn optimum_state(region: &RegionEnergy, grid: &FrequencyGrid, static_offset_w: f64) -> (ConfigState, f64) {
    let mut best = (ConfigState::new(0, 0), f64::INFINITY);
    for s in grid.states() {
        let e = region.noiseless_joules(s, grid, static_offset_w);
        if e < best.1 {
            best = (s, e);
        }
    }
    best
}
