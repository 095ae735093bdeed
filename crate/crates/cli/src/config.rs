//! Versioned experiment configuration.

use std::path::{Path, PathBuf};

use platoon_core::ovm::{self, ParamSpread, VehicleParams};
use platoon_core::platoon::{neighbor_set, PerformanceWeights, Road};
use platoon_core::sim::{Disturbance, InitialState, Scenario};
use serde::Deserialize;

pub const CONFIG_VERSION: u32 = 1;

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub version: u32,
    pub platoon: PlatoonConfig,
    #[serde(default)]
    pub simulation: Option<SimulationConfig>,
    #[serde(default)]
    pub synthesis: SynthesisConfig,
    /// Controller JSON used by `simulate` and `sweep`, relative to the
    /// config file.
    #[serde(default)]
    pub controller_file: Option<PathBuf>,
    #[serde(default)]
    pub sweep: SweepConfig,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlatoonConfig {
    pub n_vehicles: usize,
    pub road: Road,
    pub v_star_mps: f64,
    pub drivers: Drivers,
    /// Vehicles visible to the controller; defaults to vehicle 1 and
    /// `neighbors` vehicles on each side.
    #[serde(default)]
    pub observed: Option<Vec<usize>>,
    #[serde(default = "default_neighbors")]
    pub neighbors: usize,
    #[serde(default = "PerformanceWeights::ring_default")]
    pub weights: PerformanceWeights,
}

fn default_neighbors() -> usize {
    5
}

#[derive(Debug, Clone, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Drivers {
    /// Every vehicle uses `params`.
    Homogeneous { params: VehicleParams },
    /// `base ± spread`, drawn independently per vehicle.
    Sampled { base: VehicleParams, spread: ParamSpread, seed: u64 },
    /// One entry per vehicle, vehicle 1 first.
    Explicit { params: Vec<VehicleParams> },
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulationConfig {
    pub init: InitialState,
    #[serde(default)]
    pub disturbances: Vec<Disturbance>,
    pub horizon_s: f64,
    #[serde(default = "default_dt")]
    pub dt_s: f64,
    #[serde(default)]
    pub seed: u64,
    /// Write every `csv_stride`-th step to the trajectory CSV.
    #[serde(default = "default_stride")]
    pub csv_stride: usize,
}

fn default_dt() -> f64 {
    0.01
}

fn default_stride() -> usize {
    10
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthesisConfig {
    #[serde(default)]
    pub robust: bool,
    /// Synthesize on the full ring model instead of the reduced one.
    #[serde(default)]
    pub full_ring: bool,
    /// Driver-parameter half-widths for robust synthesis.
    #[serde(default)]
    pub spread: Option<ParamSpread>,
    #[serde(default)]
    pub seed: u64,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    pub accel_mps2: f64,
    pub start_s: f64,
    pub duration_s: f64,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self { accel_mps2: -3.0, start_s: 20.0, duration_s: 3.0 }
    }
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self, String> {
        let cfg: ExperimentConfig = serde_json::from_str(text).map_err(|e| e.to_string())?;
        if cfg.version != CONFIG_VERSION {
            return Err(format!(
                "unsupported config version {} (expected {CONFIG_VERSION})",
                cfg.version
            ));
        }
        cfg.check()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, String> {
        let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
        let mut cfg = Self::parse(&text).map_err(|e| format!("{}: {e}", path.display()))?;
        if let Some(c) = &cfg.controller_file {
            if c.is_relative() {
                let base = path.parent().unwrap_or_else(|| Path::new("."));
                cfg.controller_file = Some(base.join(c));
            }
        }
        Ok(cfg)
    }

    fn check(&self) -> Result<(), String> {
        let p = &self.platoon;
        if p.n_vehicles < 2 {
            return Err(format!("n_vehicles must be >= 2, got {}", p.n_vehicles));
        }
        if let Drivers::Explicit { params } = &p.drivers {
            if params.len() != p.n_vehicles {
                return Err(format!("{} driver entries for {} vehicles", params.len(), p.n_vehicles));
            }
        }
        if let Some(s) = &self.simulation {
            if s.csv_stride == 0 {
                return Err("csv_stride must be >= 1".into());
            }
        }
        if !(self.sweep.duration_s > 0.0 && self.sweep.start_s >= 0.0) {
            return Err("sweep pulse needs start_s >= 0 and duration_s > 0".into());
        }
        Ok(())
    }

    pub fn vehicles(&self) -> Result<Vec<VehicleParams>, String> {
        let n = self.platoon.n_vehicles;
        let params = match &self.platoon.drivers {
            Drivers::Homogeneous { params } => vec![*params; n],
            Drivers::Sampled { base, spread, seed } => ovm::sample_params(base, spread, n, *seed),
            Drivers::Explicit { params } => params.clone(),
        };
        for (i, p) in params.iter().enumerate() {
            p.validate().map_err(|e| format!("vehicle {}: {e}", i + 1))?;
        }
        Ok(params)
    }

    pub fn observed(&self) -> Vec<usize> {
        let n = self.platoon.n_vehicles;
        match &self.platoon.observed {
            Some(o) => o.clone(),
            None => neighbor_set(n, self.platoon.neighbors.min((n - 1) / 2)),
        }
    }

    /// Nominal driver used to build uncertainty ranges.
    pub fn spread(&self) -> ParamSpread {
        self.synthesis.spread.unwrap_or_else(ParamSpread::ring_default)
    }

    pub fn scenario(&self, seed_override: Option<u64>) -> Result<Scenario, String> {
        let s = self
            .simulation
            .as_ref()
            .ok_or("config has no `simulation` section")?;
        Ok(Scenario {
            road: self.platoon.road,
            vehicles: self.vehicles()?,
            v_star_mps: self.platoon.v_star_mps,
            init: s.init.clone(),
            disturbances: s.disturbances.clone(),
            horizon_s: s.horizon_s,
            dt_s: s.dt_s,
            seed: seed_override.unwrap_or(s.seed),
        })
    }
}
