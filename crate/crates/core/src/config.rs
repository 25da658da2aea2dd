//! JSON run configuration.
//!
//! All frequencies are linear (GHz), times in ns, angles in radians. Unknown
//! keys are rejected; errors carry the JSON path of the offending key.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::ensemble::{DiffusionSpec, IrfSpec, Normalization, OffsetModel, Scheme, APD_FWHM_NS, SNSPD_FWHM_NS};
use crate::error::{Error, Result};
use crate::liouvillian::{DriveSpec, Port};
use crate::model::{build_system, EmitterParams, PhaseLags, SystemModel, ZeemanData};
use crate::propagate::{PulseSpec, TimeGrid};
use crate::sweep::{Pipeline, SweepPlan};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EmitterConfig {
    pub gamma_ghz: f64,
    pub beta: f64,
    #[serde(default)]
    pub detuning_ghz: f64,
    /// Per-emitter spectral diffusion, used when no `diffusion` section is given.
    #[serde(default)]
    pub sigma_sd_ghz: f64,
    #[serde(default)]
    pub gamma_dephase_ghz: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub zeeman: Option<ZeemanData>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum PhiSpec {
    /// Two emitters.
    Scalar(f64),
    Matrix(Vec<Vec<f64>>),
}

/// Exactly one of `phi_rad`, `separations_cells` or `separations_nm`
/// (the latter two with `k_a`); may be empty for a single emitter.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhaseConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub phi_rad: Option<PhiSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub separations_cells: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub separations_nm: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub k_a: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulationConfig {
    #[serde(default)]
    pub t0_ns: f64,
    #[serde(default = "default_t1")]
    pub t1_ns: f64,
    #[serde(default = "default_points")]
    pub n_points: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dt_internal_ns: Option<f64>,
}

fn default_t1() -> f64 {
    8.0
}

fn default_points() -> usize {
    801
}

impl Default for SimulationConfig {
    fn default() -> Self {
        SimulationConfig {
            t0_ns: 0.0,
            t1_ns: default_t1(),
            n_points: default_points(),
            dt_internal_ns: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PulseConfig {
    pub areas_rad: Vec<f64>,
    #[serde(default)]
    pub phases_rad: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DriveConfig {
    pub rabi_ghz: Vec<f64>,
    #[serde(default)]
    pub phase_rad: Vec<f64>,
    pub t_on_ns: f64,
    pub t_off_ns: f64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DiffusionMode {
    #[default]
    Relative,
    Independent,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SchemeKind {
    #[default]
    GaussHermite,
    MonteCarlo,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiffusionConfig {
    #[serde(default)]
    pub mode: DiffusionMode,
    /// Width of the relative-detuning distribution.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sigma_ghz: Option<f64>,
    /// Emitter carrying the relative offset.
    #[serde(default)]
    pub emitter: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sigmas_ghz: Option<Vec<f64>>,
    #[serde(default)]
    pub scheme: SchemeKind,
    #[serde(default = "default_nodes")]
    pub n_nodes: usize,
    #[serde(default = "default_samples")]
    pub n_samples: usize,
    #[serde(default)]
    pub seed: u64,
}

fn default_nodes() -> usize {
    21
}

fn default_samples() -> usize {
    100_000
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum IrfPreset {
    Snspd,
    Apd,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IrfConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fwhm_ns: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub preset: Option<IrfPreset>,
}

impl IrfConfig {
    fn resolve(&self) -> Result<IrfSpec> {
        match (self.fwhm_ns, self.preset) {
            (Some(f), None) => Ok(IrfSpec { fwhm: f }),
            (None, Some(IrfPreset::Snspd)) => Ok(IrfSpec { fwhm: SNSPD_FWHM_NS }),
            (None, Some(IrfPreset::Apd)) => Ok(IrfSpec { fwhm: APD_FWHM_NS }),
            _ => Err(Error::config("irf", "give exactly one of `fwhm_ns` or `preset`")),
        }
    }
}

/// Port selection as used on the command line: `1`, `2` or `both`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum PortSelection {
    #[serde(rename = "1")]
    One,
    #[serde(rename = "2")]
    Two,
    #[default]
    #[serde(rename = "both")]
    Both,
}

impl PortSelection {
    pub fn ports(self) -> Vec<Port> {
        match self {
            PortSelection::One => vec![Port::Right],
            PortSelection::Two => vec![Port::Left],
            PortSelection::Both => vec![Port::Right, Port::Left],
        }
    }
}

impl std::str::FromStr for PortSelection {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "1" => Ok(PortSelection::One),
            "2" => Ok(PortSelection::Two),
            "both" => Ok(PortSelection::Both),
            other => Err(Error::invalid("ports", format!("expected 1, 2 or both, got `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    #[serde(default)]
    pub emitter: usize,
    /// Explicit grid; otherwise `start_ghz`, `stop_ghz` and `n_points`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub detunings_ghz: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub start_ghz: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stop_ghz: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n_points: Option<usize>,
}

impl SweepConfig {
    pub fn grid(&self) -> Result<Vec<f64>> {
        match (&self.detunings_ghz, self.start_ghz, self.stop_ghz, self.n_points) {
            (Some(d), None, None, None) => Ok(d.clone()),
            (None, Some(a), Some(b), Some(n)) => match n {
                0 => Ok(Vec::new()),
                1 => Ok(vec![a]),
                _ => Ok((0..n).map(|k| a + (b - a) * k as f64 / (n - 1) as f64).collect()),
            },
            _ => Err(Error::config(
                "sweep",
                "give either `detunings_ghz` or all of `start_ghz`, `stop_ghz`, `n_points`",
            )),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FitConfig {
    /// Defaults to the first sample after the maximum plus one IRF FWHM.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub t_start_ns: Option<f64>,
    #[serde(default)]
    pub background: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OracleConfig {
    #[serde(default = "default_draws")]
    pub draws: usize,
    #[serde(default = "default_times")]
    pub times: usize,
    #[serde(default = "default_oracle_t")]
    pub t_max_ns: f64,
    #[serde(default = "default_oracle_seed")]
    pub seed: u64,
}

fn default_draws() -> usize {
    200
}

fn default_times() -> usize {
    50
}

fn default_oracle_t() -> f64 {
    3.0
}

fn default_oracle_seed() -> u64 {
    1
}

impl Default for OracleConfig {
    fn default() -> Self {
        OracleConfig {
            draws: default_draws(),
            times: default_times(),
            t_max_ns: default_oracle_t(),
            seed: default_oracle_seed(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub emitters: Vec<EmitterConfig>,
    #[serde(default)]
    pub phases: PhaseConfig,
    #[serde(default)]
    pub simulation: SimulationConfig,
    /// Defaults to a π pulse on emitter 0.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pulse: Option<PulseConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub drive: Option<DriveConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub diffusion: Option<DiffusionConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub irf: Option<IrfConfig>,
    #[serde(default)]
    pub normalize: Normalization,
    #[serde(default)]
    pub ports: PortSelection,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sweep: Option<SweepConfig>,
    #[serde(default)]
    pub fit: FitConfig,
    #[serde(default)]
    pub oracle: OracleConfig,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<RunConfig> {
        let de = &mut serde_json::Deserializer::from_str(text);
        serde_path_to_error::deserialize(de).map_err(|e| {
            let key = e.path().to_string();
            Error::config(key, e.into_inner().to_string())
        })
    }

    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path).map_err(|source| Error::Io {
            path: path.to_path_buf(),
            source,
        })?;
        RunConfig::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn system(&self) -> Result<SystemModel> {
        let n = self.emitters.len();
        if n == 0 {
            return Err(Error::config("emitters", "at least one emitter is required"));
        }
        let emitters = self
            .emitters
            .iter()
            .enumerate()
            .map(|(i, e)| {
                let p = EmitterParams {
                    gamma_total: e.gamma_ghz,
                    beta: e.beta,
                    detuning: e.detuning_ghz,
                    sigma_sd: e.sigma_sd_ghz,
                    gamma_dephase: e.gamma_dephase_ghz,
                    zeeman: e.zeeman,
                };
                p.validate(i).map_err(|err| Error::config(format!("emitters[{i}]"), err.to_string()))?;
                Ok(p)
            })
            .collect::<Result<Vec<_>>>()?;
        let phases = self.phase_lags(n)?;
        build_system(emitters, phases).map_err(|e| Error::config("phases", e.to_string()))
    }

    fn phase_lags(&self, n: usize) -> Result<PhaseLags> {
        let p = &self.phases;
        let wrap = |key: &str, r: Result<PhaseLags>| r.map_err(|e| Error::config(key, e.to_string()));
        let need_k = || p.k_a.ok_or_else(|| Error::config("phases.k_a", "required with separations"));
        match (&p.phi_rad, &p.separations_cells, &p.separations_nm) {
            (None, None, None) if n == 1 => Ok(PhaseLags::single()),
            (Some(PhiSpec::Scalar(phi)), None, None) if n == 2 => Ok(PhaseLags::pair(*phi)),
            (Some(PhiSpec::Scalar(_)), None, None) => {
                Err(Error::config("phases.phi_rad", "a scalar phase needs exactly two emitters"))
            }
            (Some(PhiSpec::Matrix(rows)), None, None) => wrap("phases.phi_rad", PhaseLags::from_rows(rows)),
            (None, Some(s), None) => wrap("phases.separations_cells", PhaseLags::from_separations_cells(s, need_k()?)),
            (None, None, Some(s)) => wrap("phases.separations_nm", PhaseLags::from_separations_nm(s, need_k()?)),
            _ => Err(Error::config(
                "phases",
                "give exactly one of `phi_rad`, `separations_cells`, `separations_nm`",
            )),
        }
    }

    pub fn grid(&self) -> Result<TimeGrid> {
        let s = &self.simulation;
        let g = TimeGrid::new(s.t0_ns, s.t1_ns, s.n_points).map_err(|e| Error::config("simulation", e.to_string()))?;
        match s.dt_internal_ns {
            Some(dt) => g.with_step(dt).map_err(|e| Error::config("simulation.dt_internal_ns", e.to_string())),
            None => Ok(g),
        }
    }

    fn pulse(&self, n: usize) -> Result<PulseSpec> {
        let pulse = match &self.pulse {
            None => PulseSpec::pi_on(0, n),
            Some(p) => {
                let phases = if p.phases_rad.is_empty() { vec![0.0; p.areas_rad.len()] } else { p.phases_rad.clone() };
                PulseSpec::new(p.areas_rad.clone(), phases)
            }
        };
        pulse.validate(n).map_err(|e| Error::config("pulse", e.to_string()))?;
        Ok(pulse)
    }

    fn drive(&self, n: usize) -> Result<DriveSpec> {
        let drive = match &self.drive {
            None => DriveSpec::off(),
            Some(d) => {
                let phase = if d.phase_rad.is_empty() { vec![0.0; d.rabi_ghz.len()] } else { d.phase_rad.clone() };
                DriveSpec::square(d.rabi_ghz.clone(), phase, d.t_on_ns, d.t_off_ns)
            }
        };
        drive.validate(n).map_err(|e| Error::config("drive", e.to_string()))?;
        Ok(drive)
    }

    fn diffusion(&self, n: usize) -> Result<Option<DiffusionSpec>> {
        let Some(d) = &self.diffusion else {
            let sigmas: Vec<f64> = self.emitters.iter().map(|e| e.sigma_sd_ghz).collect();
            if sigmas.iter().all(|&s| s == 0.0) {
                return Ok(None);
            }
            return Ok(Some(DiffusionSpec {
                offsets: OffsetModel::Independent { sigmas },
                scheme: Scheme::default(),
            }));
        };
        let offsets = match (d.mode, d.sigma_ghz, &d.sigmas_ghz) {
            (DiffusionMode::Relative, Some(sigma), None) => OffsetModel::Relative {
                sigma,
                emitter: d.emitter,
            },
            (DiffusionMode::Independent, None, Some(s)) => OffsetModel::Independent { sigmas: s.clone() },
            (DiffusionMode::Relative, _, _) => {
                return Err(Error::config("diffusion.sigma_ghz", "relative mode takes `sigma_ghz` only"))
            }
            (DiffusionMode::Independent, _, _) => {
                return Err(Error::config("diffusion.sigmas_ghz", "independent mode takes `sigmas_ghz` only"))
            }
        };
        let scheme = match d.scheme {
            SchemeKind::GaussHermite => Scheme::GaussHermite { n_nodes: d.n_nodes },
            SchemeKind::MonteCarlo => Scheme::MonteCarlo {
                seed: d.seed,
                n_samples: d.n_samples,
            },
        };
        let spec = DiffusionSpec { offsets, scheme };
        spec.validate(n).map_err(|e| Error::config("diffusion", e.to_string()))?;
        Ok(Some(spec))
    }

    pub fn irf(&self) -> Result<Option<IrfSpec>> {
        self.irf.as_ref().map(IrfConfig::resolve).transpose()
    }

    pub fn pipeline(&self) -> Result<Pipeline> {
        let n = self.emitters.len();
        Ok(Pipeline {
            pulse: self.pulse(n)?,
            drive: self.drive(n)?,
            grid: self.grid()?,
            diffusion: self.diffusion(n)?,
            irf: self.irf()?,
            normalization: self.normalize,
        })
    }

    pub fn sweep_plan(&self) -> Result<SweepPlan> {
        let sweep = self
            .sweep
            .as_ref()
            .ok_or_else(|| Error::config("sweep", "section is required for a sweep"))?;
        let system = self.system()?;
        if sweep.emitter >= system.len() {
            return Err(Error::config("sweep.emitter", "index out of range"));
        }
        let detunings = sweep.grid()?;
        let plan = SweepPlan {
            system,
            swept_emitter: sweep.emitter,
            detunings,
            pipeline: self.pipeline()?,
            ports: self.ports.ports(),
        };
        plan.validate().map_err(|e| Error::config("sweep", e.to_string()))?;
        Ok(plan)
    }
}
