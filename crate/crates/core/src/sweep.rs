//! Detuning sweeps: one full simulation pipeline per grid point.
//!
//! Each point prepares the initial state with an instantaneous pulse from the
//! ground state, evolves the master equation, averages over spectral
//! diffusion, convolves with the detector response and normalizes.

use rayon::prelude::*;
use serde::Serialize;

use crate::analytic::oscillation_frequency;
use crate::ensemble::{
    convolve_irf, diffusion_average, normalize_trace, DiffusionSpec, IrfSpec, Normalization, TimeTrace,
};
use crate::error::{Error, Result};
use crate::liouvillian::{DensityMatrix, DriveSpec, Port};
use crate::model::SystemModel;
use crate::propagate::{
    apply_instant_pulse, evolve_master_with, EvolveOptions, PulseSpec, TimeGrid, Trajectory,
};

/// Everything that turns a system into detector traces.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Pipeline {
    pub pulse: PulseSpec,
    pub drive: DriveSpec,
    pub grid: TimeGrid,
    pub diffusion: Option<DiffusionSpec>,
    pub irf: Option<IrfSpec>,
    pub normalization: Normalization,
}

impl Pipeline {
    pub fn new(pulse: PulseSpec, grid: TimeGrid) -> Self {
        Pipeline {
            pulse,
            drive: DriveSpec::off(),
            grid,
            diffusion: None,
            irf: None,
            normalization: Normalization::None,
        }
    }

    pub fn validate(&self, n_emitters: usize) -> Result<()> {
        self.pulse.validate(n_emitters)?;
        self.drive.validate(n_emitters)?;
        self.grid.validate()?;
        if let Some(d) = &self.diffusion {
            d.validate(n_emitters)?;
        }
        Ok(())
    }
}

/// Output of one pipeline run.
#[derive(Debug, Clone, PartialEq)]
pub struct PointResult {
    /// Diffusion-averaged trajectory before detector effects.
    pub raw: Trajectory,
    /// Processed intensity, right (port 1) and left (port 2).
    pub port1: TimeTrace,
    pub port2: TimeTrace,
}

impl PointResult {
    pub fn trace(&self, port: Port) -> &TimeTrace {
        match port {
            Port::Right => &self.port1,
            Port::Left => &self.port2,
        }
    }
}

fn detector(raw: &[f64], times: &[f64], pipe: &Pipeline) -> Result<TimeTrace> {
    // tiny negative values from round-off are clamped before convolution
    let clamped = raw.iter().map(|&v| v.max(0.0)).collect();
    let mut tr = TimeTrace::new(times.to_vec(), clamped)?;
    if let Some(irf) = &pipe.irf {
        tr = convolve_irf(&tr, irf)?;
    }
    normalize_trace(&tr, pipe.normalization)
}

/// Runs the full pipeline for one system. Sweeps and single simulations both
/// go through here.
pub fn simulate_point(system: &SystemModel, pipe: &Pipeline) -> Result<PointResult> {
    pipe.validate(system.len())?;
    let rho0 = apply_instant_pulse(&DensityMatrix::ground(system.len()), &pipe.pulse)?;
    let opts = EvolveOptions {
        keep_states: false,
        error_estimate: false,
        check_positivity: true,
    };
    let sim = |offsets: &[f64]| {
        let s = system.with_detuning_offsets(offsets)?;
        evolve_master_with(&s, &pipe.drive, &rho0, &pipe.grid, &opts)
    };
    let raw = match &pipe.diffusion {
        Some(spec) => diffusion_average(sim, system.len(), spec)?.trajectory,
        None => sim(&vec![0.0; system.len()])?,
    };
    let port1 = detector(&raw.intensity_right, &raw.times, pipe)?;
    let port2 = detector(&raw.intensity_left, &raw.times, pipe)?;
    Ok(PointResult { raw, port1, port2 })
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepPlan {
    pub system: SystemModel,
    pub swept_emitter: usize,
    /// Detuning Δ_m of the swept emitter, GHz; the others keep theirs.
    pub detunings: Vec<f64>,
    pub pipeline: Pipeline,
    pub ports: Vec<Port>,
}

impl SweepPlan {
    pub fn validate(&self) -> Result<()> {
        if self.detunings.is_empty() {
            return Err(Error::invalid("sweep.detunings", "grid is empty"));
        }
        if self.detunings.iter().any(|d| !d.is_finite()) {
            return Err(Error::invalid("sweep.detunings", "must be finite"));
        }
        if self.detunings.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::invalid("sweep.detunings", "must be strictly increasing"));
        }
        if self.swept_emitter >= self.system.len() {
            return Err(Error::invalid(
                "sweep.emitter",
                format!("index {} out of range for {} emitters", self.swept_emitter, self.system.len()),
            ));
        }
        if self.ports.is_empty() {
            return Err(Error::invalid("ports", "select at least one port"));
        }
        self.pipeline.validate(self.system.len())
    }

    /// Δ_swept − Δ_other for a pair; `None` otherwise.
    fn relative_detuning(&self, d: f64) -> Option<f64> {
        (self.system.len() == 2).then(|| d - self.system.emitter(1 - self.swept_emitter).detuning)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepPopulations {
    pub p_sup: Vec<Vec<f64>>,
    pub p_sub: Vec<Vec<f64>>,
    pub p_ee: Vec<Vec<f64>>,
}

/// Row-major maps: `intensity[p][row][sample]` for `ports[p]`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepMap {
    pub detunings: Vec<f64>,
    pub times: Vec<f64>,
    pub ports: Vec<Port>,
    pub intensity: Vec<Vec<Vec<f64>>>,
    pub populations: Option<SweepPopulations>,
    /// Predicted time of the first maximum after the initial decay, ns.
    pub peak_times: Vec<Option<f64>>,
    pub normalization: Normalization,
}

impl SweepMap {
    pub fn port_map(&self, port: Port) -> Option<&Vec<Vec<f64>>> {
        self.ports.iter().position(|&p| p == port).map(|i| &self.intensity[i])
    }
}

/// Runs every grid point in parallel; rows come back in grid order.
pub fn run_sweep(plan: &SweepPlan) -> Result<SweepMap> {
    plan.validate()?;
    let rows: Vec<PointResult> = plan
        .detunings
        .par_iter()
        .map(|&d| {
            plan.system
                .with_detuning(plan.swept_emitter, d)
                .and_then(|s| simulate_point(&s, &plan.pipeline))
                .map_err(|e| Error::Sweep {
                    detuning_ghz: d,
                    source: Box::new(e),
                })
        })
        .collect::<Result<_>>()?;

    let intensity = plan
        .ports
        .iter()
        .map(|&p| rows.iter().map(|r| r.trace(p).values.clone()).collect())
        .collect();
    let populations = rows[0].raw.populations.is_some().then(|| {
        let col = |f: fn(&crate::liouvillian::CollectivePopulations) -> f64| {
            rows.iter()
                .map(|r| r.raw.populations.as_ref().map_or_else(Vec::new, |p| p.iter().map(f).collect()))
                .collect()
        };
        SweepPopulations {
            p_sup: col(|p| p.p_sup),
            p_sub: col(|p| p.p_sub),
            p_ee: col(|p| p.p_ee),
        }
    });
    let peak_times = plan
        .detunings
        .iter()
        .map(|&d| {
            let delta = plan.relative_detuning(d)?;
            let (a, b) = (plan.swept_emitter, 1 - plan.swept_emitter);
            let j = plan.system.j_mat()[(a, b)];
            let g = plan.system.gamma_mat()[(a, b)];
            oscillation_frequency(delta, j, g).peak_time
        })
        .collect();
    Ok(SweepMap {
        detunings: plan.detunings.clone(),
        times: rows[0].port1.times.clone(),
        ports: plan.ports.clone(),
        intensity,
        populations,
        peak_times,
        normalization: plan.pipeline.normalization,
    })
}
