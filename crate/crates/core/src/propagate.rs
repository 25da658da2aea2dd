//! Time evolution: fixed-step RK4 for the master equation, exact
//! single-excitation propagation under the effective Hamiltonian, and
//! instantaneous rotation pulses.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::liouvillian::{
    collective_populations, intensity_from_weights, port_weights, CollectivePopulations,
    DensityMatrix, DriveSpec, Generator, Port,
};
use crate::model::{effective_hamiltonian, SystemModel};

/// Default bound on ω_max·dt for the RK4 step.
pub const MAX_PHASE_PER_STEP: f64 = 0.1;
/// Abort threshold for negative eigenvalues during integration.
pub const POSITIVITY_ABORT: f64 = -1e-6;
/// Eigenvector condition number above which the propagator falls back to
/// the matrix exponential.
const EIGEN_CONDITION_LIMIT: f64 = 1e6;

const ZERO: Complex64 = Complex64::new(0.0, 0.0);

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimeGrid {
    pub t0: f64,
    pub t1: f64,
    pub n_points: usize,
    /// Integration step in ns; chosen from the generator when absent.
    pub dt_internal: Option<f64>,
}

impl TimeGrid {
    pub fn new(t0: f64, t1: f64, n_points: usize) -> Result<Self> {
        let g = TimeGrid {
            t0,
            t1,
            n_points,
            dt_internal: None,
        };
        g.validate()?;
        Ok(g)
    }

    pub fn with_step(mut self, dt: f64) -> Result<Self> {
        self.dt_internal = Some(dt);
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.t0.is_finite() && self.t1.is_finite() && self.t1 > self.t0) {
            return Err(Error::invalid("grid", "need t0 < t1"));
        }
        if self.n_points < 2 {
            return Err(Error::invalid("grid.n_points", "need at least 2 samples"));
        }
        if let Some(dt) = self.dt_internal {
            if !(dt > 0.0 && dt <= self.spacing() * (1.0 + 1e-12)) {
                return Err(Error::invalid(
                    "grid.dt_internal",
                    "must be positive and no larger than the sample spacing",
                ));
            }
        }
        Ok(())
    }

    pub fn spacing(&self) -> f64 {
        (self.t1 - self.t0) / (self.n_points - 1) as f64
    }

    pub fn times(&self) -> Vec<f64> {
        let h = self.spacing();
        (0..self.n_points).map(|k| self.t0 + k as f64 * h).collect()
    }

    /// Substeps per sample interval so that ω_max·dt ≤ [`MAX_PHASE_PER_STEP`]
    /// (or the explicit step, rounded down to divide the spacing).
    fn substeps(&self, max_rate: f64) -> usize {
        let target = match self.dt_internal {
            Some(dt) => dt,
            None if max_rate > 0.0 => MAX_PHASE_PER_STEP / max_rate,
            None => self.spacing(),
        };
        ((self.spacing() / target) * (1.0 - 1e-12)).ceil().max(1.0) as usize
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize)]
pub struct Diagnostics {
    pub dt_internal: f64,
    /// Richardson estimate of the RK4 state error, max-abs over samples.
    pub step_error: Option<f64>,
    pub max_trace_deviation: f64,
    pub max_hermiticity_error: f64,
    pub min_eigenvalue: f64,
    /// Set when the single-excitation propagator could not diagonalize H_eff.
    pub expm_fallback: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub states: Option<Vec<DensityMatrix>>,
    /// Single-excitation amplitudes in emitter order.
    pub amplitudes: Option<Vec<DVector<Complex64>>>,
    /// GHz; multiply by 2π for photons per ns.
    pub intensity_left: Vec<f64>,
    pub intensity_right: Vec<f64>,
    /// Present for two emitters only.
    pub populations: Option<Vec<CollectivePopulations>>,
    /// Σ_m ⟨σ_m^+σ_m^-⟩.
    pub excitation: Vec<f64>,
    pub diagnostics: Diagnostics,
}

impl Trajectory {
    pub fn intensity(&self, port: Port) -> &[f64] {
        match port {
            Port::Left => &self.intensity_left,
            Port::Right => &self.intensity_right,
        }
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    /// Photons emitted into `port` over the trajectory (trapezoid rule).
    pub fn emitted_photons(&self, port: Port) -> f64 {
        let i = self.intensity(port);
        let sum: f64 = self
            .times
            .windows(2)
            .zip(i.windows(2))
            .map(|(t, y)| 0.5 * (t[1] - t[0]) * (y[0] + y[1]))
            .sum();
        crate::model::angular(sum)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvolveOptions {
    pub keep_states: bool,
    pub error_estimate: bool,
    pub check_positivity: bool,
}

impl Default for EvolveOptions {
    fn default() -> Self {
        EvolveOptions {
            keep_states: false,
            error_estimate: true,
            check_positivity: true,
        }
    }
}

impl EvolveOptions {
    /// Settings for bulk runs inside averages and sweeps.
    pub fn fast() -> Self {
        EvolveOptions {
            keep_states: false,
            error_estimate: false,
            check_positivity: false,
        }
    }
}

fn axpy(y: &mut DMatrix<Complex64>, a: Complex64, x: &DMatrix<Complex64>) {
    for (yi, xi) in y.iter_mut().zip(x.iter()) {
        *yi += a * xi;
    }
}

struct Rk4 {
    k1: DMatrix<Complex64>,
    k2: DMatrix<Complex64>,
    k3: DMatrix<Complex64>,
    k4: DMatrix<Complex64>,
    tmp: DMatrix<Complex64>,
}

impl Rk4 {
    fn new(dim: usize) -> Self {
        let z = || DMatrix::zeros(dim, dim);
        Rk4 {
            k1: z(),
            k2: z(),
            k3: z(),
            k4: z(),
            tmp: z(),
        }
    }

    /// One classical RK4 step. The generator only changes at drive edges, so
    /// it is sampled once at the step midpoint; steps must not straddle an
    /// edge (see [`Rk4::advance`]).
    fn step(&mut self, gen: &Generator, t: f64, h: f64, y: &mut DMatrix<Complex64>) {
        let half = Complex64::new(0.5 * h, 0.0);
        let tm = t + 0.5 * h;
        gen.apply_into(tm, y, &mut self.k1);
        self.tmp.copy_from(y);
        axpy(&mut self.tmp, half, &self.k1);
        gen.apply_into(tm, &self.tmp, &mut self.k2);
        self.tmp.copy_from(y);
        axpy(&mut self.tmp, half, &self.k2);
        gen.apply_into(tm, &self.tmp, &mut self.k3);
        self.tmp.copy_from(y);
        axpy(&mut self.tmp, Complex64::new(h, 0.0), &self.k3);
        gen.apply_into(tm, &self.tmp, &mut self.k4);
        let sixth = Complex64::new(h / 6.0, 0.0);
        let third = Complex64::new(h / 3.0, 0.0);
        axpy(y, sixth, &self.k1);
        axpy(y, third, &self.k2);
        axpy(y, third, &self.k3);
        axpy(y, sixth, &self.k4);
    }

    /// Step from `t` to `t + h`, split at any drive edge strictly inside.
    fn advance(&mut self, gen: &Generator, t: f64, h: f64, y: &mut DMatrix<Complex64>) {
        let end = t + h;
        let mut a = t;
        for e in gen.switch_times() {
            if e > a + 1e-12 * h && e < end - 1e-12 * h {
                self.step(gen, a, e - a, y);
                a = e;
            }
        }
        self.step(gen, a, end - a, y);
    }
}

/// Integrates `steps` RK4 steps of size `(t1 − t0)/steps` in place.
pub fn integrate_rk4(gen: &Generator, rho: &mut DMatrix<Complex64>, t0: f64, t1: f64, steps: usize) {
    let h = (t1 - t0) / steps as f64;
    let mut rk = Rk4::new(gen.dim());
    for s in 0..steps {
        rk.advance(gen, t0 + s as f64 * h, h, rho);
    }
}

fn run_rk4(
    gen: &Generator,
    rho0: &DMatrix<Complex64>,
    grid: &TimeGrid,
    substeps: usize,
    mut visit: impl FnMut(usize, f64, &DMatrix<Complex64>) -> Result<()>,
) -> Result<()> {
    let times = grid.times();
    let h = grid.spacing() / substeps as f64;
    let mut rk = Rk4::new(gen.dim());
    let mut y = rho0.clone();
    visit(0, times[0], &y)?;
    for k in 1..times.len() {
        let start = times[k - 1];
        for s in 0..substeps {
            rk.advance(gen, start + s as f64 * h, h, &mut y);
        }
        if y.iter().any(|z| !z.re.is_finite() || !z.im.is_finite()) {
            return Err(Error::NonFinite {
                context: format!("master-equation state at t = {} ns", times[k]),
            });
        }
        visit(k, times[k], &y)?;
    }
    Ok(())
}

fn check_dims(system: &SystemModel, rho0: &DensityMatrix) -> Result<()> {
    if rho0.num_emitters() != system.len() {
        return Err(Error::DimensionMismatch {
            expected: system.len(),
            found: rho0.num_emitters(),
            context: "initial state vs emitter count",
        });
    }
    Ok(())
}

pub fn evolve_master(
    system: &SystemModel,
    drive: &DriveSpec,
    rho0: &DensityMatrix,
    grid: &TimeGrid,
) -> Result<Trajectory> {
    evolve_master_with(system, drive, rho0, grid, &EvolveOptions::default())
}

pub fn evolve_master_with(
    system: &SystemModel,
    drive: &DriveSpec,
    rho0: &DensityMatrix,
    grid: &TimeGrid,
    opts: &EvolveOptions,
) -> Result<Trajectory> {
    grid.validate()?;
    check_dims(system, rho0)?;
    rho0.validate(grid.t0)?;
    let gen = Generator::new(system, drive)?;
    let substeps = grid.substeps(gen.max_rate());
    let n = system.len();
    let (wl, wr) = (port_weights(system, Port::Left), port_weights(system, Port::Right));
    let trace0 = rho0.trace();

    let cap = grid.n_points;
    let mut out = Trajectory {
        times: Vec::with_capacity(cap),
        states: opts.keep_states.then(|| Vec::with_capacity(cap)),
        amplitudes: None,
        intensity_left: Vec::with_capacity(cap),
        intensity_right: Vec::with_capacity(cap),
        populations: (n == 2).then(|| Vec::with_capacity(cap)),
        excitation: Vec::with_capacity(cap),
        diagnostics: Diagnostics {
            dt_internal: grid.spacing() / substeps as f64,
            min_eigenvalue: f64::INFINITY,
            ..Diagnostics::default()
        },
    };
    let mut coarse = opts.error_estimate.then(|| Vec::with_capacity(cap));

    run_rk4(&gen, rho0.matrix(), grid, substeps, |_, t, y| {
        let rho = DensityMatrix::from_matrix_unchecked(y.clone())?;
        let d = &mut out.diagnostics;
        d.max_trace_deviation = d.max_trace_deviation.max((rho.trace() - trace0).abs());
        d.max_hermiticity_error = d.max_hermiticity_error.max(rho.hermiticity_error());
        if opts.check_positivity {
            let lam = rho.min_eigenvalue();
            d.min_eigenvalue = d.min_eigenvalue.min(lam);
            if lam < POSITIVITY_ABORT {
                return Err(Error::InvariantViolation {
                    time_ns: t,
                    detail: format!(
                        "minimum eigenvalue {lam:e} (dt = {} ns, trace {})",
                        d.dt_internal,
                        rho.trace()
                    ),
                });
            }
        }
        out.times.push(t);
        out.intensity_left.push(intensity_from_weights(&wl, &rho)?);
        out.intensity_right.push(intensity_from_weights(&wr, &rho)?);
        out.excitation.push((0..n).map(|m| rho.excitation(m)).sum());
        if let Some(p) = out.populations.as_mut() {
            p.push(collective_populations(&rho)?);
        }
        if let Some(c) = coarse.as_mut() {
            c.push(rho.matrix().clone());
        }
        if let Some(s) = out.states.as_mut() {
            s.push(rho);
        }
        Ok(())
    })?;
    if !opts.check_positivity {
        out.diagnostics.min_eigenvalue = f64::NAN;
    }

    if let Some(coarse) = coarse {
        let mut worst = 0.0f64;
        run_rk4(&gen, rho0.matrix(), grid, 2 * substeps, |k, _, y| {
            let diff = (y - &coarse[k]).iter().map(|z| z.norm()).fold(0.0, f64::max);
            worst = worst.max(diff);
            Ok(())
        })?;
        out.diagnostics.step_error = Some(worst / 15.0);
    }
    Ok(out)
}

enum Propagator {
    Eigen {
        values: DVector<Complex64>,
        vectors: DMatrix<Complex64>,
        inverse: DMatrix<Complex64>,
    },
    Expm(DMatrix<Complex64>),
}

fn upper_triangular_eigenvectors(t: &DMatrix<Complex64>) -> DMatrix<Complex64> {
    let n = t.nrows();
    let scale = t.iter().map(|z| z.norm()).fold(0.0, f64::max).max(f64::MIN_POSITIVE);
    let mut y = DMatrix::zeros(n, n);
    for k in 0..n {
        y[(k, k)] = Complex64::new(1.0, 0.0);
        for i in (0..k).rev() {
            let mut acc = ZERO;
            for j in i + 1..=k {
                acc += t[(i, j)] * y[(j, k)];
            }
            let mut denom = t[(k, k)] - t[(i, i)];
            if denom.norm() < 1e-14 * scale {
                denom = Complex64::new(1e-14 * scale, 0.0);
            }
            y[(i, k)] = acc / denom;
        }
        let norm = y.column(k).norm();
        y.column_mut(k).unscale_mut(norm);
    }
    y
}

impl Propagator {
    fn new(h: &DMatrix<Complex64>) -> Propagator {
        let (q, t) = nalgebra::linalg::Schur::new(h.clone()).unpack();
        let vectors = &q * upper_triangular_eigenvectors(&t);
        let values = t.diagonal();
        if let Some(inverse) = vectors.clone().try_inverse() {
            let cond = vectors.norm() * inverse.norm();
            if cond.is_finite() && cond < EIGEN_CONDITION_LIMIT {
                return Propagator::Eigen {
                    values,
                    vectors,
                    inverse,
                };
            }
        }
        Propagator::Expm(h.clone())
    }

    fn apply(&self, t: f64, c0: &DVector<Complex64>) -> DVector<Complex64> {
        match self {
            Propagator::Eigen {
                values,
                vectors,
                inverse,
            } => {
                let mut y = inverse * c0;
                for (yi, lam) in y.iter_mut().zip(values.iter()) {
                    *yi *= (Complex64::new(0.0, -t) * lam).exp();
                }
                vectors * y
            }
            Propagator::Expm(h) => (h * Complex64::new(0.0, -t)).exp() * c0,
        }
    }
}

/// Single-excitation no-jump evolution c(t) = exp(−iH_eff t)·c0.
///
/// Dephasing is ignored; this is exact only for γ_d = 0.
pub fn evolve_single_excitation(
    system: &SystemModel,
    c0: &DVector<Complex64>,
    grid: &TimeGrid,
) -> Result<Trajectory> {
    grid.validate()?;
    let n = system.len();
    if c0.len() != n {
        return Err(Error::DimensionMismatch {
            expected: n,
            found: c0.len(),
            context: "single-excitation amplitudes",
        });
    }
    let norm0 = c0.norm_squared();
    if !(norm0.is_finite() && norm0 <= 1.0 + 1e-12) {
        return Err(Error::invalid("c0", "norm must not exceed 1"));
    }
    let prop = Propagator::new(&effective_hamiltonian(system));
    let (wl, wr) = (port_weights(system, Port::Left), port_weights(system, Port::Right));
    let intensity = |w: &DMatrix<Complex64>, c: &DVector<Complex64>| {
        let mut acc = ZERO;
        for m in 0..n {
            for k in 0..n {
                acc += w[(m, k)] * c[m].conj() * c[k];
            }
        }
        acc.re
    };

    let times = grid.times();
    let mut out = Trajectory {
        times: times.clone(),
        states: None,
        amplitudes: Some(Vec::with_capacity(times.len())),
        intensity_left: Vec::with_capacity(times.len()),
        intensity_right: Vec::with_capacity(times.len()),
        populations: (n == 2).then(|| Vec::with_capacity(times.len())),
        excitation: Vec::with_capacity(times.len()),
        diagnostics: Diagnostics {
            dt_internal: 0.0,
            expm_fallback: matches!(prop, Propagator::Expm(_)),
            min_eigenvalue: 0.0,
            ..Diagnostics::default()
        },
    };
    for &t in &times {
        let c = prop.apply(t - grid.t0, c0);
        if c.iter().any(|z| !z.re.is_finite() || !z.im.is_finite()) {
            return Err(Error::NonFinite {
                context: format!("single-excitation amplitudes at t = {t} ns"),
            });
        }
        out.intensity_left.push(intensity(&wl, &c));
        out.intensity_right.push(intensity(&wr, &c));
        out.excitation.push(c.norm_squared());
        if let Some(p) = out.populations.as_mut() {
            p.push(collective_populations(&single_excitation_state(&c))?);
        }
        out.amplitudes.as_mut().unwrap().push(c);
    }
    Ok(out)
}

/// No-jump state |ψ⟩⟨ψ| plus the missing weight on the ground state.
pub fn single_excitation_state(c: &DVector<Complex64>) -> DensityMatrix {
    let n = c.len();
    let dim = 1 << n;
    let mut rho = DMatrix::zeros(dim, dim);
    let idx = |m: usize| crate::liouvillian::emitter_bit(m, n);
    for a in 0..n {
        for b in 0..n {
            rho[(idx(a), idx(b))] = c[a] * c[b].conj();
        }
    }
    rho[(0, 0)] = Complex64::new((1.0 - c.norm_squared()).max(0.0), 0.0);
    DensityMatrix::from_matrix_unchecked(rho).expect("dimension is a power of two")
}

/// Quasi-instantaneous rotation on each emitter: areas Ω̃_m (rad) and
/// phases θ_m (rad).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PulseSpec {
    pub areas: Vec<f64>,
    pub phases: Vec<f64>,
}

impl PulseSpec {
    pub fn new(areas: Vec<f64>, phases: Vec<f64>) -> Self {
        PulseSpec { areas, phases }
    }

    /// π pulse on emitter `m` only.
    pub fn pi_on(m: usize, n: usize) -> Self {
        let mut areas = vec![0.0; n];
        areas[m] = std::f64::consts::PI;
        PulseSpec {
            areas,
            phases: vec![0.0; n],
        }
    }

    pub fn validate(&self, n: usize) -> Result<()> {
        if self.areas.len() != n || self.phases.len() != n {
            return Err(Error::DimensionMismatch {
                expected: n,
                found: self.areas.len().min(self.phases.len()),
                context: "pulse areas/phases per emitter",
            });
        }
        let two_pi = std::f64::consts::TAU;
        if self.areas.iter().any(|a| !(0.0..=two_pi).contains(a)) {
            return Err(Error::invalid("pulse.areas", "must lie in [0, 2π]"));
        }
        if self.phases.iter().any(|p| !p.is_finite()) {
            return Err(Error::invalid("pulse.phases", "must be finite"));
        }
        Ok(())
    }

    /// U = ⊗_m exp[−iΩ̃_m(e^{iθ_m}σ_m^+ + e^{−iθ_m}σ_m^-)/2].
    pub fn unitary(&self) -> DMatrix<Complex64> {
        let mut u = DMatrix::from_element(1, 1, Complex64::new(1.0, 0.0));
        for (&a, &theta) in self.areas.iter().zip(&self.phases) {
            let (s, c) = (0.5 * a).sin_cos();
            let mut um = DMatrix::zeros(2, 2);
            um[(0, 0)] = Complex64::new(c, 0.0);
            um[(1, 1)] = Complex64::new(c, 0.0);
            // basis (g, e): σ^+ = |e⟩⟨g|
            um[(1, 0)] = Complex64::new(0.0, -s) * Complex64::from_polar(1.0, theta);
            um[(0, 1)] = Complex64::new(0.0, -s) * Complex64::from_polar(1.0, -theta);
            u = u.kronecker(&um);
        }
        u
    }
}

pub fn apply_instant_pulse(rho: &DensityMatrix, pulse: &PulseSpec) -> Result<DensityMatrix> {
    pulse.validate(rho.num_emitters())?;
    let u = pulse.unitary();
    DensityMatrix::from_matrix_unchecked(&u * rho.matrix() * u.adjoint())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::liouvillian::Envelope;
    use crate::model::{angular, build_system, EmitterParams, PhaseLags};
    use approx::assert_relative_eq;
    use std::f64::consts::{FRAC_1_SQRT_2, PI, TAU};

    fn pair(g: (f64, f64), beta: f64, phi: f64, det: (f64, f64), gd: f64) -> SystemModel {
        build_system(
            vec![
                EmitterParams::new(g.0, beta).with_detuning(det.0).with_dephasing(gd),
                EmitterParams::new(g.1, beta).with_detuning(det.1).with_dephasing(gd),
            ],
            PhaseLags::pair(phi),
        )
        .unwrap()
    }

    fn c(re: f64, im: f64) -> Complex64 {
        Complex64::new(re, im)
    }

    #[test]
    fn grid_validation() {
        assert!(TimeGrid::new(1.0, 1.0, 10).is_err());
        assert!(TimeGrid::new(0.0, 1.0, 1).is_err());
        assert!(TimeGrid::new(0.0, 1.0, 11).unwrap().with_step(0.2).is_err());
        let g = TimeGrid::new(0.0, 1.0, 11).unwrap();
        assert_eq!(g.times().len(), 11);
        assert_relative_eq!(g.times()[10], 1.0);
    }

    #[test]
    fn single_emitter_decay_is_exponential() {
        let s = build_system(vec![EmitterParams::new(0.79, 0.6)], PhaseLags::single()).unwrap();
        let grid = TimeGrid::new(0.0, 1.0, 101).unwrap();
        let tr = evolve_master(&s, &DriveSpec::off(), &DensityMatrix::basis(1, 1), &grid).unwrap();
        let exact = (-TAU * 0.79f64).exp();
        let got = *tr.excitation.last().unwrap();
        assert!(((got - exact) / exact).abs() < 1e-6, "{got} vs {exact}");
        assert!(tr.diagnostics.step_error.unwrap() < 1e-6);
    }

    #[test]
    fn doubly_excited_ideal_pair_emits_two_photons() {
        let s = pair((1.0, 1.0), 1.0, 0.0, (0.0, 0.0), 0.0);
        let grid = TimeGrid::new(0.0, 12.0, 4001).unwrap();
        let tr = evolve_master(&s, &DriveSpec::off(), &DensityMatrix::basis(2, 3), &grid).unwrap();
        let photons = tr.emitted_photons(Port::Left) + tr.emitted_photons(Port::Right);
        assert!((photons - 2.0).abs() < 0.02, "{photons}");
    }

    #[test]
    fn dark_state_is_stationary() {
        let s = pair((1.0, 1.0), 1.0, 0.0, (0.0, 0.0), 0.0);
        let c0 = DVector::from_vec(vec![c(FRAC_1_SQRT_2, 0.0), c(-FRAC_1_SQRT_2, 0.0)]);
        let tr = evolve_single_excitation(&s, &c0, &TimeGrid::new(0.0, 20.0, 201).unwrap()).unwrap();
        for &x in &tr.excitation {
            assert!((x - 1.0).abs() < 1e-12);
        }
        assert!(tr.intensity_right.iter().all(|i| i.abs() < 1e-14));
    }

    #[test]
    fn excitation_redistributes_into_subradiant_state() {
        // Without side loss the |eg⟩ excitation splits evenly: the bright half
        // leaves, the dark half stays.
        let s = pair((0.76, 0.76), 1.0, 0.0, (0.0, 0.0), 0.0);
        let c0 = DVector::from_vec(vec![c(1.0, 0.0), c(0.0, 0.0)]);
        let tr = evolve_single_excitation(&s, &c0, &TimeGrid::new(0.0, 30.0, 301).unwrap()).unwrap();
        let p = tr.populations.as_ref().unwrap().last().unwrap();
        assert_relative_eq!(p.p_sub, 0.5, epsilon = 1e-9);
        assert!(p.p_sup < 1e-9);
    }

    #[test]
    fn single_excitation_matches_master_equation() {
        let s = pair((0.79, 0.73), 0.8, 0.05, (2.0, 0.0), 0.0);
        let grid = TimeGrid::new(0.0, 3.0, 301).unwrap();
        let a = evolve_single_excitation(&s, &DVector::from_vec(vec![c(1.0, 0.0), c(0.0, 0.0)]), &grid)
            .unwrap();
        assert!(!a.diagnostics.expm_fallback);
        let fine = grid.with_step(1e-3).unwrap();
        let b = evolve_master(&s, &DriveSpec::off(), &DensityMatrix::basis(2, 2), &fine).unwrap();
        for port in [Port::Left, Port::Right] {
            for (x, y) in a.intensity(port).iter().zip(b.intensity(port)) {
                assert!((x - y).abs() < 1e-9, "{x} vs {y}");
            }
        }
    }

    #[test]
    fn exceptional_point_falls_back_and_agrees() {
        // J = 0 (φ = 0), equal Γ, Δ = Γ_mn: the two eigenvalues coalesce.
        let g = 0.76;
        let beta = 0.61 / 0.76;
        let s = pair((g, g), beta, 0.0, (0.61, 0.0), 0.0);
        let grid = TimeGrid::new(0.0, 3.0, 61).unwrap();
        let a = evolve_single_excitation(&s, &DVector::from_vec(vec![c(1.0, 0.0), c(0.0, 0.0)]), &grid)
            .unwrap();
        assert!(a.diagnostics.expm_fallback);
        let b = evolve_master_with(
            &s,
            &DriveSpec::off(),
            &DensityMatrix::basis(2, 2),
            &grid.with_step(5e-4).unwrap(),
            &EvolveOptions::fast(),
        )
        .unwrap();
        for (x, y) in a.intensity_right.iter().zip(&b.intensity_right) {
            assert!((x - y).abs() < 1e-8, "{x} vs {y}");
        }
    }

    #[test]
    fn pi_pulse_excites_target() {
        for m in 0..2 {
            let rho = apply_instant_pulse(&DensityMatrix::ground(2), &PulseSpec::pi_on(m, 2)).unwrap();
            let n = rho.num_emitters();
            assert_relative_eq!(rho.excitation(m), 1.0, epsilon = 1e-15);
            assert!(rho.excitation(1 - m).abs() < 1e-15);
            assert_eq!(n, 2);
        }
    }

    #[test]
    fn partial_pulses_double_excitation() {
        let pulse = PulseSpec::new(vec![0.87, 1.33], vec![0.3, -1.1]);
        let rho = apply_instant_pulse(&DensityMatrix::ground(2), &pulse).unwrap();
        let expected = (0.435f64).sin().powi(2) * (0.665f64).sin().powi(2);
        assert_relative_eq!(rho.population(3), expected, epsilon = 1e-14);
        assert!((rho.population(3) - 0.068).abs() < 0.001);
    }

    #[test]
    fn pulse_phase_sets_relative_phase_of_single_excitations() {
        // Equal areas, θ_0 − θ_1 = −π/2: c_eg/c_ge = e^{i(θ_0−θ_1)} = −i, so the
        // single-excitation part is ∝ |eg⟩ + i|ge⟩.
        let pulse = PulseSpec::new(vec![PI / 2.0, PI / 2.0], vec![-PI / 2.0, 0.0]);
        let rho = apply_instant_pulse(&DensityMatrix::ground(2), &pulse).unwrap();
        let r = rho.matrix();
        // ρ[eg][ge] = c_eg c_ge^*
        let ratio = r[(2, 1)] / r[(1, 1)];
        assert!((ratio - c(0.0, -1.0)).norm() < 1e-14, "{ratio}");
    }

    #[test]
    fn pulse_rejects_bad_areas() {
        let pulse = PulseSpec::new(vec![7.0], vec![0.0]);
        assert!(apply_instant_pulse(&DensityMatrix::ground(1), &pulse).is_err());
        let pulse = PulseSpec::new(vec![1.0], vec![0.0]);
        assert!(apply_instant_pulse(&DensityMatrix::ground(2), &pulse).is_err());
    }

    #[test]
    fn square_drive_rabi_flops() {
        let s = build_system(vec![EmitterParams::new(1e-6, 0.5)], PhaseLags::single()).unwrap();
        let rabi = 0.5; // GHz → π pulse after 1 ns
        let drive = DriveSpec {
            rabi: vec![rabi],
            phase: vec![0.0],
            envelope: Envelope::Square { t_on: 0.0, t_off: 10.0 },
        };
        let grid = TimeGrid::new(0.0, 1.0, 11).unwrap();
        let tr = evolve_master(&s, &drive, &DensityMatrix::ground(1), &grid).unwrap();
        assert!((tr.excitation[10] - 1.0).abs() < 1e-5);
        assert_relative_eq!(tr.excitation[5], 0.5, epsilon = 1e-5);
        assert_relative_eq!(angular(rabi) * 1.0, PI);
    }

    #[test]
    fn conservation_with_dephasing() {
        let s = pair((0.79, 0.73), 0.8, 0.05, (0.5, -0.3), 0.03);
        let rho0 = apply_instant_pulse(
            &DensityMatrix::ground(2),
            &PulseSpec::new(vec![0.87, 1.33], vec![-0.48 * PI, 0.0]),
        )
        .unwrap();
        let tr = evolve_master(&s, &DriveSpec::off(), &rho0, &TimeGrid::new(0.0, 3.0, 301).unwrap())
            .unwrap();
        let d = tr.diagnostics;
        assert!(d.max_trace_deviation < 1e-9);
        assert!(d.max_hermiticity_error < 1e-10);
        assert!(d.min_eigenvalue > -1e-8);
        assert!(tr.intensity_left.iter().chain(&tr.intensity_right).all(|&i| i > -1e-10));
    }

    #[test]
    fn drive_edges_keep_fourth_order() {
        // edges at 0.237 and 1.111 ns fall inside steps for every step count
        let system = pair((0.79, 0.73), 0.8, 0.05, (0.0, 0.0), 0.03);
        let drive = DriveSpec::square(vec![0.5, 0.3], vec![0.0, 1.0], 0.237, 1.111);
        let gen = Generator::new(&system, &drive).unwrap();
        let rho0 = DensityMatrix::basis(2, 2);
        let solve = |steps: usize| {
            let mut rho = rho0.matrix().clone();
            integrate_rk4(&gen, &mut rho, 0.0, 2.0, steps);
            rho
        };
        let reference = solve(12_800);
        let err = |m: DMatrix<Complex64>| (m - &reference).iter().map(|z| z.norm()).fold(0.0, f64::max);
        let ratio = err(solve(100)) / err(solve(200));
        assert!((12.0..20.0).contains(&ratio), "ratio {ratio}");
    }
}
