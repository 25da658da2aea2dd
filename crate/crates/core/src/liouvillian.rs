//! Master-equation generator and observables on the 2^N product space.
//!
//! Basis index bits encode excitations with emitter 0 in the most
//! significant slot: for two emitters `|gg⟩ = 0`, `|ge⟩ = 1`, `|eg⟩ = 2`,
//! `|ee⟩ = 3`. The generator is applied as operator sums on the dim×dim
//! matrix; no superoperator is ever formed.

use std::f64::consts::FRAC_1_SQRT_2;

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{angular, SystemModel};

const HERMITIAN_TOL: f64 = 1e-10;
const TRACE_TOL: f64 = 1e-9;
const POSITIVITY_TOL: f64 = 1e-8;
const IMAG_TOL: f64 = 1e-12;

const I: Complex64 = Complex64::new(0.0, 1.0);
const ZERO: Complex64 = Complex64::new(0.0, 0.0);
const ONE: Complex64 = Complex64::new(1.0, 0.0);

/// Bit mask of emitter `m` in an `n`-emitter basis index.
#[inline]
pub fn emitter_bit(m: usize, n: usize) -> usize {
    1 << (n - 1 - m)
}

fn lowering(m: usize, n: usize) -> DMatrix<Complex64> {
    let dim = 1 << n;
    let b = emitter_bit(m, n);
    let mut op = DMatrix::zeros(dim, dim);
    for j in (0..dim).filter(|j| j & b != 0) {
        op[(j & !b, j)] = ONE;
    }
    op
}

#[derive(Debug, Clone, PartialEq)]
pub struct DensityMatrix(DMatrix<Complex64>);

impl DensityMatrix {
    /// Validates shape, Hermiticity, trace and positivity.
    pub fn new(data: DMatrix<Complex64>) -> Result<Self> {
        let rho = Self::from_matrix_unchecked(data)?;
        rho.validate(0.0)?;
        Ok(rho)
    }

    /// Only the shape is checked.
    pub fn from_matrix_unchecked(data: DMatrix<Complex64>) -> Result<Self> {
        let dim = data.nrows();
        if data.ncols() != dim {
            return Err(Error::DimensionMismatch {
                expected: dim,
                found: data.ncols(),
                context: "density matrix must be square",
            });
        }
        if dim < 2 || !dim.is_power_of_two() {
            return Err(Error::invalid("rho", format!("dimension {dim} is not 2^N")));
        }
        Ok(DensityMatrix(data))
    }

    pub fn ground(n: usize) -> Self {
        Self::basis(n, 0)
    }

    /// Projector on basis state `index`.
    pub fn basis(n: usize, index: usize) -> Self {
        let dim = 1 << n;
        let mut m = DMatrix::zeros(dim, dim);
        m[(index, index)] = ONE;
        DensityMatrix(m)
    }

    /// `|ψ⟩⟨ψ|` for a (not necessarily normalized) state vector.
    pub fn pure(psi: &DVector<Complex64>) -> Result<Self> {
        let data = psi * psi.adjoint();
        Self::new(data)
    }

    pub fn num_emitters(&self) -> usize {
        self.0.nrows().trailing_zeros() as usize
    }

    pub fn dim(&self) -> usize {
        self.0.nrows()
    }

    pub fn matrix(&self) -> &DMatrix<Complex64> {
        &self.0
    }

    pub fn into_inner(self) -> DMatrix<Complex64> {
        self.0
    }

    pub fn trace(&self) -> f64 {
        self.0.trace().re
    }

    pub fn hermiticity_error(&self) -> f64 {
        let d = self.dim();
        let mut worst = 0.0f64;
        for i in 0..d {
            for j in i..d {
                worst = worst.max((self.0[(i, j)] - self.0[(j, i)].conj()).norm());
            }
        }
        worst
    }

    pub fn min_eigenvalue(&self) -> f64 {
        let herm = (&self.0 + self.0.adjoint()) * Complex64::new(0.5, 0.0);
        herm.symmetric_eigenvalues().min()
    }

    pub fn population(&self, index: usize) -> f64 {
        self.0[(index, index)].re
    }

    /// ⟨σ_m^+σ_m^-⟩.
    pub fn excitation(&self, m: usize) -> f64 {
        let n = self.num_emitters();
        let b = emitter_bit(m, n);
        (0..self.dim())
            .filter(|i| i & b != 0)
            .map(|i| self.0[(i, i)].re)
            .sum()
    }

    /// ⟨σ_m^+σ_n^-⟩ = Tr(ρ σ_m^+ σ_n^-).
    pub fn coherence(&self, m: usize, n: usize) -> Complex64 {
        let ne = self.num_emitters();
        let (bm, bn) = (emitter_bit(m, ne), emitter_bit(n, ne));
        let mut acc = ZERO;
        for j in (0..self.dim()).filter(|j| j & bn != 0) {
            let k = j & !bn;
            if k & bm == 0 {
                acc += self.0[(j, k | bm)];
            }
        }
        acc
    }

    /// Checks the state invariants; `time_ns` only labels the error.
    pub fn validate(&self, time_ns: f64) -> Result<()> {
        if self.0.iter().any(|z| !z.re.is_finite() || !z.im.is_finite()) {
            return Err(Error::NonFinite {
                context: format!("density matrix at t = {time_ns} ns"),
            });
        }
        let h = self.hermiticity_error();
        if h > HERMITIAN_TOL {
            return Err(Error::NotHermitian { deviation: h });
        }
        let tr = self.trace();
        if !(-TRACE_TOL..=1.0 + TRACE_TOL).contains(&tr) {
            return Err(Error::InvariantViolation {
                time_ns,
                detail: format!("trace {tr} outside [0, 1]"),
            });
        }
        let lam = self.min_eigenvalue();
        if lam < -POSITIVITY_TOL {
            return Err(Error::InvariantViolation {
                time_ns,
                detail: format!("minimum eigenvalue {lam:e}"),
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Envelope {
    Off,
    Square { t_on: f64, t_off: f64 },
}

/// Coherent drive: Rabi frequencies Ω_m/2π (GHz) and phases θ_m (rad).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DriveSpec {
    pub rabi: Vec<f64>,
    pub phase: Vec<f64>,
    pub envelope: Envelope,
}

impl DriveSpec {
    pub fn off() -> Self {
        DriveSpec {
            rabi: Vec::new(),
            phase: Vec::new(),
            envelope: Envelope::Off,
        }
    }

    pub fn square(rabi: Vec<f64>, phase: Vec<f64>, t_on: f64, t_off: f64) -> Self {
        DriveSpec {
            rabi,
            phase,
            envelope: Envelope::Square { t_on, t_off },
        }
    }

    pub fn is_on(&self, t: f64) -> bool {
        match self.envelope {
            Envelope::Off => false,
            Envelope::Square { t_on, t_off } => t >= t_on && t < t_off,
        }
    }

    pub fn validate(&self, n: usize) -> Result<()> {
        match self.envelope {
            Envelope::Off => Ok(()),
            Envelope::Square { t_on, t_off } => {
                if !(t_on.is_finite() && t_off.is_finite() && t_off > t_on) {
                    return Err(Error::invalid("drive.envelope", "need t_on < t_off"));
                }
                if self.rabi.len() != n || self.phase.len() != n {
                    return Err(Error::DimensionMismatch {
                        expected: n,
                        found: self.rabi.len().min(self.phase.len()),
                        context: "drive rabi/phase per emitter",
                    });
                }
                if self.rabi.iter().any(|r| !(r.is_finite() && *r >= 0.0)) {
                    return Err(Error::invalid("drive.rabi", "must be non-negative"));
                }
                if self.phase.iter().any(|p| !p.is_finite()) {
                    return Err(Error::invalid("drive.phase", "must be finite"));
                }
                Ok(())
            }
        }
    }
}

/// Output port. Port 1 collects the right-going field, port 2 the
/// left-going one.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Port {
    Left,
    Right,
}

impl Port {
    pub fn number(self) -> u8 {
        match self {
            Port::Right => 1,
            Port::Left => 2,
        }
    }

    pub fn from_number(k: u8) -> Option<Port> {
        match k {
            1 => Some(Port::Right),
            2 => Some(Port::Left),
            _ => None,
        }
    }
}

/// Weights W_mn with I = Σ_mn W_mn ⟨σ_m^+σ_n^-⟩, in GHz.
pub fn port_weights(system: &SystemModel, port: Port) -> DMatrix<Complex64> {
    let n = system.len();
    let phases = system.phases();
    let lag = |k: usize| match port {
        Port::Left => phases.get(0, k),
        Port::Right => phases.get(k, n - 1),
    };
    DMatrix::from_fn(n, n, |m, k| {
        let amp = 0.5
            * (system.emitter(m).gamma_waveguide() * system.emitter(k).gamma_waveguide()).sqrt();
        Complex64::from_polar(amp, lag(k) - lag(m))
    })
}

pub(crate) fn intensity_from_weights(weights: &DMatrix<Complex64>, rho: &DensityMatrix) -> Result<f64> {
    let n = weights.nrows();
    if rho.num_emitters() != n {
        return Err(Error::DimensionMismatch {
            expected: n,
            found: rho.num_emitters(),
            context: "density matrix vs emitter count",
        });
    }
    let mut acc = ZERO;
    for m in 0..n {
        for k in 0..n {
            acc += weights[(m, k)] * rho.coherence(m, k);
        }
    }
    if acc.im.abs() > IMAG_TOL * (1.0 + acc.re.abs()) {
        return Err(Error::NotHermitian {
            deviation: acc.im.abs(),
        });
    }
    Ok(acc.re)
}

/// Intensity at one port in GHz; the photon flux is 2π times this value.
pub fn port_intensity(system: &SystemModel, rho: &DensityMatrix, port: Port) -> Result<f64> {
    intensity_from_weights(&port_weights(system, port), rho)
}

/// Collective and bare populations of a two-emitter state, with
/// |S⟩ = (|eg⟩+|ge⟩)/√2 and |s⟩ = (|eg⟩−|ge⟩)/√2.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CollectivePopulations {
    pub p_sup: f64,
    pub p_sub: f64,
    pub p_ee: f64,
    pub p_gg: f64,
    pub p_eg: f64,
    pub p_ge: f64,
    /// ⟨S|ρ|s⟩.
    pub sup_sub_coherence: Complex64,
}

pub fn collective_populations(rho: &DensityMatrix) -> Result<CollectivePopulations> {
    if rho.num_emitters() != 2 {
        return Err(Error::DimensionMismatch {
            expected: 2,
            found: rho.num_emitters(),
            context: "collective populations need two emitters",
        });
    }
    let r = rho.matrix();
    let (ge, eg) = (1, 2);
    let s = FRAC_1_SQRT_2;
    let sup = [(ge, s), (eg, s)];
    let sub = [(ge, -s), (eg, s)];
    let sandwich = |bra: &[(usize, f64)], ket: &[(usize, f64)]| {
        let mut acc = ZERO;
        for &(i, a) in bra {
            for &(j, b) in ket {
                acc += r[(i, j)] * (a * b);
            }
        }
        acc
    };
    Ok(CollectivePopulations {
        p_sup: sandwich(&sup, &sup).re,
        p_sub: sandwich(&sub, &sub).re,
        p_ee: r[(3, 3)].re,
        p_gg: r[(0, 0)].re,
        p_eg: r[(eg, eg)].re,
        p_ge: r[(ge, ge)].re,
        sup_sub_coherence: sandwich(&sup, &sub),
    })
}

/// Precomputed generator for one system and drive.
///
/// ρ̇ = −i(Kρ − ρK†) + Σ_mn D_mn σ_m^- ρ σ_n^+ + dephasing, where K holds
/// the Hamiltonian and all anticommutator terms and D_mn = 2π(Γ_mn + δ_mn γ^s_m).
#[derive(Debug, Clone)]
pub struct Generator {
    n: usize,
    k_free: DMatrix<Complex64>,
    k_driven: Option<DMatrix<Complex64>>,
    drive: DriveSpec,
    jump: DMatrix<f64>,
    /// Angular dephasing rate per emitter.
    dephase: Vec<f64>,
}

impl Generator {
    pub fn new(system: &SystemModel, drive: &DriveSpec) -> Result<Self> {
        let n = system.len();
        drive.validate(n)?;
        let dim = 1 << n;
        let lower: Vec<_> = (0..n).map(|m| lowering(m, n)).collect();
        let raise: Vec<_> = lower.iter().map(|l| l.transpose()).collect();

        let mut k = DMatrix::<Complex64>::zeros(dim, dim);
        for m in 0..n {
            let b = emitter_bit(m, n);
            let half_det = 0.5 * angular(system.emitter(m).detuning);
            for i in 0..dim {
                k[(i, i)] += if i & b != 0 { half_det } else { -half_det };
            }
        }
        let gamma = system.gamma_mat();
        let j = system.j_mat();
        for m in 0..n {
            for q in 0..n {
                let coef = Complex64::new(angular(j[(m, q)]), -0.5 * angular(gamma[(m, q)]));
                if coef != ZERO {
                    k += (&raise[q] * &lower[m]) * coef;
                }
            }
            let side = system.emitter(m).gamma_side();
            if side != 0.0 {
                k += (&raise[m] * &lower[m]) * Complex64::new(0.0, -0.5 * angular(side));
            }
        }

        let k_driven = match drive.envelope {
            Envelope::Off => None,
            Envelope::Square { .. } => {
                let mut kd = k.clone();
                for m in 0..n {
                    let half = 0.5 * angular(drive.rabi[m]);
                    let up = Complex64::from_polar(half, drive.phase[m]);
                    kd += &raise[m] * up + &lower[m] * up.conj();
                }
                Some(kd)
            }
        };

        let jump = DMatrix::from_fn(n, n, |m, q| {
            let side = if m == q { system.emitter(m).gamma_side() } else { 0.0 };
            angular(gamma[(m, q)] + side)
        });
        let dephase = system
            .emitters()
            .iter()
            .map(|e| angular(e.gamma_dephase))
            .collect();

        Ok(Generator {
            n,
            k_free: k,
            k_driven,
            drive: drive.clone(),
            jump,
            dephase,
        })
    }

    pub fn num_emitters(&self) -> usize {
        self.n
    }

    pub fn dim(&self) -> usize {
        1 << self.n
    }

    /// Non-Hermitian part K at time `t`.
    pub fn k_matrix(&self, t: f64) -> &DMatrix<Complex64> {
        match &self.k_driven {
            Some(kd) if self.drive.is_on(t) => kd,
            _ => &self.k_free,
        }
    }

    /// Times at which the drive switches, sorted.
    pub fn switch_times(&self) -> Vec<f64> {
        match self.drive.envelope {
            Envelope::Square { t_on, t_off } if self.k_driven.is_some() => vec![t_on, t_off],
            _ => Vec::new(),
        }
    }

    /// Largest angular rate of the generator, used for step selection.
    pub fn max_rate(&self) -> f64 {
        let spectral = |k: &DMatrix<Complex64>| {
            k.row_iter()
                .map(|r| r.iter().map(|z| z.norm()).sum::<f64>())
                .fold(0.0, f64::max)
        };
        let mut rate = spectral(&self.k_free);
        if let Some(kd) = &self.k_driven {
            rate = rate.max(spectral(kd));
        }
        rate.max(self.dephase.iter().copied().fold(0.0, f64::max))
    }

    /// Writes ρ̇ into `out`. Inputs are not validated here.
    pub fn apply_into(&self, t: f64, rho: &DMatrix<Complex64>, out: &mut DMatrix<Complex64>) {
        let dim = self.dim();
        let k = self.k_matrix(t);
        // −i(Kρ − ρK†)
        out.gemm(-I, k, rho, ZERO);
        out.gemm(I, rho, &k.adjoint(), ONE);

        for m in 0..self.n {
            let bm = emitter_bit(m, self.n);
            for q in 0..self.n {
                let d = self.jump[(m, q)];
                if d == 0.0 {
                    continue;
                }
                let bq = emitter_bit(q, self.n);
                for i in (0..dim).filter(|i| i & bm == 0) {
                    for j in (0..dim).filter(|j| j & bq == 0) {
                        out[(i, j)] += rho[(i | bm, j | bq)] * d;
                    }
                }
            }
        }

        for (m, &g) in self.dephase.iter().enumerate() {
            if g == 0.0 {
                continue;
            }
            let b = emitter_bit(m, self.n);
            for i in 0..dim {
                for j in 0..dim {
                    if (i ^ j) & b != 0 {
                        out[(i, j)] -= rho[(i, j)] * g;
                    }
                }
            }
        }
    }

    pub fn apply(&self, t: f64, rho: &DMatrix<Complex64>) -> DMatrix<Complex64> {
        let mut out = DMatrix::zeros(self.dim(), self.dim());
        self.apply_into(t, rho, &mut out);
        out
    }
}

/// ρ̇ for the full master equation at time `t`.
pub fn generator_apply(
    system: &SystemModel,
    drive: &DriveSpec,
    t: f64,
    rho: &DensityMatrix,
) -> Result<DMatrix<Complex64>> {
    if rho.num_emitters() != system.len() {
        return Err(Error::DimensionMismatch {
            expected: system.len(),
            found: rho.num_emitters(),
            context: "density matrix vs emitter count",
        });
    }
    let out = Generator::new(system, drive)?.apply(t, rho.matrix());
    if out.iter().any(|z| !z.re.is_finite() || !z.im.is_finite()) {
        return Err(Error::NonFinite {
            context: format!("generator output at t = {t} ns"),
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build_system, effective_hamiltonian, EmitterParams, PhaseLags};
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use std::f64::consts::{PI, TAU};

    fn pair(g: (f64, f64), beta: (f64, f64), phi: f64, det: (f64, f64), gd: f64) -> SystemModel {
        build_system(
            vec![
                EmitterParams::new(g.0, beta.0).with_detuning(det.0).with_dephasing(gd),
                EmitterParams::new(g.1, beta.1).with_detuning(det.1).with_dephasing(gd),
            ],
            PhaseLags::pair(phi),
        )
        .unwrap()
    }

    fn qd23() -> SystemModel {
        pair((0.79, 0.73), (0.8, 0.8), 0.05, (0.0, 0.0), 0.0)
    }

    fn ket(entries: &[(usize, Complex64)], dim: usize) -> DVector<Complex64> {
        let mut v = DVector::zeros(dim);
        for &(i, a) in entries {
            v[i] = a;
        }
        v
    }

    fn sup_state() -> DensityMatrix {
        let s = Complex64::new(FRAC_1_SQRT_2, 0.0);
        DensityMatrix::pure(&ket(&[(1, s), (2, s)], 4)).unwrap()
    }

    fn sub_state() -> DensityMatrix {
        let s = Complex64::new(FRAC_1_SQRT_2, 0.0);
        DensityMatrix::pure(&ket(&[(1, -s), (2, s)], 4)).unwrap()
    }

    #[test]
    fn single_emitter_decays_at_total_rate() {
        let s = build_system(vec![EmitterParams::new(0.79, 0.6)], PhaseLags::single()).unwrap();
        let rho = DensityMatrix::basis(1, 1);
        let d = generator_apply(&s, &DriveSpec::off(), 0.0, &rho).unwrap();
        assert_relative_eq!(d[(1, 1)].re, -TAU * 0.79, epsilon = 1e-12);
        assert_relative_eq!(d[(0, 0)].re, TAU * 0.79, epsilon = 1e-12);
    }

    #[test]
    fn superradiant_state_rate() {
        let s = qd23();
        let g23 = s.gamma_mat()[(0, 1)];
        let expected = TAU * (0.5 * (0.79 + 0.73) + g23);
        assert_relative_eq!(expected / TAU, 1.367, epsilon = 2e-3);
        let gen = Generator::new(&s, &DriveSpec::off()).unwrap();
        let d = DensityMatrix::from_matrix_unchecked(gen.apply(0.0, sup_state().matrix())).unwrap();
        let rate = -collective_populations(&d).unwrap().p_sup;
        assert_relative_eq!(rate, expected, epsilon = 1e-12);
    }

    #[test]
    fn superradiant_rate_exact_for_symmetric_pair() {
        let s = pair((0.76, 0.76), (0.8, 0.8), 0.0, (0.0, 0.0), 0.0);
        let gen = Generator::new(&s, &DriveSpec::off()).unwrap();
        let d = DensityMatrix::from_matrix_unchecked(gen.apply(0.0, sup_state().matrix())).unwrap();
        let rate = -collective_populations(&d).unwrap().p_sup;
        assert_relative_eq!(rate, TAU * (0.76 + 0.8 * 0.76), epsilon = 1e-12);
    }

    #[test]
    fn single_emitter_intensity() {
        let s = build_system(vec![EmitterParams::new(0.9, 0.7)], PhaseLags::single()).unwrap();
        let rho = DensityMatrix::basis(1, 1);
        for port in [Port::Left, Port::Right] {
            let i = port_intensity(&s, &rho, port).unwrap();
            assert_relative_eq!(i, 0.5 * 0.7 * 0.9, epsilon = 1e-15);
        }
    }

    #[test]
    fn ideal_pair_interference() {
        let s = pair((1.0, 1.0), (1.0, 1.0), 0.0, (0.0, 0.0), 0.0);
        for port in [Port::Left, Port::Right] {
            assert_relative_eq!(port_intensity(&s, &sup_state(), port).unwrap(), 1.0, epsilon = 1e-14);
            assert!(port_intensity(&s, &sub_state(), port).unwrap().abs() < 1e-15);
        }
    }

    #[test]
    fn populations_of_bare_and_collective_states() {
        let p = collective_populations(&DensityMatrix::basis(2, 2)).unwrap();
        assert_relative_eq!(p.p_sup, 0.5, epsilon = 1e-15);
        assert_relative_eq!(p.p_sub, 0.5, epsilon = 1e-15);
        assert_eq!(p.p_eg, 1.0);

        let p = collective_populations(&sup_state()).unwrap();
        assert_relative_eq!(p.p_sup, 1.0, epsilon = 1e-15);
        assert!(p.p_sub.abs() < 1e-15);

        let s = Complex64::new(FRAC_1_SQRT_2, 0.0);
        let psi = ket(&[(1, s), (2, s * I)], 4);
        let p = collective_populations(&DensityMatrix::pure(&psi).unwrap()).unwrap();
        assert_relative_eq!(p.p_sup, 0.5, epsilon = 1e-15);
        assert_relative_eq!(p.p_sub, 0.5, epsilon = 1e-15);
        assert!((p.sup_sub_coherence - Complex64::new(0.0, -0.5)).norm() < 1e-15);

        assert!(collective_populations(&DensityMatrix::ground(3)).is_err());
    }

    #[test]
    fn rejects_invalid_states() {
        let mut m = DMatrix::<Complex64>::zeros(4, 4);
        m[(0, 1)] = ONE;
        assert!(matches!(DensityMatrix::new(m), Err(Error::NotHermitian { .. })));
        let mut m = DMatrix::<Complex64>::zeros(4, 4);
        m[(0, 0)] = Complex64::new(1.5, 0.0);
        m[(3, 3)] = Complex64::new(-0.5, 0.0);
        assert!(matches!(DensityMatrix::new(m), Err(Error::InvariantViolation { .. })));
        assert!(DensityMatrix::from_matrix_unchecked(DMatrix::zeros(3, 3)).is_err());
    }

    #[test]
    fn nan_input_is_reported() {
        let s = qd23();
        let mut m = DensityMatrix::basis(2, 1).into_inner();
        m[(1, 1)] = Complex64::new(f64::NAN, 0.0);
        let rho = DensityMatrix::from_matrix_unchecked(m).unwrap();
        assert!(matches!(
            generator_apply(&s, &DriveSpec::off(), 0.0, &rho),
            Err(Error::NonFinite { .. })
        ));
    }

    #[test]
    fn no_jump_block_matches_effective_hamiltonian() {
        let s = pair((0.83, 0.61), (0.9, 0.7), 1.1, (0.4, -1.3), 0.0);
        let gen = Generator::new(&s, &DriveSpec::off()).unwrap();
        let h = effective_hamiltonian(&s);
        // single-excitation block in emitter order: emitter 0 ↔ |eg⟩ = 2, emitter 1 ↔ |ge⟩ = 1
        let idx = [2usize, 1];
        let c = DVector::from_vec(vec![Complex64::new(0.3, 0.4), Complex64::new(-0.5, 0.2)]);
        let mut rho = DMatrix::zeros(4, 4);
        for a in 0..2 {
            for b in 0..2 {
                rho[(idx[a], idx[b])] = c[a] * c[b].conj();
            }
        }
        let d = gen.apply(0.0, &rho);
        let block = DMatrix::from_fn(2, 2, |a, b| c[a] * c[b].conj());
        let expected = (&h * &block - &block * h.adjoint()) * (-I);
        for a in 0..2 {
            for b in 0..2 {
                assert!((d[(idx[a], idx[b])] - expected[(a, b)]).norm() < 1e-12);
            }
        }
    }

    #[test]
    fn port_symmetry_at_multiples_of_pi() {
        for k in 0..3 {
            let s = pair((0.8, 0.7), (0.9, 0.6), k as f64 * PI, (0.3, 0.0), 0.0);
            let c = DVector::from_vec(vec![
                ZERO,
                Complex64::new(0.2, 0.5),
                Complex64::new(0.6, -0.1),
                ZERO,
            ]);
            let rho = DensityMatrix::pure(&c).unwrap();
            let l = port_intensity(&s, &rho, Port::Left).unwrap();
            let r = port_intensity(&s, &rho, Port::Right).unwrap();
            assert!((l - r).abs() < 1e-12, "k={k}: {l} vs {r}");
        }
    }

    fn random_state(n: usize, seed: &[f64]) -> DMatrix<Complex64> {
        let dim = 1 << n;
        let a = DMatrix::from_fn(dim, dim, |i, j| {
            let k = (i * dim + j) % seed.len();
            Complex64::new(seed[k], seed[(k + 3) % seed.len()] - 0.5)
        });
        let m = &a * a.adjoint();
        let tr = m.trace();
        m / tr
    }

    fn random_system(n: usize, p: &[f64]) -> SystemModel {
        let emitters = (0..n)
            .map(|m| {
                EmitterParams::new(0.3 + p[m], 0.2 + 0.8 * p[m + 3])
                    .with_detuning(4.0 * (p[m + 6] - 0.5))
                    .with_dephasing(0.1 * p[m + 9])
            })
            .collect();
        let seps: Vec<f64> = (1..n).map(|m| 3.0 * p[m + 12]).collect();
        let phases = PhaseLags::from_positions(
            &std::iter::once(0.0)
                .chain(seps.iter().scan(0.0, |x, s| {
                    *x += s;
                    Some(*x)
                }))
                .collect::<Vec<_>>(),
            1.0,
        )
        .unwrap();
        build_system(emitters, phases).unwrap()
    }

    proptest! {
        #[test]
        fn generator_preserves_trace_and_hermiticity(
            n in 1usize..=3,
            p in proptest::collection::vec(0.0f64..1.0, 16),
            seed in proptest::collection::vec(0.0f64..1.0, 7),
            driven in any::<bool>(),
        ) {
            let s = random_system(n, &p);
            let drive = if driven {
                DriveSpec::square(vec![0.7; n], (0..n).map(|m| m as f64).collect(), 0.0, 1.0)
            } else {
                DriveSpec::off()
            };
            let rho = random_state(n, &seed);
            let gen = Generator::new(&s, &drive).unwrap();
            let d = gen.apply(0.5, &rho);
            prop_assert!(d.trace().norm() < 1e-12);
            let h = (&d - d.adjoint()).iter().map(|z| z.norm()).fold(0.0, f64::max);
            prop_assert!(h < 1e-12);
        }

        #[test]
        fn generator_is_linear(
            p in proptest::collection::vec(0.0f64..1.0, 16),
            s1 in proptest::collection::vec(0.0f64..1.0, 5),
            s2 in proptest::collection::vec(0.0f64..1.0, 9),
            a in -2.0f64..2.0,
        ) {
            let s = random_system(2, &p);
            let gen = Generator::new(&s, &DriveSpec::off()).unwrap();
            let (r1, r2) = (random_state(2, &s1), random_state(2, &s2));
            let lhs = gen.apply(0.0, &(&r1 * Complex64::new(a, 0.0) + &r2));
            let rhs = gen.apply(0.0, &r1) * Complex64::new(a, 0.0) + gen.apply(0.0, &r2);
            prop_assert!((lhs - rhs).iter().all(|z| z.norm() < 1e-11));
        }

        #[test]
        fn photon_bookkeeping_closes(
            n in 1usize..=3,
            p in proptest::collection::vec(0.0f64..1.0, 16),
            seed in proptest::collection::vec(0.0f64..1.0, 11),
        ) {
            let mut s = random_system(n, &p);
            s = s.with_dephasing(0.0).unwrap();
            let rho = DensityMatrix::from_matrix_unchecked(random_state(n, &seed)).unwrap();
            let gen = Generator::new(&s, &DriveSpec::off()).unwrap();
            let d = DensityMatrix::from_matrix_unchecked(gen.apply(0.0, rho.matrix())).unwrap();
            let loss: f64 = (0..n).map(|m| -d.excitation(m)).sum();
            let ports = port_intensity(&s, &rho, Port::Left).unwrap()
                + port_intensity(&s, &rho, Port::Right).unwrap();
            let side: f64 = (0..n).map(|m| s.emitter(m).gamma_side() * rho.excitation(m)).sum();
            prop_assert!((TAU * (ports + side) - loss).abs() < 1e-10 * (1.0 + loss.abs()));
        }
    }
}
