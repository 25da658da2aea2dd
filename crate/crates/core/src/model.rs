//! Emitter and system parameters, photon-mediated coupling matrices and the
//! single-excitation effective Hamiltonian.
//!
//! Every rate and detuning handed to this module is a linear frequency
//! `ν = ω/2π` in GHz and every time is in ns. Conversion to angular units
//! (rad/ns) happens only where a generator or propagator is assembled, via
//! [`angular`].

use std::f64::consts::TAU;

use nalgebra::DMatrix;
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Bohr magneton over Planck's constant, GHz/T.
pub const BOHR_MAGNETON_GHZ_PER_T: f64 = 13.996;

/// Photonic-crystal lattice constant in nm.
pub const LATTICE_CONSTANT_NM: f64 = 240.0;

/// Linear frequency (GHz) to angular rate (rad/ns).
#[inline]
pub fn angular(ghz: f64) -> f64 {
    TAU * ghz
}

/// Angular rate (rad/ns) to linear frequency (GHz).
#[inline]
pub fn linear(rad_per_ns: f64) -> f64 {
    rad_per_ns / TAU
}

/// Exciton fine-structure and magnetic-field response of one emitter.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ZeemanData {
    /// Zero-field centre frequency of the exciton doublet, THz.
    pub nu0_thz: f64,
    pub fss_ghz: f64,
    pub g_factor: f64,
    pub dia_shift_ghz_per_t2: f64,
}

/// Which exciton branch of the Zeeman doublet.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Branch {
    High,
    Low,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmitterParams {
    /// Total decay rate Γ/2π, GHz.
    pub gamma_total: f64,
    /// Fraction of the decay into the waveguide mode.
    pub beta: f64,
    /// Detuning Δ/2π from the drive frame, GHz.
    pub detuning: f64,
    /// Spectral-diffusion standard deviation σ_sd/2π, GHz.
    pub sigma_sd: f64,
    /// Pure dephasing rate γ_d/2π, GHz.
    pub gamma_dephase: f64,
    pub zeeman: Option<ZeemanData>,
}

impl EmitterParams {
    pub fn new(gamma_total: f64, beta: f64) -> Self {
        EmitterParams {
            gamma_total,
            beta,
            detuning: 0.0,
            sigma_sd: 0.0,
            gamma_dephase: 0.0,
            zeeman: None,
        }
    }

    pub fn with_detuning(mut self, detuning: f64) -> Self {
        self.detuning = detuning;
        self
    }

    pub fn with_dephasing(mut self, gamma_dephase: f64) -> Self {
        self.gamma_dephase = gamma_dephase;
        self
    }

    pub fn with_sigma_sd(mut self, sigma_sd: f64) -> Self {
        self.sigma_sd = sigma_sd;
        self
    }

    pub fn with_zeeman(mut self, zeeman: ZeemanData) -> Self {
        self.zeeman = Some(zeeman);
        self
    }

    /// Waveguide decay rate β·Γ, GHz.
    pub fn gamma_waveguide(&self) -> f64 {
        self.beta * self.gamma_total
    }

    /// Decay rate into non-guided side modes (1 − β)·Γ, GHz.
    pub fn gamma_side(&self) -> f64 {
        (1.0 - self.beta) * self.gamma_total
    }

    pub fn validate(&self, index: usize) -> Result<()> {
        let field = |f: &str| format!("emitters[{index}].{f}");
        if !(self.gamma_total.is_finite() && self.gamma_total > 0.0) {
            return Err(Error::invalid(field("gamma_total"), "must be positive"));
        }
        if !(0.0..=1.0).contains(&self.beta) {
            return Err(Error::invalid(field("beta"), "must lie in [0, 1]"));
        }
        if !self.detuning.is_finite() {
            return Err(Error::invalid(field("detuning"), "must be finite"));
        }
        if !(self.sigma_sd.is_finite() && self.sigma_sd >= 0.0) {
            return Err(Error::invalid(field("sigma_sd"), "must be non-negative"));
        }
        if !(self.gamma_dephase.is_finite() && self.gamma_dephase >= 0.0) {
            return Err(Error::invalid(field("gamma_dephase"), "must be non-negative"));
        }
        Ok(())
    }
}

/// Propagation phases φ_mn = k|x_mn| between emitters, radians.
///
/// Emitters are indexed left to right; the output ports use φ_{1n} and
/// φ_{nN} from this matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct PhaseLags {
    phi: DMatrix<f64>,
}

impl PhaseLags {
    /// Takes a raw matrix. Symmetry and zero diagonal are checked; collinearity
    /// is not.
    pub fn from_matrix(phi: DMatrix<f64>) -> Result<Self> {
        if phi.nrows() != phi.ncols() {
            return Err(Error::DimensionMismatch {
                expected: phi.nrows(),
                found: phi.ncols(),
                context: "phase matrix must be square",
            });
        }
        let n = phi.nrows();
        for m in 0..n {
            if phi[(m, m)] != 0.0 {
                return Err(Error::invalid(
                    format!("phi[{m}][{m}]"),
                    "diagonal phase lags must be zero",
                ));
            }
            for k in 0..n {
                if !phi[(m, k)].is_finite() {
                    return Err(Error::invalid(format!("phi[{m}][{k}]"), "must be finite"));
                }
                if phi[(m, k)] != phi[(k, m)] {
                    return Err(Error::invalid(
                        format!("phi[{m}][{k}]"),
                        "phase matrix must be symmetric",
                    ));
                }
            }
        }
        Ok(PhaseLags { phi })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let n = rows.len();
        if let Some((i, r)) = rows.iter().enumerate().find(|(_, r)| r.len() != n) {
            return Err(Error::DimensionMismatch {
                expected: n,
                found: r.len(),
                context: if i == 0 { "phase matrix row 0" } else { "phase matrix row" },
            });
        }
        Self::from_matrix(DMatrix::from_fn(n, n, |i, j| rows[i][j]))
    }

    pub fn single() -> Self {
        PhaseLags {
            phi: DMatrix::zeros(1, 1),
        }
    }

    /// Two emitters separated by phase `phi`.
    pub fn pair(phi: f64) -> Self {
        PhaseLags {
            phi: DMatrix::from_row_slice(2, 2, &[0.0, phi, phi, 0.0]),
        }
    }

    /// Phases from collinear positions (any length unit) and the matching
    /// wavenumber: φ_mn = k·|x_m − x_n|.
    pub fn from_positions(positions: &[f64], wavenumber: f64) -> Result<Self> {
        if positions.is_empty() {
            return Err(Error::invalid("positions", "at least one emitter required"));
        }
        if positions.windows(2).any(|w| !(w[1] >= w[0])) {
            return Err(Error::invalid(
                "positions",
                "emitters must be ordered left to right",
            ));
        }
        let n = positions.len();
        Self::from_matrix(DMatrix::from_fn(n, n, |i, j| {
            wavenumber * (positions[i] - positions[j]).abs()
        }))
    }

    /// Phases from consecutive separations in lattice constants and the
    /// dimensionless wavenumber `k·a` (π at the band edge).
    pub fn from_separations_cells(separations: &[f64], k_a: f64) -> Result<Self> {
        if separations.iter().any(|s| !(s.is_finite() && *s >= 0.0)) {
            return Err(Error::invalid(
                "separations_cells",
                "separations must be finite and non-negative",
            ));
        }
        let mut positions = Vec::with_capacity(separations.len() + 1);
        positions.push(0.0);
        for s in separations {
            positions.push(positions.last().unwrap() + s);
        }
        Self::from_positions(&positions, k_a)
    }

    /// Phases from separations in nm, using the lattice constant and `k·a`.
    pub fn from_separations_nm(separations_nm: &[f64], k_a: f64) -> Result<Self> {
        let cells: Vec<f64> = separations_nm
            .iter()
            .map(|x| x / LATTICE_CONSTANT_NM)
            .collect();
        Self::from_separations_cells(&cells, k_a)
    }

    pub fn len(&self) -> usize {
        self.phi.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.phi.nrows() == 0
    }

    pub fn get(&self, m: usize, n: usize) -> f64 {
        self.phi[(m, n)]
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.phi
    }
}

/// N emitters, their phase lags and the derived coupling matrices.
///
/// `gamma_mat` holds Γ_mn/2π and `j_mat` holds J_mn/2π, both in GHz.
#[derive(Debug, Clone, PartialEq)]
pub struct SystemModel {
    emitters: Vec<EmitterParams>,
    phases: PhaseLags,
    gamma_mat: DMatrix<f64>,
    j_mat: DMatrix<f64>,
}

pub fn build_system(emitters: Vec<EmitterParams>, phases: PhaseLags) -> Result<SystemModel> {
    if emitters.is_empty() {
        return Err(Error::invalid("emitters", "at least one emitter required"));
    }
    if phases.len() != emitters.len() {
        return Err(Error::DimensionMismatch {
            expected: emitters.len(),
            found: phases.len(),
            context: "phase matrix vs emitter count",
        });
    }
    for (i, e) in emitters.iter().enumerate() {
        e.validate(i)?;
    }
    let n = emitters.len();
    let strength = |m: usize, k: usize| {
        (emitters[m].gamma_waveguide() * emitters[k].gamma_waveguide()).sqrt()
    };
    let gamma_mat = DMatrix::from_fn(n, n, |m, k| strength(m, k) * phases.get(m, k).cos());
    let j_mat = DMatrix::from_fn(n, n, |m, k| 0.5 * strength(m, k) * phases.get(m, k).sin());
    Ok(SystemModel {
        emitters,
        phases,
        gamma_mat,
        j_mat,
    })
}

impl SystemModel {
    pub fn len(&self) -> usize {
        self.emitters.len()
    }

    pub fn is_empty(&self) -> bool {
        self.emitters.is_empty()
    }

    pub fn emitters(&self) -> &[EmitterParams] {
        &self.emitters
    }

    pub fn emitter(&self, m: usize) -> &EmitterParams {
        &self.emitters[m]
    }

    pub fn phases(&self) -> &PhaseLags {
        &self.phases
    }

    /// Γ_mn/2π, GHz.
    pub fn gamma_mat(&self) -> &DMatrix<f64> {
        &self.gamma_mat
    }

    /// J_mn/2π, GHz.
    pub fn j_mat(&self) -> &DMatrix<f64> {
        &self.j_mat
    }

    /// Hilbert-space dimension 2^N.
    pub fn dim(&self) -> usize {
        1 << self.emitters.len()
    }

    /// Copy with `offsets[m]` GHz added to each emitter's detuning. The
    /// couplings do not depend on detuning and are reused.
    pub fn with_detuning_offsets(&self, offsets: &[f64]) -> Result<SystemModel> {
        if offsets.len() != self.len() {
            return Err(Error::DimensionMismatch {
                expected: self.len(),
                found: offsets.len(),
                context: "detuning offsets",
            });
        }
        let mut out = self.clone();
        for (e, d) in out.emitters.iter_mut().zip(offsets) {
            e.detuning += d;
            if !e.detuning.is_finite() {
                return Err(Error::invalid("detuning", "must be finite"));
            }
        }
        Ok(out)
    }

    /// Copy with emitter `m` set to detuning `detuning` GHz.
    pub fn with_detuning(&self, m: usize, detuning: f64) -> Result<SystemModel> {
        if m >= self.len() {
            return Err(Error::invalid(
                "emitter",
                format!("index {m} out of range for {} emitters", self.len()),
            ));
        }
        let mut offsets = vec![0.0; self.len()];
        offsets[m] = detuning - self.emitters[m].detuning;
        self.with_detuning_offsets(&offsets)
    }

    /// Copy with the pure-dephasing rate of every emitter replaced.
    pub fn with_dephasing(&self, gamma_dephase: f64) -> Result<SystemModel> {
        let mut out = self.clone();
        for (i, e) in out.emitters.iter_mut().enumerate() {
            e.gamma_dephase = gamma_dephase;
            e.validate(i)?;
        }
        Ok(out)
    }

    /// Largest rate, detuning or coupling in the model, GHz.
    pub fn max_frequency(&self) -> f64 {
        let per_emitter = self.emitters.iter().map(|e| {
            e.gamma_total
                .max(e.detuning.abs())
                .max(e.gamma_dephase)
        });
        let couplings = self
            .gamma_mat
            .iter()
            .chain(self.j_mat.iter())
            .map(|x| x.abs());
        per_emitter.chain(couplings).fold(0.0, f64::max)
    }
}

/// Single-excitation effective Hamiltonian in angular units (rad/ns).
///
/// Off-diagonal entries are 2π(J_mn − iΓ_mn/2); the diagonal is
/// 2π(Δ_n − iΓ_n/2), i.e. waveguide and side-mode decay combined.
pub fn effective_hamiltonian(system: &SystemModel) -> DMatrix<Complex64> {
    let n = system.len();
    DMatrix::from_fn(n, n, |row, col| {
        if row == col {
            let e = system.emitter(row);
            Complex64::new(angular(e.detuning), -0.5 * angular(e.gamma_total))
        } else {
            Complex64::new(
                angular(system.j_mat[(col, row)]),
                -0.5 * angular(system.gamma_mat[(col, row)]),
            )
        }
    })
}

/// Offsets of the two exciton branches from ν0 at field `field_t`, GHz:
/// `σ_dia·B² ± ½√(FSS² + (g μ_B B/h)²)`, returned as (high, low).
pub fn zeeman_transitions(zeeman: &ZeemanData, field_t: f64) -> Result<(f64, f64)> {
    if !(field_t.is_finite() && field_t >= 0.0) {
        return Err(Error::invalid("field", "magnetic field must be non-negative"));
    }
    let shift = zeeman.dia_shift_ghz_per_t2 * field_t * field_t;
    let zeeman_split = zeeman.g_factor * BOHR_MAGNETON_GHZ_PER_T * field_t;
    let half = 0.5 * zeeman.fss_ghz.hypot(zeeman_split);
    Ok((shift + half, shift - half))
}

/// Absolute transition frequency of one branch, GHz.
pub fn branch_frequency(zeeman: &ZeemanData, branch: Branch, field_t: f64) -> Result<f64> {
    let (hi, lo) = zeeman_transitions(zeeman, field_t)?;
    let offset = match branch {
        Branch::High => hi,
        Branch::Low => lo,
    };
    Ok(zeeman.nu0_thz * 1e3 + offset)
}

const FIELD_TOLERANCE_T: f64 = 1e-4;

/// Field at which two exciton branches cross, by bisection on
/// `ν_i(B) − ν_j(B)` over `range` (tesla).
pub fn find_resonance_field(
    first: &EmitterParams,
    first_branch: Branch,
    second: &EmitterParams,
    second_branch: Branch,
    range: (f64, f64),
) -> Result<f64> {
    let za = first.zeeman.as_ref().ok_or(Error::MissingZeeman { index: 0 })?;
    let zb = second.zeeman.as_ref().ok_or(Error::MissingZeeman { index: 1 })?;
    let (mut lo, mut hi) = range;
    if !(lo.is_finite() && hi.is_finite() && lo >= 0.0 && hi > lo) {
        return Err(Error::invalid("range", "need 0 <= lo < hi"));
    }
    let diff = |b: f64| -> Result<f64> {
        Ok(branch_frequency(za, first_branch, b)? - branch_frequency(zb, second_branch, b)?)
    };

    let probes = (0..=16)
        .map(|k| diff(lo + (hi - lo) * k as f64 / 16.0))
        .collect::<Result<Vec<_>>>()?;
    if probes.iter().all(|d| d.abs() < 1e-9) {
        return Err(Error::Degenerate(
            "transition curves coincide over the whole range".into(),
        ));
    }

    let mut f_lo = diff(lo)?;
    let f_hi = diff(hi)?;
    if f_lo == 0.0 {
        return Ok(lo);
    }
    if f_hi == 0.0 {
        return Ok(hi);
    }
    if f_lo.signum() == f_hi.signum() {
        return Err(Error::NoCrossing { lo, hi });
    }
    while hi - lo > FIELD_TOLERANCE_T {
        let mid = 0.5 * (lo + hi);
        let f_mid = diff(mid)?;
        if f_mid == 0.0 {
            return Ok(mid);
        }
        if f_mid.signum() == f_lo.signum() {
            lo = mid;
            f_lo = f_mid;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use std::f64::consts::PI;

    fn qd23() -> SystemModel {
        // √(β2β3) = 0.8 as used for the tabulated couplings.
        build_system(
            vec![EmitterParams::new(0.79, 0.8), EmitterParams::new(0.73, 0.8)],
            PhaseLags::pair(0.05),
        )
        .unwrap()
    }

    #[test]
    fn unit_round_trip() {
        for x in [0.0, 1e-9, 0.79, 3.5e4, -2.0] {
            assert_eq!(linear(angular(x)), x);
        }
    }

    #[test]
    fn qd23_dissipative_coupling() {
        let s = qd23();
        assert!((s.gamma_mat()[(0, 1)] - 0.61).abs() < 0.005);
        // the quoted pair value is 0.03 GHz; the half-amplitude formula gives 0.0152
        assert_relative_eq!(s.j_mat()[(0, 1)], 0.5 * 0.8 * (0.79f64 * 0.73).sqrt() * 0.05f64.sin());
        assert_relative_eq!(s.gamma_mat()[(0, 0)], 0.8 * 0.79);
    }

    #[test]
    fn quarter_wave_is_purely_dispersive() {
        let s = build_system(
            vec![EmitterParams::new(0.9, 0.7), EmitterParams::new(0.6, 0.95)],
            PhaseLags::pair(PI / 2.0),
        )
        .unwrap();
        assert!(s.gamma_mat()[(0, 1)].abs() < 1e-16);
        assert_relative_eq!(s.j_mat()[(0, 1)], 0.5 * (0.9f64 * 0.7 * 0.6 * 0.95).sqrt());
    }

    #[test]
    fn ideal_dissipative_pair() {
        let s = build_system(
            vec![EmitterParams::new(1.0, 1.0), EmitterParams::new(1.0, 1.0)],
            PhaseLags::pair(0.0),
        )
        .unwrap();
        assert_eq!(s.gamma_mat()[(0, 1)], 1.0);
        assert_eq!(s.j_mat()[(0, 1)], 0.0);
    }

    #[test]
    fn rejects_bad_inputs() {
        let bad_beta = build_system(vec![EmitterParams::new(1.0, 1.2)], PhaseLags::single());
        assert!(matches!(bad_beta, Err(Error::InvalidParameter { .. })));
        let bad_gamma = build_system(vec![EmitterParams::new(0.0, 0.5)], PhaseLags::single());
        assert!(matches!(bad_gamma, Err(Error::InvalidParameter { .. })));
        let mismatch = build_system(vec![EmitterParams::new(1.0, 0.5)], PhaseLags::pair(0.1));
        assert!(matches!(mismatch, Err(Error::DimensionMismatch { .. })));
        let asym = PhaseLags::from_rows(&[vec![0.0, 0.1], vec![0.2, 0.0]]);
        assert!(asym.is_err());
    }

    #[test]
    fn single_emitter_hamiltonian_is_pure_decay() {
        let s = build_system(vec![EmitterParams::new(0.79, 0.6)], PhaseLags::single()).unwrap();
        let h = effective_hamiltonian(&s);
        assert_eq!(h.shape(), (1, 1));
        assert_relative_eq!(h[(0, 0)].re, 0.0);
        assert_relative_eq!(h[(0, 0)].im, -PI * 0.79);
    }

    #[test]
    fn hamiltonian_trace() {
        let s = qd23().with_detuning_offsets(&[0.4, -1.1]).unwrap();
        let tr = effective_hamiltonian(&s).trace();
        assert_relative_eq!(tr.re, TAU * (0.4 - 1.1), epsilon = 1e-14);
        assert_relative_eq!(tr.im, -PI * (0.79 + 0.73), epsilon = 1e-14);
    }

    #[test]
    fn separations_in_cells_are_cumulative() {
        let p = PhaseLags::from_separations_cells(&[5.2, 4.0], PI).unwrap();
        assert_relative_eq!(p.get(0, 2), p.get(0, 1) + p.get(1, 2), epsilon = 1e-12);
        assert_relative_eq!(p.get(1, 2), 4.0 * PI, epsilon = 1e-12);
        let nm = PhaseLags::from_separations_nm(&[960.0], PI).unwrap();
        assert_relative_eq!(nm.get(0, 1), 4.0 * PI);
    }

    fn qd3_zeeman() -> ZeemanData {
        ZeemanData {
            nu0_thz: 318.75,
            fss_ghz: 4.1,
            g_factor: 1.67,
            dia_shift_ghz_per_t2: 2.05,
        }
    }

    #[test]
    fn zero_field_splitting_is_fss() {
        let (hi, lo) = zeeman_transitions(&qd3_zeeman(), 0.0).unwrap();
        assert_relative_eq!(hi - lo, 4.1, epsilon = 1e-12);
        assert_relative_eq!(hi + lo, 0.0, epsilon = 1e-12);
    }

    #[test]
    fn diamagnetic_shift_at_two_tesla() {
        let (hi, lo) = zeeman_transitions(&qd3_zeeman(), 2.0).unwrap();
        assert_relative_eq!(0.5 * (hi + lo), 8.2, epsilon = 1e-12);
    }

    #[test]
    fn zero_g_factor_keeps_fss() {
        let z = ZeemanData {
            g_factor: 0.0,
            ..qd3_zeeman()
        };
        for b in [0.3, 1.0, 3.7] {
            let (hi, lo) = zeeman_transitions(&z, b).unwrap();
            assert_relative_eq!(hi - lo, 4.1, epsilon = 1e-12);
            assert_relative_eq!(0.5 * (hi + lo), 2.05 * b * b, epsilon = 1e-12);
        }
        assert!(zeeman_transitions(&z, -1.0).is_err());
    }

    #[test]
    fn resonance_search_edge_cases() {
        let a = EmitterParams::new(0.8, 0.8).with_zeeman(qd3_zeeman());
        let same = find_resonance_field(&a, Branch::High, &a, Branch::High, (0.0, 4.0));
        assert!(matches!(same, Err(Error::Degenerate(_))));

        let far = EmitterParams::new(0.8, 0.8).with_zeeman(ZeemanData {
            nu0_thz: 319.75,
            ..qd3_zeeman()
        });
        let none = find_resonance_field(&a, Branch::High, &far, Branch::Low, (0.0, 4.0));
        assert!(matches!(none, Err(Error::NoCrossing { .. })));

        let bare = EmitterParams::new(0.8, 0.8);
        assert!(matches!(
            find_resonance_field(&bare, Branch::High, &a, Branch::Low, (0.0, 1.0)),
            Err(Error::MissingZeeman { .. })
        ));
    }

    #[test]
    fn resonance_search_recovers_constructed_crossing() {
        let qd3 = qd3_zeeman();
        let mut qd2 = ZeemanData {
            nu0_thz: 0.0,
            fss_ghz: 6.5,
            g_factor: 1.91,
            dia_shift_ghz_per_t2: 2.05,
        };
        // Place QD2's low branch on QD3's high branch at 1.05 T.
        let target = 1.05;
        let (hi3, _) = zeeman_transitions(&qd3, target).unwrap();
        let (_, lo2) = zeeman_transitions(&qd2, target).unwrap();
        qd2.nu0_thz = (qd3.nu0_thz * 1e3 + hi3 - lo2) / 1e3;
        let e2 = EmitterParams::new(0.79, 0.8).with_zeeman(qd2);
        let e3 = EmitterParams::new(0.73, 0.8).with_zeeman(qd3);
        let b = find_resonance_field(&e2, Branch::Low, &e3, Branch::High, (0.0, 3.0)).unwrap();
        assert!((b - target).abs() < 1e-3, "{b}");
    }
}
