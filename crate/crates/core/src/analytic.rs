//! Closed-form two-emitter results: output fields after exciting the left
//! emitter, eigen-rates, oscillation frequency and the approximate collective
//! rates under spectral diffusion.

use std::f64::consts::{FRAC_1_SQRT_2, TAU};

use nalgebra::linalg::Schur;
use num_complex::Complex64;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::liouvillian::Port;
use crate::model::{angular, effective_hamiltonian, linear, SystemModel};

const I: Complex64 = Complex64::new(0.0, 1.0);

/// Two emitters with a single phase lag. `delta` is Δ_1 − Δ_2 in GHz, the
/// detuning of the initially excited (left) emitter relative to its partner.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TwoEmitterParams {
    pub gamma1: f64,
    pub gamma2: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub delta: f64,
    pub phi: f64,
}

impl TwoEmitterParams {
    pub fn from_system(system: &SystemModel) -> Result<Self> {
        if system.len() != 2 {
            return Err(Error::DimensionMismatch {
                expected: 2,
                found: system.len(),
                context: "closed form needs two emitters",
            });
        }
        let (a, b) = (system.emitter(0), system.emitter(1));
        Ok(TwoEmitterParams {
            gamma1: a.gamma_total,
            gamma2: b.gamma_total,
            beta1: a.beta,
            beta2: b.beta,
            delta: a.detuning - b.detuning,
            phi: system.phases().get(0, 1),
        })
    }

    fn validate(&self) -> Result<()> {
        for (name, g) in [("gamma1", self.gamma1), ("gamma2", self.gamma2)] {
            if !(g.is_finite() && g > 0.0) {
                return Err(Error::invalid(name, "must be positive"));
            }
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..=1.0).contains(&b) {
                return Err(Error::invalid(name, "must lie in [0, 1]"));
            }
        }
        if !(self.delta.is_finite() && self.phi.is_finite()) {
            return Err(Error::invalid("delta/phi", "must be finite"));
        }
        Ok(())
    }

    /// S = √(4e^{2iφ}Γ_1Γ_2β_1β_2 + (2iΔ − Γ_1 + Γ_2)²) in rad/ns, principal
    /// branch. The Δ of this expression is Δ_2 − Δ_1.
    fn s_angular(&self) -> Complex64 {
        let (g1, g2) = (angular(self.gamma1), angular(self.gamma2));
        let d = -angular(self.delta);
        let a = Complex64::from_polar(4.0 * g1 * g2 * self.beta1 * self.beta2, 2.0 * self.phi);
        let b = Complex64::new(g2 - g1, 2.0 * d);
        (a + b * b).sqrt()
    }
}

/// Super- and subradiant parts of one output field. Fields are normalized so
/// that |e_sup + e_sub|² is the port intensity in GHz.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct FieldPair {
    pub e_sup: Complex64,
    pub e_sub: Complex64,
    /// Intensity decay rates, GHz.
    pub rate_sup: f64,
    pub rate_sub: f64,
    /// S/2π, GHz.
    pub s_param: Complex64,
    /// S ≈ 0: the split is undefined and the full field is in `e_sup`.
    pub exceptional: bool,
}

impl FieldPair {
    pub fn total(&self) -> Complex64 {
        self.e_sup + self.e_sub
    }

    pub fn intensity(&self) -> f64 {
        self.total().norm_sqr()
    }
}

/// Output fields at `port` a time `t` (ns) after a quasi-instantaneous π
/// pulse on the left emitter, without dephasing.
pub fn closed_form_fields(p: &TwoEmitterParams, port: Port, t: f64) -> Result<FieldPair> {
    p.validate()?;
    let (g1, g2) = (angular(p.gamma1), angular(p.gamma2));
    let d = -angular(p.delta);
    let s = p.s_angular();
    let echo = match port {
        Port::Right => Complex64::new(1.0, 0.0),
        Port::Left => Complex64::from_polar(1.0, 2.0 * p.phi),
    };
    let prefactor = (g1 * p.beta1).sqrt() * FRAC_1_SQRT_2 / TAU.sqrt();
    let a = echo * (g2 * p.beta2) - I * d + Complex64::new(0.5 * (g1 - g2), 0.0);
    let common = (-(g1 + g2) * t / 4.0).exp();
    let scale = g1 + g2;

    if s.norm() < 1e-6 * scale {
        // cosh(x) − A (t/2) sinh(x)/x with x = St/4
        let x = s * t / 4.0;
        let sinhc = if x.norm() < 1e-8 {
            Complex64::new(1.0, 0.0) + x * x / 6.0
        } else {
            x.sinh() / x
        };
        let field = -I * prefactor * common * (x.cosh() - a * (t / 2.0) * sinhc);
        let rate = linear(0.5 * (g1 + g2));
        return Ok(FieldPair {
            e_sup: field,
            e_sub: Complex64::new(0.0, 0.0),
            rate_sup: rate,
            rate_sub: rate,
            s_param: s / TAU,
            exceptional: true,
        });
    }

    let mut pair = FieldPair {
        e_sup: -I * prefactor * (a + s / 2.0) / s * (-(s * t) / 4.0).exp() * common,
        e_sub: I * prefactor * (a - s / 2.0) / s * ((s * t) / 4.0).exp() * common,
        rate_sup: linear(0.5 * (g1 + g2 + s.re)),
        rate_sub: linear(0.5 * (g1 + g2 - s.re)),
        s_param: s / TAU,
        exceptional: false,
    };
    if s.re.abs() < 1e-12 * scale && (a - s / 2.0).norm() > (a + s / 2.0).norm() {
        std::mem::swap(&mut pair.e_sup, &mut pair.e_sub);
    }
    Ok(pair)
}

/// Intensity decay rates −2·Im(λ)/2π of the effective Hamiltonian, GHz,
/// sorted fastest first.
pub fn eigen_rates(system: &SystemModel) -> Result<Vec<f64>> {
    let values = Schur::new(effective_hamiltonian(system))
        .eigenvalues()
        .ok_or_else(|| Error::Degenerate("effective Hamiltonian is not triangularizable".into()))?;
    let mut rates: Vec<f64> = values.iter().map(|l| linear(-2.0 * l.im)).collect();
    rates.sort_by(|a, b| b.total_cmp(a));
    Ok(rates)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum DampingRegime {
    Underdamped,
    Overdamped,
    Critical,
}

pub fn damping_regime(delta: f64, gamma_mn: f64) -> DampingRegime {
    let d = delta.abs();
    let g = gamma_mn.abs();
    if (d - g).abs() <= 1e-9 {
        DampingRegime::Critical
    } else if d > g {
        DampingRegime::Underdamped
    } else {
        DampingRegime::Overdamped
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Oscillation {
    /// f_osc/2π, GHz.
    pub f_osc: Complex64,
    /// π/f_osc from the real part, ns.
    pub peak_time: Option<f64>,
    /// f_osc has an imaginary part, so the oscillation is also damped.
    pub damped: bool,
    /// The formula assumes Γ_m = Γ_n.
    pub assumes_equal_rates: bool,
}

/// f_osc = √(Δ² + (2J − iΓ_mn)²), all in GHz.
pub fn oscillation_frequency(delta: f64, j: f64, gamma_mn: f64) -> Oscillation {
    let c = Complex64::new(2.0 * j, -gamma_mn);
    let f = (Complex64::new(delta * delta, 0.0) + c * c).sqrt();
    let tol = 1e-12 * (delta.abs() + j.abs() + gamma_mn.abs()).max(f64::MIN_POSITIVE);
    Oscillation {
        f_osc: f,
        peak_time: (f.re > tol).then(|| 0.5 / f.re),
        damped: f.im.abs() > tol,
        assumes_equal_rates: true,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CollectiveRates {
    pub gamma_sup: f64,
    pub gamma_sub: f64,
    /// Γ_sup/Γ_sub, absent when the formula breaks down.
    pub enhancement: Option<f64>,
    /// Γ_sub ≤ 0.
    pub breakdown: bool,
    /// σ_sd is not small compared with Γ̄.
    pub outside_validity: bool,
}

/// Γ_sup ≈ Γ̄ + Γ_mn − σ²/(2βΓ̄), Γ_sub ≈ Γ̄ − Γ_mn + σ²/(2βΓ̄), GHz.
pub fn approx_collective_rates(
    gamma_bar: f64,
    beta: f64,
    gamma_mn: f64,
    sigma_sd: f64,
) -> Result<CollectiveRates> {
    if !(gamma_bar.is_finite() && gamma_bar > 0.0) {
        return Err(Error::invalid("gamma_bar", "must be positive"));
    }
    if !(beta > 0.0 && beta <= 1.0) {
        return Err(Error::invalid("beta", "must lie in (0, 1]"));
    }
    if !(sigma_sd.is_finite() && sigma_sd >= 0.0) {
        return Err(Error::invalid("sigma_sd", "must be non-negative"));
    }
    if !gamma_mn.is_finite() {
        return Err(Error::invalid("gamma_mn", "must be finite"));
    }
    let shift = sigma_sd * sigma_sd / (2.0 * beta * gamma_bar);
    let gamma_sup = gamma_bar + gamma_mn - shift;
    let gamma_sub = gamma_bar - gamma_mn + shift;
    let breakdown = gamma_sub <= 0.0;
    Ok(CollectiveRates {
        gamma_sup,
        gamma_sub,
        enhancement: (!breakdown).then(|| gamma_sup / gamma_sub),
        breakdown,
        outside_validity: sigma_sd > gamma_bar,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SubradiantExpansion {
    pub rate: f64,
    /// |φ| < 0.5 and |Δ| < Γ/2.
    pub in_window: bool,
}

/// Γ_sub ≈ Γ(1−β) + Γβφ²/2 + (2−φ²)Δ²/(4Γβ), GHz.
pub fn subradiant_rate_expansion(
    gamma: f64,
    beta: f64,
    phi: f64,
    delta: f64,
) -> Result<SubradiantExpansion> {
    if !(gamma.is_finite() && gamma > 0.0) {
        return Err(Error::invalid("gamma", "must be positive"));
    }
    if !(beta > 0.0 && beta <= 1.0) {
        return Err(Error::invalid("beta", "must lie in (0, 1]"));
    }
    if !(phi.is_finite() && delta.is_finite()) {
        return Err(Error::invalid("phi/delta", "must be finite"));
    }
    let rate = gamma * (1.0 - beta)
        + 0.5 * gamma * beta * phi * phi
        + (2.0 - phi * phi) * delta * delta / (4.0 * gamma * beta);
    Ok(SubradiantExpansion {
        rate,
        in_window: phi.abs() < 0.5 && delta.abs() < 0.5 * gamma,
    })
}
