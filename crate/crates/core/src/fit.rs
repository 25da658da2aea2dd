//! Multi-exponential decay fitting.
//!
//! Model: I(t) = Σ_k a_k·exp(−2π Γ_k t) with rates in GHz and t the absolute
//! sample time in ns. Residuals are weighted by 1/√max(I, 10⁻⁶·max I), as
//! for photon-counting data. Initial rates come from a variable-projection
//! scan over a log-spaced grid; Levenberg–Marquardt refines all parameters.

use std::f64::consts::TAU;

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::ensemble::TimeTrace;
use crate::error::{Error, Result};

pub const MIN_FIT_SAMPLES: usize = 20;
const MAX_ITERATIONS: usize = 500;
const PARAM_TOL: f64 = 1e-8;
const WEIGHT_FLOOR: f64 = 1e-6;
/// Rates closer than this (relative) are merged into one exponential.
const DEGENERATE_RATE_GAP: f64 = 0.02;
const GRID_POINTS: usize = 48;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
#[serde(tag = "kind", content = "value", rename_all = "lowercase")]
pub enum Enhancement {
    Finite(f64),
    /// No slow component is visible: a dark state, or a single exponential.
    Unbounded,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BiExpFit {
    pub a_fast: f64,
    pub a_slow: f64,
    /// GHz.
    pub gamma_fast: f64,
    pub gamma_slow: f64,
    pub a_bg: Option<f64>,
    pub gamma_bg: Option<f64>,
    pub t_start: f64,
    /// Weighted RMS residual.
    pub residual_rms: f64,
    /// One-sigma parameter errors in the order a_fast, Γ_fast, a_slow, Γ_slow
    /// (, a_bg, Γ_bg); empty for a collapsed fit.
    pub std_errors: Vec<f64>,
    pub iterations: usize,
    pub n_samples: usize,
    /// The two rates merged or one amplitude vanished; only `gamma_fast`
    /// and `a_fast` carry the single exponential.
    pub single_exponential: bool,
}

impl BiExpFit {
    pub fn enhancement(&self) -> Enhancement {
        if self.single_exponential || self.gamma_slow <= 0.0 {
            Enhancement::Unbounded
        } else {
            Enhancement::Finite(self.gamma_fast / self.gamma_slow)
        }
    }

    pub fn evaluate(&self, t: f64) -> f64 {
        let mut v = self.a_fast * (-TAU * self.gamma_fast * t).exp();
        if !self.single_exponential {
            v += self.a_slow * (-TAU * self.gamma_slow * t).exp();
        }
        if let (Some(a), Some(g)) = (self.a_bg, self.gamma_bg) {
            v += a * (-TAU * g * t).exp();
        }
        v
    }
}

/// First sample strictly after the maximum plus one IRF FWHM.
pub fn default_t_start(trace: &TimeTrace, irf_fwhm: f64) -> Result<f64> {
    let cut = trace.times[trace.argmax()] + irf_fwhm.max(0.0);
    trace
        .times
        .iter()
        .copied()
        .find(|&t| t > cut)
        .ok_or_else(|| Error::invalid("t_start", "no samples after the maximum"))
}

struct Data {
    t: Vec<f64>,
    y: Vec<f64>,
    w: Vec<f64>,
}

impl Data {
    fn new(trace: &TimeTrace, t_start: f64) -> Result<Data> {
        let ymax = trace.values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if !(ymax.is_finite() && ymax > 0.0) {
            return Err(Error::Degenerate("trace has no positive samples".into()));
        }
        let floor = WEIGHT_FLOOR * ymax;
        let mut d = Data {
            t: Vec::new(),
            y: Vec::new(),
            w: Vec::new(),
        };
        for (&t, &y) in trace.times.iter().zip(&trace.values) {
            if t < t_start {
                continue;
            }
            if !y.is_finite() || y < -1e-9 * ymax {
                return Err(Error::invalid(
                    "trace",
                    format!("negative or non-finite value {y} at t = {t} ns"),
                ));
            }
            d.t.push(t);
            d.y.push(y);
            // zero bins carry no information about the rate
            d.w.push(if y > 0.0 { 1.0 / y.max(floor) } else { 0.0 });
        }
        let informative = d.w.iter().filter(|&&w| w > 0.0).count();
        if informative < MIN_FIT_SAMPLES {
            return Err(Error::invalid(
                "trace",
                format!("need at least {MIN_FIT_SAMPLES} positive samples after t_start, found {informative}"),
            ));
        }
        Ok(d)
    }

    fn cost(&self, p: &[f64]) -> f64 {
        self.t
            .iter()
            .zip(&self.y)
            .zip(&self.w)
            .map(|((&t, &y), &w)| {
                let r = y - model(p, t);
                w * r * r
            })
            .sum()
    }
}

fn model(p: &[f64], t: f64) -> f64 {
    p.chunks_exact(2).map(|c| c[0] * (-TAU * c[1] * t).exp()).sum()
}

/// Best non-negative amplitudes and cost for fixed rates, from the
/// precomputed weighted Gram matrix.
fn project(gram: &DMatrix<f64>, rhs: &DVector<f64>, yy: f64, idx: &[usize]) -> Option<(Vec<f64>, f64)> {
    let k = idx.len();
    let g = DMatrix::from_fn(k, k, |i, j| gram[(idx[i], idx[j])]);
    let b = DVector::from_fn(k, |i, _| rhs[idx[i]]);
    let a = g.cholesky()?.solve(&b);
    if a.iter().any(|&x| !(x > 0.0)) {
        return None;
    }
    Some((a.iter().copied().collect(), yy - b.dot(&a)))
}

fn initial_guess(d: &Data, n_exp: usize) -> Result<Vec<f64>> {
    let t0 = d.t[0];
    let span = d.t[d.t.len() - 1] - t0;
    let dt = span / (d.t.len() - 1) as f64;
    let (lo, hi) = ((0.02 / span).ln(), (0.5 / dt).ln());
    let rates: Vec<f64> = (0..GRID_POINTS)
        .map(|i| (lo + (hi - lo) * i as f64 / (GRID_POINTS - 1) as f64).exp())
        .collect();
    // basis shifted to the window start for conditioning; amplitudes are
    // converted back to t = 0 below
    let basis: Vec<Vec<f64>> = rates
        .iter()
        .map(|&k| d.t.iter().map(|&t| (-TAU * k * (t - t0)).exp()).collect())
        .collect();
    let m = rates.len();
    let gram = DMatrix::from_fn(m, m, |i, j| {
        (0..d.t.len()).map(|s| d.w[s] * basis[i][s] * basis[j][s]).sum()
    });
    let rhs = DVector::from_fn(m, |i, _| (0..d.t.len()).map(|s| d.w[s] * basis[i][s] * d.y[s]).sum());
    let yy: f64 = d.y.iter().zip(&d.w).map(|(y, w)| w * y * y).sum();

    let mut best: Option<(f64, Vec<usize>, Vec<f64>)> = None;
    let mut consider = |idx: Vec<usize>| {
        if let Some((a, c)) = project(&gram, &rhs, yy, &idx) {
            if best.as_ref().is_none_or(|b| c < b.0) {
                best = Some((c, idx, a));
            }
        }
    };
    match n_exp {
        1 => (0..m).for_each(|i| consider(vec![i])),
        2 => {
            for i in 0..m {
                for j in i + 1..m {
                    consider(vec![j, i]);
                }
            }
        }
        _ => {
            for i in 0..m {
                for j in i + 1..m {
                    for k in j + 1..m {
                        consider(vec![k, j, i]);
                    }
                }
            }
        }
    }
    let (_, idx, a) = best.ok_or_else(|| Error::Degenerate("no positive-amplitude initialization".into()))?;
    Ok(idx
        .iter()
        .zip(&a)
        .flat_map(|(&i, &amp)| [amp * (TAU * rates[i] * t0).exp(), rates[i]])
        .collect())
}

struct LmResult {
    params: Vec<f64>,
    cost: f64,
    iterations: usize,
    jtj: DMatrix<f64>,
}

fn levenberg_marquardt(d: &Data, mut p: Vec<f64>) -> Result<LmResult> {
    let np = p.len();
    let ns = d.t.len();
    let jacobian = |p: &[f64]| {
        let mut j = DMatrix::zeros(ns, np);
        let mut r = DVector::zeros(ns);
        for s in 0..ns {
            let sw = d.w[s].sqrt();
            let t = d.t[s];
            let mut f = 0.0;
            for c in 0..np / 2 {
                let (a, k) = (p[2 * c], p[2 * c + 1]);
                let e = (-TAU * k * t).exp();
                f += a * e;
                j[(s, 2 * c)] = sw * e;
                j[(s, 2 * c + 1)] = -sw * a * TAU * t * e;
            }
            r[s] = sw * (d.y[s] - f);
        }
        (j, r)
    };

    let mut cost = d.cost(&p);
    let mut lambda = 1e-3;
    for iter in 1..=MAX_ITERATIONS {
        let (j, r) = jacobian(&p);
        let jtj = j.transpose() * &j;
        let g = j.transpose() * &r;
        let mut accepted = false;
        let mut small_step = false;
        while lambda < 1e16 {
            let mut a = jtj.clone();
            for i in 0..np {
                a[(i, i)] += lambda * jtj[(i, i)].max(1e-300);
            }
            let Some(step) = a.cholesky().map(|c| c.solve(&g)) else {
                lambda *= 10.0;
                continue;
            };
            let trial: Vec<f64> = p.iter().zip(step.iter()).map(|(x, s)| x + s).collect();
            let rates_ok = trial.chunks_exact(2).all(|c| c[1] > 0.0);
            let trial_cost = if rates_ok { d.cost(&trial) } else { f64::INFINITY };
            let rel = step
                .iter()
                .zip(&p)
                .map(|(s, x)| s.abs() / x.abs().max(1e-300))
                .fold(0.0, f64::max);
            if trial_cost <= cost {
                p = trial;
                cost = trial_cost;
                lambda = (lambda * 0.1).max(1e-12);
                accepted = true;
                small_step = rel < PARAM_TOL;
                break;
            }
            if rel < PARAM_TOL {
                small_step = true;
                break;
            }
            lambda *= 10.0;
        }
        if small_step || (!accepted && lambda >= 1e16) {
            let (j, _) = jacobian(&p);
            return Ok(LmResult {
                params: p,
                cost,
                iterations: iter,
                jtj: j.transpose() * j,
            });
        }
    }
    Err(Error::FitNonConvergence {
        iterations: MAX_ITERATIONS,
    })
}

fn std_errors(lm: &LmResult, n_samples: usize) -> Vec<f64> {
    let dof = n_samples.saturating_sub(lm.params.len()).max(1) as f64;
    let s2 = lm.cost / dof;
    match lm.jtj.clone().try_inverse() {
        Some(cov) => (0..lm.params.len()).map(|i| (cov[(i, i)] * s2).max(0.0).sqrt()).collect(),
        None => vec![f64::NAN; lm.params.len()],
    }
}

fn sorted_by_rate(p: &[f64]) -> Vec<(f64, f64)> {
    let mut comps: Vec<(f64, f64)> = p.chunks_exact(2).map(|c| (c[0], c[1])).collect();
    comps.sort_by(|a, b| b.1.total_cmp(&a.1));
    comps
}

/// Fits fast and slow exponentials (and optionally a slower background) to
/// samples at or after `t_start`.
pub fn fit_biexponential(trace: &TimeTrace, t_start: f64, with_background: bool) -> Result<BiExpFit> {
    if !t_start.is_finite() || t_start > trace.times[trace.len() - 1] {
        return Err(Error::invalid("t_start", "must lie within the trace"));
    }
    let d = Data::new(trace, t_start)?;
    let n_exp = if with_background { 3 } else { 2 };
    let n_samples = d.t.len();

    let full = match initial_guess(&d, n_exp).and_then(|p0| levenberg_marquardt(&d, p0)) {
        Err(e @ Error::FitNonConvergence { .. }) => return Err(e),
        other => other,
    };
    if let Ok(lm) = &full {
        let comps = sorted_by_rate(&lm.params);
        let (fast, slow) = (comps[0], comps[1]);
        let merged = (fast.1 - slow.1).abs() < DEGENERATE_RATE_GAP * fast.1;
        let amplitudes_ok = comps.iter().all(|c| c.0 > 0.0);
        if !merged && amplitudes_ok {
            let mut errs = std_errors(lm, n_samples);
            // reorder errors to match the rate ordering
            let order: Vec<usize> = {
                let mut idx: Vec<usize> = (0..n_exp).collect();
                idx.sort_by(|&a, &b| lm.params[2 * b + 1].total_cmp(&lm.params[2 * a + 1]));
                idx
            };
            errs = order.iter().flat_map(|&i| [errs[2 * i], errs[2 * i + 1]]).collect();
            return Ok(BiExpFit {
                a_fast: fast.0,
                a_slow: slow.0,
                gamma_fast: fast.1,
                gamma_slow: slow.1,
                a_bg: comps.get(2).map(|c| c.0),
                gamma_bg: comps.get(2).map(|c| c.1),
                t_start,
                residual_rms: (lm.cost / n_samples as f64).sqrt(),
                std_errors: errs,
                iterations: lm.iterations,
                n_samples,
                single_exponential: false,
            });
        }
    }

    let lm = levenberg_marquardt(&d, initial_guess(&d, 1)?)?;
    let (a, k) = (lm.params[0], lm.params[1]);
    Ok(BiExpFit {
        a_fast: a,
        a_slow: 0.0,
        gamma_fast: k,
        gamma_slow: k,
        a_bg: None,
        gamma_bg: None,
        t_start,
        residual_rms: (lm.cost / n_samples as f64).sqrt(),
        std_errors: std_errors(&lm, n_samples),
        iterations: lm.iterations,
        n_samples,
        single_exponential: true,
    })
}
