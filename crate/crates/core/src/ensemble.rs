//! Spectral-diffusion averaging, detector-response convolution and trace
//! normalization.

use nalgebra::{DMatrix, SymmetricEigen};
use num_complex::Complex64;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::liouvillian::CollectivePopulations;
use crate::propagate::{Diagnostics, Trajectory};

/// FWHM of a Gaussian over its standard deviation, 2√(2 ln 2).
pub const FWHM_PER_SIGMA: f64 = 2.354_820_045_030_949;

pub const SNSPD_FWHM_NS: f64 = 0.2;
pub const APD_FWHM_NS: f64 = 0.04;

/// How detuning offsets are drawn.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OffsetModel {
    /// One Gaussian offset of width `sigma` (GHz) on emitter `emitter`,
    /// i.e. on the relative detuning of a pair.
    Relative { sigma: f64, emitter: usize },
    /// Independent offsets per emitter (tensor-product quadrature).
    Independent { sigmas: Vec<f64> },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Scheme {
    GaussHermite { n_nodes: usize },
    MonteCarlo { seed: u64, n_samples: usize },
}

impl Default for Scheme {
    fn default() -> Self {
        Scheme::GaussHermite { n_nodes: 21 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiffusionSpec {
    pub offsets: OffsetModel,
    #[serde(default)]
    pub scheme: Scheme,
}

impl DiffusionSpec {
    pub fn relative(sigma: f64, emitter: usize) -> Self {
        DiffusionSpec {
            offsets: OffsetModel::Relative { sigma, emitter },
            scheme: Scheme::default(),
        }
    }

    pub fn with_scheme(mut self, scheme: Scheme) -> Self {
        self.scheme = scheme;
        self
    }

    pub fn validate(&self, n_emitters: usize) -> Result<()> {
        let check_sigma = |s: f64| {
            if s.is_finite() && s >= 0.0 {
                Ok(())
            } else {
                Err(Error::invalid("diffusion.sigma", "must be non-negative"))
            }
        };
        match &self.offsets {
            OffsetModel::Relative { sigma, emitter } => {
                check_sigma(*sigma)?;
                if *emitter >= n_emitters {
                    return Err(Error::invalid(
                        "diffusion.emitter",
                        format!("index {emitter} out of range for {n_emitters} emitters"),
                    ));
                }
            }
            OffsetModel::Independent { sigmas } => {
                if sigmas.len() != n_emitters {
                    return Err(Error::DimensionMismatch {
                        expected: n_emitters,
                        found: sigmas.len(),
                        context: "diffusion sigmas per emitter",
                    });
                }
                sigmas.iter().try_for_each(|s| check_sigma(*s))?;
            }
        }
        match self.scheme {
            Scheme::GaussHermite { n_nodes } if n_nodes == 0 || n_nodes % 2 == 0 => Err(
                Error::invalid("diffusion.n_nodes", "must be odd and at least 1"),
            ),
            Scheme::MonteCarlo { n_samples, .. } if n_samples < 2 => {
                Err(Error::invalid("diffusion.n_samples", "need at least 2 samples"))
            }
            _ => Ok(()),
        }
    }

    fn sigmas(&self, n_emitters: usize) -> Vec<f64> {
        match &self.offsets {
            OffsetModel::Relative { sigma, emitter } => {
                let mut s = vec![0.0; n_emitters];
                s[*emitter] = *sigma;
                s
            }
            OffsetModel::Independent { sigmas } => sigmas.clone(),
        }
    }

    fn is_trivial(&self, n_emitters: usize) -> bool {
        self.sigmas(n_emitters).iter().all(|&s| s == 0.0)
    }
}

/// Nodes and weights for ∫ f(x) N(x; 0, 1) dx (probabilists' Hermite),
/// from the Golub–Welsch eigenproblem. Weights sum to one.
pub fn gauss_hermite(n: usize) -> Result<(Vec<f64>, Vec<f64>)> {
    if n == 0 {
        return Err(Error::invalid("n_nodes", "must be at least 1"));
    }
    let jacobi = DMatrix::from_fn(n, n, |i, j| {
        if i + 1 == j || j + 1 == i {
            (i.max(j) as f64).sqrt()
        } else {
            0.0
        }
    });
    let eig = SymmetricEigen::new(jacobi);
    let mut pairs: Vec<(f64, f64)> = (0..n)
        .map(|k| (eig.eigenvalues[k], eig.eigenvectors[(0, k)].powi(2)))
        .collect();
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    let total: f64 = pairs.iter().map(|p| p.1).sum();
    // symmetrize so that ±x nodes and their weights match exactly
    let mut nodes = vec![0.0; n];
    let mut weights = vec![0.0; n];
    for k in 0..n {
        let m = n - 1 - k;
        nodes[k] = 0.5 * (pairs[k].0 - pairs[m].0);
        weights[k] = 0.5 * (pairs[k].1 + pairs[m].1) / total;
    }
    Ok((nodes, weights))
}

/// Neumaier-compensated running sum.
#[derive(Debug, Clone, Copy, Default)]
struct Compensated {
    sum: f64,
    c: f64,
}

impl Compensated {
    fn add(&mut self, x: f64) {
        let t = self.sum + x;
        if self.sum.abs() >= x.abs() {
            self.c += (self.sum - t) + x;
        } else {
            self.c += (x - t) + self.sum;
        }
        self.sum = t;
    }

    fn value(&self) -> f64 {
        self.sum + self.c
    }
}

/// Mean (and Monte-Carlo standard error) of the flattened channels.
#[derive(Debug, Clone, PartialEq)]
pub struct EnsembleResult {
    pub trajectory: Trajectory,
    /// Per-sample standard error of the right/left intensity (Monte Carlo only).
    pub stderr_right: Option<Vec<f64>>,
    pub stderr_left: Option<Vec<f64>>,
    pub n_evaluations: usize,
}

const POP_CHANNELS: usize = 8;

fn flatten(tr: &Trajectory) -> Vec<f64> {
    let n = tr.len();
    let mut v = Vec::with_capacity(n * (3 + POP_CHANNELS));
    v.extend_from_slice(&tr.intensity_left);
    v.extend_from_slice(&tr.intensity_right);
    v.extend_from_slice(&tr.excitation);
    if let Some(pops) = &tr.populations {
        for p in pops {
            v.extend_from_slice(&[
                p.p_sup,
                p.p_sub,
                p.p_ee,
                p.p_gg,
                p.p_eg,
                p.p_ge,
                p.sup_sub_coherence.re,
                p.sup_sub_coherence.im,
            ]);
        }
    }
    v
}

fn unflatten(template: &Trajectory, v: &[f64]) -> Trajectory {
    let n = template.len();
    let populations = template.populations.as_ref().map(|_| {
        v[3 * n..]
            .chunks_exact(POP_CHANNELS)
            .map(|c| CollectivePopulations {
                p_sup: c[0],
                p_sub: c[1],
                p_ee: c[2],
                p_gg: c[3],
                p_eg: c[4],
                p_ge: c[5],
                sup_sub_coherence: Complex64::new(c[6], c[7]),
            })
            .collect()
    });
    Trajectory {
        times: template.times.clone(),
        states: None,
        amplitudes: None,
        intensity_left: v[..n].to_vec(),
        intensity_right: v[n..2 * n].to_vec(),
        populations,
        excitation: v[2 * n..3 * n].to_vec(),
        diagnostics: Diagnostics {
            step_error: None,
            ..template.diagnostics
        },
    }
}

fn tensor_nodes(sigmas: &[f64], nodes: &[f64], weights: &[f64]) -> Vec<(Vec<f64>, f64)> {
    let mut grid = vec![(Vec::with_capacity(sigmas.len()), 1.0)];
    for &s in sigmas {
        if s == 0.0 {
            for g in &mut grid {
                g.0.push(0.0);
            }
            continue;
        }
        grid = grid
            .into_iter()
            .flat_map(|(offs, w)| {
                nodes.iter().zip(weights).map(move |(&x, &wx)| {
                    let mut o = offs.clone();
                    o.push(s * x);
                    (o, w * wx)
                })
            })
            .collect();
    }
    grid
}

/// Averages `sim` over Gaussian detuning offsets (GHz, one per emitter).
///
/// Evaluations run in parallel; the reduction follows node order so the
/// result does not depend on the thread count.
pub fn diffusion_average<F>(sim: F, n_emitters: usize, spec: &DiffusionSpec) -> Result<EnsembleResult>
where
    F: Fn(&[f64]) -> Result<Trajectory> + Sync,
{
    spec.validate(n_emitters)?;
    if spec.is_trivial(n_emitters) {
        let trajectory = sim(&vec![0.0; n_emitters])?;
        return Ok(EnsembleResult {
            trajectory,
            stderr_right: None,
            stderr_left: None,
            n_evaluations: 1,
        });
    }
    let sigmas = spec.sigmas(n_emitters);

    let (points, monte_carlo): (Vec<(Vec<f64>, f64)>, bool) = match spec.scheme {
        Scheme::GaussHermite { n_nodes } => {
            let (x, w) = gauss_hermite(n_nodes)?;
            (tensor_nodes(&sigmas, &x, &w), false)
        }
        Scheme::MonteCarlo { seed, n_samples } => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let w = 1.0 / n_samples as f64;
            let pts = (0..n_samples)
                .map(|_| {
                    let offs = sigmas
                        .iter()
                        .map(|&s| {
                            let z: f64 = StandardNormal.sample(&mut rng);
                            s * z
                        })
                        .collect();
                    (offs, w)
                })
                .collect();
            (pts, true)
        }
    };

    let results: Vec<Result<Vec<f64>>> = points
        .par_iter()
        .map(|(offs, _)| {
            let tr = sim(offs)?;
            let flat = flatten(&tr);
            if flat.iter().any(|x| !x.is_finite()) {
                return Err(Error::NonFinite {
                    context: format!("ensemble member at offsets {offs:?}"),
                });
            }
            Ok(flat)
        })
        .collect();

    let first_offsets = points[0].0.clone();
    let mut flats = Vec::with_capacity(results.len());
    for r in results {
        flats.push(r?);
    }
    let len = flats[0].len();
    if let Some(bad) = flats.iter().find(|f| f.len() != len) {
        return Err(Error::DimensionMismatch {
            expected: len,
            found: bad.len(),
            context: "ensemble member trajectory length",
        });
    }

    let mut mean = vec![Compensated::default(); len];
    for (flat, (_, w)) in flats.iter().zip(&points) {
        for (acc, &x) in mean.iter_mut().zip(flat) {
            acc.add(w * x);
        }
    }
    let mean: Vec<f64> = mean.iter().map(Compensated::value).collect();

    let template = sim(&first_offsets)?;
    let n = template.len();
    let (stderr_left, stderr_right) = if monte_carlo {
        let count = flats.len() as f64;
        let mut var = vec![Compensated::default(); 2 * n];
        for flat in &flats {
            for (k, acc) in var.iter_mut().enumerate() {
                let d = flat[k] - mean[k];
                acc.add(d * d);
            }
        }
        let se: Vec<f64> = var
            .iter()
            .map(|v| (v.value() / (count - 1.0) / count).sqrt())
            .collect();
        (Some(se[..n].to_vec()), Some(se[n..].to_vec()))
    } else {
        (None, None)
    };

    Ok(EnsembleResult {
        trajectory: unflatten(&template, &mean),
        stderr_right,
        stderr_left,
        n_evaluations: points.len(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Normalization {
    Max,
    Sum,
    #[default]
    None,
}

impl std::str::FromStr for Normalization {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "max" => Ok(Normalization::Max),
            "sum" => Ok(Normalization::Sum),
            "none" => Ok(Normalization::None),
            other => Err(Error::invalid("normalize", format!("unknown mode `{other}`"))),
        }
    }
}

impl std::fmt::Display for Normalization {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Normalization::Max => "max",
            Normalization::Sum => "sum",
            Normalization::None => "none",
        })
    }
}

/// One intensity channel on a time grid.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TimeTrace {
    pub times: Vec<f64>,
    pub values: Vec<f64>,
    pub normalization: Normalization,
}

impl TimeTrace {
    pub fn new(times: Vec<f64>, values: Vec<f64>) -> Result<Self> {
        if times.len() != values.len() {
            return Err(Error::DimensionMismatch {
                expected: times.len(),
                found: values.len(),
                context: "trace values vs times",
            });
        }
        if times.is_empty() {
            return Err(Error::invalid("trace", "empty trace"));
        }
        if let Some(k) = times.windows(2).position(|w| !(w[1] > w[0])) {
            return Err(Error::invalid(
                "trace.times",
                format!("time is not increasing at sample {}", k + 1),
            ));
        }
        Ok(TimeTrace {
            times,
            values,
            normalization: Normalization::None,
        })
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    /// Uniform spacing, or an error naming the first offending step.
    pub fn uniform_step(&self) -> Result<f64> {
        if self.len() < 2 {
            return Err(Error::invalid("trace", "need at least two samples"));
        }
        let h = (self.times[self.len() - 1] - self.times[0]) / (self.len() - 1) as f64;
        for (k, w) in self.times.windows(2).enumerate() {
            let dev = (w[1] - w[0] - h).abs();
            if dev > 1e-6 * h {
                return Err(Error::NonUniformGrid {
                    index: k + 1,
                    deviation: dev,
                });
            }
        }
        Ok(h)
    }

    /// Prepends zero samples so the grid starts at or before `t_start`.
    pub fn pad_before(&self, t_start: f64) -> Result<TimeTrace> {
        let h = self.uniform_step()?;
        let extra = ((self.times[0] - t_start) / h - 1e-9).ceil().max(0.0) as usize;
        let mut times = Vec::with_capacity(extra + self.len());
        let mut values = Vec::with_capacity(extra + self.len());
        for k in (1..=extra).rev() {
            times.push(self.times[0] - k as f64 * h);
            values.push(0.0);
        }
        times.extend_from_slice(&self.times);
        values.extend_from_slice(&self.values);
        Ok(TimeTrace {
            times,
            values,
            normalization: self.normalization,
        })
    }

    pub fn argmax(&self) -> usize {
        self.values
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
            .0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IrfSpec {
    pub fwhm: f64,
}

impl IrfSpec {
    pub fn snspd() -> Self {
        IrfSpec { fwhm: SNSPD_FWHM_NS }
    }

    pub fn apd() -> Self {
        IrfSpec { fwhm: APD_FWHM_NS }
    }
}

/// Discrete convolution with a Gaussian of the given FWHM, truncated at ±6σ
/// and normalized on the grid; samples outside the trace count as zero.
pub fn convolve_irf(trace: &TimeTrace, spec: &IrfSpec) -> Result<TimeTrace> {
    if !(spec.fwhm.is_finite() && spec.fwhm >= 0.0) {
        return Err(Error::invalid("irf.fwhm", "must be non-negative"));
    }
    let h = trace.uniform_step()?;
    if spec.fwhm == 0.0 {
        return Ok(trace.clone());
    }
    let sigma = spec.fwhm / FWHM_PER_SIGMA;
    let half = (6.0 * sigma / h).ceil() as usize;
    let mut kernel: Vec<f64> = (0..=2 * half)
        .map(|k| {
            let x = (k as f64 - half as f64) * h / sigma;
            (-0.5 * x * x).exp()
        })
        .collect();
    let norm: f64 = kernel.iter().sum();
    kernel.iter_mut().for_each(|k| *k /= norm);

    let n = trace.len();
    let values = (0..n)
        .map(|i| {
            let mut acc = Compensated::default();
            for (k, &w) in kernel.iter().enumerate() {
                let j = i as isize + half as isize - k as isize;
                if (0..n as isize).contains(&j) {
                    acc.add(w * trace.values[j as usize]);
                }
            }
            acc.value()
        })
        .collect();
    Ok(TimeTrace {
        times: trace.times.clone(),
        values,
        normalization: trace.normalization,
    })
}

pub fn normalize_trace(trace: &TimeTrace, mode: Normalization) -> Result<TimeTrace> {
    let norm = match mode {
        Normalization::None => return Ok(trace.clone()),
        Normalization::Max => trace.values.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        Normalization::Sum => trace.values.iter().sum(),
    };
    if !(norm.is_finite() && norm > 0.0) {
        return Err(Error::Degenerate(format!(
            "cannot {mode}-normalize a trace with normalizer {norm}"
        )));
    }
    Ok(TimeTrace {
        times: trace.times.clone(),
        values: trace.values.iter().map(|v| v / norm).collect(),
        normalization: mode,
    })
}
