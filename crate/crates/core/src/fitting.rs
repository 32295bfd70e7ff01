//! Fitting analytic kernels to given weight matrices.
//!
//! Each target is fitted independently by minimising the squared Frobenius
//! reconstruction error with projected gradient descent and Armijo
//! backtracking, restarted from several initial points.

use std::f64::consts::PI;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::acl::AKP_FLOOR;
use crate::kernels::{KernelError, KernelFamily, KernelSize, KernelSpec, WeightMatrix};

pub const ARMIJO_C: f64 = 1e-4;
/// Orientation starting points cycle through this many equal steps of pi.
pub const THETA_STRATA: usize = 8;
/// Longest move in AKP space a single iteration may make.
pub const MAX_MOVE: f64 = 0.5;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FitError {
    #[error("no targets to fit")]
    NoTargets,
    #[error("{0} has no learnable parameters to fit")]
    NoAkps(KernelFamily),
    #[error("fitting a plain kernel is exact and not supported")]
    PlainFamily,
    #[error("target {index} is {h}x{w}, expected {expected}")]
    SizeMismatch { index: usize, h: usize, w: usize, expected: KernelSize },
    #[error("{0}")]
    Config(String),
    #[error(transparent)]
    Kernel(#[from] KernelError),
}

#[derive(Clone, Debug, PartialEq)]
pub struct FitProblem {
    pub targets: Vec<WeightMatrix>,
    pub family: KernelFamily,
    pub restarts: usize,
    pub max_iters: usize,
    /// Stop once the gradient norm falls below this.
    pub tol: f64,
    pub seed: u64,
    /// Fixed Gabor aspect ratio of the fitted kernels.
    pub aspect: f64,
}

impl FitProblem {
    pub fn new(targets: Vec<WeightMatrix>, family: KernelFamily) -> Self {
        FitProblem { targets, family, restarts: 16, max_iters: 500, tol: 1e-8, seed: 0, aspect: 1.0 }
    }

    fn validate(&self) -> Result<KernelSize, FitError> {
        match self.family {
            KernelFamily::Plain => return Err(FitError::PlainFamily),
            KernelFamily::Mean => return Err(FitError::NoAkps(KernelFamily::Mean)),
            _ => {}
        }
        let first = self.targets.first().ok_or(FitError::NoTargets)?;
        let size = first.size();
        for (index, t) in self.targets.iter().enumerate() {
            if t.size() != size {
                return Err(FitError::SizeMismatch { index, h: t.h, w: t.w, expected: size });
            }
        }
        if size.area() == 0 {
            return Err(KernelError::InvalidSize { h: size.h, w: size.w }.into());
        }
        if self.restarts == 0 {
            return Err(FitError::Config("restarts must be at least 1".into()));
        }
        if self.tol.is_nan() || self.tol <= 0.0 {
            return Err(FitError::Config(format!("tolerance must be positive, got {}", self.tol)));
        }
        if !(self.aspect.is_finite() && self.aspect > 0.0) {
            return Err(FitError::Config(format!("aspect must be positive, got {}", self.aspect)));
        }
        Ok(size)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FitResult {
    pub specs: Vec<KernelSpec>,
    pub rmse: Vec<f64>,
    pub akp_total: usize,
    pub param_total: usize,
}

/// Box bounds per AKP: scale parameters stay in `[floor, max(h, w)]`, the
/// Gabor wavelength stays positive, angles are free.
fn bounds(family: KernelFamily, size: KernelSize) -> Vec<(f64, f64)> {
    let hi = size.h.max(size.w) as f64;
    let mut b = vec![(f64::NEG_INFINITY, f64::INFINITY); family.akp_count(size)];
    for &i in family.positive_akps() {
        b[i] = (AKP_FLOOR, hi);
    }
    if family == KernelFamily::Gabor {
        b[0] = (AKP_FLOOR, f64::INFINITY);
    }
    b
}

fn project(akps: &mut [f64], bounds: &[(f64, f64)]) {
    for (v, &(lo, hi)) in akps.iter_mut().zip(bounds) {
        *v = v.clamp(lo, hi);
    }
}

struct Objective<'a> {
    target: &'a WeightMatrix,
    family: KernelFamily,
    size: KernelSize,
    aspect: f64,
}

impl Objective<'_> {
    fn spec(&self, akps: &[f64]) -> KernelSpec {
        KernelSpec { family: self.family, akps: akps.to_vec(), size: self.size, aspect: self.aspect }
    }

    fn value(&self, akps: &[f64]) -> f64 {
        match self.spec(akps).sample() {
            Ok(m) => m.data.iter().zip(&self.target.data).map(|(a, b)| (a - b) * (a - b)).sum(),
            Err(_) => f64::INFINITY,
        }
    }

    fn value_grad(&self, akps: &[f64]) -> (f64, Vec<f64>) {
        let (m, jac) = self.spec(akps).sample_with_jacobian().expect("iterate stays in bounds");
        let resid: Vec<f64> = m.data.iter().zip(&self.target.data).map(|(a, b)| a - b).collect();
        let g = resid.iter().map(|r| r * r).sum();
        let grad = jac.iter().map(|j| 2.0 * j.data.iter().zip(&resid).map(|(d, r)| d * r).sum::<f64>()).collect();
        (g, grad)
    }
}

/// Projected gradient descent from `start`; returns the final point and
/// objective.
fn descend(obj: &Objective, start: Vec<f64>, bounds: &[(f64, f64)], max_iters: usize, tol: f64) -> (Vec<f64>, f64) {
    let mut x = start;
    project(&mut x, bounds);
    let mut step: f64 = 1.0;
    let (mut g, mut grad) = obj.value_grad(&x);
    for _ in 0..max_iters {
        let norm = grad.iter().map(|d| d * d).sum::<f64>().sqrt();
        if norm < tol {
            break;
        }
        step = step.min(MAX_MOVE / norm);
        let mut accepted = None;
        while step > 1e-20 {
            let mut cand: Vec<f64> = x.iter().zip(&grad).map(|(v, d)| v - step * d).collect();
            project(&mut cand, bounds);
            let decrease: f64 = x.iter().zip(&cand).zip(&grad).map(|((a, b), d)| d * (a - b)).sum();
            let gc = obj.value(&cand);
            if gc <= g - ARMIJO_C * decrease && decrease > 0.0 {
                accepted = Some((cand, gc));
                break;
            }
            step *= 0.5;
        }
        let Some((cand, _)) = accepted else { break };
        x = cand;
        (g, grad) = obj.value_grad(&x);
        step *= 2.0;
    }
    (x, g)
}

/// Initial point of restart `r` for target `t`: a random draw from the
/// family's initialization ranges with the orientation stratified over
/// multiples of pi / 8.
fn start_point(problem: &FitProblem, size: KernelSize, t: usize, r: usize) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(problem.seed);
    rng.set_stream(((t as u64) << 32) | r as u64);
    let mut akps = KernelSpec::random(problem.family, size, 1, &mut rng).akps;
    if let Some(i) = problem.family.orientation_akp() {
        akps[i] = (r % THETA_STRATA) as f64 * PI / THETA_STRATA as f64;
    }
    akps
}

pub fn fit(problem: &FitProblem) -> Result<FitResult, FitError> {
    let size = problem.validate()?;
    let bounds = bounds(problem.family, size);
    let runs: Vec<(usize, usize)> =
        (0..problem.targets.len()).flat_map(|t| (0..problem.restarts).map(move |r| (t, r))).collect();
    let outcomes: Vec<(Vec<f64>, f64)> = runs
        .par_iter()
        .map(|&(t, r)| {
            let obj = Objective { target: &problem.targets[t], family: problem.family, size, aspect: problem.aspect };
            descend(&obj, start_point(problem, size, t, r), &bounds, problem.max_iters, problem.tol)
        })
        .collect();

    let mut specs = Vec::with_capacity(problem.targets.len());
    let mut rmse = Vec::with_capacity(problem.targets.len());
    for per_target in outcomes.chunks(problem.restarts) {
        // lowest objective wins, earliest restart on ties
        let (akps, g) = per_target
            .iter()
            .fold(None::<&(Vec<f64>, f64)>, |best, cur| match best {
                Some(b) if b.1 <= cur.1 => Some(b),
                _ => Some(cur),
            })
            .expect("restarts >= 1");
        let spec = KernelSpec::new(problem.family, akps.clone(), size)?.with_aspect(problem.aspect)?;
        specs.push(spec);
        rmse.push((g / size.area() as f64).sqrt());
    }
    let akp_total = specs.iter().map(|s| s.akps.len()).sum();
    Ok(FitResult { specs, rmse, akp_total, param_total: problem.targets.len() * size.area() })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct FitEntry {
    pub index: usize,
    pub family: String,
    pub akps: Vec<f64>,
    pub rmse: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct FitReport {
    pub kernels: Vec<FitEntry>,
    pub akp_total: usize,
    pub param_total: usize,
    pub compression_ratio: f64,
}

impl FitReport {
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for e in &self.kernels {
            let akps: Vec<String> = e.akps.iter().map(|v| format!("{v:.6}")).collect();
            s.push_str(&format!(
                "kernel {:>3}  {:<7} rmse {:.3e}  akps [{}]\n",
                e.index,
                e.family,
                e.rmse,
                akps.join(", ")
            ));
        }
        s.push_str(&format!(
            "akp_total {}  param_total {}  compression {:.4}\n",
            self.akp_total, self.param_total, self.compression_ratio
        ));
        s
    }
}

pub fn fit_report(result: &FitResult) -> Result<FitReport, FitError> {
    if result.specs.is_empty() || result.param_total == 0 {
        return Err(FitError::NoTargets);
    }
    Ok(FitReport {
        kernels: result
            .specs
            .iter()
            .zip(&result.rmse)
            .enumerate()
            .map(|(index, (s, &rmse))| FitEntry {
                index,
                family: s.family.name().to_string(),
                akps: s.akps.clone(),
                rmse,
            })
            .collect(),
        akp_total: result.akp_total,
        param_total: result.param_total,
        compression_ratio: 1.0 - result.akp_total as f64 / result.param_total as f64,
    })
}
