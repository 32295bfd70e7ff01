//! Analytic kernel families.
//!
//! Every family maps a short vector of analytic kernel parameters (AKPs) to an
//! `h x w` weight matrix by sampling a closed-form function on a grid centered
//! at the middle of the kernel. Row index `i` maps to the `x` offset and column
//! index `j` to the `y` offset, both computed as `index - (len - 1) / 2`.
//!
//! The Jacobian of the sampled matrix with respect to each AKP is computed
//! analytically. Sign, indicator and absolute-value factors are treated as
//! piecewise constant: they contribute no derivative of their own.

use std::f64::consts::PI;
use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Threshold of the TGD1st indicator `|x'| > delta`. Fixed, never learned.
pub const TGD1ST_DELTA: f64 = 1e-4;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum KernelError {
    #[error("kernel size must be positive, got {h}x{w}")]
    InvalidSize { h: usize, w: usize },
    #[error("{family} kernel of size {h}x{w} takes {expected} AKPs, got {found}")]
    AkpCount { family: KernelFamily, h: usize, w: usize, expected: usize, found: usize },
    #[error("invalid {family} AKP {name} = {value}: {reason}")]
    InvalidAkp { family: KernelFamily, name: &'static str, value: f64, reason: &'static str },
}

/// The closed-form function a kernel is generated from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum KernelFamily {
    Mean,
    Gabor,
    LoG,
    Tgd1st,
    Tgd2nd,
    LoT,
    Plain,
}

impl KernelFamily {
    pub const ALL: [KernelFamily; 7] = [
        KernelFamily::Mean,
        KernelFamily::Gabor,
        KernelFamily::LoG,
        KernelFamily::Tgd1st,
        KernelFamily::Tgd2nd,
        KernelFamily::LoT,
        KernelFamily::Plain,
    ];

    /// Short code used in arrangement patterns.
    pub fn code(self) -> &'static str {
        match self {
            KernelFamily::Mean => "M",
            KernelFamily::Gabor => "G",
            KernelFamily::LoG => "Lg",
            KernelFamily::Tgd1st => "Tf",
            KernelFamily::Tgd2nd => "Ts",
            KernelFamily::LoT => "Lt",
            KernelFamily::Plain => "P",
        }
    }

    pub fn from_code(code: &str) -> Option<KernelFamily> {
        KernelFamily::ALL.into_iter().find(|f| f.code() == code)
    }

    pub fn name(self) -> &'static str {
        match self {
            KernelFamily::Mean => "Mean",
            KernelFamily::Gabor => "Gabor",
            KernelFamily::LoG => "LoG",
            KernelFamily::Tgd1st => "TGD1st",
            KernelFamily::Tgd2nd => "TGD2nd",
            KernelFamily::LoT => "LoT",
            KernelFamily::Plain => "Plain",
        }
    }

    /// Number of AKPs a kernel of this family has at the given size.
    pub fn akp_count(self, size: KernelSize) -> usize {
        match self {
            KernelFamily::Plain => size.area(),
            _ => self.akp_names().len(),
        }
    }

    /// Names of the AKPs in vector order. Empty for `Mean` and `Plain`.
    pub fn akp_names(self) -> &'static [&'static str] {
        match self {
            KernelFamily::Mean | KernelFamily::Plain => &[],
            KernelFamily::Gabor => &["lambda", "theta", "psi", "sigma"],
            KernelFamily::LoG | KernelFamily::LoT => &["sigma"],
            KernelFamily::Tgd1st => &["theta", "gamma1", "gamma2"],
            KernelFamily::Tgd2nd => &["theta", "gamma"],
        }
    }

    /// Indices of AKPs that must stay strictly positive.
    pub fn positive_akps(self) -> &'static [usize] {
        match self {
            KernelFamily::Mean | KernelFamily::Plain => &[],
            KernelFamily::Gabor => &[3],
            KernelFamily::LoG | KernelFamily::LoT => &[0],
            KernelFamily::Tgd1st => &[1, 2],
            KernelFamily::Tgd2nd => &[1],
        }
    }

    /// Index of the orientation AKP, if the family has one.
    pub fn orientation_akp(self) -> Option<usize> {
        match self {
            KernelFamily::Gabor => Some(1),
            KernelFamily::Tgd1st | KernelFamily::Tgd2nd => Some(0),
            _ => None,
        }
    }
}

impl fmt::Display for KernelFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct KernelSize {
    pub h: usize,
    pub w: usize,
}

impl KernelSize {
    pub fn new(h: usize, w: usize) -> Self {
        KernelSize { h, w }
    }

    pub fn square(n: usize) -> Self {
        KernelSize { h: n, w: n }
    }

    pub fn area(self) -> usize {
        self.h * self.w
    }
}

impl fmt::Display for KernelSize {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}", self.h, self.w)
    }
}

/// Centered sampling offsets for an `h x w` kernel.
#[derive(Clone, Debug, PartialEq)]
pub struct Grid {
    pub offsets_x: Vec<f64>,
    pub offsets_y: Vec<f64>,
}

impl Grid {
    pub fn new(size: KernelSize) -> Self {
        let offsets = |n: usize| -> Vec<f64> {
            let half = (n as f64 - 1.0) / 2.0;
            (0..n).map(|i| i as f64 - half).collect()
        };
        Grid { offsets_x: offsets(size.h), offsets_y: offsets(size.w) }
    }

    /// Row-major index of the grid point at the origin, present only when both
    /// dimensions are odd.
    pub fn origin_index(&self) -> Option<usize> {
        let (h, w) = (self.offsets_x.len(), self.offsets_y.len());
        (h % 2 == 1 && w % 2 == 1).then(|| (h / 2) * w + w / 2)
    }
}

/// Dense row-major `h x w` matrix of kernel weights.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WeightMatrix {
    pub h: usize,
    pub w: usize,
    pub data: Vec<f64>,
}

impl WeightMatrix {
    pub fn zeros(size: KernelSize) -> Self {
        WeightMatrix { h: size.h, w: size.w, data: vec![0.0; size.area()] }
    }

    pub fn from_vec(size: KernelSize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), size.area(), "matrix data length mismatch");
        WeightMatrix { h: size.h, w: size.w, data }
    }

    pub fn size(&self) -> KernelSize {
        KernelSize::new(self.h, self.w)
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.w + j]
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

/// A kernel family together with its AKP values and sampling size.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KernelSpec {
    pub family: KernelFamily,
    pub akps: Vec<f64>,
    pub size: KernelSize,
    /// Gabor spatial aspect ratio. Not an AKP: it is fixed at construction
    /// and never updated. Ignored by the other families.
    pub aspect: f64,
}

impl KernelSpec {
    pub fn new(family: KernelFamily, akps: Vec<f64>, size: KernelSize) -> Result<Self, KernelError> {
        let spec = KernelSpec { family, akps, size, aspect: 1.0 };
        spec.validate()?;
        Ok(spec)
    }

    pub fn mean(size: KernelSize) -> Self {
        KernelSpec { family: KernelFamily::Mean, akps: Vec::new(), size, aspect: 1.0 }
    }

    pub fn with_aspect(mut self, aspect: f64) -> Result<Self, KernelError> {
        self.aspect = aspect;
        self.validate()?;
        Ok(self)
    }

    /// Draws a spec with random AKPs; deterministic in `seed`.
    pub fn default_init(family: KernelFamily, size: KernelSize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self::random(family, size, size.area(), &mut rng)
    }

    /// Draws random AKPs from the initialization ranges. `fan_in` scales the
    /// uniform range of plain kernels.
    pub fn random<R: Rng + ?Sized>(family: KernelFamily, size: KernelSize, fan_in: usize, rng: &mut R) -> Self {
        let min_side = size.h.min(size.w) as f64;
        let scale = min_side / 4.0;
        let scale_akp = |rng: &mut R| rng.gen_range(0.5 * scale..=2.0 * scale);
        let akps = match family {
            KernelFamily::Mean => Vec::new(),
            KernelFamily::Gabor => {
                let lambda = rng.gen_range(2.0..=min_side.max(2.0));
                let theta = rng.gen_range(0.0..PI);
                let psi = rng.gen_range(0.0..2.0 * PI);
                let sigma = scale_akp(rng);
                vec![lambda, theta, psi, sigma]
            }
            KernelFamily::LoG | KernelFamily::LoT => vec![scale_akp(rng)],
            KernelFamily::Tgd1st => {
                let theta = rng.gen_range(0.0..PI);
                vec![theta, scale_akp(rng), scale_akp(rng)]
            }
            KernelFamily::Tgd2nd => {
                let theta = rng.gen_range(0.0..PI);
                vec![theta, scale_akp(rng)]
            }
            KernelFamily::Plain => {
                let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
                (0..size.area()).map(|_| rng.gen_range(-bound..=bound)).collect()
            }
        };
        KernelSpec { family, akps, size, aspect: 1.0 }
    }

    pub fn validate(&self) -> Result<(), KernelError> {
        let KernelSize { h, w } = self.size;
        if h == 0 || w == 0 {
            return Err(KernelError::InvalidSize { h, w });
        }
        let expected = self.family.akp_count(self.size);
        if self.akps.len() != expected {
            return Err(KernelError::AkpCount { family: self.family, h, w, expected, found: self.akps.len() });
        }
        let names = self.family.akp_names();
        let invalid = |idx: usize, reason| KernelError::InvalidAkp {
            family: self.family,
            name: names.get(idx).copied().unwrap_or("weight"),
            value: self.akps[idx],
            reason,
        };
        if let Some(idx) = self.akps.iter().position(|v| !v.is_finite()) {
            return Err(invalid(idx, "must be finite"));
        }
        for &idx in self.family.positive_akps() {
            if self.akps[idx] <= 0.0 {
                return Err(invalid(idx, "must be positive"));
            }
        }
        if self.family == KernelFamily::Gabor {
            if self.akps[0] == 0.0 {
                return Err(invalid(0, "must be nonzero"));
            }
            if !(self.aspect.is_finite() && self.aspect > 0.0) {
                return Err(KernelError::InvalidAkp {
                    family: self.family,
                    name: "gamma",
                    value: self.aspect,
                    reason: "must be positive",
                });
            }
        }
        Ok(())
    }

    /// Samples the kernel function on the centered grid.
    pub fn sample(&self) -> Result<WeightMatrix, KernelError> {
        self.validate()?;
        Ok(self.evaluate(false).0)
    }

    /// Derivative of every sampled weight with respect to every AKP, one
    /// matrix per AKP. Empty for `Mean`.
    pub fn jacobian(&self) -> Result<Vec<WeightMatrix>, KernelError> {
        self.validate()?;
        Ok(self.evaluate(true).1)
    }

    pub fn sample_with_jacobian(&self) -> Result<(WeightMatrix, Vec<WeightMatrix>), KernelError> {
        self.validate()?;
        Ok(self.evaluate(true))
    }

    /// False when a perturbation of up to `margin` in the orientation could
    /// move a grid point across one of the family's kinks (the sign and
    /// indicator switches of TGD1st, the `|xr|` of TGD2nd). Other families are
    /// smooth everywhere.
    pub fn is_smooth(&self, margin: f64) -> bool {
        let (theta, threshold) = match self.family {
            KernelFamily::Tgd1st => (self.akps[0], TGD1ST_DELTA),
            KernelFamily::Tgd2nd => (self.akps[0], 0.0),
            _ => return true,
        };
        let (s, c) = theta.sin_cos();
        if self.family == KernelFamily::Tgd1st && c.abs() <= margin {
            return false;
        }
        let grid = Grid::new(self.size);
        for &x in &grid.offsets_x {
            for &y in &grid.offsets_y {
                if x == 0.0 && y == 0.0 {
                    continue;
                }
                let r = (x * x + y * y).sqrt();
                let xr = x * c + y * s;
                if (xr.abs() - threshold).abs() <= margin * r {
                    return false;
                }
            }
        }
        true
    }

    fn evaluate(&self, with_jacobian: bool) -> (WeightMatrix, Vec<WeightMatrix>) {
        let size = self.size;
        let n = if with_jacobian { self.akps.len() } else { 0 };
        let mut value = WeightMatrix::zeros(size);
        let mut jac = vec![WeightMatrix::zeros(size); n];

        match self.family {
            KernelFamily::Mean => {
                value.data.fill(1.0 / (size.area() as f64).sqrt());
            }
            KernelFamily::Plain => {
                value.data.copy_from_slice(&self.akps);
                for (l, m) in jac.iter_mut().enumerate() {
                    m.data[l] = 1.0;
                }
            }
            family => {
                let grid = Grid::new(size);
                let mut grad = [0.0; 4];
                for (i, &x) in grid.offsets_x.iter().enumerate() {
                    for (j, &y) in grid.offsets_y.iter().enumerate() {
                        let idx = i * size.w + j;
                        value.data[idx] = self.point(x, y, &mut grad);
                        for (l, m) in jac.iter_mut().enumerate() {
                            m.data[idx] = grad[l];
                        }
                    }
                }
                // TGD2nd and LoT move the total mass into the origin so the kernel is DC-free.
                if matches!(family, KernelFamily::Tgd2nd | KernelFamily::LoT) {
                    if let Some(origin) = grid.origin_index() {
                        let total = value.sum();
                        value.data[origin] -= total;
                        for m in jac.iter_mut() {
                            let total = m.sum();
                            m.data[origin] -= total;
                        }
                    }
                }
            }
        }
        (value, jac)
    }

    /// Value of the kernel function at `(x, y)`; writes the partial
    /// derivatives with respect to each AKP into `grad`.
    fn point(&self, x: f64, y: f64, grad: &mut [f64; 4]) -> f64 {
        let a = &self.akps;
        *grad = [0.0; 4];
        match self.family {
            KernelFamily::Gabor => {
                let (lambda, theta, psi, sigma) = (a[0], a[1], a[2], a[3]);
                let g2 = self.aspect * self.aspect;
                let (s, c) = theta.sin_cos();
                let xr = x * c + y * s;
                let yr = -x * s + y * c;
                let q = xr * xr + g2 * yr * yr;
                let sigma2 = sigma * sigma;
                let env = (-q / (2.0 * sigma2)).exp();
                let (sa, ca) = (2.0 * PI * xr / lambda + psi).sin_cos();
                grad[0] = env * sa * 2.0 * PI * xr / (lambda * lambda);
                grad[1] = -env * ca * xr * yr * (1.0 - g2) / sigma2 - env * sa * 2.0 * PI * yr / lambda;
                grad[2] = -env * sa;
                grad[3] = env * ca * q / (sigma2 * sigma);
                env * ca
            }
            KernelFamily::LoG => {
                let sigma = a[0];
                let u = (x * x + y * y) / (2.0 * sigma * sigma);
                let e = (-u).exp();
                let s4 = sigma.powi(4);
                grad[0] = e * (4.0 - 8.0 * u + 2.0 * u * u) / (PI * s4 * sigma);
                -(1.0 - u) * e / (PI * s4)
            }
            KernelFamily::Tgd1st => {
                let (theta, g1, g2) = (a[0], a[1], a[2]);
                let (s, c) = theta.sin_cos();
                let sign = signum(c);
                let xr = x * c + y * s;
                if sign == 0.0 || xr.abs() <= TGD1ST_DELTA {
                    return 0.0;
                }
                let yr = -x * s + y * c;
                let v = sign * (-(xr * xr) / (g1 * g1) - (yr * yr) / (g2 * g2)).exp();
                grad[0] = v * -2.0 * xr * yr * (1.0 / (g1 * g1) - 1.0 / (g2 * g2));
                grad[1] = v * 2.0 * xr * xr / g1.powi(3);
                grad[2] = v * 2.0 * yr * yr / g2.powi(3);
                v
            }
            KernelFamily::Tgd2nd => {
                let (theta, gamma) = (a[0], a[1]);
                let r2 = x * x + y * y;
                if r2 == 0.0 {
                    return 0.0;
                }
                let (s, c) = theta.sin_cos();
                let xr = x * c + y * s;
                let yr = -x * s + y * c;
                let e = (-r2 / (gamma * gamma)).exp();
                let v = e * xr.abs() / r2;
                grad[0] = e * signum(xr) * yr / r2;
                grad[1] = v * 2.0 * r2 / gamma.powi(3);
                v
            }
            KernelFamily::LoT => {
                let sigma = a[0];
                let r2 = x * x + y * y;
                let e = (-r2 / (sigma * sigma)).exp();
                grad[0] = e * 2.0 * r2 / sigma.powi(3);
                e
            }
            KernelFamily::Mean | KernelFamily::Plain => unreachable!("handled in evaluate"),
        }
    }
}

/// Sign function with `sign(0) = 0`.
fn signum(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn spec(family: KernelFamily, akps: &[f64], n: usize) -> KernelSpec {
        KernelSpec::new(family, akps.to_vec(), KernelSize::square(n)).unwrap()
    }

    /// Central finite difference of `sample()` with respect to AKP `l`.
    fn fd_column(s: &KernelSpec, l: usize, step: f64) -> Vec<f64> {
        let mut plus = s.clone();
        let mut minus = s.clone();
        plus.akps[l] += step;
        minus.akps[l] -= step;
        let p = plus.sample().unwrap();
        let m = minus.sample().unwrap();
        p.data.iter().zip(&m.data).map(|(a, b)| (a - b) / (2.0 * step)).collect()
    }

    fn max_rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
        let scale = analytic.iter().chain(numeric).fold(0.0f64, |m, v| m.max(v.abs())).max(1e-8);
        analytic.iter().zip(numeric).map(|(a, n)| (a - n).abs() / scale).fold(0.0, f64::max)
    }

    #[test]
    fn akp_counts() {
        let s = KernelSize::square(7);
        assert_eq!(KernelFamily::Mean.akp_count(s), 0);
        assert_eq!(KernelFamily::Gabor.akp_count(s), 4);
        assert_eq!(KernelFamily::LoG.akp_count(s), 1);
        assert_eq!(KernelFamily::Tgd1st.akp_count(s), 3);
        assert_eq!(KernelFamily::Tgd2nd.akp_count(s), 2);
        assert_eq!(KernelFamily::LoT.akp_count(s), 1);
        assert_eq!(KernelFamily::Plain.akp_count(KernelSize::new(3, 5)), 15);
    }

    #[test]
    fn codes_round_trip() {
        for f in KernelFamily::ALL {
            assert_eq!(KernelFamily::from_code(f.code()), Some(f));
        }
        assert_eq!(KernelFamily::from_code("X"), None);
    }

    #[test]
    fn grid_offsets() {
        let g = Grid::new(KernelSize::new(3, 4));
        assert_eq!(g.offsets_x, vec![-1.0, 0.0, 1.0]);
        assert_eq!(g.offsets_y, vec![-1.5, -0.5, 0.5, 1.5]);
        assert_eq!(g.origin_index(), None);
        assert_eq!(Grid::new(KernelSize::square(5)).origin_index(), Some(12));
    }

    #[test]
    fn mean_is_constant() {
        let m = KernelSpec::mean(KernelSize::square(7)).sample().unwrap();
        for v in &m.data {
            assert!((v - 1.0 / 7.0).abs() < 1e-15);
        }
        assert!((m.frobenius_norm() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn gabor_center_is_one() {
        let m = spec(KernelFamily::Gabor, &[2.0, 0.0, 0.0, 1.0], 7).sample().unwrap();
        assert_eq!(m.get(3, 3), 1.0);
    }

    #[test]
    fn log_center() {
        let m = spec(KernelFamily::LoG, &[1.0], 7).sample().unwrap();
        assert!((m.get(3, 3) + 1.0 / PI).abs() < 1e-15);
    }

    #[test]
    fn tgd1st_zero_line() {
        // theta = 0 makes x' the row offset, so the middle row is cut by the indicator.
        let m = spec(KernelFamily::Tgd1st, &[0.0, 1.0, 1.0], 7).sample().unwrap();
        for j in 0..7 {
            assert_eq!(m.get(3, j), 0.0);
        }
        assert!(m.get(2, 3) > 0.0);
    }

    #[test]
    fn tgd1st_sign_follows_cos_theta() {
        let m = spec(KernelFamily::Tgd1st, &[2.5, 1.0, 1.5], 5).sample().unwrap();
        assert!(m.data.iter().all(|v| *v <= 0.0));
        assert!(m.sum() < 0.0);
    }

    #[test]
    fn tgd2nd_sums_to_zero() {
        let m = spec(KernelFamily::Tgd2nd, &[0.3, 2.0], 7).sample().unwrap();
        assert!(m.sum().abs() < 1e-12);
        assert!(m.get(3, 3) < 0.0);
    }

    #[test]
    fn plain_is_row_major() {
        let akps: Vec<f64> = (0..6).map(|v| v as f64).collect();
        let m = KernelSpec::new(KernelFamily::Plain, akps.clone(), KernelSize::new(2, 3)).unwrap().sample().unwrap();
        assert_eq!(m.data, akps);
        assert_eq!(m.get(1, 0), 3.0);
    }

    #[test]
    fn plain_jacobian_is_one_hot() {
        let s = KernelSpec::default_init(KernelFamily::Plain, KernelSize::square(3), 9);
        let jac = s.jacobian().unwrap();
        assert_eq!(jac.len(), 9);
        // AKP l = 5 (1-based) sits at row 2, column 2 (1-based).
        let m = &jac[4];
        for i in 0..3 {
            for j in 0..3 {
                assert_eq!(m.get(i, j), if (i, j) == (1, 1) { 1.0 } else { 0.0 });
            }
        }
    }

    #[test]
    fn mean_jacobian_is_empty() {
        for n in [1, 3, 4, 7] {
            assert!(KernelSpec::mean(KernelSize::square(n)).jacobian().unwrap().is_empty());
        }
    }

    #[test]
    fn gabor_jacobian_matches_finite_differences() {
        let s = spec(KernelFamily::Gabor, &[3.0, 0.7, 0.2, 1.5], 7);
        let jac = s.jacobian().unwrap();
        for (l, analytic) in jac.iter().enumerate() {
            let numeric = fd_column(&s, l, 1e-6);
            let err = max_rel_err(&analytic.data, &numeric);
            assert!(err < 1e-5, "akp {l}: rel err {err}");
        }
    }

    #[test]
    fn gabor_aspect_jacobian_matches_finite_differences() {
        let s = spec(KernelFamily::Gabor, &[4.0, 1.1, -0.4, 1.3], 7).with_aspect(0.6).unwrap();
        for (l, analytic) in s.jacobian().unwrap().iter().enumerate() {
            let err = max_rel_err(&analytic.data, &fd_column(&s, l, 1e-6));
            assert!(err < 1e-5, "akp {l}: rel err {err}");
        }
    }

    #[test]
    fn domain_errors_name_the_akp() {
        let err = KernelSpec::new(KernelFamily::LoG, vec![0.0], KernelSize::square(3)).unwrap_err();
        assert!(matches!(err, KernelError::InvalidAkp { name: "sigma", .. }));
        let err = KernelSpec::new(KernelFamily::Gabor, vec![0.0, 0.0, 0.0, 1.0], KernelSize::square(3)).unwrap_err();
        assert!(matches!(err, KernelError::InvalidAkp { name: "lambda", .. }));
        let err = KernelSpec::new(KernelFamily::Tgd1st, vec![0.0, 1.0, -1.0], KernelSize::square(3)).unwrap_err();
        assert!(matches!(err, KernelError::InvalidAkp { name: "gamma2", .. }));
        let err = KernelSpec::new(KernelFamily::Tgd2nd, vec![0.0, f64::NAN], KernelSize::square(3)).unwrap_err();
        assert!(matches!(err, KernelError::InvalidAkp { name: "gamma", .. }));
        let err = KernelSpec::new(KernelFamily::LoT, vec![1.0, 2.0], KernelSize::square(3)).unwrap_err();
        assert!(matches!(err, KernelError::AkpCount { expected: 1, found: 2, .. }));
        assert!(err.to_string().contains("LoT"));
    }

    #[test]
    fn default_init_is_deterministic() {
        let a = KernelSpec::default_init(KernelFamily::LoG, KernelSize::square(7), 1);
        let b = KernelSpec::default_init(KernelFamily::LoG, KernelSize::square(7), 1);
        assert_eq!(a, b);
        let c = KernelSpec::default_init(KernelFamily::LoG, KernelSize::square(7), 2);
        assert_ne!(a, c);
    }

    #[test]
    fn default_init_ranges() {
        for seed in 0..200 {
            let g = KernelSpec::default_init(KernelFamily::Gabor, KernelSize::square(7), seed);
            let s = 7.0 / 4.0;
            assert!((0.5 * s..=2.0 * s).contains(&g.akps[3]));
            assert!((2.0..=7.0).contains(&g.akps[0]));
            assert!((0.0..PI).contains(&g.akps[1]));
            assert!((0.0..2.0 * PI).contains(&g.akps[2]));

            let p = KernelSpec::default_init(KernelFamily::Plain, KernelSize::square(3), seed);
            assert_eq!(p.akps.len(), 9);
            assert!(p.akps.iter().all(|v| v.abs() <= 1.0 / 3.0));

            for family in KernelFamily::ALL {
                KernelSpec::default_init(family, KernelSize::new(3, 6), seed).validate().unwrap();
            }
        }
    }

    #[test]
    fn tiny_kernels_are_valid() {
        for family in KernelFamily::ALL {
            let s = KernelSpec::default_init(family, KernelSize::square(1), 3);
            s.sample().unwrap();
        }
    }

    fn smooth_family() -> impl Strategy<Value = KernelFamily> {
        prop::sample::select(vec![
            KernelFamily::Gabor,
            KernelFamily::LoG,
            KernelFamily::LoT,
            KernelFamily::Tgd1st,
            KernelFamily::Tgd2nd,
        ])
    }

    proptest! {
        #[test]
        fn grid_is_antisymmetric(h in 1usize..12, w in 1usize..12) {
            let g = Grid::new(KernelSize::new(h, w));
            for i in 0..h {
                prop_assert_eq!(g.offsets_x[i], -g.offsets_x[h - 1 - i]);
            }
            for j in 0..w {
                prop_assert_eq!(g.offsets_y[j], -g.offsets_y[w - 1 - j]);
            }
        }

        #[test]
        fn dc_free_families(seed in any::<u64>(), half in 0usize..5, lot in any::<bool>()) {
            let family = if lot { KernelFamily::LoT } else { KernelFamily::Tgd2nd };
            let m = KernelSpec::default_init(family, KernelSize::square(2 * half + 1), seed).sample().unwrap();
            prop_assert!(m.sum().abs() < 1e-12);
        }

        #[test]
        fn full_turn_rotation(seed in any::<u64>(), n in 2usize..9) {
            for family in [KernelFamily::Gabor, KernelFamily::Tgd1st, KernelFamily::Tgd2nd] {
                let s = KernelSpec::default_init(family, KernelSize::square(n), seed);
                let mut turned = s.clone();
                let t = family.orientation_akp().unwrap();
                turned.akps[t] += 2.0 * PI;
                let a = s.sample().unwrap();
                let b = turned.sample().unwrap();
                for (x, y) in a.data.iter().zip(&b.data) {
                    prop_assert!((x - y).abs() < 1e-12);
                }
            }
        }

        #[test]
        fn jacobian_matches_finite_differences(seed in any::<u64>(), family in smooth_family(), n in 3usize..8) {
            let s = KernelSpec::default_init(family, KernelSize::square(n), seed);
            if let Some(t) = family.orientation_akp() {
                // stay clear of the sign and indicator switches
                let c = s.akps[t].cos();
                prop_assume!(c.abs() > 1e-3);
                let grid = Grid::new(s.size);
                for &x in &grid.offsets_x {
                    for &y in &grid.offsets_y {
                        let xr = x * c + y * s.akps[t].sin();
                        prop_assume!(x == 0.0 && y == 0.0 || xr.abs() > 1e-3 + TGD1ST_DELTA);
                    }
                }
            }
            let jac = s.jacobian().unwrap();
            for (l, analytic) in jac.iter().enumerate() {
                let step = 1e-6 * s.akps[l].abs().max(1.0);
                let err = max_rel_err(&analytic.data, &fd_column(&s, l, step));
                prop_assert!(err < 1e-5, "{} akp {}: rel err {}", family, l, err);
            }
        }
    }
}
