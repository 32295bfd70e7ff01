//! Finite-difference verification of ACL parameter gradients.
//!
//! For each random draw the layer is run on a random input and scored with
//! `0.5 * ||y - t||^2` against a random target; every AKP of every kernel is
//! then perturbed both ways and the central difference compared with the
//! analytic gradient. Results are grouped per kernel family.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::acl::{AclError, AclLayer};
use crate::arrangement::Arrangement;
use crate::conv::ConvHyper;
use crate::kernels::{KernelFamily, KernelSize};
use crate::tensor::Tensor4;

/// Arrangement covering every family, used when none is given.
pub const DEFAULT_PATTERN: &str = "(2x7)G2Lg2Lt2Tf2Ts2M2P2";

/// Orientation distance from a kink below which a draw is rejected.
pub const SMOOTH_MARGIN: f64 = 1e-3;

#[derive(Clone, Debug, PartialEq)]
pub struct GradcheckConfig {
    pub kernel_size: KernelSize,
    pub points: usize,
    pub tolerance: f64,
    pub seed: u64,
    /// Negates the analytic gradient before comparing; the harness must then
    /// report failures.
    pub inject_sign_fault: bool,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        GradcheckConfig {
            kernel_size: KernelSize::square(5),
            points: 20,
            tolerance: 1e-4,
            seed: 0,
            inject_sign_fault: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradcheckRow {
    pub family: String,
    /// Number of AKP values compared.
    pub checked: usize,
    pub max_rel_err: f64,
    pub passed: bool,
}

impl GradcheckRow {
    pub fn status(&self) -> &'static str {
        match (self.checked, self.passed) {
            (0, _) => "no AKPs",
            (_, true) => "pass",
            (_, false) => "FAIL",
        }
    }
}

/// Relative error with a floor on the denominator so that gradients that
/// are both essentially zero compare equal.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

fn loss(layer: &AclLayer, x: &Tensor4, target: &Tensor4) -> Result<f64, AclError> {
    let y = layer.forward(x)?;
    Ok(0.5 * y.data().iter().zip(target.data()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>())
}

/// Draws a layer whose kernels all sit at smooth points.
fn smooth_layer(
    arr: &Arrangement,
    size: KernelSize,
    hyper: ConvHyper,
    rng: &mut ChaCha8Rng,
) -> Result<AclLayer, AclError> {
    loop {
        let mut layer = AclLayer::new(arr.clone(), size, hyper, rng)?;
        for b in layer.bias_mut() {
            *b = rng.gen_range(-0.5..0.5);
        }
        if layer.specs().iter().all(|s| s.is_smooth(SMOOTH_MARGIN)) {
            return Ok(layer);
        }
    }
}

pub fn gradcheck(arr: &Arrangement, config: &GradcheckConfig) -> Result<Vec<GradcheckRow>, AclError> {
    let mut families: Vec<KernelFamily> = Vec::new();
    for b in &arr.blocks {
        if !families.contains(&b.family) {
            families.push(b.family);
        }
    }
    let mut rows: Vec<GradcheckRow> = families
        .iter()
        .map(|f| GradcheckRow { family: f.name().to_string(), checked: 0, max_rel_err: 0.0, passed: true })
        .collect();

    let size = config.kernel_size;
    let hyper = ConvHyper::padded(1);
    let (h, w) = (size.h + 3, size.w + 3);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    for _ in 0..config.points {
        let layer = smooth_layer(arr, size, hyper, &mut rng)?;
        let x = Tensor4::from_fn([2, arr.in_channels, h, w], |_| rng.gen_range(-1.0..1.0));
        let out = layer.output_dims(x.dims())?;
        let target = Tensor4::from_fn(out, |_| rng.gen_range(-1.0..1.0));
        let y = layer.forward(&x)?;
        let dy = Tensor4::from_vec(out, y.data().iter().zip(target.data()).map(|(a, b)| a - b).collect())
            .expect("same dims");
        let grads = layer.backward_params(&x, &dy)?;

        for (k, spec) in layer.specs().iter().enumerate() {
            let row = families.iter().position(|f| *f == spec.family).expect("family listed");
            for l in 0..spec.akps.len() {
                let v = spec.akps[l];
                let step = 1e-4 * v.abs().max(1.0);
                let mut p = layer.clone();
                p.akps_mut(k)[l] = v + step;
                let mut m = layer.clone();
                m.akps_mut(k)[l] = v - step;
                let numeric = (loss(&p, &x, &target)? - loss(&m, &x, &target)?) / (2.0 * step);
                let mut analytic = grads.akp_grads[k][l];
                if config.inject_sign_fault {
                    analytic = -analytic;
                }
                let err = rel_err(analytic, numeric);
                let r = &mut rows[row];
                r.checked += 1;
                r.max_rel_err = r.max_rel_err.max(err);
            }
        }
    }
    for r in &mut rows {
        r.passed = r.max_rel_err < config.tolerance;
    }
    Ok(rows)
}

pub fn render_table(rows: &[GradcheckRow]) -> String {
    let mut s = format!("{:<8} {:>8} {:>12}  {}\n", "family", "checked", "max_rel_err", "status");
    for r in rows {
        s.push_str(&format!("{:<8} {:>8} {:>12.3e}  {}\n", r.family, r.checked, r.max_rel_err, r.status()));
    }
    s
}
