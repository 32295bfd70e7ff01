//! The analytic convolutional layer.
//!
//! A layer holds one [`KernelSpec`] per kernel of its `Ci x Co` mosaic, in
//! arrangement order. Kernel `k` feeds output channel `k / Ci` from input
//! channel `k % Ci`, so consecutive arrangement blocks fill the input-channel
//! groups of each output channel in turn. The weight bank is re-sampled from
//! the AKPs on every forward and backward call.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::arrangement::{Arrangement, PatternError};
use crate::conv::{self, ConvHyper};
use crate::kernels::{KernelError, KernelFamily, KernelSize, KernelSpec};
use crate::tensor::Tensor4;

/// Lower bound applied to positive AKPs after every update.
pub const AKP_FLOOR: f64 = 1e-3;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AclError {
    #[error(transparent)]
    Kernel(#[from] KernelError),
    #[error(transparent)]
    Pattern(#[from] PatternError),
    #[error("expected input with {expected} channels, got {found}")]
    ChannelMismatch { expected: usize, found: usize },
    #[error("input {h}x{w} is too small for kernel {kernel} with {hyper:?}")]
    InputTooSmall { h: usize, w: usize, kernel: KernelSize, hyper: ConvHyper },
    #[error("gradient has dims {found:?}, expected {expected:?}")]
    GradShape { expected: [usize; 4], found: [usize; 4] },
    #[error("kernel {index}: {reason}")]
    BadSpec { index: usize, reason: String },
    #[error("invalid convolution hyperparameters {0:?}")]
    BadHyper(ConvHyper),
    #[error("gradient layout does not match the layer")]
    GradientLayout,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AclLayer {
    arrangement: Arrangement,
    kernel_size: KernelSize,
    specs: Vec<KernelSpec>,
    bias: Vec<f64>,
    hyper: ConvHyper,
}

/// AKP and bias gradients, shaped like the layer they belong to.
#[derive(Clone, Debug, PartialEq)]
pub struct AclGradients {
    pub akp_grads: Vec<Vec<f64>>,
    pub bias_grads: Vec<f64>,
}

impl AclGradients {
    pub fn zeros_like(layer: &AclLayer) -> Self {
        AclGradients {
            akp_grads: layer.specs.iter().map(|s| vec![0.0; s.akps.len()]).collect(),
            bias_grads: vec![0.0; layer.bias.len()],
        }
    }

    pub fn add_assign(&mut self, other: &AclGradients) {
        for (a, b) in self.akp_grads.iter_mut().zip(&other.akp_grads) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
        for (x, y) in self.bias_grads.iter_mut().zip(&other.bias_grads) {
            *x += y;
        }
    }

    pub fn scale(&mut self, factor: f64) {
        self.akp_grads.iter_mut().flatten().for_each(|v| *v *= factor);
        self.bias_grads.iter_mut().for_each(|v| *v *= factor);
    }
}

impl AclLayer {
    /// Builds a layer with random AKPs drawn in arrangement order and zero bias.
    pub fn new<R: Rng + ?Sized>(
        arrangement: Arrangement,
        kernel_size: KernelSize,
        hyper: ConvHyper,
        rng: &mut R,
    ) -> Result<Self, AclError> {
        let fan_in = arrangement.in_channels * kernel_size.area();
        let specs = arrangement
            .flattened()
            .into_iter()
            .map(|family| KernelSpec::random(family, kernel_size, fan_in, rng))
            .collect();
        let bias = vec![0.0; arrangement.out_channels];
        AclLayer::from_parts(arrangement, kernel_size, specs, bias, hyper)
    }

    pub fn with_seed(
        arrangement: Arrangement,
        kernel_size: KernelSize,
        hyper: ConvHyper,
        seed: u64,
    ) -> Result<Self, AclError> {
        AclLayer::new(arrangement, kernel_size, hyper, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    /// Assembles a layer from explicit kernels, checking every layer invariant.
    pub fn from_parts(
        arrangement: Arrangement,
        kernel_size: KernelSize,
        specs: Vec<KernelSpec>,
        bias: Vec<f64>,
        hyper: ConvHyper,
    ) -> Result<Self, AclError> {
        if hyper.stride == 0 || hyper.dilation == 0 {
            return Err(AclError::BadHyper(hyper));
        }
        let families = arrangement.flattened();
        if specs.len() != families.len() {
            return Err(AclError::BadSpec {
                index: specs.len().min(families.len()),
                reason: format!("layer needs {} kernels, got {}", families.len(), specs.len()),
            });
        }
        for (index, (spec, family)) in specs.iter().zip(&families).enumerate() {
            if spec.family != *family {
                return Err(AclError::BadSpec {
                    index,
                    reason: format!("arrangement expects {family}, found {}", spec.family),
                });
            }
            if spec.size != kernel_size {
                return Err(AclError::BadSpec {
                    index,
                    reason: format!("size {} differs from layer size {kernel_size}", spec.size),
                });
            }
            spec.validate()?;
        }
        if bias.len() != arrangement.out_channels {
            return Err(AclError::BadSpec {
                index: 0,
                reason: format!("bias has {} entries for {} outputs", bias.len(), arrangement.out_channels),
            });
        }
        Ok(AclLayer { arrangement, kernel_size, specs, bias, hyper })
    }

    pub fn arrangement(&self) -> &Arrangement {
        &self.arrangement
    }

    pub fn kernel_size(&self) -> KernelSize {
        self.kernel_size
    }

    pub fn specs(&self) -> &[KernelSpec] {
        &self.specs
    }

    pub fn bias(&self) -> &[f64] {
        &self.bias
    }

    pub fn hyper(&self) -> ConvHyper {
        self.hyper
    }

    pub fn in_channels(&self) -> usize {
        self.arrangement.in_channels
    }

    pub fn out_channels(&self) -> usize {
        self.arrangement.out_channels
    }

    /// Learnable AKPs plus bias entries.
    pub fn param_count(&self) -> usize {
        self.arrangement.learnable_params(self.kernel_size) + self.bias.len()
    }

    pub fn compact_factor(&self) -> f64 {
        self.arrangement.compact_factor(self.kernel_size)
    }

    /// Flattened kernel index of output channel `q`, input channel `p`.
    pub fn kernel_index(&self, q: usize, p: usize) -> usize {
        q * self.in_channels() + p
    }

    /// Samples every kernel into a `(Co, Ci, h, w)` weight bank.
    pub fn materialize(&self) -> Result<Tensor4, AclError> {
        let area = self.kernel_size.area();
        let mut data = Vec::with_capacity(self.specs.len() * area);
        for spec in &self.specs {
            data.extend_from_slice(&spec.sample()?.data);
        }
        Ok(Tensor4::from_vec(self.bank_dims(), data).expect("bank size"))
    }

    fn bank_dims(&self) -> [usize; 4] {
        [self.out_channels(), self.in_channels(), self.kernel_size.h, self.kernel_size.w]
    }

    /// Output dims for an input of the given dims.
    pub fn output_dims(&self, input: [usize; 4]) -> Result<[usize; 4], AclError> {
        let [b, c, h, w] = input;
        if c != self.in_channels() {
            return Err(AclError::ChannelMismatch { expected: self.in_channels(), found: c });
        }
        let too_small = || AclError::InputTooSmall { h, w, kernel: self.kernel_size, hyper: self.hyper };
        let oh = self.hyper.output_len(h, self.kernel_size.h).ok_or_else(too_small)?;
        let ow = self.hyper.output_len(w, self.kernel_size.w).ok_or_else(too_small)?;
        Ok([b, self.out_channels(), oh, ow])
    }

    pub fn forward(&self, input: &Tensor4) -> Result<Tensor4, AclError> {
        self.output_dims(input.dims())?;
        let bank = self.materialize()?;
        Ok(conv::forward(input, &bank, &self.bias, self.hyper))
    }

    /// Backpropagates `grad_output` into AKP and bias gradients and the
    /// gradient with respect to `input`.
    pub fn backward(&self, input: &Tensor4, grad_output: &Tensor4) -> Result<(AclGradients, Tensor4), AclError> {
        let (grads, grad_input) = self.backward_inner(input, grad_output, true)?;
        Ok((grads, grad_input.expect("input gradient requested")))
    }

    /// Like [`AclLayer::backward`] but skips the input gradient.
    pub fn backward_params(&self, input: &Tensor4, grad_output: &Tensor4) -> Result<AclGradients, AclError> {
        Ok(self.backward_inner(input, grad_output, false)?.0)
    }

    fn backward_inner(
        &self,
        input: &Tensor4,
        grad_output: &Tensor4,
        want_input_grad: bool,
    ) -> Result<(AclGradients, Option<Tensor4>), AclError> {
        let expected = self.output_dims(input.dims())?;
        if grad_output.dims() != expected {
            return Err(AclError::GradShape { expected, found: grad_output.dims() });
        }
        let bank = self.materialize()?;
        let raw = conv::backward(input, &bank, grad_output, self.hyper, want_input_grad);

        let area = self.kernel_size.area();
        let mut akp_grads = Vec::with_capacity(self.specs.len());
        for (k, spec) in self.specs.iter().enumerate() {
            let dw = &raw.weights.data()[k * area..(k + 1) * area];
            let grad = match spec.family {
                KernelFamily::Mean => Vec::new(),
                // one-hot Jacobian
                KernelFamily::Plain => dw.to_vec(),
                _ => spec.jacobian()?.iter().map(|j| j.data.iter().zip(dw).map(|(a, b)| a * b).sum()).collect(),
            };
            akp_grads.push(grad);
        }
        Ok((AclGradients { akp_grads, bias_grads: raw.bias }, raw.input))
    }

    /// Gradient-descent step on every AKP and bias entry. Positive AKPs are
    /// clamped to [`AKP_FLOOR`] afterwards.
    pub fn apply_update(&mut self, grads: &AclGradients, learning_rate: f64) -> Result<(), AclError> {
        if grads.akp_grads.len() != self.specs.len()
            || grads.bias_grads.len() != self.bias.len()
            || grads.akp_grads.iter().zip(&self.specs).any(|(g, s)| g.len() != s.akps.len())
        {
            return Err(AclError::GradientLayout);
        }
        for (spec, grad) in self.specs.iter_mut().zip(&grads.akp_grads) {
            for (v, g) in spec.akps.iter_mut().zip(grad) {
                *v -= learning_rate * g;
            }
            for &idx in spec.family.positive_akps() {
                spec.akps[idx] = spec.akps[idx].max(AKP_FLOOR);
            }
        }
        for (b, g) in self.bias.iter_mut().zip(&grads.bias_grads) {
            *b -= learning_rate * g;
        }
        Ok(())
    }

    /// Mutable access to kernel AKPs for perturbation in gradient checks.
    pub fn akps_mut(&mut self, kernel: usize) -> &mut [f64] {
        &mut self.specs[kernel].akps
    }

    pub fn bias_mut(&mut self) -> &mut [f64] {
        &mut self.bias
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::arrangement::parse_pattern;

    fn plain_layer(ci: usize, co: usize, k: usize, akps: Vec<Vec<f64>>) -> AclLayer {
        let arr = Arrangement::uniform(KernelFamily::Plain, ci, co).unwrap();
        let size = KernelSize::square(k);
        let specs = akps.into_iter().map(|a| KernelSpec::new(KernelFamily::Plain, a, size).unwrap()).collect();
        AclLayer::from_parts(arr, size, specs, vec![0.0; co], ConvHyper::default()).unwrap()
    }

    fn single(spec: KernelSpec) -> AclLayer {
        let arr = Arrangement::uniform(spec.family, 1, 1).unwrap();
        AclLayer::from_parts(arr, spec.size, vec![spec], vec![0.0], ConvHyper::default()).unwrap()
    }

    fn ramp(dims: [usize; 4]) -> Tensor4 {
        Tensor4::from_fn(dims, |[b, c, h, w]| ((b * 7 + c * 5 + h * 3 + w) % 11) as f64 / 10.0 - 0.4)
    }

    #[test]
    fn delta_kernel_materializes_as_itself() {
        let layer = plain_layer(1, 1, 1, vec![vec![1.0]]);
        assert_eq!(layer.materialize().unwrap().data(), &[1.0]);
    }

    #[test]
    fn bank_follows_arrangement_order() {
        let arr: Arrangement = "(3x64)G30Lg15Lt15Tf36P96".parse().unwrap();
        let layer = AclLayer::with_seed(arr.clone(), KernelSize::square(7), ConvHyper::default(), 4).unwrap();
        let bank = layer.materialize().unwrap();
        let area = 49;
        for (k, family) in arr.flattened().iter().enumerate() {
            assert_eq!(layer.specs()[k].family, *family);
            let expected = layer.specs()[k].sample().unwrap();
            let (q, p) = (k / 3, k % 3);
            assert_eq!(layer.kernel_index(q, p), k);
            assert_eq!(&bank.data()[k * area..(k + 1) * area], expected.data.as_slice());
            assert_eq!(bank.get([q, p, 3, 3]), expected.get(3, 3));
        }
        assert_eq!(layer.specs()[29].family, KernelFamily::Gabor);
        assert_eq!(layer.specs()[30].family, KernelFamily::LoG);
        assert_eq!(layer.specs()[44].family, KernelFamily::LoG);
        assert_eq!(layer.specs()[45].family, KernelFamily::LoT);
    }

    #[test]
    fn mean_layer_bank() {
        let layer = single(KernelSpec::mean(KernelSize::square(3)));
        for v in layer.materialize().unwrap().data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn center_one_hot_picks_center_pixel() {
        let mut akps = vec![0.0; 9];
        akps[4] = 1.0;
        let layer = plain_layer(1, 1, 3, vec![akps]);
        let x = ramp([1, 1, 3, 3]);
        let y = layer.forward(&x).unwrap();
        assert_eq!(y.dims(), [1, 1, 1, 1]);
        assert_eq!(y.data()[0], x.get([0, 0, 1, 1]));
    }

    #[test]
    fn mean_on_ones() {
        let layer = single(KernelSpec::mean(KernelSize::square(3)));
        let x = Tensor4::from_vec([1, 1, 4, 4], vec![1.0; 16]).unwrap();
        let y = layer.forward(&x).unwrap();
        assert_eq!(y.dims(), [1, 1, 2, 2]);
        assert!(y.data().iter().all(|v| (v - 3.0).abs() < 1e-12));
    }

    #[test]
    fn shape_errors() {
        let layer = plain_layer(2, 1, 3, vec![vec![0.1; 9], vec![0.2; 9]]);
        assert_eq!(
            layer.forward(&Tensor4::zeros([1, 3, 5, 5])).unwrap_err(),
            AclError::ChannelMismatch { expected: 2, found: 3 }
        );
        assert!(matches!(layer.forward(&Tensor4::zeros([1, 2, 2, 5])), Err(AclError::InputTooSmall { .. })));
        let x = Tensor4::zeros([1, 2, 5, 5]);
        assert!(matches!(layer.backward(&x, &Tensor4::zeros([1, 1, 2, 3])), Err(AclError::GradShape { .. })));
    }

    #[test]
    fn plain_gradient_is_weight_gradient() {
        let layer = plain_layer(1, 1, 3, vec![(0..9).map(|v| v as f64 * 0.1).collect()]);
        let x = ramp([2, 1, 5, 5]);
        let g = ramp([2, 1, 3, 3]).map(|v| v * 2.0);
        let (grads, _) = layer.backward(&x, &g).unwrap();
        let bank = layer.materialize().unwrap();
        let raw = conv::backward(&x, &bank, &g, ConvHyper::default(), false);
        assert_eq!(grads.akp_grads[0], raw.weights.data());
    }

    #[test]
    fn log_sigma_gradient_matches_finite_difference() {
        let spec = KernelSpec::new(KernelFamily::LoG, vec![1.3], KernelSize::square(5)).unwrap();
        let layer = single(spec);
        let x = ramp([2, 1, 7, 7]);
        let ones = Tensor4::from_vec([2, 1, 3, 3], vec![1.0; 18]).unwrap();
        let (grads, _) = layer.backward(&x, &ones).unwrap();
        let loss = |sigma: f64| {
            let mut l = layer.clone();
            l.akps_mut(0)[0] = sigma;
            l.forward(&x).unwrap().data().iter().sum::<f64>()
        };
        let h = 1e-6;
        let numeric = (loss(1.3 + h) - loss(1.3 - h)) / (2.0 * h);
        let analytic = grads.akp_grads[0][0];
        let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs());
        assert!(rel < 1e-4, "analytic {analytic} numeric {numeric}");
    }

    #[test]
    fn mean_layer_has_no_akp_gradients() {
        let arr = Arrangement::uniform(KernelFamily::Mean, 2, 2).unwrap();
        let layer = AclLayer::with_seed(arr, KernelSize::square(3), ConvHyper::default(), 0).unwrap();
        let x = ramp([1, 2, 5, 5]);
        let g = Tensor4::from_vec([1, 2, 3, 3], vec![1.0; 18]).unwrap();
        let (grads, gx) = layer.backward(&x, &g).unwrap();
        assert!(grads.akp_grads.iter().all(Vec::is_empty));
        assert!(gx.data().iter().any(|v| *v != 0.0));
        assert_eq!(grads.bias_grads, vec![9.0, 9.0]);
    }

    #[test]
    fn update_rules() {
        let spec = KernelSpec::new(KernelFamily::LoG, vec![1.0], KernelSize::square(3)).unwrap();
        let mut layer = single(spec);
        let before = layer.clone();
        layer.apply_update(&AclGradients::zeros_like(&layer), 0.1).unwrap();
        assert_eq!(layer, before);

        let grads = AclGradients { akp_grads: vec![vec![0.5]], bias_grads: vec![0.0] };
        layer.apply_update(&grads, 0.1).unwrap();
        assert!((layer.specs()[0].akps[0] - 0.95).abs() < 1e-15);

        let big = AclGradients { akp_grads: vec![vec![1e6]], bias_grads: vec![2.0] };
        layer.apply_update(&big, 0.1).unwrap();
        assert_eq!(layer.specs()[0].akps[0], AKP_FLOOR);
        assert!((layer.bias()[0] + 0.2).abs() < 1e-15);

        let wrong = AclGradients { akp_grads: vec![vec![1.0, 2.0]], bias_grads: vec![0.0] };
        assert_eq!(layer.apply_update(&wrong, 0.1), Err(AclError::GradientLayout));
    }

    #[test]
    fn ratio_bound_layer() {
        let arr = parse_pattern("G0.1562Lg0.0781Lt0.0781Tf0.1875P0.5").unwrap().bind(8, 16).unwrap();
        let layer = AclLayer::with_seed(arr, KernelSize::square(5), ConvHyper::default(), 1).unwrap();
        assert_eq!(layer.specs().len(), 128);
        let x = ramp([1, 8, 9, 9]);
        assert_eq!(layer.forward(&x).unwrap().dims(), [1, 16, 5, 5]);
    }

    #[test]
    fn from_parts_rejects_family_mismatch() {
        let arr = Arrangement::uniform(KernelFamily::LoG, 1, 1).unwrap();
        let spec = KernelSpec::default_init(KernelFamily::LoT, KernelSize::square(3), 0);
        let err = AclLayer::from_parts(arr, KernelSize::square(3), vec![spec], vec![0.0], ConvHyper::default());
        assert!(matches!(err, Err(AclError::BadSpec { index: 0, .. })));
    }
}
