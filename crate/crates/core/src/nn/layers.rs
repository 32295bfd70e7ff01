//! Non-convolutional layers: fully connected, max-pool, ReLU.

use rand::Rng;

use crate::tensor::Tensor4;

/// Fully connected layer over `(B, in, 1, 1)` activations.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub in_features: usize,
    pub out_features: usize,
    /// Row-major `out x in`.
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LinearGrads {
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl LinearGrads {
    pub fn zeros_like(layer: &Linear) -> Self {
        LinearGrads { weight: vec![0.0; layer.weight.len()], bias: vec![0.0; layer.bias.len()] }
    }
}

impl Linear {
    /// Weights uniform in `+-1/sqrt(in)`, zero bias.
    pub fn new<R: Rng + ?Sized>(in_features: usize, out_features: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (in_features as f64).sqrt();
        Linear {
            in_features,
            out_features,
            weight: (0..in_features * out_features).map(|_| rng.gen_range(-bound..=bound)).collect(),
            bias: vec![0.0; out_features],
        }
    }

    pub fn forward(&self, x: &Tensor4) -> Tensor4 {
        let b_n = x.batch();
        debug_assert_eq!(x.item_len(), self.in_features);
        let mut out = Tensor4::zeros([b_n, self.out_features, 1, 1]);
        for b in 0..b_n {
            let xi = x.item(b);
            let yi = &mut out.data_mut()[b * self.out_features..(b + 1) * self.out_features];
            for (o, y) in yi.iter_mut().enumerate() {
                let row = &self.weight[o * self.in_features..(o + 1) * self.in_features];
                *y = self.bias[o] + row.iter().zip(xi).map(|(w, v)| w * v).sum::<f64>();
            }
        }
        out
    }

    pub fn backward(&self, x: &Tensor4, grad_out: &Tensor4) -> (LinearGrads, Tensor4) {
        let b_n = x.batch();
        let mut grads = LinearGrads::zeros_like(self);
        let mut gx = Tensor4::zeros(x.dims());
        for b in 0..b_n {
            let xi = x.item(b);
            let gi = grad_out.item(b);
            let gxi = &mut gx.data_mut()[b * self.in_features..(b + 1) * self.in_features];
            for (o, &g) in gi.iter().enumerate() {
                grads.bias[o] += g;
                let row = &self.weight[o * self.in_features..(o + 1) * self.in_features];
                let grow = &mut grads.weight[o * self.in_features..(o + 1) * self.in_features];
                for ((gw, d), (&w, &v)) in grow.iter_mut().zip(gxi.iter_mut()).zip(row.iter().zip(xi)) {
                    *gw += g * v;
                    *d += g * w;
                }
            }
        }
        (grads, gx)
    }

    pub fn apply_update(&mut self, grads: &LinearGrads, learning_rate: f64) {
        for (w, g) in self.weight.iter_mut().zip(&grads.weight) {
            *w -= learning_rate * g;
        }
        for (b, g) in self.bias.iter_mut().zip(&grads.bias) {
            *b -= learning_rate * g;
        }
    }
}

pub fn max_pool_output_len(input: usize, kernel: usize, stride: usize) -> Option<usize> {
    (kernel > 0 && stride > 0 && input >= kernel).then(|| (input - kernel) / stride + 1)
}

/// Max-pool forward. Returns the output and, for every output cell, the flat
/// input offset of the selected maximum. Ties go to the first position in
/// row-major window order.
pub fn max_pool_forward(x: &Tensor4, kernel: usize, stride: usize) -> (Tensor4, Vec<usize>) {
    let [b_n, c, h, w] = x.dims();
    let oh = max_pool_output_len(h, kernel, stride).expect("pool input too small");
    let ow = max_pool_output_len(w, kernel, stride).expect("pool input too small");
    let mut out = Tensor4::zeros([b_n, c, oh, ow]);
    let mut argmax = Vec::with_capacity(out.data().len());
    let src = x.data();
    let dst = out.data_mut();
    let mut o = 0;
    for plane in 0..b_n * c {
        let base = plane * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = base + oy * stride * w + ox * stride;
                for ky in 0..kernel {
                    for kx in 0..kernel {
                        let idx = base + (oy * stride + ky) * w + ox * stride + kx;
                        if src[idx] > src[best] {
                            best = idx;
                        }
                    }
                }
                dst[o] = src[best];
                argmax.push(best);
                o += 1;
            }
        }
    }
    (out, argmax)
}

pub fn max_pool_backward(input_dims: [usize; 4], argmax: &[usize], grad_out: &Tensor4) -> Tensor4 {
    let mut gx = Tensor4::zeros(input_dims);
    let d = gx.data_mut();
    for (&idx, &g) in argmax.iter().zip(grad_out.data()) {
        d[idx] += g;
    }
    gx
}

pub fn relu_forward(x: &Tensor4) -> Tensor4 {
    x.map(|v| v.max(0.0))
}

pub fn relu_backward(x: &Tensor4, grad_out: &Tensor4) -> Tensor4 {
    let data = x.data().iter().zip(grad_out.data()).map(|(&v, &g)| if v > 0.0 { g } else { 0.0 }).collect();
    Tensor4::from_vec(x.dims(), data).expect("same dims")
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn relu_clips_negatives() {
        let x = Tensor4::from_vec([1, 3, 1, 1], vec![-1.0, 0.0, 2.0]).unwrap();
        assert_eq!(relu_forward(&x).data(), &[0.0, 0.0, 2.0]);
        let g = Tensor4::from_vec([1, 3, 1, 1], vec![5.0, 5.0, 5.0]).unwrap();
        assert_eq!(relu_backward(&x, &g).data(), &[0.0, 0.0, 5.0]);
    }

    #[test]
    fn pool_routes_to_argmax() {
        #[rustfmt::skip]
        let x = Tensor4::from_vec([1, 1, 4, 4], vec![
            1.0, 3.0, 0.0, 0.0,
            2.0, 3.0, 0.0, -1.0,
            5.0, 4.0, 7.0, 7.0,
            4.0, 5.0, 7.0, 7.0,
        ]).unwrap();
        let (y, arg) = max_pool_forward(&x, 2, 2);
        assert_eq!(y.data(), &[3.0, 0.0, 5.0, 7.0]);
        // ties go to the first position in the window
        assert_eq!(arg, vec![1, 2, 8, 10]);
        let g = Tensor4::from_vec([1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let gx = max_pool_backward(x.dims(), &arg, &g);
        assert_eq!(gx.data().iter().sum::<f64>(), 10.0);
        assert_eq!(gx.get([0, 0, 0, 1]), 1.0);
        assert_eq!(gx.get([0, 0, 2, 2]), 4.0);
        assert_eq!(gx.get([0, 0, 3, 3]), 0.0);
    }

    #[test]
    fn linear_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let layer = Linear::new(5, 3, &mut rng);
        let x = Tensor4::from_fn([2, 5, 1, 1], |[b, c, ..]| (b as f64 - 0.5) * (c as f64 + 1.0) * 0.3);
        let g = Tensor4::from_fn([2, 3, 1, 1], |[b, c, ..]| 0.2 * c as f64 - 0.1 * b as f64 + 0.05);
        let (grads, gx) = layer.backward(&x, &g);
        let loss =
            |l: &Linear, x: &Tensor4| -> f64 { l.forward(x).data().iter().zip(g.data()).map(|(a, b)| a * b).sum() };
        let h = 1e-6;
        for i in 0..layer.weight.len() {
            let mut p = layer.clone();
            let mut m = layer.clone();
            p.weight[i] += h;
            m.weight[i] -= h;
            let numeric = (loss(&p, &x) - loss(&m, &x)) / (2.0 * h);
            assert!((numeric - grads.weight[i]).abs() < 1e-8);
        }
        for i in 0..x.data().len() {
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp.data_mut()[i] += h;
            xm.data_mut()[i] -= h;
            let numeric = (loss(&layer, &xp) - loss(&layer, &xm)) / (2.0 * h);
            assert!((numeric - gx.data()[i]).abs() < 1e-8);
        }
        assert!((grads.bias[2] - g.data()[2] - g.data()[5]).abs() < 1e-15);
    }
}
