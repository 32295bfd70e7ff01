//! Dense 2D cross-correlation with zero padding, stride and dilation.
//!
//! Weight banks are laid out `(Co, Ci, h, w)`. Callers validate shapes; the
//! functions here only debug-assert them.

use serde::{Deserialize, Serialize};

use crate::tensor::Tensor4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvHyper {
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
}

impl Default for ConvHyper {
    fn default() -> Self {
        ConvHyper { stride: 1, padding: 0, dilation: 1 }
    }
}

impl ConvHyper {
    pub fn padded(padding: usize) -> Self {
        ConvHyper { padding, ..Default::default() }
    }

    /// `floor((n + 2p - d(k - 1) - 1) / s) + 1`, or `None` when no output
    /// position fits.
    pub fn output_len(&self, input: usize, kernel: usize) -> Option<usize> {
        let span = self.dilation * (kernel - 1) + 1;
        let padded = input + 2 * self.padding;
        (self.stride > 0 && self.dilation > 0 && kernel > 0 && padded >= span)
            .then(|| (padded - span) / self.stride + 1)
    }
}

/// Output positions `lo..hi` whose input index `o * s + k_off - pad` lands
/// inside `0..input`.
fn valid_range(output: usize, input: usize, k_off: usize, pad: usize, stride: usize) -> (usize, usize) {
    let lo = if pad > k_off { (pad - k_off).div_ceil(stride) } else { 0 };
    let hi = if input + pad > k_off { ((input - 1 + pad - k_off) / stride + 1).min(output) } else { 0 };
    (lo, hi.max(lo))
}

pub fn forward(input: &Tensor4, weights: &Tensor4, bias: &[f64], hyper: ConvHyper) -> Tensor4 {
    let [b_n, ci, h_in, w_in] = input.dims();
    let [co, wci, kh, kw] = weights.dims();
    debug_assert_eq!(ci, wci);
    debug_assert_eq!(bias.len(), co);
    let oh = hyper.output_len(h_in, kh).expect("input too small");
    let ow = hyper.output_len(w_in, kw).expect("input too small");
    let ConvHyper { stride, padding, dilation } = hyper;

    let mut out = Tensor4::zeros([b_n, co, oh, ow]);
    let x = input.data();
    let wts = weights.data();
    let y = out.data_mut();
    for b in 0..b_n {
        for q in 0..co {
            let plane = &mut y[(b * co + q) * oh * ow..][..oh * ow];
            plane.fill(bias[q]);
            for p in 0..ci {
                let src = &x[(b * ci + p) * h_in * w_in..][..h_in * w_in];
                let kern = &wts[(q * ci + p) * kh * kw..][..kh * kw];
                for ki in 0..kh {
                    let (oy_lo, oy_hi) = valid_range(oh, h_in, ki * dilation, padding, stride);
                    for kj in 0..kw {
                        let wv = kern[ki * kw + kj];
                        let (ox_lo, ox_hi) = valid_range(ow, w_in, kj * dilation, padding, stride);
                        if ox_lo >= ox_hi {
                            continue;
                        }
                        for oy in oy_lo..oy_hi {
                            let iy = oy * stride + ki * dilation - padding;
                            let row_in = &src[iy * w_in..][..w_in];
                            let row_out = &mut plane[oy * ow..][..ow];
                            if stride == 1 {
                                let ix0 = ox_lo + kj * dilation - padding;
                                let n = ox_hi - ox_lo;
                                for (o, i) in row_out[ox_lo..ox_hi].iter_mut().zip(&row_in[ix0..ix0 + n]) {
                                    *o += wv * i;
                                }
                            } else {
                                for ox in ox_lo..ox_hi {
                                    row_out[ox] += wv * row_in[ox * stride + kj * dilation - padding];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// Gradients of a convolution with respect to its weights, bias and
/// (optionally) its input.
pub struct ConvGrads {
    pub weights: Tensor4,
    pub bias: Vec<f64>,
    pub input: Option<Tensor4>,
}

pub fn backward(
    input: &Tensor4,
    weights: &Tensor4,
    grad_output: &Tensor4,
    hyper: ConvHyper,
    want_input_grad: bool,
) -> ConvGrads {
    let [b_n, ci, h_in, w_in] = input.dims();
    let [co, _, kh, kw] = weights.dims();
    let [_, _, oh, ow] = grad_output.dims();
    debug_assert_eq!(grad_output.dims()[0], b_n);
    debug_assert_eq!(grad_output.dims()[1], co);
    let ConvHyper { stride, padding, dilation } = hyper;

    let mut gw = Tensor4::zeros(weights.dims());
    let mut gb = vec![0.0; co];
    let mut gx = want_input_grad.then(|| Tensor4::zeros(input.dims()));
    let x = input.data();
    let wts = weights.data();
    let g = grad_output.data();

    for b in 0..b_n {
        for q in 0..co {
            let gplane = &g[(b * co + q) * oh * ow..][..oh * ow];
            gb[q] += gplane.iter().sum::<f64>();
            for p in 0..ci {
                let src_off = (b * ci + p) * h_in * w_in;
                let src = &x[src_off..][..h_in * w_in];
                let k_off = (q * ci + p) * kh * kw;
                for ki in 0..kh {
                    let (oy_lo, oy_hi) = valid_range(oh, h_in, ki * dilation, padding, stride);
                    for kj in 0..kw {
                        let (ox_lo, ox_hi) = valid_range(ow, w_in, kj * dilation, padding, stride);
                        if ox_lo >= ox_hi {
                            continue;
                        }
                        let wv = wts[k_off + ki * kw + kj];
                        let mut acc = 0.0;
                        for oy in oy_lo..oy_hi {
                            let iy = oy * stride + ki * dilation - padding;
                            let grow = &gplane[oy * ow..][..ow];
                            let row_in = &src[iy * w_in..][..w_in];
                            if stride == 1 {
                                let ix0 = ox_lo + kj * dilation - padding;
                                let n = ox_hi - ox_lo;
                                acc += grow[ox_lo..ox_hi]
                                    .iter()
                                    .zip(&row_in[ix0..ix0 + n])
                                    .map(|(a, b)| a * b)
                                    .sum::<f64>();
                                if let Some(gx) = gx.as_mut() {
                                    let drow = &mut gx.data_mut()[src_off + iy * w_in..][..w_in];
                                    for (d, gv) in drow[ix0..ix0 + n].iter_mut().zip(&grow[ox_lo..ox_hi]) {
                                        *d += wv * gv;
                                    }
                                }
                            } else {
                                for (ox, g) in grow.iter().enumerate().take(ox_hi).skip(ox_lo) {
                                    let ix = ox * stride + kj * dilation - padding;
                                    acc += g * row_in[ix];
                                }
                                if let Some(gx) = gx.as_mut() {
                                    let drow = &mut gx.data_mut()[src_off + iy * w_in..][..w_in];
                                    for ox in ox_lo..ox_hi {
                                        drow[ox * stride + kj * dilation - padding] += wv * grow[ox];
                                    }
                                }
                            }
                        }
                        gw.data_mut()[k_off + ki * kw + kj] += acc;
                    }
                }
            }
        }
    }
    ConvGrads { weights: gw, bias: gb, input: gx }
}
