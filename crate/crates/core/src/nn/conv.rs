//! Grouped 2-D convolution with fake-quantized weights.
//!
//! Padding is `(k - 1) / 2` before and `k / 2` after, so stride-1 layers keep
//! the spatial size for any kernel and stride `s` yields `ceil(H / s)`.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::param::Param;
use super::tensor::Tensor4;
use crate::error::{Error, Result};
use crate::quant::{quantize_row_in_place, ste_backward, QuantSpec};

/// Output extent and the valid output range for every kernel offset along one axis.
#[derive(Debug, Clone)]
struct Axis {
    out: usize,
    /// For kernel offset `k`: output indices `lo..hi` read input `o * stride + k - pad`.
    valid: Vec<(usize, usize)>,
}

impl Axis {
    fn new(input: usize, kernel: usize, stride: usize) -> Self {
        let pad = (kernel - 1) / 2;
        let out = (input - 1) / stride + 1;
        let valid = (0..kernel)
            .map(|k| {
                // need 0 <= o*s + k - pad < input
                let lo = if k >= pad { 0 } else { (pad - k).div_ceil(stride) };
                let hi = if input + pad <= k { 0 } else { ((input + pad - k - 1) / stride + 1).min(out) };
                (lo, hi.max(lo))
            })
            .collect();
        Self { out, valid }
    }
}

#[derive(Debug, Clone)]
pub struct Conv2d {
    pub name: String,
    pub c_in: usize,
    pub c_out: usize,
    pub kernel: usize,
    pub stride: usize,
    pub groups: usize,
    pub quant: QuantSpec,
    /// Resolved `c` for uniform bitwidths.
    pub clip_ratio: Option<f64>,
    /// Master weights `[C_out, C_in / groups, K, K]`.
    pub weight: Param,
    /// When false the forward pass uses the master weights directly.
    pub quantize: bool,
    input: Option<Tensor4>,
    effective: Vec<f64>,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        name: impl Into<String>,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        groups: usize,
        quant: QuantSpec,
        clip_ratio: Option<f64>,
    ) -> Result<Self> {
        let name = name.into();
        if groups == 0 || !c_in.is_multiple_of(groups) || !c_out.is_multiple_of(groups) {
            return Err(Error::shape(&name, format!("channels {c_in}->{c_out} not divisible by {groups} groups")));
        }
        if kernel == 0 || stride == 0 {
            return Err(Error::shape(&name, "kernel and stride must be positive"));
        }
        if quant.bits.is_some_and(|b| b >= 3) && clip_ratio.is_none() {
            return Err(Error::InvalidArgument(format!("{name}: uniform bitwidth needs a clip ratio")));
        }
        let n = c_out * (c_in / groups) * kernel * kernel;
        Ok(Self {
            name,
            c_in,
            c_out,
            kernel,
            stride,
            groups,
            quant,
            clip_ratio,
            weight: Param::new(vec![0.0; n], true),
            quantize: true,
            input: None,
            effective: Vec::new(),
        })
    }

    /// Elements per output filter.
    pub fn fan_in(&self) -> usize {
        self.c_in / self.groups * self.kernel * self.kernel
    }

    /// Kaiming-normal initialisation, `std = sqrt(2 / fan_in)`.
    pub fn init_kaiming<R: Rng + ?Sized>(&mut self, rng: &mut R) {
        let std = (2.0 / self.fan_in() as f64).sqrt();
        let normal = Normal::new(0.0, std).expect("positive std");
        for w in &mut self.weight.value {
            *w = normal.sample(rng);
        }
    }

    /// Weights used by the forward pass.
    pub fn effective_weights(&self) -> Vec<f64> {
        let mut w = self.weight.value.clone();
        if self.quantize && self.quant.bits.is_some() {
            for row in w.chunks_mut(self.fan_in()) {
                quantize_row_in_place(row, &self.quant, self.clip_ratio);
            }
        }
        w
    }

    pub fn output_shape(&self, input: [usize; 4]) -> [usize; 4] {
        [input[0], self.c_out, (input[2] - 1) / self.stride + 1, (input[3] - 1) / self.stride + 1]
    }

    pub fn forward(&mut self, x: &Tensor4) -> Result<Tensor4> {
        if x.channels() != self.c_in {
            return Err(Error::shape(
                &self.name,
                format!("expected {} input channels, got {}", self.c_in, x.channels()),
            ));
        }
        self.effective = self.effective_weights();
        let out = conv_forward(x, &self.effective, self.c_out, self.kernel, self.stride, self.groups);
        self.input = Some(x.clone());
        Ok(out)
    }

    /// Accumulates the master-weight gradient and returns the input gradient.
    pub fn backward(&mut self, dout: &Tensor4) -> Result<Tensor4> {
        let x = self.input.take().ok_or_else(|| Error::shape(&self.name, "backward called before forward"))?;
        let expected = self.output_shape(x.shape);
        if dout.shape != expected {
            return Err(Error::shape(&self.name, format!("upstream gradient {:?}, expected {expected:?}", dout.shape)));
        }
        let (dx, dw_effective) = conv_backward(&x, &self.effective, dout, self.kernel, self.stride, self.groups);
        // dQ/dW = I: the effective-weight gradient is the master-weight gradient.
        let dw = ste_backward(&dw_effective, self.weight.value.len())?;
        for (g, d) in self.weight.grad.iter_mut().zip(dw) {
            *g += d;
        }
        Ok(dx)
    }
}

/// Cross-correlation of `x` with `weights` laid out `[C_out, C_in / groups, K, K]`.
pub fn conv_forward(
    x: &Tensor4,
    weights: &[f64],
    c_out: usize,
    kernel: usize,
    stride: usize,
    groups: usize,
) -> Tensor4 {
    let [n, c_in, h, w] = x.shape;
    let (ipg, opg) = (c_in / groups, c_out / groups);
    let (ah, aw) = (Axis::new(h, kernel, stride), Axis::new(w, kernel, stride));
    let pad = (kernel - 1) / 2;
    let mut out = Tensor4::zeros([n, c_out, ah.out, aw.out]);
    let out_plane = ah.out * aw.out;
    for b in 0..n {
        for oc in 0..c_out {
            let g = oc / opg;
            let o_start = (b * c_out + oc) * out_plane;
            let dst = &mut out.data[o_start..o_start + out_plane];
            for icg in 0..ipg {
                let src = x.plane_slice(b, g * ipg + icg);
                let w_base = (oc * ipg + icg) * kernel * kernel;
                for kh in 0..kernel {
                    let (oh_lo, oh_hi) = ah.valid[kh];
                    for kw in 0..kernel {
                        let wv = weights[w_base + kh * kernel + kw];
                        if wv == 0.0 {
                            continue;
                        }
                        let (ow_lo, ow_hi) = aw.valid[kw];
                        for oh in oh_lo..oh_hi {
                            let ih = oh * stride + kh - pad;
                            let row = &src[ih * w..(ih + 1) * w];
                            let drow = &mut dst[oh * aw.out..(oh + 1) * aw.out];
                            if stride == 1 {
                                let off = kw as isize - pad as isize;
                                let s = &row[(ow_lo as isize + off) as usize..(ow_hi as isize + off) as usize];
                                for (d, v) in drow[ow_lo..ow_hi].iter_mut().zip(s) {
                                    *d += wv * v;
                                }
                            } else {
                                for ow in ow_lo..ow_hi {
                                    drow[ow] += wv * row[ow * stride + kw - pad];
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

/// Gradients of [`conv_forward`] with respect to its input and weights.
#[allow(clippy::needless_range_loop)] // `ow` indexes two rows at different offsets
pub fn conv_backward(
    x: &Tensor4,
    weights: &[f64],
    dout: &Tensor4,
    kernel: usize,
    stride: usize,
    groups: usize,
) -> (Tensor4, Vec<f64>) {
    let [n, c_in, h, w] = x.shape;
    let c_out = dout.shape[1];
    let (ipg, opg) = (c_in / groups, c_out / groups);
    let (ah, aw) = (Axis::new(h, kernel, stride), Axis::new(w, kernel, stride));
    let pad = (kernel - 1) / 2;
    let mut dx = Tensor4::zeros(x.shape);
    let mut dw = vec![0.0; weights.len()];
    let plane = h * w;
    for b in 0..n {
        for oc in 0..c_out {
            let g = oc / opg;
            let dsrc = dout.plane_slice(b, oc);
            for icg in 0..ipg {
                let ic = g * ipg + icg;
                let src = x.plane_slice(b, ic);
                let dx_start = (b * c_in + ic) * plane;
                let w_base = (oc * ipg + icg) * kernel * kernel;
                for kh in 0..kernel {
                    let (oh_lo, oh_hi) = ah.valid[kh];
                    for kw in 0..kernel {
                        let wi = w_base + kh * kernel + kw;
                        let wv = weights[wi];
                        let (ow_lo, ow_hi) = aw.valid[kw];
                        let mut acc = 0.0;
                        for oh in oh_lo..oh_hi {
                            let ih = oh * stride + kh - pad;
                            let drow = &dsrc[oh * aw.out..(oh + 1) * aw.out];
                            let xrow = &src[ih * w..(ih + 1) * w];
                            let dxrow = &mut dx.data[dx_start + ih * w..dx_start + (ih + 1) * w];
                            for ow in ow_lo..ow_hi {
                                let iw = ow * stride + kw - pad;
                                let d = drow[ow];
                                acc += d * xrow[iw];
                                dxrow[iw] += wv * d;
                            }
                        }
                        dw[wi] += acc;
                    }
                }
            }
        }
    }
    (dx, dw)
}
