//! Central finite-difference checks for every differentiable kernel.
//!
//! Each check draws a random small configuration from `seed`, uses the scalar
//! objective `L = sum(r * y)` for a fixed random `r` (or the loss itself for
//! the cross-entropy), and compares analytic and numerical gradients.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::conv::{conv_backward, conv_forward, Conv2d};
use super::layers::{
    reshape_backward, reshape_forward, softmax_xent, BatchNorm2d, Dense, GlobalAvgPool, MaxPool2d, Relu,
};
use super::tensor::Tensor4;
use crate::calib::CalibTable;
use crate::error::Result;
use crate::quant::QuantSpec;

pub const FD_EPS: f64 = 1e-3;
pub const FD_TOLERANCE: f64 = 1e-2;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Kernel {
    Conv,
    DepthwiseConv,
    Dense,
    BatchNorm,
    Relu,
    MaxPool,
    AvgPool,
    Shortcut,
    SoftmaxXent,
}

impl Kernel {
    pub const ALL: [Kernel; 9] = [
        Kernel::Conv,
        Kernel::DepthwiseConv,
        Kernel::Dense,
        Kernel::BatchNorm,
        Kernel::Relu,
        Kernel::MaxPool,
        Kernel::AvgPool,
        Kernel::Shortcut,
        Kernel::SoftmaxXent,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Kernel::Conv => "conv",
            Kernel::DepthwiseConv => "dwconv",
            Kernel::Dense => "dense",
            Kernel::BatchNorm => "batchnorm",
            Kernel::Relu => "relu",
            Kernel::MaxPool => "maxpool",
            Kernel::AvgPool => "avgpool",
            Kernel::Shortcut => "shortcut",
            Kernel::SoftmaxXent => "softmax_xent",
        }
    }
}

#[derive(Debug, Clone)]
pub struct GradCheck {
    pub kernel: Kernel,
    pub config: String,
    pub max_rel_error: f64,
}

/// Largest entry-wise `|a - n| / max(|a|, |n|, 1e-3 * max|a|, 1e-8)`.
///
/// The floor keeps near-zero entries from dominating through round-off.
pub fn rel_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    let scale = analytic.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(1e-3 * scale).max(1e-8))
        .fold(0.0, f64::max)
}

/// Central differences of `f` at `x`.
pub fn numeric_grad(x: &[f64], mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            probe[i] = x[i] + FD_EPS;
            let up = f(&probe);
            probe[i] = x[i] - FD_EPS;
            let down = f(&probe);
            probe[i] = x[i];
            (up - down) / (2.0 * FD_EPS)
        })
        .collect()
}

fn uniform(n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

fn tensor(shape: [usize; 4], rng: &mut ChaCha8Rng) -> Tensor4 {
    Tensor4 { shape, data: uniform(shape.iter().product(), rng) }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn with_data(shape: [usize; 4], data: &[f64]) -> Tensor4 {
    Tensor4 { shape, data: data.to_vec() }
}

/// Runs the check for `kernel` on the configuration drawn from `seed`.
pub fn check(kernel: Kernel, seed: u64) -> Result<GradCheck> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ kernel as u64);
    let (config, err) = match kernel {
        Kernel::Conv | Kernel::DepthwiseConv => check_conv(kernel == Kernel::DepthwiseConv, &mut rng)?,
        Kernel::Dense => check_dense(&mut rng)?,
        Kernel::BatchNorm => check_bn(&mut rng)?,
        Kernel::Relu => check_relu(&mut rng)?,
        Kernel::MaxPool => check_maxpool(&mut rng)?,
        Kernel::AvgPool => check_avgpool(&mut rng)?,
        Kernel::Shortcut => check_shortcut(&mut rng),
        Kernel::SoftmaxXent => check_xent(&mut rng)?,
    };
    Ok(GradCheck { kernel, config, max_rel_error: err })
}

fn check_conv(depthwise: bool, rng: &mut ChaCha8Rng) -> Result<(String, f64)> {
    let n = rng.random_range(1..=2);
    let (c_in, c_out, groups) = if depthwise {
        let c = rng.random_range(2..=5);
        (c, c, c)
    } else {
        let g = rng.random_range(1..=2);
        (g * rng.random_range(1..=3), g * rng.random_range(1..=3), g)
    };
    let kernel = [1, 2, 3, 3, 5][rng.random_range(0..5)];
    let stride = rng.random_range(1..=2);
    let (h, w) = (rng.random_range(3..=7), rng.random_range(3..=7));
    let bits = rng.random_range(3..=8);
    let config = format!("n{n} {c_in}->{c_out} g{groups} k{kernel} s{stride} {h}x{w} w{bits}");

    let spec = QuantSpec::with_bits(bits);
    let clip = spec.resolve_clip_ratio(&CalibTable::builtin())?;
    let mut conv = Conv2d::new("fd", c_in, c_out, kernel, stride, groups, spec, clip)?;
    conv.init_kaiming(rng);
    let x = tensor([n, c_in, h, w], rng);
    let y = conv.forward(&x)?;
    let r = uniform(y.len(), rng);
    let dx = conv.backward(&with_data(y.shape, &r))?;

    // Input gradient with quantized weights in place.
    let eff = conv.effective_weights();
    let num_dx = numeric_grad(&x.data, |p| {
        dot(&conv_forward(&with_data(x.shape, p), &eff, c_out, kernel, stride, groups).data, &r)
    });
    // Weight gradient of the convolution itself, taken at the effective weights.
    let (_, dw) = conv_backward(&x, &eff, &with_data(y.shape, &r), kernel, stride, groups);
    let num_dw = numeric_grad(&eff, |p| dot(&conv_forward(&x, p, c_out, kernel, stride, groups).data, &r));
    Ok((config, rel_error(&dx.data, &num_dx).max(rel_error(&dw, &num_dw))))
}

fn check_dense(rng: &mut ChaCha8Rng) -> Result<(String, f64)> {
    let n = rng.random_range(1..=3);
    let (c_in, c_out) = (rng.random_range(1..=12), rng.random_range(1..=6));
    let config = format!("n{n} {c_in}->{c_out}");
    let mut dense = Dense::new("fd", c_in, c_out, QuantSpec::full_precision(), None)?;
    dense.init_kaiming(rng);
    dense.bias.value = uniform(c_out, rng);
    let x = tensor([n, c_in, 1, 1], rng);
    let y = dense.forward(&x)?;
    let r = uniform(y.len(), rng);
    let dx = dense.backward(&with_data(y.shape, &r))?;
    let mut probe = dense.clone();
    let num_dx = numeric_grad(&x.data, |p| dot(&probe.forward(&with_data(x.shape, p)).unwrap().data, &r));
    let w0 = dense.weight.value.clone();
    let num_dw = numeric_grad(&w0, |p| {
        probe.weight.value.copy_from_slice(p);
        dot(&probe.forward(&x).unwrap().data, &r)
    });
    probe.weight.value.copy_from_slice(&w0);
    let b0 = dense.bias.value.clone();
    let num_db = numeric_grad(&b0, |p| {
        probe.bias.value.copy_from_slice(p);
        dot(&probe.forward(&x).unwrap().data, &r)
    });
    let err = rel_error(&dx.data, &num_dx)
        .max(rel_error(&dense.weight.grad, &num_dw))
        .max(rel_error(&dense.bias.grad, &num_db));
    Ok((config, err))
}

fn check_bn(rng: &mut ChaCha8Rng) -> Result<(String, f64)> {
    let shape = [rng.random_range(2..=3), rng.random_range(1..=3), rng.random_range(1..=4), rng.random_range(2..=4)];
    let config = format!("{shape:?}");
    let mut bn = BatchNorm2d::new("fd", shape[1]);
    bn.gamma.value = (0..shape[1]).map(|_| rng.random_range(0.5..1.5)).collect();
    bn.beta.value = uniform(shape[1], rng);
    let x = tensor(shape, rng);
    let y = bn.forward(&x, true)?;
    let r = uniform(y.len(), rng);
    let dx = bn.backward(&with_data(shape, &r))?;
    let mut probe = bn.clone();
    let num_dx = numeric_grad(&x.data, |p| dot(&probe.forward(&with_data(shape, p), true).unwrap().data, &r));
    let g0 = bn.gamma.value.clone();
    let num_dg = numeric_grad(&g0, |p| {
        probe.gamma.value.copy_from_slice(p);
        dot(&probe.forward(&x, true).unwrap().data, &r)
    });
    Ok((config, rel_error(&dx.data, &num_dx).max(rel_error(&bn.gamma.grad, &num_dg))))
}

fn check_relu(rng: &mut ChaCha8Rng) -> Result<(String, f64)> {
    let shape = [rng.random_range(1..=2), rng.random_range(1..=3), rng.random_range(1..=5), rng.random_range(1..=5)];
    let mut x = tensor(shape, rng);
    // stay clear of the kink at zero
    for v in &mut x.data {
        if v.abs() < 10.0 * FD_EPS {
            *v += 20.0 * FD_EPS;
        }
    }
    let mut relu = Relu::default();
    let y = relu.forward(&x);
    let r = uniform(y.len(), rng);
    let dx = relu.backward(&with_data(shape, &r))?;
    let num = numeric_grad(&x.data, |p| dot(&Relu::default().forward(&with_data(shape, p)).data, &r));
    Ok((format!("{shape:?}"), rel_error(&dx.data, &num)))
}

fn check_maxpool(rng: &mut ChaCha8Rng) -> Result<(String, f64)> {
    let shape = [rng.random_range(1..=2), rng.random_range(1..=3), rng.random_range(2..=6), rng.random_range(2..=6)];
    let len: usize = shape.iter().product();
    // Distinct values spaced well beyond the probe so no window changes its argmax.
    let mut vals: Vec<f64> = (0..len).map(|i| i as f64 * 10.0 * FD_EPS).collect();
    for i in (1..len).rev() {
        vals.swap(i, rng.random_range(0..=i));
    }
    let x = with_data(shape, &vals);
    let mut pool = MaxPool2d::default();
    let y = pool.forward(&x)?;
    let r = uniform(y.len(), rng);
    let dx = pool.backward(&with_data(y.shape, &r))?;
    let num = numeric_grad(&x.data, |p| dot(&MaxPool2d::default().forward(&with_data(shape, p)).unwrap().data, &r));
    Ok((format!("{shape:?}"), rel_error(&dx.data, &num)))
}

fn check_avgpool(rng: &mut ChaCha8Rng) -> Result<(String, f64)> {
    let shape = [rng.random_range(1..=2), rng.random_range(1..=4), rng.random_range(1..=5), rng.random_range(1..=5)];
    let x = tensor(shape, rng);
    let mut pool = GlobalAvgPool::default();
    let y = pool.forward(&x);
    let r = uniform(y.len(), rng);
    let dx = pool.backward(&with_data(y.shape, &r))?;
    let num = numeric_grad(&x.data, |p| dot(&GlobalAvgPool::default().forward(&with_data(shape, p)).data, &r));
    Ok((format!("{shape:?}"), rel_error(&dx.data, &num)))
}

fn check_shortcut(rng: &mut ChaCha8Rng) -> (String, f64) {
    let shape = [rng.random_range(1..=2), rng.random_range(1..=4), rng.random_range(1..=6), rng.random_range(1..=6)];
    let stride = rng.random_range(1..=2);
    let c_out = rng.random_range(1..=6);
    let x = tensor(shape, rng);
    let y = reshape_forward(&x, stride, c_out);
    let r = uniform(y.len(), rng);
    let dx = reshape_backward(&with_data(y.shape, &r), shape, stride);
    let num = numeric_grad(&x.data, |p| dot(&reshape_forward(&with_data(shape, p), stride, c_out).data, &r));
    (format!("{shape:?} s{stride} ->{c_out}"), rel_error(&dx.data, &num))
}

fn check_xent(rng: &mut ChaCha8Rng) -> Result<(String, f64)> {
    let (n, k) = (rng.random_range(1..=4), rng.random_range(2..=7));
    let smoothing = if rng.random_bool(0.5) { 0.0 } else { rng.random_range(0.0..0.3) };
    let shape = [n, k, 1, 1];
    let mut logits = tensor(shape, rng);
    logits.data.iter_mut().for_each(|v| *v *= 3.0);
    let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..k)).collect();
    let (_, grad) = softmax_xent(&logits, &labels, smoothing)?;
    let num = numeric_grad(&logits.data, |p| softmax_xent(&with_data(shape, p), &labels, smoothing).unwrap().0);
    Ok((format!("n{n} k{k} smoothing {smoothing:.3}"), rel_error(&grad.data, &num)))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_kernel_matches_central_differences() {
        for kernel in Kernel::ALL {
            for seed in 0..8 {
                let c = check(kernel, seed).unwrap();
                assert!(
                    c.max_rel_error <= FD_TOLERANCE,
                    "{} [{}]: relative error {}",
                    kernel.name(),
                    c.config,
                    c.max_rel_error
                );
            }
        }
    }

    #[test]
    fn rel_error_detects_a_wrong_gradient() {
        assert!(rel_error(&[1.0, 2.0], &[1.0, 2.1]) > FD_TOLERANCE);
        assert_eq!(rel_error(&[0.0, 0.0], &[0.0, 0.0]), 0.0);
    }
}
