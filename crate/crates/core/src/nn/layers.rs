use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::param::Param;
use super::tensor::Tensor4;
use crate::error::{Error, Result};
use crate::quant::{
    fake_quantize_activation, fake_quantize_activation_backward, quantize_row_in_place, ActivationRange, QuantSpec,
};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

fn missing_cache(layer: &str) -> Error {
    Error::shape(layer, "backward called before forward")
}

/// Per-channel batch normalisation, kept in full precision.
#[derive(Debug, Clone)]
pub struct BatchNorm2d {
    pub name: String,
    pub gamma: Param,
    pub beta: Param,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    cache: Option<BnCache>,
}

#[derive(Debug, Clone)]
struct BnCache {
    xhat: Tensor4,
    inv_std: Vec<f64>,
    train: bool,
}

impl BatchNorm2d {
    pub fn new(name: impl Into<String>, channels: usize) -> Self {
        Self {
            name: name.into(),
            gamma: Param::new(vec![1.0; channels], false),
            beta: Param::new(vec![0.0; channels], false),
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
            cache: None,
        }
    }

    pub fn forward(&mut self, x: &Tensor4, train: bool) -> Result<Tensor4> {
        let c = self.gamma.len();
        if x.channels() != c {
            return Err(Error::shape(&self.name, format!("expected {c} channels, got {}", x.channels())));
        }
        let (n, plane) = (x.batch(), x.plane());
        let m = (n * plane) as f64;
        let mut mean = vec![0.0; c];
        let mut var = vec![0.0; c];
        if train {
            for ch in 0..c {
                let mut s = 0.0;
                for b in 0..n {
                    s += x.plane_slice(b, ch).iter().sum::<f64>();
                }
                mean[ch] = s / m;
                let mut v = 0.0;
                for b in 0..n {
                    v += x.plane_slice(b, ch).iter().map(|t| (t - mean[ch]).powi(2)).sum::<f64>();
                }
                var[ch] = v / m;
                self.running_mean[ch] = (1.0 - BN_MOMENTUM) * self.running_mean[ch] + BN_MOMENTUM * mean[ch];
                self.running_var[ch] = (1.0 - BN_MOMENTUM) * self.running_var[ch] + BN_MOMENTUM * var[ch];
            }
        } else {
            mean.copy_from_slice(&self.running_mean);
            var.copy_from_slice(&self.running_var);
        }
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
        let mut xhat = x.clone();
        let mut y = x.clone();
        for b in 0..n {
            for ch in 0..c {
                let start = (b * c + ch) * plane;
                let (g, be) = (self.gamma.value[ch], self.beta.value[ch]);
                for i in start..start + plane {
                    let h = (x.data[i] - mean[ch]) * inv_std[ch];
                    xhat.data[i] = h;
                    y.data[i] = g * h + be;
                }
            }
        }
        self.cache = Some(BnCache { xhat, inv_std, train });
        Ok(y)
    }

    pub fn backward(&mut self, dy: &Tensor4) -> Result<Tensor4> {
        let cache = self.cache.take().ok_or_else(|| missing_cache(&self.name))?;
        if dy.shape != cache.xhat.shape {
            return Err(Error::shape(&self.name, "upstream gradient shape mismatch"));
        }
        let c = self.gamma.len();
        let (n, plane) = (dy.batch(), dy.plane());
        let m = (n * plane) as f64;
        let mut dx = Tensor4::zeros(dy.shape);
        for ch in 0..c {
            let mut sum_dy = 0.0;
            let mut sum_dy_xhat = 0.0;
            for b in 0..n {
                let start = (b * c + ch) * plane;
                for i in start..start + plane {
                    sum_dy += dy.data[i];
                    sum_dy_xhat += dy.data[i] * cache.xhat.data[i];
                }
            }
            self.gamma.grad[ch] += sum_dy_xhat;
            self.beta.grad[ch] += sum_dy;
            let g = self.gamma.value[ch];
            let k = g * cache.inv_std[ch];
            for b in 0..n {
                let start = (b * c + ch) * plane;
                for i in start..start + plane {
                    dx.data[i] = if cache.train {
                        k * (dy.data[i] - sum_dy / m - cache.xhat.data[i] * sum_dy_xhat / m)
                    } else {
                        k * dy.data[i]
                    };
                }
            }
        }
        Ok(dx)
    }
}

#[derive(Debug, Clone, Default)]
pub struct Relu {
    mask: Vec<bool>,
}

impl Relu {
    pub fn forward(&mut self, x: &Tensor4) -> Tensor4 {
        self.mask = x.data.iter().map(|&v| v > 0.0).collect();
        // NaN must survive so the trainer can report where it appeared.
        let data = x.data.iter().map(|&v| if v <= 0.0 { 0.0 } else { v }).collect();
        Tensor4 { shape: x.shape, data }
    }

    pub fn backward(&mut self, dy: &Tensor4) -> Result<Tensor4> {
        if self.mask.len() != dy.len() {
            return Err(Error::shape("relu", "upstream gradient shape mismatch"));
        }
        let data = dy.data.iter().zip(&self.mask).map(|(&g, &m)| if m { g } else { 0.0 }).collect();
        Ok(Tensor4 { shape: dy.shape, data })
    }
}

/// 2x2 max pooling with stride 2 (odd trailing rows/columns are dropped).
#[derive(Debug, Clone, Default)]
pub struct MaxPool2d {
    input_shape: [usize; 4],
    argmax: Vec<usize>,
}

impl MaxPool2d {
    pub fn forward(&mut self, x: &Tensor4) -> Result<Tensor4> {
        let [n, c, h, w] = x.shape;
        if h < 2 || w < 2 {
            return Err(Error::shape("maxpool", format!("{h}x{w} map is too small to pool")));
        }
        let (oh, ow) = (h / 2, w / 2);
        let mut out = Tensor4::zeros([n, c, oh, ow]);
        self.argmax = vec![0; out.len()];
        self.input_shape = x.shape;
        for b in 0..n {
            for ch in 0..c {
                for i in 0..oh {
                    for j in 0..ow {
                        let mut best = x.index(b, ch, 2 * i, 2 * j);
                        for (di, dj) in [(0, 1), (1, 0), (1, 1)] {
                            let idx = x.index(b, ch, 2 * i + di, 2 * j + dj);
                            if x.data[idx] > x.data[best] {
                                best = idx;
                            }
                        }
                        let o = out.index(b, ch, i, j);
                        out.data[o] = x.data[best];
                        self.argmax[o] = best;
                    }
                }
            }
        }
        Ok(out)
    }

    pub fn backward(&mut self, dy: &Tensor4) -> Result<Tensor4> {
        if self.argmax.len() != dy.len() {
            return Err(Error::shape("maxpool", "upstream gradient shape mismatch"));
        }
        let mut dx = Tensor4::zeros(self.input_shape);
        for (g, &i) in dy.data.iter().zip(&self.argmax) {
            dx.data[i] += g;
        }
        Ok(dx)
    }
}

#[derive(Debug, Clone, Default)]
pub struct GlobalAvgPool {
    input_shape: [usize; 4],
}

impl GlobalAvgPool {
    pub fn forward(&mut self, x: &Tensor4) -> Tensor4 {
        self.input_shape = x.shape;
        let p = x.plane() as f64;
        let data = x.data.chunks(x.plane()).map(|c| c.iter().sum::<f64>() / p).collect();
        Tensor4 { shape: [x.shape[0], x.shape[1], 1, 1], data }
    }

    pub fn backward(&mut self, dy: &Tensor4) -> Result<Tensor4> {
        let [n, c, h, w] = self.input_shape;
        if dy.shape != [n, c, 1, 1] {
            return Err(Error::shape("global_avg_pool", "upstream gradient shape mismatch"));
        }
        let p = (h * w) as f64;
        let data = dy.data.iter().flat_map(|&g| std::iter::repeat_n(g / p, h * w)).collect();
        Ok(Tensor4 { shape: self.input_shape, data })
    }
}

/// Fully connected layer on flattened input; weights `[out, in]` are quantized
/// row by row, the bias stays in full precision.
#[derive(Debug, Clone)]
pub struct Dense {
    pub name: String,
    pub c_in: usize,
    pub c_out: usize,
    pub quant: QuantSpec,
    pub clip_ratio: Option<f64>,
    pub weight: Param,
    pub bias: Param,
    pub quantize: bool,
    input: Option<Tensor4>,
    effective: Vec<f64>,
}

impl Dense {
    pub fn new(
        name: impl Into<String>,
        c_in: usize,
        c_out: usize,
        quant: QuantSpec,
        clip_ratio: Option<f64>,
    ) -> Result<Self> {
        let name = name.into();
        if quant.bits.is_some_and(|b| b >= 3) && clip_ratio.is_none() {
            return Err(Error::InvalidArgument(format!("{name}: uniform bitwidth needs a clip ratio")));
        }
        Ok(Self {
            name,
            c_in,
            c_out,
            quant,
            clip_ratio,
            weight: Param::new(vec![0.0; c_in * c_out], true),
            bias: Param::new(vec![0.0; c_out], false),
            quantize: true,
            input: None,
            effective: Vec::new(),
        })
    }

    pub fn init_kaiming<R: Rng + ?Sized>(&mut self, rng: &mut R) {
        let normal = Normal::new(0.0, (1.0 / self.c_in as f64).sqrt()).expect("positive std");
        for w in &mut self.weight.value {
            *w = normal.sample(rng);
        }
    }

    pub fn effective_weights(&self) -> Vec<f64> {
        let mut w = self.weight.value.clone();
        if self.quantize && self.quant.bits.is_some() {
            for row in w.chunks_mut(self.c_in) {
                quantize_row_in_place(row, &self.quant, self.clip_ratio);
            }
        }
        w
    }

    pub fn forward(&mut self, x: &Tensor4) -> Result<Tensor4> {
        let features = x.len() / x.batch();
        if features != self.c_in {
            return Err(Error::shape(&self.name, format!("expected {} features, got {features}", self.c_in)));
        }
        self.effective = self.effective_weights();
        let n = x.batch();
        let mut out = Tensor4::zeros([n, self.c_out, 1, 1]);
        for b in 0..n {
            let xin = &x.data[b * self.c_in..(b + 1) * self.c_in];
            for o in 0..self.c_out {
                let row = &self.effective[o * self.c_in..(o + 1) * self.c_in];
                out.data[b * self.c_out + o] =
                    self.bias.value[o] + row.iter().zip(xin).map(|(w, v)| w * v).sum::<f64>();
            }
        }
        self.input = Some(x.clone());
        Ok(out)
    }

    pub fn backward(&mut self, dy: &Tensor4) -> Result<Tensor4> {
        let x = self.input.take().ok_or_else(|| missing_cache(&self.name))?;
        let n = x.batch();
        if dy.len() != n * self.c_out {
            return Err(Error::shape(&self.name, "upstream gradient shape mismatch"));
        }
        let mut dx = Tensor4::zeros(x.shape);
        for b in 0..n {
            let xin = &x.data[b * self.c_in..(b + 1) * self.c_in];
            let dxin = &mut dx.data[b * self.c_in..(b + 1) * self.c_in];
            for o in 0..self.c_out {
                let g = dy.data[b * self.c_out + o];
                self.bias.grad[o] += g;
                let row = &self.effective[o * self.c_in..(o + 1) * self.c_in];
                let grow = &mut self.weight.grad[o * self.c_in..(o + 1) * self.c_in];
                for i in 0..self.c_in {
                    grow[i] += g * xin[i];
                    dxin[i] += g * row[i];
                }
            }
        }
        Ok(dx)
    }
}

/// Per-tensor activation fake quantizer with an EMA-tracked range.
#[derive(Debug, Clone)]
pub struct ActQuant {
    pub bits: u8,
    pub range: ActivationRange,
    input: Option<Tensor4>,
    used: (f64, f64),
}

impl ActQuant {
    pub fn new(bits: u8) -> Self {
        Self { bits, range: ActivationRange::default(), input: None, used: (0.0, 0.0) }
    }

    pub fn forward(&mut self, x: &Tensor4, train: bool) -> Result<Tensor4> {
        if train {
            self.range.observe(&x.data);
        }
        self.used = (self.range.min, self.range.max);
        let data = if self.range.initialized {
            fake_quantize_activation(&x.data, self.bits, self.used.0, self.used.1)?
        } else {
            x.data.clone()
        };
        self.input = Some(x.clone());
        Ok(Tensor4 { shape: x.shape, data })
    }

    pub fn backward(&mut self, dy: &Tensor4) -> Result<Tensor4> {
        let x = self.input.take().ok_or_else(|| missing_cache("act_quant"))?;
        if !self.range.initialized {
            return Ok(dy.clone());
        }
        let data = fake_quantize_activation_backward(&x.data, &dy.data, self.used.0, self.used.1)?;
        Ok(Tensor4 { shape: dy.shape, data })
    }
}

/// Stride subsampling plus channel zero-padding (or cropping) for residual shortcuts.
pub fn reshape_forward(x: &Tensor4, stride: usize, c_out: usize) -> Tensor4 {
    let [n, c_in, h, w] = x.shape;
    let (oh, ow) = ((h - 1) / stride + 1, (w - 1) / stride + 1);
    let mut out = Tensor4::zeros([n, c_out, oh, ow]);
    for b in 0..n {
        for c in 0..c_in.min(c_out) {
            for i in 0..oh {
                for j in 0..ow {
                    let o = out.index(b, c, i, j);
                    out.data[o] = x.at(b, c, i * stride, j * stride);
                }
            }
        }
    }
    out
}

pub fn reshape_backward(dy: &Tensor4, input_shape: [usize; 4], stride: usize) -> Tensor4 {
    let [n, c_in, _, _] = input_shape;
    let [_, c_out, oh, ow] = dy.shape;
    let mut dx = Tensor4::zeros(input_shape);
    for b in 0..n {
        for c in 0..c_in.min(c_out) {
            for i in 0..oh {
                for j in 0..ow {
                    let d = dx.index(b, c, i * stride, j * stride);
                    dx.data[d] += dy.at(b, c, i, j);
                }
            }
        }
    }
    dx
}

/// Mean softmax cross-entropy with label smoothing; returns the loss and the
/// gradient with respect to the logits.
pub fn softmax_xent(logits: &Tensor4, labels: &[usize], smoothing: f64) -> Result<(f64, Tensor4)> {
    let n = logits.batch();
    let k = logits.len() / n;
    if labels.len() != n {
        return Err(Error::shape("softmax_xent", format!("{} labels for batch of {n}", labels.len())));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
        return Err(Error::shape("softmax_xent", format!("label {bad} out of range for {k} classes")));
    }
    let mut grad = Tensor4::zeros(logits.shape);
    let mut loss = 0.0;
    let off = smoothing / k as f64;
    for (b, &label) in labels.iter().enumerate() {
        let z = &logits.data[b * k..(b + 1) * k];
        let zmax = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = z.iter().map(|v| (v - zmax).exp()).sum();
        let log_sum = sum.ln() + zmax;
        for (j, &zj) in z.iter().enumerate() {
            let target = if j == label { 1.0 - smoothing + off } else { off };
            let logp = zj - log_sum;
            if target > 0.0 {
                loss -= target * logp;
            }
            grad.data[b * k + j] = (logp.exp() - target) / n as f64;
        }
    }
    Ok((loss / n as f64, grad))
}

/// Index of the largest logit per sample.
pub fn argmax_rows(logits: &Tensor4) -> Vec<usize> {
    let k = logits.len() / logits.batch();
    logits
        .data
        .chunks(k)
        .map(|row| row.iter().enumerate().fold(0, |best, (i, &v)| if v > row[best] { i } else { best }))
        .collect()
}
