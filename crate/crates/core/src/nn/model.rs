use std::collections::BTreeMap;

use rand::Rng;

use super::conv::Conv2d;
use super::layers::{reshape_backward, reshape_forward, ActQuant, BatchNorm2d, Dense, GlobalAvgPool, MaxPool2d, Relu};
use super::param::Param;
use super::tensor::Tensor4;
use crate::arch::{ArchNode, ArchSpec, LayerRole, Network, Shortcut};
use crate::calib::CalibTable;
use crate::error::{Error, Result};
use crate::quant::QuantSpec;

/// Conv followed by optional batch norm, ReLU and activation quantizer.
#[derive(Debug, Clone)]
pub struct ConvBlock {
    pub conv: Conv2d,
    pub role: LayerRole,
    pub bn: Option<BatchNorm2d>,
    pub relu: Option<Relu>,
    pub act: Option<ActQuant>,
}

#[derive(Debug, Clone)]
pub struct ResidualBlock {
    pub body: Vec<Node>,
    pub shortcut: Shortcut,
    pub relu: Option<Relu>,
    pub act: Option<ActQuant>,
    input_shape: [usize; 4],
}

#[derive(Debug, Clone)]
pub struct DenseBlock {
    pub dense: Dense,
    pub role: LayerRole,
}

// Few nodes per model, so boxing the large variants buys nothing.
#[allow(clippy::large_enum_variant)]
#[derive(Debug, Clone)]
pub enum Node {
    Conv(ConvBlock),
    MaxPool(MaxPool2d),
    GlobalAvgPool(GlobalAvgPool),
    Dense(DenseBlock),
    Residual(ResidualBlock),
}

/// A trainable instance of a [`Network`].
#[derive(Debug, Clone)]
pub struct Model {
    pub spec: ArchSpec,
    pub nodes: Vec<Node>,
    /// Name of the first layer whose output was non-finite in the last forward pass.
    pub first_nonfinite: Option<String>,
}

/// Read-only view of one quantizable layer's master weights.
#[derive(Debug, Clone, Copy)]
pub struct WeightView<'a> {
    pub name: &'a str,
    pub role: LayerRole,
    pub groups: usize,
    pub fan_in: usize,
    pub weights: &'a [f64],
}

fn build_nodes<R: Rng + ?Sized>(
    arch: &[ArchNode],
    calib: &CalibTable,
    act_bits: Option<u8>,
    rng: &mut R,
) -> Result<Vec<Node>> {
    let mut out = Vec::with_capacity(arch.len());
    for node in arch {
        out.push(match node {
            ArchNode::Conv(d) => {
                let clip = d.quant.resolve_clip_ratio(calib)?;
                let mut conv =
                    Conv2d::new(&d.name, d.c_in, d.c_out, d.kernel, d.stride, d.groups, d.quant.clone(), clip)?;
                conv.init_kaiming(rng);
                Node::Conv(ConvBlock {
                    conv,
                    role: d.role,
                    bn: d.bn.then(|| BatchNorm2d::new(format!("{}.bn", d.name), d.c_out)),
                    relu: d.relu.then(Relu::default),
                    act: act_bits.filter(|_| d.relu).map(ActQuant::new),
                })
            }
            ArchNode::MaxPool => Node::MaxPool(MaxPool2d::default()),
            ArchNode::GlobalAvgPool => Node::GlobalAvgPool(GlobalAvgPool::default()),
            ArchNode::Dense(d) => {
                let clip = d.quant.resolve_clip_ratio(calib)?;
                let mut dense = Dense::new(&d.name, d.c_in, d.c_out, d.quant.clone(), clip)?;
                dense.init_kaiming(rng);
                Node::Dense(DenseBlock { dense, role: d.role })
            }
            ArchNode::Residual { body, shortcut, relu_after } => Node::Residual(ResidualBlock {
                body: build_nodes(body, calib, act_bits, rng)?,
                shortcut: *shortcut,
                relu: relu_after.then(Relu::default),
                act: act_bits.filter(|_| *relu_after).map(ActQuant::new),
                input_shape: [0; 4],
            }),
        });
    }
    Ok(out)
}

fn forward_nodes(nodes: &mut [Node], mut x: Tensor4, train: bool, bad: &mut Option<String>) -> Result<Tensor4> {
    for node in nodes {
        let name;
        x = match node {
            Node::Conv(b) => {
                name = b.conv.name.clone();
                let mut y = b.conv.forward(&x)?;
                if let Some(bn) = &mut b.bn {
                    y = bn.forward(&y, train)?;
                }
                if let Some(r) = &mut b.relu {
                    y = r.forward(&y);
                }
                if let Some(a) = &mut b.act {
                    y = a.forward(&y, train)?;
                }
                y
            }
            Node::MaxPool(p) => {
                name = "maxpool".into();
                p.forward(&x)?
            }
            Node::GlobalAvgPool(p) => {
                name = "global_avg_pool".into();
                p.forward(&x)
            }
            Node::Dense(d) => {
                name = d.dense.name.clone();
                d.dense.forward(&x)?
            }
            Node::Residual(r) => {
                name = "residual".into();
                r.input_shape = x.shape;
                let mut y = forward_nodes(&mut r.body, x.clone(), train, bad)?;
                let s = match r.shortcut {
                    Shortcut::Identity => x,
                    Shortcut::Reshape { stride, c_out, .. } => reshape_forward(&x, stride, c_out),
                };
                if s.shape != y.shape {
                    return Err(Error::shape("residual", format!("body {:?} vs shortcut {:?}", y.shape, s.shape)));
                }
                y.add_assign(&s);
                if let Some(relu) = &mut r.relu {
                    y = relu.forward(&y);
                }
                if let Some(a) = &mut r.act {
                    y = a.forward(&y, train)?;
                }
                y
            }
        };
        if bad.is_none() && !x.is_finite() {
            *bad = Some(name);
        }
    }
    Ok(x)
}

fn backward_nodes(nodes: &mut [Node], mut d: Tensor4) -> Result<Tensor4> {
    for node in nodes.iter_mut().rev() {
        d = match node {
            Node::Conv(b) => {
                if let Some(a) = &mut b.act {
                    d = a.backward(&d)?;
                }
                if let Some(r) = &mut b.relu {
                    d = r.backward(&d)?;
                }
                if let Some(bn) = &mut b.bn {
                    d = bn.backward(&d)?;
                }
                b.conv.backward(&d)?
            }
            Node::MaxPool(p) => p.backward(&d)?,
            Node::GlobalAvgPool(p) => p.backward(&d)?,
            Node::Dense(b) => b.dense.backward(&d)?,
            Node::Residual(r) => {
                if let Some(a) = &mut r.act {
                    d = a.backward(&d)?;
                }
                if let Some(relu) = &mut r.relu {
                    d = relu.backward(&d)?;
                }
                let mut dx = match r.shortcut {
                    Shortcut::Identity => d.clone(),
                    Shortcut::Reshape { stride, .. } => reshape_backward(&d, r.input_shape, stride),
                };
                dx.add_assign(&backward_nodes(&mut r.body, d)?);
                dx
            }
        };
    }
    Ok(d)
}

fn visit_nodes_mut(nodes: &mut [Node], f: &mut dyn FnMut(&mut Node)) {
    for node in nodes {
        if let Node::Residual(r) = node {
            visit_nodes_mut(&mut r.body, f);
        }
        f(node);
    }
}

fn visit_nodes<'a>(nodes: &'a [Node], f: &mut dyn FnMut(&'a Node)) {
    for node in nodes {
        if let Node::Residual(r) = node {
            visit_nodes(&r.body, f);
        }
        f(node);
    }
}

fn act_state(a: &ActQuant) -> Vec<f64> {
    vec![a.range.min, a.range.max, if a.range.initialized { 1.0 } else { 0.0 }]
}

fn set_act_state(a: &mut ActQuant, v: &[f64]) {
    a.range.min = v[0];
    a.range.max = v[1];
    a.range.initialized = v[2] != 0.0;
}

impl Model {
    /// Instantiates `net` with Kaiming-initialised weights and per-layer clip ratios from `calib`.
    pub fn from_network<R: Rng + ?Sized>(net: &Network, calib: &CalibTable, rng: &mut R) -> Result<Self> {
        Ok(Self {
            spec: net.spec.clone(),
            nodes: build_nodes(&net.nodes, calib, net.spec.activation_bits, rng)?,
            first_nonfinite: None,
        })
    }

    pub fn forward(&mut self, x: &Tensor4, train: bool) -> Result<Tensor4> {
        let [c, h, w] = self.spec.input;
        if x.shape[1..] != [c, h, w] {
            return Err(Error::shape("input", format!("expected (N, {c}, {h}, {w}), got {:?}", x.shape)));
        }
        self.first_nonfinite = None;
        forward_nodes(&mut self.nodes, x.clone(), train, &mut self.first_nonfinite)
    }

    /// Backpropagates the logit gradient, accumulating parameter gradients.
    pub fn backward(&mut self, dlogits: &Tensor4) -> Result<Tensor4> {
        backward_nodes(&mut self.nodes, dlogits.clone())
    }

    pub fn visit_params_mut(&mut self, f: &mut dyn FnMut(&str, &mut Param)) {
        visit_nodes_mut(&mut self.nodes, &mut |node| match node {
            Node::Conv(b) => {
                f(&format!("{}.weight", b.conv.name), &mut b.conv.weight);
                if let Some(bn) = &mut b.bn {
                    f(&format!("{}.gamma", bn.name), &mut bn.gamma);
                    f(&format!("{}.beta", bn.name), &mut bn.beta);
                }
            }
            Node::Dense(b) => {
                f(&format!("{}.weight", b.dense.name), &mut b.dense.weight);
                f(&format!("{}.bias", b.dense.name), &mut b.dense.bias);
            }
            _ => {}
        });
    }

    pub fn zero_grad(&mut self) {
        self.visit_params_mut(&mut |_, p| p.zero_grad());
    }

    pub fn param_count(&mut self) -> usize {
        let mut n = 0;
        self.visit_params_mut(&mut |_, p| n += p.len());
        n
    }

    /// Enables or disables weight fake quantization in every layer.
    pub fn set_quantization(&mut self, enabled: bool) {
        visit_nodes_mut(&mut self.nodes, &mut |node| match node {
            Node::Conv(b) => b.conv.quantize = enabled,
            Node::Dense(b) => b.dense.quantize = enabled,
            _ => {}
        });
    }

    /// Master weights of every conv and dense layer in forward order.
    pub fn weight_views(&self) -> Vec<WeightView<'_>> {
        let mut out = Vec::new();
        visit_nodes(&self.nodes, &mut |node| match node {
            Node::Conv(b) => out.push(WeightView {
                name: &b.conv.name,
                role: b.role,
                groups: b.conv.groups,
                fan_in: b.conv.fan_in(),
                weights: &b.conv.weight.value,
            }),
            Node::Dense(b) => out.push(WeightView {
                name: &b.dense.name,
                role: b.role,
                groups: 1,
                fan_in: b.dense.c_in,
                weights: &b.dense.weight.value,
            }),
            _ => {}
        });
        out
    }

    /// Per-layer quantizer spec and resolved clip ratio.
    pub fn quant_map(&self) -> BTreeMap<String, (QuantSpec, Option<f64>)> {
        let mut out = BTreeMap::new();
        visit_nodes(&self.nodes, &mut |node| match node {
            Node::Conv(b) => {
                out.insert(b.conv.name.clone(), (b.conv.quant.clone(), b.conv.clip_ratio));
            }
            Node::Dense(b) => {
                out.insert(b.dense.name.clone(), (b.dense.quant.clone(), b.dense.clip_ratio));
            }
            _ => {}
        });
        out
    }

    pub fn set_clip_ratio(&mut self, layer: &str, ratio: Option<f64>) {
        visit_nodes_mut(&mut self.nodes, &mut |node| match node {
            Node::Conv(b) if b.conv.name == layer => b.conv.clip_ratio = ratio,
            Node::Dense(b) if b.dense.name == layer => b.dense.clip_ratio = ratio,
            _ => {}
        });
    }

    /// Non-trainable state: batch-norm running statistics and activation ranges.
    pub fn buffers(&self) -> BTreeMap<String, Vec<f64>> {
        let mut out = BTreeMap::new();
        let mut act_index = 0;
        visit_nodes(&self.nodes, &mut |node| {
            let act = match node {
                Node::Conv(b) => {
                    if let Some(bn) = &b.bn {
                        out.insert(format!("{}.running_mean", bn.name), bn.running_mean.clone());
                        out.insert(format!("{}.running_var", bn.name), bn.running_var.clone());
                    }
                    b.act.as_ref()
                }
                Node::Residual(r) => r.act.as_ref(),
                _ => None,
            };
            if let Some(a) = act {
                out.insert(format!("act{act_index}.range"), act_state(a));
                act_index += 1;
            }
        });
        out
    }

    pub fn load_buffers(&mut self, buffers: &BTreeMap<String, Vec<f64>>) -> Result<()> {
        let mut act_index = 0;
        let mut missing = None;
        let mut take = |key: String, len: usize| -> Option<&Vec<f64>> {
            match buffers.get(&key) {
                Some(v) if v.len() == len => Some(v),
                _ => {
                    missing.get_or_insert(key);
                    None
                }
            }
        };
        visit_nodes_mut(&mut self.nodes, &mut |node| {
            let act = match node {
                Node::Conv(b) => {
                    if let Some(bn) = &mut b.bn {
                        let c = bn.running_mean.len();
                        if let Some(v) = take(format!("{}.running_mean", bn.name), c) {
                            bn.running_mean.copy_from_slice(v);
                        }
                        if let Some(v) = take(format!("{}.running_var", bn.name), c) {
                            bn.running_var.copy_from_slice(v);
                        }
                    }
                    b.act.as_mut()
                }
                Node::Residual(r) => r.act.as_mut(),
                _ => None,
            };
            if let Some(a) = act {
                if let Some(v) = take(format!("act{act_index}.range"), 3) {
                    set_act_state(a, v);
                }
                act_index += 1;
            }
        });
        match missing {
            Some(key) => Err(Error::shape(key, "missing or mis-sized buffer in checkpoint")),
            None => Ok(()),
        }
    }

    /// Predicted class per sample in evaluation mode.
    pub fn predict(&mut self, x: &Tensor4) -> Result<Vec<usize>> {
        let logits = self.forward(x, false)?;
        Ok(super::layers::argmax_rows(&logits))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::arch::{build, BitwidthMap, Family};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny_resnet() -> Model {
        let spec = ArchSpec::new(Family::Resnet { depth: 8 }, 0.5, BitwidthMap::uniform(4)).with_input([3, 8, 8], 5);
        let net = build(&spec).unwrap();
        Model::from_network(&net, &CalibTable::builtin(), &mut ChaCha8Rng::seed_from_u64(0)).unwrap()
    }

    #[test]
    fn residual_forward_backward_shapes() {
        let mut m = tiny_resnet();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor4::from_vec([2, 3, 8, 8], (0..384).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let y = m.forward(&x, true).unwrap();
        assert_eq!(y.shape, [2, 5, 1, 1]);
        let dx = m.backward(&Tensor4::from_vec([2, 5, 1, 1], vec![0.1; 10]).unwrap()).unwrap();
        assert_eq!(dx.shape, x.shape);
        let mut nonzero = 0;
        m.visit_params_mut(&mut |_, p| nonzero += p.grad.iter().any(|&g| g != 0.0) as usize);
        assert!(nonzero > 0);
    }

    #[test]
    fn weight_views_cover_every_quantized_layer() {
        let m = tiny_resnet();
        let views = m.weight_views();
        assert_eq!(views.first().unwrap().role, LayerRole::First);
        assert_eq!(views.last().unwrap().name, "classifier");
        assert_eq!(views.len(), m.quant_map().len());
    }

    #[test]
    fn rejects_wrong_input_shape() {
        let mut m = tiny_resnet();
        assert!(m.forward(&Tensor4::zeros([1, 3, 9, 8]), false).is_err());
    }
}
