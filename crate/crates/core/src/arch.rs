//! Declarative architecture families, model-size accounting and width alignment.
//!
//! A [`Network`] is a static layer graph; it carries no weights. The
//! `nn` module instantiates trainable models from it, while [`SizeReport`]
//! and [`align_width`] only need the channel arithmetic.

use std::collections::BTreeSet;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::quant::QuantSpec;

/// Expansion factor of inverted residual blocks.
pub const EXPANSION: usize = 6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum VggVariant {
    Plain,
    A,
    B,
    C,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Family {
    /// CIFAR ResNet with basic blocks; depth in {20, 26, ..., 56}.
    Resnet { depth: usize },
    /// ResNet26 with every basic block replaced by an inverted residual block.
    InvResnet26,
    /// VGG11 and its depth-wise separable variants.
    Vgg11 { variant: VggVariant },
    /// MobileNetV2 with CIFAR strides (two downsamplings in total).
    MobilenetV2Cifar,
    /// Five-conv VGG-style net for desk-scale runs; `separable` swaps every
    /// conv after the first for a point-wise + depth-wise pair.
    TinyVgg {
        #[serde(default)]
        separable: bool,
    },
    /// Small net around one grouped conv with fan-in `group_width * kernel^2`,
    /// used to study how fan-in affects the spread of `mean|w|`.
    GroupProbe { channels: usize, group_width: usize, kernel: usize },
}

impl Family {
    pub fn id(&self) -> String {
        match self {
            Family::Resnet { depth } => format!("resnet{depth}"),
            Family::InvResnet26 => "inv-resnet26".into(),
            Family::Vgg11 { variant } => match variant {
                VggVariant::Plain => "vgg11".into(),
                VggVariant::A => "vgg11-a".into(),
                VggVariant::B => "vgg11-b".into(),
                VggVariant::C => "vgg11-c".into(),
            },
            Family::MobilenetV2Cifar => "mobilenetv2-cifar".into(),
            Family::TinyVgg { separable: false } => "tiny-vgg".into(),
            Family::TinyVgg { separable: true } => "tiny-vgg-sep".into(),
            Family::GroupProbe { channels, group_width, kernel } => {
                format!("probe-c{channels}-g{group_width}-k{kernel}")
            }
        }
    }
}

impl std::str::FromStr for Family {
    type Err = Error;

    /// Parses the identifiers produced by [`Family::id`].
    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::InvalidArgument(format!("unknown family {s:?}"));
        Ok(match s {
            "inv-resnet26" => Family::InvResnet26,
            "vgg11" => Family::Vgg11 { variant: VggVariant::Plain },
            "vgg11-a" => Family::Vgg11 { variant: VggVariant::A },
            "vgg11-b" => Family::Vgg11 { variant: VggVariant::B },
            "vgg11-c" => Family::Vgg11 { variant: VggVariant::C },
            "mobilenetv2-cifar" => Family::MobilenetV2Cifar,
            "tiny-vgg" => Family::TinyVgg { separable: false },
            "tiny-vgg-sep" => Family::TinyVgg { separable: true },
            _ => {
                if let Some(depth) = s.strip_prefix("resnet") {
                    Family::Resnet { depth: depth.parse().map_err(|_| bad())? }
                } else if let Some(rest) = s.strip_prefix("probe-c") {
                    let (c, rest) = rest.split_once("-g").ok_or_else(bad)?;
                    let (g, k) = rest.split_once("-k").ok_or_else(bad)?;
                    let num = |t: &str| t.parse::<usize>().map_err(|_| bad());
                    Family::GroupProbe { channels: num(c)?, group_width: num(g)?, kernel: num(k)? }
                } else {
                    return Err(bad());
                }
            }
        })
    }
}

/// Which bitwidth entry a layer draws from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LayerRole {
    First,
    Last,
    AllToAll,
    /// Depth-wise and grouped convolutions (`groups > 1`).
    Depthwise,
}

/// Per-role quantization recipes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BitwidthMap {
    pub first: Option<QuantSpec>,
    pub last: Option<QuantSpec>,
    pub all_to_all: Option<QuantSpec>,
    pub depthwise: Option<QuantSpec>,
}

impl BitwidthMap {
    /// Interior layers at `bits`, first and last layers at 8 bits.
    pub fn uniform(bits: u8) -> Self {
        Self {
            first: Some(QuantSpec::with_bits(8)),
            last: Some(QuantSpec::with_bits(8)),
            all_to_all: Some(QuantSpec::with_bits(bits)),
            depthwise: Some(QuantSpec::with_bits(bits)),
        }
    }

    /// Every layer in full precision.
    pub fn full_precision() -> Self {
        Self {
            first: Some(QuantSpec::full_precision()),
            last: Some(QuantSpec::full_precision()),
            all_to_all: Some(QuantSpec::full_precision()),
            depthwise: Some(QuantSpec::full_precision()),
        }
    }

    pub fn with_depthwise(mut self, spec: QuantSpec) -> Self {
        self.depthwise = Some(spec);
        self
    }

    pub fn get(&self, role: LayerRole) -> Option<&QuantSpec> {
        match role {
            LayerRole::First => self.first.as_ref(),
            LayerRole::Last => self.last.as_ref(),
            LayerRole::AllToAll => self.all_to_all.as_ref(),
            LayerRole::Depthwise => self.depthwise.as_ref(),
        }
    }

    /// Short label such as `w4`, `w1-dw4` or `fp`.
    pub fn label(&self) -> String {
        let bits = |s: Option<&QuantSpec>| match s.and_then(|s| s.bits) {
            Some(b) => b.to_string(),
            None => "fp".to_string(),
        };
        let a2a = bits(self.all_to_all.as_ref());
        let dw = bits(self.depthwise.as_ref());
        let mut label = if a2a == "fp" { "fp".to_string() } else { format!("w{a2a}") };
        if dw != a2a {
            let _ = write!(label, "-dw{dw}");
        }
        let edge = bits(self.first.as_ref());
        if edge != "8" || bits(self.last.as_ref()) != "8" {
            let _ = write!(label, "-edge{edge}");
        }
        label
    }

    pub fn validate(&self) -> Result<()> {
        for s in [&self.first, &self.last, &self.all_to_all, &self.depthwise].into_iter().flatten() {
            s.validate()?;
        }
        Ok(())
    }
}

/// Complete description of one network instance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchSpec {
    pub family: Family,
    pub width_multiplier: f64,
    pub bitwidths: BitwidthMap,
    /// Input `(channels, height, width)`.
    #[serde(default = "default_input")]
    pub input: [usize; 3],
    #[serde(default = "default_classes")]
    pub classes: usize,
    /// Keep the first conv's output channels and the final feature width unscaled.
    #[serde(default)]
    pub imagenet_style: bool,
    /// Per-tensor fake quantization of activations after every ReLU.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub activation_bits: Option<u8>,
}

fn default_input() -> [usize; 3] {
    [3, 32, 32]
}

fn default_classes() -> usize {
    100
}

impl ArchSpec {
    pub fn new(family: Family, width_multiplier: f64, bitwidths: BitwidthMap) -> Self {
        Self {
            family,
            width_multiplier,
            bitwidths,
            input: default_input(),
            classes: default_classes(),
            imagenet_style: false,
            activation_bits: None,
        }
    }

    pub fn with_input(mut self, input: [usize; 3], classes: usize) -> Self {
        self.input = input;
        self.classes = classes;
        self
    }

    pub fn with_multiplier(&self, m: f64) -> Self {
        Self { width_multiplier: m, ..self.clone() }
    }

    /// Identifier used in records, e.g. `resnet20@1.5x`.
    pub fn id(&self) -> String {
        format!("{}@{}x", self.family.id(), self.width_multiplier)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::json("<arch spec>", e))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("arch spec serializes")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvDesc {
    pub name: String,
    pub c_in: usize,
    pub c_out: usize,
    pub kernel: usize,
    pub stride: usize,
    pub groups: usize,
    pub role: LayerRole,
    pub quant: QuantSpec,
    /// Followed by batch norm.
    pub bn: bool,
    /// Followed by ReLU (after batch norm).
    pub relu: bool,
}

impl ConvDesc {
    /// Elements per output filter: `(C_in / groups) * K_h * K_w`.
    pub fn fan_in(&self) -> usize {
        self.c_in / self.groups * self.kernel * self.kernel
    }

    pub fn is_depthwise(&self) -> bool {
        self.groups == self.c_in && self.c_out == self.c_in && self.groups > 1
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseDesc {
    pub name: String,
    pub c_in: usize,
    pub c_out: usize,
    pub role: LayerRole,
    pub quant: QuantSpec,
}

/// Parameter-free residual shortcut.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Shortcut {
    Identity,
    /// Spatial subsampling by `stride`, then zero-padding (or cropping) channels.
    Reshape {
        stride: usize,
        c_in: usize,
        c_out: usize,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum ArchNode {
    Conv(ConvDesc),
    MaxPool,
    GlobalAvgPool,
    Dense(DenseDesc),
    Residual { body: Vec<ArchNode>, shortcut: Shortcut, relu_after: bool },
}

/// A built layer graph.
#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    pub spec: ArchSpec,
    pub nodes: Vec<ArchNode>,
    /// Unscaled channel counts that were multiplied by `m`.
    pub scaled_bases: BTreeSet<usize>,
}

impl Network {
    /// Every conv, in forward order.
    pub fn convs(&self) -> Vec<&ConvDesc> {
        let mut out = Vec::new();
        collect_convs(&self.nodes, &mut out);
        out
    }

    pub fn dense_layers(&self) -> Vec<&DenseDesc> {
        let mut out = Vec::new();
        collect_dense(&self.nodes, &mut out);
        out
    }

    pub fn size_report(&self) -> SizeReport {
        let mut rows = Vec::new();
        for c in self.convs() {
            rows.push(SizeRow::new(&c.name, c.c_out, &c.quant, c.c_in / c.groups, c.kernel, c.kernel));
        }
        for d in self.dense_layers() {
            rows.push(SizeRow::new(&d.name, d.c_out, &d.quant, d.c_in, 1, 1));
        }
        let total_bits = rows.iter().map(|r| r.size_bits).sum();
        SizeReport { rows, total_bits }
    }
}

fn collect_convs<'a>(nodes: &'a [ArchNode], out: &mut Vec<&'a ConvDesc>) {
    for n in nodes {
        match n {
            ArchNode::Conv(c) => out.push(c),
            ArchNode::Residual { body, .. } => collect_convs(body, out),
            _ => {}
        }
    }
}

fn collect_dense<'a>(nodes: &'a [ArchNode], out: &mut Vec<&'a DenseDesc>) {
    for n in nodes {
        match n {
            ArchNode::Dense(d) => out.push(d),
            ArchNode::Residual { body, .. } => collect_dense(body, out),
            _ => {}
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SizeRow {
    pub layer: String,
    /// Number of output filters `O_i`.
    pub filters: usize,
    pub bits: u64,
    /// Input channels seen by one filter (1 for depth-wise).
    pub c_in: usize,
    pub k_w: usize,
    pub k_h: usize,
    pub size_bits: u64,
}

impl SizeRow {
    fn new(layer: &str, filters: usize, quant: &QuantSpec, c_in: usize, k_w: usize, k_h: usize) -> Self {
        let bits = quant.storage_bits();
        Self {
            layer: layer.to_string(),
            filters,
            bits,
            c_in,
            k_w,
            k_h,
            size_bits: filters as u64 * bits * (c_in * k_w * k_h) as u64,
        }
    }
}

/// Filter-weight storage in bits; batch norm and biases are not counted.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SizeReport {
    pub rows: Vec<SizeRow>,
    pub total_bits: u64,
}

impl SizeReport {
    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "{:<24} {:>8} {:>5} {:>6} {:>4} {:>4} {:>14}",
            "layer", "filters", "bits", "c_in", "k_w", "k_h", "size_bits"
        );
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{:<24} {:>8} {:>5} {:>6} {:>4} {:>4} {:>14}",
                r.layer, r.filters, r.bits, r.c_in, r.k_w, r.k_h, r.size_bits
            );
        }
        let _ = writeln!(s, "total: {} bits ({:.2} KiB)", self.total_bits, self.total_bits as f64 / 8192.0);
        s
    }
}

struct Builder<'a> {
    spec: &'a ArchSpec,
    bases: BTreeSet<usize>,
}

impl<'a> Builder<'a> {
    fn scale(&mut self, base: usize, layer: &str) -> Result<usize> {
        self.bases.insert(base);
        let c = (base as f64 * self.spec.width_multiplier).round();
        if c < 1.0 {
            return Err(Error::ZeroChannels { layer: layer.to_string(), multiplier: self.spec.width_multiplier });
        }
        Ok(c as usize)
    }

    fn quant(&self, role: LayerRole, layer: &str) -> Result<QuantSpec> {
        self.spec.bitwidths.get(role).cloned().ok_or_else(|| Error::MissingBitwidth(layer.to_string()))
    }

    #[allow(clippy::too_many_arguments)]
    fn conv(
        &self,
        name: String,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        groups: usize,
        role: LayerRole,
        relu: bool,
    ) -> Result<ArchNode> {
        let role = if role == LayerRole::AllToAll && groups > 1 { LayerRole::Depthwise } else { role };
        let quant = self.quant(role, &name)?;
        Ok(ArchNode::Conv(ConvDesc { name, c_in, c_out, kernel, stride, groups, role, quant, bn: true, relu }))
    }

    fn stem(&mut self, base: usize, stride: usize) -> Result<(ArchNode, usize)> {
        let c = if self.spec.imagenet_style { base } else { self.scale(base, "stem")? };
        let node = self.conv("stem".into(), self.spec.input[0], c, 3, stride, 1, LayerRole::First, true)?;
        Ok((node, c))
    }

    fn head(&self, c_in: usize) -> Result<Vec<ArchNode>> {
        let quant = self.quant(LayerRole::Last, "classifier")?;
        Ok(vec![
            ArchNode::GlobalAvgPool,
            ArchNode::Dense(DenseDesc {
                name: "classifier".into(),
                c_in,
                c_out: self.spec.classes,
                role: LayerRole::Last,
                quant,
            }),
        ])
    }

    fn shortcut(c_in: usize, c_out: usize, stride: usize) -> Shortcut {
        if c_in == c_out && stride == 1 {
            Shortcut::Identity
        } else {
            Shortcut::Reshape { stride, c_in, c_out }
        }
    }

    fn resnet(&mut self, depth: usize) -> Result<Vec<ArchNode>> {
        if depth < 8 || !(depth - 2).is_multiple_of(6) {
            return Err(Error::InvalidArgument(format!("resnet depth {depth} is not 6n+2")));
        }
        let blocks = (depth - 2) / 6;
        let (stem, mut c_prev) = self.stem(16, 1)?;
        let mut nodes = vec![stem];
        for (stage, base) in [16usize, 32, 64].into_iter().enumerate() {
            let c = self.scale(base, &format!("s{}", stage + 1))?;
            for b in 0..blocks {
                let stride = if stage > 0 && b == 0 { 2 } else { 1 };
                let p = format!("s{}.b{}", stage + 1, b);
                let body = vec![
                    self.conv(format!("{p}.conv1"), c_prev, c, 3, stride, 1, LayerRole::AllToAll, true)?,
                    self.conv(format!("{p}.conv2"), c, c, 3, 1, 1, LayerRole::AllToAll, false)?,
                ];
                nodes.push(ArchNode::Residual { body, shortcut: Self::shortcut(c_prev, c, stride), relu_after: true });
                c_prev = c;
            }
        }
        nodes.extend(self.head(c_prev)?);
        Ok(nodes)
    }

    /// Expand (skipped when `hidden == c_in`), depth-wise, project. A skip
    /// connection is added only when the block preserves shape.
    fn inverted_residual(
        &self,
        p: &str,
        c_in: usize,
        hidden: usize,
        c_out: usize,
        stride: usize,
    ) -> Result<Vec<ArchNode>> {
        let mut body = Vec::new();
        if hidden != c_in {
            body.push(self.conv(format!("{p}.expand"), c_in, hidden, 1, 1, 1, LayerRole::AllToAll, true)?);
        }
        body.push(self.conv(format!("{p}.dw"), hidden, hidden, 3, stride, hidden, LayerRole::Depthwise, true)?);
        body.push(self.conv(format!("{p}.project"), hidden, c_out, 1, 1, 1, LayerRole::AllToAll, false)?);
        if stride == 1 && c_in == c_out {
            Ok(vec![ArchNode::Residual { body, shortcut: Shortcut::Identity, relu_after: false }])
        } else {
            Ok(body)
        }
    }

    fn inv_resnet26(&mut self) -> Result<Vec<ArchNode>> {
        let (stem, mut c_prev) = self.stem(16, 1)?;
        let mut nodes = vec![stem];
        for (stage, base) in [16usize, 32, 64].into_iter().enumerate() {
            let c = self.scale(base, &format!("s{}", stage + 1))?;
            for b in 0..4 {
                let stride = if stage > 0 && b == 0 { 2 } else { 1 };
                // Hidden width is six times the stage width, as in the table.
                let p = format!("s{}.b{}", stage + 1, b);
                nodes.extend(self.inverted_residual(&p, c_prev, c * EXPANSION, c, stride)?);
                c_prev = c;
            }
        }
        nodes.extend(self.head(c_prev)?);
        Ok(nodes)
    }

    fn vgg11(&mut self, variant: VggVariant) -> Result<Vec<ArchNode>> {
        // (base width, replaced by a separable pair, maxpool after)
        const PLAN: [(usize, bool); 8] =
            [(64, false), (128, true), (256, false), (256, true), (512, false), (512, true), (512, false), (512, true)];
        let replaced = |i: usize| match variant {
            VggVariant::Plain => false,
            VggVariant::A => i == 1,
            VggVariant::B => (1..=4).contains(&i),
            VggVariant::C => i >= 1,
        };
        let (stem, mut c_prev) = self.stem(PLAN[0].0, 1)?;
        let mut nodes = vec![stem, ArchNode::MaxPool];
        for (i, &(base, pool_after)) in PLAN.iter().enumerate().skip(1) {
            let name = format!("conv{}", i + 1);
            let c = self.scale(base, &name)?;
            if replaced(i) {
                nodes.push(self.conv(format!("{name}.pw"), c_prev, c, 1, 1, 1, LayerRole::AllToAll, true)?);
                nodes.push(self.conv(format!("{name}.dw"), c, c, 3, 1, c, LayerRole::Depthwise, true)?);
            } else {
                nodes.push(self.conv(name, c_prev, c, 3, 1, 1, LayerRole::AllToAll, true)?);
            }
            if pool_after {
                nodes.push(ArchNode::MaxPool);
            }
            c_prev = c;
        }
        nodes.extend(self.head(c_prev)?);
        Ok(nodes)
    }

    fn mobilenet_v2(&mut self) -> Result<Vec<ArchNode>> {
        // (expansion t, base channels c, repeats n); only row 5 downsamples.
        const ROWS: [(usize, usize, usize); 7] =
            [(1, 16, 1), (6, 24, 2), (6, 32, 3), (6, 64, 4), (6, 96, 3), (6, 160, 3), (6, 320, 1)];
        let (stem, mut c_prev) = self.stem(32, 2)?;
        let mut nodes = vec![stem];
        for (r, &(t, base, n)) in ROWS.iter().enumerate() {
            let c = self.scale(base, &format!("r{}", r + 1))?;
            for b in 0..n {
                let stride = if r == 4 && b == 0 { 2 } else { 1 };
                // MobileNetV2 expands the block's input width.
                let p = format!("r{}.b{}", r + 1, b);
                nodes.extend(self.inverted_residual(&p, c_prev, c_prev * t, c, stride)?);
                c_prev = c;
            }
        }
        let c_last = if self.spec.imagenet_style { 1280 } else { self.scale(1280, "conv_last")? };
        nodes.push(self.conv("conv_last".into(), c_prev, c_last, 1, 1, 1, LayerRole::AllToAll, true)?);
        nodes.extend(self.head(c_last)?);
        Ok(nodes)
    }

    fn tiny_vgg(&mut self, separable: bool) -> Result<Vec<ArchNode>> {
        const PLAN: [(usize, bool); 5] = [(16, true), (32, true), (64, false), (64, true), (96, false)];
        let (stem, mut c_prev) = self.stem(PLAN[0].0, 1)?;
        let mut nodes = vec![stem, ArchNode::MaxPool];
        for (i, &(base, pool_after)) in PLAN.iter().enumerate().skip(1) {
            let name = format!("conv{}", i + 1);
            let c = self.scale(base, &name)?;
            if separable {
                nodes.push(self.conv(format!("{name}.pw"), c_prev, c, 1, 1, 1, LayerRole::AllToAll, true)?);
                nodes.push(self.conv(format!("{name}.dw"), c, c, 3, 1, c, LayerRole::Depthwise, true)?);
            } else {
                nodes.push(self.conv(name, c_prev, c, 3, 1, 1, LayerRole::AllToAll, true)?);
            }
            if pool_after {
                nodes.push(ArchNode::MaxPool);
            }
            c_prev = c;
        }
        nodes.extend(self.head(c_prev)?);
        Ok(nodes)
    }

    fn group_probe(&mut self, channels: usize, group_width: usize, kernel: usize) -> Result<Vec<ArchNode>> {
        if group_width == 0 || kernel == 0 || !channels.is_multiple_of(group_width) {
            return Err(Error::InvalidArgument(format!(
                "probe channels {channels} not divisible by group width {group_width}"
            )));
        }
        let (stem, c0) = self.stem(16, 1)?;
        // The probe keeps its channel count so the fan-in stays fixed.
        let groups = channels / group_width;
        Ok(vec![
            stem,
            ArchNode::MaxPool,
            self.conv("expand".into(), c0, channels, 1, 1, 1, LayerRole::AllToAll, true)?,
            self.conv("probe".into(), channels, channels, kernel, 1, groups, LayerRole::Depthwise, true)?,
            ArchNode::MaxPool,
            self.conv("mix".into(), channels, c0, 1, 1, 1, LayerRole::AllToAll, true)?,
        ]
        .into_iter()
        .chain(self.head(c0)?)
        .collect())
    }
}

/// Builds the layer graph of `spec`.
pub fn build(spec: &ArchSpec) -> Result<Network> {
    if !(spec.width_multiplier > 0.0 && spec.width_multiplier.is_finite()) {
        return Err(Error::InvalidArgument(format!("width multiplier {} must be positive", spec.width_multiplier)));
    }
    if spec.input.contains(&0) || spec.classes == 0 {
        return Err(Error::InvalidArgument("input dims and class count must be positive".into()));
    }
    spec.bitwidths.validate()?;
    let mut b = Builder { spec, bases: BTreeSet::new() };
    let nodes = match &spec.family {
        Family::Resnet { depth } => b.resnet(*depth)?,
        Family::InvResnet26 => b.inv_resnet26()?,
        Family::Vgg11 { variant } => b.vgg11(*variant)?,
        Family::MobilenetV2Cifar => b.mobilenet_v2()?,
        Family::TinyVgg { separable } => b.tiny_vgg(*separable)?,
        Family::GroupProbe { channels, group_width, kernel } => b.group_probe(*channels, *group_width, *kernel)?,
    };
    let scaled_bases = b.bases;
    let net = Network { spec: spec.clone(), nodes, scaled_bases };
    check_spatial(&net)?;
    Ok(net)
}

fn check_spatial(net: &Network) -> Result<()> {
    fn walk(nodes: &[ArchNode], mut hw: (usize, usize)) -> Result<(usize, usize)> {
        for n in nodes {
            hw = match n {
                ArchNode::Conv(c) => (hw.0.div_ceil(c.stride), hw.1.div_ceil(c.stride)),
                ArchNode::MaxPool => {
                    if hw.0 < 2 || hw.1 < 2 {
                        return Err(Error::InvalidArgument(format!(
                            "input too small: max pooling a {}x{} map",
                            hw.0, hw.1
                        )));
                    }
                    (hw.0 / 2, hw.1 / 2)
                }
                ArchNode::GlobalAvgPool => (1, 1),
                ArchNode::Dense(_) => hw,
                ArchNode::Residual { body, .. } => walk(body, hw)?,
            };
        }
        Ok(hw)
    }
    walk(&net.nodes, (net.spec.input[1], net.spec.input[2])).map(|_| ())
}

/// Model size of `spec` in bits.
pub fn model_size(spec: &ArchSpec) -> Result<SizeReport> {
    Ok(build(spec)?.size_report())
}

/// Result of [`align_width`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Alignment {
    pub width_multiplier: f64,
    pub size_bits: u64,
    pub target_bits: u64,
    /// `(size - target) / target`.
    pub rel_error: f64,
}

impl Alignment {
    pub fn within(&self, tolerance: f64) -> bool {
        self.rel_error.abs() <= tolerance
    }
}

const MAX_MULTIPLIER: f64 = 256.0;

fn size_at(template: &ArchSpec, m: f64) -> Option<u64> {
    model_size(&template.with_multiplier(m)).ok().map(|r| r.total_bits)
}

/// Finds the width multiplier whose model size is closest to `target_bits`
/// without exceeding `target_bits * (1 + tolerance)`.
///
/// Size is a non-decreasing step function of `m`. Bisection locates the
/// largest feasible `m`; the constant pieces just below it (delimited by the
/// points where some `round(m * C)` changes) are then scanned for the size
/// nearest the target.
pub fn align_width(template: &ArchSpec, target_bits: u64, tolerance: f64) -> Result<Alignment> {
    if tolerance.is_nan() || tolerance < 0.0 {
        return Err(Error::InvalidArgument(format!("tolerance {tolerance} must be >= 0")));
    }
    let cap = target_bits as f64 * (1.0 + tolerance);
    let bases = build(&template.with_multiplier(1.0))?.scaled_bases;
    let min_base = *bases
        .iter()
        .next()
        .ok_or_else(|| Error::InvalidArgument(format!("{} has no width-scaled layers", template.family.id())))?;

    // Smallest multiplier that keeps every layer at >= 1 channel.
    let m_min = 0.5 / min_base as f64;
    let smallest = size_at(template, m_min * (1.0 + 1e-9))
        .ok_or_else(|| Error::InvalidArgument("network cannot be built at any width".into()))?;
    if smallest as f64 > cap {
        return Err(Error::UnreachableTarget { target: target_bits, nearest: smallest });
    }
    let mut hi = 1.0f64.max(m_min * 2.0);
    while size_at(template, hi).is_some_and(|s| s as f64 <= cap) {
        hi *= 2.0;
        if hi > MAX_MULTIPLIER {
            return Err(Error::UnreachableTarget {
                target: target_bits,
                nearest: size_at(template, MAX_MULTIPLIER).unwrap_or(smallest),
            });
        }
    }
    let mut lo = m_min * (1.0 + 1e-9);
    for _ in 0..100 {
        let mid = 0.5 * (lo + hi);
        if size_at(template, mid).is_some_and(|s| s as f64 <= cap) {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo <= 1e-12 * hi {
            break;
        }
    }

    // Pieces of constant size below `lo`: breakpoints are (k + 0.5) / C.
    let window_lo = (lo * (1.0 - 4.0 * tolerance.max(0.005))).max(m_min);
    let mut breaks: Vec<f64> = bases
        .iter()
        .flat_map(|&c| {
            let c = c as f64;
            let k0 = (window_lo * c - 0.5).floor().max(0.0) as u64;
            let k1 = (lo * c - 0.5).ceil() as u64;
            (k0..=k1).map(move |k| (k as f64 + 0.5) / c)
        })
        .filter(|&m| m > window_lo && m < lo)
        .collect();
    breaks.push(window_lo);
    breaks.push(lo);
    breaks.sort_by(f64::total_cmp);
    breaks.dedup();

    let mut best: Option<(f64, u64)> = size_at(template, lo).map(|s| (lo, s));
    for w in breaks.windows(2) {
        let m = 0.5 * (w[0] + w[1]);
        if let Some(s) = size_at(template, m) {
            if s as f64 > cap {
                continue;
            }
            let better = match best {
                None => true,
                Some((_, bs)) => s.abs_diff(target_bits) < bs.abs_diff(target_bits),
            };
            if better {
                best = Some((m, s));
            }
        }
    }
    let (m, size) = best.ok_or(Error::UnreachableTarget { target: target_bits, nearest: smallest })?;
    Ok(Alignment {
        width_multiplier: m,
        size_bits: size,
        target_bits,
        rel_error: (size as f64 - target_bits as f64) / target_bits as f64,
    })
}
