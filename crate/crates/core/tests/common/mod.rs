//! Helpers shared by integration test targets.

#![allow(dead_code)]

use std::path::PathBuf;

use qat_core::arch::{ArchSpec, BitwidthMap, Family, Network};

/// Families with a hand-transcribed layer list under `tests/golden`.
pub const GOLDEN: &[&str] = &[
    "resnet20",
    "resnet26",
    "resnet32",
    "resnet38",
    "resnet44",
    "resnet50",
    "resnet56",
    "inv-resnet26",
    "vgg11",
    "vgg11-a",
    "vgg11-b",
    "vgg11-c",
    "mobilenetv2-cifar",
];

#[derive(Debug, Clone, PartialEq)]
pub struct GoldenRow {
    pub name: String,
    pub c_in: usize,
    pub c_out: usize,
    pub kernel: usize,
    pub stride: usize,
    pub groups: usize,
}

/// Parses `tests/golden/<id>.txt`: one `name c_in c_out kernel stride groups`
/// line per layer, classifier last.
pub fn golden(id: &str) -> Vec<GoldenRow> {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/golden").join(format!("{id}.txt"));
    std::fs::read_to_string(&path)
        .unwrap_or_else(|e| panic!("{}: {e}", path.display()))
        .lines()
        .filter(|l| !l.starts_with('#') && !l.trim().is_empty())
        .map(|l| {
            let f: Vec<&str> = l.split_whitespace().collect();
            let n = |i: usize| f[i].parse::<usize>().unwrap();
            GoldenRow { name: f[0].into(), c_in: n(1), c_out: n(2), kernel: n(3), stride: n(4), groups: n(5) }
        })
        .collect()
}

/// Conv layers of `net` in golden-row form (the classifier is not a conv).
pub fn conv_rows(net: &Network) -> Vec<GoldenRow> {
    net.convs()
        .iter()
        .map(|c| GoldenRow {
            name: c.name.clone(),
            c_in: c.c_in,
            c_out: c.c_out,
            kernel: c.kernel,
            stride: c.stride,
            groups: c.groups,
        })
        .collect()
}

/// CIFAR-100 input at m = 1.
pub fn cifar_spec(id: &str, bits: BitwidthMap) -> ArchSpec {
    ArchSpec::new(id.parse::<Family>().unwrap(), 1.0, bits).with_input([3, 32, 32], 100)
}

/// `sum b * (C_in / groups) * K * K` over filters, first and last layer at 8 bits.
pub fn golden_size(rows: &[GoldenRow], interior_bits: u64) -> u64 {
    let last = rows.len() - 1;
    rows.iter()
        .enumerate()
        .map(|(i, r)| {
            let b = if i == 0 || i == last { 8 } else { interior_bits };
            b * r.c_out as u64 * (r.c_in / r.groups) as u64 * (r.kernel * r.kernel) as u64
        })
        .sum()
}
