//! Layer lists at m = 1 against hand-transcribed golden files, and model
//! sizes recomputed from those files.

mod common;

use common::{cifar_spec, conv_rows, golden, golden_size, GOLDEN};
use qat_core::arch::{align_width, build, model_size, BitwidthMap};

#[test]
fn layer_lists_match_golden_files() {
    for id in GOLDEN {
        let net = build(&cifar_spec(id, BitwidthMap::uniform(4))).unwrap();
        let mut rows = golden(id);
        let classifier = rows.pop().unwrap();
        assert_eq!(conv_rows(&net), rows, "{id}");
        let head = net.size_report().rows.pop().unwrap();
        assert_eq!(
            (head.layer.as_str(), head.c_in, head.filters),
            ("classifier", classifier.c_in, classifier.c_out),
            "{id}"
        );
    }
}

#[test]
fn sizes_match_golden_totals() {
    for id in GOLDEN {
        let rows = golden(id);
        for bits in [1u8, 2, 4, 8] {
            let report = model_size(&cifar_spec(id, BitwidthMap::uniform(bits))).unwrap();
            assert_eq!(report.total_bits, golden_size(&rows, bits as u64), "{id} w{bits}");
        }
    }
}

#[test]
fn resnet20_total_by_hand() {
    // stem 8*16*3*9, stage 1 6*4*16*16*9, stage 2 4*(32*16*9 + 5*32*32*9),
    // stage 3 4*(64*32*9 + 5*64*64*9), classifier 8*100*64.
    let expected = 3456 + 55_296 + 202_752 + 811_008 + 51_200;
    assert_eq!(model_size(&cifar_spec("resnet20", BitwidthMap::uniform(4))).unwrap().total_bits, expected);
}

#[test]
fn full_precision_counts_32_bits() {
    let rows = golden("vgg11");
    let fp = model_size(&cifar_spec("vgg11", BitwidthMap::full_precision())).unwrap().total_bits;
    let params: u64 = rows.iter().map(|r| (r.c_out * r.c_in / r.groups * r.kernel * r.kernel) as u64).sum();
    assert_eq!(fp, 32 * params);
}

#[test]
fn one_bit_resnets_align_near_twice_the_width() {
    for id in ["resnet20", "resnet32", "resnet56"] {
        let target = model_size(&cifar_spec(id, BitwidthMap::uniform(4))).unwrap().total_bits;
        let a = align_width(&cifar_spec(id, BitwidthMap::uniform(1)), target, 0.01).unwrap();
        assert!((1.9..=2.1).contains(&a.width_multiplier), "{id}: m = {}", a.width_multiplier);
        assert!(a.rel_error.abs() <= 0.01, "{id}: {}", a.rel_error);
    }
}
