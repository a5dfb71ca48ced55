//! Basis-mask algebra: combination linearity, one-hot recovery, overlap
//! statistics, and bit-exact persistence round-trips.

mod common;

use impresslearn::alphatrain::AlphaMatrix;
use impresslearn::backbone::{init_backbone, ArchSpec, BackboneNet};
use impresslearn::impressions::{
    combine, generate_random_basis, load_basis, load_mask, overlap_stats, save_basis, save_mask,
    BinaryMask, MaskLayer, Provenance,
};
use impresslearn::Error;
use ndarray::Array2;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn net() -> BackboneNet {
    init_backbone(&ArchSpec::new(vec![12, 9, 6]).unwrap(), 5).unwrap()
}

#[test]
fn random_basis_has_exact_layer_counts_and_is_deterministic() {
    let net = net();
    let basis = generate_random_basis(&net, 0.75, 4, 9).unwrap();
    assert_eq!(basis.len(), 4);
    for mask in &basis.masks {
        // round((1-0.75)·108) = 27, round(0.25·54) = 14 (banker-free round)
        assert_eq!(mask.layers[0].count_ones(), 27);
        assert_eq!(mask.layers[1].count_ones(), 14);
    }
    let again = generate_random_basis(&net, 0.75, 4, 9).unwrap();
    for (a, b) in basis.masks.iter().zip(&again.masks) {
        assert_eq!(a.checksum(), b.checksum());
    }
    let other = generate_random_basis(&net, 0.75, 4, 10).unwrap();
    assert_ne!(basis.masks[0].checksum(), other.masks[0].checksum());
}

#[test]
fn one_hot_alpha_recovers_the_selected_mask_exactly() {
    let net = net();
    let basis = generate_random_basis(&net, 0.5, 5, 3).unwrap();
    for j in 0..5 {
        let alpha = AlphaMatrix::one_hot(5, net.depth(), j);
        let eff = combine(&basis, &alpha, &net).unwrap();
        let direct = basis.masks[j].to_effective();
        for (a, b) in eff.layers.iter().zip(&direct.layers) {
            assert_eq!(a, b, "one-hot on mask {j} must be exact");
        }
    }
}

#[test]
fn combine_is_linear_in_alpha() {
    let net = net();
    let basis = generate_random_basis(&net, 0.5, 3, 7).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let a = Array2::from_shape_fn((3, net.depth()), |_| rng.gen_range(-1.0f32..1.0));
    let b = Array2::from_shape_fn((3, net.depth()), |_| rng.gen_range(-1.0f32..1.0));
    let sum = AlphaMatrix {
        values: &a + &b,
        task_id: "s".into(),
    };
    let ea = combine(
        &basis,
        &AlphaMatrix { values: a, task_id: "a".into() },
        &net,
    )
    .unwrap();
    let eb = combine(
        &basis,
        &AlphaMatrix { values: b, task_id: "b".into() },
        &net,
    )
    .unwrap();
    let esum = combine(&basis, &sum, &net).unwrap();
    for i in 0..net.depth() {
        let lin = &ea.layers[i] + &eb.layers[i];
        for (x, y) in esum.layers[i].iter().zip(lin.iter()) {
            assert!((x - y).abs() < 1e-6, "combine not linear: {x} vs {y}");
        }
    }
}

#[test]
fn two_mask_integer_combination_hand_case() {
    // layer with masks A = [1,1,0,0], B = [0,1,1,0], α = (2, -1):
    // result = [2, 1, -1, 0]
    let mut a = MaskLayer::zeros(1, 4);
    a.set(0);
    a.set(1);
    let mut b = MaskLayer::zeros(1, 4);
    b.set(1);
    b.set(2);
    let net = init_backbone(&ArchSpec::new(vec![4, 1]).unwrap(), 1).unwrap();
    let make = |layer: MaskLayer| BinaryMask {
        layers: vec![layer],
        sparsity: 0.5,
        provenance: Provenance::Random { seed: 0 },
    };
    let basis = impresslearn::impressions::BasisSet {
        masks: vec![make(a), make(b)],
        backbone_checksum: net.checksum(),
        mode: impresslearn::impressions::BasisMode::Random,
        sparsity: 0.5,
    };
    let alpha = AlphaMatrix {
        values: ndarray::array![[2.0f32], [-1.0]],
        task_id: "h".into(),
    };
    let eff = combine(&basis, &alpha, &net).unwrap();
    assert_eq!(
        eff.layers[0].as_slice().unwrap(),
        &[2.0f32, 1.0, -1.0, 0.0]
    );
}

#[test]
fn combine_rejects_foreign_backbone() {
    let net_a = net();
    let net_b = init_backbone(net_a.arch(), 99).unwrap();
    let basis = generate_random_basis(&net_a, 0.5, 2, 1).unwrap();
    let alpha = AlphaMatrix::one_hot(2, net_a.depth(), 0);
    match combine(&basis, &alpha, &net_b) {
        Err(Error::BackboneMismatch { .. }) => {}
        other => panic!("expected backbone mismatch, got {other:?}"),
    }
}

#[test]
fn overlap_identical_and_disjoint_masks() {
    let net = net();
    let basis = generate_random_basis(&net, 0.5, 1, 4).unwrap();
    let m = &basis.masks[0];
    let self_overlap = overlap_stats(m, m).unwrap();
    for o in &self_overlap {
        assert!((o.jaccard - 1.0).abs() < 1e-12);
        assert!((o.shared_ones_fraction - 1.0).abs() < 1e-12);
    }

    // complement: disjoint by construction
    let mut comp_layers = Vec::new();
    for layer in &m.layers {
        let mut c = MaskLayer::zeros(layer.rows, layer.cols);
        for idx in 0..layer.len() {
            if !layer.get(idx) {
                c.set(idx);
            }
        }
        comp_layers.push(c);
    }
    let comp = BinaryMask {
        layers: comp_layers,
        sparsity: 0.5,
        provenance: Provenance::Random { seed: 1 },
    };
    let disjoint = overlap_stats(m, &comp).unwrap();
    for o in &disjoint {
        assert_eq!(o.jaccard, 0.0);
        assert_eq!(o.shared_ones_fraction, 0.0);
    }
}

#[test]
fn random_mask_pair_overlap_near_expectation() {
    // big layer so the hypergeometric concentration is tight
    let net = init_backbone(&ArchSpec::new(vec![784, 300, 10]).unwrap(), 2).unwrap();
    let basis = generate_random_basis(&net, 0.9, 2, 5).unwrap();
    let ov = overlap_stats(&basis.masks[0], &basis.masks[1]).unwrap();
    // shared fraction of 1-positions concentrates near (1-s) = 0.1
    assert!(
        (ov[0].shared_ones_fraction - 0.1).abs() < 0.02,
        "layer-0 shared fraction {}",
        ov[0].shared_ones_fraction
    );
}

#[test]
fn mask_file_roundtrip_is_bit_exact() {
    let dir = tempfile::tempdir().unwrap();
    let net = net();
    let basis = generate_random_basis(&net, 0.7, 1, 8).unwrap();
    let mask = &basis.masks[0];
    let path = dir.path().join("m.imsk");
    save_mask(mask, net.checksum(), &path).unwrap();
    let (loaded, bound) = load_mask(&path, mask.provenance.clone()).unwrap();
    assert_eq!(bound, net.checksum());
    assert_eq!(loaded.checksum(), mask.checksum());
    for (a, b) in loaded.layers.iter().zip(&mask.layers) {
        assert_eq!(a.packed_bytes(), b.packed_bytes());
    }
}

#[test]
fn truncated_mask_file_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let net = net();
    let basis = generate_random_basis(&net, 0.7, 1, 8).unwrap();
    let path = dir.path().join("m.imsk");
    save_mask(&basis.masks[0], net.checksum(), &path).unwrap();
    let bytes = std::fs::read(&path).unwrap();
    std::fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
    assert!(load_mask(&path, Provenance::Random { seed: 0 }).is_err());
}

#[test]
fn basis_dir_roundtrip_preserves_everything() {
    let dir = tempfile::tempdir().unwrap();
    let net = net();
    let basis = generate_random_basis(&net, 0.8, 3, 21).unwrap();
    save_basis(&basis, dir.path()).unwrap();
    let loaded = load_basis(dir.path()).unwrap();
    assert_eq!(loaded.len(), 3);
    assert_eq!(loaded.backbone_checksum, basis.backbone_checksum);
    assert_eq!(loaded.mode, basis.mode);
    assert_eq!(loaded.sparsity, basis.sparsity);
    for (a, b) in loaded.masks.iter().zip(&basis.masks) {
        assert_eq!(a.checksum(), b.checksum());
        assert_eq!(a.provenance, b.provenance);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn packed_roundtrip_preserves_any_mask(seed in 0u64..5000, rows in 1usize..9, cols in 1usize..17) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut layer = MaskLayer::zeros(rows, cols);
        for idx in 0..rows * cols {
            if rng.gen_bool(0.3) {
                layer.set(idx);
            }
        }
        let packed = layer.packed_bytes();
        let back = MaskLayer::from_packed_bytes(rows, cols, &packed).unwrap();
        prop_assert_eq!(layer.count_ones(), back.count_ones());
        for idx in 0..rows * cols {
            prop_assert_eq!(layer.get(idx), back.get(idx));
        }
    }
}
