mod common;

use common::random_tensor;
use iriscale::recognize::{build_classifier, logits, predict, stacked_pool, ClassifierConfig};
use iriscale::rng::stream;
use iriscale::tensor::{finite_difference_check_params, GradTape};
use iriscale::Tensor;
use proptest::prelude::*;

fn small() -> ClassifierConfig {
    ClassifierConfig { num_classes: 6, input_size: 32, widths: vec![4, 8, 8], ..ClassifierConfig::default() }
}

proptest! {
    #[test]
    fn stacked_pool_shape_for_any_extent(c in 1usize..5, h in 3usize..=32, w in 3usize..=32, seed in any::<u64>()) {
        let x = random_tensor(&[c, h, w], &mut stream(seed, &[]), -1.0, 1.0);
        let y = stacked_pool(&x).unwrap();
        prop_assert_eq!(y.shape(), &[c]);
    }

    #[test]
    fn stacked_pool_of_constant_is_exact(h in 3usize..=32, w in 3usize..=32, v in -100.0f32..100.0) {
        let x = Tensor::full(&[2, h, w], v);
        prop_assert!(stacked_pool(&x).unwrap().data().iter().all(|&o| o == v));
    }

    #[test]
    fn shifting_logits_keeps_prediction(seed in any::<u64>(), shift in -30.0f32..30.0) {
        let mut p = build_classifier(&small(), seed).unwrap();
        let x = random_tensor(&[3, 32, 32], &mut stream(seed, &[1]), 0.0, 1.0);
        let (before, _) = predict(&x, &p).unwrap();
        let id = p.params.id("fc.bias").unwrap();
        for b in p.params.tensor_mut(id).data_mut() {
            *b += shift;
        }
        prop_assert_eq!(predict(&x, &p).unwrap().0, before);
    }
}

#[test]
fn stacked_pool_rejects_small_extent() {
    assert!(stacked_pool(&Tensor::zeros(&[1, 2, 5])).is_err());
}

#[test]
fn permuting_classes_permutes_logits() {
    let cfg = small();
    let p = build_classifier(&cfg, 4).unwrap();
    let perm = [3usize, 0, 5, 1, 4, 2];
    let mut q = p.clone();
    let f = p.cfg.head_width();
    for name in ["fc.weight", "fc.bias"] {
        let src = p.params.get(name).unwrap().clone();
        let row = src.len() / cfg.num_classes;
        let id = q.params.id(name).unwrap();
        let dst = q.params.tensor_mut(id).data_mut();
        for (new, &old) in perm.iter().enumerate() {
            dst[new * row..(new + 1) * row].copy_from_slice(&src.data()[old * row..(old + 1) * row]);
        }
        assert!(row == f || row == 1);
    }
    let x = random_tensor(&[2, 3, 32, 32], &mut stream(9, &[]), 0.0, 1.0);
    let (a, b) = (logits(&x, &p).unwrap(), logits(&x, &q).unwrap());
    for n in 0..2 {
        for (new, &old) in perm.iter().enumerate() {
            assert_eq!(b.at(&[n, new]).to_bits(), a.at(&[n, old]).to_bits());
        }
    }
}

#[test]
fn default_logits_have_79_columns_and_repeat() {
    let cfg = ClassifierConfig { input_size: 32, widths: vec![4, 8], ..ClassifierConfig::default() };
    let p = build_classifier(&cfg, 1).unwrap();
    let x = random_tensor(&[3, 3, 32, 32], &mut stream(2, &[]), 0.0, 1.0);
    let a = logits(&x, &p).unwrap();
    assert_eq!(a.shape(), &[3, 79]);
    assert_eq!(a, logits(&x, &build_classifier(&cfg, 1).unwrap()).unwrap());
}

#[test]
fn classifier_gradients_match_finite_differences() {
    let p = build_classifier(&small(), 12).unwrap();
    let x = random_tensor(&[2, 3, 32, 32], &mut stream(12, &[1]), 0.0, 1.0);
    let report = finite_difference_check_params(
        |tape: &mut GradTape, ps| {
            let q = iriscale::recognize::ClassifierParams { cfg: p.cfg.clone(), params: ps.clone() };
            let xv = tape.leaf(x.clone());
            let out = iriscale::recognize::classifier_forward(tape, xv, &q)?;
            tape.cross_entropy(out, &[1, 4])
        },
        &p.params,
        1e-3,
        1e-3,
    )
    .unwrap();
    assert!(report.passed(), "{report:?}");
}
