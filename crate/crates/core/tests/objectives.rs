mod common;

use awmf_core::objectives::*;
use awmf_core::tensor::{Tape, Tensor};
use awmf_core::Error;
use common::*;

fn hard(m: usize, pred: &[u8]) -> Tensor {
    let plane = pred.len();
    let mut d = vec![0.0; m * plane];
    for (p, &c) in pred.iter().enumerate() {
        d[c as usize * plane + p] = 1.0;
    }
    Tensor::new(vec![m, 1, plane], d).unwrap()
}

#[test]
fn class_weights_balanced_and_imbalanced() {
    let balanced: Vec<u8> = [vec![0u8; 50], vec![1u8; 50]].concat();
    assert_eq!(class_weights([balanced.as_slice()], 2).unwrap().0, vec![1.0, 1.0]);

    let skewed: Vec<u8> = [vec![0u8; 75], vec![1u8; 25], vec![255u8; 40]].concat();
    let a = class_weights([skewed.as_slice()], 2).unwrap();
    assert!((a.0[0] - 0.6667).abs() < 1e-4);
    assert!((a.0[1] - 2.0).abs() < 1e-4);
}

#[test]
fn class_weights_pool_maps_and_reject_empty_class() {
    let a = [0u8, 0, 1];
    let b = [1u8, 2, 2];
    let w = class_weights([&a[..], &b[..]], 3).unwrap();
    assert_eq!(w.0, vec![1.0, 1.0, 1.0]);
    match class_weights([&a[..]], 3) {
        Err(Error::EmptyClass(2)) => {}
        other => panic!("expected empty class 2, got {other:?}"),
    }
}

#[test]
fn weighted_cross_entropy_closed_forms() {
    let m = 4;
    let p = 6;
    let mut tape = Tape::new();
    let y = tape.constant(Tensor::full(&[1, m, 2, 3], 0.25));
    let labels = [0u8, 1, 2, 3, 0, 1];
    let l = weighted_cross_entropy(&mut tape, y, &labels, &ClassWeights::uniform(m)).unwrap();
    assert!((tape.value(l).item().unwrap() - p as f64 * 4f64.ln()).abs() < 1e-12);

    let exact = tape.constant(hard(m, &labels).reshape(vec![1, m, 2, 3]).unwrap());
    let l = weighted_cross_entropy(&mut tape, exact, &labels, &ClassWeights::uniform(m)).unwrap();
    assert_eq!(tape.value(l).item().unwrap(), 0.0);
}

#[test]
fn all_ignored_pixels_give_zero_loss_and_gradient() {
    let mut r = rng(3);
    let mut tape = Tape::new();
    let x = tape.leaf(rand_tensor(&mut r, &[1, 3, 2, 2]));
    let y = tape.softmax_channels(x).unwrap();
    let l = weighted_cross_entropy(&mut tape, y, &[255; 4], &ClassWeights::uniform(3)).unwrap();
    assert_eq!(tape.value(l).item().unwrap(), 0.0);
    let g = tape.gradients(l).unwrap();
    assert!(g.wrt(x).unwrap().data().iter().all(|&v| v == 0.0));
}

#[test]
fn dice_examples() {
    let labels = [0u8, 1, 1, 0];
    assert_eq!(dice_weight_targets(&hard(2, &labels), &labels).unwrap(), 1.0);

    let single = [1u8; 4];
    let d = dice_weight_targets(&hard(2, &[0; 4]), &single).unwrap();
    assert_eq!(d, 0.0);

    // prediction of class 1 on 2a pixels containing the a-pixel class-1 region
    let a = 5;
    let gt: Vec<u8> = [vec![1u8; a], vec![0u8; 3 * a]].concat();
    let pred: Vec<u8> = [vec![1u8; 2 * a], vec![0u8; 2 * a]].concat();
    let per = dice_per_class(&hard(2, &pred), &gt).unwrap();
    assert!((per[1].unwrap() - 2.0 / 3.0).abs() <= 1e-12);
}

#[test]
fn dice_ignores_unlabelled_pixels_and_rejects_empty() {
    let gt = [1u8, 255, 255, 1];
    let pred = [1u8, 0, 0, 1];
    assert_eq!(dice_weight_targets(&hard(2, &pred), &gt).unwrap(), 1.0);
    assert!(dice_weight_targets(&hard(2, &pred), &[255; 4]).is_err());
}

#[test]
fn dice_matches_oracle_on_random_maps() {
    let mut r = rng(11);
    for _ in 0..50 {
        let m = 2 + (rand_labels(&mut r, 3, 1, false)[0] as usize);
        let gt = rand_labels(&mut r, m, 16, true);
        if gt.iter().all(|&l| l == 255) {
            continue;
        }
        let probs = rand_probs(&mut r, m, 16);
        let t = Tensor::new(vec![m, 4, 4], probs.clone()).unwrap();
        let d = dice_weight_targets(&t, &gt).unwrap();
        assert!((d - dice_oracle(&probs, &gt, m)).abs() <= 1e-12);
        assert!((0.0..=1.0).contains(&d));
    }
}

#[test]
fn mse_examples_and_gradient() {
    let mut tape = Tape::new();
    let y = tape.leaf(Tensor::new(vec![1, 3], vec![0.0, 0.0, 0.0]).unwrap());
    let w = Tensor::new(vec![1, 3], vec![1.0, 0.0, 0.0]).unwrap();
    let l = mse_weight_loss(&mut tape, y, &w).unwrap();
    assert_eq!(tape.value(l).item().unwrap(), 1.0);
    let g = tape.gradients(l).unwrap();
    assert_eq!(g.wrt(y).unwrap().data(), &[-2.0, 0.0, 0.0]);

    let same = tape.constant(w.clone());
    let l = mse_weight_loss(&mut tape, same, &w).unwrap();
    assert_eq!(tape.value(l).item().unwrap(), 0.0);
}

#[test]
fn total_loss_is_the_sum_of_its_terms() {
    let mut r = rng(5);
    let mut tape = Tape::new();
    let mut maps = vec![];
    for _ in 0..4 {
        let x = tape.constant(rand_tensor(&mut r, &[2, 3, 4, 4]));
        maps.push(tape.softmax_channels(x).unwrap());
    }
    let ts: Vec<Vec<u8>> = (0..4).map(|_| rand_labels(&mut r, 3, 32, true)).collect();
    let alphas = [
        ClassWeights(vec![1.0, 2.0, 0.5]),
        ClassWeights(vec![0.3, 1.0, 1.0]),
        ClassWeights(vec![1.5, 1.0, 0.7]),
    ];
    let alpha_t = ClassWeights(vec![0.9, 1.1, 1.3]);
    let (total, parts) = total_loss(
        &mut tape,
        maps[0],
        [maps[1], maps[2], maps[3]],
        &ts[0],
        [&ts[1], &ts[2], &ts[3]],
        [&alphas[0], &alphas[1], &alphas[2]],
        &alpha_t,
    )
    .unwrap();
    let mut expect = weighted_cross_entropy(&mut tape, maps[0], &ts[0], &alpha_t).unwrap();
    let mut sum = tape.value(expect).item().unwrap();
    assert_eq!(parts.aggregate, sum);
    for k in 0..3 {
        expect = weighted_cross_entropy(&mut tape, maps[k + 1], &ts[k + 1], &alphas[k]).unwrap();
        let v = tape.value(expect).item().unwrap();
        assert_eq!(parts.experts[k], v);
        sum += v;
    }
    assert!((tape.value(total).item().unwrap() - sum).abs() <= 1e-12);
    assert!((parts.total() - sum).abs() <= 1e-12);
}

#[test]
fn total_loss_of_perfect_predictions_is_zero() {
    let labels = [0u8, 1, 1, 0];
    let mut tape = Tape::new();
    let v: Vec<_> = (0..4)
        .map(|_| tape.constant(hard(2, &labels).reshape(vec![1, 2, 2, 2]).unwrap()))
        .collect();
    let a = ClassWeights::uniform(2);
    let (total, _) = total_loss(
        &mut tape,
        v[0],
        [v[1], v[2], v[3]],
        &labels,
        [&labels, &labels, &labels],
        [&a, &a, &a],
        &a,
    )
    .unwrap();
    assert_eq!(tape.value(total).item().unwrap(), 0.0);
}
