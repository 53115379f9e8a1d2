use drd_core::data::LabelMask;
use drd_core::distill::{
    masked_cross_entropy, masked_cross_entropy_and_grad, pixel_kl_loss, pixel_kl_loss_and_grad, softmax_scores,
    total_loss, LossWeights, ScoreKind, ScoreMap,
};
use ndarray::{Array2, Array3};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn logits(rng: &mut ChaCha8Rng, c: usize, h: usize, w: usize, spread: f64) -> ScoreMap {
    ScoreMap::new(Array3::from_shape_fn((c, h, w), |_| rng.gen_range(-spread..spread)), ScoreKind::Logits).unwrap()
}

fn probs(rng: &mut ChaCha8Rng, c: usize, h: usize, w: usize) -> ScoreMap {
    softmax_scores(&logits(rng, c, h, w, 3.0)).unwrap()
}

#[test]
fn kl_matches_brute_force_on_random_maps() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (t, s) = (probs(&mut rng, 3, 2, 2), probs(&mut rng, 3, 2, 2));
    let mut sum = 0.0;
    for y in 0..2 {
        for x in 0..2 {
            for k in 0..3 {
                let (p, q) = (t.data()[[k, y, x]], s.data()[[k, y, x]]);
                sum += p * (p / q).ln();
            }
        }
    }
    assert!((pixel_kl_loss(&t, &s).unwrap() - sum / 4.0).abs() < 1e-9);
}

#[test]
fn kl_is_asymmetric() {
    let a = ScoreMap::new(Array3::from_shape_vec((2, 1, 1), vec![0.9, 0.1]).unwrap(), ScoreKind::Probabilities).unwrap();
    let b = ScoreMap::new(Array3::from_shape_vec((2, 1, 1), vec![0.6, 0.4]).unwrap(), ScoreKind::Probabilities).unwrap();
    let ab = pixel_kl_loss(&a, &b).unwrap();
    let ba = pixel_kl_loss(&b, &a).unwrap();
    assert!((ab - (0.9f64 * (0.9f64 / 0.6).ln() + 0.1 * (0.1f64 / 0.4).ln())).abs() < 1e-12);
    assert!((ab - ba).abs() > 1e-3);
}

#[test]
fn kl_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let t = probs(&mut rng, 3, 2, 2);
    let s = logits(&mut rng, 3, 2, 2, 2.0);
    let (_, analytic) = pixel_kl_loss_and_grad(&t, &s).unwrap();
    let h = 1e-5;
    let mut worst = 0.0f64;
    let scale = analytic.iter().map(|v| v.abs()).fold(0.0, f64::max);
    for (idx, &a) in analytic.indexed_iter() {
        let eval = |d: f64| {
            let mut data = s.data().clone();
            data[idx] += d;
            let l = ScoreMap::new(data, ScoreKind::Logits).unwrap();
            pixel_kl_loss(&t, &softmax_scores(&l).unwrap()).unwrap()
        };
        let numeric = (eval(h) - eval(-h)) / (2.0 * h);
        worst = worst.max((a - numeric).abs() / scale);
    }
    assert!(worst < 1e-3, "relative error {worst}");
}

#[test]
fn cross_entropy_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let s = logits(&mut rng, 4, 3, 3, 2.0);
    let mut labels = Array2::from_shape_fn((3, 3), |_| rng.gen_range(0..4u8));
    labels[[1, 1]] = 255;
    let mask = LabelMask::new(labels, 4, 255).unwrap();
    let (_, analytic) = masked_cross_entropy_and_grad(&s, &mask).unwrap();
    let h = 1e-5;
    for (idx, &a) in analytic.indexed_iter() {
        let eval = |d: f64| {
            let mut data = s.data().clone();
            data[idx] += d;
            masked_cross_entropy(&ScoreMap::new(data, ScoreKind::Logits).unwrap(), &mask).unwrap()
        };
        let numeric = (eval(h) - eval(-h)) / (2.0 * h);
        assert!((a - numeric).abs() < 1e-6, "at {idx:?}: {a} vs {numeric}");
    }
}

#[test]
fn cross_entropy_ignores_masked_half() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let s = logits(&mut rng, 3, 2, 4, 2.0);
    let labels = Array2::from_shape_fn((2, 4), |_| rng.gen_range(0..3u8));
    let mut half = labels.clone();
    half.slice_mut(ndarray::s![.., 2..]).fill(255);
    let full_half = masked_cross_entropy(&s, &LabelMask::new(half, 3, 255).unwrap()).unwrap();
    let kept = ScoreMap::new(s.data().slice(ndarray::s![.., .., ..2]).to_owned(), ScoreKind::Logits).unwrap();
    let kept_labels = LabelMask::new(labels.slice(ndarray::s![.., ..2]).to_owned(), 3, 255).unwrap();
    assert!((full_half - masked_cross_entropy(&kept, &kept_labels).unwrap()).abs() < 1e-12);

    let uniform = ScoreMap::new(Array3::zeros((6, 2, 2)), ScoreKind::Logits).unwrap();
    let any = LabelMask::new(Array2::from_shape_vec((2, 2), vec![0, 5, 2, 3]).unwrap(), 6, 255).unwrap();
    assert!((masked_cross_entropy(&uniform, &any).unwrap() - 6f64.ln()).abs() < 1e-12);
    let none = LabelMask::new(Array2::from_elem((2, 2), 255), 6, 255).unwrap();
    assert!(masked_cross_entropy(&uniform, &none).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn kl_is_nonnegative_and_zero_on_equal_maps(seed in any::<u64>(), c in 2usize..6, h in 1usize..4, w in 1usize..4) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (t, s) = (probs(&mut rng, c, h, w), probs(&mut rng, c, h, w));
        prop_assert!(pixel_kl_loss(&t, &s).unwrap() >= -1e-7);
        prop_assert!(pixel_kl_loss(&t, &t).unwrap().abs() < 1e-7);
    }

    #[test]
    fn total_loss_is_linear_in_each_term(
        parts in proptest::array::uniform5(-5.0f64..5.0),
        l1 in 0.0f64..20.0, l2 in 0.0f64..1.0, l3 in 0.0f64..50.0,
    ) {
        let w = LossWeights::new(l1, l2, l3).unwrap();
        let [ce, p, adv, s, c] = parts;
        let base = total_loss(ce, p, adv, s, c, &w).unwrap();
        prop_assert!((base.total - (ce + l1 * p - l2 * adv + l3 * (s + c))).abs() < 1e-9);
        let d = 0.5;
        let slope = |t: f64| (t - base.total) / d;
        prop_assert!((slope(total_loss(ce + d, p, adv, s, c, &w).unwrap().total) - 1.0).abs() < 1e-9);
        prop_assert!((slope(total_loss(ce, p + d, adv, s, c, &w).unwrap().total) - l1).abs() < 1e-9);
        prop_assert!((slope(total_loss(ce, p, adv + d, s, c, &w).unwrap().total) + l2).abs() < 1e-9);
        prop_assert!((slope(total_loss(ce, p, adv, s + d, c, &w).unwrap().total) - l3).abs() < 1e-9);
        prop_assert!((slope(total_loss(ce, p, adv, s, c + d, &w).unwrap().total) - l3).abs() < 1e-9);
    }
}
