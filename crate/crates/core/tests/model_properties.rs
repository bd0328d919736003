use bnrm::diffcore::Tensor;
use bnrm::model::{BaselineHead, BnrmHead, BnrmModel, ModelDims};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// A head with randomly rescaled weights and a bias of either sign.
fn random_head(rng: &mut ChaCha8Rng, d_model: usize, k: usize) -> BnrmHead {
    let mut head = BnrmHead::init(rng, d_model, k);
    let scale: f64 = rng.random_range(0.1..10.0);
    for t in [&mut head.scale.weight, &mut head.shape.weight, &mut head.dict] {
        for v in t.data_mut() {
            *v *= scale;
        }
    }
    head.bias = Tensor::vector(vec![rng.random_range(-2.0..2.0)]);
    head
}

#[test]
fn ten_thousand_forward_passes_are_non_negative() {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let (d_model, k) = (8, 6);
    let mut violations = 0;
    let mut head = random_head(&mut rng, d_model, k);
    for i in 0..10_000 {
        if i % 100 == 0 {
            head = random_head(&mut rng, d_model, k);
        }
        let z: Vec<f64> = (0..d_model).map(|_| rng.random_range(-5.0..5.0)).collect();
        let u_theta: Vec<f64> = (0..k).map(|_| rng.random_range(1e-12..1.0 - 1e-12)).collect();
        let u_phi: Vec<f64> = (0..k).map(|_| rng.random_range(1e-12..1.0 - 1e-12)).collect();
        let s = head.sample_reward(&z, &u_theta, &u_phi).unwrap();
        let bad = s.theta.iter().chain(&s.phi).any(|&v| v < 0.0) || s.reward < 0.0;
        violations += usize::from(bad);
    }
    assert_eq!(violations, 0);
}

#[test]
fn sampled_reward_decomposes_exactly() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..200 {
        let head = random_head(&mut rng, 5, 7);
        let z: Vec<f64> = (0..5).map(|_| rng.random_range(-2.0..2.0)).collect();
        let u: Vec<f64> = (0..14).map(|_| rng.random_range(0.01..0.99)).collect();
        let s = head.sample_reward(&z, &u[..7], &u[7..]).unwrap();
        let dot = s.theta.iter().zip(&s.phi).fold(0.0, |acc, (t, p)| acc + t * p);
        let expected = dot + head.bias.data()[0].max(0.0);
        assert!((s.reward - expected).abs() <= 1e-12 * expected.abs().max(1.0), "{} vs {expected}", s.reward);
    }
}

#[test]
fn zeroed_scale_row_switches_a_factor_off() {
    let dims = ModelDims {
        d_in: 6,
        d_model: 8,
        k: 5,
    };
    let mut model = BnrmModel::init(dims, 4).unwrap();
    let off = 2;
    for j in 0..dims.d_model {
        model.head.scale.weight.data_mut()[j * dims.k + off] = 0.0;
    }
    model.head.scale.bias.data_mut()[off] = -0.5;
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let rows: Vec<Vec<f64>> = (0..500)
        .map(|_| (0..dims.d_in).map(|_| rng.random_range(-10.0..10.0)).collect())
        .collect();
    let refs: Vec<&[f64]> = rows.iter().map(Vec::as_slice).collect();
    let (thetas, _) = model.factor_means(&refs).unwrap();
    for theta in thetas {
        assert!(theta[off] <= 1e-6 * (1.0 + 1e-12), "{}", theta[off]);
    }
}

proptest! {
    #[test]
    fn baseline_argmax_survives_positive_scaling(
        w in prop::collection::vec(-2.0f64..2.0, 4),
        zs in prop::collection::vec(prop::collection::vec(-3.0f64..3.0, 4), 2..12),
        c in 1e-3f64..1e3,
    ) {
        let head = BaselineHead::from_weights(w);
        let argmax = |scale: f64| {
            let scores: Vec<f64> = zs
                .iter()
                .map(|z| head.reward(&z.iter().map(|v| v * scale).collect::<Vec<_>>()).unwrap())
                .collect();
            // positive scaling can turn near-ties into exact ties, so compare scores, not indices
            let best = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            (0..scores.len()).filter(|&i| scores[i] >= best - 1e-9 * best.abs().max(1.0)).collect::<Vec<_>>()
        };
        let base = argmax(1.0);
        let scaled = argmax(c);
        prop_assert!(base.iter().any(|i| scaled.contains(i)), "{:?} vs {:?}", base, scaled);
    }
}
