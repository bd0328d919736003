use bnrm::datagen::{generate_dataset, PreferencePair, Split, SyntheticWorld};
use bnrm::diffcore::Tensor;
use bnrm::model::{BnrmModel, ModelDims, Parameterized};
use bnrm::objectives::{
    conditioned_window, elbo_gradient_check, elbo_loss_with, ElboNoise, Posterior, DEFAULT_ETA,
};
use bnrm::trainer::{adam_step, loss_and_gradients, AdamState, BnrmTrainee};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn dims() -> ModelDims {
    ModelDims {
        d_in: 32,
        d_model: 64,
        k: 64,
    }
}

/// Full-batch Adam at a constant rate, fresh noise every step.
fn run_steps(t: &mut BnrmTrainee, batch: &[PreferencePair], steps: usize, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut adam = AdamState::new(&t.params(), 0.0);
    for _ in 0..steps {
        let (_, grads) = loss_and_gradients(t, batch, &mut rng).unwrap();
        adam_step(&mut t.params_mut(), &grads, &mut adam, 1e-3).unwrap();
    }
}

#[test]
fn full_batch_training_halves_the_objective() {
    for seed in 0..3u64 {
        let world = SyntheticWorld::new(seed);
        let batch = generate_dataset(&world, 32, Split::Train).unwrap().pairs;
        let mut t = BnrmTrainee {
            model: BnrmModel::init(dims(), seed).unwrap(),
            eta: DEFAULT_ETA,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let noise = ElboNoise::sample(&mut rng, 32, 64);
        let before = elbo_loss_with(&batch, &t.model, DEFAULT_ETA, Posterior::Sampled(&noise)).unwrap();
        run_steps(&mut t, &batch, 200, seed);
        let after = elbo_loss_with(&batch, &t.model, DEFAULT_ETA, Posterior::Sampled(&noise)).unwrap();
        assert!(
            after.total <= 0.5 * before.total,
            "seed {seed}: {} -> {}",
            before.total,
            after.total
        );
    }
}

fn check_conditioned(model: &BnrmModel, pairs: &[PreferencePair], noise: &ElboNoise, stage: &str) {
    let window = conditioned_window(pairs, 2, model, noise, DEFAULT_ETA, 1e-4)
        .unwrap()
        .expect("some 2-pair window is away from every kink");
    for eta in [DEFAULT_ETA, 1.0] {
        let r = elbo_gradient_check(window, model, eta, noise, 1e-5, 1e-3).unwrap();
        assert!(r.pass, "{stage}, eta {eta}: worst {:?} {:?}", r.worst, r.max_rel_error);
        // at most the reward bias, which starts exactly on its kink
        assert!(r.total_skipped() <= 1, "{stage}, eta {eta}: skipped {:?}", r.skipped);
    }
}

#[test]
fn gradients_stay_correct_after_training() {
    let world = SyntheticWorld::new(5);
    let train = generate_dataset(&world, 64, Split::Train).unwrap().pairs;
    let mut t = BnrmTrainee {
        model: BnrmModel::init(dims(), 5).unwrap(),
        eta: DEFAULT_ETA,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let noise = ElboNoise::sample(&mut rng, 2, 64);
    check_conditioned(&t.model, &train, &noise, "init");
    run_steps(&mut t, &train, 100, 5);
    check_conditioned(&t.model, &train, &noise, "trained");
}

#[test]
fn parameter_names_match_tensors() {
    let m = BnrmModel::init(dims(), 0).unwrap();
    let names = m.param_names();
    let params: Vec<&Tensor> = m.params();
    assert_eq!(names.len(), params.len());
    let total: usize = params.iter().map(|t| t.numel()).sum();
    assert_eq!(m.param_count(), total);
}
