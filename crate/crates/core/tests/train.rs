use proptest::prelude::*;

use crfasn_core::autodiff::{ParamRegistry, Tape, Tensor};
use crfasn_core::corpus::{generate_synthetic, IndexedConversation, SyntheticSpec};
use crfasn_core::train::optim::adagrad_step;
use crfasn_core::train::{compute_loss, prepare, Trainer, TrainConfig};

fn small_config() -> TrainConfig {
    TrainConfig {
        d: 8,
        d_u: 4,
        word_dim: 6,
        char_dim: 3,
        d_p: 3,
        d_n: 3,
        ..TrainConfig::default()
    }
}

#[test]
fn loss_trajectory_is_bit_reproducible_without_dropout() {
    let (convs, _) = generate_synthetic(&SyntheticSpec::sticky(3, 0.7, 0.3, 6, 9)).unwrap();
    let cfg = TrainConfig {
        dropout: 0.0,
        ..small_config()
    };
    let run = || {
        let (model, train, _) = prepare(&convs, &convs, &cfg).unwrap();
        let mut trainer = Trainer::new(model, cfg.clone());
        (0..12)
            .map(|s| trainer.step(&[&train[s % train.len()]]).unwrap().to_bits())
            .collect::<Vec<_>>()
    };
    assert_eq!(run(), run());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn adagrad_accumulators_grow_and_steps_stay_bounded(
        grads in prop::collection::vec(prop::collection::vec(prop_oneof![Just(0.0), -5.0f64..5.0], 3), 1..30),
    ) {
        let lr = 0.005;
        let mut reg = ParamRegistry::new();
        let id = reg.add("w", Tensor::zeros(&[1, 3])).unwrap();
        let mut sq_steps = [0.0f64; 3];
        let mut nonzero = [0usize; 3];
        for g in &grads {
            let before = reg.get(id).clone();
            reg.get_mut(id).grad.copy_from_slice(g);
            adagrad_step(&mut reg, lr).unwrap();
            let after = reg.get(id);
            for k in 0..3 {
                prop_assert!(after.accum[k] >= before.accum[k] && after.accum[k] >= 0.0);
                let step = after.value.data()[k] - before.value.data()[k];
                prop_assert!(step.abs() <= lr * (1.0 + 1e-12));
                sq_steps[k] += step * step;
                nonzero[k] += usize::from(g[k] != 0.0);
            }
        }
        for k in 0..3 {
            prop_assert!(sq_steps[k].sqrt() <= lr * (nonzero[k] as f64).sqrt() * (1.0 + 1e-12));
        }
    }

    #[test]
    fn initial_loss_is_finite(seed in 0u64..1000, acts in 2usize..7, self_p in 0.0f64..0.99) {
        let mut spec = SyntheticSpec::sticky(acts, self_p, 0.5, 3, seed);
        spec.min_len = 1;
        spec.max_len = 6;
        let (convs, _) = generate_synthetic(&spec).unwrap();
        let cfg = TrainConfig { seed, ..small_config() };
        let (model, train, _) = prepare(&convs, &convs, &cfg).unwrap();
        let batch: Vec<&IndexedConversation> = train.iter().collect();
        let mut tape = Tape::new();
        let loss = compute_loss(&model, &model.params, &mut tape, &batch, cfg.l2, 0.0).unwrap();
        prop_assert!(tape.value(loss).item().is_finite());
    }
}
