use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crfasn_core::autodiff::{ParamRegistry, Tape, Tensor};
use crfasn_core::crf::{
    forward_backward, log_partition, selection_attention, sequence_log_prob, viterbi_decode, PotentialTable,
    SelectionParams,
};

fn table(n: usize, l: usize, values: &[f64]) -> PotentialTable {
    let unary = Tensor::matrix(n, l, values[..n * l].to_vec()).unwrap();
    let trans = Tensor::matrix(l, l, values[n * l..n * l + l * l].to_vec()).unwrap();
    PotentialTable::new(unary, trans).unwrap()
}

fn all_sequences(n: usize, l: usize) -> Vec<Vec<usize>> {
    (0..l.pow(n as u32))
        .map(|mut code| {
            (0..n)
                .map(|_| {
                    let y = code % l;
                    code /= l;
                    y
                })
                .collect()
        })
        .collect()
}

fn plain_score(pot: &PotentialTable, y: &[usize]) -> f64 {
    let mut s = 0.0;
    for (t, &label) in y.iter().enumerate() {
        s += pot.unary.get(t, label);
        if t > 0 {
            s += pot.transition.get(y[t - 1], label);
        }
    }
    s
}

fn chain() -> impl Strategy<Value = (usize, usize, Vec<f64>)> {
    (1usize..7, 1usize..5).prop_flat_map(|(n, l)| {
        (Just(n), Just(l), prop::collection::vec(-4.0f64..4.0, n * l + l * l))
    })
}

#[test]
fn sequence_probabilities_sum_to_one() {
    let values: Vec<f64> = (0..21).map(|i| ((i * 7 % 11) as f64 - 5.0) * 0.37).collect();
    let pot = table(4, 3, &values);
    let total: f64 = all_sequences(4, 3)
        .iter()
        .map(|y| sequence_log_prob(&pot, y).unwrap().exp())
        .sum();
    assert!((total - 1.0).abs() <= 1e-9);
}

#[test]
fn viterbi_matches_search_on_six_by_four() {
    let values: Vec<f64> = (0..40).map(|i| (((i * 13) % 17) as f64 - 8.0) * 0.29).collect();
    let pot = table(6, 4, &values);
    let (best, best_score) = all_sequences(6, 4)
        .into_iter()
        .map(|y| {
            let s = plain_score(&pot, &y);
            (y, s)
        })
        .fold((vec![], f64::NEG_INFINITY), |acc, (y, s)| if s > acc.1 { (y, s) } else { acc });
    let (path, score) = viterbi_decode(&pot);
    assert_eq!(path, best);
    assert!((score - best_score).abs() <= 1e-12);
}

proptest! {
    #[test]
    fn marginals_normalised_and_consistent((n, l, values) in chain()) {
        let pot = table(n, l, &values);
        let m = forward_backward(&pot);
        for t in 0..n {
            prop_assert!((m.node.row(t).iter().sum::<f64>() - 1.0).abs() <= 1e-9);
        }
        for t in 0..m.num_edges() {
            prop_assert!((m.edge_slice(t).iter().sum::<f64>() - 1.0).abs() <= 1e-9);
            for j in 0..l {
                let out: f64 = (0..l).map(|k| m.edge_at(t, j, k)).sum();
                let inn: f64 = (0..l).map(|k| m.edge_at(t, k, j)).sum();
                prop_assert!((out - m.node.get(t, j)).abs() <= 1e-9);
                prop_assert!((inn - m.node.get(t + 1, j)).abs() <= 1e-9);
            }
        }
    }

    #[test]
    fn log_partition_matches_enumeration((n, l, values) in chain()) {
        let pot = table(n, l, &values);
        let scores: Vec<f64> = all_sequences(n, l).iter().map(|y| plain_score(&pot, y)).collect();
        let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lz = m + scores.iter().map(|s| (s - m).exp()).sum::<f64>().ln();
        prop_assert!((log_partition(&pot) - lz).abs() <= 1e-9);
    }

    #[test]
    fn unary_shift_preserves_viterbi((n, l, values) in chain(), c in -10.0f64..10.0) {
        let pot = table(n, l, &values);
        let mut shifted = values.clone();
        shifted[..n * l].iter_mut().for_each(|v| *v += c);
        let other = table(n, l, &shifted);
        prop_assert_eq!(viterbi_decode(&pot).0, viterbi_decode(&other).0);
        prop_assert!((log_partition(&other) - log_partition(&pot) - n as f64 * c).abs() <= 1e-9);
    }

    #[test]
    fn selection_gamma_in_unit_interval_and_context_exact(
        n in 1usize..9,
        seed in 0u64..1000,
        rows in prop::collection::vec(-3.0f64..3.0, 24),
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut reg = ParamRegistry::new();
        let params = SelectionParams::init(&mut reg, 3, 4, 1.0, &mut rng).unwrap();
        let data: Vec<f64> = rows.iter().cycle().take(n * 3).copied().collect();
        let mut tape = Tape::new();
        let u = tape.constant(Tensor::matrix(n, 3, data.clone()).unwrap());
        let sel = selection_attention(&mut tape, &reg, &params, u).unwrap().values(&tape);
        prop_assert!(sel.gamma.iter().all(|g| (0.0..=1.0).contains(g)));
        for k in 0..3 {
            let mut c = 0.0;
            for i in 0..n {
                c += sel.gamma[i] * data[i * 3 + k];
            }
            prop_assert!((sel.context[k] - c).abs() <= 1e-12);
        }
    }
}
