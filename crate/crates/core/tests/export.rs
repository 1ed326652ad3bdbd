use crfasn_core::corpus::{generate_synthetic, Conversation, SyntheticSpec, Utterance};
use crfasn_core::crf::{forward_backward, viterbi_decode};
use crfasn_core::eval::{export_attention, AttentionExport};
use crfasn_core::model::CrfAsn;
use crfasn_core::train::{prepare, TrainConfig};

fn model() -> (CrfAsn, Vec<Conversation>) {
    let (convs, _) = generate_synthetic(&SyntheticSpec::sticky(4, 0.6, 0.3, 5, 21)).unwrap();
    let cfg = TrainConfig {
        d: 8,
        d_u: 4,
        word_dim: 6,
        char_dim: 3,
        d_p: 3,
        d_n: 3,
        ..TrainConfig::default()
    };
    let (model, _, _) = prepare(&convs, &convs, &cfg).unwrap();
    (model, convs)
}

#[test]
fn single_utterance_has_no_edges() {
    let (model, convs) = model();
    let utt = convs[0].utterances[0].clone();
    let conv = Conversation::new("one", vec![utt]).unwrap();
    let ex = export_attention(&model, &model.params, &conv).unwrap();
    assert!(ex.edge_marginals.is_empty());
    assert_eq!(ex.node_marginals.len(), 1);
    assert!((ex.node_marginals[0].iter().sum::<f64>() - 1.0).abs() <= 1e-12);
    assert_eq!(ex.gamma.len(), 1);
}

#[test]
fn export_agrees_with_recomputed_inference() {
    let (model, convs) = model();
    for conv in &convs {
        let ex = export_attention(&model, &model.params, conv).unwrap();
        let idx = model.index(conv).unwrap();
        let pot = model.potentials(&model.params, &idx).unwrap();
        let m = forward_backward(&pot);
        for (t, row) in ex.node_marginals.iter().enumerate() {
            for (a, b) in row.iter().zip(m.node.row(t)) {
                assert!((a - b).abs() <= 1e-9);
            }
        }
        assert_eq!(ex.edge_marginals.len(), conv.len() - 1);
        assert!((ex.log_z - m.log_z).abs() <= 1e-9);
        let (path, score) = viterbi_decode(&pot);
        assert_eq!(ex.viterbi_path, path);
        assert_eq!(ex.viterbi_score, score);
        assert_eq!(ex.viterbi_labels.len(), conv.len());
        assert_eq!(ex.gold.as_ref().map(Vec::len), Some(conv.len()));
    }
}

#[test]
fn json_round_trip_preserves_values() {
    let (model, convs) = model();
    let ex = export_attention(&model, &model.params, &convs[1]).unwrap();
    let back: AttentionExport = serde_json::from_str(&serde_json::to_string(&ex).unwrap()).unwrap();
    assert_eq!(back.viterbi_path, ex.viterbi_path);
    let flat = |e: &AttentionExport| -> Vec<f64> {
        e.node_marginals
            .iter()
            .flatten()
            .chain(e.edge_marginals.iter().flatten().flatten())
            .chain(&e.gamma)
            .chain(e.memory_attention.iter().flatten())
            .copied()
            .collect()
    };
    for (a, b) in flat(&ex).iter().zip(flat(&back)) {
        assert!((a - b).abs() <= 1e-12);
    }
}

#[test]
fn unlabeled_conversations_export_without_gold() {
    let (model, _) = model();
    let conv = Conversation::new(
        "u",
        vec![
            Utterance::from_text("A", "hello there", None).unwrap(),
            Utterance::from_text("B", "never seen words", None).unwrap(),
        ],
    )
    .unwrap();
    let ex = export_attention(&model, &model.params, &conv).unwrap();
    assert!(ex.gold.is_none());
    assert_eq!(ex.memory_attention.len(), 2);
}
