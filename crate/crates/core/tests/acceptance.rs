//! Acceptance suite. Runs every criterion, prints one PASS/FAIL line each and
//! exits non-zero if any criterion fails.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crfasn_core::autodiff::{grad_check, GradCheckOptions, ParamRegistry, Tape, Tensor};
use crfasn_core::corpus::{
    generate_synthetic, parse_jsonl, write_jsonl, Conversation, IndexedConversation, SyntheticSpec, Token,
    Utterance, PAD,
};
use crfasn_core::crf::selection::{selection_attention, SelectionParams};
use crfasn_core::crf::{forward_backward, viterbi_decode, DecoderRegistry, PotentialTable};
use crfasn_core::encoder::encode;
use crfasn_core::eval::{confusion, EvalReport};
use crfasn_core::tagger::{tagger_accuracy, CrfAsnTagger, LogisticTrainer, MajorityTrainer, TaggerTrainer};
use crfasn_core::train::{compute_loss, predict_all, prepare, train_loop, Trainer, TrainConfig};

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome, Duration);

// ---------------------------------------------------------------------------
// Independent brute force over label sequences.

fn enumerate(n: usize, l: usize) -> Vec<Vec<usize>> {
    let mut out = vec![vec![]];
    for _ in 0..n {
        out = out
            .into_iter()
            .flat_map(|prefix| {
                (0..l).map(move |y| {
                    let mut s = prefix.clone();
                    s.push(y);
                    s
                })
            })
            .collect();
    }
    out
}

struct Chain {
    unary: Vec<Vec<f64>>,
    trans: Vec<Vec<f64>>,
    start: Option<Vec<f64>>,
    stop: Option<Vec<f64>>,
}

impl Chain {
    fn score(&self, y: &[usize]) -> f64 {
        let mut s = self.unary[0][y[0]] + self.start.as_ref().map_or(0.0, |v| v[y[0]]);
        for t in 1..y.len() {
            s = s + self.trans[y[t - 1]][y[t]] + self.unary[t][y[t]];
        }
        s + self.stop.as_ref().map_or(0.0, |v| v[y[y.len() - 1]])
    }

    fn table(&self) -> PotentialTable {
        PotentialTable::with_boundaries(
            Tensor::from_rows(&self.unary),
            Tensor::from_rows(&self.trans),
            self.start.clone(),
            self.stop.clone(),
        )
        .unwrap()
    }
}

struct Brute {
    log_z: f64,
    node: Vec<Vec<f64>>,
    edge: Vec<Vec<Vec<f64>>>,
    best: Vec<usize>,
    best_score: f64,
}

fn brute(c: &Chain) -> Brute {
    let (n, l) = (c.unary.len(), c.unary[0].len());
    let seqs = enumerate(n, l);
    let scores: Vec<f64> = seqs.iter().map(|y| c.score(y)).collect();
    let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let log_z = m + scores.iter().map(|s| (s - m).exp()).sum::<f64>().ln();
    let mut node = vec![vec![0.0; l]; n];
    let mut edge = vec![vec![vec![0.0; l]; l]; n.saturating_sub(1)];
    let (mut best, mut best_score) = (seqs[0].clone(), f64::NEG_INFINITY);
    for (y, &s) in seqs.iter().zip(&scores) {
        let p = (s - log_z).exp();
        for t in 0..n {
            node[t][y[t]] += p;
            if t + 1 < n {
                edge[t][y[t]][y[t + 1]] += p;
            }
        }
        if s > best_score {
            best_score = s;
            best = y.clone();
        }
    }
    Brute {
        log_z,
        node,
        edge,
        best,
        best_score,
    }
}

fn random_chain(rng: &mut ChaCha8Rng, n: usize, l: usize, boundaries: bool) -> Chain {
    let mut row = |k: usize| -> Vec<f64> { (0..k).map(|_| rng.gen_range(-3.0..3.0)).collect() };
    let unary = (0..n).map(|_| row(l)).collect();
    let trans = (0..l).map(|_| row(l)).collect();
    let (start, stop) = if boundaries { (Some(row(l)), Some(row(l))) } else { (None, None) };
    Chain {
        unary,
        trans,
        start,
        stop,
    }
}

fn max_diff(a: impl IntoIterator<Item = f64>, b: impl IntoIterator<Item = f64>) -> f64 {
    a.into_iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

// ---------------------------------------------------------------------------
// Shared corpora and small model settings.

fn synthetic(num: usize, seed: u64) -> (Vec<Conversation>, crfasn_core::corpus::GeneratorModel) {
    let mut spec = SyntheticSpec::sticky(5, 0.7, 0.3, num, seed);
    spec.min_len = 8;
    spec.max_len = 15;
    generate_synthetic(&spec).unwrap()
}

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

// ---------------------------------------------------------------------------

fn exact_inference() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1001);
    let trials = 200;
    let mut worst: f64 = 0.0;
    for trial in 0..trials {
        let n = rng.gen_range(1..=6);
        let l = rng.gen_range(1..=4);
        let chain = random_chain(&mut rng, n, l, trial % 3 == 2);
        let b = brute(&chain);
        let pot = chain.table();
        let fb = forward_backward(&pot);
        let node_err = max_diff(fb.node.data().iter().copied(), b.node.iter().flatten().copied());
        let edge_err = max_diff(fb.edge.data().iter().copied(), b.edge.iter().flatten().flatten().copied());
        let z_err = (fb.log_z - b.log_z).abs();
        worst = worst.max(node_err).max(edge_err).max(z_err);
        if !(worst <= 1e-9) {
            return Err(format!("trial {trial} (n={n}, L={l}): error {worst:e}"));
        }
        let (path, score) = viterbi_decode(&pot);
        if path != b.best || score != b.best_score {
            return Err(format!(
                "trial {trial}: viterbi {path:?} / {score} vs brute force {:?} / {}",
                b.best, b.best_score
            ));
        }
    }
    Ok(format!("{trials} instances, max error {worst:.2e}, Viterbi exact"))
}

fn selection_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2002);
    let trials = 100;
    let dim = 4;
    let mut worst: f64 = 0.0;
    for trial in 0..trials {
        let n = rng.gen_range(1..=10);
        let mut reg = ParamRegistry::new();
        let params = SelectionParams::init(&mut reg, dim, 5, 1.0, &mut rng).unwrap();
        for v in reg.get_mut(params.pairwise).value.data_mut() {
            *v = rng.gen_range(-1.5..1.5);
        }
        for v in reg.get_mut(params.bias).value.data_mut() {
            *v = rng.gen_range(-0.5..0.5);
        }
        let rows: Vec<Vec<f64>> = (0..n).map(|_| (0..dim).map(|_| rng.gen_range(-2.0..2.0)).collect()).collect();
        let mut tape = Tape::new();
        let u = tape.constant(Tensor::from_rows(&rows));
        let sel = selection_attention(&mut tape, &reg, &params, u).unwrap().values(&tape);

        // score s_i = vᵀ tanh(W u_i + b) computed directly
        let (w, b, v, pw) = (
            reg.value(params.proj),
            reg.value(params.bias),
            reg.value(params.score),
            reg.value(params.pairwise),
        );
        let s: Vec<f64> = rows
            .iter()
            .map(|r| {
                (0..w.cols())
                    .map(|j| {
                        let pre: f64 = r.iter().enumerate().map(|(k, x)| x * w.get(k, j)).sum::<f64>() + b.get(0, j);
                        pre.tanh() * v.get(j, 0)
                    })
                    .sum()
            })
            .collect();
        let chain = Chain {
            unary: s.iter().map(|&si| vec![0.0, si]).collect(),
            trans: pw.to_rows(),
            start: None,
            stop: None,
        };
        let bf = brute(&chain);
        let gamma_err = max_diff(sel.gamma.iter().copied(), bf.node.iter().map(|r| r[1]));
        let ctx: Vec<f64> = (0..dim).map(|k| (0..n).map(|i| sel.gamma[i] * rows[i][k]).sum()).collect();
        let ctx_err = max_diff(sel.context.iter().copied(), ctx);
        worst = worst.max(gamma_err);
        if !(gamma_err <= 1e-9) || !(ctx_err <= 1e-12) {
            return Err(format!("trial {trial} (n={n}): γ error {gamma_err:e}, context error {ctx_err:e}"));
        }
    }
    Ok(format!("{trials} binary chains, max γ error {worst:.2e}"))
}

/// Smallest gap between the best and second-best window of any char-CNN
/// filter over the words of `convs`, divided by the most a step of `eps` in
/// one parameter can close it. Above 1 no argmax can switch.
fn char_cnn_margin(reg: &ParamRegistry, convs: &[IndexedConversation], eps: f64) -> f64 {
    let table = reg.by_name("emb.char").unwrap().value.clone();
    let c = table.cols();
    let max_abs = |t: &Tensor| t.data().iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let mut margin = f64::INFINITY;
    for width in [2, 3, 4] {
        let w = &reg.by_name(&format!("charcnn.w{width}")).unwrap().value;
        let reach = 2.0 * eps * width as f64 * max_abs(&table).max(max_abs(w));
        for word in convs.iter().flat_map(|conv| conv.utterances.iter().flat_map(|u| u.chars.iter())) {
            let mut ids = word.clone();
            ids.resize(ids.len().max(4), PAD);
            let windows = ids.len() - width + 1;
            for f in 0..w.cols() {
                let mut outs: Vec<f64> = (0..windows)
                    .map(|s| {
                        (0..width)
                            .flat_map(|o| (0..c).map(move |k| (o, k)))
                            .map(|(o, k)| table.get(ids[s + o], k) * w.get(o * c + k, f))
                            .sum()
                    })
                    .collect();
                if outs.len() > 1 {
                    outs.sort_by(|a, b| b.total_cmp(a));
                    margin = margin.min((outs[0] - outs[1]) / reach);
                }
            }
        }
    }
    margin
}

fn gradient_suite() -> Outcome {
    let convs = vec![
        Conversation::new(
            "g1",
            vec![
                Utterance::from_text("A", "hi long time", Some("greet")).unwrap(),
                Utterance::from_text("B", "how are you", Some("question")).unwrap(),
            ],
        )
        .unwrap(),
        Conversation::new(
            "g2",
            vec![
                Utterance::from_text("A", "fine thanks bye", Some("answer")).unwrap(),
                Utterance::from_text("B", "bye now", Some("greet")).unwrap(),
            ],
        )
        .unwrap(),
    ];
    let cfg = TrainConfig {
        dropout: 0.0,
        l2: 1e-3,
        ..small_config()
    };
    let (base, train, _) = prepare(&convs, &convs, &cfg).map_err(|e| e.to_string())?;
    // Max-over-time is piecewise smooth; a central difference is only an
    // oracle where every argmax beats the runner-up by more than ε can move
    // it. Move all tensors off their initial values and take the first draw
    // whose char-CNN margins clear that bound.
    let mut rng = ChaCha8Rng::seed_from_u64(3003);
    let mut draws = 0;
    let model = loop {
        draws += 1;
        let mut candidate = base.clone();
        for p in candidate.params.iter_mut() {
            let skip = p.pad_len();
            for v in &mut p.value.data_mut()[skip..] {
                *v += rng.gen_range(-0.3..0.3);
            }
        }
        if char_cnn_margin(&candidate.params, &train, GradCheckOptions::default().eps) > 1.0 {
            break candidate;
        }
        if draws == 50 {
            return Err("no evaluation point clear of max-over-time ties".into());
        }
    };
    let batch: Vec<&IndexedConversation> = train.iter().collect();
    let mut reg = model.params.clone();
    let report = grad_check(
        |reg, tape| compute_loss(&model, reg, tape, &batch, cfg.l2, 0.0),
        &mut reg,
        &GradCheckOptions::default(),
    )
    .map_err(|e| e.to_string())?;
    if !report.passed {
        return Err(report.to_string());
    }

    // ∂logZ/∂unary against brute-force node marginals
    let mut identity_err: f64 = 0.0;
    for _ in 0..20 {
        let (n, l) = (rng.gen_range(1..=5), rng.gen_range(2..=4));
        let chain = random_chain(&mut rng, n, l, false);
        let mut tape = Tape::new();
        let unary = tape.input(Tensor::from_rows(&chain.unary));
        let trans = tape.input(Tensor::from_rows(&chain.trans));
        let z = tape.log_partition(unary, trans, None, None).unwrap();
        tape.backward(z, &mut ParamRegistry::new()).unwrap();
        let bf = brute(&chain);
        identity_err = identity_err.max(max_diff(
            tape.grad(unary).unwrap().iter().copied(),
            bf.node.iter().flatten().copied(),
        ));
    }
    if !(identity_err <= 1e-8) {
        return Err(format!("∂logZ/∂unary deviates from marginals by {identity_err:e}"));
    }
    Ok(format!(
        "{} tensors (point {draws}), max relative error {:.2e}; ∂logZ/∂unary error {identity_err:.2e}",
        report.tensors.len(),
        report.max_rel_error
    ))
}

fn synthetic_end_to_end() -> Outcome {
    let (all, generator) = synthetic(400, 4004);
    let (train, rest) = all.split_at(300);
    let (valid, test) = rest.split_at(50);
    let cfg = TrainConfig {
        d: 64,
        d_u: 32,
        ..TrainConfig::default()
    };
    // one worker thread, so the runtime bound applies to a single core
    let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().map_err(|e| e.to_string())?;
    let outcome = pool
        .install(|| train_loop(train, valid, &cfg, None, |_| {}))
        .map_err(|e| e.to_string())?;
    let epochs = outcome.history.len();
    let crf = CrfAsnTagger {
        model: outcome.model,
        decoder: DecoderRegistry::default().get("viterbi").unwrap(),
    };
    let crf_acc = tagger_accuracy(&crf, test).map_err(|e| e.to_string())?;
    let majority = MajorityTrainer.fit(train, valid, &cfg).map_err(|e| e.to_string())?;
    let majority_acc = tagger_accuracy(majority.as_ref(), test).map_err(|e| e.to_string())?;
    let logistic = LogisticTrainer::default().fit(train, valid, &cfg).map_err(|e| e.to_string())?;
    let logistic_acc = tagger_accuracy(logistic.as_ref(), test).map_err(|e| e.to_string())?;
    let bayes_acc = tagger_accuracy(&generator, test).map_err(|e| e.to_string())?;
    let summary = format!(
        "CRF-ASN {crf_acc:.3} ({epochs} epochs), majority {majority_acc:.3}, logistic {logistic_acc:.3}, generator {bayes_acc:.3}"
    );
    let checks = [
        (crf_acc >= majority_acc + 0.20, "majority + 0.20"),
        (crf_acc >= logistic_acc + 0.05, "logistic + 0.05"),
        (crf_acc >= 0.85 * bayes_acc, "0.85 × generator"),
    ];
    match checks.iter().find(|(ok, _)| !ok) {
        Some((_, what)) => Err(format!("{summary}; below {what}")),
        None => Ok(summary),
    }
}

fn swda_format_pipeline() -> Outcome {
    // SwDA-style tag inventory over generated phrases, with POS/NER columns
    let acts = "sd, b, sv, aa, %, ba, qy, x, ny, fc, qw, nn";
    let spec = SyntheticSpec::parse(&format!(
        "acts = {acts}\nself_transition = 0.4\nnum_conversations = 40\nmin_len = 4\nmax_len = 9\nseed = 5\n"
    ))
    .map_err(|e| e.to_string())?;
    let (convs, _) = generate_synthetic(&spec).map_err(|e| e.to_string())?;
    let tagged: Vec<Conversation> = convs
        .iter()
        .map(|c| {
            let utts = c
                .utterances
                .iter()
                .map(|u| {
                    let toks = u
                        .tokens
                        .iter()
                        .map(|t| Token::tagged(t.surface(), Some("NN".into()), Some("O".into())).unwrap())
                        .collect();
                    Utterance::new(&u.speaker, toks, u.act.clone()).unwrap()
                })
                .collect();
            Conversation::new(&c.id, utts).unwrap()
        })
        .collect();
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let path = dir.path().join("swda.jsonl");
    write_jsonl(&path, &tagged).map_err(|e| e.to_string())?;
    let parsed = parse_jsonl(&path).map_err(|e| e.to_string())?;
    let (train, rest) = parsed.split_at(30);
    let (valid, test) = rest.split_at(5);
    let cfg = TrainConfig {
        max_epochs: 2,
        ..small_config()
    };
    let outcome = train_loop(train, valid, &cfg, None, |_| {}).map_err(|e| e.to_string())?;
    let model = outcome.model;
    let idx: Vec<IndexedConversation> = test
        .iter()
        .map(|c| model.vocab.index(c, true))
        .collect::<Result<_, _>>()
        .map_err(|e| e.to_string())?;
    let decoder = DecoderRegistry::default().get("viterbi").unwrap();
    let preds = predict_all(&model, &model.params, &idx, decoder.as_ref()).map_err(|e| e.to_string())?;
    let golds: Vec<Vec<usize>> = idx.iter().map(|c| c.labels().unwrap().to_vec()).collect();
    let report: EvalReport =
        confusion(&preds, &golds, model.vocab.acts.symbols(), None).map_err(|e| e.to_string())?;
    let json = serde_json::to_string(&report).map_err(|e| e.to_string())?;
    let back: EvalReport = serde_json::from_str(&json).map_err(|e| e.to_string())?;
    let total: usize = back.confusion.iter().flatten().sum();
    if total != back.total_utterances || !(0.0..=1.0).contains(&back.accuracy) {
        return Err("inconsistent report".into());
    }
    Ok(format!(
        "{} acts, report over {} utterances (accuracy {:.3}, not gated)",
        model.vocab.num_acts(),
        back.total_utterances,
        back.accuracy
    ))
}

fn invariant_battery() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(6006);

    // marginal normalisation, node/edge consistency, unary-shift invariance
    for trial in 0..100 {
        let (n, l) = (rng.gen_range(1..=8), rng.gen_range(1..=5));
        let chain = random_chain(&mut rng, n, l, trial % 2 == 0);
        let pot = chain.table();
        let m = forward_backward(&pot);
        for t in 0..n {
            let row: f64 = m.node.row(t).iter().sum();
            if !((row - 1.0).abs() <= 1e-9) {
                return Err(format!("node row {t} sums to {row}"));
            }
        }
        for t in 0..m.num_edges() {
            let e = m.edge_slice(t);
            if !((e.iter().sum::<f64>() - 1.0).abs() <= 1e-9) {
                return Err(format!("edge slice {t} does not sum to 1"));
            }
            for j in 0..l {
                let out: f64 = (0..l).map(|k| m.edge_at(t, j, k)).sum();
                let inn: f64 = (0..l).map(|k| m.edge_at(t, k, j)).sum();
                if !((out - m.node.get(t, j)).abs() <= 1e-9 && (inn - m.node.get(t + 1, j)).abs() <= 1e-9) {
                    return Err(format!("edge/node inconsistency at t={t}"));
                }
            }
        }
        let c = rng.gen_range(-5.0..5.0);
        let shifted = Chain {
            unary: chain.unary.iter().map(|r| r.iter().map(|v| v + c).collect()).collect(),
            trans: chain.trans.clone(),
            start: chain.start.clone(),
            stop: chain.stop.clone(),
        };
        let ms = forward_backward(&shifted.table());
        if viterbi_decode(&shifted.table()).0 != viterbi_decode(&pot).0 {
            return Err("Viterbi path changed under a unary shift".into());
        }
        if !((ms.log_z - m.log_z - n as f64 * c).abs() <= 1e-9) {
            return Err("log Z did not shift by n·c".into());
        }
    }

    // attention rows and hop residual on a real model
    let (convs, _) = synthetic(12, 6007);
    let cfg = TrainConfig {
        max_epochs: 3,
        dropout: 0.2,
        ..small_config()
    };
    let (model, train, _) = prepare(&convs, &convs, &cfg).map_err(|e| e.to_string())?;
    for conv in &train {
        let mut tape = Tape::new();
        let enc = encode(&mut tape, &model.params, &model.encoder, conv, 0.0).map_err(|e| e.to_string())?;
        let v = enc.values(&tape);
        for row in &v.attention {
            if !((row.iter().sum::<f64>() - 1.0).abs() <= 1e-9) {
                return Err("attention row does not sum to 1".into());
            }
        }
        for j in 0..v.finals.len() {
            for k in 0..v.finals[j].len() {
                if v.finals[j][k] != v.memory_out[j][k] + v.original[j][k] {
                    return Err("hop residual identity violated".into());
                }
            }
        }
    }

    // padding rows after 100 optimiser steps
    let mut trainer = Trainer::new(model, cfg.clone());
    for step in 0..100 {
        let batch = [&train[step % train.len()]];
        trainer.step(&batch).map_err(|e| e.to_string())?;
    }
    for name in ["emb.word", "emb.char", "emb.pos", "emb.ner"] {
        let p = trainer.model.params.by_name(name).unwrap();
        if p.value.row(PAD).iter().any(|&v| v != 0.0) {
            return Err(format!("{name} padding row moved"));
        }
    }

    // fixed-seed 3-epoch runs are bit-identical
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let run = |file: &str| {
        let path = dir.path().join(file);
        let out = train_loop(&convs[..8], &convs[8..], &cfg, Some(&path), |_| {}).unwrap();
        let hist: Vec<(u64, u64)> = out
            .history
            .iter()
            .map(|r| (r.train_loss.to_bits(), r.val_accuracy.to_bits()))
            .collect();
        (hist, std::fs::read(&path).unwrap())
    };
    let (h1, c1) = run("a.ckpt");
    let (h2, c2) = run("b.ckpt");
    if h1.len() != 3 || h1 != h2 || c1 != c2 {
        return Err("3-epoch runs with one seed differ".into());
    }
    Ok("normalisation, consistency, shift invariance, attention rows, residual, padding rows, reproducibility".into())
}

fn main() {
    let criteria: [Criterion; 6] = [
        ("1 exact-inference oracle", exact_inference, Duration::from_secs(30)),
        ("2 selection-attention oracle", selection_oracle, Duration::from_secs(10)),
        ("3 gradient suite", gradient_suite, Duration::from_secs(120)),
        ("4 synthetic end-to-end", synthetic_end_to_end, Duration::from_secs(600)),
        ("5 SwDA-format pipeline", swda_format_pipeline, Duration::from_secs(600)),
        ("6 invariant battery", invariant_battery, Duration::from_secs(600)),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (name, run, limit) in criteria {
        if !filter.is_empty() && !filter.iter().any(|f| name.contains(f.as_str())) {
            continue;
        }
        let start = Instant::now();
        let result = catch_unwind(AssertUnwindSafe(run)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        let elapsed = start.elapsed();
        let result = match result {
            Ok(detail) if elapsed > limit => Err(format!("{detail}; took {elapsed:.1?}, limit {limit:?}")),
            other => other,
        };
        match result {
            Ok(detail) => println!("PASS criterion {name}: {detail} [{elapsed:.1?}]"),
            Err(detail) => {
                failed += 1;
                println!("FAIL criterion {name}: {detail} [{elapsed:.1?}]");
            }
        }
    }
    if failed > 0 {
        std::process::exit(1);
    }
}
