//! Randomised equivalence checks of the dynamic programs against brute-force
//! enumeration.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::autodiff::{grad_check, GradCheckOptions, GradCheckReport, ParamRegistry, Tape, Tensor};
use crate::corpus::{Conversation, IndexedConversation, Utterance, PAD};
use crate::crf::selection::{selection_attention, SelectionParams};
use crate::crf::{exhaustive, forward_backward, viterbi_decode, PotentialTable};
use crate::encoder::EncoderParams;
use crate::error::{Error, Result};
use crate::train::{compute_loss, prepare, TrainConfig};

#[derive(Debug, Clone, Serialize)]
pub struct OracleReport {
    pub suite: &'static str,
    pub trials: usize,
    pub passed: usize,
    /// Largest absolute deviation seen in any compared quantity.
    pub max_error: f64,
    /// First few failure descriptions.
    pub failures: Vec<String>,
}

impl OracleReport {
    fn new(suite: &'static str) -> Self {
        OracleReport {
            suite,
            trials: 0,
            passed: 0,
            max_error: 0.0,
            failures: Vec::new(),
        }
    }

    pub fn ok(&self) -> bool {
        self.passed == self.trials
    }

    fn record(&mut self, trial: usize, errors: &[(&str, f64)], exact_failure: Option<String>, tol: f64) {
        self.trials += 1;
        let mut bad: Vec<String> = errors
            .iter()
            .filter(|(_, e)| !(*e <= tol))
            .map(|(what, e)| format!("trial {trial}: {what} off by {e:e}"))
            .collect();
        bad.extend(exact_failure);
        for (_, e) in errors {
            self.max_error = self.max_error.max(*e);
        }
        if bad.is_empty() {
            self.passed += 1;
        } else if self.failures.len() < 10 {
            self.failures.extend(bad);
        }
    }
}

impl std::fmt::Display for OracleReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{}: {}/{} passed, max error {:.3e}",
            self.suite, self.passed, self.trials, self.max_error
        )?;
        for line in &self.failures {
            write!(f, "\n  {line}")?;
        }
        Ok(())
    }
}

/// Random potentials in [−2, 2]; start/stop vectors on odd trials.
pub fn random_potentials<R: Rng>(rng: &mut R, n: usize, labels: usize, boundaries: bool) -> Result<PotentialTable> {
    let mut draw = |len: usize| -> Vec<f64> { (0..len).map(|_| rng.gen_range(-2.0..2.0)).collect() };
    let unary = Tensor::matrix(n, labels, draw(n * labels))?;
    let trans = Tensor::matrix(labels, labels, draw(labels * labels))?;
    let (start, stop) = if boundaries {
        (Some(draw(labels)), Some(draw(labels)))
    } else {
        (None, None)
    };
    PotentialTable::with_boundaries(unary, trans, start, stop)
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// log Z, node and edge marginals, and Viterbi path and score against
/// enumeration on `trials` random chains with `n ≤ max_n`, `L ≤ max_labels`.
pub fn chain_oracle(trials: usize, max_n: usize, max_labels: usize, seed: u64, tol: f64) -> Result<OracleReport> {
    if max_n == 0 || max_labels == 0 {
        return Err(Error::Validation("max_n and max_labels must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = OracleReport::new("chain");
    for trial in 0..trials {
        let n = rng.gen_range(1..=max_n);
        let l = rng.gen_range(1..=max_labels);
        let pot = random_potentials(&mut rng, n, l, trial % 2 == 1)?;
        let fb = forward_backward(&pot);
        let (node, edge, log_z) = exhaustive::marginals(&pot);
        let (path, score) = viterbi_decode(&pot);
        let (best, best_score) = exhaustive::best_sequence(&pot);
        let exact = (path != best || score.to_bits() != best_score.to_bits()).then(|| {
            format!("trial {trial}: viterbi {path:?} ({score}) vs enumeration {best:?} ({best_score})")
        });
        report.record(
            trial,
            &[
                ("log Z", (fb.log_z - log_z).abs()),
                ("node marginals", max_abs_diff(fb.node.data(), &node)),
                ("edge marginals", max_abs_diff(fb.edge.data(), &edge)),
            ],
            exact,
            tol,
        );
    }
    Ok(report)
}

/// Selection probabilities γ from the composed selection chain against
/// enumeration over all 2ⁿ selections, with random parameters and inputs.
pub fn selection_oracle(trials: usize, max_n: usize, seed: u64, tol: f64) -> Result<OracleReport> {
    if max_n == 0 {
        return Err(Error::Validation("max_n must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = OracleReport::new("selection");
    let dim = 3;
    for trial in 0..trials {
        let n = rng.gen_range(1..=max_n);
        let mut reg = ParamRegistry::new();
        let params = SelectionParams::init(&mut reg, dim, 4, 1.0, &mut rng)?;
        let pw: Vec<f64> = (0..4).map(|_| rng.gen_range(-1.5..1.5)).collect();
        reg.get_mut(params.pairwise).value.data_mut().copy_from_slice(&pw);
        let finals: Vec<f64> = (0..n * dim).map(|_| rng.gen_range(-2.0..2.0)).collect();

        let mut tape = Tape::new();
        let u = tape.constant(Tensor::matrix(n, dim, finals.clone())?);
        let sel = selection_attention(&mut tape, &reg, &params, u)?.values(&tape);
        let pot = PotentialTable::new(sel.unary.clone(), sel.pairwise.clone())?;
        let (node, _, _) = exhaustive::marginals(&pot);
        let gamma: Vec<f64> = (0..n).map(|i| node[i * 2 + 1]).collect();
        let context: Vec<f64> = (0..dim)
            .map(|k| (0..n).map(|i| sel.gamma[i] * finals[i * dim + k]).sum())
            .collect();
        report.record(
            trial,
            &[
                ("gamma", max_abs_diff(&sel.gamma, &gamma)),
                ("context", max_abs_diff(&sel.context, &context)),
            ],
            None,
            tol,
        );
    }
    Ok(report)
}

fn toy_batch() -> Result<Vec<Conversation>> {
    let conv = |id: &str, lines: [(&str, &str, &str); 2]| -> Result<Conversation> {
        let utts = lines
            .iter()
            .map(|(s, text, act)| Utterance::from_text(s, text, Some(act)))
            .collect::<Result<Vec<_>>>()?;
        Conversation::new(id, utts)
    };
    Ok(vec![
        conv("toy-1", [("A", "hi long time", "greet"), ("B", "how are you", "question")])?,
        conv("toy-2", [("A", "fine thanks bye", "answer"), ("B", "bye now", "greet")])?,
    ])
}

/// Gap between the best and second-best window of every char-CNN filter,
/// relative to how far a step of `eps` in any one parameter can move it.
/// Below 1 a central difference may straddle an argmax switch.
fn max_pool_margin(reg: &ParamRegistry, enc: &EncoderParams, convs: &[IndexedConversation], eps: f64) -> Result<f64> {
    let p = &enc.embed;
    let max_abs = |t: &Tensor| t.data().iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let mut margin = f64::INFINITY;
    for word in convs.iter().flat_map(|c| c.utterances.iter().flat_map(|u| u.chars.iter())) {
        let mut ids = word.clone();
        ids.resize(ids.len().max(p.max_width()), PAD);
        for f in &p.filters {
            let reach = 2.0 * eps * f.width as f64 * max_abs(reg.value(p.char)).max(max_abs(reg.value(f.weight)));
            let mut tape = Tape::new();
            let table = tape.gather_param(reg, p.char, &ids)?;
            let (w, b) = (tape.param(reg, f.weight), tape.param(reg, f.bias));
            let conv = tape.conv1d(table, w, b, f.width)?;
            let out = tape.value(conv);
            if out.rows() < 2 {
                continue;
            }
            for col in 0..out.cols() {
                let mut vals: Vec<f64> = (0..out.rows()).map(|r| out.get(r, col)).collect();
                vals.sort_by(|a, b| b.total_cmp(a));
                margin = margin.min((vals[0] - vals[1]) / reach);
            }
        }
    }
    Ok(margin)
}

/// Finite-difference check of the full training loss (dropout off) on a
/// two-conversation toy batch. Parameters are moved off their initial values
/// with draws from `seed` until every max-pooling argmax is stable under a
/// step of `opts.eps`.
pub fn toy_gradient_check(seed: u64, opts: &GradCheckOptions) -> Result<GradCheckReport> {
    let convs = toy_batch()?;
    let cfg = TrainConfig {
        d: 8,
        d_u: 4,
        word_dim: 6,
        char_dim: 3,
        d_p: 3,
        d_n: 3,
        dropout: 0.0,
        l2: 1e-3,
        seed,
        ..TrainConfig::default()
    };
    let (base, train, _) = prepare(&convs, &convs, &cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..50 {
        let mut model = base.clone();
        for p in model.params.iter_mut() {
            let skip = p.pad_len();
            for v in &mut p.value.data_mut()[skip..] {
                *v += rng.gen_range(-0.3..0.3);
            }
        }
        if max_pool_margin(&model.params, &model.encoder, &train, opts.eps)? <= 1.0 {
            continue;
        }
        let batch: Vec<&IndexedConversation> = train.iter().collect();
        let mut reg = model.params.clone();
        return grad_check(|reg, tape| compute_loss(&model, reg, tape, &batch, cfg.l2, 0.0), &mut reg, opts);
    }
    Err(Error::Validation("no evaluation point clear of max-pooling ties".into()))
}
