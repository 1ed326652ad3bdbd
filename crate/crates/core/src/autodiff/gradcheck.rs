//! Central finite-difference verification of tape gradients.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::params::ParamRegistry;
use super::tape::{OpKind, Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct GradCheckOptions {
    pub eps: f64,
    pub tol: f64,
    /// Elements sampled per parameter tensor.
    pub max_per_tensor: usize,
    pub seed: u64,
    /// Relative errors are taken against `max(|analytic|, |numeric|, floor)`.
    pub floor: f64,
    #[doc(hidden)]
    pub fault: Option<OpKind>,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            eps: 1e-4,
            tol: 1e-4,
            max_per_tensor: 50,
            seed: 0,
            floor: 1e-2,
            fault: None,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct TensorCheck {
    pub name: String,
    pub checked: usize,
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct GradCheckReport {
    pub tensors: Vec<TensorCheck>,
    pub max_rel_error: f64,
    pub tol: f64,
    /// Recorded operation kinds whose backward rule failed a local probe.
    pub failing_ops: Vec<String>,
    pub passed: bool,
}

impl GradCheckReport {
    pub fn failing_tensors(&self) -> Vec<&TensorCheck> {
        self.tensors.iter().filter(|t| t.max_rel_error > self.tol).collect()
    }
}

impl std::fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        for t in &self.tensors {
            let flag = if t.max_rel_error <= self.tol { "ok  " } else { "FAIL" };
            writeln!(
                f,
                "{flag} {:<24} checked {:>3}  max rel err {:.3e}",
                t.name, t.checked, t.max_rel_error
            )?;
        }
        if !self.failing_ops.is_empty() {
            writeln!(f, "failing backward rules: {}", self.failing_ops.join(", "))?;
        }
        write!(
            f,
            "{}: max relative error {:.3e} (tol {:.1e})",
            if self.passed { "PASS" } else { "FAIL" },
            self.max_rel_error,
            self.tol
        )
    }
}

fn rel_error(a: f64, n: f64, floor: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(floor)
}

fn eval<F>(f: &F, params: &ParamRegistry) -> Result<f64>
where
    F: Fn(&ParamRegistry, &mut Tape) -> Result<Var>,
{
    let mut tape = Tape::new();
    let loss = f(params, &mut tape)?;
    Ok(tape.value(loss).item())
}

fn pick_indices(grad: &[f64], skip: usize, max: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let candidates: Vec<usize> = (skip..grad.len()).collect();
    if candidates.len() <= max {
        return candidates;
    }
    let mut nonzero: Vec<usize> = candidates.iter().copied().filter(|&i| grad[i] != 0.0).collect();
    nonzero.shuffle(rng);
    let mut picked: Vec<usize> = nonzero.into_iter().take(max * 4 / 5).collect();
    while picked.len() < max {
        let i = candidates[rng.gen_range(0..candidates.len())];
        if !picked.contains(&i) {
            picked.push(i);
        }
    }
    picked.sort_unstable();
    picked
}

/// Compares tape gradients of the scalar built by `f` against central
/// differences for up to `max_per_tensor` elements of every parameter.
///
/// `f` must be deterministic; it runs on inference-mode tapes so dropout is
/// off. Fails with [`Error::NonDeterministic`] if two evaluations disagree.
pub fn grad_check<F>(f: F, params: &mut ParamRegistry, opts: &GradCheckOptions) -> Result<GradCheckReport>
where
    F: Fn(&ParamRegistry, &mut Tape) -> Result<Var>,
{
    let mut tape = Tape::new();
    if let Some(kind) = opts.fault {
        tape.inject_fault(kind);
    }
    let loss = f(params, &mut tape)?;
    let first = tape.value(loss).item();
    let second = eval(&f, params)?;
    if first.to_bits() != second.to_bits() {
        return Err(Error::NonDeterministic(format!("{first} vs {second}")));
    }
    params.zero_grads();
    tape.backward(loss, params)?;
    let kinds = tape.op_kinds();

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut tensors = Vec::new();
    let ids: Vec<_> = params.ids().collect();
    for id in ids {
        let analytic = params.get(id).grad.clone();
        let skip = params.get(id).pad_len();
        let picked = pick_indices(&analytic, skip, opts.max_per_tensor, &mut rng);
        let mut check = TensorCheck {
            name: params.get(id).name.clone(),
            checked: picked.len(),
            max_rel_error: 0.0,
            worst_index: 0,
            analytic: 0.0,
            numeric: 0.0,
        };
        for i in picked {
            let orig = params.get(id).value.data()[i];
            params.get_mut(id).value.data_mut()[i] = orig + opts.eps;
            let plus = eval(&f, params);
            params.get_mut(id).value.data_mut()[i] = orig - opts.eps;
            let minus = eval(&f, params);
            params.get_mut(id).value.data_mut()[i] = orig;
            let numeric = (plus? - minus?) / (2.0 * opts.eps);
            let err = rel_error(analytic[i], numeric, opts.floor);
            if err >= check.max_rel_error {
                check.max_rel_error = err;
                check.worst_index = i;
                check.analytic = analytic[i];
                check.numeric = numeric;
            }
        }
        tensors.push(check);
    }
    let max_rel_error = tensors.iter().map(|t| t.max_rel_error).fold(0.0, f64::max);
    let failing_ops: Vec<String> = kinds
        .into_iter()
        .filter(|&k| probe_op(k, opts).is_some_and(|err| err > opts.tol))
        .map(|k| k.name().to_string())
        .collect();
    let passed = max_rel_error <= opts.tol && failing_ops.is_empty();
    Ok(GradCheckReport {
        tensors,
        max_rel_error,
        tol: opts.tol,
        failing_ops,
        passed,
    })
}

fn random(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Tensor {
    Tensor::raw(r, c, (0..r * c).map(|_| rng.gen_range(-1.0..1.0)).collect())
}

fn probe_inputs(kind: OpKind, rng: &mut ChaCha8Rng) -> Option<Vec<Tensor>> {
    let shapes: &[(usize, usize)] = match kind {
        OpKind::MatMul => &[(2, 3), (3, 2)],
        OpKind::Add | OpKind::Sub | OpKind::Mul => &[(2, 3), (2, 3)],
        OpKind::AddRow => &[(3, 2), (1, 2)],
        OpKind::AddCol => &[(3, 2), (3, 1)],
        OpKind::ConcatRows => &[(1, 3), (2, 3)],
        OpKind::ConcatCols => &[(2, 1), (2, 2)],
        OpKind::SliceRows | OpKind::LogSumExp => &[(3, 2)],
        OpKind::Gather => &[(4, 2)],
        OpKind::Conv1d => &[(5, 2), (6, 3), (1, 3)],
        OpKind::MaxOverTime => &[(4, 3)],
        OpKind::LogPartition | OpKind::ChainScore => &[(3, 2), (2, 2)],
        OpKind::Scale
        | OpKind::Transpose
        | OpKind::SliceCols
        | OpKind::Tanh
        | OpKind::Sigmoid
        | OpKind::Exp
        | OpKind::Dropout
        | OpKind::Softmax
        | OpKind::SumAll => &[(2, 3)],
        OpKind::Leaf | OpKind::Param | OpKind::L2Penalty => return None,
    };
    Some(shapes.iter().map(|&(r, c)| random(rng, r, c)).collect())
}

fn apply_probe(kind: OpKind, tape: &mut Tape, x: &[Var]) -> Result<Var> {
    match kind {
        OpKind::MatMul => tape.matmul(x[0], x[1]),
        OpKind::Add => tape.add(x[0], x[1]),
        OpKind::Sub => tape.sub(x[0], x[1]),
        OpKind::Mul => tape.mul(x[0], x[1]),
        OpKind::Scale => Ok(tape.scale(x[0], 1.7)),
        OpKind::AddRow => tape.add_row(x[0], x[1]),
        OpKind::AddCol => tape.add_col(x[0], x[1]),
        OpKind::Transpose => Ok(tape.transpose(x[0])),
        OpKind::ConcatRows => tape.concat_rows(x),
        OpKind::ConcatCols => tape.concat_cols(x),
        OpKind::SliceRows => tape.slice_rows(x[0], 1, 2),
        OpKind::SliceCols => tape.slice_cols(x[0], 1, 1),
        OpKind::Gather => tape.gather(x[0], &[2, 0, 2]),
        OpKind::Tanh => Ok(tape.tanh(x[0])),
        OpKind::Sigmoid => Ok(tape.sigmoid(x[0])),
        OpKind::Exp => Ok(tape.exp(x[0])),
        OpKind::Conv1d => tape.conv1d(x[0], x[1], x[2], 3),
        OpKind::MaxOverTime => Ok(tape.max_over_time(x[0])),
        OpKind::Dropout => tape.dropout(x[0], 0.5),
        OpKind::Softmax => tape.softmax(x[0], 1),
        OpKind::LogSumExp => tape.log_sum_exp(x[0], 1),
        OpKind::SumAll => Ok(tape.sum(x[0])),
        OpKind::LogPartition => tape.log_partition(x[0], x[1], None, None),
        OpKind::ChainScore => tape.chain_score(x[0], x[1], None, None, &[1, 0, 1]),
        OpKind::Leaf | OpKind::Param | OpKind::L2Penalty => unreachable!("no probe for {kind}"),
    }
}

/// Largest relative error of one op's backward rule on a small random
/// instance, projecting the output onto a fixed random direction.
fn probe_op(kind: OpKind, opts: &GradCheckOptions) -> Option<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 0x9e37_79b9);
    let inputs = probe_inputs(kind, &mut rng)?;
    let build = |inputs: &[Tensor]| -> Result<(Tape, Vec<Var>, Var)> {
        let mut tape = Tape::training(opts.seed);
        if let Some(f) = opts.fault {
            tape.inject_fault(f);
        }
        let vars: Vec<Var> = inputs.iter().map(|t| tape.input(t.clone())).collect();
        let out = apply_probe(kind, &mut tape, &vars)?;
        Ok((tape, vars, out))
    };
    let (mut tape, vars, out) = build(&inputs).ok()?;
    let direction: Vec<f64> = (0..tape.value(out).len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let project = |t: &Tensor| t.data().iter().zip(&direction).map(|(a, b)| a * b).sum::<f64>();
    let mut scratch = ParamRegistry::new();
    tape.backward_seeded(out, direction.clone(), &mut scratch).ok()?;

    let mut worst: f64 = 0.0;
    for (k, input) in inputs.iter().enumerate() {
        let analytic = tape.grad(vars[k]).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; input.len()]);
        for i in 0..input.len() {
            let mut shifted = inputs.clone();
            shifted[k].data_mut()[i] += opts.eps;
            let (tp, _, op) = build(&shifted).ok()?;
            let plus = project(tp.value(op));
            shifted[k].data_mut()[i] -= 2.0 * opts.eps;
            let (tm, _, om) = build(&shifted).ok()?;
            let minus = project(tm.value(om));
            let numeric = (plus - minus) / (2.0 * opts.eps);
            worst = worst.max(rel_error(analytic[i], numeric, opts.floor));
        }
    }
    Some(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn linear_model(reg: &mut ParamRegistry) {
        reg.add("w", Tensor::scalar(0.7)).unwrap();
    }

    #[test]
    fn linear_model_is_exact() {
        let mut reg = ParamRegistry::new();
        linear_model(&mut reg);
        let w = reg.id("w").unwrap();
        let report = grad_check(
            |reg, tape| {
                let wv = tape.param(reg, w);
                let x = tape.constant(Tensor::scalar(2.0));
                tape.matmul(wv, x)
            },
            &mut reg,
            &GradCheckOptions::default(),
        )
        .unwrap();
        assert!(report.passed, "{report}");
        assert!((report.tensors[0].analytic - 2.0).abs() < 1e-15);
        assert!((report.tensors[0].numeric - 2.0).abs() < 1e-8);
    }

    #[test]
    fn sigmoid_chain_passes() {
        let mut reg = ParamRegistry::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = reg.add_uniform("a", &[3, 3], 1.0, &mut rng).unwrap();
        let b = reg.add_uniform("b", &[3, 1], 1.0, &mut rng).unwrap();
        let report = grad_check(
            |reg, tape| {
                let x = tape.constant(Tensor::from_rows(&[vec![0.5, -1.0, 2.0]]));
                let av = tape.param(reg, a);
                let bv = tape.param(reg, b);
                let h = tape.matmul(x, av)?;
                let h = tape.sigmoid(h);
                let h = tape.matmul(h, bv)?;
                let h = tape.sigmoid(h);
                Ok(tape.sum(h))
            },
            &mut reg,
            &GradCheckOptions::default(),
        )
        .unwrap();
        assert!(report.passed, "{report}");
    }

    #[test]
    fn corrupted_tanh_rule_is_named() {
        let mut reg = ParamRegistry::new();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = reg.add_uniform("a", &[2, 2], 1.0, &mut rng).unwrap();
        let opts = GradCheckOptions {
            fault: Some(OpKind::Tanh),
            ..GradCheckOptions::default()
        };
        let report = grad_check(
            |reg, tape| {
                let av = tape.param(reg, a);
                let h = tape.tanh(av);
                let h = tape.mul(h, av)?;
                Ok(tape.sum(h))
            },
            &mut reg,
            &opts,
        )
        .unwrap();
        assert!(!report.passed);
        assert_eq!(report.failing_ops, vec!["tanh".to_string()]);
        assert!(report.to_string().contains("tanh"));
    }

    #[test]
    fn every_probe_passes_without_faults() {
        let opts = GradCheckOptions::default();
        for kind in [
            OpKind::MatMul,
            OpKind::Add,
            OpKind::Sub,
            OpKind::Mul,
            OpKind::Scale,
            OpKind::AddRow,
            OpKind::AddCol,
            OpKind::Transpose,
            OpKind::ConcatRows,
            OpKind::ConcatCols,
            OpKind::SliceRows,
            OpKind::SliceCols,
            OpKind::Gather,
            OpKind::Tanh,
            OpKind::Sigmoid,
            OpKind::Exp,
            OpKind::Conv1d,
            OpKind::MaxOverTime,
            OpKind::Dropout,
            OpKind::Softmax,
            OpKind::LogSumExp,
            OpKind::SumAll,
            OpKind::LogPartition,
            OpKind::ChainScore,
        ] {
            let err = probe_op(kind, &opts).expect("probe exists");
            assert!(err < 1e-6, "{kind}: {err}");
        }
    }

    #[test]
    fn nondeterministic_closure_rejected() {
        use std::cell::Cell;
        let mut reg = ParamRegistry::new();
        let w = reg.add("w", Tensor::scalar(1.0)).unwrap();
        let calls = Cell::new(0.0);
        let err = grad_check(
            |reg, tape| {
                calls.set(calls.get() + 1.0);
                let wv = tape.param(reg, w);
                let c = tape.constant(Tensor::scalar(calls.get()));
                tape.mul(wv, c)
            },
            &mut reg,
            &GradCheckOptions::default(),
        );
        assert!(matches!(err, Err(Error::NonDeterministic(_))));
    }
}
