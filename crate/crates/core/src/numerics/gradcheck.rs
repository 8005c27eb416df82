//! Central finite-difference verification of analytic gradients.

use std::fmt;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::ops::OpKind;
use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::Result;

/// Central-difference step.
pub const FD_STEP: f64 = 1e-5;

/// Denominator floor of the per-element relative error.
pub const REL_ERROR_FLOOR: f64 = 1e-6;

/// `|a - n| / max(|a|, |n|, floor)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERROR_FLOOR)
}

/// Worst per-element relative error between the tape gradient of
/// `⟨proj, f(inputs)⟩` and its central finite difference, where `proj` is a
/// random projection drawn from `rng`. Every input is differentiated.
pub fn max_relative_error<R, F>(inputs: &[Tensor], rng: &mut R, f: F) -> Result<f64>
where
    R: Rng + ?Sized,
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let eval = |values: &[Tensor]| -> Result<(Tape, Vec<Var>, Var)> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|v| tape.input(v.clone())).collect();
        let out = f(&mut tape, &vars)?;
        Ok((tape, vars, out))
    };
    let (tape, vars, out) = eval(inputs)?;
    let shape = tape.value(out).shape().to_vec();
    let proj = Tensor::uniform(shape, 1.0, rng);
    let grads = tape.backward(&[(out, proj.clone())])?;
    let objective = |values: &[Tensor]| -> Result<f64> {
        let (tape, _, out) = eval(values)?;
        Ok(tape.value(out).data().iter().zip(proj.data()).map(|(y, p)| y * p).sum())
    };

    let mut worst = 0.0f64;
    let mut probe = inputs.to_vec();
    for (i, var) in vars.iter().enumerate() {
        let analytic = grads.get(*var).cloned().unwrap_or_else(|| Tensor::zeros(inputs[i].shape().to_vec()));
        for j in 0..inputs[i].numel() {
            let x0 = inputs[i].data()[j];
            probe[i].data_mut()[j] = x0 + FD_STEP;
            let plus = objective(&probe)?;
            probe[i].data_mut()[j] = x0 - FD_STEP;
            let minus = objective(&probe)?;
            probe[i].data_mut()[j] = x0;
            let numeric = (plus - minus) / (2.0 * FD_STEP);
            worst = worst.max(relative_error(analytic.data()[j], numeric));
        }
    }
    Ok(worst)
}

/// The instance families covered by the primitive suite.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GradCase {
    Conv1d,
    Conv2d,
    MaxPool2d,
    GlobalAvgPool,
    Linear,
    LstmCell,
    BiLstm,
    LayerNorm,
    Softmax,
    SoftmaxLogLoss,
    Prelu,
    Relu,
    Sigmoid,
    Tanh,
    Log,
    Log1p,
    ComplexAbs,
    Stft,
    Concat,
    Add,
    Mul,
    Scale,
    Sum,
    Reshape,
    Transpose,
    Narrow,
    Segment,
    Merge,
    OverlapAdd,
    FitLength,
}

impl GradCase {
    pub const ALL: [GradCase; 30] = [
        GradCase::Conv1d,
        GradCase::Conv2d,
        GradCase::MaxPool2d,
        GradCase::GlobalAvgPool,
        GradCase::Linear,
        GradCase::LstmCell,
        GradCase::BiLstm,
        GradCase::LayerNorm,
        GradCase::Softmax,
        GradCase::SoftmaxLogLoss,
        GradCase::Prelu,
        GradCase::Relu,
        GradCase::Sigmoid,
        GradCase::Tanh,
        GradCase::Log,
        GradCase::Log1p,
        GradCase::ComplexAbs,
        GradCase::Stft,
        GradCase::Concat,
        GradCase::Add,
        GradCase::Mul,
        GradCase::Scale,
        GradCase::Sum,
        GradCase::Reshape,
        GradCase::Transpose,
        GradCase::Narrow,
        GradCase::Segment,
        GradCase::Merge,
        GradCase::OverlapAdd,
        GradCase::FitLength,
    ];

    pub fn name(self) -> &'static str {
        match self {
            GradCase::SoftmaxLogLoss => "softmax+log_loss",
            other => other.op().name(),
        }
    }

    /// The primitive exercised (the outer one for composites).
    fn op(self) -> OpKind {
        match self {
            GradCase::Conv1d => OpKind::Conv1d { stride: 2 },
            GradCase::Conv2d => OpKind::Conv2d { padding: 1 },
            GradCase::MaxPool2d => OpKind::MaxPool2d { size: 2 },
            GradCase::GlobalAvgPool => OpKind::GlobalAvgPool,
            GradCase::Linear => OpKind::Linear,
            GradCase::LstmCell => OpKind::LstmCell,
            GradCase::BiLstm => OpKind::BiLstm,
            GradCase::LayerNorm => OpKind::LayerNorm,
            GradCase::Softmax | GradCase::SoftmaxLogLoss => OpKind::Softmax { axis: 0 },
            GradCase::Prelu => OpKind::Prelu,
            GradCase::Relu => OpKind::Relu,
            GradCase::Sigmoid => OpKind::Sigmoid,
            GradCase::Tanh => OpKind::Tanh,
            GradCase::Log => OpKind::Log,
            GradCase::Log1p => OpKind::Log1p,
            GradCase::ComplexAbs => OpKind::ComplexAbs,
            GradCase::Stft => OpKind::Stft { window_len: 8, hop: 2 },
            GradCase::Concat => OpKind::Concat { axis: 1 },
            GradCase::Add => OpKind::Add,
            GradCase::Mul => OpKind::Mul,
            GradCase::Scale => OpKind::Scale { factor: -1.7 },
            GradCase::Sum => OpKind::Sum,
            GradCase::Reshape => OpKind::Reshape { shape: vec![4, 3] },
            GradCase::Transpose => OpKind::Transpose { perm: vec![2, 0, 1] },
            GradCase::Narrow => OpKind::Narrow { axis: 1, start: 1, len: 2 },
            GradCase::Segment => OpKind::Segment { chunk_len: 4, hop: 2 },
            GradCase::Merge => OpKind::Merge { frames: 7, hop: 2 },
            GradCase::OverlapAdd => OpKind::OverlapAdd { stride: 2 },
            GradCase::FitLength => OpKind::FitLength { len: 7 },
        }
    }

    /// Draws one random instance. Inputs are uniform in [-1, 1] except where
    /// the primitive has a kink or restricted domain.
    fn instance<R: Rng + ?Sized>(self, rng: &mut R) -> Vec<Tensor> {
        let u = |shape: &[usize], rng: &mut R| Tensor::uniform(shape.to_vec(), 1.0, rng);
        match self {
            GradCase::Conv1d => vec![u(&[2, 7], rng), u(&[2, 2, 3], rng), u(&[2], rng)],
            GradCase::Conv2d => vec![u(&[1, 4, 4], rng), u(&[2, 1, 3, 3], rng), u(&[2], rng)],
            GradCase::MaxPool2d => vec![distinct(&[1, 4, 4], rng)],
            GradCase::GlobalAvgPool => vec![u(&[2, 3, 3], rng)],
            GradCase::Linear => vec![u(&[3, 4], rng), u(&[2, 4], rng), u(&[2], rng)],
            GradCase::LstmCell => vec![
                u(&[2, 3], rng),
                u(&[2, 2], rng),
                u(&[2, 2], rng),
                u(&[8, 3], rng),
                u(&[8, 2], rng),
                u(&[8], rng),
            ],
            GradCase::BiLstm => vec![
                u(&[2, 3, 2], rng),
                u(&[8, 2], rng),
                u(&[8, 2], rng),
                u(&[8], rng),
                u(&[8, 2], rng),
                u(&[8, 2], rng),
                u(&[8], rng),
            ],
            GradCase::LayerNorm => vec![u(&[2, 2, 4], rng), u(&[4], rng), u(&[4], rng)],
            GradCase::Softmax => vec![u(&[3, 4], rng)],
            GradCase::SoftmaxLogLoss => vec![u(&[6], rng)],
            GradCase::Prelu => vec![away_from_zero(&[12], rng), u(&[1], rng)],
            GradCase::Relu => vec![away_from_zero(&[12], rng)],
            GradCase::Sigmoid | GradCase::Tanh => vec![u(&[12], rng).map(|x| 3.0 * x)],
            GradCase::Log => vec![Tensor::uniform(vec![12], 0.75, rng).map(|x| x + 1.25)],
            GradCase::Log1p => vec![u(&[12], rng).map(|x| 0.75 * x + 0.25)],
            GradCase::ComplexAbs => vec![u(&[2, 2, 3], rng)],
            GradCase::Stft => vec![u(&[12], rng)],
            GradCase::Concat => vec![u(&[2, 3], rng), u(&[2, 2], rng)],
            GradCase::Add | GradCase::Mul => vec![u(&[3, 4], rng), u(&[3, 4], rng)],
            GradCase::Scale | GradCase::Sum | GradCase::Reshape => vec![u(&[2, 6], rng)],
            GradCase::Transpose => vec![u(&[2, 3, 2], rng)],
            GradCase::Narrow => vec![u(&[3, 4], rng)],
            GradCase::Segment => vec![u(&[7, 2], rng)],
            GradCase::Merge => vec![u(&[3, 4, 2], rng)],
            GradCase::OverlapAdd => vec![u(&[4, 4], rng)],
            GradCase::FitLength => {
                let len = if rng.gen_bool(0.5) { 5 } else { 10 };
                vec![u(&[len], rng)]
            }
        }
    }

    fn build(self, tape: &mut Tape, vars: &[Var], label: usize) -> Result<Var> {
        match self {
            GradCase::SoftmaxLogLoss => {
                let p = tape.apply(OpKind::Softmax { axis: 0 }, vars)?;
                let logp = tape.apply(OpKind::Log, &[p])?;
                let picked = tape.apply(OpKind::Narrow { axis: 0, start: label, len: 1 }, &[logp])?;
                tape.apply(OpKind::Scale { factor: -1.0 }, &[picked])
            }
            other => tape.apply(other.op(), vars),
        }
    }
}

fn away_from_zero<R: Rng + ?Sized>(shape: &[usize], rng: &mut R) -> Tensor {
    Tensor::uniform(shape.to_vec(), 1.0, rng).map(|x| if x.abs() < 0.05 { x.signum() * 0.05 + x } else { x })
}

/// Values on a 0.05 grid in random order so that no two pooling candidates
/// are within a finite-difference step of each other.
fn distinct<R: Rng + ?Sized>(shape: &[usize], rng: &mut R) -> Tensor {
    let n: usize = shape.iter().product();
    let mut data: Vec<f64> = (0..n).map(|i| -1.0 + 0.05 * i as f64).collect();
    data.shuffle(rng);
    Tensor::from_parts(shape.to_vec(), data)
}

/// Outcome of checking one instance family.
#[derive(Clone, Debug)]
pub struct KindReport {
    pub name: String,
    pub trials: usize,
    pub max_rel_error: f64,
    pub worst_trial: usize,
    pub worst_shapes: String,
    pub tolerance: f64,
}

impl KindReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error < self.tolerance
    }
}

impl fmt::Display for KindReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} {:<18} max_rel_err={:.3e} tol={:.0e} worst_trial={} inputs=[{}]",
            if self.passed() { "PASS" } else { "FAIL" },
            self.name,
            self.max_rel_error,
            self.tolerance,
            self.worst_trial,
            self.worst_shapes
        )
    }
}

/// Runs `trials` random instances of `case` and reports the worst.
pub fn grad_check(case: GradCase, trials: usize, tolerance: f64, seed: u64) -> Result<KindReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (case as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15));
    let mut report = KindReport {
        name: case.name().to_string(),
        trials,
        max_rel_error: 0.0,
        worst_trial: 0,
        worst_shapes: String::new(),
        tolerance,
    };
    for trial in 0..trials {
        let inputs = case.instance(&mut rng);
        let label = rng.gen_range(0..inputs[0].numel());
        let err = max_relative_error(&inputs, &mut rng, |tape, vars| case.build(tape, vars, label))?;
        if trial == 0 || err > report.max_rel_error {
            report.max_rel_error = err;
            report.worst_trial = trial;
            report.worst_shapes = inputs.iter().map(Tensor::dims).collect::<Vec<_>>().join(", ");
        }
    }
    Ok(report)
}

/// Every primitive case at the given settings.
pub fn grad_check_all(trials: usize, tolerance: f64, seed: u64) -> Result<Vec<KindReport>> {
    GradCase::ALL
        .iter()
        .map(|&case| grad_check(case, trials, tolerance, seed))
        .collect()
}
