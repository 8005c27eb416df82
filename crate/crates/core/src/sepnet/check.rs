//! Finite-difference verification of the full separator under the
//! training loss.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::config::StageConfig;
use super::graph::{tastas_forward, tastas_forward_on};
use super::model::TasTasModel;
use crate::error::{Error, Result};
use crate::numerics::gradcheck::{relative_error, FD_STEP};
use crate::numerics::{KindReport, Tape, Tensor};
use crate::objectives::{multi_stage_loss, multi_stage_loss_with_grad};

fn loss(model: &TasTasModel, mixture: &[f64], targets: &[Vec<f64>]) -> Result<f64> {
    Ok(multi_stage_loss(&tastas_forward(model, mixture)?, targets)?.total)
}

/// Worst relative error between the tape gradient of the multi-stage PIT
/// loss and central differences, over every parameter and every mixture
/// sample.
pub fn model_grad_error(model: &TasTasModel, mixture: &[f64], targets: &[Vec<f64>]) -> Result<f64> {
    let mut tape = Tape::new();
    let bound = tape.bind(model.params(), true);
    let x = tape.input(Tensor::new(vec![mixture.len()], mixture.to_vec())?);
    let outputs = tastas_forward_on(&mut tape, &bound, model, x)?;
    let values: Vec<Vec<Vec<f64>>> = outputs
        .iter()
        .map(|s| s.iter().map(|v| tape.value(*v).data().to_vec()).collect())
        .collect();
    let (_, dests) = multi_stage_loss_with_grad(&values, targets)?;
    let seeds: Vec<_> = outputs
        .iter()
        .flatten()
        .zip(dests.into_iter().flatten())
        .map(|(v, g)| (*v, Tensor::from_vec(g)))
        .collect();
    let grads = tape.backward(&seeds)?;

    let mut worst = 0.0f64;
    let mut probe = model.clone();
    for (name, t) in model.params().iter() {
        let analytic = grads
            .params()
            .get(name)
            .ok_or_else(|| Error::Config(format!("no gradient for `{name}`")))?;
        for j in 0..t.numel() {
            let mut eval = |delta: f64| -> Result<f64> {
                let mut p = model.params().clone();
                p.get_mut(name).expect("same layout").data_mut()[j] += delta;
                probe.set_params(p)?;
                loss(&probe, mixture, targets)
            };
            let numeric = (eval(FD_STEP)? - eval(-FD_STEP)?) / (2.0 * FD_STEP);
            worst = worst.max(relative_error(analytic.data()[j], numeric));
        }
    }
    let dx = grads.get(x).cloned().unwrap_or_else(|| Tensor::zeros(vec![mixture.len()]));
    let mut m = mixture.to_vec();
    for j in 0..m.len() {
        let x0 = m[j];
        m[j] = x0 + FD_STEP;
        let plus = loss(model, &m, targets)?;
        m[j] = x0 - FD_STEP;
        let minus = loss(model, &m, targets)?;
        m[j] = x0;
        worst = worst.max(relative_error(dx.data()[j], (plus - minus) / (2.0 * FD_STEP)));
    }
    Ok(worst)
}

/// One stage, one block, `N = K = H = 4`, about 40 encoder frames.
pub fn tiny_check_config() -> StageConfig {
    StageConfig::sized(4, 4, 4, 1)
}

/// The end-to-end check on random signals: two random targets, their sum
/// as the mixture and a freshly initialised tiny model.
pub fn tiny_model_grad_check(tolerance: f64, seed: u64) -> Result<KindReport> {
    let cfg = tiny_check_config();
    let len = cfg.kernel_len + 39 * cfg.stride;
    let model = TasTasModel::new(vec![cfg], false, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let targets: Vec<Vec<f64>> = (0..cfg.num_speakers)
        .map(|_| (0..len).map(|_| rng.gen_range(-0.5..0.5)).collect())
        .collect();
    let mixture: Vec<f64> = (0..len).map(|i| targets.iter().map(|t| t[i]).sum()).collect();
    let err = model_grad_error(&model, &mixture, &targets)?;
    Ok(KindReport {
        name: "tastas_end_to_end".into(),
        trials: 1,
        max_rel_error: err,
        worst_trial: 0,
        worst_shapes: format!("mixture ({len}), {} params", model.params().numel()),
        tolerance,
    })
}
