use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::net::{argmax, forward_on, slice_segments, FrozenIdNet, IdNetConfig};
use crate::error::{Error, Result};
use crate::numerics::{adam_step, par, AdamState, ParamSet, Tape, Tensor};
use crate::signal::Waveform;

/// A training utterance and the name of its speaker.
#[derive(Clone, Debug)]
pub struct LabeledUtterance {
    pub speaker: String,
    pub wave: Waveform,
}

#[derive(Clone, Debug, PartialEq)]
pub struct IdTrainOptions {
    pub epochs_max: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Epochs without held-out improvement before stopping.
    pub patience: usize,
    /// Every n-th segment of each speaker is held out.
    pub heldout_every: usize,
    pub min_segments_per_speaker: usize,
    pub seed: u64,
}

impl Default for IdTrainOptions {
    fn default() -> Self {
        IdTrainOptions {
            epochs_max: 30,
            batch_size: 16,
            lr: 1e-3,
            patience: 4,
            heldout_every: 5,
            min_segments_per_speaker: 20,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct IdEpochReport {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_accuracy: f64,
    pub heldout_accuracy: f64,
}

/// Outcome of training: the frozen best-epoch network and its history.
#[derive(Clone, Debug)]
pub struct IdTraining {
    pub net: FrozenIdNet,
    pub history: Vec<IdEpochReport>,
    pub best_epoch: usize,
    pub heldout_accuracy: f64,
}

struct Example {
    segment: Vec<f64>,
    label: usize,
}

/// Cross-entropy of `logits` against `label` and its gradient.
fn cross_entropy(logits: &[f64], label: usize) -> (f64, Vec<f64>) {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    let loss = total.ln() + max - logits[label];
    let grad = exps
        .iter()
        .enumerate()
        .map(|(i, e)| e / total - if i == label { 1.0 } else { 0.0 })
        .collect();
    (loss, grad)
}

fn example_grad(cfg: &IdNetConfig, params: &ParamSet, ex: &Example) -> Result<(f64, bool, ParamSet)> {
    let mut tape = Tape::new();
    let bound = tape.bind(params, true);
    let x = tape.constant(Tensor::from_vec(ex.segment.clone()));
    let (logits, _) = forward_on(&mut tape, &bound, cfg, x)?;
    let z = tape.value(logits).data().to_vec();
    let (loss, g) = cross_entropy(&z, ex.label);
    let grads = tape.backward(&[(logits, Tensor::from_vec(g))])?;
    Ok((loss, argmax(&z) == ex.label, grads.into_params()))
}

fn accuracy(cfg: &IdNetConfig, params: &ParamSet, set: &[Example]) -> Result<f64> {
    let hits = par::map_indexed(set.len(), |i| -> Result<bool> {
        let mut tape = Tape::new();
        let bound = tape.bind(params, false);
        let x = tape.constant(Tensor::from_vec(set[i].segment.clone()));
        let (logits, _) = forward_on(&mut tape, &bound, cfg, x)?;
        Ok(argmax(tape.value(logits).data()) == set[i].label)
    });
    let hits = hits.into_iter().collect::<Result<Vec<_>>>()?;
    Ok(hits.iter().filter(|&&h| h).count() as f64 / set.len().max(1) as f64)
}

/// Trains a speaker classifier on segments of the labelled utterances and
/// returns the network from the epoch with the best held-out accuracy,
/// frozen. Class indices follow the sorted speaker names.
pub fn train_idnet(corpus: &[LabeledUtterance], config: &IdNetConfig, opts: &IdTrainOptions) -> Result<IdTraining> {
    let mut per_speaker: BTreeMap<&str, Vec<&Waveform>> = BTreeMap::new();
    for u in corpus {
        if u.wave.sample_rate != config.sample_rate {
            return Err(Error::InvalidInput(format!(
                "utterance of `{}` is at {} Hz, the ID-Net expects {} Hz",
                u.speaker, u.wave.sample_rate, config.sample_rate
            )));
        }
        per_speaker.entry(u.speaker.as_str()).or_default().push(&u.wave);
    }
    if per_speaker.len() < 2 {
        return Err(Error::InvalidInput(format!(
            "speaker identification needs at least 2 speakers, got {}",
            per_speaker.len()
        )));
    }
    let labels: Vec<String> = per_speaker.keys().map(|s| s.to_string()).collect();
    let cfg = IdNetConfig {
        num_speakers: labels.len(),
        ..config.clone()
    };
    cfg.validate()?;
    let seg = cfg.segment_len();
    let every = opts.heldout_every.max(2);

    let (mut train, mut heldout) = (Vec::new(), Vec::new());
    for (label, (name, waves)) in per_speaker.iter().enumerate() {
        let segments: Vec<Vec<f64>> = waves.iter().flat_map(|w| slice_segments(&w.samples, seg)).collect();
        if segments.len() < opts.min_segments_per_speaker.max(1) {
            return Err(Error::InvalidInput(format!(
                "speaker `{name}` has {} segments of {} s; at least {} are required",
                segments.len(),
                cfg.segment_s,
                opts.min_segments_per_speaker.max(1)
            )));
        }
        for (k, segment) in segments.into_iter().enumerate() {
            let ex = Example { segment, label };
            if k % every == every - 1 {
                heldout.push(ex);
            } else {
                train.push(ex);
            }
        }
    }

    let mut params = cfg.init_params(opts.seed)?;
    let mut adam = AdamState::new(&params);
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let batch = opts.batch_size.max(1);
    let mut history = Vec::new();
    let mut best = (f64::NEG_INFINITY, 0usize, params.clone());
    for epoch in 0..opts.epochs_max {
        order.shuffle(&mut rng);
        let (mut loss_sum, mut hits) = (0.0, 0usize);
        for idx in order.chunks(batch) {
            let results = par::map_indexed(idx.len(), |i| example_grad(&cfg, &params, &train[idx[i]]));
            let mut total = params.zeros_like();
            for r in results {
                let (loss, hit, g) = r?;
                loss_sum += loss;
                hits += usize::from(hit);
                total.add_assign(&g)?;
            }
            total.scale(1.0 / idx.len() as f64);
            adam_step(&mut params, &total, &mut adam, opts.lr)?;
        }
        let acc = accuracy(&cfg, &params, &heldout)?;
        history.push(IdEpochReport {
            epoch,
            train_loss: loss_sum / train.len() as f64,
            train_accuracy: hits as f64 / train.len() as f64,
            heldout_accuracy: acc,
        });
        if acc > best.0 {
            best = (acc, epoch, params.clone());
        }
        if acc >= 1.0 || epoch - best.1 >= opts.patience.max(1) {
            break;
        }
    }
    let (heldout_accuracy, best_epoch, params) = best;
    Ok(IdTraining {
        net: FrozenIdNet::new(cfg, params, labels)?,
        history,
        best_epoch,
        heldout_accuracy,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cross_entropy_gradient_matches_difference() {
        let z = [0.3, -1.2, 2.0];
        let (l, g) = cross_entropy(&z, 1);
        for i in 0..3 {
            let mut p = z;
            p[i] += 1e-6;
            let mut m = z;
            m[i] -= 1e-6;
            let fd = (cross_entropy(&p, 1).0 - cross_entropy(&m, 1).0) / 2e-6;
            assert!((fd - g[i]).abs() < 1e-8);
        }
        assert!(l > 0.0);
    }

    #[test]
    fn rejects_degenerate_corpora() {
        let cfg = IdNetConfig::default();
        let w = Waveform::new(vec![0.1; 8000], 8000);
        let one = vec![LabeledUtterance { speaker: "a".into(), wave: w.clone() }];
        assert!(train_idnet(&one, &cfg, &IdTrainOptions::default()).is_err());
        let thin = vec![
            LabeledUtterance { speaker: "a".into(), wave: w.clone() },
            LabeledUtterance { speaker: "b".into(), wave: w.clone() },
        ];
        let err = train_idnet(&thin, &cfg, &IdTrainOptions::default()).unwrap_err().to_string();
        assert!(err.contains("segments"), "{err}");
        let empty = vec![
            LabeledUtterance { speaker: "a".into(), wave: Waveform::new(vec![0.1; 80000], 8000) },
            LabeledUtterance { speaker: "b".into(), wave: Waveform::new(vec![], 8000) },
        ];
        assert!(train_idnet(&empty, &cfg, &IdTrainOptions::default()).is_err());
    }
}
