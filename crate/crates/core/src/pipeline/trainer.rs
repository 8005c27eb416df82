use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::TrainConfig;
use super::control::{Action, RestartController};
use super::data::Example;
use crate::error::{Error, Result};
use crate::idnet::FrozenIdNet;
use crate::numerics::{adam_step, par, AdamState, LrPolicy, ParamSet, Tape, Tensor, Var};
use crate::objectives::{id_loss, id_loss_with_grad, multi_stage_loss, multi_stage_loss_with_grad, si_sdri, LossBreakdown};
use crate::sepnet::checkpoint::{read_stage_configs, write_stage_configs, ByteReader, ByteWriter};
use crate::sepnet::{tastas_forward, tastas_forward_on, Container, ContainerKind, Dtype, TasTasModel};

/// Header of the per-epoch training report.
pub const EPOCH_HEADER: &str = "epoch\tlr\ttrain_loss\tdev_loss\tdev_si_sdri\trestarts";

/// One row of the per-epoch report.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochReport {
    /// 1-based epoch number.
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub dev_loss: f64,
    pub dev_si_sdri: f64,
    /// Restarts performed up to and including this epoch.
    pub restarts: u32,
}

impl EpochReport {
    pub fn to_line(&self) -> String {
        format!(
            "{}\t{:e}\t{:.6}\t{:.6}\t{:.6}\t{}",
            self.epoch, self.lr, self.train_loss, self.dev_loss, self.dev_si_sdri, self.restarts
        )
    }
}

/// Parameters and optimizer state at the best development loss so far.
#[derive(Clone, Debug, PartialEq)]
pub struct Snapshot {
    pub params: ParamSet,
    pub adam: AdamState,
}

/// Everything needed to continue training exactly where it stopped.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub model: TasTasModel,
    pub adam: AdamState,
    /// Epochs completed.
    pub epoch: usize,
    /// Epochs completed since the last restart; drives the step decay.
    pub epochs_since_restart: usize,
    pub controller: RestartController,
    pub best: Option<Snapshot>,
    pub rng: ChaCha8Rng,
    pub history: Vec<EpochReport>,
    pub finished: bool,
}

impl TrainState {
    pub fn new(model: TasTasModel, cfg: &TrainConfig) -> Self {
        TrainState {
            adam: AdamState::new(model.params()),
            model,
            epoch: 0,
            epochs_since_restart: 0,
            controller: RestartController::new(cfg.patience, cfg.max_restarts),
            best: None,
            rng: ChaCha8Rng::seed_from_u64(cfg.seed),
            history: Vec::new(),
            finished: false,
        }
    }

    /// Learning rate of the next epoch: the restart's initial rate,
    /// decayed by the epochs since that restart.
    pub fn current_lr(&self, policy: &LrPolicy) -> f64 {
        LrPolicy {
            restart_halvings: self.controller.restarts(),
            ..*policy
        }
        .lr_for_epoch(self.epochs_since_restart as u32)
    }

    /// Books an epoch's development loss: records the best snapshot,
    /// restores it on a restart, and marks the run finished on a stop or
    /// when `epochs_max` is reached.
    pub fn finish_epoch(&mut self, dev_loss: f64, epochs_max: usize) -> Action {
        let action = self.controller.observe(dev_loss);
        self.epoch += 1;
        self.epochs_since_restart += 1;
        match action {
            Action::Continue { improved: true } => {
                self.best = Some(Snapshot {
                    params: self.model.params().clone(),
                    adam: self.adam.clone(),
                });
            }
            Action::Continue { improved: false } => {}
            Action::Restart => {
                let best = self.best.as_ref().expect("a restart follows at least one improvement");
                *self.model.params_mut() = best.params.clone();
                self.adam = best.adam.clone();
                self.epochs_since_restart = 0;
            }
            Action::Stop => self.finished = true,
        }
        if self.epoch >= epochs_max {
            self.finished = true;
        }
        action
    }

    /// The model with the best parameters seen, or the current ones if no
    /// epoch has finished.
    pub fn best_model(&self) -> TasTasModel {
        let mut m = self.model.clone();
        if let Some(b) = &self.best {
            *m.params_mut() = b.params.clone();
        }
        m
    }

    pub fn to_container(&self) -> Container {
        let mut w = ByteWriter::default();
        write_stage_configs(&mut w, self.model.stages(), self.model.use_id_loss());
        w.u64(self.epoch as u64)
            .u64(self.epochs_since_restart as u64)
            .u8(self.finished as u8);
        let c = &self.controller;
        w.u64(c.patience as u64)
            .u32(c.max_restarts)
            .f64(c.best())
            .u64(c.bad_epochs() as u64)
            .u32(c.restarts());
        write_adam_header(&mut w, &self.adam);
        w.bytes(&self.rng.get_seed())
            .u128(self.rng.get_word_pos())
            .u64(self.rng.get_stream());
        w.u8(self.best.is_some() as u8);
        if let Some(b) = &self.best {
            write_adam_header(&mut w, &b.adam);
        }
        w.u32(self.history.len() as u32);
        for r in &self.history {
            w.u64(r.epoch as u64)
                .f64(r.lr)
                .f64(r.train_loss)
                .f64(r.dev_loss)
                .f64(r.dev_si_sdri)
                .u32(r.restarts);
        }
        let mut out = Container {
            kind: ContainerKind::TrainState,
            header: w.finish(),
            blobs: Vec::new(),
        };
        out.push_params("model.", self.model.params(), Dtype::F64);
        out.push_params("adam.m.", &self.adam.m, Dtype::F64);
        out.push_params("adam.v.", &self.adam.v, Dtype::F64);
        if let Some(b) = &self.best {
            out.push_params("best.model.", &b.params, Dtype::F64);
            out.push_params("best.adam.m.", &b.adam.m, Dtype::F64);
            out.push_params("best.adam.v.", &b.adam.v, Dtype::F64);
        }
        out
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        c.expect_kind(ContainerKind::TrainState)?;
        let mut r = ByteReader::new(&c.header, "training-state header");
        let (stages, use_id_loss) = read_stage_configs(&mut r)?;
        let epoch = r.u64()? as usize;
        let epochs_since_restart = r.u64()? as usize;
        let finished = r.u8()? != 0;
        let patience = r.u64()? as usize;
        let max_restarts = r.u32()?;
        let best_loss = r.f64()?;
        let bad = r.u64()? as usize;
        let restarts = r.u32()?;
        let controller = RestartController::from_parts(patience, max_restarts, best_loss, bad, restarts);
        let adam_hdr = read_adam_header(&mut r)?;
        let seed: [u8; 32] = r.bytes(32)?.try_into().expect("32 bytes");
        let word_pos = r.u128()?;
        let stream = r.u64()?;
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(stream);
        rng.set_word_pos(word_pos);
        let best_hdr = if r.u8()? != 0 { Some(read_adam_header(&mut r)?) } else { None };
        let rows = r.u32()? as usize;
        let mut history = Vec::with_capacity(rows.min(1 << 20));
        for _ in 0..rows {
            history.push(EpochReport {
                epoch: r.u64()? as usize,
                lr: r.f64()?,
                train_loss: r.f64()?,
                dev_loss: r.f64()?,
                dev_si_sdri: r.f64()?,
                restarts: r.u32()?,
            });
        }
        r.finish()?;
        let bad_blobs = |e: Error| Error::Checkpoint(format!("training state: {e}"));
        let model = TasTasModel::from_parts(stages, use_id_loss, c.params("model.")?).map_err(bad_blobs)?;
        let adam = adam_hdr.with_moments(c.params("adam.m.")?, c.params("adam.v.")?);
        model.params().check_mirrors(&adam.m).map_err(bad_blobs)?;
        model.params().check_mirrors(&adam.v).map_err(bad_blobs)?;
        let best = match best_hdr {
            Some(h) => {
                let params = c.params("best.model.")?;
                model.params().check_mirrors(&params).map_err(bad_blobs)?;
                Some(Snapshot {
                    params,
                    adam: h.with_moments(c.params("best.adam.m.")?, c.params("best.adam.v.")?),
                })
            }
            None => None,
        };
        Ok(TrainState {
            model,
            adam,
            epoch,
            epochs_since_restart,
            controller,
            best,
            rng,
            history,
            finished,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_container().write(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_container(&Container::read(path)?)
    }
}

struct AdamHeader {
    step: u64,
    beta1: f64,
    beta2: f64,
    eps: f64,
}

impl AdamHeader {
    fn with_moments(self, m: ParamSet, v: ParamSet) -> AdamState {
        AdamState {
            step: self.step,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
            m,
            v,
        }
    }
}

fn write_adam_header(w: &mut ByteWriter, a: &AdamState) {
    w.u64(a.step).f64(a.beta1).f64(a.beta2).f64(a.eps);
}

fn read_adam_header(r: &mut ByteReader) -> Result<AdamHeader> {
    Ok(AdamHeader {
        step: r.u64()?,
        beta1: r.f64()?,
        beta2: r.f64()?,
        eps: r.f64()?,
    })
}

/// Frozen ID-Net, its weight in the total loss and the reference embedding
/// of every target, indexed like the examples.
pub struct IdentityTerm<'a> {
    pub net: &'a FrozenIdNet,
    pub weight: f64,
    pub train_refs: Vec<Vec<Vec<f64>>>,
    pub dev_refs: Vec<Vec<Vec<f64>>>,
}

impl<'a> IdentityTerm<'a> {
    pub fn new(net: &'a FrozenIdNet, weight: f64, train: &[Example], dev: &[Example]) -> Result<Self> {
        Ok(IdentityTerm {
            net,
            weight,
            train_refs: reference_embeddings(net, train)?,
            dev_refs: reference_embeddings(net, dev)?,
        })
    }
}

/// Embeddings of every reference source, in example order.
pub fn reference_embeddings(net: &FrozenIdNet, examples: &[Example]) -> Result<Vec<Vec<Vec<f64>>>> {
    par::map_indexed(examples.len(), |i| {
        examples[i]
            .sources
            .iter()
            .map(|s| net.embed_utterance(s))
            .collect::<Result<Vec<_>>>()
    })
    .into_iter()
    .collect()
}

/// Training loss of one example and its parameter gradient. With an
/// identity term the final stage's estimates are embedded and compared to
/// the references under that stage's permutation.
pub fn example_gradient(
    model: &TasTasModel,
    ex: &Example,
    identity: Option<(&FrozenIdNet, &[Vec<f64>], f64)>,
) -> Result<(LossBreakdown, ParamSet)> {
    let mut tape = Tape::new();
    let bound = tape.bind(model.params(), true);
    let x = tape.constant(Tensor::from_vec(ex.mixture.clone()));
    let outputs = tastas_forward_on(&mut tape, &bound, model, x)?;
    let values: Vec<Vec<Vec<f64>>> = outputs
        .iter()
        .map(|s| s.iter().map(|v| tape.value(*v).data().to_vec()).collect())
        .collect();
    let (mut breakdown, dests) = multi_stage_loss_with_grad(&values, &ex.sources)?;
    let mut seeds: Vec<(Var, Tensor)> = outputs
        .iter()
        .flatten()
        .zip(dests.into_iter().flatten())
        .map(|(v, g)| (*v, Tensor::from_vec(g)))
        .collect();
    if let Some((net, refs, weight)) = identity {
        let last = outputs.last().expect("at least one stage");
        let embs = last
            .iter()
            .map(|v| net.embed_on_tape(&mut tape, *v))
            .collect::<Result<Vec<_>>>()?;
        let sep: Vec<Vec<f64>> = embs.iter().map(|e| tape.value(*e).data().to_vec()).collect();
        let (id, grads) = id_loss_with_grad(&sep, refs, breakdown.final_perm())?;
        breakdown = breakdown.with_id_loss(id, weight);
        for (e, g) in embs.into_iter().zip(grads) {
            seeds.push((e, Tensor::from_vec(g.into_iter().map(|v| v * weight).collect())));
        }
    }
    let grads = tape.backward(&seeds)?;
    Ok((breakdown, grads.into_params()))
}

/// Loss breakdown and final-stage SI-SDRi of one example without gradients.
pub fn example_metrics(
    model: &TasTasModel,
    ex: &Example,
    identity: Option<(&FrozenIdNet, &[Vec<f64>], f64)>,
) -> Result<(LossBreakdown, f64)> {
    let outputs = tastas_forward(model, &ex.mixture)?;
    let mut breakdown = multi_stage_loss(&outputs, &ex.sources)?;
    let last = outputs.last().expect("at least one stage");
    if let Some((net, refs, weight)) = identity {
        let sep = last.iter().map(|e| net.embed_utterance(e)).collect::<Result<Vec<_>>>()?;
        let id = id_loss(&sep, refs, breakdown.final_perm())?;
        breakdown = breakdown.with_id_loss(id, weight);
    }
    let improvement = si_sdri(&ex.mixture, &ex.sources, last, breakdown.final_perm())?;
    Ok((breakdown, improvement))
}

/// Epoch loop of the separation and fine-tuning phases.
pub struct SepTrainer<'a> {
    cfg: TrainConfig,
    train: &'a [Example],
    dev: &'a [Example],
    identity: Option<IdentityTerm<'a>>,
    pub state: TrainState,
}

impl<'a> SepTrainer<'a> {
    pub fn new(
        cfg: &TrainConfig,
        state: TrainState,
        train: &'a [Example],
        dev: &'a [Example],
        identity: Option<IdentityTerm<'a>>,
    ) -> Result<Self> {
        cfg.validate()?;
        if train.is_empty() || dev.is_empty() {
            return Err(Error::InvalidInput(format!(
                "need training and development examples (got {} and {})",
                train.len(),
                dev.len()
            )));
        }
        let s = state.model.num_speakers();
        if let Some(ex) = train.iter().chain(dev).find(|ex| ex.sources.len() != s) {
            return Err(Error::InvalidInput(format!(
                "{}: {} reference sources for a {s}-speaker model",
                ex.utt_id,
                ex.sources.len()
            )));
        }
        if let Some(id) = &identity {
            if id.train_refs.len() != train.len() || id.dev_refs.len() != dev.len() {
                return Err(Error::InvalidInput("reference embeddings do not match the examples".into()));
            }
        }
        Ok(SepTrainer {
            cfg: cfg.clone(),
            train,
            dev,
            identity,
            state,
        })
    }

    fn identity_for(&self, refs: &'a [Vec<Vec<f64>>], i: usize) -> Option<(&'a FrozenIdNet, &'a [Vec<f64>], f64)> {
        self.identity
            .as_ref()
            .map(|id| (id.net, refs[i].as_slice(), id.weight))
    }

    /// Mean development loss and SI-SDRi of the current model.
    pub fn evaluate_dev(&self) -> Result<(f64, f64)> {
        let refs: &[Vec<Vec<f64>>] = self.identity.as_ref().map(|i| i.dev_refs.as_slice()).unwrap_or(&[]);
        let results = par::map_indexed(self.dev.len(), |i| {
            let id = self.identity.as_ref().map(|t| (t.net, refs[i].as_slice(), t.weight));
            example_metrics(&self.state.model, &self.dev[i], id)
        });
        let (mut loss, mut sdri) = (0.0, 0.0);
        for r in results {
            let (b, s) = r?;
            loss += b.total;
            sdri += s;
        }
        let n = self.dev.len() as f64;
        Ok((loss / n, sdri / n))
    }

    /// One pass over the shuffled training set followed by development
    /// evaluation and the restart decision.
    pub fn run_epoch(&mut self) -> Result<(EpochReport, Action)> {
        if self.state.finished {
            return Err(Error::InvalidInput("training already finished".into()));
        }
        let lr = self.state.current_lr(&self.cfg.lr_policy());
        let mut order: Vec<usize> = (0..self.train.len()).collect();
        order.shuffle(&mut self.state.rng);
        let train_refs: &[Vec<Vec<f64>>] = self
            .identity
            .as_ref()
            .map(|i| i.train_refs.as_slice())
            .unwrap_or(&[]);
        let mut loss_sum = 0.0;
        for batch in order.chunks(self.cfg.batch_size) {
            let model = &self.state.model;
            let results = par::map_indexed(batch.len(), |i| {
                let idx = batch[i];
                example_gradient(model, &self.train[idx], self.identity_for(train_refs, idx))
            });
            // Reduce in batch order so the update never depends on scheduling.
            let mut total = model.params().zeros_like();
            for r in results {
                let (b, g) = r?;
                loss_sum += b.total;
                total.add_assign(&g)?;
            }
            total.scale(1.0 / batch.len() as f64);
            total.clip_global_norm(self.cfg.grad_clip);
            adam_step(self.state.model.params_mut(), &total, &mut self.state.adam, lr)?;
        }
        let (dev_loss, dev_si_sdri) = self.evaluate_dev()?;
        let action = self.state.finish_epoch(dev_loss, self.cfg.epochs_max);
        let report = EpochReport {
            epoch: self.state.epoch,
            lr,
            train_loss: loss_sum / self.train.len() as f64,
            dev_loss,
            dev_si_sdri,
            restarts: self.state.controller.restarts(),
        };
        self.state.history.push(report.clone());
        Ok((report, action))
    }

    /// Runs epochs until the state is finished, calling `after_epoch` with
    /// the state after each one.
    pub fn run(&mut self, mut after_epoch: impl FnMut(&TrainState, &EpochReport) -> Result<()>) -> Result<()> {
        while !self.state.finished {
            let (report, _) = self.run_epoch()?;
            after_epoch(&self.state, &report)?;
        }
        Ok(())
    }

    pub fn into_state(self) -> TrainState {
        self.state
    }
}
