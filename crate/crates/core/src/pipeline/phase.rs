use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use super::config::{Phase, TrainConfig};
use super::data::{labeled_sources, load_examples, Example};
use super::trainer::{IdentityTerm, SepTrainer, TrainState, EPOCH_HEADER};
use crate::error::{Error, Result};
use crate::idnet::{load_idnet, save_idnet, train_idnet, write_label_map, FrozenIdNet, IdTrainOptions};
use crate::sepnet::{load_model, save_model, TasTasModel};

/// Header of the identity-network training report.
pub const IDNET_HEADER: &str = "epoch\ttrain_loss\ttrain_accuracy\theldout_accuracy";

pub const IDNET_CHECKPOINT: &str = "idnet.ckpt";
pub const LABELS_FILE: &str = "labels.tsv";
pub const IDNET_REPORT: &str = "idnet_report.tsv";
pub const MODEL_CHECKPOINT: &str = "model.ckpt";
pub const STATE_CHECKPOINT: &str = "state.ckpt";
pub const EPOCH_REPORT: &str = "report.tsv";
pub const CONFIG_FILE: &str = "config.txt";

/// What a phase produced.
#[derive(Clone, Debug, PartialEq)]
pub struct PhaseOutcome {
    pub phase: Phase,
    /// Artifacts written, in a fixed order.
    pub files: Vec<PathBuf>,
    pub epochs: usize,
    /// Best development loss of a separation phase.
    pub best_dev_loss: Option<f64>,
    /// Held-out accuracy of the identity network.
    pub heldout_accuracy: Option<f64>,
    /// Checksum of the frozen identity network, before and after fine-tuning.
    pub idnet_checksums: Option<(String, String)>,
}

fn require<'a>(p: &'a Option<PathBuf>, what: &str, phase: Phase) -> Result<&'a Path> {
    p.as_deref()
        .ok_or_else(|| Error::Config(format!("the {} phase needs `{what}`", phase.as_str())))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Runs one training phase as configured. Prerequisites are checked before
/// any training starts, and every artifact lands in `cfg.out_dir`.
pub fn run_phase(cfg: &TrainConfig) -> Result<PhaseOutcome> {
    cfg.validate()?;
    let train_path = require(&cfg.train_manifest, "train_manifest", cfg.phase)?;
    if cfg.phase != Phase::IdNet {
        require(&cfg.dev_manifest, "dev_manifest", cfg.phase)?;
    }
    if cfg.phase == Phase::Finetune {
        require(&cfg.idnet_checkpoint, "idnet_checkpoint", cfg.phase)?;
        if cfg.init_checkpoint.is_none() && cfg.resume.is_none() {
            return Err(Error::Config(
                "the finetune phase needs `init_checkpoint` (a trained separator) or `resume`".into(),
            ));
        }
    }
    for p in [&cfg.init_checkpoint, &cfg.idnet_checkpoint, &cfg.resume].into_iter().flatten() {
        if !p.is_file() {
            return Err(Error::io(p, "no such checkpoint"));
        }
    }
    fs::create_dir_all(&cfg.out_dir).map_err(|e| Error::io(&cfg.out_dir, e))?;
    let config_path = cfg.out_dir.join(CONFIG_FILE);
    write_text(&config_path, &cfg.to_text())?;
    let train = load_examples(train_path)?;
    let mut outcome = match cfg.phase {
        Phase::IdNet => run_idnet(cfg, &train)?,
        Phase::Sep | Phase::Finetune => {
            let dev = load_examples(require(&cfg.dev_manifest, "dev_manifest", cfg.phase)?)?;
            run_separation(cfg, &train, &dev)?
        }
    };
    outcome.files.insert(0, config_path);
    Ok(outcome)
}

fn run_idnet(cfg: &TrainConfig, train: &[Example]) -> Result<PhaseOutcome> {
    let opts = IdTrainOptions {
        seed: cfg.seed,
        ..cfg.idnet_train.clone()
    };
    let trained = train_idnet(&labeled_sources(train), &cfg.idnet, &opts)?;
    let out = &cfg.out_dir;
    let ckpt = out.join(IDNET_CHECKPOINT);
    let labels = out.join(LABELS_FILE);
    let report = out.join(IDNET_REPORT);
    save_idnet(&ckpt, &trained.net)?;
    write_label_map(&labels, trained.net.labels())?;
    let mut text = format!("{IDNET_HEADER}\n");
    for r in &trained.history {
        let _ = writeln!(
            text,
            "{}\t{:.6}\t{:.6}\t{:.6}",
            r.epoch, r.train_loss, r.train_accuracy, r.heldout_accuracy
        );
    }
    write_text(&report, &text)?;
    Ok(PhaseOutcome {
        phase: Phase::IdNet,
        files: vec![ckpt, labels, report],
        epochs: trained.history.len(),
        best_dev_loss: None,
        heldout_accuracy: Some(trained.heldout_accuracy),
        idnet_checksums: None,
    })
}

fn initial_state(cfg: &TrainConfig) -> Result<TrainState> {
    if let Some(p) = &cfg.resume {
        return TrainState::load(p);
    }
    let mut model = match &cfg.init_checkpoint {
        Some(p) => load_model(p)?,
        None => TasTasModel::new(cfg.stage_configs(), cfg.use_id_loss, cfg.seed)?,
    };
    model.set_use_id_loss(cfg.phase == Phase::Finetune || cfg.use_id_loss);
    Ok(TrainState::new(model, cfg))
}

fn check_rate(net: &FrozenIdNet, examples: &[Example]) -> Result<()> {
    match examples.iter().find(|e| e.sample_rate != net.config().sample_rate) {
        Some(e) => Err(Error::InvalidInput(format!(
            "{}: {} Hz audio for an ID-Net trained at {} Hz",
            e.utt_id,
            e.sample_rate,
            net.config().sample_rate
        ))),
        None => Ok(()),
    }
}

fn report_text(state: &TrainState) -> String {
    let mut text = format!("{EPOCH_HEADER}\n");
    for r in &state.history {
        let _ = writeln!(text, "{}", r.to_line());
    }
    text
}

fn run_separation(cfg: &TrainConfig, train: &[Example], dev: &[Example]) -> Result<PhaseOutcome> {
    let net = match cfg.phase {
        Phase::Finetune => {
            let net = load_idnet(require(&cfg.idnet_checkpoint, "idnet_checkpoint", cfg.phase)?)?;
            check_rate(&net, train)?;
            check_rate(&net, dev)?;
            Some(net)
        }
        _ => None,
    };
    let before = net.as_ref().map(FrozenIdNet::checksum);
    let identity = match &net {
        Some(n) => Some(IdentityTerm::new(n, cfg.id_weight, train, dev)?),
        None => None,
    };
    let state = initial_state(cfg)?;
    let mut trainer = SepTrainer::new(cfg, state, train, dev, identity)?;
    let out = &cfg.out_dir;
    let (state_path, report_path, model_path) = (
        out.join(STATE_CHECKPOINT),
        out.join(EPOCH_REPORT),
        out.join(MODEL_CHECKPOINT),
    );
    let persist = |state: &TrainState| -> Result<()> {
        state.save(&state_path)?;
        write_text(&report_path, &report_text(state))?;
        save_model(&model_path, &state.best_model())
    };
    trainer.run(|state, _| persist(state))?;
    let state = trainer.into_state();
    persist(&state)?;
    let checksums = match (before, &net) {
        (Some(b), Some(n)) => {
            let after = n.checksum();
            if after != b {
                return Err(Error::InvalidInput("the frozen ID-Net changed during fine-tuning".into()));
            }
            Some((b, after))
        }
        _ => None,
    };
    Ok(PhaseOutcome {
        phase: cfg.phase,
        files: vec![model_path, state_path, report_path],
        epochs: state.epoch,
        best_dev_loss: state.best.is_some().then(|| state.controller.best()),
        heldout_accuracy: None,
        idnet_checksums: checksums,
    })
}
