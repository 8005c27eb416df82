use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::idnet::{IdNetConfig, IdTrainOptions};
use crate::numerics::LrPolicy;
use crate::sepnet::{StageConfig, PRESETS};
use crate::signal::StftConfig;

/// The three training phases, run in this order.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    /// Speaker classifier that later serves as a frozen embedding extractor.
    IdNet,
    /// Separator trained on the PIT SI-SDR loss alone.
    Sep,
    /// Separator fine-tuned on SI-SDR plus the weighted identity loss.
    Finetune,
}

impl Phase {
    pub fn as_str(self) -> &'static str {
        match self {
            Phase::IdNet => "idnet",
            Phase::Sep => "sep",
            Phase::Finetune => "finetune",
        }
    }
}

impl FromStr for Phase {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "idnet" => Ok(Phase::IdNet),
            "sep" => Ok(Phase::Sep),
            "finetune" => Ok(Phase::Finetune),
            other => Err(Error::Config(format!("unknown phase `{other}` (idnet, sep, finetune)"))),
        }
    }
}

/// Every knob of a training run. Text form is flat `key = value` lines with
/// `#` comments; see [`TrainConfig::to_text`] for the full key list.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub phase: Phase,
    pub epochs_max: usize,
    pub batch_size: usize,
    pub initial_lr: f64,
    pub decay_factor: f64,
    pub decay_every_epochs: u32,
    pub patience: usize,
    pub max_restarts: u32,
    pub grad_clip: f64,
    pub id_weight: f64,
    pub seed: u64,
    pub train_manifest: Option<PathBuf>,
    pub dev_manifest: Option<PathBuf>,
    pub test_manifest: Option<PathBuf>,
    /// Dual-path blocks per stage.
    pub stages: Vec<usize>,
    pub use_id_loss: bool,
    /// Width, chunking and speaker count shared by all stages.
    pub stage: StageConfig,
    /// Separator checkpoint to start from (required for fine-tuning).
    pub init_checkpoint: Option<PathBuf>,
    /// Frozen ID-Net (required for fine-tuning).
    pub idnet_checkpoint: Option<PathBuf>,
    /// Training-state checkpoint to continue from.
    pub resume: Option<PathBuf>,
    pub out_dir: PathBuf,
    pub idnet: IdNetConfig,
    pub idnet_train: IdTrainOptions,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let lr = LrPolicy::default();
        TrainConfig {
            phase: Phase::Sep,
            epochs_max: 100,
            batch_size: 1,
            initial_lr: lr.initial_lr,
            decay_factor: lr.decay_factor,
            decay_every_epochs: lr.decay_every_epochs,
            patience: 2,
            max_restarts: 3,
            grad_clip: 5.0,
            id_weight: 1.0,
            seed: 0,
            train_manifest: None,
            dev_manifest: None,
            test_manifest: None,
            stages: vec![6, 6],
            use_id_loss: false,
            stage: StageConfig::default(),
            init_checkpoint: None,
            idnet_checkpoint: None,
            resume: None,
            out_dir: PathBuf::from("runs"),
            idnet: IdNetConfig::default(),
            idnet_train: IdTrainOptions::default(),
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("`{key}`: cannot parse `{value}`")))
}

fn parse_list(key: &str, value: &str) -> Result<Vec<usize>> {
    value.split(',').map(|v| parse(key, v.trim())).collect()
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::Config(format!("`{key}`: expected true or false, got `{value}`"))),
    }
}

fn opt_path(value: &str) -> Option<PathBuf> {
    (!value.is_empty()).then(|| PathBuf::from(value))
}

fn join_list(v: &[usize]) -> String {
    v.iter().map(usize::to_string).collect::<Vec<_>>().join(",")
}

fn path_text(p: &Option<PathBuf>) -> String {
    p.as_ref().map(|p| p.display().to_string()).unwrap_or_default()
}

impl TrainConfig {
    pub fn lr_policy(&self) -> LrPolicy {
        LrPolicy {
            initial_lr: self.initial_lr,
            decay_factor: self.decay_factor,
            decay_every_epochs: self.decay_every_epochs,
            restart_halvings: 0,
        }
    }

    /// Per-stage configurations of the separator.
    pub fn stage_configs(&self) -> Vec<StageConfig> {
        self.stages.iter().map(|&b| self.stage.with_blocks(b)).collect()
    }

    /// Applies one `key = value` setting.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key {
            "phase" => self.phase = v.parse()?,
            "epochs_max" => self.epochs_max = parse(key, v)?,
            "batch_size" => self.batch_size = parse(key, v)?,
            "initial_lr" => self.initial_lr = parse(key, v)?,
            "decay_factor" => self.decay_factor = parse(key, v)?,
            "decay_every_epochs" => self.decay_every_epochs = parse(key, v)?,
            "patience" => self.patience = parse(key, v)?,
            "max_restarts" => self.max_restarts = parse(key, v)?,
            "grad_clip" => self.grad_clip = parse(key, v)?,
            "id_weight" => self.id_weight = parse(key, v)?,
            "seed" => self.seed = parse(key, v)?,
            "train_manifest" => self.train_manifest = opt_path(v),
            "dev_manifest" => self.dev_manifest = opt_path(v),
            "test_manifest" => self.test_manifest = opt_path(v),
            "model" => {
                let (_, blocks, id) = PRESETS
                    .iter()
                    .find(|(n, _, _)| *n == v)
                    .ok_or_else(|| Error::Config(format!("unknown model preset `{v}`")))?;
                self.stages = blocks.to_vec();
                self.use_id_loss = *id;
            }
            "stages" => self.stages = parse_list(key, v)?,
            "use_id_loss" => self.use_id_loss = parse_bool(key, v)?,
            "num_filters" => self.stage.num_filters = parse(key, v)?,
            "kernel_len" => self.stage.kernel_len = parse(key, v)?,
            "stride" => self.stage.stride = parse(key, v)?,
            "chunk_len" => {
                self.stage.chunk_len = parse(key, v)?;
                self.stage.chunk_hop = self.stage.chunk_len / 2;
            }
            "hidden_size" => self.stage.hidden_size = parse(key, v)?,
            "num_speakers" => self.stage.num_speakers = parse(key, v)?,
            "init_checkpoint" => self.init_checkpoint = opt_path(v),
            "idnet_checkpoint" => self.idnet_checkpoint = opt_path(v),
            "resume" => self.resume = opt_path(v),
            "out_dir" => self.out_dir = PathBuf::from(v),
            "idnet_segment_s" => self.idnet.segment_s = parse(key, v)?,
            "idnet_stft" => {
                let (w, h) = v
                    .split_once(',')
                    .ok_or_else(|| Error::Config(format!("`{key}`: expected `window,hop`, got `{v}`")))?;
                self.idnet.stft = StftConfig::new(parse(key, w.trim())?, parse(key, h.trim())?)?;
            }
            "idnet_channels" => self.idnet.channels = parse_list(key, v)?,
            "idnet_embedding_dim" => self.idnet.embedding_dim = parse(key, v)?,
            "idnet_epochs_max" => self.idnet_train.epochs_max = parse(key, v)?,
            "idnet_batch_size" => self.idnet_train.batch_size = parse(key, v)?,
            "idnet_lr" => self.idnet_train.lr = parse(key, v)?,
            "idnet_patience" => self.idnet_train.patience = parse(key, v)?,
            other => return Err(Error::Config(format!("unknown configuration key `{other}`"))),
        }
        Ok(())
    }

    /// Parses `key = value` text over the defaults. Blank lines and `#`
    /// comments are ignored; repeating a key is an error.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = TrainConfig::default();
        let mut seen = std::collections::BTreeSet::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", n + 1)))?;
            let key = key.trim();
            if !seen.insert(key.to_string()) {
                return Err(Error::Config(format!("line {}: `{key}` set twice", n + 1)));
            }
            cfg.set(key, value).map_err(|e| Error::Config(format!("line {}: {e}", n + 1)))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads a configuration file; relative paths inside it resolve against
    /// the file's directory.
    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::parse(&text)?;
        let base = path.parent().unwrap_or(Path::new(""));
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        for p in [
            &mut cfg.train_manifest,
            &mut cfg.dev_manifest,
            &mut cfg.test_manifest,
            &mut cfg.init_checkpoint,
            &mut cfg.idnet_checkpoint,
            &mut cfg.resume,
        ]
        .into_iter()
        .flatten()
        {
            fix(p);
        }
        fix(&mut cfg.out_dir);
        Ok(cfg)
    }

    /// Canonical text form; [`TrainConfig::parse`] reads it back unchanged.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        kv("phase", self.phase.as_str().into());
        kv("epochs_max", self.epochs_max.to_string());
        kv("batch_size", self.batch_size.to_string());
        kv("initial_lr", self.initial_lr.to_string());
        kv("decay_factor", self.decay_factor.to_string());
        kv("decay_every_epochs", self.decay_every_epochs.to_string());
        kv("patience", self.patience.to_string());
        kv("max_restarts", self.max_restarts.to_string());
        kv("grad_clip", self.grad_clip.to_string());
        kv("id_weight", self.id_weight.to_string());
        kv("seed", self.seed.to_string());
        kv("train_manifest", path_text(&self.train_manifest));
        kv("dev_manifest", path_text(&self.dev_manifest));
        kv("test_manifest", path_text(&self.test_manifest));
        kv("stages", join_list(&self.stages));
        kv("use_id_loss", self.use_id_loss.to_string());
        kv("num_filters", self.stage.num_filters.to_string());
        kv("kernel_len", self.stage.kernel_len.to_string());
        kv("stride", self.stage.stride.to_string());
        kv("chunk_len", self.stage.chunk_len.to_string());
        kv("hidden_size", self.stage.hidden_size.to_string());
        kv("num_speakers", self.stage.num_speakers.to_string());
        kv("init_checkpoint", path_text(&self.init_checkpoint));
        kv("idnet_checkpoint", path_text(&self.idnet_checkpoint));
        kv("resume", path_text(&self.resume));
        kv("out_dir", self.out_dir.display().to_string());
        kv("idnet_segment_s", self.idnet.segment_s.to_string());
        kv(
            "idnet_stft",
            format!("{},{}", self.idnet.stft.window_len(), self.idnet.stft.hop()),
        );
        kv("idnet_channels", join_list(&self.idnet.channels));
        kv("idnet_embedding_dim", self.idnet.embedding_dim.to_string());
        kv("idnet_epochs_max", self.idnet_train.epochs_max.to_string());
        kv("idnet_batch_size", self.idnet_train.batch_size.to_string());
        kv("idnet_lr", self.idnet_train.lr.to_string());
        kv("idnet_patience", self.idnet_train.patience.to_string());
        s
    }

    /// Field-level checks that need no files.
    pub fn validate(&self) -> Result<()> {
        if !(1..=3).contains(&self.batch_size) {
            return Err(Error::Config(format!("batch_size must be 1, 2 or 3, got {}", self.batch_size)));
        }
        if self.epochs_max == 0 {
            return Err(Error::Config("epochs_max must be at least 1".into()));
        }
        if !(self.initial_lr > 0.0) || !(self.decay_factor > 0.0 && self.decay_factor <= 1.0) {
            return Err(Error::Config(format!(
                "learning rate {} and decay factor {} must be positive (decay at most 1)",
                self.initial_lr, self.decay_factor
            )));
        }
        if self.decay_every_epochs == 0 || self.patience == 0 {
            return Err(Error::Config("decay_every_epochs and patience must be at least 1".into()));
        }
        if !(self.grad_clip > 0.0) || !(self.id_weight >= 0.0) {
            return Err(Error::Config("grad_clip must be positive and id_weight non-negative".into()));
        }
        if self.stages.is_empty() {
            return Err(Error::Config("at least one stage is required".into()));
        }
        for cfg in self.stage_configs() {
            cfg.validate()?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_round_trip() {
        let mut cfg = TrainConfig::default();
        cfg.phase = Phase::Finetune;
        cfg.initial_lr = 0.0005;
        cfg.train_manifest = Some("data/train.tsv".into());
        cfg.stages = vec![8, 9];
        cfg.idnet.channels = vec![8, 8];
        assert_eq!(TrainConfig::parse(&cfg.to_text()).unwrap(), cfg);
    }

    #[test]
    fn comments_presets_and_errors() {
        let cfg = TrainConfig::parse("# run\nmodel = tastas-i-6-6  # preset\nbatch_size=3\n\n").unwrap();
        assert_eq!(cfg.stages, vec![6, 6]);
        assert!(cfg.use_id_loss);
        assert_eq!(cfg.batch_size, 3);
        assert!(TrainConfig::parse("batch_size = 4").is_err());
        assert!(TrainConfig::parse("seed = 1\nseed = 2").is_err());
        assert!(TrainConfig::parse("colour = blue").unwrap_err().to_string().contains("colour"));
        assert!(TrainConfig::parse("no equals sign").is_err());
        assert!(TrainConfig::parse("chunk_len = 1").is_err());
    }
}
