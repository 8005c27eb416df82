use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::StageConfig;
use crate::error::{Error, Result};
use crate::numerics::{init_uniform, ParamSet, Tensor};

/// Named presets: `(name, blocks per stage, identity loss)`.
pub const PRESETS: [(&str, &[usize], bool); 4] = [
    ("tastas-6", &[6], false),
    ("tastas-6-6", &[6, 6], false),
    ("tastas-i-6-6", &[6, 6], true),
    ("tastas-8-9", &[8, 9], false),
];

/// A multi-stage separator: per-stage configurations, whether the
/// identity loss is used in fine-tuning, and all parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct TasTasModel {
    stages: Vec<StageConfig>,
    use_id_loss: bool,
    params: ParamSet,
}

/// How a parameter is initialised.
enum Init {
    Uniform { fan_in: usize },
    Const(f64),
    /// LSTM bias: zero except the forget-gate slice.
    LstmBias { hidden: usize },
}

fn stage_layout(prefix: &str, cfg: &StageConfig, waves: usize) -> Vec<(String, Vec<usize>, Init)> {
    let (n, l, h, s) = (cfg.num_filters, cfg.kernel_len, cfg.hidden_size, cfg.num_speakers);
    let width = waves * n;
    let mut out = vec![
        (format!("{prefix}.encoder.weight"), vec![n, 1, l], Init::Uniform { fan_in: l }),
        (format!("{prefix}.encoder.prelu"), vec![1], Init::Const(0.25)),
        (format!("{prefix}.norm.gain"), vec![width], Init::Const(1.0)),
        (format!("{prefix}.norm.bias"), vec![width], Init::Const(0.0)),
        (format!("{prefix}.bottleneck.weight"), vec![n, width], Init::Uniform { fan_in: width }),
        (format!("{prefix}.bottleneck.bias"), vec![n], Init::Const(0.0)),
    ];
    for b in 0..cfg.num_blocks {
        for path in ["intra", "inter"] {
            let p = format!("{prefix}.block{b}.{path}");
            for dir in ["fwd", "bwd"] {
                out.push((format!("{p}.{dir}.w_ih"), vec![4 * h, n], Init::Uniform { fan_in: n }));
                out.push((format!("{p}.{dir}.w_hh"), vec![4 * h, h], Init::Uniform { fan_in: h }));
                out.push((format!("{p}.{dir}.b"), vec![4 * h], Init::LstmBias { hidden: h }));
            }
            out.push((format!("{p}.proj.weight"), vec![n, 2 * h], Init::Uniform { fan_in: 2 * h }));
            out.push((format!("{p}.proj.bias"), vec![n], Init::Const(0.0)));
            out.push((format!("{p}.norm.gain"), vec![n], Init::Const(1.0)));
            out.push((format!("{p}.norm.bias"), vec![n], Init::Const(0.0)));
        }
    }
    out.push((format!("{prefix}.mask.weight"), vec![s * n, n], Init::Uniform { fan_in: n }));
    out.push((format!("{prefix}.mask.bias"), vec![s * n], Init::Const(0.0)));
    out.push((format!("{prefix}.decoder.weight"), vec![l, n], Init::Uniform { fan_in: n }));
    out
}

impl TasTasModel {
    /// Randomly initialised model; the same seed gives identical parameters.
    pub fn new(stages: Vec<StageConfig>, use_id_loss: bool, seed: u64) -> Result<Self> {
        Self::check_stages(&stages)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::default();
        for (i, cfg) in stages.iter().enumerate() {
            for (name, shape, init) in stage_layout(&Self::prefix(i), cfg, Self::waves_for(i, cfg)) {
                let t = match init {
                    Init::Uniform { fan_in } => init_uniform(shape, fan_in, &mut rng),
                    Init::Const(v) => Tensor::full(shape, v),
                    Init::LstmBias { hidden } => {
                        let mut t = Tensor::zeros(shape);
                        t.data_mut()[hidden..2 * hidden].fill(1.0);
                        t
                    }
                };
                params.insert(name, t)?;
            }
        }
        Ok(TasTasModel {
            stages,
            use_id_loss,
            params,
        })
    }

    /// Model with given parameters, checked against the expected layout.
    pub fn from_parts(stages: Vec<StageConfig>, use_id_loss: bool, params: ParamSet) -> Result<Self> {
        Self::check_stages(&stages)?;
        let model = TasTasModel {
            stages,
            use_id_loss,
            params,
        };
        model.check_params(&model.params)?;
        Ok(model)
    }

    /// A preset scaled by `base` (width, chunking, hidden size).
    pub fn preset(name: &str, base: StageConfig, seed: u64) -> Result<Self> {
        let (_, blocks, id) = PRESETS
            .iter()
            .find(|(n, _, _)| *n == name)
            .ok_or_else(|| {
                let names: Vec<&str> = PRESETS.iter().map(|p| p.0).collect();
                Error::Config(format!("unknown model preset `{name}` (known: {})", names.join(", ")))
            })?;
        let stages = blocks.iter().map(|&b| base.with_blocks(b)).collect();
        Self::new(stages, *id, seed)
    }

    fn check_stages(stages: &[StageConfig]) -> Result<()> {
        let first = stages
            .first()
            .ok_or_else(|| Error::Config("a model needs at least one stage".into()))?;
        for cfg in stages {
            cfg.validate()?;
            if cfg.num_speakers != first.num_speakers {
                return Err(Error::Config("all stages must separate the same number of speakers".into()));
            }
        }
        Ok(())
    }

    pub(crate) fn prefix(stage: usize) -> String {
        format!("stage{stage}")
    }

    fn waves_for(stage: usize, cfg: &StageConfig) -> usize {
        if stage == 0 {
            1
        } else {
            cfg.num_speakers + 1
        }
    }

    /// Waveforms entering stage `stage`: the mixture, or the previous
    /// estimates followed by the mixture.
    pub fn input_waves(&self, stage: usize) -> usize {
        Self::waves_for(stage, &self.stages[stage])
    }

    pub fn stages(&self) -> &[StageConfig] {
        &self.stages
    }

    pub fn use_id_loss(&self) -> bool {
        self.use_id_loss
    }

    pub fn num_speakers(&self) -> usize {
        self.stages[0].num_speakers
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    /// Mutable access for in-place optimizer updates, which keep the layout.
    pub(crate) fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    pub fn set_use_id_loss(&mut self, use_id_loss: bool) {
        self.use_id_loss = use_id_loss;
    }

    /// Replaces all parameters; names and shapes must match.
    pub fn set_params(&mut self, params: ParamSet) -> Result<()> {
        self.check_params(&params)?;
        self.params = params;
        Ok(())
    }

    fn check_params(&self, params: &ParamSet) -> Result<()> {
        let mut expected = ParamSet::default();
        for (i, cfg) in self.stages.iter().enumerate() {
            for (name, shape, _) in stage_layout(&Self::prefix(i), cfg, self.input_waves(i)) {
                expected.insert(name, Tensor::zeros(shape))?;
            }
        }
        expected.check_mirrors(params)
    }

    /// Configuration caveats worth surfacing to a user.
    pub fn warnings(&self) -> Vec<String> {
        let mut w = Vec::new();
        if self.stages.len() >= 3 {
            w.push(format!(
                "{} refinement stages configured; beyond two stages no further gain was observed in the reference results",
                self.stages.len()
            ));
        }
        w
    }

    /// Short label such as `TasTas(I, 2, 2)`.
    pub fn label(&self) -> String {
        let mut parts: Vec<String> = Vec::new();
        if self.use_id_loss {
            parts.push("I".into());
        }
        parts.extend(self.stages.iter().map(|s| s.num_blocks.to_string()));
        format!("TasTas({})", parts.join(", "))
    }
}
