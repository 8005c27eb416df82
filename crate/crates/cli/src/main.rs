//! `tastas` command-line tool: corpus synthesis, the three training phases,
//! separation, evaluation and gradient self-checks.
//!
//! Exit codes: 0 on success, 1 on usage errors (bad flags or
//! configuration, detected before any file is touched), 2 on runtime
//! errors and failed gradient checks.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand};
use tastas::idnet::load_idnet;
use tastas::numerics::{grad_check_all, par};
use tastas::pipeline::{corpus_from_wavs, evaluate, run_phase, synth_corpus, Phase, SynthOptions, TrainConfig};
use tastas::sepnet::{load_model, tastas_forward, tiny_model_grad_check};
use tastas::signal::{read_manifest, wav_read, wav_write, Waveform};

#[derive(Parser)]
#[command(name = "tastas", version, about = "Multi-stage dual-path BiLSTM speech separation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a two-speaker corpus (WAVs plus train/dev/test manifests).
    SynthData(SynthArgs),
    /// Train the speaker-identity network.
    TrainIdnet(TrainArgs),
    /// Train a separator on the SI-SDR loss alone.
    TrainSep(TrainArgs),
    /// Fine-tune a separator with the identity loss added.
    Finetune(TrainArgs),
    /// Separate one mixture into per-speaker WAVs.
    Separate(SeparateArgs),
    /// Score separators (and the IRM oracle) on a manifest.
    Eval(EvalArgs),
    /// Finite-difference check of every primitive and a tiny full model.
    GradCheck(GradCheckArgs),
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long, default_value_t = 8)]
    speakers: usize,
    /// Training utterances per speaker.
    #[arg(long, default_value_t = 25)]
    utts_per: usize,
    /// Utterance duration in seconds.
    #[arg(long, default_value_t = 1.0)]
    dur: f64,
    #[arg(long, default_value_t = 0.0)]
    snr_lo: f64,
    #[arg(long, default_value_t = 5.0)]
    snr_hi: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    /// Build the corpus from `DIR/<speaker>/*.wav` instead of toy speakers.
    #[arg(long, value_name = "DIR")]
    from_wavs: Option<PathBuf>,
    /// Mixture counts per split, overriding the defaults.
    #[arg(long)]
    train: Option<usize>,
    #[arg(long)]
    dev: Option<usize>,
    #[arg(long)]
    test: Option<usize>,
}

#[derive(Args)]
struct TrainArgs {
    /// Configuration file of `key = value` lines; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Extra `key=value` settings, applied after the file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
    #[arg(long, value_name = "MANIFEST")]
    train: Option<PathBuf>,
    #[arg(long, value_name = "MANIFEST")]
    dev: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Model preset: tastas-6, tastas-6-6, tastas-i-6-6 or tastas-8-9.
    #[arg(long)]
    model: Option<String>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    id_weight: Option<f64>,
    /// Separator checkpoint to start from.
    #[arg(long, value_name = "CKPT")]
    init: Option<PathBuf>,
    /// Frozen ID-Net checkpoint.
    #[arg(long, value_name = "CKPT")]
    idnet: Option<PathBuf>,
    /// Training-state checkpoint to continue from.
    #[arg(long, value_name = "CKPT")]
    resume: Option<PathBuf>,
}

#[derive(Args)]
struct SeparateArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long = "in", value_name = "WAV")]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    /// Separator checkpoint, optionally labelled as `LABEL=PATH`; repeatable.
    #[arg(long, required = true)]
    ckpt: Vec<String>,
    #[arg(long, value_name = "MANIFEST")]
    test: PathBuf,
    /// Directory for the table, per-utterance metrics and error records.
    #[arg(long)]
    out: Option<PathBuf>,
    /// ID-Net used to report identity loss per utterance.
    #[arg(long, value_name = "CKPT")]
    idnet: Option<PathBuf>,
    /// Leave out the IRM oracle row.
    #[arg(long)]
    no_irm: bool,
}

#[derive(Args)]
struct GradCheckArgs {
    /// Relative-error tolerance for the primitives.
    #[arg(long, default_value_t = 1e-4)]
    tol: f64,
    /// Relative-error tolerance for the end-to-end model check; defaults to `--tol`.
    #[arg(long)]
    model_tol: Option<f64>,
    #[arg(long, default_value_t = 3)]
    trials: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

enum Failure {
    Usage(anyhow::Error),
    Runtime(anyhow::Error),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Runtime(e)
    }
}

impl From<tastas::Error> for Failure {
    fn from(e: tastas::Error) -> Self {
        Failure::Runtime(e.into())
    }
}

fn usage(msg: impl Into<String>) -> Failure {
    Failure::Usage(anyhow!(msg.into()))
}

type Outcome = Result<(), Failure>;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let result = par::install(par::threads_from_env(), || run(cli.command));
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn run(command: Command) -> Outcome {
    match command {
        Command::SynthData(a) => synth_data(a),
        Command::TrainIdnet(a) => train(Phase::IdNet, a),
        Command::TrainSep(a) => train(Phase::Sep, a),
        Command::Finetune(a) => train(Phase::Finetune, a),
        Command::Separate(a) => separate(a),
        Command::Eval(a) => eval(a),
        Command::GradCheck(a) => grad_check(a),
    }
}

fn synth_data(a: SynthArgs) -> Outcome {
    if a.from_wavs.is_none() && a.speakers < 2 {
        return Err(usage(format!("--speakers must be at least 2, got {}", a.speakers)));
    }
    if !(a.snr_lo <= a.snr_hi) {
        return Err(usage(format!("--snr-lo {} exceeds --snr-hi {}", a.snr_lo, a.snr_hi)));
    }
    if !(a.dur > 0.0) {
        return Err(usage("--dur must be positive"));
    }
    let mut opts = SynthOptions {
        speakers: a.speakers,
        utts_per: a.utts_per,
        dur_s: a.dur,
        snr_lo: a.snr_lo,
        snr_hi: a.snr_hi,
        seed: a.seed,
        ..SynthOptions::default()
    };
    if a.train.is_some() || a.dev.is_some() || a.test.is_some() {
        let d = opts.split_counts();
        opts.counts = Some([a.train.unwrap_or(d[0]), a.dev.unwrap_or(d[1]), a.test.unwrap_or(d[2])]);
    }
    let summary = match &a.from_wavs {
        Some(dir) => corpus_from_wavs(dir, &opts, &a.out)?,
        None => synth_corpus(&opts, &a.out)?,
    };
    for (m, c) in summary.manifests.iter().zip(summary.counts) {
        println!("{}\t{c} mixtures", m.display());
    }
    Ok(())
}

fn train_config(phase: Phase, a: &TrainArgs) -> Result<TrainConfig, Failure> {
    let mut cfg = match &a.config {
        Some(p) => TrainConfig::from_file(p).map_err(|e| Failure::Usage(e.into()))?,
        None => TrainConfig::default(),
    };
    cfg.phase = phase;
    let mut apply = |k: &str, v: String| cfg.set(k, &v).map_err(|e| Failure::Usage(e.into()));
    for s in &a.sets {
        let (k, v) = s
            .split_once('=')
            .ok_or_else(|| usage(format!("--set expects KEY=VALUE, got `{s}`")))?;
        apply(k.trim(), v.to_string())?;
    }
    let path = |p: &Option<PathBuf>| p.as_ref().map(|p| p.display().to_string());
    let overrides = [
        ("train_manifest", path(&a.train)),
        ("dev_manifest", path(&a.dev)),
        ("out_dir", path(&a.out)),
        ("model", a.model.clone()),
        ("epochs_max", a.epochs.map(|v| v.to_string())),
        ("batch_size", a.batch_size.map(|v| v.to_string())),
        ("initial_lr", a.lr.map(|v| v.to_string())),
        ("seed", a.seed.map(|v| v.to_string())),
        ("id_weight", a.id_weight.map(|v| v.to_string())),
        ("init_checkpoint", path(&a.init)),
        ("idnet_checkpoint", path(&a.idnet)),
        ("resume", path(&a.resume)),
    ];
    for (k, v) in overrides {
        if let Some(v) = v {
            apply(k, v)?;
        }
    }
    cfg.validate().map_err(|e| Failure::Usage(e.into()))?;
    if cfg.train_manifest.is_none() {
        return Err(usage("--train (or train_manifest in the config) is required"));
    }
    if phase != Phase::IdNet && cfg.dev_manifest.is_none() {
        return Err(usage("--dev (or dev_manifest in the config) is required"));
    }
    if phase == Phase::Finetune {
        if cfg.idnet_checkpoint.is_none() {
            return Err(usage("finetune needs a frozen ID-Net: pass --idnet"));
        }
        if cfg.init_checkpoint.is_none() && cfg.resume.is_none() {
            return Err(usage("finetune needs a trained separator: pass --init (or --resume)"));
        }
    }
    Ok(cfg)
}

fn train(phase: Phase, a: TrainArgs) -> Outcome {
    let cfg = train_config(phase, &a)?;
    let outcome = run_phase(&cfg)?;
    if let Some(acc) = outcome.heldout_accuracy {
        println!("held-out accuracy\t{acc:.4}");
    }
    if let Some(loss) = outcome.best_dev_loss {
        println!("best dev loss\t{loss:.6}");
    }
    if let Some((before, after)) = &outcome.idnet_checksums {
        println!("idnet checksum\t{before}\t{after}");
    }
    println!("epochs\t{}", outcome.epochs);
    for f in &outcome.files {
        println!("wrote\t{}", f.display());
    }
    Ok(())
}

fn separate(a: SeparateArgs) -> Outcome {
    let model = load_model(&a.ckpt)?;
    for w in model.warnings() {
        eprintln!("warning: {w}");
    }
    let mix = wav_read(&a.input)?;
    let outputs = tastas_forward(&model, &mix.samples)?;
    let est = outputs.last().ok_or_else(|| anyhow!("model produced no stages"))?;
    std::fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    for (i, e) in est.iter().enumerate() {
        let p = a.out.join(format!("est{}.wav", i + 1));
        wav_write(&p, &Waveform::new(e.clone(), mix.sample_rate))?;
        println!("{}", p.display());
    }
    Ok(())
}

fn eval(a: EvalArgs) -> Outcome {
    let specs: Vec<(Option<String>, PathBuf)> = a
        .ckpt
        .iter()
        .map(|s| match s.split_once('=') {
            Some((l, p)) if !l.is_empty() && !Path::new(s).exists() => (Some(l.to_string()), PathBuf::from(p)),
            _ => (None, PathBuf::from(s)),
        })
        .collect();
    let records = read_manifest(&a.test)?;
    let models = specs
        .iter()
        .map(|(_, p)| load_model(p))
        .collect::<tastas::Result<Vec<_>>>()?;
    let systems: Vec<(String, _)> = specs
        .iter()
        .zip(&models)
        .map(|((label, _), m)| (label.clone().unwrap_or_else(|| m.label()), m))
        .collect();
    let idnet = a.idnet.as_ref().map(load_idnet).transpose()?;
    let report = evaluate(&systems, &records, idnet.as_ref(), !a.no_irm)?;
    print!("{}", report.table());
    if let Some(dir) = &a.out {
        for f in report.write(dir)? {
            eprintln!("wrote {}", f.display());
        }
    }
    for e in &report.errors {
        eprintln!("warning: {} [{}]: {}", e.utt_id, e.system, e.message);
    }
    Ok(())
}

fn grad_check(a: GradCheckArgs) -> Outcome {
    let model_tol = a.model_tol.unwrap_or(a.tol);
    if !(a.tol > 0.0) || !(model_tol > 0.0) || a.trials == 0 {
        return Err(usage("tolerances must be positive and --trials at least 1"));
    }
    let mut reports = grad_check_all(a.trials, a.tol, a.seed)?;
    reports.push(tiny_model_grad_check(model_tol, a.seed)?);
    let failed = reports.iter().filter(|r| !r.passed()).count();
    for r in &reports {
        println!("{r}");
    }
    println!("{} of {} checks passed", reports.len() - failed, reports.len());
    if failed > 0 {
        return Err(Failure::Runtime(anyhow!("{failed} gradient checks failed")));
    }
    Ok(())
}
