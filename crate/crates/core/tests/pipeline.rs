use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use proptest::prelude::*;
use tastas::idnet::{load_idnet, IdNetConfig};
use tastas::numerics::par;
use tastas::objectives::multi_stage_loss;
use tastas::pipeline::*;
use tastas::sepnet::{load_model, tastas_forward, StageConfig, TasTasModel};
use tastas::signal::{read_manifest, wav_read, StftConfig};

fn tiny_stage() -> StageConfig {
    StageConfig::sized(8, 10, 8, 1)
}

fn tiny_config(out: &Path, corpus: &CorpusSummary) -> TrainConfig {
    TrainConfig {
        epochs_max: 3,
        stages: vec![1, 1],
        stage: tiny_stage(),
        train_manifest: Some(corpus.manifests[0].clone()),
        dev_manifest: Some(corpus.manifests[1].clone()),
        test_manifest: Some(corpus.manifests[2].clone()),
        out_dir: out.to_path_buf(),
        seed: 3,
        ..TrainConfig::default()
    }
}

fn small_corpus(dir: &Path, counts: [usize; 3], seed: u64) -> CorpusSummary {
    let opts = SynthOptions {
        speakers: 4,
        dur_s: 0.5,
        seed,
        counts: Some(counts),
        ..SynthOptions::default()
    };
    synth_corpus(&opts, dir).unwrap()
}

fn tiny_state(cfg: &TrainConfig) -> TrainState {
    TrainState::new(TasTasModel::new(cfg.stage_configs(), false, cfg.seed).unwrap(), cfg)
}

#[test]
fn learning_rate_trajectory_with_restarts() {
    let cfg = TrainConfig {
        stages: vec![1],
        stage: tiny_stage(),
        epochs_max: 100,
        ..TrainConfig::default()
    };
    let policy = cfg.lr_policy();
    let mut state = tiny_state(&cfg);
    let mut lrs = Vec::new();
    let mut actions = Vec::new();
    // Five improving epochs, then two bad ones per restart until the budget is spent.
    let losses = [10.0, 9.0, 8.0, 7.0, 6.0, 7.0, 7.0, 6.5, 6.5, 6.1, 6.2, 6.3, 6.4];
    for &l in &losses {
        lrs.push(state.current_lr(&policy));
        actions.push(state.finish_epoch(l, cfg.epochs_max));
        if state.finished {
            break;
        }
    }
    let expected = [
        0.001,
        0.001,
        0.001 * 0.98,
        0.001 * 0.98,
        0.001 * 0.98 * 0.98,
        0.001 * 0.98 * 0.98,
        0.001 * 0.98 * 0.98 * 0.98,
        0.0005,
        0.0005,
        0.00025,
        0.00025,
        0.000125,
        0.000125,
    ];
    assert_eq!(lrs.len(), expected.len());
    for (i, (got, want)) in lrs.iter().zip(expected).enumerate() {
        assert!((got - want).abs() <= 1e-15 * want, "epoch {i}: lr {got} vs {want}");
    }
    assert_eq!(actions[6], Action::Restart);
    assert_eq!(actions[8], Action::Restart);
    assert_eq!(actions[10], Action::Restart);
    assert_eq!(actions[12], Action::Stop);
    assert!(state.finished);
    assert_eq!(state.controller.restarts(), 3);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn restarts_restore_the_best_parameters(losses in prop::collection::vec(0.0f64..10.0, 1..40)) {
        let cfg = TrainConfig {
            stages: vec![1],
            stage: tiny_stage(),
            epochs_max: 1000,
            ..TrainConfig::default()
        };
        let mut state = tiny_state(&cfg);
        let name = state.model.params().iter().next().unwrap().0.to_string();
        let mut best = f64::INFINITY;
        for (epoch, &loss) in losses.iter().enumerate() {
            // Tag the parameters with the epoch that produced them.
            let mut p = state.model.params().clone();
            p.get_mut(&name).unwrap().data_mut()[0] = epoch as f64;
            state.model.set_params(p).unwrap();
            let action = state.finish_epoch(loss, cfg.epochs_max);
            if loss < best {
                best = loss;
            }
            if action == Action::Restart {
                let tag = state.model.params().get(&name).unwrap().data()[0] as usize;
                prop_assert_eq!(losses[tag], best);
                prop_assert!(losses[..=epoch].iter().all(|&l| l >= losses[tag]));
            }
            if state.finished {
                break;
            }
        }
    }

    #[test]
    fn config_text_round_trips(
        epochs in 1usize..500,
        batch in 1usize..=3,
        lr in 1e-5f64..1e-1,
        weight in 0.0f64..5.0,
        seed in any::<u64>(),
        stages in prop::collection::vec(1usize..10, 1..4),
        id in any::<bool>(),
    ) {
        let cfg = TrainConfig {
            epochs_max: epochs,
            batch_size: batch,
            initial_lr: lr,
            id_weight: weight,
            seed,
            stages,
            use_id_loss: id,
            dev_manifest: Some("corpus/dev.tsv".into()),
            ..TrainConfig::default()
        };
        prop_assert_eq!(TrainConfig::parse(&cfg.to_text()).unwrap(), cfg);
    }
}

#[test]
fn training_loss_matches_objective_module() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = small_corpus(dir.path(), [2, 1, 1], 5);
    let ex = load_examples(&corpus.manifests[0]).unwrap();
    let model = TasTasModel::new(vec![tiny_stage(); 2], false, 9).unwrap();
    for e in &ex {
        let (train, _) = example_gradient(&model, e, None).unwrap();
        let reference = multi_stage_loss(&tastas_forward(&model, &e.mixture).unwrap(), &e.sources).unwrap();
        assert_eq!(train.total, reference.total);
        assert_eq!(train.per_stage_neg_si_sdr, reference.per_stage_neg_si_sdr);
        let (metrics, _) = example_metrics(&model, e, None).unwrap();
        assert_eq!(metrics.total, reference.total);
    }
}

#[test]
fn resume_is_bit_exact() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = small_corpus(&dir.path().join("data"), [4, 2, 1], 11);
    let train = load_examples(&corpus.manifests[0]).unwrap();
    let dev = load_examples(&corpus.manifests[1]).unwrap();
    let cfg = TrainConfig {
        epochs_max: 4,
        batch_size: 2,
        ..tiny_config(dir.path(), &corpus)
    };
    par::install(1, || {
        let mut straight = SepTrainer::new(&cfg, tiny_state(&cfg), &train, &dev, None).unwrap();
        straight.run(|_, _| Ok(())).unwrap();
        let straight = straight.into_state();

        let mut first = SepTrainer::new(&cfg, tiny_state(&cfg), &train, &dev, None).unwrap();
        first.run_epoch().unwrap();
        first.run_epoch().unwrap();
        let path = dir.path().join("state.ckpt");
        first.state.save(&path).unwrap();
        drop(first);
        let mut resumed = SepTrainer::new(&cfg, TrainState::load(&path).unwrap(), &train, &dev, None).unwrap();
        resumed.run(|_, _| Ok(())).unwrap();
        let resumed = resumed.into_state();

        assert_eq!(straight.history.len(), 4);
        for (a, b) in straight.history.iter().zip(&resumed.history) {
            assert_eq!(a.train_loss.to_bits(), b.train_loss.to_bits());
            assert_eq!(a.dev_loss.to_bits(), b.dev_loss.to_bits());
            assert_eq!(a.lr.to_bits(), b.lr.to_bits());
        }
        assert_eq!(straight.model.params().checksum(), resumed.model.params().checksum());
        assert_eq!(straight, resumed);
    });
}

#[test]
fn thread_count_does_not_change_training() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = small_corpus(dir.path(), [3, 1, 1], 2);
    let train = load_examples(&corpus.manifests[0]).unwrap();
    let dev = load_examples(&corpus.manifests[1]).unwrap();
    let cfg = TrainConfig {
        epochs_max: 2,
        batch_size: 3,
        ..tiny_config(dir.path(), &corpus)
    };
    let run = |threads| {
        par::install(threads, || {
            let mut t = SepTrainer::new(&cfg, tiny_state(&cfg), &train, &dev, None).unwrap();
            t.run(|_, _| Ok(())).unwrap();
            t.into_state()
        })
    };
    assert_eq!(run(1), run(4));
}

#[test]
fn prerequisites_are_checked_before_training() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = small_corpus(&dir.path().join("data"), [2, 1, 1], 1);
    let out = dir.path().join("run");
    let mut cfg = TrainConfig {
        phase: Phase::Finetune,
        ..tiny_config(&out, &corpus)
    };
    let err = run_phase(&cfg).unwrap_err().to_string();
    assert!(err.contains("idnet_checkpoint"), "{err}");
    cfg.idnet_checkpoint = Some(dir.path().join("missing.ckpt"));
    cfg.init_checkpoint = Some(dir.path().join("missing_model.ckpt"));
    assert!(run_phase(&cfg).is_err());
    assert!(!out.join(STATE_CHECKPOINT).exists());

    cfg.phase = Phase::Sep;
    cfg.dev_manifest = None;
    assert!(run_phase(&cfg).unwrap_err().to_string().contains("dev_manifest"));
}

#[test]
fn phases_write_artifacts_and_finetune_keeps_idnet_frozen() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = small_corpus(&dir.path().join("data"), [8, 2, 2], 21);
    let base = tiny_config(&dir.path().join("sep"), &corpus);

    let mut id_cfg = TrainConfig {
        phase: Phase::IdNet,
        out_dir: dir.path().join("id"),
        idnet: IdNetConfig {
            segment_s: 0.05,
            stft: StftConfig::new(64, 16).unwrap(),
            channels: vec![4, 4],
            embedding_dim: 8,
            ..IdNetConfig::default()
        },
        ..base.clone()
    };
    id_cfg.idnet_train.epochs_max = 2;
    id_cfg.idnet_train.min_segments_per_speaker = 4;
    let id = run_phase(&id_cfg).unwrap();
    assert!(id.heldout_accuracy.is_some());
    let idnet_path = id_cfg.out_dir.join(IDNET_CHECKPOINT);
    let report = fs::read_to_string(id_cfg.out_dir.join(IDNET_REPORT)).unwrap();
    assert_eq!(report.lines().next().unwrap(), IDNET_HEADER);
    assert!(id_cfg.out_dir.join(LABELS_FILE).is_file());

    let sep = run_phase(&base).unwrap();
    assert_eq!(sep.epochs, 3);
    let report = fs::read_to_string(base.out_dir.join(EPOCH_REPORT)).unwrap();
    let lines: Vec<&str> = report.lines().collect();
    assert_eq!(lines[0], EPOCH_HEADER);
    assert_eq!(lines.len(), 4);
    assert!(lines[1..].iter().all(|l| l.split('\t').count() == 6));
    let sep_model = base.out_dir.join(MODEL_CHECKPOINT);
    assert!(!load_model(&sep_model).unwrap().use_id_loss());

    let idnet_bytes = fs::read(&idnet_path).unwrap();
    let ft_cfg = TrainConfig {
        phase: Phase::Finetune,
        epochs_max: 2,
        init_checkpoint: Some(sep_model),
        idnet_checkpoint: Some(idnet_path.clone()),
        out_dir: dir.path().join("ft"),
        ..base.clone()
    };
    let ft = run_phase(&ft_cfg).unwrap();
    let (before, after) = ft.idnet_checksums.unwrap();
    assert_eq!(before, after);
    assert_eq!(before, load_idnet(&idnet_path).unwrap().checksum());
    assert_eq!(fs::read(&idnet_path).unwrap(), idnet_bytes);
    assert!(load_model(ft_cfg.out_dir.join(MODEL_CHECKPOINT)).unwrap().use_id_loss());

    // Resuming a finished run changes nothing.
    let again = TrainConfig {
        resume: Some(ft_cfg.out_dir.join(STATE_CHECKPOINT)),
        ..ft_cfg.clone()
    };
    let before_state = fs::read(ft_cfg.out_dir.join(STATE_CHECKPOINT)).unwrap();
    run_phase(&again).unwrap();
    assert_eq!(fs::read(ft_cfg.out_dir.join(STATE_CHECKPOINT)).unwrap(), before_state);
}

#[test]
fn evaluation_is_deterministic_and_reports_oracle() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = small_corpus(dir.path(), [1, 1, 3], 8);
    let mut records = read_manifest(&corpus.manifests[2]).unwrap();
    let model = TasTasModel::new(vec![tiny_stage()], false, 1).unwrap();
    let systems = vec![("TasTas(1)".to_string(), &model)];
    let a = evaluate(&systems, &records, None, true).unwrap();
    let b = par::install(3, || evaluate(&systems, &records, None, true).unwrap());
    assert_eq!(a.table(), b.table());
    assert_eq!(a.table().lines().next().unwrap(), EVAL_HEADER);
    let irm = a.row(IRM_SYSTEM).unwrap();
    assert_eq!(irm.utterances, 3);
    assert!(irm.mean_si_sdri > 0.0);
    assert!(a.table().contains("unsupported"));

    let files = a.write(dir.path().join("eval")).unwrap();
    assert!(files.iter().all(|f| f.is_file()));

    // A broken record becomes an error entry and the others are still scored.
    records[1].sources[0] = dir.path().join("nowhere.wav");
    let c = evaluate(&systems, &records, None, true).unwrap();
    assert_eq!(c.errors.len(), 1);
    assert_eq!(c.row("TasTas(1)").unwrap().utterances, 2);
}

#[test]
fn corpus_properties() {
    let dir = tempfile::tempdir().unwrap();
    let a = small_corpus(&dir.path().join("a"), [6, 3, 3], 4);
    let b = small_corpus(&dir.path().join("b"), [6, 3, 3], 4);
    let mut seen: Vec<BTreeSet<Vec<i64>>> = Vec::new();
    for k in 0..3 {
        let ra = read_manifest(&a.manifests[k]).unwrap();
        let rb = read_manifest(&b.manifests[k]).unwrap();
        assert_eq!(ra.len(), [6, 3, 3][k]);
        let mut split = BTreeSet::new();
        for (x, y) in ra.iter().zip(&rb) {
            assert_ne!(x.speakers[0], x.speakers[1]);
            assert!((0.0..=5.0).contains(&x.snr_db));
            for (p, q) in [(&x.mix, &y.mix), (&x.sources[0], &y.sources[0]), (&x.sources[1], &y.sources[1])] {
                assert_eq!(fs::read(p).unwrap(), fs::read(q).unwrap(), "same seed, same bytes");
            }
            let mix = wav_read(&x.mix).unwrap();
            let s1 = wav_read(&x.sources[0]).unwrap();
            let s2 = wav_read(&x.sources[1]).unwrap();
            let q = 1.0 / 32768.0;
            for i in 0..mix.len() {
                assert!((mix.samples[i] - s1.samples[i] - s2.samples[i]).abs() <= 1.5 * q);
            }
            let p = |w: &[f64]| w.iter().map(|v| v * v).sum::<f64>();
            let snr = 10.0 * (p(&s1.samples) / p(&s2.samples)).log10();
            assert!((snr - x.snr_db).abs() < 0.05, "measured {snr} vs {}", x.snr_db);
            assert!((-0.05..=5.05).contains(&snr));
            for s in [&s1, &s2] {
                split.insert(s.samples.iter().map(|v| (v * 32768.0).round() as i64).collect::<Vec<_>>());
            }
        }
        seen.push(split);
    }
    for i in 0..3 {
        for j in i + 1..3 {
            assert!(seen[i].is_disjoint(&seen[j]), "splits {i} and {j} share an utterance");
        }
    }
}

#[test]
fn corpus_from_wav_folders() {
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("speakers");
    for (i, name) in ["alice", "bob", "carol"].iter().enumerate() {
        let d = src.join(name);
        fs::create_dir_all(&d).unwrap();
        let w = tastas::signal::synth_speaker_source(i, 2.0, 40 + i as u64, 8000).unwrap();
        tastas::signal::wav_write(d.join("take1.wav"), &w).unwrap();
    }
    let opts = SynthOptions {
        dur_s: 0.1,
        ..SynthOptions::default()
    };
    let summary = corpus_from_wavs(&src, &opts, dir.path().join("out")).unwrap();
    assert!(summary.counts.iter().all(|&c| c > 0), "{:?}", summary.counts);
    for m in &summary.manifests {
        for r in read_manifest(m).unwrap() {
            assert_ne!(r.speakers[0], r.speakers[1]);
            assert_eq!(wav_read(&r.mix).unwrap().len(), 800);
        }
    }
    let lone = dir.path().join("lone");
    fs::create_dir_all(lone.join("x")).unwrap();
    assert!(corpus_from_wavs(&lone, &opts, dir.path().join("o2")).is_err());
}

#[test]
fn untrained_and_trained_rows_differ_in_the_right_direction() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = small_corpus(&dir.path().join("data"), [2, 2, 1], 13);
    let cfg = TrainConfig {
        epochs_max: 40,
        initial_lr: 0.005,
        stages: vec![1],
        dev_manifest: Some(corpus.manifests[0].clone()),
        ..tiny_config(&dir.path().join("run"), &corpus)
    };
    run_phase(&cfg).unwrap();
    let trained = load_model(cfg.out_dir.join(MODEL_CHECKPOINT)).unwrap();
    let untrained = TasTasModel::new(cfg.stage_configs(), false, cfg.seed).unwrap();
    let records = read_manifest(&corpus.manifests[0]).unwrap();
    let report = evaluate(
        &[("trained".into(), &trained), ("untrained".into(), &untrained)],
        &records,
        None,
        false,
    )
    .unwrap();
    let t = report.row("trained").unwrap().mean_si_sdri;
    let u = report.row("untrained").unwrap().mean_si_sdri;
    assert!(t > u, "trained {t} vs untrained {u}");
}
