use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tastas::idnet::{idnet_forward, train_idnet, FrozenIdNet, IdNetConfig, IdTrainOptions, LabeledUtterance};
use tastas::numerics::gradcheck::{max_relative_error, relative_error, FD_STEP};
use tastas::numerics::{OpKind, Tape, Tensor};
use tastas::signal::{synth_speaker_source, StftConfig};

fn noise(len: usize, seed: u64) -> Vec<f64> {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    (0..len).map(|_| r.gen_range(-0.5..0.5)).collect()
}

fn untrained(cfg: IdNetConfig, seed: u64) -> FrozenIdNet {
    let labels = (0..cfg.num_speakers).map(|i| format!("s{i}")).collect();
    let params = cfg.init_params(seed).unwrap();
    FrozenIdNet::new(cfg, params, labels).unwrap()
}

fn small_config() -> IdNetConfig {
    IdNetConfig {
        segment_s: 0.02,
        stft: StftConfig::new(64, 16).unwrap(),
        channels: vec![3, 3],
        embedding_dim: 5,
        num_speakers: 3,
        ..IdNetConfig::default()
    }
}

#[test]
fn waveform_gradient_of_small_net_passes_finite_differences() {
    let net = untrained(small_config(), 1);
    let x = Tensor::from_vec(noise(net.config().segment_len(), 2));
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let err = max_relative_error(&[x], &mut rng, |tape, vars| net.embed_on_tape(tape, vars[0])).unwrap();
    assert!(err < 1e-3, "relative error {err:.3e}");
}

#[test]
fn waveform_gradient_of_default_net_passes_on_sampled_positions() {
    let cfg = IdNetConfig {
        num_speakers: 8,
        ..IdNetConfig::default()
    };
    let net = untrained(cfg, 4);
    let x = noise(net.config().segment_len(), 5);
    let proj = noise(net.config().embedding_dim, 6);
    let objective = |x: &[f64]| -> f64 {
        let e = net.embed_utterance(x).unwrap();
        e.iter().zip(&proj).map(|(a, b)| a * b).sum()
    };
    let mut tape = Tape::new();
    let xv = tape.input(Tensor::from_vec(x.clone()));
    let e = net.embed_on_tape(&mut tape, xv).unwrap();
    let grads = tape.backward(&[(e, Tensor::from_vec(proj.clone()))]).unwrap();
    let analytic = grads.get(xv).unwrap().data().to_vec();
    assert!(grads.params().is_empty(), "frozen parameters must not receive gradients");
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut worst = 0.0f64;
    for _ in 0..40 {
        let j = rng.gen_range(0..x.len());
        let mut p = x.clone();
        p[j] += FD_STEP;
        let mut m = x.clone();
        m[j] -= FD_STEP;
        let numeric = (objective(&p) - objective(&m)) / (2.0 * FD_STEP);
        worst = worst.max(relative_error(analytic[j], numeric));
    }
    assert!(worst < 1e-3, "relative error {worst:.3e}");
}

#[test]
fn embeddings_are_deterministic_and_mean_aggregated() {
    let net = untrained(small_config(), 8);
    let seg = net.config().segment_len();
    let a = noise(seg, 9);
    let (_, e1) = net.forward(&a).unwrap();
    let (_, e2) = net.forward(&a.clone()).unwrap();
    assert_eq!(e1, e2);
    assert_eq!(net.embed_utterance(&a).unwrap(), e1);
    let twice: Vec<f64> = a.iter().chain(&a).copied().collect();
    assert_eq!(net.embed_utterance(&twice).unwrap(), e1);

    // A partial tail is zero-padded and averaged in.
    let b = noise(seg / 2, 10);
    let joined: Vec<f64> = a.iter().chain(&b).copied().collect();
    let (_, eb) = net.forward(&b).unwrap();
    let mean: Vec<f64> = e1.iter().zip(&eb).map(|(x, y)| (x + y) / 2.0).collect();
    for (u, v) in net.embed_utterance(&joined).unwrap().iter().zip(&mean) {
        assert!((u - v).abs() < 1e-12);
    }
    let (logits, _) = idnet_forward(net.config(), net.params(), &a).unwrap();
    assert_eq!(logits.len(), 3);
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

#[test]
fn trained_embeddings_cluster_by_speaker() {
    let speakers = 4;
    let mut corpus = Vec::new();
    for spk in 0..speakers {
        for u in 0..4 {
            let wave = synth_speaker_source(spk, 6.0, (spk * 31 + u) as u64, 8000).unwrap();
            corpus.push(LabeledUtterance {
                speaker: format!("toy{spk}"),
                wave,
            });
        }
    }
    let cfg = IdNetConfig::default();
    let opts = IdTrainOptions {
        epochs_max: 10,
        batch_size: 8,
        ..IdTrainOptions::default()
    };
    let trained = train_idnet(&corpus, &cfg, &opts).unwrap();
    let net = trained.net;
    assert_eq!(net.labels(), &["toy0", "toy1", "toy2", "toy3"]);
    assert!(trained.heldout_accuracy > 0.9, "{:?}", trained.history);

    // Fresh utterances never seen in training.
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let embed = |spk: usize, seed: u64| {
        let w = synth_speaker_source(spk, 1.0, 10_000 + seed, 8000).unwrap();
        net.embed_utterance(&w.samples).unwrap()
    };
    let (mut same, mut cross) = (0.0, 0.0);
    for t in 0..100u64 {
        let a = rng.gen_range(0..speakers);
        let b = (a + rng.gen_range(1..speakers)) % speakers;
        let anchor = embed(a, 3 * t);
        same += sq_dist(&anchor, &embed(a, 3 * t + 1));
        cross += sq_dist(&anchor, &embed(b, 3 * t + 2));
    }
    assert!(same < cross, "same-speaker {same:.3} vs cross-speaker {cross:.3}");
}

#[test]
fn embedding_path_feeds_gradients_only_to_the_waveform() {
    let net = untrained(small_config(), 12);
    let before = net.checksum();
    let mut tape = Tape::new();
    let x = tape.input(Tensor::from_vec(noise(500, 13)));
    let e = net.embed_on_tape(&mut tape, x).unwrap();
    let s = tape.apply(OpKind::Sum, &[e]).unwrap();
    let g = tape.backward(&[(s, Tensor::scalar(1.0))]).unwrap();
    assert!(g.get(x).unwrap().max_abs() > 0.0);
    assert!(g.params().is_empty());
    assert_eq!(net.checksum(), before);
}
