use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tastas::numerics::gradcheck::max_relative_error;
use tastas::numerics::{adam_step, AdamState, Bound, ParamSet, Tape, Tensor};
use tastas::sepnet::{
    decode, dual_path_block, encode, encoder_frames, estimate_masks, load_model, save_model, stage_forward,
    tastas_forward, tiny_model_grad_check, StageConfig, TasTasModel,
};

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn noise(len: usize, seed: u64) -> Vec<f64> {
    let mut r = rng(seed);
    (0..len).map(|_| r.gen_range(-0.5..0.5)).collect()
}

fn wave(tape: &mut Tape, x: &[f64]) -> tastas::numerics::Var {
    tape.constant(Tensor::from_vec(x.to_vec()))
}

#[test]
fn one_second_mixture_gives_999_frames() {
    assert_eq!(encoder_frames(8000, 16, 8).unwrap(), 999);
    let cfg = StageConfig::sized(4, 4, 4, 1);
    let model = TasTasModel::new(vec![cfg], false, 0).unwrap();
    let mut tape = Tape::new();
    let bound = tape.bind(model.params(), false);
    let x = wave(&mut tape, &noise(8000, 1));
    let rep = encode(&mut tape, &bound, "stage0", &cfg, &[x]).unwrap();
    assert_eq!(tape.value(rep).shape(), &[999, 4]);
    assert!(encoder_frames(15, 16, 8).is_err());
}

#[test]
fn second_stage_representation_is_three_wide() {
    let cfg = StageConfig::sized(5, 4, 3, 1);
    let model = TasTasModel::new(vec![cfg, cfg], false, 0).unwrap();
    let mut tape = Tape::new();
    let bound = tape.bind(model.params(), false);
    let waves: Vec<_> = (0..3).map(|i| wave(&mut tape, &noise(200, i))).collect();
    let rep = encode(&mut tape, &bound, "stage1", &cfg, &waves).unwrap();
    assert_eq!(tape.value(rep).shape()[1], 15);
}

#[test]
fn zero_waveform_encodes_to_zero() {
    let cfg = StageConfig::sized(6, 4, 3, 1);
    let model = TasTasModel::new(vec![cfg], false, 2).unwrap();
    let mut tape = Tape::new();
    let bound = tape.bind(model.params(), false);
    let x = wave(&mut tape, &[0.0; 100]);
    let rep = encode(&mut tape, &bound, "stage0", &cfg, &[x]).unwrap();
    assert!(tape.value(rep).data().iter().all(|&v| v == 0.0));
}

#[test]
fn masks_form_a_simplex() {
    for s in [2, 3] {
        let cfg = StageConfig {
            num_speakers: s,
            ..StageConfig::sized(6, 6, 4, 2)
        };
        let model = TasTasModel::new(vec![cfg], false, 4).unwrap();
        let mut tape = Tape::new();
        let bound = tape.bind(model.params(), false);
        let x = wave(&mut tape, &noise(300, 5));
        let rep = encode(&mut tape, &bound, "stage0", &cfg, &[x]).unwrap();
        let masks = estimate_masks(&mut tape, &bound, "stage0", &cfg, rep).unwrap();
        let m = tape.value(masks);
        let t = tape.value(rep).shape()[0];
        assert_eq!(m.shape(), &[t, s, 6]);
        for frame in m.data().chunks(s * 6) {
            for f in 0..6 {
                let sum: f64 = (0..s).map(|k| frame[k * 6 + f]).sum();
                assert!((sum - 1.0).abs() < 1e-9);
                assert!((0..s).all(|k| frame[k * 6 + f] > 0.0 && frame[k * 6 + f] < 1.0));
            }
        }
    }
}

#[test]
fn every_stage_returns_mixture_length_estimates() {
    let cfg = StageConfig::sized(4, 6, 3, 1);
    for len in [16, 17, 123, 400] {
        let model = TasTasModel::new(vec![cfg, cfg], false, 6).unwrap();
        let out = tastas_forward(&model, &noise(len, 7)).unwrap();
        assert_eq!(out.len(), 2);
        for stage in &out {
            assert_eq!(stage.len(), 2);
            assert!(stage.iter().all(|e| e.len() == len));
        }
    }
}

#[test]
fn later_stages_need_previous_estimates() {
    let cfg = StageConfig::sized(4, 6, 3, 1);
    let model = TasTasModel::new(vec![cfg, cfg], false, 6).unwrap();
    let mut tape = Tape::new();
    let bound = tape.bind(model.params(), false);
    let x = wave(&mut tape, &noise(100, 8));
    assert!(stage_forward(&mut tape, &bound, &model, 1, x, None).is_err());
    assert!(stage_forward(&mut tape, &bound, &model, 1, x, Some(&[x])).is_err());
    assert!(stage_forward(&mut tape, &bound, &model, 0, x, Some(&[x, x])).is_err());
    assert!(stage_forward(&mut tape, &bound, &model, 2, x, Some(&[x, x])).is_err());
}

#[test]
fn forward_is_bit_identical_across_runs() {
    let cfg = StageConfig::sized(4, 6, 3, 2);
    let a = TasTasModel::new(vec![cfg, cfg], true, 11).unwrap();
    let b = TasTasModel::new(vec![cfg, cfg], true, 11).unwrap();
    let x = noise(500, 12);
    assert_eq!(tastas_forward(&a, &x).unwrap(), tastas_forward(&b, &x).unwrap());
}

fn block_params(model: &TasTasModel, blocks: usize) -> Vec<(String, Tensor)> {
    model
        .params()
        .iter()
        .filter(|(n, _)| (0..blocks).any(|b| n.starts_with(&format!("stage0.block{b}."))))
        .map(|(n, t)| (n.to_string(), t.clone()))
        .collect()
}

#[test]
fn block_preserves_shape() {
    let cfg = StageConfig::sized(8, 6, 5, 1);
    let model = TasTasModel::new(vec![cfg], false, 0).unwrap();
    let mut tape = Tape::new();
    let bound = tape.bind(model.params(), false);
    let x = tape.constant(Tensor::uniform(vec![4, 6, 8], 1.0, &mut rng(1)));
    let y = dual_path_block(&mut tape, &bound, "stage0.block0", x).unwrap();
    assert_eq!(tape.value(y).shape(), &[4, 6, 8]);
    let flat = tape.constant(Tensor::zeros(vec![24, 8]));
    assert!(dual_path_block(&mut tape, &bound, "stage0.block0", flat).is_err());
}

#[test]
fn zero_weight_block_is_identity() {
    let cfg = StageConfig::sized(8, 6, 5, 1);
    let model = TasTasModel::new(vec![cfg], false, 0).unwrap();
    let mut zeroed = model.params().clone();
    for (name, t) in zeroed.iter_mut() {
        if name.contains(".block0.") {
            t.scale_in_place(0.0);
        }
    }
    let mut tape = Tape::new();
    let bound = tape.bind(&zeroed, false);
    let input = Tensor::uniform(vec![4, 6, 8], 1.0, &mut rng(2));
    let x = tape.constant(input.clone());
    let y = dual_path_block(&mut tape, &bound, "stage0.block0", x).unwrap();
    assert_eq!(tape.value(y), &input);
}

#[test]
fn two_block_stack_passes_finite_differences() {
    let cfg = StageConfig::sized(3, 4, 2, 2);
    let model = TasTasModel::new(vec![cfg], false, 3).unwrap();
    let params = block_params(&model, 2);
    let mut r = rng(4);
    let mut inputs = vec![Tensor::uniform(vec![3, 4, 3], 1.0, &mut r)];
    inputs.extend(params.iter().map(|(_, t)| {
        // Perturb constant initialisations so no gradient is structurally zero.
        let mut t = t.clone();
        for v in t.data_mut() {
            *v += r.gen_range(-0.3..0.3);
        }
        t
    }));
    let err = max_relative_error(&inputs, &mut r, |tape, vars| {
        let bound: Bound = params.iter().map(|(n, _)| n.clone()).zip(vars[1..].iter().copied()).collect();
        let h = dual_path_block(tape, &bound, "stage0.block0", vars[0])?;
        dual_path_block(tape, &bound, "stage0.block1", h)
    })
    .unwrap();
    assert!(err < 1e-4, "relative error {err:.3e}");
}

#[test]
fn tiny_model_passes_finite_differences() {
    let report = tiny_model_grad_check(1e-3, 0).unwrap();
    assert!(report.passed(), "{report}");
}

fn decode_with(
    params: &ParamSet,
    cfg: &StageConfig,
    x: &[f64],
    mask_value: f64,
) -> (Tape, tastas::numerics::Var, ParamSet) {
    let mut tape = Tape::new();
    let bound = tape.bind(params, true);
    let xv = wave(&mut tape, x);
    let rep = encode(&mut tape, &bound, "p", cfg, &[xv]).unwrap();
    let shape = tape.value(rep).shape().to_vec();
    let mask = tape.constant(Tensor::full(shape, mask_value));
    let y = decode(&mut tape, &bound, "p", cfg, rep, mask, x.len()).unwrap();
    (tape, y, params.clone())
}

#[test]
fn zero_mask_decodes_to_silence() {
    let cfg = StageConfig::sized(4, 4, 4, 1);
    let model = TasTasModel::new(vec![cfg], false, 0).unwrap();
    let mut p = ParamSet::default();
    for n in ["encoder.weight", "encoder.prelu", "decoder.weight"] {
        p.insert(format!("p.{n}"), model.params().get(&format!("stage0.{n}")).unwrap().clone())
            .unwrap();
    }
    let x = noise(200, 3);
    let (tape, y, _) = decode_with(&p, &cfg, &x, 0.0);
    assert_eq!(tape.value(y).numel(), 200);
    assert!(tape.value(y).data().iter().all(|&v| v == 0.0));
}

fn rel_err(x: &[f64], y: &[f64]) -> f64 {
    let e: f64 = x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum();
    let n: f64 = x.iter().map(|a| a * a).sum();
    (e / n).sqrt()
}

/// Encoder filters are `+e_l` and `-e_l`, so PReLU keeps both signs; the
/// decoder undoes the PReLU gain and the two-fold frame overlap.
#[test]
fn pseudo_inverse_autoencoder_reconstructs() {
    let l = 16;
    let cfg = StageConfig {
        num_filters: 2 * l,
        ..StageConfig::sized(2 * l, 4, 4, 1)
    };
    let slope: f64 = 0.25;
    let mut enc = Tensor::zeros(vec![2 * l, 1, l]);
    let mut dec = Tensor::zeros(vec![l, 2 * l]);
    for i in 0..l {
        enc.data_mut()[i * l + i] = 1.0;
        enc.data_mut()[(l + i) * l + i] = -1.0;
        dec.data_mut()[i * 2 * l + i] = 0.5 / (1.0 + slope);
        dec.data_mut()[i * 2 * l + l + i] = -0.5 / (1.0 + slope);
    }
    let mut params = ParamSet::default();
    params.insert("p.encoder.weight", enc).unwrap();
    params.insert("p.encoder.prelu", Tensor::from_vec(vec![slope])).unwrap();
    params.insert("p.decoder.weight", dec).unwrap();

    let x = noise(4000, 9);
    let (tape, y, _) = decode_with(&params, &cfg, &x, 1.0);
    let initial = rel_err(&x, tape.value(y).data());
    assert!(initial < 0.05, "initial reconstruction error {initial:.4}");

    // A short fit of the reconstruction error must not degrade it.
    let mut state = AdamState::new(&params);
    let mut last = initial;
    for _ in 0..20 {
        let (tape, y, _) = decode_with(&params, &cfg, &x, 1.0);
        let out = tape.value(y).data();
        last = rel_err(&x, out);
        let seed: Vec<f64> = out.iter().zip(&x).map(|(a, b)| 2.0 * (a - b) / x.len() as f64).collect();
        let grads = tape.backward(&[(y, Tensor::from_vec(seed))]).unwrap();
        adam_step(&mut params, grads.params(), &mut state, 1e-4).unwrap();
    }
    assert!(last < 0.05 && last <= initial * 1.01, "after fit {last:.4} vs {initial:.4}");
}

#[test]
fn checkpoint_round_trip_reproduces_forward_at_single_precision() {
    let cfg = StageConfig::sized(4, 6, 3, 1);
    let model = TasTasModel::new(vec![cfg, cfg], true, 21).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.tts");
    save_model(&path, &model).unwrap();
    let back = load_model(&path).unwrap();
    let x = noise(300, 22);
    let a = tastas_forward(&model, &x).unwrap();
    let b = tastas_forward(&back, &x).unwrap();
    for (u, v) in a.iter().flatten().flatten().zip(b.iter().flatten().flatten()) {
        assert!((u - v).abs() < 1e-4);
    }
    let mut bytes = std::fs::read(&path).unwrap();
    let mid = bytes.len() / 2;
    bytes[mid] ^= 0x40;
    std::fs::write(&path, &bytes).unwrap();
    assert!(load_model(&path).unwrap_err().to_string().contains("checksum"));
}
