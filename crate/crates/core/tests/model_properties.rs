mod common;

use common::{rel_diff, synth_recordings, widen};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sleepfuse::masking::{collate, ModalityMask};
use sleepfuse::model::{
    init_params, random_recording, sequence_mixer, ForwardCtx, KindSet, Model, ModelConfig, ModelInput, SignalKind,
};
use sleepfuse::{Tape, Tensor};

fn random_vec(rng: &mut impl Rng, n: usize) -> Vec<f32> {
    (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

fn random_subset(rng: &mut impl Rng) -> KindSet {
    loop {
        let s = KindSet::from_bits(rng.gen_range(1..16));
        if !s.is_empty() {
            return s;
        }
    }
}

#[test]
fn encoder_output_is_t_by_feature_dim_for_both_rates() {
    // Full channel lists on a short sequence; the per-epoch arithmetic is independent of T.
    let config = ModelConfig {
        epochs: 200,
        ..ModelConfig::default()
    };
    let model: Model = Model::new(config.clone(), 1).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for kind in SignalKind::ALL {
        let z = model
            .encode_signal(kind, &random_vec(&mut rng, config.signal_len(kind)))
            .unwrap();
        assert_eq!(z.shape(), [200, 128], "{kind}");
        let dense = model.params.get(&format!("encoder.{kind}.dense.weights")).unwrap();
        assert_eq!(dense.shape(), [512, 128], "{kind}");
    }
    let short = random_vec(&mut rng, config.signal_len(SignalKind::Ecg) - 1);
    assert!(model.encode_signal(SignalKind::Ecg, &short).is_err());
}

#[test]
fn respiratory_encoder_at_full_length() {
    let model: Model = Model::new(ModelConfig::default(), 2).unwrap();
    let x = random_vec(&mut ChaCha8Rng::seed_from_u64(1), 256 * 1200);
    assert_eq!(model.encode_signal(SignalKind::Thx, &x).unwrap().shape(), [1200, 128]);
}

/// Epochs whose input row receives a non-zero gradient from the logits at `t0`.
fn influence(config: &ModelConfig, t0: usize) -> Vec<bool> {
    let (t, d, c) = (config.epochs, config.feature_dim, config.classes);
    let params = init_params::<f64>(config, 5).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let z = Tensor::new(vec![1, t, d], (0..t * d).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
    let mut tape = Tape::new();
    let p = params.bind(&mut tape);
    let x = tape.leaf(&z.with_requires_grad(true));
    let y = sequence_mixer::mix(&mut tape, &p, config, &mut ForwardCtx::eval(), x).unwrap();
    let mut pick = vec![0.0; t * c];
    pick[t0 * c..(t0 + 1) * c].fill(1.0);
    let pick = tape.constant(Tensor::new(vec![1, t, c], pick).unwrap());
    let picked = tape.mul(y, pick).unwrap();
    let total = tape.sum(picked);
    tape.backward(total).unwrap();
    tape.grad(x)
        .unwrap()
        .chunks(d)
        .map(|row| row.iter().any(|&g| g != 0.0))
        .collect()
}

#[test]
fn sequence_mixer_radius_is_exactly_378() {
    let config = ModelConfig::default();
    assert_eq!(config.sequence_radius(), 378);
    let t0 = 600;
    let reached = influence(&config, t0);
    for (t, &r) in reached.iter().enumerate() {
        assert_eq!(r, t.abs_diff(t0) <= 378, "epoch {t}");
    }
}

#[test]
fn constant_features_give_constant_interior_logits() {
    let config = ModelConfig::default();
    let model: Model = Model::new(config.clone(), 3).unwrap();
    let row = random_vec(&mut ChaCha8Rng::seed_from_u64(2), 128);
    let z = Tensor::new(vec![1200, 128], row.repeat(1200)).unwrap();
    let logits = model.mix_sequence(&z).unwrap();
    assert_eq!(logits.shape(), [1200, 4]);
    let reference = widen(&logits.values()[600 * 4..601 * 4]);
    for t in 378..1200 - 378 {
        let got = widen(&logits.values()[t * 4..(t + 1) * 4]);
        assert!(rel_diff(&got, &reference) <= 1e-5, "epoch {t}");
    }
}

#[test]
fn epoch_mixer_ignores_token_order() {
    let model: Model = Model::new(ModelConfig::default(), 4).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for trial in 0..100 {
        let mut features: Vec<(SignalKind, Vec<f32>)> = random_subset(&mut rng)
            .iter()
            .map(|k| (k, random_vec(&mut rng, 128)))
            .collect();
        let reference = widen(&model.mix_epoch(&features, None).unwrap());
        features.shuffle(&mut rng);
        let shuffled = widen(&model.mix_epoch(&features, None).unwrap());
        assert!(rel_diff(&shuffled, &reference) <= 1e-5, "trial {trial}");
    }
}

#[test]
fn masked_tokens_equal_deleted_tokens() {
    let model: Model = Model::new(ModelConfig::default(), 5).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for trial in 0..50 {
        let present = random_subset(&mut rng);
        let keep = loop {
            let k = KindSet::from_bits(rng.gen_range(1..16) & present.bits());
            if !k.is_empty() {
                break k;
            }
        };
        let mut features: Vec<(SignalKind, Vec<f32>)> =
            present.iter().map(|k| (k, random_vec(&mut rng, 128))).collect();
        features.shuffle(&mut rng);
        let masked = widen(&model.mix_epoch(&features, Some(keep)).unwrap());
        features.retain(|(k, _)| keep.contains(*k));
        let deleted = widen(&model.mix_epoch(&features, None).unwrap());
        assert!(
            rel_diff(&masked, &deleted) <= 1e-5,
            "trial {trial}: {present} keep {keep}"
        );
    }
    assert!(model.mix_epoch(&[], None).is_err());
}

#[test]
fn heterogeneous_batch_matches_single_recordings_and_ignores_dropped_channels() {
    let config = ModelConfig::gradcheck_tiny();
    let model: Model = Model::new(config.clone(), 6).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for trial in 0..50u64 {
        let b: usize = rng.gen_range(1..5);
        let recs: Vec<_> = (0..b)
            .map(|i| random_recording(&config, random_subset(&mut rng), trial * 10 + i as u64))
            .collect();
        let masks: Vec<_> = recs
            .iter()
            .map(|r| {
                let kept = loop {
                    let k = KindSet::from_bits(rng.gen_range(1..16) & r.kinds().bits());
                    if !k.is_empty() {
                        break k;
                    }
                };
                ModalityMask::new(r.kinds(), kept).unwrap()
            })
            .collect();
        let mut batch = collate(&recs, &masks).unwrap();
        let logits = model.logits(&batch.model_input(&config).unwrap()).unwrap();

        let row_len = config.epochs * config.classes;
        for (i, rec) in recs.iter().enumerate() {
            let single = model
                .logits(&ModelInput::single(rec, masks[i].kept()).unwrap())
                .unwrap();
            let got = widen(&logits.values()[i * row_len..(i + 1) * row_len]);
            assert!(rel_diff(&got, &widen(single.values())) <= 1e-5, "trial {trial} row {i}");
        }

        for kind in SignalKind::ALL {
            let width = config.signal_len(kind);
            let dropped: Vec<usize> = (0..b).filter(|&i| !masks[i].kept().contains(kind)).collect();
            let samples = batch.samples_mut(kind);
            if samples.values().is_empty() {
                continue;
            }
            for i in dropped {
                for v in &mut samples.values_mut()[i * width..(i + 1) * width] {
                    *v = rng.gen_range(-1e3..1e3);
                }
            }
        }
        let rewritten = model.logits(&batch.model_input(&config).unwrap()).unwrap();
        assert_eq!(rewritten.values(), logits.values(), "trial {trial}");
    }
}

#[test]
fn prediction_depends_only_on_requested_kinds() {
    let config = ModelConfig::gradcheck_tiny();
    let model: Model = Model::new(config.clone(), 7).unwrap();
    let mut rec = synth_recordings(&config, 1, 40).remove(0);
    let subset = KindSet::parse_list("ECG,THX").unwrap();
    let first = model.predict(&rec, subset).unwrap();
    for row in first.probabilities.values().chunks(4) {
        assert!((row.iter().map(|&p| p as f64).sum::<f64>() - 1.0).abs() <= 1e-6);
    }
    for v in rec.signal_mut(SignalKind::Ppg).unwrap() {
        *v = -*v * 3.0 + 1.0;
    }
    let second = model.predict(&rec, subset).unwrap();
    assert_eq!(first.probabilities.values(), second.probabilities.values());
    assert_eq!(first.stages, second.stages);

    rec.retain(subset);
    let err = model.predict(&rec, KindSet::parse_list("PPG").unwrap()).unwrap_err();
    assert!(err.to_string().contains("available: ECG,THX"), "{err}");
}
