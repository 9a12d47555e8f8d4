mod common;

use common::{golden, small_data, small_model};
use expertflow::event_codec::{decode_events, encode_events, format_number, HeadKind, NumberKind, TokenStream};
use expertflow::model::{load_checkpoint, run_stage, save_checkpoint, Model, ModelConfig, ParamGroup, SeqInput, TrainConfig, TrainContext};
use expertflow::numerics::Matrix;
use expertflow::synthdata::{gen_sample, train_split, SyntheticSample, TaskKind};
use expertflow::Error;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::json;

fn sample(kind: TaskKind, seed: u64) -> SyntheticSample {
    gen_sample(&small_data(), kind, seed).unwrap()
}

fn values_by_group(m: &Model) -> Vec<(String, ParamGroup, Matrix)> {
    m.params().into_iter().map(|(n, g, p)| (n, g, p.value.clone())).collect()
}

fn trained_to_stage(stage: u8, steps: usize) -> Model {
    let data = train_split(&small_data()).unwrap();
    let mut m = Model::new(small_model()).unwrap();
    let ctx = TrainContext::default();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for s in 1..=stage {
        run_stage(&mut m, s, &data, steps, &ctx, &mut rng, |_| {}).unwrap();
    }
    m
}

#[test]
fn logits_are_causal() {
    let m = trained_to_stage(3, 3);
    let s = sample(TaskKind::Dvc, 11);
    let stream = encode_events(&s.gold);
    let seq = SeqInput::teacher(&s.frames, &s.frame_timestamps, &s.query, &stream).unwrap();
    let base = m.forward(&seq).unwrap();
    let digits: Vec<usize> = (0..seq.inputs.len()).filter(|&j| seq.inputs[j] <= 9).collect();
    for &j in digits.iter().step_by(3) {
        let mut probe = seq.clone();
        probe.inputs[j] = (probe.inputs[j] + 1) % 10;
        let out = m.forward(&probe).unwrap();
        let changed_at = s.frames.rows() + 2 + j;
        for (a, b) in base.iter().zip(&out) {
            assert_eq!(a.position, b.position);
            if a.position < changed_at {
                assert_eq!(a.logits, b.logits, "position {} saw input {}", a.position, changed_at);
            }
        }
        let at = out.iter().position(|p| p.position == changed_at).unwrap();
        assert_ne!(base[at].logits, out[at].logits);
    }
}

#[test]
fn logit_widths_follow_heads() {
    let m = Model::new(small_model()).unwrap();
    let s = sample(TaskKind::Vhd, 2);
    let stream = encode_events(&s.gold);
    let seq = SeqInput::teacher(&s.frames, &s.frame_timestamps, &s.query, &stream).unwrap();
    let out = m.forward(&seq).unwrap();
    assert_eq!(out.len(), stream.len());
    for p in &out {
        let want = match p.head {
            HeadKind::Time | HeadKind::Score => 14,
            HeadKind::Text => small_model().text_vocab + 2,
        };
        assert_eq!(p.logits.len(), want);
    }
    assert_eq!(out[0].position, seq.first_prediction());
}

#[test]
fn context_overflow_is_rejected() {
    let m = Model::new(ModelConfig {
        max_target: 8,
        ..small_model()
    })
    .unwrap();
    let s = sample(TaskKind::Dvc, 3);
    let stream = encode_events(&s.gold);
    let seq = SeqInput::teacher(&s.frames, &s.frame_timestamps, &s.query, &stream).unwrap();
    assert!(matches!(m.forward(&seq), Err(Error::Contract(_))));
}

#[test]
fn golden_logits() {
    let m = Model::new(small_model()).unwrap();
    let s = sample(TaskKind::Mr, 4);
    let stream = encode_events(&s.gold);
    let seq = SeqInput::teacher(&s.frames, &s.frame_timestamps, &s.query, &stream).unwrap();
    let out = m.forward(&seq).unwrap();
    let logits: Vec<&Vec<f64>> = out.iter().map(|p| &p.logits).collect();
    golden("logits_mr4", &json!(logits), 1e-12);
}

#[test]
fn fusion_contracts() {
    let m = Model::new(small_model()).unwrap();
    let d = small_model().d;
    let ts = [0.0, 1.0, 1.0, 12.5];
    let zero = Matrix::zeros(4, d);
    let fused = m.fuse_frame_tokens(&zero, &ts, None).unwrap();
    for (i, &t) in ts.iter().enumerate() {
        let toks = format_number(t, NumberKind::Time).unwrap();
        let mut mean = vec![0.0; d];
        for &id in &toks {
            let row = m.embed.time.value.row(m.config.head_index(HeadKind::Time, id).unwrap());
            for (acc, v) in mean.iter_mut().zip(row) {
                *acc += v / toks.len() as f64;
            }
        }
        for (a, b) in fused.row(i).iter().zip(&mean) {
            assert!((a - b).abs() < 1e-12);
        }
    }
    assert_eq!(fused.row(1), fused.row(2));
    assert!(m.fuse_frame_tokens(&zero, &ts[..3], None).is_err());
    assert!(m.fuse_frame_tokens(&zero, &[2.0, 1.0, 3.0, 4.0], None).is_err());

    let s = sample(TaskKind::Dvc, 9);
    let fused = m.fuse_frame_tokens(&s.frames, &s.frame_timestamps, None).unwrap();
    golden("fusion_dvc9", &json!(fused.data()), 1e-12);
}

#[test]
fn stage_one_trains_only_dense_path() {
    let data = train_split(&small_data()).unwrap();
    let mut m = Model::new(small_model()).unwrap();
    let before = values_by_group(&m);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    run_stage(&mut m, 1, &data, 5, &TrainContext::default(), &mut rng, |_| {}).unwrap();
    assert_eq!(m.moe_layers().count(), 0, "no gating exists before stage 2");
    for ((name, _, a), (_, _, b)) in before.iter().zip(values_by_group(&m)) {
        assert_ne!(a, &b, "{name} should train in stage 1");
    }
}

#[test]
fn stage_two_trains_only_gating_and_experts() {
    let data = train_split(&small_data()).unwrap();
    let mut m = trained_to_stage(1, 3);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let frozen: Vec<_> = values_by_group(&m);
    run_stage(&mut m, 2, &data, 5, &TrainContext::default(), &mut rng, |_| {}).unwrap();
    let after = values_by_group(&m);
    for (name, group, v) in &after {
        if let Some((_, _, old)) = frozen.iter().find(|(n, _, _)| n == name) {
            assert_eq!(old, v, "{name} ({group:?}) must stay frozen in stage 2");
        } else {
            assert!(matches!(group, ParamGroup::Gating | ParamGroup::Expert), "{name}");
        }
    }
    // cloned experts diverge through the init noise
    let layer = m.moe_layers().next().unwrap();
    assert_ne!(layer.experts[0].w1.value, layer.experts[1].w1.value);
}

#[test]
fn stage_three_freezes_frame_table() {
    let data = train_split(&small_data()).unwrap();
    let mut m = trained_to_stage(2, 3);
    let frame = m.embed.frame.value.clone();
    let time = m.embed.time.value.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    run_stage(&mut m, 3, &data, 5, &TrainContext::default(), &mut rng, |_| {}).unwrap();
    assert_eq!(m.embed.frame.value, frame);
    assert_ne!(m.embed.time.value, time);
}

#[test]
fn stages_run_in_order() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut m = Model::new(small_model()).unwrap();
    let s = sample(TaskKind::Mr, 1);
    assert!(matches!(m.train_step(&[&s], &TrainContext::default(), &mut rng), Err(Error::Contract(_))));
    assert!(matches!(m.enter_stage(2, &mut rng), Err(Error::Contract(_))));
    m.enter_stage(1, &mut rng).unwrap();
    assert!(matches!(m.enter_stage(3, &mut rng), Err(Error::Contract(_))));
    assert!(matches!(m.enter_stage(1, &mut rng), Err(Error::Contract(_))));
    m.enter_stage(2, &mut rng).unwrap();
    m.enter_stage(3, &mut rng).unwrap();
    assert!(m.enter_stage(4, &mut rng).is_err());
}

#[test]
fn loss_decreases_on_a_fixed_batch() {
    let data = train_split(&small_data()).unwrap();
    let batch: Vec<&SyntheticSample> = data.iter().take(4).collect();
    let ctx = TrainContext::default();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut m = Model::new(small_model()).unwrap();
    m.enter_stage(1, &mut rng).unwrap();
    let losses: Vec<f64> = (0..50).map(|_| m.train_step(&batch, &ctx, &mut rng).unwrap().total).collect();
    assert!(losses[49] < 0.9 * losses[0], "{} -> {}", losses[0], losses[49]);

    m.enter_stage(2, &mut rng).unwrap();
    m.enter_stage(3, &mut rng).unwrap();
    let losses: Vec<f64> = (0..50).map(|_| m.train_step(&batch, &ctx, &mut rng).unwrap().total).collect();
    assert!(losses[49] < losses[0], "{} -> {}", losses[0], losses[49]);
}

#[test]
fn training_is_bit_reproducible() {
    let run = || {
        let data = train_split(&small_data()).unwrap();
        let mut ctx = TrainContext::default();
        ctx.lifecycle.warmup = 20;
        ctx.lifecycle.window = 20;
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let mut m = Model::new(small_model()).unwrap();
        let mut totals = Vec::new();
        run_stage(&mut m, 1, &data, 40, &ctx, &mut rng, |r| totals.push(r.total)).unwrap();
        run_stage(&mut m, 2, &data, 60, &ctx, &mut rng, |r| totals.push(r.total)).unwrap();
        (save_checkpoint(&m), totals)
    };
    let (a, ta) = run();
    let (b, tb) = run();
    assert_eq!(ta.iter().map(|x| x.to_bits()).collect::<Vec<_>>(), tb.iter().map(|x| x.to_bits()).collect::<Vec<_>>());
    assert!(a == b, "checkpoints differ");
    assert_eq!(load_checkpoint(&a).unwrap().step, 100);
}

#[test]
fn untrained_generation_parses() {
    let m = Model::new(small_model()).unwrap();
    for (i, kind) in TaskKind::ALL.into_iter().enumerate() {
        let s = sample(kind, 20 + i as u64);
        let out = m.generate_full(&s.frames, &s.frame_timestamps, &s.query, 2).unwrap();
        assert!(out.events.len() <= 2);
        decode_events(&encode_events(&out.events)).unwrap();
    }
}

#[test]
fn zero_max_events_is_rejected() {
    let m = Model::new(small_model()).unwrap();
    let s = sample(TaskKind::Mr, 0);
    assert!(matches!(
        m.generate(&s.frames, &s.frame_timestamps, &s.query, 0),
        Err(Error::Contract(_))
    ));
}

#[test]
fn overfit_one_sample_reproduces_gold() {
    let s = sample(TaskKind::Dvc, 31);
    let ctx = TrainContext {
        train: TrainConfig {
            lr: 3e-3,
            ..TrainConfig::default()
        },
        ..TrainContext::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut m = Model::new(small_model()).unwrap();
    m.enter_stage(1, &mut rng).unwrap();
    for _ in 0..500 {
        m.train_step(&[&s], &ctx, &mut rng).unwrap();
    }
    let got = m.generate(&s.frames, &s.frame_timestamps, &s.query, 2).unwrap();
    assert_eq!(got, s.gold);
    let stream: TokenStream = encode_events(&got);
    assert_eq!(stream, encode_events(&s.gold));
}

#[test]
fn split_cross_entropy_matches_training_loss() {
    let data = train_split(&small_data()).unwrap();
    let batch: Vec<&SyntheticSample> = data.iter().take(3).collect();
    let owned: Vec<SyntheticSample> = batch.iter().map(|s| (*s).clone()).collect();
    let ctx = TrainContext::default();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut m = Model::new(small_model()).unwrap();
    for stage in 1..=3 {
        m.enter_stage(stage, &mut rng).unwrap();
        for _ in 0..3 {
            let before = m.mean_cross_entropy(&owned).unwrap();
            let report = m.train_step(&batch, &ctx, &mut rng).unwrap();
            assert!((before - report.ce).abs() < 1e-10, "stage {stage}: {before} vs {}", report.ce);
        }
    }
}
