use clasp::data::{synthesize_dataset, SynthConfig, VideoRecord};
use clasp::model::{infer, HyperParams, MilPool, ModelParameters, PredictionVars};
use clasp::train::{
    adam_step, compute_loss, examples_from_records, mil_pool, read_checkpoint, write_checkpoint, AdamConfig,
    LossWeights, OptimizerState, TrainConfig, TrainError, Trainer,
};
use clasp::{Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn bce_oracle(p: &[f64], y: &[f64]) -> f64 {
    let mut total = 0.0;
    for i in 0..p.len() {
        let q = p[i].clamp(1e-7, 1.0 - 1e-7);
        total += -(y[i] * q.ln() + (1.0 - y[i]) * (1.0 - q).ln());
    }
    total / p.len() as f64
}

fn loss_of(p_video: &[f64], p_audio: &[f64], p_visual: &[f64], label: &[bool], w: &LossWeights) -> f64 {
    let mut tape = Tape::new();
    let mut c = |v: &[f64]| tape.constant(Tensor::new(vec![v.len()], v.to_vec()).unwrap());
    let (pv, pa, pvis) = (c(p_video), c(p_audio), c(p_visual));
    let dummy = c(&[0.0]);
    let vars = PredictionVars {
        p_audio: dummy,
        p_visual: dummy,
        encoded_audio: dummy,
        encoded_visual: dummy,
        propagated_audio: dummy,
        propagated_visual: dummy,
        fg_audio: dummy,
        fg_visual: dummy,
        fg_mean: dummy,
        p_av: dummy,
        p_video: pv,
        p_audio_video: pa,
        p_visual_video: pvis,
    };
    let loss = compute_loss(&mut tape, &vars, label, w).unwrap();
    tape.value(loss).item()
}

#[test]
fn loss_matches_scalar_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..200 {
        let c = rng.random_range(1..9);
        let mut probs = || (0..c).map(|_| rng.random_range(0.0..=1.0)).collect::<Vec<f64>>();
        let (pv, pa, pvis) = (probs(), probs(), probs());
        let label: Vec<bool> = (0..c).map(|i| i % 2 == 0).collect();
        let y: Vec<f64> = label.iter().map(|&b| f64::from(u8::from(b))).collect();
        let w = LossWeights {
            av: 1.0,
            audio: 0.5,
            visual: 2.0,
        };
        let want = bce_oracle(&pv, &y) + 0.5 * bce_oracle(&pa, &y) + 2.0 * bce_oracle(&pvis, &y);
        assert!((loss_of(&pv, &pa, &pvis, &label, &w) - want).abs() < 1e-10);
    }
}

#[test]
fn loss_reference_points() {
    let w = LossWeights::default();
    let label = [true, false, true];
    let exact = [1.0, 0.0, 1.0];
    let floor = -(1.0f64 - 1e-7).ln();
    assert!((loss_of(&exact, &exact, &exact, &label, &w) - 3.0 * floor).abs() < 1e-15);
    let half = [0.5; 3];
    assert!((loss_of(&half, &half, &half, &label, &w) - 3.0 * std::f64::consts::LN_2).abs() < 1e-15);
}

#[test]
fn pooling_matches_loops() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let p = Tensor::new(vec![50, 7], (0..350).map(|_| rng.random::<f64>()).collect()).unwrap();
    let valid: Vec<bool> = (0..50).map(|t| t < 41).collect();
    let mean = mil_pool(&p, &valid, MilPool::Mean).unwrap();
    let max = mil_pool(&p, &valid, MilPool::Max).unwrap();
    for c in 0..7 {
        let mut sum = 0.0;
        let mut best = 0.0f64;
        for t in 0..41 {
            sum += p.get(t, c);
            best = best.max(p.get(t, c));
        }
        assert_eq!(mean[c], sum / 41.0);
        assert_eq!(max[c], best);
    }
    assert!(mil_pool(&p, &[false; 50], MilPool::Mean).is_err());
}

fn one_tensor_params() -> ModelParameters {
    let hp = tiny();
    let mut params = ModelParameters::init(&hp, 0);
    for (_, t) in params.iter_mut() {
        t.data_mut().fill(0.0);
    }
    params
}

fn tiny() -> HyperParams {
    HyperParams {
        max_len: 8,
        audio_dim: 2,
        visual_dim: 2,
        dim: 2,
        num_classes: 2,
        global_anchors: 2,
        local_anchors: 1,
        windows: 2,
        heads: 1,
        ..HyperParams::default()
    }
}

#[test]
fn adam_follows_the_recurrence() {
    let cfg = AdamConfig {
        learning_rate: 0.05,
        ..AdamConfig::default()
    };
    let mut params = one_tensor_params();
    let target: Vec<Vec<f64>> = params.iter().map(|(_, t)| (0..t.numel()).map(|i| i as f64 * 0.1 - 0.3).collect()).collect();
    let mut state = OptimizerState::new(&params);

    let mut w: Vec<Vec<f64>> = params.iter().map(|(_, t)| t.data().to_vec()).collect();
    let mut m: Vec<Vec<f64>> = w.iter().map(|x| vec![0.0; x.len()]).collect();
    let mut v = m.clone();
    for step in 1..=10 {
        // gradient of ½‖w − target‖²
        let grads: Vec<Tensor> = params
            .iter()
            .zip(&target)
            .map(|((_, t), tg)| {
                let g = t.data().iter().zip(tg).map(|(a, b)| a - b).collect();
                Tensor::new(t.shape().to_vec(), g).unwrap()
            })
            .collect();
        adam_step(&mut params, &grads, &mut state, &cfg).unwrap();

        for k in 0..w.len() {
            for i in 0..w[k].len() {
                let g = w[k][i] - target[k][i];
                m[k][i] = 0.9 * m[k][i] + 0.1 * g;
                v[k][i] = 0.999 * v[k][i] + 0.001 * g * g;
                let mh = m[k][i] / (1.0 - 0.9f64.powi(step));
                let vh = v[k][i] / (1.0 - 0.999f64.powi(step));
                w[k][i] -= 0.05 * mh / (vh.sqrt() + 1e-8);
            }
        }
    }
    for ((_, t), want) in params.iter().zip(&w) {
        for (a, b) in t.data().iter().zip(want) {
            assert!((a - b).abs() < 1e-8);
        }
    }
    assert_eq!(state.step, 10);
}

#[test]
fn adam_edge_cases() {
    let cfg = AdamConfig {
        learning_rate: 1e-3,
        ..AdamConfig::default()
    };
    let mut params = one_tensor_params();
    let mut state = OptimizerState::new(&params);
    let zeros: Vec<Tensor> = params.iter().map(|(_, t)| Tensor::zeros(t.shape())).collect();
    adam_step(&mut params, &zeros, &mut state, &cfg).unwrap();
    assert!(params.iter().all(|(_, t)| t.data().iter().all(|&x| x == 0.0)));

    let mut params = one_tensor_params();
    let mut state = OptimizerState::new(&params);
    let grads: Vec<Tensor> = params
        .iter()
        .map(|(_, t)| {
            let g = (0..t.numel()).map(|i| if i % 2 == 0 { 3.0 } else { -0.02 }).collect();
            Tensor::new(t.shape().to_vec(), g).unwrap()
        })
        .collect();
    adam_step(&mut params, &grads, &mut state, &cfg).unwrap();
    for ((_, t), g) in params.iter().zip(&grads) {
        for (w, g) in t.data().iter().zip(g.data()) {
            assert!((w + 1e-3 * g.signum()).abs() < 1e-9);
        }
    }

    let before = params.clone();
    let mut bad = grads.clone();
    bad[3].data_mut()[0] = f64::NAN;
    let err = adam_step(&mut params, &bad, &mut state, &cfg).unwrap_err();
    assert!(matches!(err, TrainError::NonFiniteGradient(_)));
    assert!(err.is_numeric());
    assert_eq!(params, before);
}

fn synth(n: usize, seed: u64) -> Vec<VideoRecord> {
    synthesize_dataset(&SynthConfig {
        num_videos: n,
        min_len: 16,
        max_len: 16,
        num_classes: 3,
        audio_dim: 4,
        visual_dim: 4,
        max_event_len: 6,
        seed,
        ..SynthConfig::default()
    })
    .unwrap()
}

fn toy_model() -> HyperParams {
    HyperParams {
        max_len: 16,
        audio_dim: 4,
        visual_dim: 4,
        dim: 8,
        num_classes: 3,
        global_anchors: 3,
        local_anchors: 1,
        windows: 4,
        heads: 2,
        mil_pool: MilPool::Max,
        ..HyperParams::default()
    }
}

fn toy_train(epochs: usize) -> TrainConfig {
    TrainConfig {
        epochs,
        batch_size: 4,
        learning_rate: 3e-3,
        seed: 5,
        ..TrainConfig::default()
    }
}

#[test]
fn single_video_is_learnable() {
    let cfg = SynthConfig {
        num_videos: 1,
        min_len: 16,
        max_len: 16,
        num_classes: 1,
        audio_dim: 4,
        visual_dim: 4,
        min_events: 1,
        max_events: 1,
        min_event_len: 5,
        max_event_len: 6,
        distractor_rate: 0.0,
        noise_std: 0.0,
        seed: 3,
        ..SynthConfig::default()
    };
    let records = synthesize_dataset(&cfg).unwrap();
    let hp = HyperParams {
        num_classes: 1,
        ..toy_model()
    };
    let ex = examples_from_records(&records, 16);
    let mut trainer = Trainer::new(hp.clone(), toy_train(200)).unwrap();
    let mut reached = None;
    trainer
        .fit(&ex, |t| {
            let p = infer(&t.params, &t.hp, &ex[0].input).unwrap().outputs.p_video[0];
            if p > 0.9 && reached.is_none() {
                reached = Some(t.epoch);
            }
            Ok(())
        })
        .unwrap();
    assert!(reached.is_some(), "video score never exceeded 0.9");
    assert!(trainer.loss_curve.last().unwrap() < &trainer.loss_curve[0]);
}

#[test]
fn training_is_deterministic() {
    let ex = examples_from_records(&synth(12, 9), 16);
    let run = || {
        let mut t = Trainer::new(toy_model(), toy_train(3)).unwrap();
        t.fit(&ex, |_| Ok(())).unwrap();
        write_checkpoint(&t.checkpoint())
    };
    assert_eq!(run(), run());
}

#[test]
fn ground_truth_never_reaches_training() {
    let records = synth(20, 11);
    assert!(records.iter().any(|r| !r.gt.is_empty()));
    let stripped: Vec<VideoRecord> = records
        .iter()
        .map(|r| VideoRecord {
            gt: Vec::new(),
            ..r.clone()
        })
        .collect();
    let trace = |recs: &[VideoRecord]| {
        let ex = examples_from_records(recs, 16);
        let mut t = Trainer::new(toy_model(), toy_train(5)).unwrap();
        let mut snapshots = Vec::new();
        t.fit(&ex, |t| {
            snapshots.push(write_checkpoint(&t.checkpoint()));
            Ok(())
        })
        .unwrap();
        (t.loss_curve.iter().map(|l| l.to_bits()).collect::<Vec<_>>(), snapshots)
    };
    assert_eq!(trace(&records), trace(&stripped));
}

#[test]
fn checkpoint_round_trip_and_resume() {
    let ex = examples_from_records(&synth(10, 13), 16);
    let mut straight = Trainer::new(toy_model(), toy_train(4)).unwrap();
    straight.fit(&ex, |_| Ok(())).unwrap();

    let mut first = Trainer::new(toy_model(), toy_train(2)).unwrap();
    first.fit(&ex, |_| Ok(())).unwrap();
    let bytes = write_checkpoint(&first.checkpoint());
    let ck = read_checkpoint(&bytes).unwrap();
    assert_eq!(write_checkpoint(&ck), bytes);
    assert_eq!(ck.epoch, 2);
    assert_eq!(ck.loss_curve.len(), 2);

    let mut resumed = Trainer::from_checkpoint(ck).unwrap();
    resumed.config.epochs = 4;
    resumed.fit(&ex, |_| Ok(())).unwrap();
    assert_eq!(resumed.epoch, 4);
    // parameters are stored in single precision
    for (a, b) in resumed.loss_curve.iter().zip(&straight.loss_curve) {
        assert!((a - b).abs() < 1e-4 * b.abs().max(1.0), "{a} {b}");
    }

    let mut corrupt = bytes.clone();
    let mid = corrupt.len() / 2;
    corrupt[mid] ^= 1;
    assert!(read_checkpoint(&corrupt).is_err());
}
