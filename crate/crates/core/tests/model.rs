use clasp::model::{
    classify, infer, predict_modality_probs, project_features, propagate_anchors, AnchorModality, HyperParams,
    ModelInput, ModelParameters, MilPool,
};
use clasp::{Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn small() -> HyperParams {
    HyperParams {
        max_len: 16,
        audio_dim: 5,
        visual_dim: 6,
        dim: 8,
        num_classes: 4,
        global_anchors: 3,
        local_anchors: 1,
        windows: 4,
        heads: 2,
        ..HyperParams::default()
    }
}

fn random_input(hp: &HyperParams, valid_len: usize, seed: u64) -> ModelInput {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut fill = |cols: usize| {
        let data = (0..hp.max_len * cols)
            .map(|i| if i / cols < valid_len { rng.random_range(-1.0..1.0) } else { 0.0 })
            .collect();
        Tensor::new(vec![hp.max_len, cols], data).unwrap()
    };
    ModelInput {
        audio: fill(hp.audio_dim),
        visual: fill(hp.visual_dim),
        valid: (0..hp.max_len).map(|t| t < valid_len).collect(),
    }
}

fn matmul(a: &[Vec<f64>], b: &[Vec<f64>]) -> Vec<Vec<f64>> {
    a.iter()
        .map(|row| (0..b[0].len()).map(|j| row.iter().zip(b).map(|(x, br)| x * br[j]).sum()).collect())
        .collect()
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn zero_param(params: &mut ModelParameters, name: &str) {
    params.get_mut(name).unwrap().data_mut().fill(0.0);
}

#[test]
fn output_shapes() {
    let hp = small();
    let params = ModelParameters::init(&hp, 1);
    let out = infer(&params, &hp, &random_input(&hp, 16, 2)).unwrap();
    let anchors = out.anchors.unwrap();
    assert_eq!(anchors.global_idx.len(), 3);
    assert_eq!(anchors.local_idx.len(), 4);
    assert!(anchors.local_idx.iter().all(|w| w.len() == 1));
    assert_eq!(anchors.fused.shape(), &[3, 8]);
    assert_eq!(anchors.local_audio.unwrap().shape(), &[3, 8]);
    assert_eq!(out.agreement.score.len(), 16);
    assert_eq!(out.agreement.p_audio.shape(), &[16, 4]);
    let o = &out.outputs;
    assert_eq!(o.encoded_audio.shape(), &[16, 8]);
    assert_eq!(o.propagated_visual.shape(), &[16, 8]);
    assert_eq!(o.p_av.shape(), &[16, 4]);
    assert_eq!((o.fg_mean.len(), o.p_video.len()), (16, 4));
}

#[test]
fn bias_free_projection_of_zero_input_is_zero() {
    let hp = HyperParams {
        proj_bias: false,
        ..small()
    };
    let params = ModelParameters::init(&hp, 3);
    let mut tape = Tape::new();
    let pv = params.register(&mut tape);
    let za = tape.constant(Tensor::zeros(&[16, 5]));
    let zv = tape.constant(Tensor::zeros(&[16, 6]));
    let feat = project_features(&mut tape, &pv, &hp, za, zv, &[true; 16]).unwrap();
    assert!(tape.value(feat.audio).data().iter().all(|&x| x == 0.0));
    assert!(tape.value(feat.visual).data().iter().all(|&x| x == 0.0));
}

#[test]
fn zeroed_probability_heads_give_one_half() {
    let hp = small();
    let mut params = ModelParameters::init(&hp, 4);
    for m in ["audio", "visual"] {
        for p in ["w1", "b1", "w2", "b2"] {
            zero_param(&mut params, &format!("meae.{m}.{p}"));
        }
    }
    let out = infer(&params, &hp, &random_input(&hp, 16, 5)).unwrap();
    assert!(out.agreement.p_audio.data().iter().all(|&p| p == 0.5));
    assert!(out.agreement.p_visual.data().iter().all(|&p| p == 0.5));
    assert!(out.agreement.score.iter().all(|&s| s == 1.0));
}

#[test]
fn probability_heads_match_stepwise_evaluation() {
    let hp = HyperParams {
        dim: 2,
        num_classes: 2,
        ..small()
    };
    let mut params = ModelParameters::init(&hp, 0);
    let set = |params: &mut ModelParameters, name: &str, v: &[f64]| {
        params.get_mut(name).unwrap().data_mut().copy_from_slice(v);
    };
    set(&mut params, "meae.audio.w1", &[0.5, -1.0, 2.0, 0.25]);
    set(&mut params, "meae.audio.b1", &[0.1, -0.2]);
    set(&mut params, "meae.audio.w2", &[1.0, -0.5, 0.3, 0.7]);
    set(&mut params, "meae.audio.b2", &[0.0, 0.05]);
    let x = vec![vec![1.0, 0.0], vec![-0.4, 0.9], vec![0.2, -0.3]];

    let leaky = |v: f64| if v > 0.0 { v } else { 0.01 * v };
    let w1 = [[0.5, -1.0], [2.0, 0.25]];
    let w2 = [[1.0, -0.5], [0.3, 0.7]];
    let mut want = Vec::new();
    for row in &x {
        let h: Vec<f64> = (0..2).map(|j| leaky(row[0] * w1[0][j] + row[1] * w1[1][j] + [0.1, -0.2][j])).collect();
        for c in 0..2 {
            want.push(sigmoid(h[0] * w2[0][c] + h[1] * w2[1][c] + [0.0, 0.05][c]));
        }
    }

    let mut tape = Tape::new();
    let pv = params.register_frozen(&mut tape);
    let xa = tape.constant(Tensor::from_rows(&x));
    let (pa, _) = predict_modality_probs(&mut tape, &pv, &hp, xa, xa).unwrap();
    for (got, want) in tape.value(pa).data().iter().zip(&want) {
        assert!((got - want).abs() < 1e-15, "{got} {want}");
    }
}

#[test]
fn zero_alignment_map_leaves_global_features() {
    let hp = small();
    let mut params = ModelParameters::init(&hp, 6);
    zero_param(&mut params, "csai.align.audio");
    zero_param(&mut params, "csai.align.visual");
    let out = infer(&params, &hp, &random_input(&hp, 16, 7)).unwrap();
    let a = out.anchors.unwrap();
    assert_eq!(a.fused_audio, a.global_audio.unwrap());
    assert_eq!(a.fused_visual, a.global_visual.unwrap());
}

#[test]
fn fused_anchors_match_dense_oracle() {
    let hp = small();
    let params = ModelParameters::init(&hp, 8);
    let out = infer(&params, &hp, &random_input(&hp, 16, 9)).unwrap();
    let a = out.anchors.unwrap();
    let w = |n: &str| params.get(n).unwrap().to_rows();
    // local rows are already mapped onto the K global slots
    let add = |g: Tensor, l: Tensor| -> Vec<Vec<f64>> {
        g.to_rows().iter().zip(l.to_rows()).map(|(x, y)| x.iter().zip(&y).map(|(p, q)| p + q).collect()).collect()
    };
    let za = add(a.global_audio.unwrap(), a.local_audio.unwrap());
    let zv = add(a.global_visual.unwrap(), a.local_visual.unwrap());
    assert_eq!(za.concat(), a.fused_audio.data());
    let cat: Vec<Vec<f64>> = za.iter().zip(&zv).map(|(x, y)| x.iter().chain(y).copied().collect()).collect();
    let want = matmul(&matmul(&cat, &w("csai.w3")), &w("csai.w4"));
    for (g, w) in a.fused.data().iter().zip(want.iter().flatten()) {
        assert!((g - w).abs() < 1e-12);
    }
}

#[test]
fn zero_value_projection_is_identity_residual() {
    let hp = small();
    let mut params = ModelParameters::init(&hp, 10);
    zero_param(&mut params, "atp.audio.wv");
    zero_param(&mut params, "atp.visual.wv");
    let out = infer(&params, &hp, &random_input(&hp, 16, 11)).unwrap();
    assert_eq!(out.outputs.propagated_audio, out.outputs.encoded_audio);
    assert_eq!(out.outputs.propagated_visual, out.outputs.encoded_visual);

    let mut tape = Tape::new();
    let pv = params.register_frozen(&mut tape);
    let f = tape.constant(out.outputs.encoded_audio.clone());
    let z = tape.constant(out.anchors.unwrap().fused);
    let (pa, _) = propagate_anchors(&mut tape, f, f, z, &pv).unwrap();
    assert_eq!(tape.value(pa), &out.outputs.encoded_audio);
}

#[test]
fn masked_attention_rows_are_distributions() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let mut tape = Tape::new();
    let scores = Tensor::new(vec![6, 6], (0..36).map(|_| rng.random_range(-4.0..4.0)).collect()).unwrap();
    let x = tape.constant(scores);
    let mask = [true, true, false, true, false, true];
    let attn = tape.softmax_rows(x, Some(&mask)).unwrap();
    for row in tape.value(attn).to_rows() {
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert_eq!((row[2], row[4]), (0.0, 0.0));
        assert!(row.iter().all(|&p| p >= 0.0));
    }
}

#[test]
fn classification_matches_stepwise_evaluation() {
    let hp = HyperParams {
        mil_pool: MilPool::Max,
        ..small()
    };
    let params = ModelParameters::init(&hp, 13);
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let mut rand_rows = || (0..16).map(|_| (0..8).map(|_| rng.random_range(-1.0..1.0)).collect()).collect::<Vec<Vec<f64>>>();
    let (fa, fv) = (rand_rows(), rand_rows());
    let valid: Vec<bool> = (0..16).map(|t| t < 11).collect();

    let mut tape = Tape::new();
    let pv = params.register_frozen(&mut tape);
    let a = tape.constant(Tensor::from_rows(&fa));
    let v = tape.constant(Tensor::from_rows(&fv));
    let (_, _, wbar, p_av, p_video) = classify(&mut tape, a, v, &valid, &pv, &hp).unwrap();

    let w = |n: &str| params.get(n).unwrap().to_rows();
    let fg = |f: &[Vec<f64>], m: &str| -> Vec<f64> {
        let b = w(&format!("head.fg.{m}.b"))[0][0];
        matmul(f, &w(&format!("head.fg.{m}.w"))).iter().map(|r| sigmoid(r[0] + b)).collect()
    };
    let (wa, wv) = (fg(&fa, "audio"), fg(&fv, "visual"));
    let cat: Vec<Vec<f64>> = fa.iter().zip(&fv).map(|(x, y)| x.iter().chain(y).copied().collect()).collect();
    let logits = matmul(&cat, &w("head.cls.w"));
    let bias = &w("head.cls.b")[0];
    let mut pooled = vec![0.0f64; 4];
    for t in 0..16 {
        let wb = 0.5 * (wa[t] + wv[t]);
        assert!((tape.value(wbar).data()[t] - wb).abs() < 1e-14);
        for c in 0..4 {
            let want = if valid[t] { sigmoid(logits[t][c] + bias[c]) * wb } else { 0.0 };
            let got = tape.value(p_av).get(t, c);
            assert!((got - want).abs() < 1e-14, "t {t} c {c}");
            if valid[t] {
                pooled[c] = pooled[c].max(want);
            }
        }
    }
    for c in 0..4 {
        assert!((tape.value(p_video).data()[c] - pooled[c]).abs() < 1e-14);
    }
}

#[test]
fn zero_foreground_weight_zeroes_the_row() {
    let hp = small();
    let mut params = ModelParameters::init(&hp, 15);
    for m in ["audio", "visual"] {
        zero_param(&mut params, &format!("head.fg.{m}.w"));
        params.get_mut(&format!("head.fg.{m}.b")).unwrap().data_mut()[0] = -800.0;
    }
    let out = infer(&params, &hp, &random_input(&hp, 16, 16)).unwrap();
    assert!(out.outputs.fg_mean.iter().all(|&w| w == 0.0));
    assert!(out.outputs.p_av.data().iter().all(|&p| p == 0.0));
}

#[test]
fn padded_steps_have_zero_probability() {
    let hp = small();
    let params = ModelParameters::init(&hp, 17);
    let out = infer(&params, &hp, &random_input(&hp, 9, 18)).unwrap();
    for t in 9..16 {
        assert!(out.outputs.p_av.row(t).iter().all(|&p| p == 0.0));
    }
    assert!(out.outputs.p_av.row(3).iter().all(|&p| p > 0.0));
    let a = out.anchors.unwrap();
    assert!(a.global_idx.iter().chain(a.local_idx.iter().flatten()).all(|&t| t < 9));
}

#[test]
fn ablation_switches() {
    let base = small();
    let input = random_input(&base, 16, 19);

    let mut hp = base.clone();
    hp.ablation.anchor_bypass = true;
    let params = ModelParameters::init(&hp, 20);
    let out = infer(&params, &hp, &input).unwrap();
    assert!(out.anchors.is_none());
    assert_eq!(out.outputs.propagated_audio, out.outputs.encoded_audio);

    let mut hp = base.clone();
    hp.ablation.global_anchors = false;
    let out = infer(&ModelParameters::init(&hp, 20), &hp, &input).unwrap();
    let a = out.anchors.unwrap();
    assert!(a.global_idx.is_empty() && a.global_audio.is_none());
    assert_eq!(a.local_idx.len(), 4);

    let mut hp = base.clone();
    hp.ablation.local_anchors = false;
    let out = infer(&ModelParameters::init(&hp, 20), &hp, &input).unwrap();
    let a = out.anchors.unwrap();
    assert!(a.local_idx.is_empty() && a.local_audio.is_none());
    assert_eq!(a.fused_audio, a.global_audio.unwrap());

    // audio-only anchors: the fused output ignores the visual stream
    let mut hp = base.clone();
    hp.ablation.anchor_modality = AnchorModality::Audio;
    let params = ModelParameters::init(&hp, 21);
    let first = infer(&params, &hp, &input).unwrap().anchors.unwrap();
    let w3 = params.get("csai.w3").unwrap().to_rows();
    let w4 = params.get("csai.w4").unwrap().to_rows();
    let cat: Vec<Vec<f64>> = first
        .fused_audio
        .to_rows()
        .into_iter()
        .map(|r| r.into_iter().chain(std::iter::repeat_n(0.0, 8)).collect())
        .collect();
    let want = matmul(&matmul(&cat, &w3), &w4);
    for (g, w) in first.fused.data().iter().zip(want.iter().flatten()) {
        assert!((g - w).abs() < 1e-12);
    }

    let mut hp = base;
    hp.ablation.global_anchors = false;
    hp.ablation.local_anchors = false;
    assert!(hp.validate().is_err());
}
