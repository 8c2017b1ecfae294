//! Forward pass: projection, agreement, anchor selection and fusion,
//! unimodal encoding, anchor propagation and classification.

use super::agreement::{mutual_agreement, AgreementTrace};
use super::anchors::{identify_global_anchors, identify_local_anchors};
use super::params::{ModelParameters, ParamVars};
use super::{AgreementSource, AnchorModality, HyperParams, MilPool};
use crate::autodiff::{Tape, Var};
use crate::tensor::{Result, Tensor, TensorError};

const LN_EPS: f64 = 1e-5;

/// Raw features of one video, already padded or clipped to `T`.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelInput {
    pub audio: Tensor,
    pub visual: Tensor,
    pub valid: Vec<bool>,
}

/// Projected features on a tape.
#[derive(Debug, Clone)]
pub struct FeatureSequence {
    pub audio: Var,
    pub visual: Var,
    pub valid: Vec<bool>,
}

#[derive(Debug, Clone)]
pub struct AnchorVars {
    pub global_audio: Option<Var>,
    pub global_visual: Option<Var>,
    pub local_audio: Option<Var>,
    pub local_visual: Option<Var>,
    pub fused_audio: Var,
    pub fused_visual: Var,
    pub fused: Var,
}

/// Selected anchor positions and their features.
#[derive(Debug, Clone, PartialEq)]
pub struct AnchorSet {
    /// Global anchors by descending agreement; empty when disabled.
    pub global_idx: Vec<usize>,
    /// `M` rows of `k` local anchors; empty when disabled.
    pub local_idx: Vec<Vec<usize>>,
    pub global_audio: Option<Tensor>,
    pub global_visual: Option<Tensor>,
    pub local_audio: Option<Tensor>,
    pub local_visual: Option<Tensor>,
    pub fused_audio: Tensor,
    pub fused_visual: Tensor,
    /// `Z_av`, `K×d`.
    pub fused: Tensor,
}

#[derive(Debug, Clone)]
pub struct PredictionVars {
    pub p_audio: Var,
    pub p_visual: Var,
    pub encoded_audio: Var,
    pub encoded_visual: Var,
    pub propagated_audio: Var,
    pub propagated_visual: Var,
    pub fg_audio: Var,
    pub fg_visual: Var,
    pub fg_mean: Var,
    pub p_av: Var,
    pub p_video: Var,
    pub p_audio_video: Var,
    pub p_visual_video: Var,
}

/// Values of [`PredictionVars`] detached from the tape.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionOutputs {
    pub encoded_audio: Tensor,
    pub encoded_visual: Tensor,
    pub propagated_audio: Tensor,
    pub propagated_visual: Tensor,
    pub fg_audio: Vec<f64>,
    pub fg_visual: Vec<f64>,
    pub fg_mean: Vec<f64>,
    /// Foreground-modulated per-timestep event probabilities, `T×C`.
    pub p_av: Tensor,
    pub p_video: Vec<f64>,
    pub p_audio_video: Vec<f64>,
    pub p_visual_video: Vec<f64>,
}

#[derive(Debug)]
pub struct ForwardOutput {
    pub agreement: AgreementTrace,
    pub anchors: Option<AnchorSet>,
    pub vars: PredictionVars,
}

impl ForwardOutput {
    pub fn outputs(&self, tape: &Tape) -> PredictionOutputs {
        let v = &self.vars;
        let t = |x: Var| tape.value(x).clone();
        let flat = |x: Var| tape.value(x).data().to_vec();
        PredictionOutputs {
            encoded_audio: t(v.encoded_audio),
            encoded_visual: t(v.encoded_visual),
            propagated_audio: t(v.propagated_audio),
            propagated_visual: t(v.propagated_visual),
            fg_audio: flat(v.fg_audio),
            fg_visual: flat(v.fg_visual),
            fg_mean: flat(v.fg_mean),
            p_av: t(v.p_av),
            p_video: flat(v.p_video),
            p_audio_video: flat(v.p_audio_video),
            p_visual_video: flat(v.p_visual_video),
        }
    }
}

/// Sinusoidal position table, `T×d`.
pub fn sinusoidal_positions(t_len: usize, dim: usize) -> Tensor {
    let mut data = vec![0.0; t_len * dim];
    for t in 0..t_len {
        for i in (0..dim).step_by(2) {
            let freq = (10000f64).powf(-(i as f64) / dim as f64);
            let angle = t as f64 * freq;
            data[t * dim + i] = angle.sin();
            if i + 1 < dim {
                data[t * dim + i + 1] = angle.cos();
            }
        }
    }
    Tensor::matrix(t_len, dim, data).expect("positions shape")
}

fn check_input(input: &ModelInput, hp: &HyperParams) -> Result<()> {
    let t = hp.max_len;
    if input.audio.shape() != [t, hp.audio_dim] {
        return Err(TensorError::Shape {
            op: "forward(audio)",
            lhs: input.audio.shape().to_vec(),
            rhs: vec![t, hp.audio_dim],
        });
    }
    if input.visual.shape() != [t, hp.visual_dim] {
        return Err(TensorError::Shape {
            op: "forward(visual)",
            lhs: input.visual.shape().to_vec(),
            rhs: vec![t, hp.visual_dim],
        });
    }
    if input.valid.len() != t || !input.valid.iter().any(|&v| v) {
        return Err(TensorError::Contract(
            "validity mask must have length T and at least one valid timestep".into(),
        ));
    }
    Ok(())
}

fn pool(tape: &mut Tape, x: Var, valid: &[bool], mode: MilPool) -> Result<Var> {
    match mode {
        MilPool::Mean => tape.mean_rows(x, valid),
        MilPool::Max => tape.max_rows(x, valid),
    }
}

/// Two zero-padded temporal convolutions with ReLU per modality. Padded
/// rows are zeroed after each layer.
pub fn project_features(
    tape: &mut Tape,
    params: &ParamVars,
    hp: &HyperParams,
    raw_audio: Var,
    raw_visual: Var,
    valid: &[bool],
) -> Result<FeatureSequence> {
    let mut project = |raw: Var, m: &str| -> Result<Var> {
        let mut x = raw;
        for layer in ["conv1", "conv2"] {
            let w = params.get(&format!("proj.{m}.{layer}.w"));
            let b = hp.proj_bias.then(|| params.get(&format!("proj.{m}.{layer}.b")));
            let y = tape.conv1d(x, w, b)?;
            let y = tape.relu(y)?;
            x = tape.mask_rows(y, valid)?;
        }
        Ok(x)
    };
    let audio = project(raw_audio, "audio")?;
    let visual = project(raw_visual, "visual")?;
    Ok(FeatureSequence {
        audio,
        visual,
        valid: valid.to_vec(),
    })
}

/// Per-modality multi-label event probabilities
/// `sigmoid(LeakyReLU(x W1 + b1) W2 + b2)`, each `T×C`; biases only with
/// `meae_bias`.
pub fn predict_modality_probs(
    tape: &mut Tape,
    params: &ParamVars,
    hp: &HyperParams,
    audio: Var,
    visual: Var,
) -> Result<(Var, Var)> {
    let mut head = |x: Var, m: &str| -> Result<Var> {
        let mut h = tape.matmul(x, params.get(&format!("meae.{m}.w1")))?;
        if hp.meae_bias {
            h = tape.add_row(h, params.get(&format!("meae.{m}.b1")))?;
        }
        let h = tape.leaky_relu(h, hp.leaky_slope)?;
        let mut logits = tape.matmul(h, params.get(&format!("meae.{m}.w2")))?;
        if hp.meae_bias {
            logits = tape.add_row(logits, params.get(&format!("meae.{m}.b2")))?;
        }
        tape.sigmoid(logits)
    };
    let pa = head(audio, "audio")?;
    let pv = head(visual, "visual")?;
    Ok((pa, pv))
}

/// Gathers anchor features and fuses them into `Z_av` (`K×d`).
///
/// `global_idx` or `local_idx` may be empty when that mechanism is
/// disabled, but not both.
pub fn fuse_anchors(
    tape: &mut Tape,
    feat: &FeatureSequence,
    global_idx: &[usize],
    local_idx: &[Vec<usize>],
    params: &ParamVars,
    hp: &HyperParams,
) -> Result<AnchorVars> {
    let flat_local: Vec<usize> = local_idx.iter().flatten().copied().collect();
    let mut branch = |x: Var, m: &str| -> Result<(Option<Var>, Option<Var>, Var)> {
        let global = if global_idx.is_empty() {
            None
        } else {
            Some(tape.gather_rows(x, global_idx)?)
        };
        let local = if flat_local.is_empty() {
            None
        } else {
            let g = tape.gather_rows(x, &flat_local)?;
            Some(tape.matmul(params.get(&format!("csai.align.{m}")), g)?)
        };
        let fused = match (global, local) {
            (Some(g), Some(l)) => tape.add(g, l)?,
            (Some(g), None) => g,
            (None, Some(l)) => l,
            (None, None) => return Err(TensorError::Contract("no anchors to fuse".into())),
        };
        Ok((global, local, fused))
    };
    let (ga, la, za) = branch(feat.audio, "audio")?;
    let (gv, lv, zv) = branch(feat.visual, "visual")?;

    let (left, right) = match hp.ablation.anchor_modality {
        AnchorModality::Both => (za, zv),
        AnchorModality::Audio => {
            let zero = tape.constant(Tensor::zeros(tape.value(zv).shape()));
            (za, zero)
        }
        AnchorModality::Visual => {
            let zero = tape.constant(Tensor::zeros(tape.value(za).shape()));
            (zero, zv)
        }
    };
    let cat = tape.concat_cols(&[left, right])?;
    let h = tape.matmul(cat, params.get("csai.w3"))?;
    let fused = tape.matmul(h, params.get("csai.w4"))?;
    Ok(AnchorVars {
        global_audio: ga,
        global_visual: gv,
        local_audio: la,
        local_visual: lv,
        fused_audio: za,
        fused_visual: zv,
        fused,
    })
}

fn self_attention(
    tape: &mut Tape,
    params: &ParamVars,
    prefix: &str,
    x: Var,
    heads: usize,
    key_mask: &[bool],
) -> Result<Var> {
    let d = tape.value(x).cols();
    let dh = d / heads;
    let q = tape.matmul(x, params.get(&format!("{prefix}.wq")))?;
    let k = tape.matmul(x, params.get(&format!("{prefix}.wk")))?;
    let v = tape.matmul(x, params.get(&format!("{prefix}.wv")))?;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = tape.slice_cols(q, h * dh, dh)?;
        let kh = tape.slice_cols(k, h * dh, dh)?;
        let vh = tape.slice_cols(v, h * dh, dh)?;
        let kt = tape.transpose(kh)?;
        let scores = tape.matmul(qh, kt)?;
        let scores = tape.scale(scores, scale)?;
        let attn = tape.softmax_rows(scores, Some(key_mask))?;
        outs.push(tape.matmul(attn, vh)?);
    }
    let cat = if heads == 1 { outs[0] } else { tape.concat_cols(&outs)? };
    tape.matmul(cat, params.get(&format!("{prefix}.wo")))
}

fn transformer_block(
    tape: &mut Tape,
    params: &ParamVars,
    hp: &HyperParams,
    m: &str,
    x: Var,
    valid: &[bool],
) -> Result<Var> {
    let p = |s: &str| params.get(&format!("enc.{m}.{s}"));
    let pos = tape.constant(sinusoidal_positions(hp.max_len, hp.dim));
    let x0 = tape.add(x, pos)?;
    let h = tape.layer_norm(x0, p("ln1.g"), p("ln1.b"), LN_EPS)?;
    let a = self_attention(tape, params, &format!("enc.{m}.attn"), h, hp.heads, valid)?;
    let x1 = tape.add(x0, a)?;
    let h = tape.layer_norm(x1, p("ln2.g"), p("ln2.b"), LN_EPS)?;
    let f = tape.matmul(h, p("ffn.w1"))?;
    let f = tape.add_row(f, p("ffn.b1"))?;
    let f = tape.relu(f)?;
    let f = tape.matmul(f, p("ffn.w2"))?;
    let f = tape.add_row(f, p("ffn.b2"))?;
    tape.add(x1, f)
}

/// One pre-norm transformer block per modality, attention restricted to
/// valid timesteps.
pub fn encode_unimodal(
    tape: &mut Tape,
    feat: &FeatureSequence,
    params: &ParamVars,
    hp: &HyperParams,
) -> Result<(Var, Var)> {
    let fa = transformer_block(tape, params, hp, "audio", feat.audio, &feat.valid)?;
    let fv = transformer_block(tape, params, hp, "visual", feat.visual, &feat.valid)?;
    Ok((fa, fv))
}

/// Single-head cross-attention from temporal features (queries) to the
/// fused anchors (keys and values), added residually:
/// `F̂ = F + softmax(F Wq (Z Wk)ᵀ / sqrt(d)) Z Wv`.
pub fn propagate_anchors(
    tape: &mut Tape,
    encoded_audio: Var,
    encoded_visual: Var,
    fused: Var,
    params: &ParamVars,
) -> Result<(Var, Var)> {
    let d = tape.value(fused).cols();
    let scale = 1.0 / (d as f64).sqrt();
    let mut branch = |f: Var, m: &str| -> Result<Var> {
        let q = tape.matmul(f, params.get(&format!("atp.{m}.wq")))?;
        let k = tape.matmul(fused, params.get(&format!("atp.{m}.wk")))?;
        let v = tape.matmul(fused, params.get(&format!("atp.{m}.wv")))?;
        let kt = tape.transpose(k)?;
        let scores = tape.matmul(q, kt)?;
        let scores = tape.scale(scores, scale)?;
        let attn = tape.softmax_rows(scores, None)?;
        let msg = tape.matmul(attn, v)?;
        tape.add(f, msg)
    };
    let a = branch(encoded_audio, "audio")?;
    let v = branch(encoded_visual, "visual")?;
    Ok((a, v))
}

/// Foreground weights, modulated event probabilities and their pooled
/// video-level score.
///
/// Returns `(w_a, w_v, w̄, p_av, p̂)`.
pub fn classify(
    tape: &mut Tape,
    propagated_audio: Var,
    propagated_visual: Var,
    valid: &[bool],
    params: &ParamVars,
    hp: &HyperParams,
) -> Result<(Var, Var, Var, Var, Var)> {
    let mut fg = |f: Var, m: &str| -> Result<Var> {
        let z = tape.matmul(f, params.get(&format!("head.fg.{m}.w")))?;
        let z = tape.add_row(z, params.get(&format!("head.fg.{m}.b")))?;
        tape.sigmoid(z)
    };
    let wa = fg(propagated_audio, "audio")?;
    let wv = fg(propagated_visual, "visual")?;
    let wsum = tape.add(wa, wv)?;
    let wbar = tape.scale(wsum, 0.5)?;

    let cat = tape.concat_cols(&[propagated_audio, propagated_visual])?;
    let logits = tape.matmul(cat, params.get("head.cls.w"))?;
    let logits = tape.add_row(logits, params.get("head.cls.b"))?;
    let raw = tape.sigmoid(logits)?;
    let modulated = tape.mul_col(raw, wbar)?;
    let p_av = tape.mask_rows(modulated, valid)?;
    let p_video = pool(tape, p_av, valid, hp.mil_pool)?;
    Ok((wa, wv, wbar, p_av, p_video))
}

/// Full forward pass for one video. `params` must be registered on `tape`.
pub fn forward(tape: &mut Tape, params: &ParamVars, hp: &HyperParams, input: &ModelInput) -> Result<ForwardOutput> {
    check_input(input, hp)?;
    let valid = &input.valid;
    let raw_a = tape.constant(input.audio.clone());
    let raw_v = tape.constant(input.visual.clone());
    let feat = project_features(tape, params, hp, raw_a, raw_v, valid)?;

    let (encoded_audio, encoded_visual, p_audio, p_visual) = match hp.ablation.agreement_source {
        AgreementSource::Projected => {
            let (pa, pv) = predict_modality_probs(tape, params, hp, feat.audio, feat.visual)?;
            let (fa, fv) = encode_unimodal(tape, &feat, params, hp)?;
            (fa, fv, pa, pv)
        }
        AgreementSource::Encoded => {
            let (fa, fv) = encode_unimodal(tape, &feat, params, hp)?;
            let (pa, pv) = predict_modality_probs(tape, params, hp, fa, fv)?;
            (fa, fv, pa, pv)
        }
    };

    let agreement = mutual_agreement(tape.value(p_audio), tape.value(p_visual), valid, hp.jsd_variant);

    let (propagated_audio, propagated_visual, anchors) = if hp.uses_anchors() {
        let global_idx = if hp.ablation.global_anchors {
            identify_global_anchors(&agreement.score, valid, hp.global_anchors)
        } else {
            Vec::new()
        };
        let local_idx = if hp.ablation.local_anchors {
            identify_local_anchors(&agreement.score, valid, hp.windows, hp.local_anchors)
        } else {
            Vec::new()
        };
        let av = fuse_anchors(tape, &feat, &global_idx, &local_idx, params, hp)?;
        let (fa, fv) = propagate_anchors(tape, encoded_audio, encoded_visual, av.fused, params)?;
        let val = |v: Var| tape.value(v).clone();
        let set = AnchorSet {
            global_idx,
            local_idx,
            global_audio: av.global_audio.map(val),
            global_visual: av.global_visual.map(val),
            local_audio: av.local_audio.map(val),
            local_visual: av.local_visual.map(val),
            fused_audio: val(av.fused_audio),
            fused_visual: val(av.fused_visual),
            fused: val(av.fused),
        };
        (fa, fv, Some(set))
    } else {
        (encoded_audio, encoded_visual, None)
    };

    let (fg_audio, fg_visual, fg_mean, p_av, p_video) =
        classify(tape, propagated_audio, propagated_visual, valid, params, hp)?;
    let p_audio_video = pool(tape, p_audio, valid, hp.mil_pool)?;
    let p_visual_video = pool(tape, p_visual, valid, hp.mil_pool)?;

    Ok(ForwardOutput {
        agreement,
        anchors,
        vars: PredictionVars {
            p_audio,
            p_visual,
            encoded_audio,
            encoded_visual,
            propagated_audio,
            propagated_visual,
            fg_audio,
            fg_visual,
            fg_mean,
            p_av,
            p_video,
            p_audio_video,
            p_visual_video,
        },
    })
}

/// Detached result of a forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct Inference {
    pub agreement: AgreementTrace,
    pub anchors: Option<AnchorSet>,
    pub outputs: PredictionOutputs,
}

/// Forward pass on a fresh tape with frozen parameters.
pub fn infer(params: &ModelParameters, hp: &HyperParams, input: &ModelInput) -> Result<Inference> {
    let mut tape = Tape::new();
    let vars = params.register_frozen(&mut tape);
    let out = forward(&mut tape, &vars, hp, input)?;
    let outputs = out.outputs(&tape);
    Ok(Inference {
        agreement: out.agreement,
        anchors: out.anchors,
        outputs,
    })
}
