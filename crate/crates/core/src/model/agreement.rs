//! Cross-modal agreement scoring.
//!
//! Each category of a multi-label prediction is a Bernoulli variable, so
//! the divergence between the audio and visual predictions at one timestep
//! is the average over categories of a binary Jensen-Shannon divergence in
//! bits. That keeps the divergence, and the agreement `s = 1 - d`, inside
//! `[0, 1]`.

use super::JsdVariant;
use crate::tensor::Tensor;

/// Probabilities are clamped to `[LOG_CLAMP, 1 - LOG_CLAMP]` before logs.
pub const LOG_CLAMP: f64 = 1e-7;

#[derive(Debug, Clone, PartialEq)]
pub struct AgreementTrace {
    pub p_audio: Tensor,
    pub p_visual: Tensor,
    pub p_mean: Tensor,
    /// Per-timestep divergence; `+inf` on padded timesteps.
    pub divergence: Vec<f64>,
    /// Per-timestep agreement `1 - divergence`; `-inf` on padded timesteps.
    pub score: Vec<f64>,
}

fn bernoulli_kl_bits(a: f64, b: f64) -> f64 {
    a * (a / b).log2() + (1.0 - a) * ((1.0 - a) / (1.0 - b)).log2()
}

/// Binary Jensen-Shannon divergence in bits between Bernoulli(`p`) and
/// Bernoulli(`q`).
pub fn binary_jsd(p: f64, q: f64, variant: JsdVariant) -> f64 {
    let p = p.clamp(LOG_CLAMP, 1.0 - LOG_CLAMP);
    let q = q.clamp(LOG_CLAMP, 1.0 - LOG_CLAMP);
    let m = 0.5 * (p + q);
    let d = match variant {
        JsdVariant::Standard => 0.5 * bernoulli_kl_bits(p, m) + 0.5 * bernoulli_kl_bits(q, m),
        JsdVariant::AsWritten => 0.5 * bernoulli_kl_bits(m, p) + 0.5 * bernoulli_kl_bits(m, q),
    };
    d.clamp(0.0, 1.0)
}

/// Scores how strongly the two modalities agree at every timestep.
///
/// `p_audio` and `p_visual` are `T×C` matrices of sigmoid outputs.
pub fn mutual_agreement(
    p_audio: &Tensor,
    p_visual: &Tensor,
    valid: &[bool],
    variant: JsdVariant,
) -> AgreementTrace {
    assert_eq!(p_audio.shape(), p_visual.shape(), "modality predictions differ in shape");
    let (t_len, classes) = (p_audio.rows(), p_audio.cols());
    assert_eq!(valid.len(), t_len, "mask length");

    let mean_data = p_audio
        .data()
        .iter()
        .zip(p_visual.data())
        .map(|(a, v)| 0.5 * (a + v))
        .collect();
    let p_mean = Tensor::new(p_audio.shape().to_vec(), mean_data).expect("same shape");

    let mut divergence = Vec::with_capacity(t_len);
    let mut score = Vec::with_capacity(t_len);
    for t in 0..t_len {
        if !valid[t] {
            divergence.push(f64::INFINITY);
            score.push(f64::NEG_INFINITY);
            continue;
        }
        let d = p_audio
            .row(t)
            .iter()
            .zip(p_visual.row(t))
            .map(|(&a, &v)| binary_jsd(a, v, variant))
            .sum::<f64>()
            / classes as f64;
        divergence.push(d);
        score.push(1.0 - d);
    }
    AgreementTrace {
        p_audio: p_audio.clone(),
        p_visual: p_visual.clone(),
        p_mean,
        divergence,
        score,
    }
}
