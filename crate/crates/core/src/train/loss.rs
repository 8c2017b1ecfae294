use crate::autodiff::{Tape, Var};
use crate::model::{MilPool, PredictionVars, LOG_CLAMP};
use crate::tensor::{Result, Tensor, TensorError};

/// Weights of the three binary cross-entropy terms.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub av: f64,
    pub audio: f64,
    pub visual: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            av: 1.0,
            audio: 1.0,
            visual: 1.0,
        }
    }
}

/// Aggregates a `T×C` probability map over valid timesteps.
pub fn mil_pool(p: &Tensor, valid: &[bool], mode: MilPool) -> Result<Vec<f64>> {
    let (t_len, classes) = p.dims2()?;
    if valid.len() != t_len {
        return Err(TensorError::Shape {
            op: "mil_pool",
            lhs: p.shape().to_vec(),
            rhs: vec![valid.len()],
        });
    }
    let rows: Vec<&[f64]> = (0..t_len).filter(|&t| valid[t]).map(|t| p.row(t)).collect();
    if rows.is_empty() {
        return Err(TensorError::Contract("mil_pool: no valid timesteps".into()));
    }
    Ok((0..classes)
        .map(|c| match mode {
            MilPool::Mean => rows.iter().map(|r| r[c]).sum::<f64>() / rows.len() as f64,
            MilPool::Max => rows.iter().map(|r| r[c]).fold(f64::NEG_INFINITY, f64::max),
        })
        .collect())
}

/// `λ_av·BCE(p̂, y) + λ_a·BCE(p̂_a, y) + λ_v·BCE(p̂_v, y)`, each term
/// averaged over categories.
pub fn compute_loss(tape: &mut Tape, out: &PredictionVars, label: &[bool], weights: &LossWeights) -> Result<Var> {
    let y: Vec<f64> = label.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
    let av = tape.bce(out.p_video, &y, LOG_CLAMP)?;
    let a = tape.bce(out.p_audio_video, &y, LOG_CLAMP)?;
    let v = tape.bce(out.p_visual_video, &y, LOG_CLAMP)?;
    let av = tape.scale(av, weights.av)?;
    let a = tape.scale(a, weights.audio)?;
    let v = tape.scale(v, weights.visual)?;
    let s = tape.add(av, a)?;
    tape.add(s, v)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pooling_basics() {
        let p = Tensor::from_rows(&[vec![0.2, 0.9], vec![0.4, 0.1], vec![1.0, 1.0]]);
        let valid = [true, true, false];
        let mean = mil_pool(&p, &valid, MilPool::Mean).unwrap();
        assert!((mean[0] - 0.3).abs() < 1e-15);
        assert_eq!(mil_pool(&p, &valid, MilPool::Max).unwrap(), vec![0.4, 0.9]);
        assert_eq!(
            mil_pool(&p, &[false, true, false], MilPool::Mean).unwrap(),
            vec![0.4, 0.1]
        );
        assert!(mil_pool(&p, &[false; 3], MilPool::Mean).is_err());
    }
}
