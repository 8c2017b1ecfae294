//! WebAssembly bindings for the static page in `www/`.
//!
//! Both entry points take one category's per-timestep curves and return a
//! JSON string, so the page needs no generated TypeScript glue beyond the
//! two functions.

use clasp::eval::{runs_above, tiou};
use clasp::model::{identify_global_anchors, identify_local_anchors, mutual_agreement, JsdVariant};
use clasp::Tensor;
use serde_json::json;
use wasm_bindgen::prelude::*;

fn check_curve(name: &str, p: &[f64]) -> Result<(), String> {
    if p.is_empty() {
        return Err(format!("{name} is empty"));
    }
    match p.iter().position(|x| !(0.0..=1.0).contains(x)) {
        Some(t) => Err(format!("{name}[{t}] = {} is not a probability", p[t])),
        None => Ok(()),
    }
}

/// Agreement score, global anchors and per-window local anchors for an
/// audio and a visual probability curve of equal length.
pub fn anchors_json(p_audio: &[f64], p_visual: &[f64], k: usize, windows: usize, k_local: usize) -> Result<String, String> {
    check_curve("audio", p_audio)?;
    check_curve("visual", p_visual)?;
    let t = p_audio.len();
    if p_visual.len() != t {
        return Err(format!("curves differ in length: {t} vs {}", p_visual.len()));
    }
    if k == 0 || k_local == 0 || windows == 0 || windows > t {
        return Err(format!("need k, k_local >= 1 and 1 <= windows <= {t}"));
    }
    let column = |p: &[f64]| Tensor::new(vec![t, 1], p.to_vec()).expect("t x 1");
    let valid = vec![true; t];
    let trace = mutual_agreement(&column(p_audio), &column(p_visual), &valid, JsdVariant::Standard);
    let global = identify_global_anchors(&trace.score, &valid, k);
    let local = identify_local_anchors(&trace.score, &valid, windows, k_local);
    Ok(json!({ "score": trace.score, "global": global, "local": local }).to_string())
}

/// Runs of `p >= threshold` with their mean value, each scored by tIoU
/// against the reference interval `[gt_start, gt_end]`.
pub fn detect_json(p: &[f64], threshold: f64, gt_start: usize, gt_end: usize) -> Result<String, String> {
    check_curve("curve", p)?;
    if gt_start > gt_end || gt_end >= p.len() {
        return Err(format!("reference interval [{gt_start}, {gt_end}] outside 0..{}", p.len()));
    }
    let runs = runs_above(p, &vec![true; p.len()], threshold);
    let intervals: Vec<_> = runs
        .iter()
        .map(|&(s, e, mean)| json!({ "start": s, "end": e, "score": mean, "tiou": tiou((s, e), (gt_start, gt_end)) }))
        .collect();
    Ok(json!({ "intervals": intervals }).to_string())
}

#[wasm_bindgen]
pub fn anchors(p_audio: &[f64], p_visual: &[f64], k: usize, windows: usize, k_local: usize) -> Result<String, JsError> {
    anchors_json(p_audio, p_visual, k, windows, k_local).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen]
pub fn detect(p: &[f64], threshold: f64, gt_start: usize, gt_end: usize) -> Result<String, JsError> {
    detect_json(p, threshold, gt_start, gt_end).map_err(|e| JsError::new(&e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::Value;

    #[test]
    fn agreeing_steps_become_anchors() {
        let pa = [0.1, 0.9, 0.9, 0.2, 0.8, 0.5];
        let pv = [0.9, 0.9, 0.8, 0.9, 0.1, 0.5];
        let v: Value = serde_json::from_str(&anchors_json(&pa, &pv, 2, 2, 1).unwrap()).unwrap();
        assert_eq!(v["global"], json!([1, 5]));
        assert_eq!(v["local"], json!([[1], [5]]));
        assert_eq!(v["score"][5], 1.0);
    }

    #[test]
    fn detections_carry_tiou() {
        let p = [0.1, 0.6, 0.7, 0.8, 0.2, 0.9];
        let v: Value = serde_json::from_str(&detect_json(&p, 0.5, 1, 4).unwrap()).unwrap();
        let iv = v["intervals"].as_array().unwrap();
        assert_eq!(iv.len(), 2);
        assert_eq!((iv[0]["start"].as_u64(), iv[0]["end"].as_u64()), (Some(1), Some(3)));
        assert_eq!(iv[0]["tiou"], 0.75);
        assert_eq!(iv[1]["tiou"], 0.0);
    }

    #[test]
    fn bad_input_is_reported() {
        assert!(anchors_json(&[0.5], &[0.5, 0.5], 1, 1, 1).unwrap_err().contains("length"));
        assert!(anchors_json(&[0.5, 1.5], &[0.5, 0.5], 1, 1, 1).unwrap_err().contains("audio[1]"));
        assert!(anchors_json(&[0.5], &[0.5], 1, 2, 1).is_err());
        assert!(detect_json(&[0.5, 0.5], 0.5, 1, 2).is_err());
        assert!(detect_json(&[], 0.5, 0, 0).is_err());
    }
}
