//! Interval extraction, tIoU matching and mean average precision.

mod csv_io;

pub use csv_io::{
    read_detections, read_report, write_anchors, write_detections, write_loss_curve, write_report, AnchorRow,
    CsvError,
};

use std::cmp::Ordering;

use crate::data::GtInstance;
use crate::model::MilPool;
use crate::tensor::{Result, Tensor, TensorError};
use crate::train::mil_pool;

/// The tIoU thresholds of the report, `0.5:0.1:0.9`.
pub const TIOU_THRESHOLDS: [f64; 5] = [0.5, 0.6, 0.7, 0.8, 0.9];

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ExtractConfig {
    pub class_threshold: f64,
    pub segment_threshold: f64,
    pub pool: MilPool,
}

impl Default for ExtractConfig {
    fn default() -> Self {
        Self {
            class_threshold: 0.5,
            segment_threshold: 0.5,
            pool: MilPool::Mean,
        }
    }
}

/// A scored interval `[start, end]` (inclusive segment indices).
#[derive(Debug, Clone, PartialEq)]
pub struct DetectedEvent {
    pub video_id: String,
    pub category: usize,
    pub start: usize,
    pub end: usize,
    pub score: f64,
}

/// Maximal runs of valid timesteps with `row[t] >= threshold`, as
/// `(start, end, mean value)`.
pub fn runs_above(row: &[f64], valid: &[bool], threshold: f64) -> Vec<(usize, usize, f64)> {
    let mut out = Vec::new();
    let mut open: Option<(usize, f64)> = None;
    for t in 0..=row.len() {
        let on = t < row.len() && valid.get(t).copied().unwrap_or(false) && row[t] >= threshold;
        match (on, open) {
            (true, None) => open = Some((t, row[t])),
            (true, Some((s, sum))) => open = Some((s, sum + row[t])),
            (false, Some((s, sum))) => {
                out.push((s, t - 1, sum / (t - s) as f64));
                open = None;
            }
            (false, None) => {}
        }
    }
    out
}

/// Detections of one video from its `T×C` modulated probability map.
pub fn extract_intervals(video_id: &str, p_av: &Tensor, valid: &[bool], cfg: &ExtractConfig) -> Result<Vec<DetectedEvent>> {
    let (t_len, classes) = p_av.dims2()?;
    let pooled = mil_pool(p_av, valid, cfg.pool)?;
    let mut out = Vec::new();
    for c in 0..classes {
        if pooled[c] < cfg.class_threshold {
            continue;
        }
        let column: Vec<f64> = (0..t_len).map(|t| p_av.get(t, c)).collect();
        for (start, end, score) in runs_above(&column, valid, cfg.segment_threshold) {
            out.push(DetectedEvent {
                video_id: video_id.to_string(),
                category: c,
                start,
                end,
                score,
            });
        }
    }
    Ok(out)
}

/// Temporal IoU of inclusive intervals, in segment counts.
pub fn tiou(a: (usize, usize), b: (usize, usize)) -> f64 {
    let inter_start = a.0.max(b.0);
    let inter_end = a.1.min(b.1);
    if inter_start > inter_end {
        return 0.0;
    }
    let inter = (inter_end - inter_start + 1) as f64;
    let union = (a.1 - a.0 + 1) as f64 + (b.1 - b.0 + 1) as f64 - inter;
    inter / union
}

/// Ground truth of one video.
#[derive(Debug, Clone, PartialEq)]
pub struct VideoTruth {
    pub video_id: String,
    pub gt: Vec<GtInstance>,
}

/// Area under the precision envelope of a ranked TP/FP sequence. Each true
/// positive adds a recall step of `1/num_gt` at the best precision reached
/// at or after its rank.
pub fn envelope_ap(hits: &[bool], num_gt: usize) -> f64 {
    if num_gt == 0 {
        return 0.0;
    }
    let mut tp = 0usize;
    let mut precision: Vec<f64> = hits
        .iter()
        .enumerate()
        .map(|(i, &h)| {
            tp += usize::from(h);
            tp as f64 / (i + 1) as f64
        })
        .collect();
    for i in (0..precision.len().saturating_sub(1)).rev() {
        precision[i] = precision[i].max(precision[i + 1]);
    }
    let area = hits.iter().zip(&precision).filter(|(h, _)| **h).fold(0.0, |acc, (_, p)| acc + p);
    area / num_gt as f64
}

fn video_index(truth: &[VideoTruth], id: &str) -> Option<usize> {
    truth.iter().position(|v| v.video_id == id)
}

/// Score descending, then earlier start, then earlier video.
fn rank_order(a: &(usize, &DetectedEvent), b: &(usize, &DetectedEvent)) -> Ordering {
    b.1.score
        .total_cmp(&a.1.score)
        .then(a.1.start.cmp(&b.1.start))
        .then(a.0.cmp(&b.0))
}

/// AP of one category at threshold `tau`, pooled over videos. `None` when
/// the category has no ground-truth instance. Detections on videos absent
/// from `truth` count as false positives.
pub fn average_precision(detections: &[DetectedEvent], truth: &[VideoTruth], category: usize, tau: f64) -> Option<f64> {
    let num_gt: usize = truth.iter().map(|v| v.gt.iter().filter(|g| g.category == category).count()).sum();
    if num_gt == 0 {
        return None;
    }
    let mut ranked: Vec<(usize, &DetectedEvent)> = detections
        .iter()
        .filter(|d| d.category == category)
        .map(|d| (video_index(truth, &d.video_id).unwrap_or(usize::MAX), d))
        .collect();
    ranked.sort_by(rank_order);

    let mut matched: Vec<Vec<bool>> = truth.iter().map(|v| vec![false; v.gt.len()]).collect();
    let hits: Vec<bool> = ranked
        .iter()
        .map(|&(vi, d)| {
            let Some(video) = truth.get(vi) else {
                return false;
            };
            let mut best: Option<(usize, f64)> = None;
            for (gi, g) in video.gt.iter().enumerate() {
                if g.category != category || matched[vi][gi] {
                    continue;
                }
                let iou = tiou((d.start, d.end), (g.start, g.end));
                if best.is_none_or(|(_, b)| iou > b) {
                    best = Some((gi, iou));
                }
            }
            match best {
                Some((gi, iou)) if iou >= tau => {
                    matched[vi][gi] = true;
                    true
                }
                _ => false,
            }
        })
        .collect();
    Some(envelope_ap(&hits, num_gt))
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub thresholds: Vec<f64>,
    /// mAP at each threshold.
    pub map: Vec<f64>,
    /// Mean of `map`.
    pub avg: f64,
    /// `per_category[c][i]`: AP of category `c` at `thresholds[i]`,
    /// `None` for categories without ground truth.
    pub per_category: Vec<Vec<Option<f64>>>,
}

/// Per-threshold mAP over categories with ground truth. With no eligible
/// category every entry is 0.
pub fn mean_ap(detections: &[DetectedEvent], truth: &[VideoTruth], num_classes: usize, thresholds: &[f64]) -> Result<EvalReport> {
    if let Some(d) = detections.iter().find(|d| d.category >= num_classes) {
        return Err(TensorError::Index {
            op: "mean_ap",
            index: d.category,
            len: num_classes,
        });
    }
    if thresholds.is_empty() {
        return Err(TensorError::Contract("mean_ap: no thresholds".into()));
    }
    let per_category: Vec<Vec<Option<f64>>> = (0..num_classes)
        .map(|c| thresholds.iter().map(|&tau| average_precision(detections, truth, c, tau)).collect())
        .collect();
    let map: Vec<f64> = (0..thresholds.len())
        .map(|i| {
            let aps: Vec<f64> = per_category.iter().filter_map(|row| row[i]).collect();
            if aps.is_empty() {
                0.0
            } else {
                aps.iter().sum::<f64>() / aps.len() as f64
            }
        })
        .collect();
    let avg = map.iter().sum::<f64>() / map.len() as f64;
    Ok(EvalReport {
        thresholds: thresholds.to_vec(),
        map,
        avg,
        per_category,
    })
}
