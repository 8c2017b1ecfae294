use crate::model::ModelInput;
use crate::tensor::Tensor;

use super::DataError;

/// Row-major `f32` feature matrix, one row per segment.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f32>,
}

impl FeatureMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self, DataError> {
        if rows * cols != data.len() {
            return Err(DataError::Invalid(format!(
                "feature matrix {rows}x{cols} given {} values",
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f32] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    /// Converts to a `len`-row tensor, truncating or zero-padding rows.
    pub fn to_tensor_padded(&self, len: usize) -> Tensor {
        let mut data = vec![0.0; len * self.cols];
        let keep = self.rows.min(len);
        for (o, &v) in data.iter_mut().zip(&self.data[..keep * self.cols]) {
            *o = f64::from(v);
        }
        Tensor::matrix(len, self.cols, data).expect("padded shape")
    }
}

/// One ground-truth audio-visual event, inclusive segment range.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct GtInstance {
    pub start: usize,
    pub end: usize,
    pub category: usize,
}

impl GtInstance {
    pub fn new(start: usize, end: usize, category: usize) -> Self {
        Self { start, end, category }
    }

    pub fn len(&self) -> usize {
        self.end - self.start + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VideoRecord {
    pub id: String,
    pub audio: FeatureMatrix,
    pub visual: FeatureMatrix,
    /// Video-level multi-hot label.
    pub label: Vec<bool>,
    /// Segment-level events; evaluation only.
    pub gt: Vec<GtInstance>,
}

/// Category indicator of a set of events.
pub fn label_from_gt(gt: &[GtInstance], num_classes: usize) -> Vec<bool> {
    let mut y = vec![false; num_classes];
    for g in gt {
        y[g.category] = true;
    }
    y
}

impl VideoRecord {
    pub fn num_segments(&self) -> usize {
        self.audio.rows()
    }

    pub fn num_classes(&self) -> usize {
        self.label.len()
    }

    /// Structural checks that every reader relies on.
    pub fn check_structure(&self) -> Result<(), DataError> {
        let t0 = self.audio.rows();
        if t0 == 0 {
            return Err(DataError::Invalid(format!("{}: no segments", self.id)));
        }
        if self.visual.rows() != t0 {
            return Err(DataError::Invalid(format!(
                "{}: audio has {} segments, visual {}",
                self.id,
                t0,
                self.visual.rows()
            )));
        }
        for g in &self.gt {
            if g.start > g.end || g.end >= t0 || g.category >= self.label.len() {
                return Err(DataError::Invalid(format!("{}: bad gt instance {g:?}", self.id)));
            }
        }
        Ok(())
    }

    /// Full record invariants, including label/gt consistency.
    pub fn validate(&self) -> Result<(), DataError> {
        self.check_structure()?;
        if label_from_gt(&self.gt, self.label.len()) != self.label {
            return Err(DataError::Invalid(format!(
                "{}: label does not match ground-truth categories",
                self.id
            )));
        }
        Ok(())
    }
}

/// A video padded or clipped to the model length.
#[derive(Debug, Clone, PartialEq)]
pub struct PaddedVideo {
    pub id: String,
    pub input: ModelInput,
    pub label: Vec<bool>,
    pub gt: Vec<GtInstance>,
}

/// Clips or zero-pads a record to `len` segments. Ground truth is clipped
/// to `[0, len)` and instances falling entirely outside are dropped.
pub fn pad_or_clip(rec: &VideoRecord, len: usize) -> PaddedVideo {
    assert!(len >= 1, "model length must be positive");
    let t0 = rec.num_segments();
    let valid = (0..len).map(|t| t < t0).collect();
    let gt = rec
        .gt
        .iter()
        .filter(|g| g.start < len)
        .map(|g| GtInstance::new(g.start, g.end.min(len - 1), g.category))
        .collect();
    PaddedVideo {
        id: rec.id.clone(),
        input: ModelInput {
            audio: rec.audio.to_tensor_padded(len),
            visual: rec.visual.to_tensor_padded(len),
            valid,
        },
        label: rec.label.clone(),
        gt,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(t0: usize, gt: Vec<GtInstance>) -> VideoRecord {
        let audio = FeatureMatrix::new(t0, 2, (0..t0 * 2).map(|v| v as f32).collect()).unwrap();
        let visual = FeatureMatrix::new(t0, 3, (0..t0 * 3).map(|v| -(v as f32)).collect()).unwrap();
        VideoRecord {
            id: "v".into(),
            audio,
            visual,
            label: label_from_gt(&gt, 4),
            gt,
        }
    }

    #[test]
    fn same_length_is_identity() {
        let rec = record(6, vec![GtInstance::new(1, 3, 2)]);
        let p = pad_or_clip(&rec, 6);
        assert!(p.input.valid.iter().all(|&v| v));
        assert_eq!(p.gt, rec.gt);
        assert_eq!(p.input.audio.get(5, 1), 11.0);
    }

    #[test]
    fn short_video_is_padded() {
        let p = pad_or_clip(&record(5, vec![]), 8);
        assert_eq!(p.input.valid, vec![true, true, true, true, true, false, false, false]);
        assert_eq!(p.input.audio.shape(), &[8, 2]);
        assert!(p.input.visual.row(6).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn long_video_clips_ground_truth() {
        let rec = record(300, vec![GtInstance::new(250, 260, 1), GtInstance::new(200, 260, 3)]);
        let p = pad_or_clip(&rec, 224);
        assert_eq!(p.gt, vec![GtInstance::new(200, 223, 3)]);
        // the label is video-level and stays untouched
        assert_eq!(p.label, rec.label);
    }

    #[test]
    fn validate_checks_label_consistency() {
        let mut rec = record(5, vec![GtInstance::new(0, 1, 0)]);
        rec.validate().unwrap();
        rec.label[2] = true;
        assert!(rec.validate().is_err());
        rec.check_structure().unwrap();
    }
}
