//! Synthetic audio-visual event streams with known ground truth.
//!
//! Every category owns one unit-norm prototype per modality. An
//! audio-visual event writes both prototypes over (slightly jittered)
//! intervals; a distractor writes only one modality's prototype. Segments
//! outside events carry Gaussian noise only. The ground truth of a video
//! is the per-category intersection of its audio and visual event
//! intervals.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use super::record::{label_from_gt, FeatureMatrix, GtInstance, VideoRecord};
use super::DataError;

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub num_videos: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub num_classes: usize,
    pub audio_dim: usize,
    pub visual_dim: usize,
    pub min_events: usize,
    pub max_events: usize,
    pub min_event_len: usize,
    pub max_event_len: usize,
    /// Probability that an event is present in one modality only.
    pub distractor_rate: f64,
    pub noise_std: f64,
    /// Minimum pairwise distance between prototypes of one modality.
    pub prototype_separation: f64,
    /// Maximum outward shift of each modality's event boundary.
    pub boundary_jitter: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            num_videos: 200,
            min_len: 48,
            max_len: 64,
            num_classes: 6,
            audio_dim: 16,
            visual_dim: 16,
            min_events: 1,
            max_events: 3,
            min_event_len: 4,
            max_event_len: 16,
            distractor_rate: 0.3,
            noise_std: 0.3,
            prototype_separation: 0.8,
            boundary_jitter: 1,
            seed: 7,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<(), DataError> {
        let bad = |m: &str| Err(DataError::Config(m.to_string()));
        if self.min_len == 0 || self.min_len > self.max_len {
            return bad("need 1 <= min_len <= max_len");
        }
        if self.num_classes == 0 || self.audio_dim == 0 || self.visual_dim == 0 {
            return bad("num_classes and feature dims must be positive");
        }
        if self.min_events > self.max_events {
            return bad("min_events exceeds max_events");
        }
        if self.min_event_len == 0 || self.min_event_len > self.max_event_len {
            return bad("need 1 <= min_event_len <= max_event_len");
        }
        if !(0.0..=1.0).contains(&self.distractor_rate) {
            return bad("distractor_rate must lie in [0, 1]");
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return bad("noise_std must be finite and non-negative");
        }
        if !(0.0..=2.0).contains(&self.prototype_separation) {
            return bad("prototype_separation must lie in [0, 2]");
        }
        Ok(())
    }
}

/// Which streams an event occupies.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EventKind {
    AudioVisual,
    AudioOnly,
    VisualOnly,
}

/// An event as placed in one modality, inclusive range.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PlacedInterval {
    pub start: usize,
    pub end: usize,
    pub category: usize,
}

/// A generated video together with the generator's internal event sets.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthVideo {
    pub record: VideoRecord,
    pub audio_events: Vec<PlacedInterval>,
    pub visual_events: Vec<PlacedInterval>,
    pub kinds: Vec<EventKind>,
}

/// Unit-norm category prototypes per modality.
#[derive(Debug, Clone, PartialEq)]
pub struct Prototypes {
    pub audio: Vec<Vec<f64>>,
    pub visual: Vec<Vec<f64>>,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed of the stream for video `index`; independent of generation order.
pub fn video_seed(seed: u64, index: u64) -> u64 {
    splitmix64(seed ^ splitmix64(index.wrapping_add(1)))
}

fn unit_vectors(rng: &mut ChaCha8Rng, n: usize, dim: usize, separation: f64) -> Result<Vec<Vec<f64>>, DataError> {
    const MAX_TRIES: usize = 10_000;
    let mut out: Vec<Vec<f64>> = Vec::with_capacity(n);
    for _ in 0..n {
        let mut tries = 0;
        loop {
            tries += 1;
            if tries > MAX_TRIES {
                return Err(DataError::Config(format!(
                    "cannot place {n} prototypes in {dim} dims with separation {separation}"
                )));
            }
            let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm < 1e-12 {
                continue;
            }
            let v: Vec<f64> = v.iter().map(|x| x / norm).collect();
            let far = out.iter().all(|u| {
                let d2: f64 = u.iter().zip(&v).map(|(a, b)| (a - b) * (a - b)).sum();
                d2.sqrt() >= separation
            });
            if far {
                out.push(v);
                break;
            }
        }
    }
    Ok(out)
}

pub fn make_prototypes(cfg: &SynthConfig) -> Result<Prototypes, DataError> {
    let mut rng = ChaCha8Rng::seed_from_u64(splitmix64(cfg.seed));
    let audio = unit_vectors(&mut rng, cfg.num_classes, cfg.audio_dim, cfg.prototype_separation)?;
    let visual = unit_vectors(&mut rng, cfg.num_classes, cfg.visual_dim, cfg.prototype_separation)?;
    Ok(Prototypes { audio, visual })
}

/// Merges inclusive intervals into a sorted disjoint union.
fn union(mut iv: Vec<(usize, usize)>) -> Vec<(usize, usize)> {
    iv.sort_unstable();
    let mut out: Vec<(usize, usize)> = Vec::with_capacity(iv.len());
    for (s, e) in iv {
        match out.last_mut() {
            Some(last) if s <= last.1 + 1 => last.1 = last.1.max(e),
            _ => out.push((s, e)),
        }
    }
    out
}

/// Intersection of two sorted disjoint interval lists.
fn intersect(a: &[(usize, usize)], b: &[(usize, usize)]) -> Vec<(usize, usize)> {
    let (mut i, mut j) = (0, 0);
    let mut out = Vec::new();
    while i < a.len() && j < b.len() {
        let s = a[i].0.max(b[j].0);
        let e = a[i].1.min(b[j].1);
        if s <= e {
            out.push((s, e));
        }
        if a[i].1 < b[j].1 {
            i += 1;
        } else {
            j += 1;
        }
    }
    out
}

/// Per-category intersection of audio and visual event intervals.
pub fn audio_visual_truth(
    audio: &[PlacedInterval],
    visual: &[PlacedInterval],
    num_classes: usize,
) -> Vec<GtInstance> {
    let mut gt = Vec::new();
    for c in 0..num_classes {
        let pick = |ev: &[PlacedInterval]| {
            union(ev.iter().filter(|e| e.category == c).map(|e| (e.start, e.end)).collect())
        };
        for (s, e) in intersect(&pick(audio), &pick(visual)) {
            gt.push(GtInstance::new(s, e, c));
        }
    }
    gt.sort_unstable_by_key(|g| (g.start, g.end, g.category));
    gt
}

/// True when `[s, e]` keeps at least one free segment to every interval in
/// `taken`.
fn is_clear(taken: &[PlacedInterval], s: usize, e: usize, same_category: Option<usize>) -> bool {
    taken
        .iter()
        .filter(|iv| same_category.is_none_or(|c| iv.category == c))
        .all(|iv| e + 1 < iv.start || iv.end + 1 < s)
}

fn jittered(rng: &mut ChaCha8Rng, s: usize, e: usize, jitter: usize, t0: usize) -> (usize, usize) {
    let a = rng.random_range(0..=jitter);
    let b = rng.random_range(0..=jitter);
    (s.saturating_sub(a), (e + b).min(t0 - 1))
}

/// Generates video `index` of the dataset described by `cfg`.
pub fn synthesize_video(cfg: &SynthConfig, protos: &Prototypes, index: usize) -> SynthVideo {
    let mut rng = ChaCha8Rng::seed_from_u64(video_seed(cfg.seed, index as u64));
    let t0 = rng.random_range(cfg.min_len..=cfg.max_len);
    let n_events = rng.random_range(cfg.min_events..=cfg.max_events);

    let mut audio_events: Vec<PlacedInterval> = Vec::new();
    let mut visual_events: Vec<PlacedInterval> = Vec::new();
    let mut kinds = Vec::new();
    for _ in 0..n_events {
        let category = rng.random_range(0..cfg.num_classes);
        let kind = if rng.random_bool(cfg.distractor_rate) {
            if rng.random_bool(0.5) {
                EventKind::AudioOnly
            } else {
                EventKind::VisualOnly
            }
        } else {
            EventKind::AudioVisual
        };
        for _attempt in 0..50 {
            let len = rng.random_range(cfg.min_event_len..=cfg.max_event_len).min(t0);
            let s = rng.random_range(0..=t0 - len);
            let e = s + len - 1;
            let (a_iv, v_iv) = match kind {
                EventKind::AudioVisual => (
                    Some(jittered(&mut rng, s, e, cfg.boundary_jitter, t0)),
                    Some(jittered(&mut rng, s, e, cfg.boundary_jitter, t0)),
                ),
                EventKind::AudioOnly => (Some((s, e)), None),
                EventKind::VisualOnly => (None, Some((s, e))),
            };
            // one event per segment within a modality, and no accidental
            // co-occurrence with the same category across modalities
            let ok = a_iv.is_none_or(|(s, e)| {
                is_clear(&audio_events, s, e, None)
                    && (kind == EventKind::AudioVisual || is_clear(&visual_events, s, e, Some(category)))
            }) && v_iv.is_none_or(|(s, e)| {
                is_clear(&visual_events, s, e, None)
                    && (kind == EventKind::AudioVisual || is_clear(&audio_events, s, e, Some(category)))
            }) && (kind != EventKind::AudioVisual || {
                let (a, v) = (a_iv.unwrap(), v_iv.unwrap());
                is_clear(&visual_events, a.0, a.1, Some(category)) && is_clear(&audio_events, v.0, v.1, Some(category))
            });
            if ok {
                if let Some((s, e)) = a_iv {
                    audio_events.push(PlacedInterval { start: s, end: e, category });
                }
                if let Some((s, e)) = v_iv {
                    visual_events.push(PlacedInterval { start: s, end: e, category });
                }
                kinds.push(kind);
                break;
            }
        }
    }

    let noise = Normal::new(0.0, cfg.noise_std).expect("validated noise_std");
    let mut render = |dim: usize, events: &[PlacedInterval], table: &[Vec<f64>]| {
        let mut m = FeatureMatrix::zeros(t0, dim);
        for t in 0..t0 {
            let proto = events.iter().find(|ev| ev.start <= t && t <= ev.end).map(|ev| &table[ev.category]);
            for (j, out) in m.row_mut(t).iter_mut().enumerate() {
                let signal = proto.map_or(0.0, |p| p[j]);
                *out = (signal + noise.sample(&mut rng)) as f32;
            }
        }
        m
    };
    let audio = render(cfg.audio_dim, &audio_events, &protos.audio);
    let visual = render(cfg.visual_dim, &visual_events, &protos.visual);

    let gt = audio_visual_truth(&audio_events, &visual_events, cfg.num_classes);
    let record = VideoRecord {
        id: format!("vid{index:05}"),
        audio,
        visual,
        label: label_from_gt(&gt, cfg.num_classes),
        gt,
    };
    SynthVideo {
        record,
        audio_events,
        visual_events,
        kinds,
    }
}

/// Generates the whole dataset with the generator's internal event sets.
pub fn synthesize_with_truth(cfg: &SynthConfig) -> Result<Vec<SynthVideo>, DataError> {
    cfg.validate()?;
    let protos = make_prototypes(cfg)?;
    Ok((0..cfg.num_videos).map(|i| synthesize_video(cfg, &protos, i)).collect())
}

pub fn synthesize_dataset(cfg: &SynthConfig) -> Result<Vec<VideoRecord>, DataError> {
    Ok(synthesize_with_truth(cfg)?.into_iter().map(|v| v.record).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn interval_helpers() {
        assert_eq!(union(vec![(5, 6), (0, 2), (3, 3), (9, 9)]), vec![(0, 3), (5, 6), (9, 9)]);
        assert_eq!(intersect(&[(0, 5), (8, 12)], &[(3, 9), (11, 20)]), vec![(3, 5), (8, 9), (11, 12)]);
    }

    #[test]
    fn prototypes_are_separated() {
        let cfg = SynthConfig {
            prototype_separation: 1.2,
            ..SynthConfig::default()
        };
        let p = make_prototypes(&cfg).unwrap();
        for set in [&p.audio, &p.visual] {
            for i in 0..set.len() {
                let n: f64 = set[i].iter().map(|x| x * x).sum();
                assert!((n - 1.0).abs() < 1e-12);
                for j in 0..i {
                    let d: f64 = set[i].iter().zip(&set[j]).map(|(a, b)| (a - b).powi(2)).sum();
                    assert!(d.sqrt() >= 1.2);
                }
            }
        }
    }

    #[test]
    fn impossible_separation_is_a_config_error() {
        let cfg = SynthConfig {
            audio_dim: 1,
            num_classes: 3,
            prototype_separation: 1.5,
            ..SynthConfig::default()
        };
        assert!(matches!(make_prototypes(&cfg), Err(DataError::Config(_))));
    }

    #[test]
    fn order_independent_streams() {
        let cfg = SynthConfig {
            num_videos: 5,
            ..SynthConfig::default()
        };
        let protos = make_prototypes(&cfg).unwrap();
        let all = synthesize_with_truth(&cfg).unwrap();
        assert_eq!(synthesize_video(&cfg, &protos, 3), all[3]);
    }
}
