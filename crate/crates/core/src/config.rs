//! Plain `key = value` configuration.
//!
//! Keys are namespaced: `model.*` for [`HyperParams`], `train.*` for
//! [`TrainConfig`], `synth.*` for [`SynthConfig`] and `predict.*` for
//! [`ExtractConfig`]. Each section ignores keys of the others but rejects
//! unknown keys of its own. Lines starting with `#` are comments.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::str::FromStr;

use crate::data::SynthConfig;
use crate::eval::ExtractConfig;
use crate::model::{AgreementSource, AnchorModality, ConfigError, HyperParams, JsdVariant, MilPool};
use crate::train::TrainConfig;

#[derive(Debug, Clone, Default, PartialEq)]
pub struct KeyValues {
    map: BTreeMap<String, String>,
}

impl KeyValues {
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut map = BTreeMap::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| ConfigError(format!("line {}: expected key = value, got {raw:?}", n + 1)))?;
            map.insert(k.trim().to_string(), v.trim().to_string());
        }
        Ok(Self { map })
    }

    pub fn set(&mut self, key: impl Into<String>, value: impl ToString) {
        self.map.insert(key.into(), value.to_string());
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.map.get(key).map(String::as_str)
    }

    /// Entries of `other` override entries of `self`.
    pub fn merge(&mut self, other: &KeyValues) {
        for (k, v) in &other.map {
            self.map.insert(k.clone(), v.clone());
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &str)> {
        self.map.iter().map(|(k, v)| (k.as_str(), v.as_str()))
    }

    /// Serializes as sorted `key = value` lines.
    pub fn to_text(&self) -> String {
        self.map.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    fn section(&self, prefix: &str) -> impl Iterator<Item = (&str, &str)> {
        let p = format!("{prefix}.");
        self.map
            .iter()
            .filter_map(move |(k, v)| k.strip_prefix(&p).map(|rest| (rest, v.as_str())))
    }
}

fn parse<T: FromStr>(key: &str, v: &str) -> Result<T, ConfigError>
where
    T::Err: Display,
{
    v.parse()
        .map_err(|e| ConfigError(format!("{key}: cannot parse {v:?}: {e}")))
}

fn unknown(section: &str, key: &str) -> ConfigError {
    ConfigError(format!("unknown key {section}.{key}"))
}

pub fn parse_jsd_variant(v: &str) -> Result<JsdVariant, ConfigError> {
    match v {
        "standard" => Ok(JsdVariant::Standard),
        "as-written" => Ok(JsdVariant::AsWritten),
        _ => Err(ConfigError(format!("jsd variant must be standard or as-written, got {v:?}"))),
    }
}

pub fn parse_mil_pool(v: &str) -> Result<MilPool, ConfigError> {
    match v {
        "mean" => Ok(MilPool::Mean),
        "max" => Ok(MilPool::Max),
        _ => Err(ConfigError(format!("mil pool must be mean or max, got {v:?}"))),
    }
}

pub fn parse_anchor_modality(v: &str) -> Result<AnchorModality, ConfigError> {
    match v {
        "both" => Ok(AnchorModality::Both),
        "audio" => Ok(AnchorModality::Audio),
        "visual" => Ok(AnchorModality::Visual),
        _ => Err(ConfigError(format!("anchors must be audio, visual or both, got {v:?}"))),
    }
}

pub fn parse_agreement_source(v: &str) -> Result<AgreementSource, ConfigError> {
    match v {
        "projected" => Ok(AgreementSource::Projected),
        "encoded" => Ok(AgreementSource::Encoded),
        _ => Err(ConfigError(format!("agreement source must be projected or encoded, got {v:?}"))),
    }
}

fn jsd_name(v: JsdVariant) -> &'static str {
    match v {
        JsdVariant::Standard => "standard",
        JsdVariant::AsWritten => "as-written",
    }
}

fn pool_name(v: MilPool) -> &'static str {
    match v {
        MilPool::Mean => "mean",
        MilPool::Max => "max",
    }
}

fn modality_name(v: AnchorModality) -> &'static str {
    match v {
        AnchorModality::Both => "both",
        AnchorModality::Audio => "audio",
        AnchorModality::Visual => "visual",
    }
}

fn source_name(v: AgreementSource) -> &'static str {
    match v {
        AgreementSource::Projected => "projected",
        AgreementSource::Encoded => "encoded",
    }
}

pub fn apply_hyper(hp: &mut HyperParams, kv: &KeyValues) -> Result<(), ConfigError> {
    for (k, v) in kv.section("model") {
        match k {
            "max_len" => hp.max_len = parse(k, v)?,
            "audio_dim" => hp.audio_dim = parse(k, v)?,
            "visual_dim" => hp.visual_dim = parse(k, v)?,
            "dim" => hp.dim = parse(k, v)?,
            "num_classes" => hp.num_classes = parse(k, v)?,
            "global_anchors" => hp.global_anchors = parse(k, v)?,
            "local_anchors" => hp.local_anchors = parse(k, v)?,
            "windows" => hp.windows = parse(k, v)?,
            "heads" => hp.heads = parse(k, v)?,
            "conv_kernel" => hp.conv_kernel = parse(k, v)?,
            "proj_bias" => hp.proj_bias = parse(k, v)?,
            "meae_bias" => hp.meae_bias = parse(k, v)?,
            "leaky_slope" => hp.leaky_slope = parse(k, v)?,
            "jsd_variant" => hp.jsd_variant = parse_jsd_variant(v)?,
            "mil_pool" => hp.mil_pool = parse_mil_pool(v)?,
            "gai" => hp.ablation.global_anchors = parse(k, v)?,
            "lai" => hp.ablation.local_anchors = parse(k, v)?,
            "anchor_bypass" => hp.ablation.anchor_bypass = parse(k, v)?,
            "anchors" => hp.ablation.anchor_modality = parse_anchor_modality(v)?,
            "agreement_source" => hp.ablation.agreement_source = parse_agreement_source(v)?,
            _ => return Err(unknown("model", k)),
        }
    }
    Ok(())
}

pub fn hyper_to_kv(hp: &HyperParams, kv: &mut KeyValues) {
    kv.set("model.max_len", hp.max_len);
    kv.set("model.audio_dim", hp.audio_dim);
    kv.set("model.visual_dim", hp.visual_dim);
    kv.set("model.dim", hp.dim);
    kv.set("model.num_classes", hp.num_classes);
    kv.set("model.global_anchors", hp.global_anchors);
    kv.set("model.local_anchors", hp.local_anchors);
    kv.set("model.windows", hp.windows);
    kv.set("model.heads", hp.heads);
    kv.set("model.conv_kernel", hp.conv_kernel);
    kv.set("model.proj_bias", hp.proj_bias);
    kv.set("model.meae_bias", hp.meae_bias);
    kv.set("model.leaky_slope", hp.leaky_slope);
    kv.set("model.jsd_variant", jsd_name(hp.jsd_variant));
    kv.set("model.mil_pool", pool_name(hp.mil_pool));
    kv.set("model.gai", hp.ablation.global_anchors);
    kv.set("model.lai", hp.ablation.local_anchors);
    kv.set("model.anchor_bypass", hp.ablation.anchor_bypass);
    kv.set("model.anchors", modality_name(hp.ablation.anchor_modality));
    kv.set("model.agreement_source", source_name(hp.ablation.agreement_source));
}

pub fn apply_train(cfg: &mut TrainConfig, kv: &KeyValues) -> Result<(), ConfigError> {
    for (k, v) in kv.section("train") {
        match k {
            "epochs" => cfg.epochs = parse(k, v)?,
            "batch_size" => cfg.batch_size = parse(k, v)?,
            "learning_rate" => cfg.learning_rate = parse(k, v)?,
            "beta1" => cfg.beta1 = parse(k, v)?,
            "beta2" => cfg.beta2 = parse(k, v)?,
            "eps" => cfg.eps = parse(k, v)?,
            "weight_av" => cfg.loss_weights.av = parse(k, v)?,
            "weight_audio" => cfg.loss_weights.audio = parse(k, v)?,
            "weight_visual" => cfg.loss_weights.visual = parse(k, v)?,
            "seed" => cfg.seed = parse(k, v)?,
            "checkpoint_every" => cfg.checkpoint_every = parse(k, v)?,
            _ => return Err(unknown("train", k)),
        }
    }
    Ok(())
}

pub fn train_to_kv(cfg: &TrainConfig, kv: &mut KeyValues) {
    kv.set("train.epochs", cfg.epochs);
    kv.set("train.batch_size", cfg.batch_size);
    kv.set("train.learning_rate", cfg.learning_rate);
    kv.set("train.beta1", cfg.beta1);
    kv.set("train.beta2", cfg.beta2);
    kv.set("train.eps", cfg.eps);
    kv.set("train.weight_av", cfg.loss_weights.av);
    kv.set("train.weight_audio", cfg.loss_weights.audio);
    kv.set("train.weight_visual", cfg.loss_weights.visual);
    kv.set("train.seed", cfg.seed);
    kv.set("train.checkpoint_every", cfg.checkpoint_every);
}

pub fn apply_synth(cfg: &mut SynthConfig, kv: &KeyValues) -> Result<(), ConfigError> {
    for (k, v) in kv.section("synth") {
        match k {
            "num_videos" => cfg.num_videos = parse(k, v)?,
            "min_len" => cfg.min_len = parse(k, v)?,
            "max_len" => cfg.max_len = parse(k, v)?,
            "num_classes" => cfg.num_classes = parse(k, v)?,
            "audio_dim" => cfg.audio_dim = parse(k, v)?,
            "visual_dim" => cfg.visual_dim = parse(k, v)?,
            "min_events" => cfg.min_events = parse(k, v)?,
            "max_events" => cfg.max_events = parse(k, v)?,
            "min_event_len" => cfg.min_event_len = parse(k, v)?,
            "max_event_len" => cfg.max_event_len = parse(k, v)?,
            "distractor_rate" => cfg.distractor_rate = parse(k, v)?,
            "noise_std" => cfg.noise_std = parse(k, v)?,
            "prototype_separation" => cfg.prototype_separation = parse(k, v)?,
            "boundary_jitter" => cfg.boundary_jitter = parse(k, v)?,
            "seed" => cfg.seed = parse(k, v)?,
            _ => return Err(unknown("synth", k)),
        }
    }
    Ok(())
}

pub fn synth_to_kv(cfg: &SynthConfig, kv: &mut KeyValues) {
    kv.set("synth.num_videos", cfg.num_videos);
    kv.set("synth.min_len", cfg.min_len);
    kv.set("synth.max_len", cfg.max_len);
    kv.set("synth.num_classes", cfg.num_classes);
    kv.set("synth.audio_dim", cfg.audio_dim);
    kv.set("synth.visual_dim", cfg.visual_dim);
    kv.set("synth.min_events", cfg.min_events);
    kv.set("synth.max_events", cfg.max_events);
    kv.set("synth.min_event_len", cfg.min_event_len);
    kv.set("synth.max_event_len", cfg.max_event_len);
    kv.set("synth.distractor_rate", cfg.distractor_rate);
    kv.set("synth.noise_std", cfg.noise_std);
    kv.set("synth.prototype_separation", cfg.prototype_separation);
    kv.set("synth.boundary_jitter", cfg.boundary_jitter);
    kv.set("synth.seed", cfg.seed);
}

pub fn apply_extract(cfg: &mut ExtractConfig, kv: &KeyValues) -> Result<(), ConfigError> {
    for (k, v) in kv.section("predict") {
        match k {
            "class_threshold" => cfg.class_threshold = parse(k, v)?,
            "segment_threshold" => cfg.segment_threshold = parse(k, v)?,
            "pool" => cfg.pool = parse_mil_pool(v)?,
            _ => return Err(unknown("predict", k)),
        }
    }
    Ok(())
}

pub fn extract_to_kv(cfg: &ExtractConfig, kv: &mut KeyValues) {
    kv.set("predict.class_threshold", cfg.class_threshold);
    kv.set("predict.segment_threshold", cfg.segment_threshold);
    kv.set("predict.pool", pool_name(cfg.pool));
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hyper_round_trip() {
        let mut hp = HyperParams {
            dim: 24,
            leaky_slope: 0.013,
            mil_pool: MilPool::Max,
            ..HyperParams::default()
        };
        hp.ablation.anchor_modality = AnchorModality::Visual;
        let mut kv = KeyValues::default();
        hyper_to_kv(&hp, &mut kv);
        let text = kv.to_text();
        let mut back = HyperParams::default();
        apply_hyper(&mut back, &KeyValues::parse(&text).unwrap()).unwrap();
        assert_eq!(back, hp);
    }

    #[test]
    fn sections_are_independent() {
        let kv = KeyValues::parse("# comment\ntrain.epochs = 3\nmodel.dim=8\n\nsynth.seed = 11").unwrap();
        let mut t = TrainConfig::default();
        apply_train(&mut t, &kv).unwrap();
        assert_eq!(t.epochs, 3);
        let mut s = SynthConfig::default();
        apply_synth(&mut s, &kv).unwrap();
        assert_eq!(s.seed, 11);
    }

    #[test]
    fn errors_name_the_problem() {
        assert!(KeyValues::parse("no equals sign").is_err());
        let kv = KeyValues::parse("model.bogus = 1").unwrap();
        let err = apply_hyper(&mut HyperParams::default(), &kv).unwrap_err();
        assert!(err.to_string().contains("model.bogus"));
        let kv = KeyValues::parse("model.dim = many").unwrap();
        assert!(apply_hyper(&mut HyperParams::default(), &kv).is_err());
    }
}
