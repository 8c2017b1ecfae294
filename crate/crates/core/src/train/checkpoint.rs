//! Checkpoint file.
//!
//! Little-endian layout, following the feature-file conventions:
//!
//! ```text
//! "CLSW" | version u16 | flags u16
//! meta_len u32 | metadata (UTF-8 `key = value` lines)
//! n_blobs u32
//! n_blobs × { name_len u16 | name | ndim u32 | dims u32[ndim] | f32 data }
//! crc32 u32
//! ```
//!
//! Blobs hold the model parameters followed by the Adam moments
//! (`adam.m/<name>`, `adam.v/<name>`). Metadata records the configuration,
//! initialization scheme, optimizer step, epoch and loss curve.

use crate::config::{apply_hyper, apply_train, hyper_to_kv, train_to_kv, KeyValues};
use crate::data::{check_magic, verify_crc, FormatError, Reader};
use crate::model::{HyperParams, ModelParameters};
use crate::tensor::Tensor;

use super::adam::OptimizerState;
use super::{TrainConfig, TrainError};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"CLSW";
pub const CHECKPOINT_VERSION: u16 = 1;
pub const INIT_SCHEME: &str = "uniform(+-1/sqrt(fan_in)); layer-norm gain 1, bias 0";

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub hp: HyperParams,
    pub train: TrainConfig,
    pub params: ModelParameters,
    pub optimizer: OptimizerState,
    /// Completed epochs.
    pub epoch: usize,
    pub loss_curve: Vec<f64>,
}

fn push_blob(out: &mut Vec<u8>, name: &str, t: &Tensor) {
    out.extend_from_slice(&(name.len() as u16).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
    for &d in t.shape() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &v in t.data() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
}

pub fn write_checkpoint(ck: &Checkpoint) -> Vec<u8> {
    let mut kv = KeyValues::default();
    hyper_to_kv(&ck.hp, &mut kv);
    train_to_kv(&ck.train, &mut kv);
    kv.set("init.scheme", INIT_SCHEME);
    kv.set("state.epoch", ck.epoch);
    kv.set("state.step", ck.optimizer.step);
    let curve: Vec<String> = ck.loss_curve.iter().map(|v| v.to_string()).collect();
    kv.set("state.loss_curve", curve.join(","));
    let meta = kv.to_text();

    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&0u16.to_le_bytes());
    out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
    out.extend_from_slice(meta.as_bytes());
    let n = ck.params.len() * 3;
    out.extend_from_slice(&(n as u32).to_le_bytes());
    for (name, t) in ck.params.iter() {
        push_blob(&mut out, name, t);
    }
    for ((name, _), m) in ck.params.iter().zip(&ck.optimizer.first) {
        push_blob(&mut out, &format!("adam.m/{name}"), m);
    }
    for ((name, _), v) in ck.params.iter().zip(&ck.optimizer.second) {
        push_blob(&mut out, &format!("adam.v/{name}"), v);
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

fn malformed(msg: impl Into<String>) -> TrainError {
    TrainError::Checkpoint(FormatError::Malformed(msg.into()))
}

pub fn read_checkpoint(bytes: &[u8]) -> Result<Checkpoint, TrainError> {
    let mut r = Reader::new(bytes);
    check_magic(&mut r, CHECKPOINT_MAGIC, CHECKPOINT_VERSION)?;
    let body = verify_crc(bytes, 8)?;
    let mut r = Reader::new(body);
    r.take(8)?;
    let meta_len = r.u32()? as usize;
    let meta = r.utf8(meta_len)?;
    let kv = KeyValues::parse(&meta)?;

    let mut hp = HyperParams::default();
    apply_hyper(&mut hp, &kv)?;
    let mut train = TrainConfig::default();
    apply_train(&mut train, &kv)?;
    let epoch = kv
        .get("state.epoch")
        .ok_or_else(|| malformed("missing state.epoch"))?
        .parse()
        .map_err(|e| malformed(format!("state.epoch: {e}")))?;
    let step = kv
        .get("state.step")
        .ok_or_else(|| malformed("missing state.step"))?
        .parse()
        .map_err(|e| malformed(format!("state.step: {e}")))?;
    let loss_curve = match kv.get("state.loss_curve") {
        None | Some("") => Vec::new(),
        Some(s) => s
            .split(',')
            .map(|v| v.parse::<f64>().map_err(|e| malformed(format!("loss curve: {e}"))))
            .collect::<Result<_, _>>()?,
    };

    let n_blobs = r.u32()? as usize;
    let mut params = Vec::new();
    let mut first = Vec::new();
    let mut second = Vec::new();
    for _ in 0..n_blobs {
        let name_len = r.u16()? as usize;
        let name = r.utf8(name_len)?;
        let ndim = r.u32()? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(r.u32()? as usize);
        }
        let numel: usize = shape.iter().product();
        let data = r.f32s(numel)?.into_iter().map(f64::from).collect();
        let t = Tensor::new(shape, data).map_err(|e| malformed(e.to_string()))?;
        if let Some(p) = name.strip_prefix("adam.m/") {
            first.push((p.to_string(), t));
        } else if let Some(p) = name.strip_prefix("adam.v/") {
            second.push((p.to_string(), t));
        } else {
            params.push((name, t));
        }
    }
    if r.pos() != body.len() {
        return Err(malformed("trailing bytes after blobs"));
    }

    let params = ModelParameters::from_named(&hp, params)?;
    let order: Vec<&str> = params.iter().map(|(n, _)| n).collect();
    let align = |named: Vec<(String, Tensor)>, which: &str| -> Result<Vec<Tensor>, TrainError> {
        let names: Vec<&str> = named.iter().map(|(n, _)| n.as_str()).collect();
        if names != order {
            return Err(malformed(format!("{which} moments do not match the parameter list")));
        }
        Ok(named.into_iter().map(|(_, t)| t).collect())
    };
    let optimizer = OptimizerState {
        first: align(first, "first")?,
        second: align(second, "second")?,
        step,
    };
    Ok(Checkpoint {
        hp,
        train,
        params,
        optimizer,
        epoch,
        loss_curve,
    })
}
