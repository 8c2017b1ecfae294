//! Binary feature file.
//!
//! Little-endian layout:
//!
//! ```text
//! "CLSP" | version u16 | flags u16 | id_len u16 | id (UTF-8)
//! T0 u32 | d_a u32 | d_v u32 | C u32 | N_gt u32
//! audio  f32[T0 * d_a]   row-major
//! visual f32[T0 * d_v]   row-major
//! label  u8[C]           0 or 1
//! gt     (u32 start, u32 end, u32 category)[N_gt]
//! crc32  u32             over every preceding byte
//! ```

use thiserror::Error;

use super::record::{FeatureMatrix, GtInstance, VideoRecord};

pub const FEATURE_MAGIC: &[u8; 4] = b"CLSP";
pub const FEATURE_VERSION: u16 = 1;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FormatError {
    #[error("bad magic {0:?}")]
    BadMagic([u8; 4]),
    #[error("unsupported version {found} (expected {expected})")]
    Version { found: u16, expected: u16 },
    #[error("truncated payload: need {needed} bytes, have {have}")]
    Truncated { needed: usize, have: usize },
    #[error("checksum mismatch: stored {stored:#010x}, computed {computed:#010x}")]
    Checksum { stored: u32, computed: u32 },
    #[error("malformed content: {0}")]
    Malformed(String),
}

/// Little-endian cursor over a byte slice.
pub(crate) struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub(crate) fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, pos: 0 }
    }

    pub(crate) fn pos(&self) -> usize {
        self.pos
    }

    pub(crate) fn take(&mut self, n: usize) -> Result<&'a [u8], FormatError> {
        let end = self.pos.checked_add(n).ok_or(FormatError::Truncated {
            needed: usize::MAX,
            have: self.bytes.len(),
        })?;
        if end > self.bytes.len() {
            return Err(FormatError::Truncated {
                needed: end,
                have: self.bytes.len(),
            });
        }
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    pub(crate) fn u16(&mut self) -> Result<u16, FormatError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    pub(crate) fn u32(&mut self) -> Result<u32, FormatError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub(crate) fn f32s(&mut self, n: usize) -> Result<Vec<f32>, FormatError> {
        let bytes = self.take(n.checked_mul(4).ok_or(FormatError::Truncated {
            needed: usize::MAX,
            have: self.bytes.len(),
        })?)?;
        Ok(bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    pub(crate) fn utf8(&mut self, n: usize) -> Result<String, FormatError> {
        let b = self.take(n)?;
        String::from_utf8(b.to_vec()).map_err(|e| FormatError::Malformed(format!("invalid UTF-8: {e}")))
    }
}

/// Splits off and verifies the CRC32 trailer, returning the body.
pub(crate) fn verify_crc(bytes: &[u8], needed: usize) -> Result<&[u8], FormatError> {
    if bytes.len() < needed + 4 {
        return Err(FormatError::Truncated {
            needed: needed + 4,
            have: bytes.len(),
        });
    }
    let (body, rest) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(rest.try_into().unwrap());
    let computed = crc32fast::hash(body);
    if stored != computed {
        return Err(FormatError::Checksum { stored, computed });
    }
    Ok(body)
}

pub(crate) fn check_magic(r: &mut Reader<'_>, magic: &[u8; 4], version: u16) -> Result<(), FormatError> {
    let m = r.take(4)?;
    if m != magic {
        return Err(FormatError::BadMagic(m.try_into().unwrap()));
    }
    let found = r.u16()?;
    if found != version {
        return Err(FormatError::Version {
            found,
            expected: version,
        });
    }
    Ok(())
}

pub fn write_feature_file(rec: &VideoRecord) -> Vec<u8> {
    let id = rec.id.as_bytes();
    assert!(id.len() <= u16::MAX as usize, "video id too long");
    let mut out = Vec::with_capacity(
        32 + id.len() + 4 * (rec.audio.data().len() + rec.visual.data().len()) + rec.label.len() + 12 * rec.gt.len(),
    );
    out.extend_from_slice(FEATURE_MAGIC);
    out.extend_from_slice(&FEATURE_VERSION.to_le_bytes());
    out.extend_from_slice(&0u16.to_le_bytes());
    out.extend_from_slice(&(id.len() as u16).to_le_bytes());
    out.extend_from_slice(id);
    for v in [
        rec.audio.rows(),
        rec.audio.cols(),
        rec.visual.cols(),
        rec.label.len(),
        rec.gt.len(),
    ] {
        out.extend_from_slice(&(v as u32).to_le_bytes());
    }
    for v in rec.audio.data().iter().chain(rec.visual.data()) {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out.extend(rec.label.iter().map(|&b| u8::from(b)));
    for g in &rec.gt {
        for v in [g.start, g.end, g.category] {
            out.extend_from_slice(&(v as u32).to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

pub fn read_feature_file(bytes: &[u8]) -> Result<VideoRecord, FormatError> {
    let mut r = Reader::new(bytes);
    check_magic(&mut r, FEATURE_MAGIC, FEATURE_VERSION)?;
    let _flags = r.u16()?;
    let id_len = r.u16()? as usize;
    r.take(id_len)?;
    let t0 = r.u32()? as usize;
    let da = r.u32()? as usize;
    let dv = r.u32()? as usize;
    let c = r.u32()? as usize;
    let n_gt = r.u32()? as usize;
    let payload = t0
        .checked_mul(da + dv)
        .and_then(|x| x.checked_mul(4))
        .and_then(|x| x.checked_add(c))
        .and_then(|x| x.checked_add(n_gt.checked_mul(12)?))
        .ok_or_else(|| FormatError::Malformed("header sizes overflow".into()))?;
    let needed = r
        .pos()
        .checked_add(payload)
        .ok_or_else(|| FormatError::Malformed("header sizes overflow".into()))?;
    let body = verify_crc(bytes, needed)?;
    if body.len() != needed {
        return Err(FormatError::Malformed(format!(
            "{} trailing bytes before checksum",
            body.len() - needed
        )));
    }

    // re-read the verified body
    let mut r = Reader::new(body);
    r.take(10)?;
    let id = r.utf8(id_len)?;
    r.take(20)?;
    let audio = r.f32s(t0 * da)?;
    let visual = r.f32s(t0 * dv)?;
    let label = r
        .take(c)?
        .iter()
        .map(|&b| match b {
            0 => Ok(false),
            1 => Ok(true),
            other => Err(FormatError::Malformed(format!("label byte {other}"))),
        })
        .collect::<Result<Vec<_>, _>>()?;
    let mut gt = Vec::with_capacity(n_gt);
    for _ in 0..n_gt {
        let start = r.u32()? as usize;
        let end = r.u32()? as usize;
        let category = r.u32()? as usize;
        gt.push(GtInstance::new(start, end, category));
    }
    let rec = VideoRecord {
        id,
        audio: FeatureMatrix::new(t0, da, audio).map_err(|e| FormatError::Malformed(e.to_string()))?,
        visual: FeatureMatrix::new(t0, dv, visual).map_err(|e| FormatError::Malformed(e.to_string()))?,
        label,
        gt,
    };
    rec.check_structure()
        .map_err(|e| FormatError::Malformed(e.to_string()))?;
    Ok(rec)
}
