//! The `LDNS` binary dataset format.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic "LDNS" | u32 version=1 | u32 vocabulary_size | u32 D_v | u32 D_a
//! | u8 frames_flag | u64 record_count
//! per record:
//!   u16 id_len | id (UTF-8) | D_v f32 video | D_a f32 audio
//!   | [frames_flag: u32 T | T*(D_v+D_a) f32]
//!   | u16 n_noisy | n_noisy u32 | u8 clean_flag | [u16 n_clean | n_clean u32]
//! ```
//!
//! Features are stored as f32 and widen to f64 in memory, so a write/load
//! round trip is bit-exact when the in-memory values are f32-representable
//! (the synthetic generator quantizes accordingly).

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use crate::diffcore::Tensor;
use crate::error::{Error, Result};

use super::{Dataset, VideoRecord};

const MAGIC: &[u8; 4] = b"LDNS";
const VERSION: u32 = 1;

pub fn write_dataset(path: &Path, dataset: &Dataset) -> Result<()> {
    dataset.validate()?;
    let mut buf: Vec<u8> = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&dataset.vocabulary_size.to_le_bytes());
    buf.extend_from_slice(&(dataset.d_v as u32).to_le_bytes());
    buf.extend_from_slice(&(dataset.d_a as u32).to_le_bytes());
    buf.push(dataset.has_frames() as u8);
    buf.extend_from_slice(&(dataset.records.len() as u64).to_le_bytes());

    for r in &dataset.records {
        let id_bytes = r.id.as_bytes();
        if id_bytes.len() > u16::MAX as usize {
            return Err(Error::input(format!("record id too long: '{}'", r.id)));
        }
        buf.extend_from_slice(&(id_bytes.len() as u16).to_le_bytes());
        buf.extend_from_slice(id_bytes);
        for &v in r.video_feat.iter().chain(&r.audio_feat) {
            buf.extend_from_slice(&(v as f32).to_le_bytes());
        }
        if let Some(frames) = &r.frames {
            buf.extend_from_slice(&(frames.shape()[0] as u32).to_le_bytes());
            for &v in frames.data() {
                buf.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        write_label_set(&mut buf, &r.noisy_labels)?;
        match &r.clean_labels {
            Some(clean) => {
                buf.push(1);
                write_label_set(&mut buf, clean)?;
            }
            None => buf.push(0),
        }
    }
    fs::write(path, buf)?;
    Ok(())
}

fn write_label_set(buf: &mut Vec<u8>, labels: &BTreeSet<u32>) -> Result<()> {
    if labels.len() > u16::MAX as usize {
        return Err(Error::input("label set too large for format"));
    }
    buf.extend_from_slice(&(labels.len() as u16).to_le_bytes());
    for &l in labels {
        buf.extend_from_slice(&l.to_le_bytes());
    }
    Ok(())
}

/// Byte reader that reports the offset of any truncation.
struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::format(format!(
                "truncated file: wanted {n} bytes at offset {}, file has {}",
                self.pos,
                self.bytes.len()
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f32_vec(&mut self, n: usize) -> Result<Vec<f64>> {
        let raw = self.take(n * 4)?;
        let mut out = Vec::with_capacity(n);
        for chunk in raw.chunks_exact(4) {
            let v = f32::from_le_bytes(chunk.try_into().unwrap());
            if !v.is_finite() {
                return Err(Error::format(format!(
                    "non-finite feature value at offset {}",
                    self.pos
                )));
            }
            out.push(v as f64);
        }
        Ok(out)
    }

    fn label_set(&mut self, vocab: u32) -> Result<BTreeSet<u32>> {
        let n = self.u16()? as usize;
        let mut set = BTreeSet::new();
        for _ in 0..n {
            let l = self.u32()?;
            if l >= vocab {
                return Err(Error::format(format!(
                    "label {l} outside vocabulary {vocab} at offset {}",
                    self.pos
                )));
            }
            set.insert(l);
        }
        Ok(set)
    }
}

pub fn load_dataset(path: &Path) -> Result<Dataset> {
    let bytes = fs::read(path)?;
    let mut r = Reader {
        bytes: &bytes,
        pos: 0,
    };

    if r.take(4)? != MAGIC {
        return Err(Error::format(format!(
            "bad magic in '{}': expected LDNS",
            path.display()
        )));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::format(format!(
            "unsupported dataset version {version} (expected {VERSION})"
        )));
    }
    let vocab = r.u32()?;
    let d_v = r.u32()? as usize;
    let d_a = r.u32()? as usize;
    let frames_flag = r.u8()?;
    if frames_flag > 1 {
        return Err(Error::format(format!("invalid frames flag {frames_flag}")));
    }
    let count = r.u64()? as usize;

    let mut records = Vec::with_capacity(count);
    for _ in 0..count {
        let id_len = r.u16()? as usize;
        let id = std::str::from_utf8(r.take(id_len)?)
            .map_err(|_| Error::format(format!("invalid UTF-8 record id at offset {}", r.pos)))?
            .to_string();
        let video_feat = r.f32_vec(d_v)?;
        let audio_feat = r.f32_vec(d_a)?;
        let frames = if frames_flag == 1 {
            let t = r.u32()? as usize;
            if t == 0 {
                return Err(Error::format(format!(
                    "record '{id}': zero-length frame sequence at offset {}",
                    r.pos
                )));
            }
            let data = r.f32_vec(t * (d_v + d_a))?;
            Some(Tensor::new(vec![t, d_v + d_a], data).map_err(|e| Error::format(e.to_string()))?)
        } else {
            None
        };
        let noisy_labels = r.label_set(vocab)?;
        let clean_flag = r.u8()?;
        let clean_labels = match clean_flag {
            0 => None,
            1 => Some(r.label_set(vocab)?),
            other => {
                return Err(Error::format(format!("invalid clean flag {other}")));
            }
        };
        records.push(VideoRecord {
            id,
            video_feat,
            audio_feat,
            frames,
            noisy_labels,
            clean_labels,
        });
    }
    if r.pos != bytes.len() {
        return Err(Error::format(format!(
            "{} trailing bytes after record {count}",
            bytes.len() - r.pos
        )));
    }

    let dataset = Dataset {
        vocabulary_size: vocab,
        d_v,
        d_a,
        records,
        groups: None,
    };
    dataset
        .validate()
        .map_err(|e| Error::format(e.to_string()))?;
    Ok(dataset)
}
