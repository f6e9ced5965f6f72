//! The `LDNC` final-model container: the frozen student model files, the
//! head model file, and a size manifest.
//!
//! ```text
//! magic "LDNC" | u32 version=1 | u32 student_count
//! per student: u64 byte_len | embedded LDNM bytes
//! | u64 head_len | embedded LDNM head bytes
//! ```

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::models::{model_from_bytes, model_to_bytes};

use super::FinalModel;

const MAGIC: &[u8; 4] = b"LDNC";
const VERSION: u32 = 1;

/// Size breakdown written alongside the container.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct FinalModelManifest {
    pub total_bytes: u64,
    pub student_bytes: Vec<u64>,
    pub head_bytes: u64,
}

pub fn final_model_to_bytes(final_model: &FinalModel) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(final_model.students.len() as u32).to_le_bytes());
    for s in &final_model.students {
        let bytes = model_to_bytes(s)?;
        buf.extend_from_slice(&(bytes.len() as u64).to_le_bytes());
        buf.extend_from_slice(&bytes);
    }
    let head = model_to_bytes(&final_model.head)?;
    buf.extend_from_slice(&(head.len() as u64).to_le_bytes());
    buf.extend_from_slice(&head);
    Ok(buf)
}

/// Write the container; returns the manifest with the size breakdown.
pub fn write_final_model(path: &Path, final_model: &FinalModel) -> Result<FinalModelManifest> {
    let bytes = final_model_to_bytes(final_model)?;
    let student_bytes = final_model
        .students
        .iter()
        .map(|s| model_to_bytes(s).map(|b| b.len() as u64))
        .collect::<Result<Vec<_>>>()?;
    let head_bytes = model_to_bytes(&final_model.head)?.len() as u64;
    fs::write(path, &bytes)?;
    Ok(FinalModelManifest {
        total_bytes: bytes.len() as u64,
        student_bytes,
        head_bytes,
    })
}

pub fn read_final_model(path: &Path) -> Result<FinalModel> {
    let bytes = fs::read(path)?;
    let mut pos = 0usize;
    let take = |pos: &mut usize, n: usize| -> Result<&[u8]> {
        if *pos + n > bytes.len() {
            return Err(Error::format(format!(
                "truncated final model at offset {} (wanted {n} bytes)",
                *pos
            )));
        }
        let s = &bytes[*pos..*pos + n];
        *pos += n;
        Ok(s)
    };
    if take(&mut pos, 4)? != MAGIC {
        return Err(Error::format("bad magic: expected LDNC"));
    }
    let version = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap());
    if version != VERSION {
        return Err(Error::format(format!(
            "unsupported container version {version}"
        )));
    }
    let count = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
    let mut students = Vec::with_capacity(count);
    for _ in 0..count {
        let len = u64::from_le_bytes(take(&mut pos, 8)?.try_into().unwrap()) as usize;
        students.push(model_from_bytes(take(&mut pos, len)?)?);
    }
    let len = u64::from_le_bytes(take(&mut pos, 8)?.try_into().unwrap()) as usize;
    let head = model_from_bytes(take(&mut pos, len)?)?;
    if pos != bytes.len() {
        return Err(Error::format(format!(
            "{} trailing bytes in final model container",
            bytes.len() - pos
        )));
    }
    Ok(FinalModel { students, head })
}
