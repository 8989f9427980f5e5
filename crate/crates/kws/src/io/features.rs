//! The "KWSF" feature file: a T x D matrix of 32-bit little-endian reals.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::FeatureSequence;

const MAGIC: &[u8; 4] = b"KWSF";
const VERSION: u32 = 1;

fn format_err(path: &Path, reason: impl Into<String>) -> Error {
    Error::Format {
        path: path.display().to_string(),
        reason: reason.into(),
    }
}

pub fn write_features(path: &Path, feats: &FeatureSequence) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(feats.frames() as u32).to_le_bytes())?;
    w.write_all(&(feats.dim() as u32).to_le_bytes())?;
    for &v in feats.data() {
        w.write_all(&(v as f32).to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_features(path: &Path) -> Result<FeatureSequence> {
    let mut r = BufReader::new(File::open(path)?);
    let mut head = [0u8; 16];
    r.read_exact(&mut head)
        .map_err(|_| format_err(path, "truncated header"))?;
    if &head[0..4] != MAGIC {
        return Err(format_err(path, "bad magic"));
    }
    let version = u32::from_le_bytes(head[4..8].try_into().unwrap());
    if version != VERSION {
        return Err(format_err(path, format!("unsupported version {version}")));
    }
    let frames = u32::from_le_bytes(head[8..12].try_into().unwrap()) as usize;
    let dim = u32::from_le_bytes(head[12..16].try_into().unwrap()) as usize;
    let mut body = Vec::new();
    r.read_to_end(&mut body)?;
    if body.len() != frames * dim * 4 {
        return Err(format_err(
            path,
            format!(
                "expected {} payload bytes, found {}",
                frames * dim * 4,
                body.len()
            ),
        ));
    }
    let data = body
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64)
        .collect();
    FeatureSequence::from_vec(frames, dim, data)
}
