//! Per-utterance feature cache files.
//!
//! Layout: magic `MELF`, version u32, n_frames u32, n_mels u32, then
//! row-major f32 values, all little-endian.

use std::fs;
use std::path::Path;

use crate::audio::MelSpectrogram;
use crate::{CoreError, Result};

const MAGIC: &[u8; 4] = b"MELF";
const VERSION: u32 = 1;

pub fn write_feature_cache(path: &Path, mel: &MelSpectrogram) -> Result<()> {
    let mut bytes = Vec::with_capacity(16 + mel.values().len() * 4);
    bytes.extend_from_slice(MAGIC);
    bytes.extend_from_slice(&VERSION.to_le_bytes());
    bytes.extend_from_slice(&(mel.n_frames() as u32).to_le_bytes());
    bytes.extend_from_slice(&(mel.n_mels() as u32).to_le_bytes());
    for &v in mel.values() {
        bytes.extend_from_slice(&(v as f32).to_le_bytes());
    }
    fs::write(path, bytes)?;
    Ok(())
}

pub fn read_feature_cache(path: &Path) -> Result<MelSpectrogram> {
    let bytes = fs::read(path)
        .map_err(|e| CoreError::Audio(format!("cannot read cache {}: {e}", path.display())))?;
    if bytes.len() < 16 || &bytes[0..4] != MAGIC {
        return Err(CoreError::Audio(format!(
            "{} is not a feature cache",
            path.display()
        )));
    }
    let word = |off: usize| u32::from_le_bytes(bytes[off..off + 4].try_into().unwrap());
    if word(4) != VERSION {
        return Err(CoreError::Audio(format!(
            "unsupported cache version {}",
            word(4)
        )));
    }
    let n_frames = word(8) as usize;
    let n_mels = word(12) as usize;
    let expected = 16 + n_frames * n_mels * 4;
    if bytes.len() != expected {
        return Err(CoreError::Audio(format!(
            "cache {} has {} bytes, expected {expected}",
            path.display(),
            bytes.len()
        )));
    }
    let values: Vec<f64> = bytes[16..]
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
        .collect();
    MelSpectrogram::new(n_frames, n_mels, values)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_preserves_f32_values() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("u.melf");
        let values: Vec<f64> = (0..6).map(|i| i as f64 * 0.25 - 0.7).collect();
        let mel = MelSpectrogram::new(2, 3, values.clone()).unwrap();
        write_feature_cache(&path, &mel).unwrap();
        let back = read_feature_cache(&path).unwrap();
        assert_eq!(back.n_frames(), 2);
        assert_eq!(back.n_mels(), 3);
        for (a, b) in back.values().iter().zip(&values) {
            assert_eq!(*a, *b as f32 as f64);
        }
    }

    #[test]
    fn rejects_corrupt_files() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.melf");
        std::fs::write(&path, b"MELFxxxx").unwrap();
        assert!(read_feature_cache(&path).is_err());
        std::fs::write(&path, b"NOPE").unwrap();
        assert!(read_feature_cache(&path).is_err());
    }
}
