//! Minimal RIFF/WAVE reader and writer for PCM-16 mono 16 kHz files.

use std::fs;
use std::path::Path;

use crate::audio::{WaveForm, SAMPLE_RATE};
use crate::{CoreError, Result};

fn u16_at(bytes: &[u8], off: usize) -> Result<u16> {
    bytes
        .get(off..off + 2)
        .map(|b| u16::from_le_bytes([b[0], b[1]]))
        .ok_or_else(|| CoreError::Audio("truncated WAV header".into()))
}

fn u32_at(bytes: &[u8], off: usize) -> Result<u32> {
    bytes
        .get(off..off + 4)
        .map(|b| u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| CoreError::Audio("truncated WAV header".into()))
}

/// Load a PCM-16 mono 16 kHz RIFF/WAVE file. Integer samples are scaled by
/// 1/32768 into [-1, 1).
pub fn load_wav(path: &Path) -> Result<WaveForm> {
    let bytes = fs::read(path)
        .map_err(|e| CoreError::Audio(format!("cannot read {}: {e}", path.display())))?;
    if bytes.len() < 12 || &bytes[0..4] != b"RIFF" || &bytes[8..12] != b"WAVE" {
        return Err(CoreError::Audio(format!(
            "{} is not a RIFF/WAVE file",
            path.display()
        )));
    }

    let mut fmt: Option<(u16, u16, u32, u16)> = None; // format, channels, rate, bits
    let mut data: Option<&[u8]> = None;
    let mut off = 12;
    while off + 8 <= bytes.len() {
        let id = &bytes[off..off + 4];
        let size = u32_at(&bytes, off + 4)? as usize;
        let body = off + 8;
        if body + size > bytes.len() {
            return Err(CoreError::Audio(format!(
                "chunk {:?} overruns file",
                String::from_utf8_lossy(id)
            )));
        }
        match id {
            b"fmt " => {
                if size < 16 {
                    return Err(CoreError::Audio("fmt chunk too small".into()));
                }
                fmt = Some((
                    u16_at(&bytes, body)?,
                    u16_at(&bytes, body + 2)?,
                    u32_at(&bytes, body + 4)?,
                    u16_at(&bytes, body + 14)?,
                ));
            }
            b"data" => data = Some(&bytes[body..body + size]),
            _ => {} // skip ancillary chunks (LIST, fact, ...)
        }
        off = body + size + (size & 1); // chunks are word-aligned
    }

    let (format, channels, rate, bits) =
        fmt.ok_or_else(|| CoreError::Audio("missing fmt chunk".into()))?;
    if format != 1 {
        return Err(CoreError::Audio(format!(
            "unsupported WAV format tag {format}, expected PCM (1)"
        )));
    }
    if channels != 1 {
        return Err(CoreError::Audio(format!(
            "expected mono audio, got {channels} channels"
        )));
    }
    if rate != SAMPLE_RATE {
        return Err(CoreError::Audio(format!(
            "expected {SAMPLE_RATE} Hz, got {rate} Hz"
        )));
    }
    if bits != 16 {
        return Err(CoreError::Audio(format!(
            "expected 16-bit samples, got {bits}-bit"
        )));
    }

    let data = data.ok_or_else(|| CoreError::Audio("missing data chunk".into()))?;
    let samples: Vec<f64> = data
        .chunks_exact(2)
        .map(|b| i16::from_le_bytes([b[0], b[1]]) as f64 / 32768.0)
        .collect();
    WaveForm::new(samples, SAMPLE_RATE)
}

/// Write samples as a PCM-16 mono 16 kHz WAV. Values are clamped to
/// [-1, 1) before quantization.
pub fn write_wav(path: &Path, samples: &[f64]) -> Result<()> {
    let n = samples.len();
    let data_size = (n * 2) as u32;
    let mut bytes = Vec::with_capacity(44 + n * 2);
    bytes.extend_from_slice(b"RIFF");
    bytes.extend_from_slice(&(36 + data_size).to_le_bytes());
    bytes.extend_from_slice(b"WAVE");
    bytes.extend_from_slice(b"fmt ");
    bytes.extend_from_slice(&16u32.to_le_bytes());
    bytes.extend_from_slice(&1u16.to_le_bytes()); // PCM
    bytes.extend_from_slice(&1u16.to_le_bytes()); // mono
    bytes.extend_from_slice(&SAMPLE_RATE.to_le_bytes());
    bytes.extend_from_slice(&(SAMPLE_RATE * 2).to_le_bytes()); // byte rate
    bytes.extend_from_slice(&2u16.to_le_bytes()); // block align
    bytes.extend_from_slice(&16u16.to_le_bytes()); // bits
    bytes.extend_from_slice(b"data");
    bytes.extend_from_slice(&data_size.to_le_bytes());
    for &s in samples {
        let q = (s.clamp(-1.0, 32767.0 / 32768.0) * 32768.0).round() as i16;
        bytes.extend_from_slice(&q.to_le_bytes());
    }
    fs::write(path, bytes)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn wav_bytes(format: u16, channels: u16, rate: u32, bits: u16, pcm: &[i16]) -> Vec<u8> {
        let data_size = (pcm.len() * 2) as u32;
        let mut b = Vec::new();
        b.extend_from_slice(b"RIFF");
        b.extend_from_slice(&(36 + data_size).to_le_bytes());
        b.extend_from_slice(b"WAVE");
        b.extend_from_slice(b"fmt ");
        b.extend_from_slice(&16u32.to_le_bytes());
        b.extend_from_slice(&format.to_le_bytes());
        b.extend_from_slice(&channels.to_le_bytes());
        b.extend_from_slice(&rate.to_le_bytes());
        b.extend_from_slice(&(rate * 2).to_le_bytes());
        b.extend_from_slice(&2u16.to_le_bytes());
        b.extend_from_slice(&bits.to_le_bytes());
        b.extend_from_slice(b"data");
        b.extend_from_slice(&data_size.to_le_bytes());
        for &s in pcm {
            b.extend_from_slice(&s.to_le_bytes());
        }
        b
    }

    fn write_temp(bytes: &[u8]) -> tempfile::NamedTempFile {
        use std::io::Write;
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(bytes).unwrap();
        f
    }

    #[test]
    fn pcm_scaling_is_1_over_32768() {
        let f = write_temp(&wav_bytes(1, 1, 16000, 16, &[16384, -32768, 0]));
        let w = load_wav(f.path()).unwrap();
        assert_eq!(w.samples(), &[0.5, -1.0, 0.0]);
    }

    #[test]
    fn stereo_is_rejected() {
        let f = write_temp(&wav_bytes(1, 2, 16000, 16, &[0, 0]));
        let err = load_wav(f.path()).unwrap_err().to_string();
        assert!(err.contains("channels"), "{err}");
    }

    #[test]
    fn wrong_rate_and_depth_are_rejected() {
        let f = write_temp(&wav_bytes(1, 1, 44100, 16, &[0]));
        assert!(load_wav(f.path()).is_err());
        let f = write_temp(&wav_bytes(1, 1, 16000, 8, &[0]));
        assert!(load_wav(f.path()).is_err());
        let f = write_temp(&wav_bytes(3, 1, 16000, 16, &[0]));
        assert!(load_wav(f.path()).is_err());
    }

    #[test]
    fn malformed_header_is_rejected() {
        let f = write_temp(b"RIFX0000WAVE");
        assert!(load_wav(f.path()).is_err());
    }

    #[test]
    fn write_read_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.wav");
        let samples: Vec<f64> = (0..100).map(|i| (i as f64 / 100.0) - 0.5).collect();
        write_wav(&path, &samples).unwrap();
        let w = load_wav(&path).unwrap();
        assert_eq!(w.len(), 100);
        for (a, b) in w.samples().iter().zip(&samples) {
            assert!((a - b).abs() < 1.0 / 32768.0, "{a} vs {b}");
        }
    }
}
