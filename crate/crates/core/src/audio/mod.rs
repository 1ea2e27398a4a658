//! WAV ingestion and 80-band log-mel feature extraction.
//!
//! The pipeline is: PCM-16 mono 16 kHz WAV -> energy-based silence trim ->
//! framed Hann-windowed power spectra (25 ms window, 10 ms hop, 512-point
//! FFT) -> triangular mel filterbank -> natural log with a 1e-10 floor ->
//! optional per-utterance mean/variance normalization.

mod cache;
mod dsp;
mod wav;

pub use cache::{read_feature_cache, write_feature_cache};
pub use dsp::{
    extract_logmel, hann_window, hz_to_mel, mel_center_frequencies, mel_filterbank_matrix,
    mel_to_hz, power_spectrum, trim_silence,
};
pub use wav::{load_wav, write_wav};

use crate::{CoreError, Result};

/// The only sample rate the pipeline accepts.
pub const SAMPLE_RATE: u32 = 16_000;

/// Mono waveform with samples in [-1, 1] at 16 kHz.
#[derive(Debug, Clone)]
pub struct WaveForm {
    samples: Vec<f64>,
    sample_rate: u32,
}

impl WaveForm {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Result<Self> {
        if sample_rate != SAMPLE_RATE {
            return Err(CoreError::Audio(format!(
                "sample rate {sample_rate} Hz unsupported, expected {SAMPLE_RATE}"
            )));
        }
        if samples.is_empty() {
            return Err(CoreError::Audio("empty waveform".into()));
        }
        if samples.iter().any(|s| !s.is_finite() || s.abs() > 1.0) {
            return Err(CoreError::Audio("samples outside [-1, 1]".into()));
        }
        Ok(Self {
            samples,
            sample_rate,
        })
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_s(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }
}

/// Feature-extraction settings. The defaults are the documented pipeline
/// constants; the paper fixes only the window, hop, and band count.
#[derive(Debug, Clone, PartialEq)]
pub struct FrontendConfig {
    pub window_ms: usize,
    pub hop_ms: usize,
    pub n_mels: usize,
    pub fft_size: usize,
    pub fmin: f64,
    pub fmax: f64,
    /// Frames this many dB below the peak frame count as silence.
    pub trim_threshold_db: f64,
    /// Utterances longer than this after trimming are excluded upstream.
    pub max_duration_s: f64,
    /// Per-utterance mean/variance normalization of the log-mels.
    pub normalize: bool,
}

impl Default for FrontendConfig {
    fn default() -> Self {
        Self {
            window_ms: 25,
            hop_ms: 10,
            n_mels: 80,
            fft_size: 512,
            fmin: 0.0,
            fmax: 8000.0,
            trim_threshold_db: 40.0,
            max_duration_s: 10.0,
            normalize: true,
        }
    }
}

impl FrontendConfig {
    pub fn validate(&self) -> Result<()> {
        if self.window_samples() == 0 || self.hop_samples() == 0 {
            return Err(CoreError::Audio("window/hop must be positive".into()));
        }
        if self.fft_size < self.window_samples() {
            return Err(CoreError::Audio(format!(
                "fft_size {} smaller than window of {} samples",
                self.fft_size,
                self.window_samples()
            )));
        }
        if !(self.fmin >= 0.0 && self.fmin < self.fmax && self.fmax <= SAMPLE_RATE as f64 / 2.0) {
            return Err(CoreError::Audio(format!(
                "require 0 <= fmin < fmax <= {}, got [{}, {}]",
                SAMPLE_RATE / 2,
                self.fmin,
                self.fmax
            )));
        }
        if self.n_mels == 0 {
            return Err(CoreError::Audio("n_mels must be positive".into()));
        }
        Ok(())
    }

    pub fn window_samples(&self) -> usize {
        SAMPLE_RATE as usize * self.window_ms / 1000
    }

    pub fn hop_samples(&self) -> usize {
        SAMPLE_RATE as usize * self.hop_ms / 1000
    }

    /// Frames produced by a trimmed wave of `len` samples:
    /// `1 + floor((len - window) / hop)`.
    pub fn frame_count(&self, len: usize) -> Option<usize> {
        if len < self.window_samples() {
            None
        } else {
            Some(1 + (len - self.window_samples()) / self.hop_samples())
        }
    }
}

/// Log-mel feature matrix for one utterance, `n_frames x n_mels` row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct MelSpectrogram {
    values: Vec<f64>,
    n_frames: usize,
    n_mels: usize,
}

impl MelSpectrogram {
    pub fn new(n_frames: usize, n_mels: usize, values: Vec<f64>) -> Result<Self> {
        if n_frames == 0 || n_mels == 0 || values.len() != n_frames * n_mels {
            return Err(CoreError::Audio(format!(
                "bad mel matrix: {n_frames} x {n_mels} with {} values",
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(CoreError::NonFinite { op: "mel" });
        }
        Ok(Self {
            values,
            n_frames,
            n_mels,
        })
    }

    pub fn n_frames(&self) -> usize {
        self.n_frames
    }

    pub fn n_mels(&self) -> usize {
        self.n_mels
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn frame(&self, i: usize) -> &[f64] {
        &self.values[i * self.n_mels..(i + 1) * self.n_mels]
    }

    /// Per-utterance, per-coefficient mean/variance normalization.
    pub fn normalized(&self) -> MelSpectrogram {
        let n = self.n_frames as f64;
        let mut out = self.values.clone();
        for m in 0..self.n_mels {
            let mut mean = 0.0;
            for f in 0..self.n_frames {
                mean += self.values[f * self.n_mels + m];
            }
            mean /= n;
            let mut var = 0.0;
            for f in 0..self.n_frames {
                let d = self.values[f * self.n_mels + m] - mean;
                var += d * d;
            }
            var /= n;
            let inv = 1.0 / (var.sqrt() + 1e-8);
            for f in 0..self.n_frames {
                out[f * self.n_mels + m] = (self.values[f * self.n_mels + m] - mean) * inv;
            }
        }
        MelSpectrogram {
            values: out,
            n_frames: self.n_frames,
            n_mels: self.n_mels,
        }
    }
}
