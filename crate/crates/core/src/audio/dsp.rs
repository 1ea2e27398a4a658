//! Silence trimming, spectra, and the mel filterbank.

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use crate::audio::{FrontendConfig, MelSpectrogram, WaveForm, SAMPLE_RATE};
use crate::{CoreError, Result};

/// Periodic Hann window: `w[n] = 0.5 (1 - cos(2 pi n / len))`.
pub fn hann_window(len: usize) -> Vec<f64> {
    (0..len)
        .map(|n| 0.5 * (1.0 - (std::f64::consts::TAU * n as f64 / len as f64).cos()))
        .collect()
}

/// HTK mel scale: `2595 log10(1 + f/700)`.
pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// One-sided power spectrum |X[k]|^2, k in `0..=fft_size/2`, of an
/// already-windowed frame zero-padded to `fft_size`.
pub fn power_spectrum(frame: &[f64], fft_size: usize) -> Result<Vec<f64>> {
    if frame.len() > fft_size {
        return Err(CoreError::Audio(format!(
            "frame of {} samples exceeds fft_size {fft_size}",
            frame.len()
        )));
    }
    let mut buf: Vec<Complex<f64>> = frame
        .iter()
        .map(|&s| Complex::new(s, 0.0))
        .chain(std::iter::repeat(Complex::new(0.0, 0.0)))
        .take(fft_size)
        .collect();
    let mut planner = FftPlanner::new();
    planner.plan_fft_forward(fft_size).process(&mut buf);
    Ok(buf[..=fft_size / 2].iter().map(|c| c.norm_sqr()).collect())
}

/// Remove leading and trailing frames whose RMS level is more than
/// `trim_threshold_db` below the loudest frame. Frames follow the analysis
/// window/hop, so the cut points carry up to one hop of slack.
pub fn trim_silence(wave: &WaveForm, config: &FrontendConfig) -> Result<WaveForm> {
    config.validate()?;
    let samples = wave.samples();
    let window = config.window_samples().min(samples.len());
    let hop = config.hop_samples();

    let n_frames = 1 + (samples.len() - window) / hop;
    let rms: Vec<f64> = (0..n_frames)
        .map(|f| {
            let s = &samples[f * hop..(f * hop + window).min(samples.len())];
            (s.iter().map(|v| v * v).sum::<f64>() / s.len() as f64).sqrt()
        })
        .collect();
    let peak = rms.iter().cloned().fold(0.0, f64::max);
    if peak <= 0.0 {
        return Err(CoreError::Audio("entirely silent input".into()));
    }
    let threshold_db = 20.0 * peak.log10() - config.trim_threshold_db;
    let loud = |r: f64| r > 0.0 && 20.0 * r.log10() >= threshold_db;

    let first = rms.iter().position(|&r| loud(r)).unwrap();
    let last = rms.iter().rposition(|&r| loud(r)).unwrap();
    let start = first * hop;
    // a loud final frame keeps the tail samples no frame fully covers
    let end = if last == n_frames - 1 {
        samples.len()
    } else {
        last * hop + window
    };
    WaveForm::new(samples[start..end].to_vec(), wave.sample_rate())
}

/// Triangular mel filterbank, `n_mels x (fft_size/2 + 1)` row-major.
///
/// Filter centers are uniformly spaced on the mel scale between `fmin` and
/// `fmax` and snapped to FFT bins; filter `m` rises over bins
/// `(edge[m], center[m]]`, peaks at exactly 1.0 on its center bin, and
/// falls over `[center[m], edge[m+2])`. A filter whose three snapped edges
/// coincide would be empty, which means `n_mels` is too large for the FFT
/// resolution.
pub fn mel_filterbank_matrix(config: &FrontendConfig) -> Result<Vec<f64>> {
    config.validate()?;
    let n_bins = config.fft_size / 2 + 1;
    let n_mels = config.n_mels;

    let mel_lo = hz_to_mel(config.fmin);
    let mel_hi = hz_to_mel(config.fmax);
    let bin_of = |mel: f64| -> usize {
        let hz = mel_to_hz(mel);
        ((hz * config.fft_size as f64 / SAMPLE_RATE as f64).round() as usize).min(n_bins - 1)
    };
    let edges: Vec<usize> = (0..n_mels + 2)
        .map(|i| bin_of(mel_lo + (mel_hi - mel_lo) * i as f64 / (n_mels + 1) as f64))
        .collect();

    let mut matrix = vec![0.0; n_mels * n_bins];
    for m in 0..n_mels {
        let (l, c, r) = (edges[m], edges[m + 1], edges[m + 2]);
        if l == c && c == r {
            return Err(CoreError::Audio(format!(
                "mel filter {m} is empty: {n_mels} bands exceed the resolution of a {}-point FFT",
                config.fft_size
            )));
        }
        let row = &mut matrix[m * n_bins..(m + 1) * n_bins];
        for k in l + 1..=c {
            row[k] = (k - l) as f64 / (c - l) as f64;
        }
        for k in c..r {
            row[k] = (r - k) as f64 / (r - c) as f64;
        }
        if c > l {
            row[c] = 1.0;
        }
    }
    Ok(matrix)
}

/// Center frequencies (Hz) of the mel filters, before bin snapping.
pub fn mel_center_frequencies(config: &FrontendConfig) -> Vec<f64> {
    let mel_lo = hz_to_mel(config.fmin);
    let mel_hi = hz_to_mel(config.fmax);
    (1..=config.n_mels)
        .map(|i| mel_to_hz(mel_lo + (mel_hi - mel_lo) * i as f64 / (config.n_mels + 1) as f64))
        .collect()
}

/// Extract the log-mel matrix of a trimmed waveform.
///
/// Per frame: Hann window -> zero-padded power spectrum -> filterbank
/// product -> `ln(max(e, 1e-10))`. The caller applies normalization via
/// [`MelSpectrogram::normalized`] when the config asks for it.
pub fn extract_logmel(wave: &WaveForm, config: &FrontendConfig) -> Result<MelSpectrogram> {
    config.validate()?;
    let window = config.window_samples();
    let hop = config.hop_samples();
    let samples = wave.samples();
    let n_frames = config.frame_count(samples.len()).ok_or_else(|| {
        CoreError::Audio(format!(
            "waveform of {} samples is shorter than one {window}-sample window",
            samples.len()
        ))
    })?;

    let hann = hann_window(window);
    let filters = mel_filterbank_matrix(config)?;
    let n_bins = config.fft_size / 2 + 1;

    let mut planner = FftPlanner::new();
    let fft = planner.plan_fft_forward(config.fft_size);
    let mut values = Vec::with_capacity(n_frames * config.n_mels);
    let mut buf = vec![Complex::new(0.0, 0.0); config.fft_size];
    for f in 0..n_frames {
        let frame = &samples[f * hop..f * hop + window];
        for (i, slot) in buf.iter_mut().enumerate() {
            *slot = if i < window {
                Complex::new(frame[i] * hann[i], 0.0)
            } else {
                Complex::new(0.0, 0.0)
            };
        }
        fft.process(&mut buf);
        let power: Vec<f64> = buf[..n_bins].iter().map(|c| c.norm_sqr()).collect();
        for m in 0..config.n_mels {
            let row = &filters[m * n_bins..(m + 1) * n_bins];
            let energy: f64 = row
                .iter()
                .zip(&power)
                .map(|(&w, &p)| if w > 0.0 { w * p } else { 0.0 })
                .sum();
            values.push(energy.max(1e-10).ln());
        }
    }
    MelSpectrogram::new(n_frames, config.n_mels, values)
}
