//! Sine-window STFT magnitude features.
//!
//! Framing is plain: no centering, no zero padding, trailing partial frame
//! dropped, so a T-sample input yields exactly
//! `floor((T - frame_len) / hop) + 1` frames.

use ndarray::Array2;
use rustfft::{num_complex::Complex, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Result, SccmError};
use crate::signal::waveform::Waveform;

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct StftConfig {
    pub window_ms: f64,
    pub hop_ms: f64,
    pub window_name: String,
    /// Apply log(1 + x) compression to magnitudes before the inference net.
    #[serde(default)]
    pub log_magnitude: bool,
}

impl Default for StftConfig {
    fn default() -> Self {
        StftConfig {
            window_ms: 32.0,
            hop_ms: 8.0,
            window_name: "sine".into(),
            log_magnitude: false,
        }
    }
}

impl StftConfig {
    pub fn frame_len(&self, sample_rate: u32) -> usize {
        (self.window_ms * sample_rate as f64 / 1000.0).round() as usize
    }

    pub fn hop(&self, sample_rate: u32) -> usize {
        (self.hop_ms * sample_rate as f64 / 1000.0).round() as usize
    }

    /// Number of frequency bins: fft_size/2 + 1 with fft_size = frame length.
    pub fn n_bins(&self, sample_rate: u32) -> usize {
        self.frame_len(sample_rate) / 2 + 1
    }
}

/// Non-negative magnitude frames, shape T̃ × F (row per frame).
#[derive(Clone, Debug)]
pub struct MagnitudeSpectrogram {
    pub frames: Array2<f64>,
    pub frame_length_ms: f64,
    pub hop_ms: f64,
    pub window: String,
}

impl MagnitudeSpectrogram {
    pub fn n_frames(&self) -> usize {
        self.frames.nrows()
    }

    pub fn n_bins(&self) -> usize {
        self.frames.ncols()
    }

    /// F × T̃ layout (column per frame), the orientation the inference net consumes.
    pub fn as_feature_matrix(&self) -> Array2<f64> {
        self.frames.t().to_owned()
    }
}

/// Sine window: w[n] = sin(pi * (n + 0.5) / L).
pub fn sine_window(len: usize) -> Vec<f64> {
    (0..len)
        .map(|n| (std::f64::consts::PI * (n as f64 + 0.5) / len as f64).sin())
        .collect()
}

pub fn stft_magnitude(w: &Waveform, cfg: &StftConfig) -> Result<MagnitudeSpectrogram> {
    if w.samples.iter().any(|s| !s.is_finite()) {
        return Err(SccmError::Validation("non-finite samples in input".into()));
    }
    if cfg.window_name != "sine" {
        return Err(SccmError::Config(format!(
            "unsupported window: {:?} (only \"sine\" is implemented)",
            cfg.window_name
        )));
    }
    let frame_len = cfg.frame_len(w.sample_rate);
    let hop = cfg.hop(w.sample_rate);
    if frame_len == 0 || hop == 0 {
        return Err(SccmError::Config(
            "window/hop too short for sample rate".into(),
        ));
    }
    if w.len() < frame_len {
        return Err(SccmError::Data(format!(
            "input too short: {} samples < one frame of {}",
            w.len(),
            frame_len
        )));
    }
    let n_frames = (w.len() - frame_len) / hop + 1;
    let n_bins = frame_len / 2 + 1;
    let window = sine_window(frame_len);

    let mut planner = FftPlanner::new();
    let fft = planner.plan_fft_forward(frame_len);
    let mut frames = Array2::zeros((n_frames, n_bins));
    let mut buf = vec![Complex::new(0.0, 0.0); frame_len];
    for t in 0..n_frames {
        let start = t * hop;
        for n in 0..frame_len {
            buf[n] = Complex::new(w.samples[start + n] * window[n], 0.0);
        }
        fft.process(&mut buf);
        for f in 0..n_bins {
            let mag = buf[f].norm();
            frames[[t, f]] = if cfg.log_magnitude {
                (1.0 + mag).ln()
            } else {
                mag
            };
        }
    }
    Ok(MagnitudeSpectrogram {
        frames,
        frame_length_ms: cfg.window_ms,
        hop_ms: cfg.hop_ms,
        window: cfg.window_name.clone(),
    })
}
