//! Mono waveform container and 16-bit PCM WAV I/O.

use std::path::Path;

use crate::error::{Result, SccmError};

pub const DEFAULT_SAMPLE_RATE: u32 = 8000;

/// Mono sample sequence with its sample rate. Amplitudes are nominally in [-1, 1].
#[derive(Clone, Debug, PartialEq)]
pub struct Waveform {
    pub samples: Vec<f64>,
    pub sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Result<Self> {
        if sample_rate == 0 {
            return Err(SccmError::Validation("sample_rate must be > 0".into()));
        }
        if samples.iter().any(|s| !s.is_finite()) {
            return Err(SccmError::Validation(
                "waveform contains non-finite samples".into(),
            ));
        }
        Ok(Waveform {
            samples,
            sample_rate,
        })
    }

    pub fn zeros(len: usize, sample_rate: u32) -> Self {
        Waveform {
            samples: vec![0.0; len],
            sample_rate,
        }
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

    pub fn peak(&self) -> f64 {
        self.samples.iter().fold(0.0, |m, s| m.max(s.abs()))
    }

    /// Scale so the peak is at most `target` (no-op on silence or already-quiet audio).
    pub fn normalize_peak(&mut self, target: f64) {
        let p = self.peak();
        if p > target && p > 0.0 {
            let g = target / p;
            for s in &mut self.samples {
                *s *= g;
            }
        }
    }

    pub fn scale(&mut self, gain: f64) {
        for s in &mut self.samples {
            *s *= gain;
        }
    }

    /// Element-wise sum; lengths must match.
    pub fn add(&mut self, other: &Waveform) -> Result<()> {
        if self.len() != other.len() {
            return Err(SccmError::Shape(format!(
                "waveform length mismatch: {} vs {}",
                self.len(),
                other.len()
            )));
        }
        for (a, b) in self.samples.iter_mut().zip(&other.samples) {
            *a += *b;
        }
        Ok(())
    }

    pub fn slice(&self, start: usize, len: usize) -> Waveform {
        let end = (start + len).min(self.samples.len());
        Waveform {
            samples: self.samples[start.min(end)..end].to_vec(),
            sample_rate: self.sample_rate,
        }
    }

    /// Write as 16-bit PCM mono WAV. Samples are clamped to [-1, 1].
    pub fn save_wav(&self, path: impl AsRef<Path>) -> Result<()> {
        let spec = hound::WavSpec {
            channels: 1,
            sample_rate: self.sample_rate,
            bits_per_sample: 16,
            sample_format: hound::SampleFormat::Int,
        };
        let mut writer = hound::WavWriter::create(path.as_ref(), spec)?;
        for &s in &self.samples {
            let v = (s.clamp(-1.0, 1.0) * i16::MAX as f64).round() as i16;
            writer.write_sample(v)?;
        }
        writer.finalize()?;
        Ok(())
    }

    /// Read a 16-bit PCM mono WAV; peak-normalized to at most 1.0 on ingestion.
    pub fn load_wav(path: impl AsRef<Path>) -> Result<Self> {
        let reader = hound::WavReader::open(path.as_ref())?;
        let spec = reader.spec();
        if spec.channels != 1 {
            return Err(SccmError::Data(format!(
                "{}: expected mono, got {} channels",
                path.as_ref().display(),
                spec.channels
            )));
        }
        let samples: Vec<f64> = match spec.sample_format {
            hound::SampleFormat::Int => {
                let denom = (1i64 << (spec.bits_per_sample - 1)) as f64;
                reader
                    .into_samples::<i32>()
                    .map(|s| s.map(|v| v as f64 / denom))
                    .collect::<std::result::Result<_, _>>()?
            }
            hound::SampleFormat::Float => reader
                .into_samples::<f32>()
                .map(|s| s.map(|v| v as f64))
                .collect::<std::result::Result<_, _>>()?,
        };
        let mut w = Waveform::new(samples, spec.sample_rate)?;
        w.normalize_peak(1.0);
        Ok(w)
    }
}
