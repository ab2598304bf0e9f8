//! Waveform and spectrogram primitives plus the SI-SNR metric family.

pub mod metrics;
pub mod stft;
pub mod waveform;

pub use metrics::{si_snr, si_snr_improvement, SI_SNR_EPS};
pub use stft::{sine_window, stft_magnitude, MagnitudeSpectrogram, StftConfig};
pub use waveform::{Waveform, DEFAULT_SAMPLE_RATE};
