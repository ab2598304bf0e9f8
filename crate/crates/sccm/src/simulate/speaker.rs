//! Synthetic speakers: harmonic sources with per-speaker fundamental,
//! formant profile, and syllable-rate amplitude modulation. These stand in
//! for a real corpus so that speaker-discriminability is controllable and
//! generation is fully deterministic.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, SccmError};
use crate::signal::Waveform;

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct Formant {
    pub center_hz: f64,
    pub bandwidth_hz: f64,
    pub gain: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct SyntheticSpeaker {
    pub speaker_id: usize,
    pub f0_hz: f64,
    pub formants: Vec<Formant>,
    /// Syllable-like amplitude modulation rate.
    pub mod_rate_hz: f64,
    pub mod_depth: f64,
    pub seed: u64,
}

/// Minimum fundamental spacing between any two generated speakers.
pub const MIN_F0_SPACING_HZ: f64 = 5.0;

/// Deterministic speaker grid. `id_offset` shifts speaker ids (used to keep
/// open-condition test speakers disjoint from the training vocabulary), and
/// `grid_offset_hz` shifts the f0 grid so the voices themselves differ too.
pub fn speaker_grid(n: usize, id_offset: usize, grid_offset_hz: f64, base_seed: u64) -> Vec<SyntheticSpeaker> {
    let spacing = 9.0; // Hz between adjacent speakers, > MIN_F0_SPACING_HZ
    (0..n)
        .map(|i| {
            let speaker_id = id_offset + i;
            let mut rng = ChaCha8Rng::seed_from_u64(
                base_seed ^ 0x5eed_0000 ^ (speaker_id as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15),
            );
            let f0 = 95.0 + grid_offset_hz + spacing * i as f64;
            let formants = vec![
                Formant {
                    center_hz: rng.gen_range(320.0..900.0),
                    bandwidth_hz: rng.gen_range(60.0..120.0),
                    gain: 1.0,
                },
                Formant {
                    center_hz: rng.gen_range(1000.0..2200.0),
                    bandwidth_hz: rng.gen_range(90.0..180.0),
                    gain: rng.gen_range(0.4..0.8),
                },
                Formant {
                    center_hz: rng.gen_range(2400.0..3400.0),
                    bandwidth_hz: rng.gen_range(120.0..250.0),
                    gain: rng.gen_range(0.15..0.4),
                },
            ];
            SyntheticSpeaker {
                speaker_id,
                f0_hz: f0,
                formants,
                mod_rate_hz: rng.gen_range(2.0..4.5),
                mod_depth: rng.gen_range(0.35..0.55),
                seed: rng.gen(),
            }
        })
        .collect()
}

fn formant_envelope(spk: &SyntheticSpeaker, freq: f64) -> f64 {
    let mut env = 0.0;
    for f in &spk.formants {
        let d = (freq - f.center_hz) / f.bandwidth_hz;
        env += f.gain / (1.0 + d * d);
    }
    // Gentle spectral tilt plus a floor so high harmonics never vanish.
    env * (1.0 / (1.0 + (freq / 3000.0).powi(2))) + 0.01
}

/// Deterministic harmonic utterance for one speaker, peak-normalized to 0.9.
pub fn synth_utterance(
    spk: &SyntheticSpeaker,
    duration_s: f64,
    sample_rate: u32,
    seed: u64,
) -> Result<Waveform> {
    if !(0.5..=10.0).contains(&duration_s) {
        return Err(SccmError::Validation(format!(
            "utterance duration {duration_s} s outside [0.5, 10]"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spk.seed ^ seed.wrapping_mul(0xd134_2543_de82_ef95));
    let n = (duration_s * sample_rate as f64).round() as usize;
    let sr = sample_rate as f64;
    let nyquist = sr / 2.0;
    let n_harmonics = ((nyquist - 100.0) / spk.f0_hz).floor() as usize;

    let vibrato_rate = rng.gen_range(4.0..6.5);
    let vibrato_phase: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
    let mod_phase: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
    let harmonic_phases: Vec<f64> = (0..n_harmonics)
        .map(|_| rng.gen_range(0.0..std::f64::consts::TAU))
        .collect();
    let amps: Vec<f64> = (1..=n_harmonics)
        .map(|k| formant_envelope(spk, k as f64 * spk.f0_hz) / (k as f64).sqrt())
        .collect();

    let mut samples = vec![0.0f64; n];
    let mut phase = 0.0f64;
    for (t, s) in samples.iter_mut().enumerate() {
        let time = t as f64 / sr;
        let f0 = spk.f0_hz
            * (1.0 + 0.015 * (std::f64::consts::TAU * vibrato_rate * time + vibrato_phase).sin());
        phase += std::f64::consts::TAU * f0 / sr;
        let mut v = 0.0;
        for (k, (&a, &ph)) in amps.iter().zip(&harmonic_phases).enumerate() {
            v += a * ((k + 1) as f64 * phase + ph).sin();
        }
        let am = 1.0 - spk.mod_depth
            + spk.mod_depth
                * 0.5
                * (1.0 + (std::f64::consts::TAU * spk.mod_rate_hz * time + mod_phase).sin());
        *s = v * am;
    }
    let mut w = Waveform::new(samples, sample_rate)?;
    let peak = w.peak();
    if peak > 0.0 {
        w.scale(0.9 / peak);
    }
    Ok(w)
}
