//! Scale-invariant SNR and its improvement variant.
//!
//! Both signals are mean-removed, the estimate is projected onto the
//! reference, and the ratio of projection energy to residual energy is
//! reported in dB: 10*log10(|s_t|^2 / (|e|^2 + eps)) with eps = 1e-8.

use crate::error::{Result, SccmError};
use crate::signal::waveform::Waveform;

pub const SI_SNR_EPS: f64 = 1e-8;

fn check_pair(estimate: &Waveform, reference: &Waveform) -> Result<()> {
    if estimate.len() != reference.len() {
        return Err(SccmError::Shape(format!(
            "length mismatch: estimate {} vs reference {}",
            estimate.len(),
            reference.len()
        )));
    }
    if estimate.is_empty() {
        return Err(SccmError::Validation("empty signals".into()));
    }
    Ok(())
}

pub fn si_snr(estimate: &Waveform, reference: &Waveform) -> Result<f64> {
    check_pair(estimate, reference)?;
    let n = reference.len() as f64;
    let mean_e: f64 = estimate.samples.iter().sum::<f64>() / n;
    let mean_r: f64 = reference.samples.iter().sum::<f64>() / n;
    let mut est_energy = 0.0;
    let mut ref_energy = 0.0;
    for (&e, &r) in estimate.samples.iter().zip(&reference.samples) {
        est_energy += (e - mean_e) * (e - mean_e);
        ref_energy += (r - mean_r) * (r - mean_r);
    }
    if ref_energy == 0.0 {
        return Err(SccmError::Validation(
            "undefined reference: zero after mean removal".into(),
        ));
    }
    // Unit-normalizing the mean-removed estimate leaves the value unchanged in
    // exact arithmetic but makes scale invariance exact despite the eps term.
    let est_scale = if est_energy > 0.0 {
        1.0 / est_energy.sqrt()
    } else {
        0.0
    };
    let mut dot = 0.0;
    for (&e, &r) in estimate.samples.iter().zip(&reference.samples) {
        dot += (e - mean_e) * est_scale * (r - mean_r);
    }
    let alpha = dot / ref_energy;
    let mut target_energy = 0.0;
    let mut error_energy = 0.0;
    for (&e, &r) in estimate.samples.iter().zip(&reference.samples) {
        let t = alpha * (r - mean_r);
        target_energy += t * t;
        let err = (e - mean_e) * est_scale - t;
        error_energy += err * err;
    }
    Ok(10.0 * (target_energy / (error_energy + SI_SNR_EPS)).log10())
}

pub fn si_snr_improvement(
    mixture: &Waveform,
    estimate: &Waveform,
    reference: &Waveform,
) -> Result<f64> {
    check_pair(mixture, reference)?;
    Ok(si_snr(estimate, reference)? - si_snr(mixture, reference)?)
}
