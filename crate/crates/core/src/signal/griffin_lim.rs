use rand::Rng;
use rustfft::num_complex::Complex;

use super::stft::Framer;
use super::{LinearSpectrogram, Waveform};
use crate::error::{Error, Result};

#[derive(Clone, Debug)]
pub struct GriffinLimResult {
    pub wave: Waveform,
    /// Spectral convergence error of each iterate; the last entry belongs to
    /// the returned waveform.
    pub errors: Vec<f64>,
}

/// One-sided spectra stand for full Hermitian ones, so interior bins count
/// twice in every norm.
fn bin_weight(k: usize, fft_size: usize) -> f64 {
    if k == 0 || 2 * k == fft_size {
        1.0
    } else {
        2.0
    }
}

/// Phase reconstruction by alternating projections between the target
/// magnitudes and the set of consistent STFTs. Iterates on the padded
/// signal domain so the consistency projection is an exact least-squares
/// inverse, which keeps the error sequence non-increasing.
pub fn griffin_lim<R: Rng + ?Sized>(mag: &LinearSpectrogram, iterations: usize, rng: &mut R) -> Result<GriffinLimResult> {
    if iterations == 0 {
        return Err(Error::Signal("griffin-lim needs at least one iteration".into()));
    }
    if let Some(i) = mag.magnitudes.iter().position(|m| !m.is_finite()) {
        return Err(Error::Signal(format!("non-finite magnitude at cell {i}")));
    }
    let cfg = &mag.config;
    let framer = Framer::new(cfg)?;
    let bins = framer.bins();
    if mag.bins != bins || mag.magnitudes.len() != mag.frames * bins {
        return Err(Error::Signal(format!("magnitude layout {}x{} does not match {bins} bins", mag.frames, mag.bins)));
    }
    let frames = mag.frames;
    let weights: Vec<f64> = (0..bins).map(|k| bin_weight(k, framer.fft_size)).collect();
    let target_norm = mag
        .magnitudes
        .iter()
        .enumerate()
        .map(|(i, m)| weights[i % bins] * m * m)
        .sum::<f64>()
        .sqrt();

    let mut spec: Vec<Complex<f64>> = mag
        .magnitudes
        .iter()
        .map(|&m| Complex::from_polar(m, rng.gen::<f64>() * 2.0 * std::f64::consts::PI))
        .collect();
    let mut signal = Vec::new();
    let mut errors = Vec::with_capacity(iterations);
    for _ in 0..iterations {
        signal = framer.synthesise(&spec, frames);
        framer.analyse(&signal, frames, &mut spec);
        let mut err = 0.0;
        for (i, (c, &m)) in spec.iter_mut().zip(&mag.magnitudes).enumerate() {
            let a = c.norm();
            err += weights[i % bins] * (a - m) * (a - m);
            *c = if a > 0.0 { *c * (m / a) } else { Complex::new(m, 0.0) };
        }
        errors.push(if target_norm > 0.0 { err.sqrt() / target_norm } else { 0.0 });
    }

    let pad = framer.pad();
    let len = frames * framer.hop;
    let samples = (0..len).map(|i| signal.get(pad + i).copied().unwrap_or(0.0) as f32).collect();
    Ok(GriffinLimResult { wave: Waveform::new(samples, cfg.sample_rate)?, errors })
}
