use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};

use super::{MelConfig, Waveform};
use crate::error::{Error, Result};

/// Complex one-sided STFT, `frames × bins`.
#[derive(Clone, Debug, PartialEq)]
pub struct Spectrogram {
    pub data: Vec<Complex<f64>>,
    pub frames: usize,
    pub bins: usize,
}

impl Spectrogram {
    pub fn magnitudes(&self) -> Vec<f64> {
        self.data.iter().map(|c| c.norm()).collect()
    }
}

/// Window, hop, and FFT plans shared by analysis and resynthesis.
pub(crate) struct Framer {
    pub window: Vec<f64>,
    pub hop: usize,
    pub fft_size: usize,
    forward: Arc<dyn Fft<f64>>,
    inverse: Arc<dyn Fft<f64>>,
}

impl Framer {
    pub fn new(cfg: &MelConfig) -> Result<Self> {
        let frame = cfg.frame_size();
        if frame > cfg.fft_size {
            return Err(Error::Signal(format!("frame of {frame} samples exceeds fft size {}", cfg.fft_size)));
        }
        if frame == 0 || cfg.hop() == 0 {
            return Err(Error::Signal("frame size and step must be at least one sample".into()));
        }
        let window = (0..frame)
            .map(|n| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * n as f64 / frame as f64).cos())
            .collect();
        let mut planner = FftPlanner::new();
        Ok(Framer {
            window,
            hop: cfg.hop(),
            fft_size: cfg.fft_size,
            forward: planner.plan_fft_forward(cfg.fft_size),
            inverse: planner.plan_fft_inverse(cfg.fft_size),
        })
    }

    pub fn frame_len(&self) -> usize {
        self.window.len()
    }

    pub fn bins(&self) -> usize {
        self.fft_size / 2 + 1
    }

    /// Left padding applied before framing.
    pub fn pad(&self) -> usize {
        self.frame_len() / 2
    }

    /// Frame count for a signal of `len` samples.
    pub fn num_frames(len: usize, hop: usize) -> usize {
        len.div_ceil(hop)
    }

    /// Length of the padded-domain signal covered by `frames` frames.
    pub fn padded_len(&self, frames: usize) -> usize {
        if frames == 0 {
            0
        } else {
            (frames - 1) * self.hop + self.frame_len()
        }
    }

    /// Analyses an already padded signal: frame `t` covers
    /// `padded[t·hop .. t·hop + frame]`.
    pub fn analyse(&self, padded: &[f64], frames: usize, out: &mut [Complex<f64>]) {
        let bins = self.bins();
        let mut buf = vec![Complex::new(0.0, 0.0); self.fft_size];
        for t in 0..frames {
            buf.iter_mut().for_each(|c| *c = Complex::new(0.0, 0.0));
            let start = t * self.hop;
            for (n, w) in self.window.iter().enumerate() {
                buf[n] = Complex::new(padded[start + n] * w, 0.0);
            }
            self.forward.process(&mut buf);
            out[t * bins..(t + 1) * bins].copy_from_slice(&buf[..bins]);
        }
    }

    /// Least-squares signal whose framing best matches the given one-sided
    /// spectra (zero where no window weight reaches).
    pub fn synthesise(&self, spec: &[Complex<f64>], frames: usize) -> Vec<f64> {
        let bins = self.bins();
        let n_fft = self.fft_size;
        let mut out = vec![0.0; self.padded_len(frames)];
        let mut norm = vec![0.0; out.len()];
        let mut buf = vec![Complex::new(0.0, 0.0); n_fft];
        for t in 0..frames {
            let row = &spec[t * bins..(t + 1) * bins];
            buf[..bins].copy_from_slice(row);
            // Hermitian completion so the inverse is real.
            buf[0].im = 0.0;
            if n_fft % 2 == 0 {
                buf[n_fft / 2].im = 0.0;
            }
            for k in bins..n_fft {
                buf[k] = buf[n_fft - k].conj();
            }
            self.inverse.process(&mut buf);
            let start = t * self.hop;
            for (n, w) in self.window.iter().enumerate() {
                out[start + n] += w * buf[n].re / n_fft as f64;
                norm[start + n] += w * w;
            }
        }
        for (o, n) in out.iter_mut().zip(&norm) {
            *o = if *n > 1e-10 { *o / n } else { 0.0 };
        }
        out
    }
}

/// Mirror index into `[0, len)` for any integer position.
fn reflect(i: isize, len: usize) -> usize {
    if len == 1 {
        return 0;
    }
    let period = 2 * (len as isize - 1);
    let m = i.rem_euclid(period);
    if m < len as isize {
        m as usize
    } else {
        (period - m) as usize
    }
}

/// Centered STFT with reflection padding: `ceil(len / hop)` frames, frame
/// `t` centered on sample `t·hop`.
pub fn stft(wave: &Waveform, cfg: &MelConfig) -> Result<Spectrogram> {
    if wave.samples.is_empty() {
        return Err(Error::Signal("empty waveform".into()));
    }
    if wave.sample_rate != cfg.sample_rate {
        return Err(Error::Signal(format!(
            "waveform at {} Hz analysed with a {} Hz config",
            wave.sample_rate, cfg.sample_rate
        )));
    }
    let framer = Framer::new(cfg)?;
    let frames = Framer::num_frames(wave.samples.len(), framer.hop);
    let pad = framer.pad() as isize;
    let padded: Vec<f64> = (0..framer.padded_len(frames))
        .map(|i| wave.samples[reflect(i as isize - pad, wave.samples.len())] as f64)
        .collect();
    let bins = framer.bins();
    let mut data = vec![Complex::new(0.0, 0.0); frames * bins];
    framer.analyse(&padded, frames, &mut data);
    Ok(Spectrogram { data, frames, bins })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reflection_mirrors_without_repeating_edges() {
        let got: Vec<usize> = (-3..7).map(|i| reflect(i, 4)).collect();
        assert_eq!(got, vec![3, 2, 1, 0, 1, 2, 3, 2, 1, 0]);
    }

    #[test]
    fn frame_count_is_ceiling_of_length_over_hop() {
        let cfg = MelConfig::new(8000, 40, 20.0, 3800.0, 50.0, 12.5);
        for len in [1usize, 99, 100, 101, 1000] {
            let w = Waveform::new(vec![0.1; len], 8000).unwrap();
            assert_eq!(stft(&w, &cfg).unwrap().frames, len.div_ceil(100));
        }
    }

    #[test]
    fn exact_bin_sinusoid_has_one_dominant_bin() {
        let cfg = MelConfig::new(8000, 40, 20.0, 3800.0, 64.0, 16.0);
        assert_eq!(cfg.fft_size, 512);
        // bin 40 of 512 at 8 kHz; the frame holds an integer number of cycles
        let freq = 40.0 * 8000.0 / 512.0;
        let n = 8000;
        let s = (0..n).map(|i| (0.5 * (2.0 * std::f64::consts::PI * freq * i as f64 / 8000.0).cos()) as f32).collect();
        let spec = stft(&Waveform::new(s, 8000).unwrap(), &cfg).unwrap();
        let mags = spec.magnitudes();
        for t in 2..spec.frames - 2 {
            let row = &mags[t * spec.bins..(t + 1) * spec.bins];
            let (argmax, peak) = row.iter().enumerate().fold((0, 0.0), |a, (k, &m)| if m > a.1 { (k, m) } else { a });
            assert_eq!(argmax, 40, "frame {t}");
            // Hann sidelobes sit at half the peak in the neighbours only
            for (k, &m) in row.iter().enumerate() {
                if k.abs_diff(40) > 1 {
                    assert!(m < 1e-6 * peak, "frame {t} bin {k}: {m} vs {peak}");
                }
            }
        }
    }

    #[test]
    fn silence_has_zero_magnitude() {
        let cfg = MelConfig::new(16_000, 80, 125.0, 7600.0, 25.0, 10.0);
        let spec = stft(&Waveform::new(vec![0.0; 1600], 16_000).unwrap(), &cfg).unwrap();
        assert_eq!(spec.frames, 10);
        assert!(spec.magnitudes().iter().all(|&m| m == 0.0));
    }

    #[test]
    fn oversized_frame_is_rejected() {
        let mut cfg = MelConfig::new(16_000, 80, 125.0, 7600.0, 25.0, 10.0);
        cfg.fft_size = 256;
        let w = Waveform::new(vec![0.0; 1600], 16_000).unwrap();
        assert!(stft(&w, &cfg).is_err());
    }

    #[test]
    fn synthesis_inverts_analysis_in_the_padded_domain() {
        let cfg = MelConfig::new(8000, 40, 20.0, 3800.0, 50.0, 12.5);
        let framer = Framer::new(&cfg).unwrap();
        let frames = 12;
        let len = framer.padded_len(frames);
        let x: Vec<f64> = (0..len).map(|i| ((i * 7919) % 101) as f64 / 50.0 - 1.0).collect();
        let mut spec = vec![Complex::new(0.0, 0.0); frames * framer.bins()];
        framer.analyse(&x, frames, &mut spec);
        let y = framer.synthesise(&spec, frames);
        // the first sample has zero window weight under a periodic Hann
        for i in 1..len {
            assert!((x[i] - y[i]).abs() < 1e-9, "sample {i}");
        }
    }
}
