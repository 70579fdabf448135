//! Waveform / spectrogram conversion.
//!
//! Analysis: centered Hann-window STFT (reflection padding) → magnitude →
//! HTK triangular mel filterbank → natural log with a floor. Synthesis goes
//! the other way through a transpose-based filterbank inverse and
//! Griffin-Lim phase reconstruction.

mod griffin_lim;
mod io;
mod stft;

pub use griffin_lim::{griffin_lim, GriffinLimResult};
pub use io::{read_mel, read_wav, write_mel, write_wav};
pub use stft::{stft, Spectrogram};

use crate::error::{Error, Result};

/// Mono audio with samples nominally in `[-1, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Waveform {
    pub samples: Vec<f32>,
    pub sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f32>, sample_rate: u32) -> Result<Self> {
        if sample_rate == 0 {
            return Err(Error::Signal("sample rate must be positive".into()));
        }
        if let Some(i) = samples.iter().position(|s| !s.is_finite()) {
            return Err(Error::Signal(format!("non-finite sample at index {i}")));
        }
        Ok(Waveform { samples, sample_rate })
    }

    pub fn duration_seconds(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }
}

/// Feature extraction settings shared by analysis and synthesis.
#[derive(Clone, Debug, PartialEq)]
pub struct MelConfig {
    pub sample_rate: u32,
    pub n_mels: usize,
    pub lower_hz: f64,
    pub upper_hz: f64,
    pub frame_size_ms: f64,
    pub frame_step_ms: f64,
    pub fft_size: usize,
    pub log_floor: f64,
}

pub const DEFAULT_LOG_FLOOR: f64 = 1e-5;

impl MelConfig {
    /// Builds a config with `fft_size` = next power of two ≥ the frame size.
    pub fn new(
        sample_rate: u32,
        n_mels: usize,
        lower_hz: f64,
        upper_hz: f64,
        frame_size_ms: f64,
        frame_step_ms: f64,
    ) -> Self {
        let frame = ms_to_samples(frame_size_ms, sample_rate);
        MelConfig {
            sample_rate,
            n_mels,
            lower_hz,
            upper_hz,
            frame_size_ms,
            frame_step_ms,
            fft_size: frame.max(1).next_power_of_two(),
            log_floor: DEFAULT_LOG_FLOOR,
        }
    }

    pub fn frame_size(&self) -> usize {
        ms_to_samples(self.frame_size_ms, self.sample_rate)
    }

    pub fn hop(&self) -> usize {
        ms_to_samples(self.frame_step_ms, self.sample_rate)
    }

    pub fn num_bins(&self) -> usize {
        self.fft_size / 2 + 1
    }

    pub fn frame_step_seconds(&self) -> f64 {
        self.frame_step_ms / 1000.0
    }

    pub fn log_floor_value(&self) -> f32 {
        self.log_floor.ln() as f32
    }

    pub fn validate(&self) -> Result<()> {
        let nyquist = self.sample_rate as f64 / 2.0;
        if self.sample_rate == 0 || self.n_mels == 0 {
            return Err(Error::Signal("sample rate and mel channel count must be positive".into()));
        }
        if !(self.lower_hz > 0.0 && self.lower_hz < self.upper_hz && self.upper_hz <= nyquist) {
            return Err(Error::Signal(format!(
                "mel band must satisfy 0 < lower ({}) < upper ({}) <= nyquist ({nyquist})",
                self.lower_hz, self.upper_hz
            )));
        }
        if self.hop() == 0 || self.frame_size() == 0 {
            return Err(Error::Signal("frame size and step must be at least one sample".into()));
        }
        if self.frame_size() > self.fft_size {
            return Err(Error::Signal(format!(
                "frame of {} samples exceeds fft size {}",
                self.frame_size(),
                self.fft_size
            )));
        }
        if !(self.log_floor > 0.0) {
            return Err(Error::Signal("log floor must be positive".into()));
        }
        Ok(())
    }

    /// `key=value` lines, one per field.
    pub fn to_kv(&self) -> Vec<(String, String)> {
        vec![
            ("sample_rate".into(), self.sample_rate.to_string()),
            ("n_mels".into(), self.n_mels.to_string()),
            ("lower_hz".into(), self.lower_hz.to_string()),
            ("upper_hz".into(), self.upper_hz.to_string()),
            ("frame_size_ms".into(), self.frame_size_ms.to_string()),
            ("frame_step_ms".into(), self.frame_step_ms.to_string()),
            ("fft_size".into(), self.fft_size.to_string()),
            ("log_floor".into(), self.log_floor.to_string()),
        ]
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn p<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
            v.trim().parse().map_err(|_| Error::Config(format!("bad value {v:?} for {key}")))
        }
        match key {
            "sample_rate" => self.sample_rate = p(key, value)?,
            "n_mels" => self.n_mels = p(key, value)?,
            "lower_hz" => self.lower_hz = p(key, value)?,
            "upper_hz" => self.upper_hz = p(key, value)?,
            "frame_size_ms" => self.frame_size_ms = p(key, value)?,
            "frame_step_ms" => self.frame_step_ms = p(key, value)?,
            "fft_size" => self.fft_size = p(key, value)?,
            "log_floor" => self.log_floor = p(key, value)?,
            _ => return Err(Error::Config(format!("unknown mel key {key}"))),
        }
        Ok(())
    }
}

fn ms_to_samples(ms: f64, sample_rate: u32) -> usize {
    (ms * sample_rate as f64 / 1000.0).round() as usize
}

/// Log-mel features, `frames × n_mels`, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct MelSpectrogram {
    pub frames: Vec<f32>,
    pub num_frames: usize,
    pub config: MelConfig,
}

impl MelSpectrogram {
    pub fn new(frames: Vec<f32>, num_frames: usize, config: MelConfig) -> Result<Self> {
        if frames.len() != num_frames * config.n_mels {
            return Err(Error::Signal(format!(
                "{} values for {num_frames} frames of {} channels",
                frames.len(),
                config.n_mels
            )));
        }
        Ok(MelSpectrogram { frames, num_frames, config })
    }

    /// All-floor spectrogram (silence).
    pub fn silence(num_frames: usize, config: MelConfig) -> Self {
        let v = config.log_floor_value();
        MelSpectrogram { frames: vec![v; num_frames * config.n_mels], num_frames, config }
    }

    pub fn channels(&self) -> usize {
        self.config.n_mels
    }

    pub fn row(&self, t: usize) -> &[f32] {
        let c = self.channels();
        &self.frames[t * c..(t + 1) * c]
    }

    pub fn duration_seconds(&self) -> f64 {
        self.num_frames as f64 * self.config.frame_step_seconds()
    }

    /// Frames `[start, start + len)`.
    pub fn segment(&self, start: usize, len: usize) -> MelSpectrogram {
        let c = self.channels();
        MelSpectrogram {
            frames: self.frames[start * c..(start + len) * c].to_vec(),
            num_frames: len,
            config: self.config.clone(),
        }
    }

    /// True when every channel of frame `t` sits at the log floor.
    pub fn is_silent_frame(&self, t: usize) -> bool {
        let floor = self.config.log_floor_value();
        self.row(t).iter().all(|&v| v <= floor + 1e-6)
    }
}

/// HTK mel scale.
pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Triangular filters, `n_mels × num_bins`, unit peak, edges equally spaced
/// on the mel scale between `lower_hz` and `upper_hz`.
#[derive(Clone, Debug, PartialEq)]
pub struct MelFilterbank {
    pub config: MelConfig,
    pub weights: Vec<f64>,
}

impl MelFilterbank {
    pub fn new(config: &MelConfig) -> Result<Self> {
        config.validate()?;
        let bins = config.num_bins();
        let n = config.n_mels;
        let (lo, hi) = (hz_to_mel(config.lower_hz), hz_to_mel(config.upper_hz));
        let edges: Vec<f64> = (0..n + 2).map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / (n + 1) as f64)).collect();
        let bin_hz = config.sample_rate as f64 / config.fft_size as f64;
        let mut weights = vec![0.0; n * bins];
        for m in 0..n {
            let (l, c, r) = (edges[m], edges[m + 1], edges[m + 2]);
            for k in 0..bins {
                let f = k as f64 * bin_hz;
                let w = if f > l && f <= c {
                    (f - l) / (c - l)
                } else if f > c && f < r {
                    (r - f) / (r - c)
                } else {
                    0.0
                };
                weights[m * bins + k] = w;
            }
        }
        Ok(MelFilterbank { config: config.clone(), weights })
    }

    pub fn num_bins(&self) -> usize {
        self.config.num_bins()
    }

    pub fn row(&self, m: usize) -> &[f64] {
        let b = self.num_bins();
        &self.weights[m * b..(m + 1) * b]
    }

    /// Linear mel energies of one magnitude frame.
    pub fn apply(&self, magnitude: &[f64], out: &mut [f64]) {
        for (m, o) in out.iter_mut().enumerate() {
            *o = self.row(m).iter().zip(magnitude).map(|(w, x)| w * x).sum();
        }
    }

    /// Transpose-then-normalize inverse: each channel's energy is spread
    /// back over its support as a flat level (energy / row sum), then every
    /// bin takes the filter-weighted average of the levels covering it.
    /// Reproduces locally flat spectra exactly; output is nonnegative.
    pub fn invert(&self, energies: &[f64], out: &mut [f64]) {
        let b = self.num_bins();
        out.iter_mut().for_each(|v| *v = 0.0);
        let mut norm = vec![0.0; b];
        for (m, &e) in energies.iter().enumerate() {
            let row = self.row(m);
            let rowsum: f64 = row.iter().sum();
            if rowsum <= 0.0 {
                continue;
            }
            let level = e.max(0.0) / rowsum;
            for k in 0..b {
                out[k] += row[k] * level;
                norm[k] += row[k];
            }
        }
        for (o, n) in out.iter_mut().zip(&norm) {
            *o = if *n > 0.0 { (*o / n).max(0.0) } else { 0.0 };
        }
    }
}

/// Log-mel analysis of a waveform.
pub fn mel_spectrogram(wave: &Waveform, cfg: &MelConfig) -> Result<MelSpectrogram> {
    let fb = MelFilterbank::new(cfg)?;
    mel_from_spectrogram(&stft(wave, cfg)?, &fb)
}

/// Applies a filterbank and the log floor to an STFT.
pub fn mel_from_spectrogram(spec: &Spectrogram, fb: &MelFilterbank) -> Result<MelSpectrogram> {
    let cfg = &fb.config;
    if spec.bins != fb.num_bins() {
        return Err(Error::Signal(format!("{} bins vs filterbank {}", spec.bins, fb.num_bins())));
    }
    let mut frames = Vec::with_capacity(spec.frames * cfg.n_mels);
    let mut mag = vec![0.0; spec.bins];
    let mut energies = vec![0.0; cfg.n_mels];
    for t in 0..spec.frames {
        for (k, m) in mag.iter_mut().enumerate() {
            *m = spec.data[t * spec.bins + k].norm();
        }
        fb.apply(&mag, &mut energies);
        frames.extend(energies.iter().map(|&e| e.max(cfg.log_floor).ln() as f32));
    }
    MelSpectrogram::new(frames, spec.frames, cfg.clone())
}

/// Linear magnitudes, `frames × bins`.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearSpectrogram {
    pub magnitudes: Vec<f64>,
    pub frames: usize,
    pub bins: usize,
    pub config: MelConfig,
}

/// Undoes the log and the filterbank. Cells at the floor map to zero energy.
pub fn invert_mel(mel: &MelSpectrogram, fb: &MelFilterbank) -> Result<LinearSpectrogram> {
    if mel.config != fb.config {
        return Err(Error::Signal("mel config does not match the filterbank's".into()));
    }
    let bins = fb.num_bins();
    let floor = mel.config.log_floor_value() as f64;
    let mut out = vec![0.0; mel.num_frames * bins];
    let mut energies = vec![0.0; mel.channels()];
    for t in 0..mel.num_frames {
        for (e, &v) in energies.iter_mut().zip(mel.row(t)) {
            let v = v as f64;
            *e = if v <= floor + 1e-6 { 0.0 } else { v.exp() };
        }
        fb.invert(&energies, &mut out[t * bins..(t + 1) * bins]);
    }
    Ok(LinearSpectrogram { magnitudes: out, frames: mel.num_frames, bins, config: mel.config.clone() })
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn sine(freq: f64, seconds: f64, sr: u32) -> Waveform {
        let n = (seconds * sr as f64) as usize;
        let s = (0..n).map(|i| (0.5 * (2.0 * std::f64::consts::PI * freq * i as f64 / sr as f64).sin()) as f32).collect();
        Waveform::new(s, sr).unwrap()
    }

    #[test]
    fn input_and_output_presets_validate() {
        let input = MelConfig::new(16_000, 80, 125.0, 7600.0, 25.0, 10.0);
        assert_eq!((input.frame_size(), input.hop(), input.fft_size), (400, 160, 512));
        input.validate().unwrap();
        let output = MelConfig::new(24_000, 128, 20.0, 12_000.0, 50.0, 12.5);
        assert_eq!((output.frame_size(), output.hop(), output.fft_size), (1200, 300, 2048));
        output.validate().unwrap();
    }

    #[test]
    fn invalid_band_is_rejected() {
        let mut c = MelConfig::new(8000, 40, 20.0, 3800.0, 50.0, 12.5);
        c.upper_hz = 5000.0;
        assert!(c.validate().is_err());
        c.upper_hz = 3800.0;
        c.lower_hz = 0.0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn filterbank_is_nonnegative_and_covers_band() {
        for cfg in [
            MelConfig::new(8000, 40, 20.0, 3800.0, 50.0, 12.5),
            MelConfig::new(24_000, 128, 20.0, 12_000.0, 50.0, 12.5),
        ] {
            let fb = MelFilterbank::new(&cfg).unwrap();
            assert!(fb.weights.iter().all(|&w| w >= 0.0));
            let bin_hz = cfg.sample_rate as f64 / cfg.fft_size as f64;
            for k in 0..fb.num_bins() {
                let f = k as f64 * bin_hz;
                if f > cfg.lower_hz && f < cfg.upper_hz {
                    assert!((0..cfg.n_mels).any(|m| fb.row(m)[k] > 0.0), "bin {k} ({f} Hz) uncovered");
                }
            }
        }
    }

    #[test]
    fn silence_maps_to_log_floor() {
        let cfg = MelConfig::new(8000, 40, 20.0, 3800.0, 50.0, 12.5);
        let wave = Waveform::new(vec![0.0; 4000], 8000).unwrap();
        let mel = mel_spectrogram(&wave, &cfg).unwrap();
        assert_eq!(mel.num_frames, 40);
        let floor = (1e-5f64).ln() as f32;
        assert!(mel.frames.iter().all(|&v| v == floor));
    }

    #[test]
    fn hop_shift_shifts_frames_by_one_row() {
        let cfg = MelConfig::new(8000, 40, 20.0, 3800.0, 50.0, 12.5);
        let hop = cfg.hop();
        let n = 4000;
        let base: Vec<f32> = (0..n + hop)
            .map(|i| {
                let t = i as f64 / 8000.0;
                (0.3 * (2.0 * std::f64::consts::PI * 220.0 * t).sin() + 0.2 * (2.0 * std::f64::consts::PI * 570.0 * t * (1.0 + t)).sin()) as f32
            })
            .collect();
        let a = mel_spectrogram(&Waveform::new(base[hop..].to_vec(), 8000).unwrap(), &cfg).unwrap();
        let b = mel_spectrogram(&Waveform::new(base.clone(), 8000).unwrap(), &cfg).unwrap();
        let margin = cfg.frame_size() / hop + 1;
        for t in margin..a.num_frames - margin {
            for (x, y) in a.row(t).iter().zip(b.row(t + 1)) {
                assert!((x - y).abs() <= 1e-5, "frame {t}: {x} vs {y}");
            }
        }
    }

    #[test]
    fn analysis_is_deterministic() {
        let cfg = MelConfig::new(8000, 40, 20.0, 3800.0, 50.0, 12.5);
        let w = sine(440.0, 0.3, 8000);
        assert_eq!(mel_spectrogram(&w, &cfg).unwrap(), mel_spectrogram(&w, &cfg).unwrap());
    }

    #[test]
    fn zero_mel_inverts_to_zero_magnitude() {
        let cfg = MelConfig::new(8000, 40, 20.0, 3800.0, 50.0, 12.5);
        let fb = MelFilterbank::new(&cfg).unwrap();
        let lin = invert_mel(&MelSpectrogram::silence(3, cfg), &fb).unwrap();
        assert!(lin.magnitudes.iter().all(|&m| m == 0.0));
    }

    #[test]
    fn single_channel_inverts_onto_its_support() {
        let cfg = MelConfig::new(8000, 40, 20.0, 3800.0, 50.0, 12.5);
        let fb = MelFilterbank::new(&cfg).unwrap();
        let mut mel = MelSpectrogram::silence(1, cfg.clone());
        mel.frames[17] = 1.0;
        let lin = invert_mel(&mel, &fb).unwrap();
        for k in 0..fb.num_bins() {
            if lin.magnitudes[k] > 0.0 {
                assert!(fb.row(17)[k] > 0.0, "bin {k} outside channel support");
            }
        }
        assert!(lin.magnitudes.iter().any(|&m| m > 0.0));
    }

    #[test]
    fn inversion_rejects_foreign_config() {
        let cfg = MelConfig::new(8000, 40, 20.0, 3800.0, 50.0, 12.5);
        let other = MelConfig::new(8000, 32, 20.0, 3800.0, 50.0, 12.5);
        let fb = MelFilterbank::new(&other).unwrap();
        assert!(invert_mel(&MelSpectrogram::silence(2, cfg), &fb).is_err());
    }
}
