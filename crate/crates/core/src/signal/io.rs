use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use super::{MelConfig, MelSpectrogram, Waveform};
use crate::error::{Error, Result};

const MEL_MAGIC: &[u8; 6] = b"T2MEL1";

/// Writes 16-bit PCM mono; samples outside `[-1, 1]` are clipped.
pub fn write_wav(path: &Path, wave: &Waveform) -> Result<()> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: wave.sample_rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut w = hound::WavWriter::create(path, spec)?;
    for &s in &wave.samples {
        w.write_sample((s.clamp(-1.0, 1.0) * i16::MAX as f32).round() as i16)?;
    }
    w.finalize()?;
    Ok(())
}

pub fn read_wav(path: &Path) -> Result<Waveform> {
    let mut r = hound::WavReader::open(path)?;
    let spec = r.spec();
    if spec.channels != 1 || spec.bits_per_sample != 16 || spec.sample_format != hound::SampleFormat::Int {
        return Err(Error::Format(format!(
            "{}: expected 16-bit PCM mono, found {} channel(s) at {} bits",
            path.display(),
            spec.channels,
            spec.bits_per_sample
        )));
    }
    let samples = r
        .samples::<i16>()
        .map(|s| s.map(|v| v as f32 / i16::MAX as f32))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    Waveform::new(samples, spec.sample_rate)
}

pub fn write_mel(path: &Path, mel: &MelSpectrogram) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    w.write_all(MEL_MAGIC)?;
    w.write_all(&(mel.num_frames as u32).to_le_bytes())?;
    w.write_all(&(mel.channels() as u32).to_le_bytes())?;
    for v in &mel.frames {
        w.write_all(&v.to_le_bytes())?;
    }
    for (k, v) in mel.config.to_kv() {
        writeln!(w, "{k}={v}")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_mel(path: &Path) -> Result<MelSpectrogram> {
    let bytes = fs::read(path)?;
    decode_mel(&bytes).map_err(|e| match e {
        Error::Format(d) => Error::Format(format!("{}: {d}", path.display())),
        other => other,
    })
}

fn decode_mel(bytes: &[u8]) -> Result<MelSpectrogram> {
    let bad = |d: &str| Error::Format(d.to_string());
    if bytes.len() < 14 || &bytes[..6] != MEL_MAGIC {
        return Err(bad("missing T2MEL1 header"));
    }
    let t = u32::from_le_bytes(bytes[6..10].try_into().unwrap()) as usize;
    let c = u32::from_le_bytes(bytes[10..14].try_into().unwrap()) as usize;
    let end = t
        .checked_mul(c)
        .and_then(|n| n.checked_mul(4))
        .and_then(|n| n.checked_add(14))
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| bad("truncated mel payload"))?;
    let frames: Vec<f32> = bytes[14..end].chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().unwrap())).collect();
    let text = std::str::from_utf8(&bytes[end..]).map_err(|_| bad("config block is not UTF-8"))?;
    let mut cfg = MelConfig::new(1, 1, 0.0, 0.0, 0.0, 0.0);
    let mut seen = 0;
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        let (k, v) = line.split_once('=').ok_or_else(|| bad("config line without '='"))?;
        cfg.set(k.trim(), v).map_err(|e| bad(&e.to_string()))?;
        seen += 1;
    }
    if seen < cfg.to_kv().len() {
        return Err(bad("incomplete mel config block"));
    }
    if cfg.n_mels != c {
        return Err(bad(&format!("header says {c} channels, config says {}", cfg.n_mels)));
    }
    if let Some(i) = frames.iter().position(|v| !v.is_finite()) {
        return Err(bad(&format!("non-finite mel value at {i}")));
    }
    MelSpectrogram::new(frames, t, cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mel_file_round_trips_bit_exact() {
        let cfg = MelConfig::new(8000, 4, 20.0, 3800.0, 50.0, 12.5);
        let mel = MelSpectrogram::new((0..12).map(|i| i as f32 * 0.37 - 2.0).collect(), 3, cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.mel");
        write_mel(&p, &mel).unwrap();
        assert_eq!(read_mel(&p).unwrap(), mel);
        let bytes = fs::read(&p).unwrap();
        assert_eq!(&bytes[..6], b"T2MEL1");
        assert_eq!(u32::from_le_bytes(bytes[6..10].try_into().unwrap()), 3);
        assert_eq!(u32::from_le_bytes(bytes[10..14].try_into().unwrap()), 4);
    }

    #[test]
    fn corrupt_mel_is_a_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("b.mel");
        fs::write(&p, b"T2MEL1\x05\0\0\0\x05\0\0\0abc").unwrap();
        assert!(matches!(read_mel(&p), Err(Error::Format(_))));
        fs::write(&p, b"nope").unwrap();
        assert!(matches!(read_mel(&p), Err(Error::Format(_))));
    }

    #[test]
    fn wav_round_trip_within_quantization() {
        let wave = Waveform::new((0..800).map(|i| ((i as f32) * 0.05).sin() * 0.8).collect(), 8000).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.wav");
        write_wav(&p, &wave).unwrap();
        let back = read_wav(&p).unwrap();
        assert_eq!(back.sample_rate, 8000);
        for (a, b) in wave.samples.iter().zip(&back.samples) {
            assert!((a - b).abs() <= 1.0 / 32767.0);
        }
    }
}
