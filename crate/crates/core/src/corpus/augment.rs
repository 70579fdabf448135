use rand::Rng;

use super::{TrainingExample, EOS};
use crate::error::{Error, Result};
use crate::kv;
use crate::signal::MelSpectrogram;

/// Joins two examples end to end: mels row-wise, phonemes with the first
/// EOS dropped, speaker tags concatenated.
pub fn concat_aug(a: &TrainingExample, b: &TrainingExample) -> Result<TrainingExample> {
    Ok(TrainingExample {
        id: format!("{}+{}", a.id, b.id),
        source_mel: concat_mels(&a.source_mel, &b.source_mel)?,
        target_mel: concat_mels(&a.target_mel, &b.target_mel)?,
        target_phonemes: a
            .target_phonemes
            .iter()
            .copied()
            .filter(|&p| p != EOS)
            .chain(b.target_phonemes.iter().copied())
            .collect(),
        speakers: a.speakers.iter().chain(&b.speakers).copied().collect(),
    })
}

fn concat_mels(a: &MelSpectrogram, b: &MelSpectrogram) -> Result<MelSpectrogram> {
    if a.config != b.config {
        return Err(Error::Data("cannot concatenate mels with different configs".into()));
    }
    let mut frames = Vec::with_capacity(a.frames.len() + b.frames.len());
    frames.extend_from_slice(&a.frames);
    frames.extend_from_slice(&b.frames);
    MelSpectrogram::new(frames, a.num_frames + b.num_frames, a.config.clone())
}

#[derive(Clone, Debug, PartialEq)]
pub struct SpecAugmentPolicy {
    pub freq_blocks: usize,
    pub time_blocks: usize,
    pub freq_max_ratio: f64,
    pub time_max_ratio: f64,
}

impl Default for SpecAugmentPolicy {
    fn default() -> Self {
        SpecAugmentPolicy { freq_blocks: 2, time_blocks: 10, freq_max_ratio: 0.33, time_max_ratio: 0.05 }
    }
}

impl SpecAugmentPolicy {
    pub fn none() -> Self {
        SpecAugmentPolicy { freq_blocks: 0, time_blocks: 0, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = |r: f64| r > 0.0 && r <= 1.0;
        if !ok(self.freq_max_ratio) || !ok(self.time_max_ratio) {
            return Err(Error::Config("SpecAugment ratios must lie in (0, 1]".into()));
        }
        Ok(())
    }

    pub fn to_kv(&self, prefix: &str) -> Vec<(String, String)> {
        vec![
            (format!("{prefix}freq_blocks"), self.freq_blocks.to_string()),
            (format!("{prefix}time_blocks"), self.time_blocks.to_string()),
            (format!("{prefix}freq_max_ratio"), self.freq_max_ratio.to_string()),
            (format!("{prefix}time_max_ratio"), self.time_max_ratio.to_string()),
        ]
    }

    pub fn set(&mut self, field: &str, key: &str, v: &str) -> Result<()> {
        match field {
            "freq_blocks" => self.freq_blocks = kv::value(key, v)?,
            "time_blocks" => self.time_blocks = kv::value(key, v)?,
            "freq_max_ratio" => self.freq_max_ratio = kv::value(key, v)?,
            "time_max_ratio" => self.time_max_ratio = kv::value(key, v)?,
            _ => return Err(kv::unknown(key)),
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MaskAxis {
    Frequency,
    Time,
}

/// One drawn mask band.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MaskBlock {
    pub axis: MaskAxis,
    pub start: usize,
    pub width: usize,
}

/// Masks random channel and frame bands with the log floor.
pub fn spec_augment<R: Rng + ?Sized>(mel: &MelSpectrogram, policy: &SpecAugmentPolicy, rng: &mut R) -> MelSpectrogram {
    spec_augment_blocks(mel, policy, rng).0
}

/// Like [`spec_augment`], also returning the drawn blocks.
pub fn spec_augment_blocks<R: Rng + ?Sized>(
    mel: &MelSpectrogram,
    policy: &SpecAugmentPolicy,
    rng: &mut R,
) -> (MelSpectrogram, Vec<MaskBlock>) {
    let c = mel.channels();
    let t = mel.num_frames;
    let mut blocks = Vec::with_capacity(policy.freq_blocks + policy.time_blocks);
    let mut draw = |axis, extent: usize, ratio: f64, rng: &mut R| {
        let max_w = ((ratio * extent as f64).floor() as usize).min(extent);
        let width = rng.gen_range(0..=max_w);
        let start = rng.gen_range(0..=extent - width);
        blocks.push(MaskBlock { axis, start, width });
    };
    for _ in 0..policy.freq_blocks {
        draw(MaskAxis::Frequency, c, policy.freq_max_ratio, rng);
    }
    for _ in 0..policy.time_blocks {
        draw(MaskAxis::Time, t, policy.time_max_ratio, rng);
    }
    let mut out = mel.clone();
    let floor = mel.config.log_floor_value();
    for b in &blocks {
        match b.axis {
            MaskAxis::Frequency => {
                for row in 0..t {
                    out.frames[row * c + b.start..row * c + b.start + b.width].fill(floor);
                }
            }
            MaskAxis::Time => out.frames[b.start * c..(b.start + b.width) * c].fill(floor),
        }
    }
    (out, blocks)
}
