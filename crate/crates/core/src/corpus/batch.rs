use std::sync::mpsc::{sync_channel, Receiver};
use std::thread::JoinHandle;

use rand::Rng;

use super::augment::{concat_aug, spec_augment, SpecAugmentPolicy};
use super::{TrainingExample, PAD};
use crate::error::{Error, Result};

/// Padded, masked minibatch. Masks hold 1.0 on real positions and 0.0 on
/// padding; every padded cell is 0.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub size: usize,
    pub src_len: usize,
    pub src_channels: usize,
    pub src: Vec<f32>,
    pub src_mask: Vec<f32>,
    pub src_lens: Vec<usize>,
    pub tgt_len: usize,
    pub tgt_channels: usize,
    pub tgt: Vec<f32>,
    pub tgt_mask: Vec<f32>,
    pub tgt_lens: Vec<usize>,
    pub phon_len: usize,
    pub phonemes: Vec<usize>,
    pub phon_mask: Vec<f32>,
    pub phon_lens: Vec<usize>,
    pub speakers: Vec<Vec<u32>>,
    pub ids: Vec<String>,
    pub tgt_frame_step_seconds: f64,
}

impl Batch {
    pub fn from_examples(examples: &[TrainingExample]) -> Result<Self> {
        let first = examples.first().ok_or_else(|| Error::Data("empty batch".into()))?;
        let b = examples.len();
        let cs = first.source_mel.channels();
        let ct = first.target_mel.channels();
        for e in examples {
            if e.source_mel.config != first.source_mel.config || e.target_mel.config != first.target_mel.config {
                return Err(Error::Data(format!("{}: mel config differs within batch", e.id)));
            }
        }
        let src_lens: Vec<usize> = examples.iter().map(|e| e.source_mel.num_frames).collect();
        let tgt_lens: Vec<usize> = examples.iter().map(|e| e.target_mel.num_frames).collect();
        let phon_lens: Vec<usize> = examples.iter().map(|e| e.target_phonemes.len()).collect();
        let ts = *src_lens.iter().max().unwrap();
        let tt = *tgt_lens.iter().max().unwrap();
        let l = *phon_lens.iter().max().unwrap();
        let mut batch = Batch {
            size: b,
            src_len: ts,
            src_channels: cs,
            src: vec![0.0; b * ts * cs],
            src_mask: vec![0.0; b * ts],
            src_lens,
            tgt_len: tt,
            tgt_channels: ct,
            tgt: vec![0.0; b * tt * ct],
            tgt_mask: vec![0.0; b * tt],
            tgt_lens,
            phon_len: l,
            phonemes: vec![PAD; b * l],
            phon_mask: vec![0.0; b * l],
            phon_lens,
            speakers: examples.iter().map(|e| e.speakers.clone()).collect(),
            ids: examples.iter().map(|e| e.id.clone()).collect(),
            tgt_frame_step_seconds: first.target_mel.config.frame_step_seconds(),
        };
        for (i, e) in examples.iter().enumerate() {
            let n = e.source_mel.frames.len();
            batch.src[i * ts * cs..i * ts * cs + n].copy_from_slice(&e.source_mel.frames);
            batch.src_mask[i * ts..i * ts + e.source_mel.num_frames].fill(1.0);
            let n = e.target_mel.frames.len();
            batch.tgt[i * tt * ct..i * tt * ct + n].copy_from_slice(&e.target_mel.frames);
            batch.tgt_mask[i * tt..i * tt + e.target_mel.num_frames].fill(1.0);
            batch.phonemes[i * l..i * l + e.target_phonemes.len()].copy_from_slice(&e.target_phonemes);
            batch.phon_mask[i * l..i * l + e.target_phonemes.len()].fill(1.0);
        }
        Ok(batch)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BatchOptions {
    pub concat_aug_prob: f64,
    /// Applied to source mels when present (training only).
    pub spec_augment: Option<SpecAugmentPolicy>,
}

/// Builds a batch from `pool[indices]`. Each drawn example is, with
/// probability `concat_aug_prob`, joined with a partner drawn uniformly
/// from the pool (self-pairing allowed).
pub fn make_batch<R: Rng + ?Sized>(
    pool: &[TrainingExample],
    indices: &[usize],
    opts: &BatchOptions,
    rng: &mut R,
) -> Result<Batch> {
    if indices.is_empty() {
        return Err(Error::Data("empty batch".into()));
    }
    let mut picked = Vec::with_capacity(indices.len());
    for &i in indices {
        let a = pool.get(i).ok_or_else(|| Error::Data(format!("example index {i} out of range")))?;
        let mut e = if opts.concat_aug_prob > 0.0 && rng.gen::<f64>() < opts.concat_aug_prob {
            let partner = &pool[rng.gen_range(0..pool.len())];
            concat_aug(a, partner)?
        } else {
            a.clone()
        };
        if let Some(policy) = &opts.spec_augment {
            e.source_mel = spec_augment(&e.source_mel, policy, rng);
        }
        picked.push(e);
    }
    Batch::from_examples(&picked)
}

/// Runs a producer on a worker thread, keeping at most `capacity` items in
/// flight and yielding them in step order.
pub struct Prefetcher<T> {
    rx: Option<Receiver<Result<T>>>,
    handle: Option<JoinHandle<()>>,
}

impl<T: Send + 'static> Prefetcher<T> {
    pub fn spawn<F>(steps: std::ops::Range<usize>, capacity: usize, produce: F) -> Self
    where
        F: Fn(usize) -> Result<T> + Send + 'static,
    {
        let (tx, rx) = sync_channel(capacity.max(1));
        let handle = std::thread::spawn(move || {
            for step in steps {
                if tx.send(produce(step)).is_err() {
                    break;
                }
            }
        });
        Prefetcher { rx: Some(rx), handle: Some(handle) }
    }
}

impl<T> Iterator for Prefetcher<T> {
    type Item = Result<T>;

    fn next(&mut self) -> Option<Self::Item> {
        self.rx.as_ref()?.recv().ok()
    }
}

impl<T> Drop for Prefetcher<T> {
    fn drop(&mut self) {
        // Closing the receiver unblocks the producer.
        self.rx.take();
        if let Some(h) = self.handle.take() {
            let _ = h.join();
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{generate, stream_rng, CorpusConfig, EOS};
    use crate::signal::MelConfig;

    fn pool() -> Vec<TrainingExample> {
        let m = MelConfig::new(8000, 40, 20.0, 3800.0, 50.0, 12.5);
        generate(&CorpusConfig::default(), &m, &m, 4, 0, 6).unwrap()
    }

    #[test]
    fn padding_is_zero_outside_masks() {
        let p = pool();
        let b = make_batch(&p, &[0, 1, 2, 3], &BatchOptions { concat_aug_prob: 0.0, spec_augment: None }, &mut stream_rng(0, 0)).unwrap();
        for i in 0..b.size {
            for t in 0..b.src_len {
                let real = t < b.src_lens[i];
                assert_eq!(b.src_mask[i * b.src_len + t], if real { 1.0 } else { 0.0 });
                if !real {
                    let row = &b.src[(i * b.src_len + t) * b.src_channels..][..b.src_channels];
                    assert!(row.iter().all(|&v| v == 0.0));
                }
            }
            for t in b.tgt_lens[i]..b.tgt_len {
                assert_eq!(b.tgt_mask[i * b.tgt_len + t], 0.0);
                assert!(b.tgt[(i * b.tgt_len + t) * b.tgt_channels..][..b.tgt_channels].iter().all(|&v| v == 0.0));
            }
            for j in 0..b.phon_len {
                let real = j < b.phon_lens[i];
                assert_eq!(b.phon_mask[i * b.phon_len + j], if real { 1.0 } else { 0.0 });
                if !real {
                    assert_eq!(b.phonemes[i * b.phon_len + j], PAD);
                }
            }
            assert_eq!(b.phonemes[i * b.phon_len + b.phon_lens[i] - 1], EOS);
        }
    }

    #[test]
    fn no_concat_is_plain_padding() {
        let p = pool();
        let b = make_batch(&p, &[2, 5], &BatchOptions { concat_aug_prob: 0.0, spec_augment: None }, &mut stream_rng(0, 0)).unwrap();
        assert_eq!(b, Batch::from_examples(&[p[2].clone(), p[5].clone()]).unwrap());
    }

    #[test]
    fn always_concat_pairs_every_item() {
        let p = pool();
        let b = make_batch(&p, &[0, 1, 2], &BatchOptions { concat_aug_prob: 1.0, spec_augment: None }, &mut stream_rng(0, 0)).unwrap();
        assert!(b.speakers.iter().all(|s| s.len() == 2));
    }

    #[test]
    fn prefetcher_preserves_order() {
        let got: Vec<usize> = Prefetcher::spawn(3..40, 2, |s| Ok(s * 2)).map(|r| r.unwrap()).collect();
        assert_eq!(got, (3..40).map(|s| s * 2).collect::<Vec<_>>());
    }

    #[test]
    fn dropping_prefetcher_stops_producer() {
        let mut p = Prefetcher::spawn(0..usize::MAX, 1, Ok);
        assert_eq!(p.next().unwrap().unwrap(), 0);
        drop(p);
    }
}
