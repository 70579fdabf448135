//! The assembled translation model: encoder, linguistic decoder with its
//! attention, and acoustic synthesizer, plus the joint training objective
//! and the inference pipeline.

use rand::SeedableRng;
use s2st_numerics::{Graph, ParamStore, Scalar, Var};

use crate::config::Preset;
use crate::corpus::Batch;
use crate::encoder::Encoder;
use crate::error::{Error, Result};
use crate::nn::{constant, is_bias, ModelRng, ParamBuilder};
use crate::signal::{MelConfig, MelSpectrogram};
use crate::synthesizer::{spectrogram_loss, total_duration_loss, SpectrogramPrediction, Synthesizer};
use crate::translator::{argmax, label_smoothed_ce, Decoder, DecodedStreams};

/// Fixed affine map sending the log floor to −1 and 0 to +1.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MelNorm {
    pub mean: f32,
    pub scale: f32,
}

impl MelNorm {
    pub fn for_config(cfg: &MelConfig) -> Self {
        let floor = cfg.log_floor_value();
        MelNorm { mean: floor / 2.0, scale: floor.abs() / 2.0 }
    }

    pub fn normalize(&self, xs: &[f32]) -> Vec<f32> {
        xs.iter().map(|x| (x - self.mean) / self.scale).collect()
    }

    /// Normalizes `[B, T, C]` frames, keeping padded frames at zero.
    pub fn normalize_masked(&self, xs: &[f32], frame_mask: &[f32]) -> Vec<f32> {
        let c = xs.len() / frame_mask.len().max(1);
        xs.iter().enumerate().map(|(i, x)| if frame_mask[i / c] > 0.0 { (x - self.mean) / self.scale } else { 0.0 }).collect()
    }

    pub fn denormalize(&self, xs: &[f32]) -> Vec<f32> {
        xs.iter().map(|x| x * self.scale + self.mean).collect()
    }
}

/// Individual loss terms and their weighted total.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    pub phoneme_ce: f64,
    pub duration_l2: f64,
    pub spec_loss: f64,
    pub l2_reg: f64,
    pub total: f64,
}

/// Graph handles of one training forward pass.
#[derive(Clone, Debug)]
pub struct TrainForward {
    /// Weighted sum of the data terms; the L2 term is applied to gradients
    /// directly.
    pub loss: Var,
    pub breakdown: LossBreakdown,
    pub correct: usize,
    pub counted: usize,
    pub streams: DecodedStreams,
    pub spectrogram: SpectrogramPrediction,
}

impl TrainForward {
    pub fn accuracy(&self) -> f64 {
        if self.counted == 0 {
            0.0
        } else {
            self.correct as f64 / self.counted as f64
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct InferOptions {
    pub seed: u64,
    pub duration_scale: f64,
    pub max_decode_len: Option<usize>,
}

impl Default for InferOptions {
    fn default() -> Self {
        InferOptions { seed: 0, duration_scale: 1.0, max_decode_len: None }
    }
}

/// Output of speech-to-speech inference on one utterance.
#[derive(Clone, Debug)]
pub struct Translation {
    pub phonemes: Vec<usize>,
    pub mel: MelSpectrogram,
    pub before_postnet: MelSpectrogram,
    /// Per phoneme, per head weights over encoder frames.
    pub attention: Vec<Vec<Vec<f64>>>,
    pub durations: Vec<f64>,
    pub truncated: bool,
    /// No phoneme was emitted or the predicted durations summed to zero.
    pub degenerate: bool,
}

#[derive(Clone, Debug)]
pub struct Model {
    pub preset: Preset,
    pub encoder: Encoder,
    pub decoder: Decoder,
    pub synth: Synthesizer,
    pub input_norm: MelNorm,
    pub output_norm: MelNorm,
}

/// Squared L2 norm over the non-bias parameters.
pub fn l2_norm_sq(store: &ParamStore<f32>) -> f64 {
    store.iter().filter(|(_, p)| !is_bias(&p.name)).map(|(_, p)| p.value.sum_squares()).sum()
}

impl Model {
    /// Builds the model and a freshly initialized store seeded by
    /// `train.seed`.
    pub fn build(preset: &Preset) -> Result<(Model, ParamStore<f32>)> {
        preset.validate()?;
        let mut store = ParamStore::new();
        let mut rng = ModelRng::seed_from_u64(preset.train.seed);
        let model = Model::new(preset, &mut ParamBuilder::new(&mut store, &mut rng))?;
        Ok((model, store))
    }

    pub fn new(preset: &Preset, pb: &mut ParamBuilder) -> Result<Model> {
        let encoder = Encoder::new(pb, &preset.encoder, preset.input_mel.n_mels)?;
        let decoder = Decoder::new(pb, &preset.decoder, preset.vocab_size(), preset.encoder.model_dim)?;
        let features = preset.decoder.hidden_pre_projection_dim() + preset.decoder.attention.output_dim;
        let synth = Synthesizer::new(pb, &preset.synth, features, preset.output_mel.n_mels)?;
        Ok(Model {
            preset: preset.clone(),
            encoder,
            decoder,
            synth,
            input_norm: MelNorm::for_config(&preset.input_mel),
            output_norm: MelNorm::for_config(&preset.output_mel),
        })
    }

    fn check_batch(&self, batch: &Batch) -> Result<()> {
        if batch.src_channels != self.preset.input_mel.n_mels || batch.tgt_channels != self.preset.output_mel.n_mels {
            return Err(Error::Data(format!(
                "batch has {}/{} mel channels, model expects {}/{}",
                batch.src_channels, batch.tgt_channels, self.preset.input_mel.n_mels, self.preset.output_mel.n_mels
            )));
        }
        if batch.phon_lens.iter().any(|&l| l < 2) {
            return Err(Error::Data("every target needs at least one phoneme before EOS".into()));
        }
        Ok(())
    }

    /// Encoder → teacher-forced decoder → durations → length-matched
    /// upsampling → teacher-forced synthesis, with all loss terms.
    pub fn forward_train<T: Scalar>(&self, g: &mut Graph<T>, store_l2: f64, batch: &Batch, rng: &mut ModelRng) -> Result<TrainForward> {
        self.check_batch(batch)?;
        let tc = &self.preset.train;
        let b = batch.size;
        let src = self.input_norm.normalize_masked(&batch.src, &batch.src_mask);
        let enc = self.encoder.encode_host(g, &src, [b, batch.src_len, batch.src_channels], &batch.src_lens, rng)?;
        let mem = self.decoder.attention.prepare(g, &enc)?;
        let l = batch.phon_len;
        let streams = self.decoder.teacher_forced(g, &batch.phonemes, b, l, &mem, rng)?;
        let ce = label_smoothed_ce(g, streams.logits, &batch.phonemes, &batch.phon_mask, self.preset.decoder.label_smoothing)?;

        let (mut correct, mut counted) = (0, 0);
        {
            let v = self.decoder.vocab;
            let logits = g.value(streams.logits).data();
            for (n, (&p, &m)) in batch.phonemes.iter().zip(&batch.phon_mask).enumerate() {
                if m > 0.0 {
                    counted += 1;
                    if argmax(&logits[n * v..(n + 1) * v]) == p {
                        correct += 1;
                    }
                }
            }
        }

        // the EOS step has no acoustic realization
        let synth_mask: Vec<f32> = (0..b * l).map(|n| if n % l + 1 < batch.phon_lens[n / l] { 1.0 } else { 0.0 }).collect();
        let features = Synthesizer::features(g, streams.hidden_pre_projection, streams.context)?;
        let tgt = self.output_norm.normalize_masked(&batch.tgt, &batch.tgt_mask);
        let pred = self.synth.forward_train(g, features, &synth_mask, &tgt, &batch.tgt_lens, rng)?;
        let spec = spectrogram_loss(g, &pred, &tgt, &batch.tgt_mask)?;
        let dur = total_duration_loss(g, &pred.durations, &batch.tgt_lens, batch.tgt_frame_step_seconds)?;

        let weighted_ce = g.mul_scalar(ce, T::from_f64(tc.phoneme_w));
        let weighted_dur = g.mul_scalar(dur, T::from_f64(tc.duration_w));
        let weighted_spec = g.mul_scalar(spec, T::from_f64(tc.spec_w));
        let loss = g.add(weighted_ce, weighted_dur)?;
        let loss = g.add(loss, weighted_spec)?;

        let scalar = |g: &Graph<T>, v: Var| g.value(v).data()[0].to_f64();
        let mut breakdown = LossBreakdown {
            phoneme_ce: scalar(g, ce),
            duration_l2: scalar(g, dur),
            spec_loss: scalar(g, spec),
            l2_reg: store_l2,
            total: 0.0,
        };
        breakdown.total = tc.phoneme_w * breakdown.phoneme_ce
            + tc.duration_w * breakdown.duration_l2
            + tc.spec_w * breakdown.spec_loss
            + tc.l2_reg_weight * breakdown.l2_reg;
        Ok(TrainForward { loss, breakdown, correct, counted, streams, spectrogram: pred })
    }

    /// Speech-to-speech translation of one source utterance.
    pub fn translate(&self, store: &ParamStore<f32>, source: &MelSpectrogram, opts: &InferOptions) -> Result<Translation> {
        if source.config != self.preset.input_mel {
            return Err(Error::Data("source mel configuration does not match the model input".into()));
        }
        if source.num_frames == 0 {
            return Err(Error::Data("empty source utterance".into()));
        }
        let mut rng = ModelRng::seed_from_u64(opts.seed);
        let mut g = Graph::new(store, false);
        let c = source.channels();
        let src = self.input_norm.normalize(&source.frames);
        let enc = self.encoder.encode_host(&mut g, &src, [1, source.num_frames, c], &[source.num_frames], &mut rng)?;
        let mem = self.decoder.attention.prepare(&mut g, &enc)?;
        let max_len = opts.max_decode_len.unwrap_or(self.preset.decoder.max_decode_len);
        let decoded = self.decoder.greedy(&mut g, &mem, max_len, &mut rng)?;
        let out_cfg = self.preset.output_mel.clone();
        let (Some(hidden), Some(context)) = (decoded.hidden_pre_projection, decoded.context) else {
            let mel = MelSpectrogram::silence(1, out_cfg);
            return Ok(Translation {
                phonemes: Vec::new(),
                before_postnet: mel.clone(),
                mel,
                attention: Vec::new(),
                durations: Vec::new(),
                truncated: decoded.truncated,
                degenerate: true,
            });
        };
        let n = decoded.phonemes.len();
        let features = Synthesizer::features(&mut g, hidden, context)?;
        let pred = self.synth.infer(&mut g, features, &vec![1.0; n], opts.duration_scale, &mut rng)?;
        let t = pred.upsampled.len();
        let to_mel = |g: &Graph<f32>, v: Var| MelSpectrogram::new(self.output_norm.denormalize(g.value(v).data()), t, out_cfg.clone());
        Ok(Translation {
            phonemes: decoded.phonemes,
            mel: to_mel(&g, pred.after_postnet)?,
            before_postnet: to_mel(&g, pred.before_postnet)?,
            attention: decoded.attention,
            durations: g.value(pred.durations.durations).data().iter().map(|&d| d as f64).collect(),
            truncated: decoded.truncated,
            degenerate: pred.upsampled.degenerate[0],
        })
    }

    /// Synthesis from an already computed per-phoneme stream, bypassing
    /// the encoder and attention.
    pub fn synthesize_streams(
        &self,
        store: &ParamStore<f32>,
        hidden: &[f32],
        context: &[f32],
        phonemes: usize,
        opts: &InferOptions,
    ) -> Result<MelSpectrogram> {
        let mut rng = ModelRng::seed_from_u64(opts.seed);
        let mut g = Graph::new(store, false);
        let hd = self.preset.decoder.hidden_pre_projection_dim();
        let cd = self.preset.decoder.attention.output_dim;
        let h = constant(&mut g, &[1, phonemes, hd], hidden)?;
        let c = constant(&mut g, &[1, phonemes, cd], context)?;
        let features = Synthesizer::features(&mut g, h, c)?;
        let pred = self.synth.infer(&mut g, features, &vec![1.0; phonemes], opts.duration_scale, &mut rng)?;
        let t = pred.upsampled.len();
        MelSpectrogram::new(self.output_norm.denormalize(g.value(pred.after_postnet).data()), t, self.preset.output_mel.clone())
    }
}
