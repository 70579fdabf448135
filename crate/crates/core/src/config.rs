//! Model, training, and evaluation settings, and the named presets.

use crate::corpus::{CorpusConfig, SpecAugmentPolicy};
use crate::error::{Error, Result};
use crate::kv;
use crate::signal::MelConfig;

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderConfig {
    pub model_dim: usize,
    pub n_blocks: usize,
    pub n_heads: usize,
    pub conv_kernel: usize,
    pub subsample_factor: usize,
    pub ff_expansion: usize,
    pub dropout_prob: f64,
    pub max_rel_distance: usize,
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.model_dim == 0 || self.n_heads == 0 || self.model_dim % self.n_heads != 0 {
            return Err(Error::Config(format!("encoder dim {} not divisible by {} heads", self.model_dim, self.n_heads)));
        }
        if !matches!(self.subsample_factor, 2 | 4) {
            return Err(Error::Config(format!("subsample factor {} not in {{2, 4}}", self.subsample_factor)));
        }
        if self.conv_kernel == 0 || self.ff_expansion == 0 {
            return Err(Error::Config("encoder kernel and expansion must be positive".into()));
        }
        check_prob("encoder.dropout", self.dropout_prob)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttentionConfig {
    pub heads: usize,
    pub hidden_dim: usize,
    pub output_dim: usize,
    pub dropout_prob: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecoderConfig {
    pub lstm_dim: usize,
    pub lstm_layers: usize,
    pub zoneout_prob: f64,
    pub phoneme_embedding_dim: usize,
    pub label_smoothing: f64,
    pub attention: AttentionConfig,
    pub max_decode_len: usize,
}

impl DecoderConfig {
    /// Width of `[top hidden | context]`.
    pub fn hidden_pre_projection_dim(&self) -> usize {
        self.lstm_dim + self.attention.output_dim
    }

    pub fn validate(&self) -> Result<()> {
        let a = &self.attention;
        if a.heads == 0 || a.hidden_dim % a.heads != 0 {
            return Err(Error::Config(format!("attention hidden {} not divisible by {} heads", a.hidden_dim, a.heads)));
        }
        if self.lstm_layers == 0 || self.lstm_dim == 0 || self.max_decode_len == 0 {
            return Err(Error::Config("decoder sizes must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return Err(Error::Config("label smoothing must lie in [0, 1)".into()));
        }
        check_prob("decoder.zoneout", self.zoneout_prob)?;
        check_prob("attention.dropout", a.dropout_prob)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SynthVariant {
    Autoregressive,
    NonAutoregressive,
}

impl SynthVariant {
    pub fn name(self) -> &'static str {
        match self {
            SynthVariant::Autoregressive => "autoregressive",
            SynthVariant::NonAutoregressive => "nonautoregressive",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub duration_dim: usize,
    pub duration_layers: usize,
    pub duration_bidirectional: bool,
    pub range_floor: f64,
    pub prenet_dim: usize,
    pub prenet_layers: usize,
    pub prenet_dropout: f64,
    pub lstm_dim: usize,
    pub lstm_layers: usize,
    pub zoneout_prob: f64,
    /// `(kernel, channels)` per stage; the last stage's channels must equal
    /// the output mel channels.
    pub postnet: Vec<(usize, usize)>,
    pub variant: SynthVariant,
    pub nar_blocks: usize,
    pub nar_dim: usize,
    pub nar_heads: usize,
    pub nar_conv_kernel: usize,
    /// Initial per-phoneme duration, frames.
    pub init_duration: f64,
}

impl SynthConfig {
    pub fn validate(&self, out_channels: usize) -> Result<()> {
        if !(self.range_floor > 0.0) {
            return Err(Error::Config("range floor must be positive".into()));
        }
        match self.postnet.last() {
            Some(&(_, ch)) if ch != out_channels => {
                return Err(Error::Config(format!("post-net ends with {ch} channels, output mel has {out_channels}")))
            }
            _ => {}
        }
        if self.variant == SynthVariant::NonAutoregressive && (self.nar_heads == 0 || self.nar_dim % self.nar_heads != 0) {
            return Err(Error::Config("non-autoregressive dim must be divisible by its heads".into()));
        }
        check_prob("synth.prenet_dropout", self.prenet_dropout)?;
        check_prob("synth.zoneout", self.zoneout_prob)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub phoneme_w: f64,
    pub duration_w: f64,
    pub spec_w: f64,
    pub peak_lr: f64,
    pub warmup_steps: usize,
    pub batch_size: usize,
    pub l2_reg_weight: f64,
    pub max_steps: usize,
    pub eval_every: usize,
    pub seed: u64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub clip_norm: f64,
    pub concat_aug_prob: f64,
    pub spec_augment: SpecAugmentPolicy,
    pub prefetch: usize,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.phoneme_w < 0.0 || self.duration_w < 0.0 || self.spec_w < 0.0 || self.l2_reg_weight < 0.0 {
            return Err(Error::Config("loss weights must be nonnegative".into()));
        }
        if self.warmup_steps == 0 || self.batch_size == 0 {
            return Err(Error::Config("warmup steps and batch size must be at least 1".into()));
        }
        check_prob("train.concat_aug_prob", self.concat_aug_prob)?;
        self.spec_augment.validate()
    }
}

/// Settings of the objective evaluation.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalConfig {
    pub udr_threshold_seconds: f64,
    pub segment_seconds: f64,
    pub griffin_lim_iters: usize,
    pub bleu_order: usize,
}

/// Everything needed to build, train, and evaluate one model.
#[derive(Clone, Debug, PartialEq)]
pub struct Preset {
    pub name: String,
    pub input_mel: MelConfig,
    pub output_mel: MelConfig,
    pub encoder: EncoderConfig,
    pub decoder: DecoderConfig,
    pub synth: SynthConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub corpus: CorpusConfig,
}

pub const PRESET_NAMES: [&str; 4] = ["fisher", "covost2", "conversational", "toy"];

fn check_prob(key: &str, p: f64) -> Result<()> {
    if (0.0..=1.0).contains(&p) && p < 1.0 {
        Ok(())
    } else {
        Err(Error::Config(format!("{key} must lie in [0, 1), got {p}")))
    }
}

fn postnet(stages: usize, channels: usize, out: usize) -> Vec<(usize, usize)> {
    let mut p = vec![(5, channels); stages];
    p.push((5, out));
    p
}

impl Preset {
    pub fn named(name: &str) -> Result<Preset> {
        match name {
            "fisher" => Ok(Self::standard(name, 8000, 3800.0, 256, 512, 4, 0.1, 256, 4, 96, 64, 4.2e-3, 10_000, 1024)),
            "covost2" => Ok(Self::standard(name, 48_000, 7600.0, 512, 512, 8, 0.2, 512, 6, 256, 128, 2.2e-3, 20_000, 768)),
            "conversational" => Ok(Self::standard(name, 16_000, 7600.0, 512, 512, 8, 0.2, 512, 4, 256, 128, 3.3e-3, 10_000, 768)),
            "toy" => Ok(Self::toy()),
            _ => Err(Error::Config(format!("unknown preset {name:?}; expected one of {}", PRESET_NAMES.join(", ")))),
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn standard(
        name: &str,
        input_sr: u32,
        input_upper: f64,
        att_out: usize,
        att_hidden: usize,
        att_heads: usize,
        att_dropout: f64,
        dec_dim: usize,
        dec_layers: usize,
        emb: usize,
        dur_dim: usize,
        peak_lr: f64,
        warmup: usize,
        batch: usize,
    ) -> Preset {
        let output_mel = MelConfig::new(24_000, 128, 20.0, 12_000.0, 50.0, 12.5);
        Preset {
            name: name.to_string(),
            input_mel: MelConfig::new(input_sr, 80, 125.0, input_upper, 25.0, 10.0),
            encoder: EncoderConfig {
                model_dim: 144,
                n_blocks: 16,
                n_heads: 4,
                conv_kernel: 32,
                subsample_factor: 4,
                ff_expansion: 4,
                dropout_prob: 0.1,
                max_rel_distance: 64,
            },
            decoder: DecoderConfig {
                lstm_dim: dec_dim,
                lstm_layers: dec_layers,
                zoneout_prob: 0.1,
                phoneme_embedding_dim: emb,
                label_smoothing: 0.1,
                attention: AttentionConfig { heads: att_heads, hidden_dim: att_hidden, output_dim: att_out, dropout_prob: att_dropout },
                max_decode_len: 200,
            },
            synth: SynthConfig {
                duration_dim: dur_dim,
                duration_layers: 2,
                duration_bidirectional: true,
                range_floor: 0.5,
                prenet_dim: 128,
                prenet_layers: 2,
                prenet_dropout: 0.5,
                lstm_dim: 1024,
                lstm_layers: 2,
                zoneout_prob: 0.1,
                postnet: postnet(4, 512, output_mel.n_mels),
                variant: SynthVariant::Autoregressive,
                nar_blocks: 6,
                nar_dim: 512,
                nar_heads: 8,
                nar_conv_kernel: 32,
                init_duration: 8.0,
            },
            output_mel,
            train: TrainConfig {
                phoneme_w: 10.0,
                duration_w: 1.0,
                spec_w: 1.0,
                peak_lr,
                warmup_steps: warmup,
                batch_size: batch,
                l2_reg_weight: 1e-6,
                max_steps: 200_000,
                eval_every: 1000,
                seed: 1,
                adam_beta1: 0.9,
                adam_beta2: 0.98,
                adam_eps: 1e-9,
                clip_norm: 1.0,
                concat_aug_prob: 0.0,
                spec_augment: SpecAugmentPolicy::default(),
                prefetch: 4,
            },
            eval: EvalConfig { udr_threshold_seconds: 1.0, segment_seconds: 1.6, griffin_lim_iters: 60, bleu_order: 4 },
            corpus: CorpusConfig::default(),
        }
    }

    fn toy() -> Preset {
        let mel = MelConfig::new(8000, 40, 20.0, 3800.0, 50.0, 12.5);
        let mut p = Self::standard("toy", 8000, 3800.0, 64, 64, 4, 0.1, 128, 2, 32, 32, 2e-3, 400, 8);
        p.input_mel = mel.clone();
        p.output_mel = mel;
        p.encoder = EncoderConfig {
            model_dim: 64,
            n_blocks: 4,
            n_heads: 4,
            conv_kernel: 8,
            subsample_factor: 4,
            ff_expansion: 4,
            dropout_prob: 0.1,
            max_rel_distance: 64,
        };
        p.decoder.max_decode_len = 40;
        p.synth.duration_layers = 1;
        p.synth.prenet_dim = 16;
        p.synth.lstm_dim = 128;
        p.synth.postnet = postnet(2, 64, 40);
        p.synth.nar_blocks = 2;
        p.synth.nar_dim = 64;
        p.synth.nar_heads = 4;
        p.synth.nar_conv_kernel = 8;
        p.synth.init_duration = 6.0;
        p.train.max_steps = 5000;
        p.train.eval_every = 500;
        p.train.concat_aug_prob = 0.5;
        p.eval = EvalConfig { udr_threshold_seconds: 0.15, segment_seconds: 0.25, griffin_lim_iters: 60, bleu_order: 4 };
        p
    }

    /// Phoneme inventory of the corpus, including PAD/BOS/EOS.
    pub fn vocab_size(&self) -> usize {
        crate::corpus::RESERVED + self.corpus.grammar.source_vocab
    }

    pub fn validate(&self) -> Result<()> {
        self.input_mel.validate()?;
        self.output_mel.validate()?;
        self.encoder.validate()?;
        self.decoder.validate()?;
        self.synth.validate(self.output_mel.n_mels)?;
        self.train.validate()?;
        self.corpus.validate()?;
        if self.eval.segment_seconds <= 0.0 || self.eval.udr_threshold_seconds <= 0.0 || self.eval.griffin_lim_iters == 0 {
            return Err(Error::Config("eval thresholds and iterations must be positive".into()));
        }
        Ok(())
    }

    pub fn to_kv(&self) -> Vec<(String, String)> {
        let mut out = vec![("preset".to_string(), self.name.clone())];
        let mut push = |k: &str, v: String| out.push((k.to_string(), v));
        for (k, v) in self.input_mel.to_kv() {
            push(&format!("input.{k}"), v);
        }
        for (k, v) in self.output_mel.to_kv() {
            push(&format!("output.{k}"), v);
        }
        let e = &self.encoder;
        push("encoder.dims", format!("{}x{}", e.model_dim, e.n_blocks));
        push("encoder.heads", e.n_heads.to_string());
        push("encoder.conv_kernel", e.conv_kernel.to_string());
        push("encoder.subsample", e.subsample_factor.to_string());
        push("encoder.ff_expansion", e.ff_expansion.to_string());
        push("encoder.dropout", e.dropout_prob.to_string());
        push("encoder.max_rel_distance", e.max_rel_distance.to_string());
        let a = &self.decoder.attention;
        push("attention.heads", a.heads.to_string());
        push("attention.hidden_dim", a.hidden_dim.to_string());
        push("attention.output_dim", a.output_dim.to_string());
        push("attention.dropout", a.dropout_prob.to_string());
        let d = &self.decoder;
        push("decoder.lstm", format!("{}x{}", d.lstm_dim, d.lstm_layers));
        push("decoder.zoneout", d.zoneout_prob.to_string());
        push("decoder.embedding_dim", d.phoneme_embedding_dim.to_string());
        push("decoder.label_smoothing", d.label_smoothing.to_string());
        push("decoder.max_decode_len", d.max_decode_len.to_string());
        let s = &self.synth;
        push("duration.lstm", format!("{}x{}", s.duration_dim, s.duration_layers));
        push("duration.bidirectional", s.duration_bidirectional.to_string());
        push("duration.range_floor", s.range_floor.to_string());
        push("duration.init", s.init_duration.to_string());
        push("synth.prenet", format!("{}x{}", s.prenet_dim, s.prenet_layers));
        push("synth.prenet_dropout", s.prenet_dropout.to_string());
        push("synth.lstm", format!("{}x{}", s.lstm_dim, s.lstm_layers));
        push("synth.zoneout", s.zoneout_prob.to_string());
        push("synth.postnet", s.postnet.iter().map(|(k, c)| format!("{k}x{c}")).collect::<Vec<_>>().join(","));
        push("synth.variant", s.variant.name().to_string());
        push("synth.nar_dims", format!("{}x{}", s.nar_dim, s.nar_blocks));
        push("synth.nar_heads", s.nar_heads.to_string());
        push("synth.nar_conv_kernel", s.nar_conv_kernel.to_string());
        let t = &self.train;
        push("train.phoneme_w", t.phoneme_w.to_string());
        push("train.duration_w", t.duration_w.to_string());
        push("train.spec_w", t.spec_w.to_string());
        push("train.peak_lr", t.peak_lr.to_string());
        push("train.warmup_steps", t.warmup_steps.to_string());
        push("train.batch_size", t.batch_size.to_string());
        push("train.l2_weight", t.l2_reg_weight.to_string());
        push("train.max_steps", t.max_steps.to_string());
        push("train.eval_every", t.eval_every.to_string());
        push("train.seed", t.seed.to_string());
        push("train.adam_beta1", t.adam_beta1.to_string());
        push("train.adam_beta2", t.adam_beta2.to_string());
        push("train.adam_eps", t.adam_eps.to_string());
        push("train.clip_norm", t.clip_norm.to_string());
        push("train.concat_aug_prob", t.concat_aug_prob.to_string());
        push("train.prefetch", t.prefetch.to_string());
        for (k, v) in t.spec_augment.to_kv("specaugment.") {
            push(&k, v);
        }
        let ev = &self.eval;
        push("eval.udr_threshold_s", ev.udr_threshold_seconds.to_string());
        push("eval.segment_s", ev.segment_seconds.to_string());
        push("eval.griffin_lim_iters", ev.griffin_lim_iters.to_string());
        push("eval.bleu_order", ev.bleu_order.to_string());
        for (k, v) in self.corpus.to_kv() {
            push(&format!("corpus.{k}"), v);
        }
        out
    }

    pub fn dump(&self) -> String {
        kv::dump(&self.to_kv())
    }

    /// Applies one `key=value` setting.
    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        if let Some(k) = key.strip_prefix("input.") {
            return self.input_mel.set(k, v);
        }
        if let Some(k) = key.strip_prefix("output.") {
            return self.output_mel.set(k, v);
        }
        if let Some(k) = key.strip_prefix("corpus.") {
            return self.corpus.set(k, v);
        }
        if let Some(k) = key.strip_prefix("specaugment.") {
            return self.train.spec_augment.set(k, key, v);
        }
        let (e, d, s, t, ev) = (&mut self.encoder, &mut self.decoder, &mut self.synth, &mut self.train, &mut self.eval);
        match key {
            "preset" => self.name = v.to_string(),
            "encoder.dims" => (e.model_dim, e.n_blocks) = kv::dims(key, v)?,
            "encoder.heads" => e.n_heads = kv::value(key, v)?,
            "encoder.conv_kernel" => e.conv_kernel = kv::value(key, v)?,
            "encoder.subsample" => e.subsample_factor = kv::value(key, v)?,
            "encoder.ff_expansion" => e.ff_expansion = kv::value(key, v)?,
            "encoder.dropout" => e.dropout_prob = kv::value(key, v)?,
            "encoder.max_rel_distance" => e.max_rel_distance = kv::value(key, v)?,
            "attention.heads" => d.attention.heads = kv::value(key, v)?,
            "attention.hidden_dim" => d.attention.hidden_dim = kv::value(key, v)?,
            "attention.output_dim" => d.attention.output_dim = kv::value(key, v)?,
            "attention.dropout" => d.attention.dropout_prob = kv::value(key, v)?,
            "decoder.lstm" => (d.lstm_dim, d.lstm_layers) = kv::dims(key, v)?,
            "decoder.zoneout" => d.zoneout_prob = kv::value(key, v)?,
            "decoder.embedding_dim" => d.phoneme_embedding_dim = kv::value(key, v)?,
            "decoder.label_smoothing" => d.label_smoothing = kv::value(key, v)?,
            "decoder.max_decode_len" => d.max_decode_len = kv::value(key, v)?,
            "duration.lstm" => (s.duration_dim, s.duration_layers) = kv::dims(key, v)?,
            "duration.bidirectional" => s.duration_bidirectional = kv::flag(key, v)?,
            "duration.range_floor" => s.range_floor = kv::value(key, v)?,
            "duration.init" => s.init_duration = kv::value(key, v)?,
            "synth.prenet" => (s.prenet_dim, s.prenet_layers) = kv::dims(key, v)?,
            "synth.prenet_dropout" => s.prenet_dropout = kv::value(key, v)?,
            "synth.lstm" => (s.lstm_dim, s.lstm_layers) = kv::dims(key, v)?,
            "synth.zoneout" => s.zoneout_prob = kv::value(key, v)?,
            "synth.postnet" => {
                s.postnet = if v.trim().is_empty() {
                    Vec::new()
                } else {
                    v.split(',').map(|p| kv::dims(key, p)).collect::<Result<_>>()?
                }
            }
            "synth.variant" => {
                s.variant = match v.trim() {
                    "autoregressive" => SynthVariant::Autoregressive,
                    "nonautoregressive" => SynthVariant::NonAutoregressive,
                    _ => return Err(Error::Config(format!("bad value {v:?} for {key}"))),
                }
            }
            "synth.nar_dims" => (s.nar_dim, s.nar_blocks) = kv::dims(key, v)?,
            "synth.nar_heads" => s.nar_heads = kv::value(key, v)?,
            "synth.nar_conv_kernel" => s.nar_conv_kernel = kv::value(key, v)?,
            "train.phoneme_w" => t.phoneme_w = kv::value(key, v)?,
            "train.duration_w" => t.duration_w = kv::value(key, v)?,
            "train.spec_w" => t.spec_w = kv::value(key, v)?,
            "train.peak_lr" => t.peak_lr = kv::value(key, v)?,
            "train.warmup_steps" => t.warmup_steps = kv::value(key, v)?,
            "train.batch_size" => t.batch_size = kv::value(key, v)?,
            "train.l2_weight" => t.l2_reg_weight = kv::value(key, v)?,
            "train.max_steps" => t.max_steps = kv::value(key, v)?,
            "train.eval_every" => t.eval_every = kv::value(key, v)?,
            "train.seed" => t.seed = kv::value(key, v)?,
            "train.adam_beta1" => t.adam_beta1 = kv::value(key, v)?,
            "train.adam_beta2" => t.adam_beta2 = kv::value(key, v)?,
            "train.adam_eps" => t.adam_eps = kv::value(key, v)?,
            "train.clip_norm" => t.clip_norm = kv::value(key, v)?,
            "train.concat_aug_prob" => t.concat_aug_prob = kv::value(key, v)?,
            "train.prefetch" => t.prefetch = kv::value(key, v)?,
            "eval.udr_threshold_s" => ev.udr_threshold_seconds = kv::value(key, v)?,
            "eval.segment_s" => ev.segment_seconds = kv::value(key, v)?,
            "eval.griffin_lim_iters" => ev.griffin_lim_iters = kv::value(key, v)?,
            "eval.bleu_order" => ev.bleu_order = kv::value(key, v)?,
            _ => return Err(kv::unknown(key)),
        }
        Ok(())
    }

    /// Applies overrides in order, then validates.
    pub fn with_overrides<'a>(mut self, overrides: impl IntoIterator<Item = (&'a str, &'a str)>) -> Result<Preset> {
        for (k, v) in overrides {
            self.set(k, v)?;
        }
        self.validate()?;
        Ok(self)
    }

    /// Parses a full dump: `preset=` selects the base, remaining keys override it.
    pub fn from_kv_text(text: &str) -> Result<Preset> {
        let pairs = kv::parse(text)?;
        let base = pairs
            .iter()
            .find(|(k, _)| k == "preset")
            .map(|(_, v)| v.as_str())
            .ok_or_else(|| Error::Config("config lacks a preset= line".into()))?;
        let base = if PRESET_NAMES.contains(&base) { base } else { "toy" };
        Preset::named(base)?.with_overrides(pairs.iter().map(|(k, v)| (k.as_str(), v.as_str())))
    }

    /// FNV-1a of the dump, excluding settings that may change on resume.
    pub fn fingerprint(&self) -> u64 {
        let pairs: Vec<(String, String)> = self
            .to_kv()
            .into_iter()
            .filter(|(k, _)| !matches!(k.as_str(), "train.max_steps" | "train.eval_every" | "train.prefetch"))
            .collect();
        kv::fingerprint(&kv::dump(&pairs))
    }
}
