//! Duration-based acoustic synthesizer: duration and range prediction,
//! Gaussian upsampling, an autoregressive LSTM spectrogram decoder (or a
//! Conformer stack) and a residual post-net.

use s2st_numerics::{Conv1dSpec, Graph, Scalar, Tensor, Var};

use crate::config::{SynthConfig, SynthVariant};
use crate::encoder::{frame_mask, ConformerBlock};
use crate::error::{Error, Result};
use crate::nn::{apply_mask, constant, Conv1d, Linear, Lstm, LstmStack, ModelRng, ParamBuilder};

/// Below this summed duration upsampling is degenerate.
pub const DURATION_EPS: f64 = 1e-6;
const NAR_MAX_REL_DISTANCE: usize = 64;
const NAR_DROPOUT: f64 = 0.1;
const NAR_FF_EXPANSION: usize = 4;

/// Per-phoneme durations and spreads, `[B, L]` each, in output frames.
#[derive(Clone, Copy, Debug)]
pub struct DurationVector {
    pub durations: Var,
    pub ranges: Var,
}

#[derive(Clone, Debug)]
pub struct DurationPredictor {
    trunk: LstmStack,
    head: Linear,
    range_floor: f64,
}

fn softplus_inverse(y: f64) -> f64 {
    if y > 30.0 {
        y
    } else {
        y.exp_m1().ln()
    }
}

impl DurationPredictor {
    pub fn new(pb: &mut ParamBuilder, cfg: &SynthConfig, input: usize) -> Result<Self> {
        let mut s = pb.scope("duration");
        let trunk = LstmStack::new(&mut s, "lstm", input, cfg.duration_dim, cfg.duration_layers, cfg.duration_bidirectional)?;
        let head = Linear::new(&mut s, "head", trunk.output_dim(), 2, true)?;
        let bias = vec![softplus_inverse(cfg.init_duration) as f32, softplus_inverse(0.5 * cfg.init_duration) as f32];
        s.set(head.b.unwrap(), Tensor::new(&[2], bias)?)?;
        Ok(DurationPredictor { trunk, head, range_floor: cfg.range_floor })
    }

    /// `features`: `[B, L, D]`; `mask`: `[B·L]`.
    pub fn predict<T: Scalar>(&self, g: &mut Graph<T>, features: Var, mask: &[f32], rng: &mut ModelRng) -> Result<DurationVector> {
        let shape = g.shape(features).to_vec();
        let (b, l) = (shape[0], shape[1]);
        let h = self.trunk.run(g, features, Some(mask), 0.0, rng)?;
        let heads = self.head.forward(g, h)?;
        let heads = g.softplus(heads);
        let d = g.slice(heads, 2, 0, 1)?;
        let d = g.reshape(d, &[b, l])?;
        let m: Vec<T> = mask.iter().map(|&v| T::from_f64(v as f64)).collect();
        let durations = g.mul_const(d, m)?;
        let r = g.slice(heads, 2, 1, 1)?;
        let r = g.reshape(r, &[b, l])?;
        let ranges = g.add_scalar(r, T::from_f64(self.range_floor));
        Ok(DurationVector { durations, ranges })
    }
}

/// Upsampled frames with the alignment that produced them.
#[derive(Clone, Debug)]
pub struct Upsampled {
    /// `[B, T, D]`, zero beyond each item's length.
    pub frames: Var,
    /// `[B, T, L]`.
    pub weights: Var,
    /// Durations after any length matching, `[B, L]`.
    pub durations_used: Var,
    pub lens: Vec<usize>,
    pub mask: Vec<f32>,
    pub was_scaled: bool,
    /// Items whose summed duration was below [`DURATION_EPS`].
    pub degenerate: Vec<bool>,
}

impl Upsampled {
    pub fn len(&self) -> usize {
        self.lens.iter().copied().max().unwrap_or(0)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

fn row_sums<T: Scalar>(g: &Graph<T>, v: Var, b: usize) -> Vec<f64> {
    let d = g.value(v).data();
    let l = d.len() / b.max(1);
    (0..b).map(|i| d[i * l..(i + 1) * l].iter().map(|x| x.to_f64()).sum()).collect()
}

/// Multiplies row `i` of `[B, L]` by `factors[i]` (`[B]`).
fn scale_items<T: Scalar>(g: &mut Graph<T>, x: Var, factors: Var) -> Result<Var> {
    let xt = g.permute(x, &[1, 0])?;
    let y = g.mul(xt, factors)?;
    Ok(g.permute(y, &[1, 0])?)
}

/// Gaussian upsampling. With `target_lens` the durations are rescaled so
/// each item spans exactly its target; otherwise an item spans
/// `max(1, round(Σd))` frames.
pub fn upsample<T: Scalar>(
    g: &mut Graph<T>,
    features: Var,
    dv: &DurationVector,
    phoneme_mask: &[f32],
    target_lens: Option<&[usize]>,
) -> Result<Upsampled> {
    let shape = g.shape(features).to_vec();
    let (b, l) = (shape[0], shape[1]);
    if g.shape(dv.durations) != [b, l] || g.shape(dv.ranges) != [b, l] || phoneme_mask.len() != b * l {
        return Err(Error::Data(format!("duration shapes do not match features {shape:?}")));
    }
    let sums = row_sums(g, dv.durations, b);
    let degenerate: Vec<bool> = sums.iter().map(|&s| !(s > DURATION_EPS)).collect();
    let (durations_used, lens, was_scaled) = match target_lens {
        Some(targets) => {
            if targets.len() != b {
                return Err(Error::Data(format!("{} target lengths for batch {b}", targets.len())));
            }
            // target / max(Σd, ε), through exp(−log)
            let total = g.sum_last(dv.durations)?;
            let keep: Vec<T> = degenerate.iter().map(|&d| if d { T::zero() } else { T::one() }).collect();
            let total = g.mul_const(total, keep)?;
            let floor: Vec<T> = degenerate.iter().map(|&d| T::from_f64(if d { DURATION_EPS } else { 0.0 })).collect();
            let floor = g.constant(Tensor::new(&[b], floor)?);
            let denom = g.add(total, floor)?;
            let log = g.log(denom);
            let neg = g.mul_scalar(log, T::from_f64(-1.0));
            let inv = g.exp(neg);
            let tgt: Vec<T> = targets.iter().map(|&t| T::from_f64(t as f64)).collect();
            let factor = g.mul_const(inv, tgt)?;
            (scale_items(g, dv.durations, factor)?, targets.to_vec(), true)
        }
        None => {
            let lens = sums.iter().map(|&s| if s > DURATION_EPS { (s.round() as usize).max(1) } else { 1 }).collect();
            (dv.durations, lens, false)
        }
    };
    let t = lens.iter().copied().max().unwrap_or(0);
    if t == 0 {
        return Err(Error::Data("upsampling to zero frames".into()));
    }
    let cum = g.cumsum(durations_used)?;
    let half = g.mul_scalar(durations_used, T::from_f64(0.5));
    let centers = g.sub(cum, half)?;
    let logits = g.gaussian_logits(centers, dv.ranges, t)?;
    let valid: Vec<bool> = phoneme_mask.iter().map(|&m| m > 0.5).collect();
    let weights = g.masked_softmax(logits, &valid)?;
    let frames = g.batch_matmul(weights, features, false, false)?;
    let mask = frame_mask(&lens, t);
    let frames = apply_mask(g, frames, &mask)?;
    Ok(Upsampled { frames, weights, durations_used, lens, mask, was_scaled, degenerate })
}

/// `((Σd − target) · step)²` averaged over the batch, on unscaled durations.
pub fn total_duration_loss<T: Scalar>(g: &mut Graph<T>, dv: &DurationVector, target_lens: &[usize], frame_step_seconds: f64) -> Result<Var> {
    let b = target_lens.len();
    let total = g.sum_last(dv.durations)?;
    let tgt: Vec<T> = target_lens.iter().map(|&t| T::from_f64(t as f64)).collect();
    let tgt = g.constant(Tensor::new(&[b], tgt)?);
    let diff = g.sub(total, tgt)?;
    let sq = g.square(diff);
    let s = g.sum(sq);
    Ok(g.mul_scalar(s, T::from_f64(frame_step_seconds * frame_step_seconds / b as f64)))
}

#[derive(Clone, Debug)]
pub struct Prenet {
    layers: Vec<Linear>,
    dropout: f64,
}

impl Prenet {
    pub fn new(pb: &mut ParamBuilder, input: usize, dim: usize, layers: usize, dropout: f64) -> Result<Self> {
        let mut s = pb.scope("prenet");
        let mut out = Vec::with_capacity(layers);
        let mut width = input;
        for i in 0..layers {
            out.push(Linear::new(&mut s, &format!("l{i}"), width, dim, true)?);
            width = dim;
        }
        Ok(Prenet { layers: out, dropout })
    }

    pub fn output_dim(&self, input: usize) -> usize {
        self.layers.last().map_or(input, |l| l.output)
    }

    /// Dropout stays active outside training.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, mut x: Var, rng: &mut ModelRng) -> Result<Var> {
        for l in &self.layers {
            let y = l.forward(g, x)?;
            let y = g.relu(y);
            x = g.dropout_always(y, self.dropout, rng)?;
        }
        Ok(x)
    }
}

#[derive(Clone, Debug)]
pub struct Postnet {
    stages: Vec<Conv1d>,
}

impl Postnet {
    pub fn new(pb: &mut ParamBuilder, channels: usize, stages: &[(usize, usize)]) -> Result<Self> {
        let mut s = pb.scope("postnet");
        let mut input = channels;
        let mut out = Vec::with_capacity(stages.len());
        for (i, &(k, ch)) in stages.iter().enumerate() {
            out.push(Conv1d::new(&mut s, &format!("conv{i}"), input, ch, k, Conv1dSpec::same(k))?);
            input = ch;
        }
        Ok(Postnet { stages: out })
    }

    /// Residual `[B, T, C]`; tanh between stages, the last is linear.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, mut x: Var, mask: &[f32]) -> Result<Var> {
        let n = self.stages.len();
        for (i, conv) in self.stages.iter().enumerate() {
            x = conv.forward(g, x)?;
            if i + 1 < n {
                x = g.tanh(x);
            }
            x = apply_mask(g, x, mask)?;
        }
        Ok(x)
    }
}

/// LSTM spectrogram decoder fed by the upsampled frame and the pre-net of
/// the previous output frame.
#[derive(Clone, Debug)]
pub struct AutoregressiveSynth {
    pub prenet: Prenet,
    lstm: Vec<Lstm>,
    out: Linear,
    zoneout: f64,
    channels: usize,
}

impl AutoregressiveSynth {
    pub fn new(pb: &mut ParamBuilder, cfg: &SynthConfig, input: usize, channels: usize) -> Result<Self> {
        let prenet = Prenet::new(pb, channels, cfg.prenet_dim, cfg.prenet_layers, cfg.prenet_dropout)?;
        let mut s = pb.scope("ar");
        let mut width = input + prenet.output_dim(channels);
        let mut lstm = Vec::with_capacity(cfg.lstm_layers);
        for i in 0..cfg.lstm_layers {
            lstm.push(Lstm::new(&mut s, &format!("lstm{i}"), width, cfg.lstm_dim)?);
            width = cfg.lstm_dim;
        }
        let out = Linear::new(&mut s, "out", width, channels, true)?;
        Ok(AutoregressiveSynth { prenet, lstm, out, zoneout: cfg.zoneout_prob, channels })
    }

    /// Teacher forcing: frame `t` sees `teacher[t − 1]`, zeros at `t = 0`.
    pub fn teacher_forced<T: Scalar>(&self, g: &mut Graph<T>, up: Var, teacher: &[f32], rng: &mut ModelRng) -> Result<Var> {
        let shape = g.shape(up).to_vec();
        let (b, t) = (shape[0], shape[1]);
        let c = self.channels;
        if teacher.len() != b * t * c {
            return Err(Error::Data(format!("teacher mel has {} values, expected {b}x{t}x{c}", teacher.len())));
        }
        let mut shifted = vec![0.0f32; b * t * c];
        for i in 0..b {
            for f in 1..t {
                let dst = (i * t + f) * c;
                let src = (i * t + f - 1) * c;
                shifted[dst..dst + c].copy_from_slice(&teacher[src..src + c]);
            }
        }
        let prev = constant(g, &[b, t, c], &shifted)?;
        let pre = self.prenet.forward(g, prev, rng)?;
        let mut x = g.concat(&[up, pre], 2)?;
        for layer in &self.lstm {
            x = layer.run(g, x, None, false, self.zoneout, rng)?;
        }
        self.out.forward(g, x)
    }

    /// Free running: each step consumes its own previous output.
    pub fn free_running<T: Scalar>(&self, g: &mut Graph<T>, up: Var, rng: &mut ModelRng) -> Result<Var> {
        let shape = g.shape(up).to_vec();
        let (b, t, d) = (shape[0], shape[1], shape[2]);
        let mut prev = g.constant(Tensor::zeros(&[b, self.channels]));
        let mut states: Vec<_> = self.lstm.iter().map(|l| l.zero_state(g, b)).collect();
        let mut frames = Vec::with_capacity(t);
        for f in 0..t {
            let uf = g.slice(up, 1, f, 1)?;
            let uf = g.reshape(uf, &[b, d])?;
            let pre = self.prenet.forward(g, prev, rng)?;
            let mut x = g.concat(&[uf, pre], 1)?;
            for (layer, st) in self.lstm.iter().zip(states.iter_mut()) {
                let xw = layer.wx.forward(g, x)?;
                *st = layer.step(g, xw, *st, self.zoneout, rng)?;
                x = st.h;
            }
            prev = self.out.forward(g, x)?;
            frames.push(g.reshape(prev, &[b, 1, self.channels])?);
        }
        Ok(g.concat(&frames, 1)?)
    }
}

/// Projection, Conformer blocks, projection.
#[derive(Clone, Debug)]
pub struct NonAutoregressiveSynth {
    input: Linear,
    blocks: Vec<ConformerBlock>,
    out: Linear,
}

impl NonAutoregressiveSynth {
    pub fn new(pb: &mut ParamBuilder, cfg: &SynthConfig, input: usize, channels: usize) -> Result<Self> {
        let mut s = pb.scope("nar");
        let proj = Linear::new(&mut s, "in", input, cfg.nar_dim, true)?;
        let blocks = (0..cfg.nar_blocks)
            .map(|i| {
                ConformerBlock::new(
                    &mut s,
                    &format!("block{i}"),
                    cfg.nar_dim,
                    cfg.nar_heads,
                    cfg.nar_conv_kernel,
                    NAR_FF_EXPANSION,
                    NAR_MAX_REL_DISTANCE,
                    NAR_DROPOUT,
                )
            })
            .collect::<Result<_>>()?;
        let out = Linear::new(&mut s, "out", cfg.nar_dim, channels, true)?;
        Ok(NonAutoregressiveSynth { input: proj, blocks, out })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, up: Var, mask: &[f32], rng: &mut ModelRng) -> Result<Var> {
        let mut x = self.input.forward(g, up)?;
        for block in &self.blocks {
            x = block.forward(g, x, mask, rng)?;
        }
        self.out.forward(g, x)
    }
}

#[derive(Clone, Debug)]
pub enum SynthBody {
    Autoregressive(AutoregressiveSynth),
    NonAutoregressive(NonAutoregressiveSynth),
}

/// Spectrogram frames `[B, T, C]` before and after the post-net.
#[derive(Clone, Debug)]
pub struct SpectrogramPrediction {
    pub before_postnet: Var,
    pub after_postnet: Var,
    pub durations: DurationVector,
    pub upsampled: Upsampled,
}

impl SpectrogramPrediction {
    pub fn was_scaled(&self) -> bool {
        self.upsampled.was_scaled
    }
}

#[derive(Clone, Debug)]
pub struct Synthesizer {
    pub duration: DurationPredictor,
    pub body: SynthBody,
    pub postnet: Postnet,
    pub config: SynthConfig,
    pub channels: usize,
}

impl Synthesizer {
    /// `input`: width of the per-phoneme feature (hidden plus context).
    pub fn new(pb: &mut ParamBuilder, cfg: &SynthConfig, input: usize, channels: usize) -> Result<Self> {
        cfg.validate(channels)?;
        let mut s = pb.scope("synth");
        let duration = DurationPredictor::new(&mut s, cfg, input)?;
        let body = match cfg.variant {
            SynthVariant::Autoregressive => SynthBody::Autoregressive(AutoregressiveSynth::new(&mut s, cfg, input, channels)?),
            SynthVariant::NonAutoregressive => {
                SynthBody::NonAutoregressive(NonAutoregressiveSynth::new(&mut s, cfg, input, channels)?)
            }
        };
        let postnet = Postnet::new(&mut s, channels, &cfg.postnet)?;
        Ok(Synthesizer { duration, body, postnet, config: cfg.clone(), channels })
    }

    /// Per-phoneme features `[B, L, hidden + context]`.
    pub fn features<T: Scalar>(g: &mut Graph<T>, hidden_pre_projection: Var, context: Var) -> Result<Var> {
        Ok(g.concat(&[hidden_pre_projection, context], 2)?)
    }

    fn finish<T: Scalar>(&self, g: &mut Graph<T>, before: Var, durations: DurationVector, upsampled: Upsampled) -> Result<SpectrogramPrediction> {
        let before = apply_mask(g, before, &upsampled.mask)?;
        let residual = self.postnet.forward(g, before, &upsampled.mask)?;
        let after = g.add(before, residual)?;
        Ok(SpectrogramPrediction { before_postnet: before, after_postnet: after, durations, upsampled })
    }

    /// Training path: durations scaled to `target_lens`, teacher-forced on
    /// `target` `[B, T, C]` where `T = max(target_lens)`.
    pub fn forward_train<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        features: Var,
        phoneme_mask: &[f32],
        target: &[f32],
        target_lens: &[usize],
        rng: &mut ModelRng,
    ) -> Result<SpectrogramPrediction> {
        let dv = self.duration.predict(g, features, phoneme_mask, rng)?;
        let up = upsample(g, features, &dv, phoneme_mask, Some(target_lens))?;
        let t = up.len();
        let b = target_lens.len();
        if target.len() != b * t * self.channels {
            return Err(Error::Data(format!("target mel has {} values, expected {b}x{t}x{}", target.len(), self.channels)));
        }
        let before = match &self.body {
            SynthBody::Autoregressive(ar) => ar.teacher_forced(g, up.frames, target, rng)?,
            SynthBody::NonAutoregressive(nar) => nar.forward(g, up.frames, &up.mask, rng)?,
        };
        self.finish(g, before, dv, up)
    }

    /// Inference path; `duration_scale` multiplies the predicted durations.
    pub fn infer<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        features: Var,
        phoneme_mask: &[f32],
        duration_scale: f64,
        rng: &mut ModelRng,
    ) -> Result<SpectrogramPrediction> {
        let mut dv = self.duration.predict(g, features, phoneme_mask, rng)?;
        if duration_scale != 1.0 {
            dv.durations = g.mul_scalar(dv.durations, T::from_f64(duration_scale));
        }
        let up = upsample(g, features, &dv, phoneme_mask, None)?;
        let before = match &self.body {
            SynthBody::Autoregressive(ar) => ar.free_running(g, up.frames, rng)?,
            SynthBody::NonAutoregressive(nar) => nar.forward(g, up.frames, &up.mask, rng)?,
        };
        self.finish(g, before, dv, up)
    }
}

/// Mean squared error over unmasked cells, before plus after the post-net.
pub fn spectrogram_loss<T: Scalar>(g: &mut Graph<T>, pred: &SpectrogramPrediction, target: &[f32], frame_mask: &[f32]) -> Result<Var> {
    let shape = g.shape(pred.after_postnet).to_vec();
    if target.len() != shape.iter().product::<usize>() || frame_mask.len() * shape[2] != target.len() {
        return Err(Error::Data(format!("target of {} values for prediction {shape:?}", target.len())));
    }
    let cells: f64 = frame_mask.iter().map(|&m| m as f64).sum::<f64>() * shape[2] as f64;
    let tgt = constant(g, &shape, target)?;
    let factors: Vec<T> = frame_mask.iter().map(|&m| T::from_f64(m as f64)).collect();
    let mut parts = Vec::with_capacity(2);
    for v in [pred.before_postnet, pred.after_postnet] {
        let d = g.sub(v, tgt)?;
        let sq = g.square(d);
        let sq = g.scale_rows(sq, factors.clone())?;
        parts.push(g.sum(sq));
    }
    let total = g.add(parts[0], parts[1])?;
    Ok(g.mul_scalar(total, T::from_f64(if cells > 0.0 { 1.0 / cells } else { 0.0 })))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use s2st_numerics::{grad_check, ParamStore};

    fn cfg() -> SynthConfig {
        SynthConfig {
            duration_dim: 3,
            duration_layers: 1,
            duration_bidirectional: true,
            range_floor: 0.5,
            prenet_dim: 3,
            prenet_layers: 2,
            prenet_dropout: 0.5,
            lstm_dim: 4,
            lstm_layers: 1,
            zoneout_prob: 0.0,
            postnet: vec![(3, 4), (3, 2)],
            variant: SynthVariant::Autoregressive,
            nar_blocks: 1,
            nar_dim: 4,
            nar_heads: 2,
            nar_conv_kernel: 3,
            init_duration: 2.0,
        }
    }

    fn perturbed(store: &mut ParamStore<f32>, seed: u64) {
        let mut rng = ModelRng::seed_from_u64(seed);
        let ids: Vec<_> = store.iter().map(|(id, _)| id).collect();
        for id in ids {
            for v in store.get_mut(id).value.data_mut() {
                *v += rng.gen_range(-0.2..0.2);
            }
        }
    }

    fn build(cfg: &SynthConfig) -> (Synthesizer, ParamStore<f32>) {
        let mut store = ParamStore::new();
        let mut rng = ModelRng::seed_from_u64(4);
        let s = Synthesizer::new(&mut ParamBuilder::new(&mut store, &mut rng), cfg, 5, 2).unwrap();
        perturbed(&mut store, 9);
        (s, store)
    }

    fn dv_const(g: &mut Graph<f64>, d: &[f64], r: &[f64]) -> DurationVector {
        let n = d.len();
        DurationVector {
            durations: g.constant(Tensor::new(&[1, n], d.to_vec()).unwrap()),
            ranges: g.constant(Tensor::new(&[1, n], r.to_vec()).unwrap()),
        }
    }

    fn features(g: &mut Graph<f64>, l: usize, d: usize) -> Var {
        g.constant(Tensor::from_fn(&[1, l, d], |i| (i as f64 * 0.37).sin()))
    }

    #[test]
    fn single_token_fills_every_frame() {
        let mut g = Graph::<f64>::detached(false);
        let f = features(&mut g, 1, 3);
        let dv = dv_const(&mut g, &[7.0], &[1.0]);
        let up = upsample(&mut g, f, &dv, &[1.0], None).unwrap();
        assert_eq!(up.lens, vec![7]);
        let fv = g.value(f).data().to_vec();
        for row in g.value(up.frames).data().chunks(3) {
            for (a, b) in row.iter().zip(&fv) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn vanishing_range_is_repetition() {
        let mut g = Graph::<f64>::detached(false);
        let f = features(&mut g, 2, 3);
        let dv = dv_const(&mut g, &[2.0, 3.0], &[1e-3, 1e-3]);
        let up = upsample(&mut g, f, &dv, &[1.0, 1.0], None).unwrap();
        assert_eq!(up.lens, vec![5]);
        let fv = g.value(f).data().to_vec();
        let out = g.value(up.frames).data();
        for (t, tok) in [0, 0, 1, 1, 1].iter().enumerate() {
            for c in 0..3 {
                assert!((out[t * 3 + c] - fv[tok * 3 + c]).abs() < 1e-3);
            }
        }
    }

    #[test]
    fn rows_sum_to_one_and_length_rounds() {
        let mut rng = ModelRng::seed_from_u64(1);
        for _ in 0..200 {
            let l = rng.gen_range(1..8);
            let d: Vec<f64> = (0..l).map(|_| rng.gen_range(0.0..6.0)).collect();
            let r: Vec<f64> = (0..l).map(|_| rng.gen_range(0.1..3.0)).collect();
            let mut g = Graph::<f64>::detached(false);
            let f = features(&mut g, l, 2);
            let dv = dv_const(&mut g, &d, &r);
            let up = upsample(&mut g, f, &dv, &vec![1.0; l], None).unwrap();
            let sum: f64 = d.iter().sum();
            assert_eq!(up.lens[0], (sum.round() as usize).max(1));
            for row in g.value(up.weights).data().chunks(l) {
                assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-6);
                assert!(row.iter().all(|&w| w >= 0.0));
            }
        }
    }

    #[test]
    fn zero_durations_are_degenerate() {
        let mut g = Graph::<f64>::detached(false);
        let f = features(&mut g, 2, 2);
        let dv = dv_const(&mut g, &[0.0, 0.0], &[1.0, 1.0]);
        let up = upsample(&mut g, f, &dv, &[1.0, 1.0], None).unwrap();
        assert_eq!(up.lens, vec![1]);
        assert_eq!(up.degenerate, vec![true]);
    }

    #[test]
    fn target_lengths_rescale_durations() {
        let mut g = Graph::<f64>::detached(false);
        let f = features(&mut g, 3, 2);
        let dv = dv_const(&mut g, &[1.0, 2.0, 1.0], &[1.0, 1.0, 1.0]);
        let up = upsample(&mut g, f, &dv, &[1.0, 1.0, 1.0], Some(&[10])).unwrap();
        assert!(up.was_scaled);
        assert_eq!(up.lens, vec![10]);
        let used = g.value(up.durations_used).data();
        assert!((used.iter().sum::<f64>() - 10.0).abs() < 1e-9);
        assert!((used[1] - 5.0).abs() < 1e-9);
    }

    #[test]
    fn masked_phonemes_get_zero_duration_and_weight() {
        let (s, store) = build(&cfg());
        let mut g = Graph::new(&store, false);
        let f = g.constant(Tensor::from_fn(&[2, 3, 5], |i| (i as f32 * 0.3).cos()));
        let mask = [1.0, 1.0, 1.0, 1.0, 0.0, 0.0];
        let dv = s.duration.predict(&mut g, f, &mask, &mut ModelRng::seed_from_u64(0)).unwrap();
        let d = g.value(dv.durations).data();
        assert_eq!(&d[4..], &[0.0, 0.0]);
        assert!(g.value(dv.ranges).data().iter().all(|&r| r >= 0.5));
        let up = upsample(&mut g, f, &dv, &mask, None).unwrap();
        let t = up.len();
        let w = g.value(up.weights).data();
        for f in 0..t {
            let row = &w[(t + f) * 3..(t + f) * 3 + 3];
            assert_eq!(row[1..], [0.0, 0.0]);
        }
    }

    #[test]
    fn duration_loss_arithmetic() {
        let mut g = Graph::<f64>::detached(false);
        let dv = dv_const(&mut g, &[30.0, 30.0], &[1.0, 1.0]);
        let loss = total_duration_loss(&mut g, &dv, &[140], 0.0125).unwrap();
        assert!((g.value(loss).data()[0] - 1.0).abs() < 1e-12);
        let dv = dv_const(&mut g, &[70.0, 70.0], &[1.0, 1.0]);
        let loss = total_duration_loss(&mut g, &dv, &[140], 0.0125).unwrap();
        assert_eq!(g.value(loss).data()[0], 0.0);
    }

    #[test]
    fn duration_loss_gradient_is_shared() {
        let store = ParamStore::<f64>::new();
        let mut g = Graph::new(&store, true);
        let d = g.input(Tensor::new(&[1, 3], vec![1.0, 4.0, 2.5]).unwrap());
        let r = g.constant(Tensor::full(&[1, 3], 1.0));
        let loss = total_duration_loss(&mut g, &DurationVector { durations: d, ranges: r }, &[12], 0.0125).unwrap();
        g.backward(loss).unwrap();
        let gr = g.grad(d).unwrap();
        assert!(gr.iter().all(|&x| x == gr[0]));
    }

    #[test]
    fn output_length_follows_durations() {
        let (s, store) = build(&cfg());
        let mut g = Graph::new(&store, false);
        let f = g.constant(Tensor::from_fn(&[1, 3, 5], |i| (i as f32 * 0.3).cos()));
        let pred = s.infer(&mut g, f, &[1.0; 3], 1.0, &mut ModelRng::seed_from_u64(0)).unwrap();
        let up_len = pred.upsampled.len();
        assert_eq!(g.shape(pred.after_postnet), &[1, up_len, 2]);
        assert_eq!(g.shape(pred.before_postnet), g.shape(pred.after_postnet));
        let pred3 = s.infer(&mut g, f, &[1.0; 3], 3.0, &mut ModelRng::seed_from_u64(0)).unwrap();
        assert!(pred3.upsampled.len() > up_len);
    }

    #[test]
    fn same_streams_same_seed_same_output() {
        let (s, store) = build(&cfg());
        let run = || {
            let mut g = Graph::new(&store, false);
            let f = g.constant(Tensor::from_fn(&[1, 3, 5], |i| (i as f32 * 0.3).cos()));
            let p = s.infer(&mut g, f, &[1.0; 3], 1.0, &mut ModelRng::seed_from_u64(5)).unwrap();
            g.value(p.after_postnet).data().to_vec()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn full_size_postnet_shape() {
        let mut store = ParamStore::new();
        let mut rng = ModelRng::seed_from_u64(0);
        let stages = [(5, 512), (5, 512), (5, 512), (5, 512), (5, 128)];
        let p = Postnet::new(&mut ParamBuilder::new(&mut store, &mut rng), 128, &stages).unwrap();
        let mut g = Graph::new(&store, false);
        let x = g.constant(Tensor::from_fn(&[1, 9, 128], |i| (i as f32).sin()));
        let y = p.forward(&mut g, x, &[1.0; 9]).unwrap();
        assert_eq!(g.shape(y), &[1, 9, 128]);
    }

    #[test]
    fn perfect_prediction_has_zero_loss_and_masks_padding() {
        let mut g = Graph::<f64>::detached(false);
        let tgt = vec![0.5f32, -1.0, 2.0, 3.0];
        let v = g.constant(Tensor::new(&[1, 2, 2], vec![0.5, -1.0, 9.0, 9.0]).unwrap());
        let c = g.constant(Tensor::new(&[1, 1], vec![0.0]).unwrap());
        let up = Upsampled { frames: v, weights: v, durations_used: c, lens: vec![1], mask: vec![1.0, 0.0], was_scaled: true, degenerate: vec![false] };
        let pred = SpectrogramPrediction { before_postnet: v, after_postnet: v, durations: DurationVector { durations: c, ranges: c }, upsampled: up };
        let loss = spectrogram_loss(&mut g, &pred, &tgt, &[1.0, 0.0]).unwrap();
        assert_eq!(g.value(loss).data()[0], 0.0);
        assert!(spectrogram_loss(&mut g, &pred, &tgt[..2], &[1.0]).is_err());
    }

    #[test]
    fn nonautoregressive_keeps_length() {
        let mut c = cfg();
        c.variant = SynthVariant::NonAutoregressive;
        let (s, store) = build(&c);
        let mut g = Graph::new(&store, false);
        let f = g.constant(Tensor::from_fn(&[1, 2, 5], |i| (i as f32 * 0.3).cos()));
        let pred = s.infer(&mut g, f, &[1.0; 2], 1.0, &mut ModelRng::seed_from_u64(0)).unwrap();
        assert_eq!(g.shape(pred.after_postnet)[1], pred.upsampled.len());
    }

    fn check(report: s2st_numerics::GradCheckReport) {
        assert!(report.max_rel_error <= 1e-4, "{report:?}");
    }

    #[test]
    fn duration_predictor_gradients() {
        let (s, store) = build(&cfg());
        let store = store.cast::<f64>();
        let mask = [1.0, 1.0, 1.0, 1.0, 1.0, 0.0];
        check(
            grad_check(
                |g, xs| {
                    let dv = s.duration.predict(g, xs[0], &mask, &mut ModelRng::seed_from_u64(0))?;
                    Ok(g.concat(&[dv.durations, dv.ranges], 1)?)
                },
                &[vec![2, 3, 5]],
                &store,
                1,
            )
            .unwrap(),
        );
    }

    #[test]
    fn upsampler_gradients() {
        let store = ParamStore::<f64>::new();
        let mask = [1.0, 1.0, 1.0, 1.0, 1.0, 0.0];
        for target in [None, Some(&[9usize, 7][..])] {
            check(
                grad_check(
                    |g, xs| {
                        let d = g.exp(xs[1]);
                        let d = g.add_scalar(d, 0.5);
                        let r = g.exp(xs[2]);
                        let r = g.add_scalar(r, 0.5);
                        let m: Vec<f64> = mask.iter().map(|&v| v as f64).collect();
                        let d = g.mul_const(d, m)?;
                        let up = upsample(g, xs[0], &DurationVector { durations: d, ranges: r }, &mask, target)?;
                        Ok(up.frames)
                    },
                    &[vec![2, 3, 4], vec![2, 3], vec![2, 3]],
                    &store,
                    2,
                )
                .unwrap(),
            );
        }
    }

    #[test]
    fn autoregressive_cell_gradients() {
        let (s, store) = build(&cfg());
        let store = store.cast::<f64>();
        let SynthBody::Autoregressive(ar) = &s.body else { unreachable!() };
        let teacher: Vec<f32> = (0..2 * 3 * 2).map(|i| (i as f32 * 0.7).sin()).collect();
        check(
            grad_check(|g, xs| Ok(ar.teacher_forced(g, xs[0], &teacher, &mut ModelRng::seed_from_u64(3))?), &[vec![2, 3, 5]], &store, 3)
                .unwrap(),
        );
        check(grad_check(|g, xs| Ok(ar.free_running(g, xs[0], &mut ModelRng::seed_from_u64(3))?), &[vec![1, 3, 5]], &store, 4).unwrap());
    }

    #[test]
    fn postnet_gradients() {
        let (s, store) = build(&cfg());
        let store = store.cast::<f64>();
        check(grad_check(|g, xs| Ok(s.postnet.forward(g, xs[0], &[1.0, 1.0, 1.0, 1.0, 1.0, 0.0])?), &[vec![2, 3, 2]], &store, 5).unwrap());
    }

    #[test]
    fn composite_gradients() {
        let (s, store) = build(&cfg());
        let store = store.cast::<f64>();
        let mask = [1.0, 1.0, 1.0, 1.0, 1.0, 0.0];
        let lens = [6usize, 4];
        let target: Vec<f32> = (0..2 * 6 * 2).map(|i| (i as f32 * 0.4).cos()).collect();
        let fm = frame_mask(&lens, 6);
        check(
            grad_check(
                |g, xs| {
                    let pred = s.forward_train(g, xs[0], &mask, &target, &lens, &mut ModelRng::seed_from_u64(6))?;
                    let spec = spectrogram_loss(g, &pred, &target, &fm)?;
                    let dur = total_duration_loss(g, &pred.durations, &lens, 0.0125)?;
                    let l = g.add(spec, dur)?;
                    let out = g.reshape(pred.after_postnet, &[24])?;
                    Ok(g.concat(&[l, out], 0)?)
                },
                &[vec![2, 3, 5]],
                &store,
                7,
            )
            .unwrap(),
        );
    }
}
