//! Single multi-head attention queried by the linguistic decoder, and the
//! autoregressive phoneme decoder itself.
//!
//! Each decoder step emits the phoneme logits plus the two streams the
//! synthesizer consumes: `[top hidden | context]` before the output
//! projection, and the attention context.

use s2st_numerics::{Graph, ParamId, Scalar, Tensor, Var};

use crate::config::{AttentionConfig, DecoderConfig};
use crate::corpus::{BOS, EOS};
use crate::encoder::EncoderOutput;
use crate::error::{Error, Result};
use crate::nn::{Linear, Lstm, LstmState, ModelRng, ParamBuilder};

#[derive(Clone, Debug)]
pub struct SharedAttention {
    q: Linear,
    k: Linear,
    v: Linear,
    out: Linear,
    pub config: AttentionConfig,
}

/// Keys and values projected once per utterance.
#[derive(Clone, Debug)]
pub struct AttentionMemory {
    k: Var,
    v: Var,
    key_valid: Vec<bool>,
    batch: usize,
    len: usize,
}

impl SharedAttention {
    pub fn new(pb: &mut ParamBuilder, cfg: &AttentionConfig, query_dim: usize, memory_dim: usize) -> Result<Self> {
        let mut s = pb.scope("attention");
        Ok(SharedAttention {
            q: Linear::new(&mut s, "q", query_dim, cfg.hidden_dim, true)?,
            // a key bias shifts every logit of a row equally, so it is omitted
            k: Linear::new(&mut s, "k", memory_dim, cfg.hidden_dim, false)?,
            v: Linear::new(&mut s, "v", memory_dim, cfg.hidden_dim, true)?,
            out: Linear::new(&mut s, "out", cfg.hidden_dim, cfg.output_dim, true)?,
            config: cfg.clone(),
        })
    }

    fn heads_major<T: Scalar>(&self, g: &mut Graph<T>, x: Var, b: usize, t: usize) -> Result<Var> {
        let h = self.config.heads;
        let dk = self.config.hidden_dim / h;
        let x = g.reshape(x, &[b, t, h, dk])?;
        let x = g.permute(x, &[0, 2, 1, 3])?;
        Ok(g.reshape(x, &[b * h, t, dk])?)
    }

    pub fn prepare<T: Scalar>(&self, g: &mut Graph<T>, enc: &EncoderOutput) -> Result<AttentionMemory> {
        let shape = g.shape(enc.hidden).to_vec();
        let (b, t) = (shape[0], shape[1]);
        let key_valid: Vec<bool> = enc.mask.iter().map(|&m| m > 0.5).collect();
        for i in 0..b {
            if !key_valid[i * t..(i + 1) * t].iter().any(|&v| v) {
                return Err(Error::Data(format!("encoder output of item {i} is fully masked")));
            }
        }
        let k = self.k.forward(g, enc.hidden)?;
        let v = self.v.forward(g, enc.hidden)?;
        Ok(AttentionMemory { k: self.heads_major(g, k, b, t)?, v: self.heads_major(g, v, b, t)?, key_valid, batch: b, len: t })
    }

    /// Returns the context `[B, output_dim]` and weights `[B, H, T']`.
    pub fn attend<T: Scalar>(&self, g: &mut Graph<T>, query: Var, mem: &AttentionMemory, rng: &mut ModelRng) -> Result<(Var, Var)> {
        let (b, t) = (mem.batch, mem.len);
        let h = self.config.heads;
        let dk = self.config.hidden_dim / h;
        let q = self.q.forward(g, query)?;
        let q = g.reshape(q, &[b * h, 1, dk])?;
        let logits = g.batch_matmul(q, mem.k, false, true)?;
        let logits = g.mul_scalar(logits, T::from_f64(1.0 / (dk as f64).sqrt()));
        let logits = g.reshape(logits, &[b, h, t])?;
        let weights = g.masked_softmax(logits, &mem.key_valid)?;
        let w = g.dropout(weights, self.config.dropout_prob, rng)?;
        let w = g.reshape(w, &[b * h, 1, t])?;
        let ctx = g.batch_matmul(w, mem.v, false, false)?;
        let ctx = g.reshape(ctx, &[b, self.config.hidden_dim])?;
        Ok((self.out.forward(g, ctx)?, weights))
    }
}

#[derive(Clone, Debug)]
pub struct Decoder {
    embedding: ParamId,
    layers: Vec<Lstm>,
    proj: Linear,
    pub attention: SharedAttention,
    pub config: DecoderConfig,
    pub vocab: usize,
}

#[derive(Clone, Debug)]
pub struct DecoderState {
    layers: Vec<LstmState>,
    context: Var,
}

/// Outputs of one decoder step.
#[derive(Clone, Copy, Debug)]
pub struct DecoderStep {
    /// `[B, lstm_dim + output_dim]`.
    pub hidden_pre_projection: Var,
    /// `[B, output_dim]`.
    pub context: Var,
    /// `[B, vocab]`.
    pub logits: Var,
    /// `[B, heads, T']`.
    pub weights: Var,
}

/// Teacher-forced streams over the padded phoneme axis.
#[derive(Clone, Debug)]
pub struct DecodedStreams {
    /// `[B, L, vocab]`.
    pub logits: Var,
    /// `[B, L, lstm_dim + output_dim]`.
    pub hidden_pre_projection: Var,
    /// `[B, L, output_dim]`.
    pub context: Var,
    pub weights: Vec<Var>,
}

/// Greedy decoding result for a single utterance.
#[derive(Clone, Debug)]
pub struct GreedyDecode {
    /// Emitted phonemes, EOS excluded.
    pub phonemes: Vec<usize>,
    /// `[1, n, lstm_dim + output_dim]`, or `None` when nothing was emitted.
    pub hidden_pre_projection: Option<Var>,
    /// `[1, n, output_dim]`.
    pub context: Option<Var>,
    /// Per emitted phoneme, per head attention weights over encoder frames.
    pub attention: Vec<Vec<Vec<f64>>>,
    pub truncated: bool,
}

impl Decoder {
    pub fn new(pb: &mut ParamBuilder, cfg: &DecoderConfig, vocab: usize, memory_dim: usize) -> Result<Self> {
        cfg.validate()?;
        let attention = SharedAttention::new(pb, &cfg.attention, cfg.lstm_dim, memory_dim)?;
        let mut s = pb.scope("decoder");
        let e = cfg.phoneme_embedding_dim;
        let embedding = s.uniform("embedding", &[vocab, e], (3.0 / e as f64).sqrt())?;
        let mut layers = Vec::new();
        let mut input = e + cfg.attention.output_dim;
        for l in 0..cfg.lstm_layers {
            layers.push(Lstm::new(&mut s, &format!("lstm{l}"), input, cfg.lstm_dim)?);
            input = cfg.lstm_dim;
        }
        let proj = Linear::new(&mut s, "proj", cfg.hidden_pre_projection_dim(), vocab, true)?;
        Ok(Decoder { embedding, layers, proj, attention, config: cfg.clone(), vocab })
    }

    pub fn initial_state<T: Scalar>(&self, g: &mut Graph<T>, batch: usize) -> DecoderState {
        DecoderState {
            layers: self.layers.iter().map(|l| l.zero_state(g, batch)).collect(),
            context: g.constant(Tensor::zeros(&[batch, self.config.attention.output_dim])),
        }
    }

    fn check_ids(&self, ids: &[usize]) -> Result<()> {
        match ids.iter().find(|&&p| p >= self.vocab) {
            Some(p) => Err(Error::Data(format!("unknown phoneme id {p} (vocabulary {})", self.vocab))),
            None => Ok(()),
        }
    }

    /// Consumes `emb` `[B, E]` (the previous phoneme) and advances one step.
    fn step_embedded<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        emb: Var,
        state: &DecoderState,
        mem: &AttentionMemory,
        rng: &mut ModelRng,
    ) -> Result<(DecoderStep, DecoderState)> {
        let z = self.config.zoneout_prob;
        let mut x = g.concat(&[emb, state.context], 1)?;
        let mut layers = Vec::with_capacity(self.layers.len());
        for (layer, st) in self.layers.iter().zip(&state.layers) {
            let xw = layer.wx.forward(g, x)?;
            let next = layer.step(g, xw, *st, z, rng)?;
            x = next.h;
            layers.push(next);
        }
        let (context, weights) = self.attention.attend(g, x, mem, rng)?;
        let hidden_pre_projection = g.concat(&[x, context], 1)?;
        let logits = self.proj.forward(g, hidden_pre_projection)?;
        Ok((DecoderStep { hidden_pre_projection, context, logits, weights }, DecoderState { layers, context }))
    }

    pub fn step<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        prev: &[usize],
        state: &DecoderState,
        mem: &AttentionMemory,
        rng: &mut ModelRng,
    ) -> Result<(DecoderStep, DecoderState)> {
        self.check_ids(prev)?;
        let table = g.param(self.embedding);
        let emb = g.gather_rows(table, prev.to_vec())?;
        self.step_embedded(g, emb, state, mem, rng)
    }

    /// Step `t` consumes gold phoneme `t − 1` (BOS at `t = 0`).
    pub fn teacher_forced<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        phonemes: &[usize],
        batch: usize,
        len: usize,
        mem: &AttentionMemory,
        rng: &mut ModelRng,
    ) -> Result<DecodedStreams> {
        self.check_ids(phonemes)?;
        let prev: Vec<usize> = (0..batch * len)
            .map(|n| if n % len == 0 { BOS } else { phonemes[n - 1] })
            .collect();
        let table = g.param(self.embedding);
        let emb = g.gather_rows(table, prev)?;
        let e = self.config.phoneme_embedding_dim;
        let emb = g.reshape(emb, &[batch, len, e])?;
        let mut state = self.initial_state(g, batch);
        let (mut logits, mut hidden, mut context, mut weights) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
        for t in 0..len {
            let et = g.slice(emb, 1, t, 1)?;
            let et = g.reshape(et, &[batch, e])?;
            let (out, next) = self.step_embedded(g, et, &state, mem, rng)?;
            state = next;
            let v = self.vocab;
            let hp = self.config.hidden_pre_projection_dim();
            let od = self.config.attention.output_dim;
            logits.push(g.reshape(out.logits, &[batch, 1, v])?);
            hidden.push(g.reshape(out.hidden_pre_projection, &[batch, 1, hp])?);
            context.push(g.reshape(out.context, &[batch, 1, od])?);
            weights.push(out.weights);
        }
        Ok(DecodedStreams {
            logits: g.concat(&logits, 1)?,
            hidden_pre_projection: g.concat(&hidden, 1)?,
            context: g.concat(&context, 1)?,
            weights,
        })
    }

    /// Argmax decoding of one utterance from BOS until EOS or the length cap.
    pub fn greedy<T: Scalar>(&self, g: &mut Graph<T>, mem: &AttentionMemory, max_len: usize, rng: &mut ModelRng) -> Result<GreedyDecode> {
        if mem.batch != 1 {
            return Err(Error::Data("greedy decoding runs on one utterance at a time".into()));
        }
        let mut state = self.initial_state(g, 1);
        let mut prev = BOS;
        let (mut phonemes, mut hidden, mut context, mut attention) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
        let mut truncated = true;
        for _ in 0..max_len {
            let (out, next) = self.step(g, &[prev], &state, mem, rng)?;
            state = next;
            let logits = g.value(out.logits).data();
            let best = argmax(logits);
            if best == EOS {
                truncated = false;
                break;
            }
            phonemes.push(best);
            hidden.push(out.hidden_pre_projection);
            context.push(out.context);
            let w = g.value(out.weights).data();
            let heads = self.config.attention.heads;
            let t = w.len() / heads;
            attention.push((0..heads).map(|h| w[h * t..(h + 1) * t].iter().map(|v| v.to_f64()).collect()).collect());
            prev = best;
        }
        let stack = |g: &mut Graph<T>, parts: &[Var]| -> Result<Option<Var>> {
            if parts.is_empty() {
                return Ok(None);
            }
            let c = g.concat(parts, 0)?;
            let d = g.shape(c)[1];
            Ok(Some(g.reshape(c, &[1, parts.len(), d])?))
        };
        Ok(GreedyDecode {
            phonemes,
            hidden_pre_projection: stack(g, &hidden)?,
            context: stack(g, &context)?,
            attention,
            truncated,
        })
    }
}

/// Index of the largest value; the first one on ties.
pub fn argmax<T: Scalar>(xs: &[T]) -> usize {
    let mut best = 0;
    for (i, v) in xs.iter().enumerate() {
        if *v > xs[best] {
            best = i;
        }
    }
    best
}

/// Mean over unmasked positions of the cross-entropy against
/// `(1 − u)·onehot + u/V`.
pub fn label_smoothed_ce<T: Scalar>(g: &mut Graph<T>, logits: Var, targets: &[usize], mask: &[f32], u: f64) -> Result<Var> {
    let shape = g.shape(logits).to_vec();
    let v = *shape.last().unwrap();
    let rows = targets.len();
    if rows * v != g.value(logits).len() || mask.len() != rows {
        return Err(Error::Data(format!("{rows} targets / {} mask entries for logits {shape:?}", mask.len())));
    }
    let count: f64 = mask.iter().map(|&m| m as f64).sum();
    let mut q = vec![T::zero(); rows * v];
    if count > 0.0 {
        for (r, (&tgt, &m)) in targets.iter().zip(mask).enumerate() {
            if m == 0.0 {
                continue;
            }
            let scale = m as f64 / count;
            for k in 0..v {
                let p = u / v as f64 + if k == tgt { 1.0 - u } else { 0.0 };
                q[r * v + k] = T::from_f64(-p * scale);
            }
        }
    }
    let lp = g.log_softmax(logits)?;
    let weighted = g.mul_const(lp, q)?;
    Ok(g.sum(weighted))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::frame_mask;
    use rand::{Rng, SeedableRng};
    use s2st_numerics::{grad_check, ParamStore};

    fn cfg() -> DecoderConfig {
        DecoderConfig {
            lstm_dim: 6,
            lstm_layers: 2,
            zoneout_prob: 0.0,
            phoneme_embedding_dim: 4,
            label_smoothing: 0.1,
            attention: AttentionConfig { heads: 2, hidden_dim: 4, output_dim: 3, dropout_prob: 0.0 },
            max_decode_len: 5,
        }
    }

    fn build(cfg: &DecoderConfig) -> (Decoder, ParamStore<f32>) {
        let mut store = ParamStore::new();
        let mut rng = ModelRng::seed_from_u64(8);
        let dec = Decoder::new(&mut ParamBuilder::new(&mut store, &mut rng), cfg, 7, 5).unwrap();
        let ids: Vec<_> = store.iter().map(|(id, _)| id).collect();
        for id in ids {
            for v in store.get_mut(id).value.data_mut() {
                *v += rng.gen_range(-0.2..0.2);
            }
        }
        (dec, store)
    }

    fn enc_out(t: usize, lens: &[usize], hidden: Var) -> EncoderOutput {
        EncoderOutput { hidden, mask: frame_mask(lens, t), lens: lens.to_vec(), len: t }
    }

    fn host(b: usize, t: usize) -> Tensor<f32> {
        Tensor::from_fn(&[b, t, 5], |i| ((i * 37 % 17) as f32 / 8.0) - 1.0)
    }

    #[test]
    fn uniform_logits_give_log_v() {
        let mut g = Graph::<f64>::detached(false);
        let logits = g.constant(Tensor::zeros(&[1, 2, 10]));
        let loss = label_smoothed_ce(&mut g, logits, &[3, 4], &[1.0, 1.0], 0.1).unwrap();
        assert!((g.value(loss).data()[0] - 10f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn perfect_logits_approach_zero_without_smoothing() {
        let mut g = Graph::<f64>::detached(false);
        let mut data = vec![0.0; 5];
        data[2] = 60.0;
        let logits = g.constant(Tensor::new(&[1, 5], data).unwrap());
        let loss = label_smoothed_ce(&mut g, logits, &[2], &[1.0], 0.0).unwrap();
        assert!(g.value(loss).data()[0] < 1e-20);
    }

    #[test]
    fn smoothed_loss_floor_on_confident_logits() {
        // with margin m on the gold id the loss tends to (u·(V−1)/V)·m
        let mut g = Graph::<f64>::detached(false);
        let m = 30.0;
        let mut data = vec![0.0; 10];
        data[1] = m;
        let logits = g.constant(Tensor::new(&[1, 10], data).unwrap());
        let loss = label_smoothed_ce(&mut g, logits, &[1], &[1.0], 0.1).unwrap();
        let loss = g.value(loss).data()[0];
        assert!((loss - 0.1 * 0.9 * m).abs() < 1e-6, "{loss}");
    }

    #[test]
    fn masked_positions_do_not_count() {
        let run = |junk: f64| {
            let mut g = Graph::<f64>::detached(false);
            let logits = g.constant(Tensor::new(&[2, 3], vec![0.1, 0.2, 0.3, junk, -junk, 0.0]).unwrap());
            let loss = label_smoothed_ce(&mut g, logits, &[0, 1], &[1.0, 0.0], 0.1).unwrap();
            g.value(loss).data()[0]
        };
        assert_eq!(run(5.0), run(-40.0));
    }

    #[test]
    fn single_valid_position_gets_full_weight() {
        let (dec, store) = build(&cfg());
        let mut g = Graph::new(&store, false);
        let h = g.constant(host(1, 4));
        let enc = enc_out(4, &[1], h);
        let mem = dec.attention.prepare(&mut g, &enc).unwrap();
        let q = g.constant(Tensor::full(&[1, 6], 0.3));
        let (ctx, w) = dec.attention.attend(&mut g, q, &mem, &mut ModelRng::seed_from_u64(0)).unwrap();
        assert_eq!(g.value(w).data(), &[1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0]);
        // context is the projected value of frame 0
        let v0 = g.slice(h, 1, 0, 1).unwrap();
        let v0 = g.reshape(v0, &[1, 5]).unwrap();
        let v0 = dec.attention.v.forward(&mut g, v0).unwrap();
        let v0 = dec.attention.out.forward(&mut g, v0).unwrap();
        for (a, b) in g.value(ctx).data().iter().zip(g.value(v0).data()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn fully_masked_memory_is_rejected() {
        let (dec, store) = build(&cfg());
        let mut g = Graph::new(&store, false);
        let h = g.constant(host(1, 3));
        let enc = enc_out(3, &[0], h);
        assert!(dec.attention.prepare(&mut g, &enc).is_err());
    }

    #[test]
    fn attention_rows_are_distributions() {
        let (dec, store) = build(&cfg());
        let mut g = Graph::new(&store, false);
        let h = g.constant(host(2, 6));
        let enc = enc_out(6, &[6, 3], h);
        let mem = dec.attention.prepare(&mut g, &enc).unwrap();
        let streams = dec.teacher_forced(&mut g, &[3, 4, 2, 5, 2, 0], 2, 3, &mem, &mut ModelRng::seed_from_u64(0)).unwrap();
        for w in &streams.weights {
            let d = g.value(*w).data();
            for row in 0..4 {
                let r = &d[row * 6..row * 6 + 6];
                assert!((r.iter().sum::<f32>() - 1.0).abs() <= 1e-6);
                assert!(r.iter().all(|&x| x >= 0.0));
                if row >= 2 {
                    assert!(r[3..].iter().all(|&x| x == 0.0));
                }
            }
        }
        assert_eq!(g.shape(streams.logits), &[2, 3, 7]);
        assert_eq!(g.shape(streams.hidden_pre_projection), &[2, 3, 9]);
    }

    #[test]
    fn future_targets_do_not_change_past_streams() {
        let (dec, store) = build(&cfg());
        let run = |ids: &[usize]| {
            let mut g = Graph::new(&store, false);
            let h = g.constant(host(1, 5));
            let enc = enc_out(5, &[5], h);
            let mem = dec.attention.prepare(&mut g, &enc).unwrap();
            let s = dec.teacher_forced(&mut g, ids, 1, 4, &mem, &mut ModelRng::seed_from_u64(0)).unwrap();
            g.value(s.hidden_pre_projection).data()[..2 * 9].to_vec()
        };
        assert_eq!(run(&[3, 4, 5, 2]), run(&[3, 6, 6, 2]));
    }

    #[test]
    fn unknown_ids_are_rejected() {
        let (dec, store) = build(&cfg());
        let mut g = Graph::new(&store, false);
        let h = g.constant(host(1, 2));
        let enc = enc_out(2, &[2], h);
        let mem = dec.attention.prepare(&mut g, &enc).unwrap();
        let st = dec.initial_state(&mut g, 1);
        assert!(dec.step(&mut g, &[99], &st, &mem, &mut ModelRng::seed_from_u64(0)).is_err());
    }

    #[test]
    fn greedy_respects_length_cap() {
        let (dec, store) = build(&cfg());
        let mut g = Graph::new(&store, false);
        let h = g.constant(host(1, 3));
        let enc = enc_out(3, &[3], h);
        let mem = dec.attention.prepare(&mut g, &enc).unwrap();
        let out = dec.greedy(&mut g, &mem, 1, &mut ModelRng::seed_from_u64(0)).unwrap();
        assert!(out.phonemes.len() <= 1);
        assert_eq!(out.truncated, out.phonemes.len() == 1);
        assert!(!out.phonemes.contains(&EOS));
    }

    #[test]
    fn attention_gradients() {
        let (dec, store) = build(&cfg());
        let store = store.cast::<f64>();
        let lens = [4, 2];
        let report = grad_check(
            |g, xs| {
                let enc = EncoderOutput { hidden: xs[0], mask: frame_mask(&lens, 4), lens: lens.to_vec(), len: 4 };
                let mem = dec.attention.prepare(g, &enc)?;
                let (ctx, _) = dec.attention.attend(g, xs[1], &mem, &mut ModelRng::seed_from_u64(0))?;
                Ok(ctx)
            },
            &[vec![2, 4, 5], vec![2, 6]],
            &store,
            2,
        )
        .unwrap();
        assert!(report.max_rel_error <= 1e-4, "{report:?}");
    }

    #[test]
    fn decoder_step_gradients() {
        let (dec, store) = build(&cfg());
        let store = store.cast::<f64>();
        let lens = [3, 2];
        let report = grad_check(
            |g, xs| {
                let enc = EncoderOutput { hidden: xs[0], mask: frame_mask(&lens, 3), lens: lens.to_vec(), len: 3 };
                let mem = dec.attention.prepare(g, &enc)?;
                let streams = dec.teacher_forced(g, &[3, 4, 2, 5, 2, 0], 2, 3, &mem, &mut ModelRng::seed_from_u64(0))?;
                let mask = [1.0, 1.0, 1.0, 1.0, 1.0, 0.0];
                let ce = label_smoothed_ce(g, streams.logits, &[3, 4, 2, 5, 2, 0], &mask, 0.1)?;
                let s = g.sum(streams.hidden_pre_projection);
                Ok(g.add(ce, s)?)
            },
            &[vec![2, 3, 5]],
            &store,
            4,
        )
        .unwrap();
        assert!(report.max_rel_error <= 1e-4, "{report:?}");
    }
}
