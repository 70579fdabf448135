//! Convolutional subsampling followed by Conformer blocks.
//!
//! Block layout (each sub-layer residual):
//!
//! ```text
//! x ─▶ ½·FFN ─▶ MHSA + relative bias ─▶ depthwise conv ─▶ ½·FFN ─▶ LayerNorm ─▶ ·mask
//! ```
//!
//! Padded frames are zeroed before every temporal mixing step and keys at
//! padded frames get zero attention weight, so valid outputs do not depend
//! on padding.

use s2st_numerics::{Conv1dSpec, Graph, ParamId, Scalar, Var};

use crate::config::EncoderConfig;
use crate::error::{Error, Result};
use crate::nn::{apply_mask, constant, Conv1d, LayerNorm, Linear, ModelRng, ParamBuilder};

/// Macaron feed-forward: LayerNorm, expand, swish, project.
#[derive(Clone, Debug)]
pub struct FeedForward {
    ln: LayerNorm,
    up: Linear,
    down: Linear,
}

impl FeedForward {
    fn new(pb: &mut ParamBuilder, name: &str, dim: usize, expansion: usize) -> Result<Self> {
        let mut s = pb.scope(name);
        Ok(FeedForward {
            ln: LayerNorm::new(&mut s, "ln", dim)?,
            up: Linear::new(&mut s, "up", dim, dim * expansion, true)?,
            down: Linear::new(&mut s, "down", dim * expansion, dim, true)?,
        })
    }

    fn forward<T: Scalar>(&self, g: &mut Graph<T>, x: Var, p: f64, rng: &mut ModelRng) -> Result<Var> {
        let h = self.ln.forward(g, x)?;
        let h = self.up.forward(g, h)?;
        let h = g.swish(h);
        let h = g.dropout(h, p, rng)?;
        let h = self.down.forward(g, h)?;
        Ok(g.dropout(h, p, rng)?)
    }
}

/// Multi-head self-attention with a learned bias per head and clipped
/// signed distance.
#[derive(Clone, Debug)]
pub struct RelativeSelfAttention {
    ln: LayerNorm,
    q: Linear,
    k: Linear,
    v: Linear,
    out: Linear,
    bias: ParamId,
    heads: usize,
    max_distance: usize,
}

impl RelativeSelfAttention {
    fn new(pb: &mut ParamBuilder, name: &str, dim: usize, heads: usize, max_distance: usize) -> Result<Self> {
        let mut s = pb.scope(name);
        Ok(RelativeSelfAttention {
            ln: LayerNorm::new(&mut s, "ln", dim)?,
            q: Linear::new(&mut s, "q", dim, dim, true)?,
            k: Linear::new(&mut s, "k", dim, dim, false)?,
            v: Linear::new(&mut s, "v", dim, dim, true)?,
            out: Linear::new(&mut s, "out", dim, dim, true)?,
            bias: s.full("rel_bias", &[2 * max_distance + 1, heads], 0.0)?,
            heads,
            max_distance,
        })
    }

    /// `[B, T, d]` → `[B·H, T, d/H]`.
    fn split_heads<T: Scalar>(&self, g: &mut Graph<T>, x: Var, b: usize, t: usize, dk: usize) -> Result<Var> {
        let x = g.reshape(x, &[b, t, self.heads, dk])?;
        let x = g.permute(x, &[0, 2, 1, 3])?;
        Ok(g.reshape(x, &[b * self.heads, t, dk])?)
    }

    fn forward<T: Scalar>(&self, g: &mut Graph<T>, x: Var, key_valid: &[bool], p: f64, rng: &mut ModelRng) -> Result<Var> {
        let shape = g.shape(x).to_vec();
        let (b, t, d) = (shape[0], shape[1], shape[2]);
        let h = self.heads;
        let dk = d / h;
        let xn = self.ln.forward(g, x)?;
        let q = self.q.forward(g, xn)?;
        let k = self.k.forward(g, xn)?;
        let v = self.v.forward(g, xn)?;
        let q = self.split_heads(g, q, b, t, dk)?;
        let k = self.split_heads(g, k, b, t, dk)?;
        let v = self.split_heads(g, v, b, t, dk)?;
        let logits = g.batch_matmul(q, k, false, true)?;
        let logits = g.mul_scalar(logits, T::from_f64(1.0 / (dk as f64).sqrt()));
        let logits = g.reshape(logits, &[b, h, t, t])?;

        let r = self.max_distance as isize;
        let idx: Vec<usize> = (0..t * t)
            .map(|n| {
                let (i, j) = ((n / t) as isize, (n % t) as isize);
                ((j - i).clamp(-r, r) + r) as usize
            })
            .collect();
        let table = g.param(self.bias);
        let bias = g.gather_rows(table, idx)?;
        let bias = g.permute(bias, &[1, 0])?;
        let bias = g.reshape(bias, &[h, t, t])?;
        let logits = g.add(logits, bias)?;

        let logits = g.reshape(logits, &[b, h * t, t])?;
        let w = g.masked_softmax(logits, key_valid)?;
        let w = g.dropout(w, p, rng)?;
        let w = g.reshape(w, &[b * h, t, t])?;
        let ctx = g.batch_matmul(w, v, false, false)?;
        let ctx = g.reshape(ctx, &[b, h, t, dk])?;
        let ctx = g.permute(ctx, &[0, 2, 1, 3])?;
        let ctx = g.reshape(ctx, &[b, t, d])?;
        let y = self.out.forward(g, ctx)?;
        Ok(g.dropout(y, p, rng)?)
    }
}

/// Pointwise GLU, masked depthwise conv, LayerNorm, swish, pointwise.
#[derive(Clone, Debug)]
pub struct ConvModule {
    ln: LayerNorm,
    pw_in: Linear,
    dw: Conv1d,
    norm: LayerNorm,
    pw_out: Linear,
    dim: usize,
}

impl ConvModule {
    fn new(pb: &mut ParamBuilder, name: &str, dim: usize, kernel: usize) -> Result<Self> {
        let mut s = pb.scope(name);
        let spec = Conv1dSpec { groups: dim, ..Conv1dSpec::same(kernel) };
        Ok(ConvModule {
            ln: LayerNorm::new(&mut s, "ln", dim)?,
            pw_in: Linear::new(&mut s, "pw_in", dim, 2 * dim, true)?,
            dw: Conv1d::new(&mut s, "dw", dim, dim, kernel, spec)?,
            norm: LayerNorm::new(&mut s, "norm", dim)?,
            pw_out: Linear::new(&mut s, "pw_out", dim, dim, true)?,
            dim,
        })
    }

    fn forward<T: Scalar>(&self, g: &mut Graph<T>, x: Var, mask: &[f32], p: f64, rng: &mut ModelRng) -> Result<Var> {
        let h = self.ln.forward(g, x)?;
        let h = self.pw_in.forward(g, h)?;
        let a = g.slice(h, 2, 0, self.dim)?;
        let gate = g.slice(h, 2, self.dim, self.dim)?;
        let gate = g.sigmoid(gate);
        let h = g.mul(a, gate)?;
        let h = apply_mask(g, h, mask)?;
        let h = self.dw.forward(g, h)?;
        let h = self.norm.forward(g, h)?;
        let h = g.swish(h);
        let h = self.pw_out.forward(g, h)?;
        Ok(g.dropout(h, p, rng)?)
    }
}

#[derive(Clone, Debug)]
pub struct ConformerBlock {
    ff1: FeedForward,
    mhsa: RelativeSelfAttention,
    conv: ConvModule,
    ff2: FeedForward,
    ln: LayerNorm,
    dropout: f64,
}

impl ConformerBlock {
    pub fn new(
        pb: &mut ParamBuilder,
        name: &str,
        dim: usize,
        heads: usize,
        kernel: usize,
        expansion: usize,
        max_distance: usize,
        dropout: f64,
    ) -> Result<Self> {
        let mut s = pb.scope(name);
        Ok(ConformerBlock {
            ff1: FeedForward::new(&mut s, "ff1", dim, expansion)?,
            mhsa: RelativeSelfAttention::new(&mut s, "mhsa", dim, heads, max_distance)?,
            conv: ConvModule::new(&mut s, "conv", dim, kernel)?,
            ff2: FeedForward::new(&mut s, "ff2", dim, expansion)?,
            ln: LayerNorm::new(&mut s, "ln", dim)?,
            dropout,
        })
    }

    /// `x`: `[B, T, d]`; `mask`: `[B·T]` frame validity.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, x: Var, mask: &[f32], rng: &mut ModelRng) -> Result<Var> {
        let shape = g.shape(x).to_vec();
        if shape.len() != 3 || mask.len() != shape[0] * shape[1] {
            return Err(Error::Config(format!("mask of {} for conformer input {shape:?}", mask.len())));
        }
        let p = self.dropout;
        let half = T::from_f64(0.5);
        let h = self.ff1.forward(g, x, p, rng)?;
        let h = g.mul_scalar(h, half);
        let x = g.add(x, h)?;
        let key_valid: Vec<bool> = mask.iter().map(|&m| m > 0.5).collect();
        let h = self.mhsa.forward(g, x, &key_valid, p, rng)?;
        let x = g.add(x, h)?;
        let h = self.conv.forward(g, x, mask, p, rng)?;
        let x = g.add(x, h)?;
        let h = self.ff2.forward(g, x, p, rng)?;
        let h = g.mul_scalar(h, half);
        let x = g.add(x, h)?;
        let x = self.ln.forward(g, x)?;
        apply_mask(g, x, mask)
    }
}

/// Stride-2, kernel-3 convolutions over time, then a projection.
#[derive(Clone, Debug)]
pub struct ConvSubsample {
    convs: Vec<Conv1d>,
    proj: Linear,
}

const SUB_SPEC: Conv1dSpec = Conv1dSpec { stride: 2, pad_left: 1, pad_right: 1, groups: 1 };

impl ConvSubsample {
    fn new(pb: &mut ParamBuilder, input: usize, dim: usize, factor: usize) -> Result<Self> {
        let mut s = pb.scope("subsample");
        let n = if factor == 4 { 2 } else { 1 };
        let mut convs = Vec::new();
        let mut ch = input;
        for i in 0..n {
            convs.push(Conv1d::new(&mut s, &format!("conv{i}"), ch, dim, 3, SUB_SPEC)?);
            ch = dim;
        }
        Ok(ConvSubsample { convs, proj: Linear::new(&mut s, "proj", dim, dim, true)? })
    }

    /// Returns the subsampled sequence and per-item valid lengths.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, x: Var, lens: &[usize]) -> Result<(Var, Vec<usize>)> {
        let shape = g.shape(x).to_vec();
        let (b, mut t) = (shape[0], shape[1]);
        if t == 0 {
            return Err(Error::Data("empty input spectrogram".into()));
        }
        let mut lens = lens.to_vec();
        let mut h = apply_mask(g, x, &frame_mask(&lens, t))?;
        for conv in &self.convs {
            h = conv.forward(g, h)?;
            h = g.relu(h);
            t = t.div_ceil(2);
            lens.iter_mut().for_each(|l| *l = l.div_ceil(2));
            h = apply_mask(g, h, &frame_mask(&lens, t))?;
        }
        debug_assert_eq!(g.shape(h)[..2], [b, t]);
        let h = self.proj.forward(g, h)?;
        Ok((apply_mask(g, h, &frame_mask(&lens, t))?, lens))
    }
}

/// `[B·T]` mask with ones on the first `lens[b]` frames of each row.
pub fn frame_mask(lens: &[usize], t: usize) -> Vec<f32> {
    let mut m = vec![0.0; lens.len() * t];
    for (b, &l) in lens.iter().enumerate() {
        m[b * t..b * t + l.min(t)].fill(1.0);
    }
    m
}

#[derive(Clone, Debug)]
pub struct Encoder {
    pub config: EncoderConfig,
    sub: ConvSubsample,
    blocks: Vec<ConformerBlock>,
}

/// Encoder hidden sequence `[B, T', d]` with its validity mask.
#[derive(Clone, Debug)]
pub struct EncoderOutput {
    pub hidden: Var,
    pub mask: Vec<f32>,
    pub lens: Vec<usize>,
    pub len: usize,
}

impl Encoder {
    pub fn new(pb: &mut ParamBuilder, cfg: &EncoderConfig, input_channels: usize) -> Result<Self> {
        cfg.validate()?;
        let mut s = pb.scope("encoder");
        let sub = ConvSubsample::new(&mut s, input_channels, cfg.model_dim, cfg.subsample_factor)?;
        let blocks = (0..cfg.n_blocks)
            .map(|i| {
                ConformerBlock::new(
                    &mut s,
                    &format!("block{i}"),
                    cfg.model_dim,
                    cfg.n_heads,
                    cfg.conv_kernel,
                    cfg.ff_expansion,
                    cfg.max_rel_distance,
                    cfg.dropout_prob,
                )
            })
            .collect::<Result<_>>()?;
        Ok(Encoder { config: cfg.clone(), sub, blocks })
    }

    /// `mel`: `[B, T, C]` with per-item lengths.
    pub fn encode<T: Scalar>(&self, g: &mut Graph<T>, mel: Var, lens: &[usize], rng: &mut ModelRng) -> Result<EncoderOutput> {
        let (mut h, lens) = self.sub.forward(g, mel, lens)?;
        let t = g.shape(h)[1];
        let mask = frame_mask(&lens, t);
        for block in &self.blocks {
            h = block.forward(g, h, &mask, rng)?;
        }
        Ok(EncoderOutput { hidden: h, mask, lens, len: t })
    }

    /// Encodes host data `[B, T, C]`.
    pub fn encode_host<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        mel: &[f32],
        shape: [usize; 3],
        lens: &[usize],
        rng: &mut ModelRng,
    ) -> Result<EncoderOutput> {
        let x = constant(g, &shape, mel)?;
        self.encode(g, x, lens, rng)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use s2st_numerics::{grad_check, ParamStore, Tensor};

    fn small_cfg() -> EncoderConfig {
        EncoderConfig {
            model_dim: 8,
            n_blocks: 2,
            n_heads: 2,
            conv_kernel: 3,
            subsample_factor: 4,
            ff_expansion: 2,
            dropout_prob: 0.1,
            max_rel_distance: 2,
        }
    }

    fn build(cfg: &EncoderConfig, input: usize) -> (Encoder, ParamStore<f32>) {
        let mut store = ParamStore::new();
        let mut rng = ModelRng::seed_from_u64(3);
        let enc = Encoder::new(&mut ParamBuilder::new(&mut store, &mut rng), cfg, input).unwrap();
        // perturb zero-initialized biases so every path is exercised
        let ids: Vec<_> = store.iter().map(|(id, _)| id).collect();
        for id in ids {
            let p = store.get_mut(id);
            for v in p.value.data_mut() {
                *v += rng.gen_range(-0.1..0.1);
            }
        }
        (enc, store)
    }

    #[test]
    fn subsampled_lengths_are_ceilings() {
        let (enc, store) = build(&small_cfg(), 4);
        for (t, want) in [(100, 25), (101, 26), (80, 20), (1, 1)] {
            let mut g = Graph::new(&store, false);
            let out = enc.encode_host(&mut g, &vec![0.3; t * 4], [1, t, 4], &[t], &mut ModelRng::seed_from_u64(0)).unwrap();
            assert_eq!(out.len, want);
            assert_eq!(g.shape(out.hidden), &[1, want, 8]);
            assert_eq!(out.mask.iter().filter(|&&m| m == 1.0).count(), want);
        }
    }

    #[test]
    fn empty_input_is_an_error() {
        let (enc, store) = build(&small_cfg(), 4);
        let mut g = Graph::new(&store, false);
        assert!(enc.encode_host(&mut g, &[], [1, 0, 4], &[0], &mut ModelRng::seed_from_u64(0)).is_err());
    }

    #[test]
    fn inference_is_deterministic() {
        let (enc, store) = build(&small_cfg(), 4);
        let data: Vec<f32> = (0..4 * 13).map(|i| (i as f32 * 0.37).sin()).collect();
        let run = |seed| {
            let mut g = Graph::new(&store, false);
            let out = enc.encode_host(&mut g, &data, [1, 13, 4], &[13], &mut ModelRng::seed_from_u64(seed)).unwrap();
            g.value(out.hidden).data().to_vec()
        };
        assert_eq!(run(1), run(2));
    }

    #[test]
    fn padded_frames_do_not_leak() {
        let (enc, store) = build(&small_cfg(), 4);
        let lens = [13, 7];
        let base: Vec<f32> = (0..2 * 13 * 4).map(|i| (i as f32 * 0.11).cos()).collect();
        let run = |data: &[f32]| {
            let mut g = Graph::new(&store, false);
            let out = enc.encode_host(&mut g, data, [2, 13, 4], &lens, &mut ModelRng::seed_from_u64(0)).unwrap();
            (g.value(out.hidden).data().to_vec(), out.mask)
        };
        let mut noisy = base.clone();
        for t in 7..13 {
            for c in 0..4 {
                noisy[(13 + t) * 4 + c] = 50.0 * ((t * c) as f32).sin() + 3.0;
            }
        }
        let (a, mask) = run(&base);
        let (b, _) = run(&noisy);
        for (row, &m) in mask.iter().enumerate() {
            for c in 0..8 {
                let (x, y) = (a[row * 8 + c], b[row * 8 + c]);
                if m == 1.0 {
                    assert!((x - y).abs() <= 1e-5, "row {row}: {x} vs {y}");
                } else {
                    assert_eq!(y, 0.0);
                }
            }
        }
    }

    #[test]
    fn single_block_gradients() {
        let mut store = ParamStore::new();
        let mut rng = ModelRng::seed_from_u64(5);
        let block = ConformerBlock::new(&mut ParamBuilder::new(&mut store, &mut rng), "b", 8, 2, 3, 2, 2, 0.0).unwrap();
        let ids: Vec<_> = store.iter().map(|(id, _)| id).collect();
        for id in ids {
            for v in store.get_mut(id).value.data_mut() {
                *v += rng.gen_range(-0.2..0.2);
            }
        }
        let store = store.cast::<f64>();
        let mask = [1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 0.0, 0.0];
        let report = grad_check(
            |g, xs| Ok(block.forward(g, xs[0], &mask, &mut ModelRng::seed_from_u64(0))?),
            &[vec![2, 6, 8]],
            &store,
            11,
        )
        .unwrap();
        assert!(report.max_rel_error <= 1e-4, "{report:?}");
    }

    #[test]
    fn zero_input_gives_bias_only_preactivation() {
        let (enc, store) = build(&small_cfg(), 4);
        let mut g = Graph::new(&store, false);
        let x = g.constant(Tensor::zeros(&[1, 8, 4]));
        let h = enc.sub.convs[0].forward(&mut g, x).unwrap();
        let bias = store.get(enc.sub.convs[0].b).value.data().to_vec();
        assert_eq!(g.shape(h), &[1, 4, 8]);
        for t in 0..4 {
            assert_eq!(&g.value(h).data()[t * 8..t * 8 + 8], &bias[..]);
        }
    }
}
