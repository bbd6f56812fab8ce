//! Preference feature extraction: a transformer encoder over image tokens,
//! a decoder driven by `R + 1` learnable preference queries, and a
//! multi-head attention block that turns each decoded query into `m`
//! spatial heatmaps.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use num_traits::Float;
use rand::Rng;

use super::config::ModelConfig;
use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::nn::{Init, LayerNorm, Linear, ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Fixed 2-D sinusoidal encoding, `[h * w, d]` row-major over positions.
///
/// The first `d / 2` channels encode the row index, the rest the column
/// index, each as interleaved `sin` / `cos` pairs over geometric
/// frequencies.
pub fn positional_encoding<T: Scalar>(d: usize, h: usize, w: usize) -> Result<Tensor<T>> {
    if d == 0 || !d.is_multiple_of(4) {
        return Err(Error::Config(format!(
            "positional encoding needs d divisible by 4, got {d}"
        )));
    }
    let half = d / 2;
    let mut data = vec![T::zero(); h * w * d];
    for y in 0..h {
        for x in 0..w {
            let row = &mut data[(y * w + x) * d..(y * w + x + 1) * d];
            for (offset, pos) in [(0, y), (half, x)] {
                for i in 0..half / 2 {
                    let freq = 1.0 / Float::powf(10000f64, 2.0 * i as f64 / half as f64);
                    let a = pos as f64 * freq;
                    row[offset + 2 * i] = T::from_f64(Float::sin(a));
                    row[offset + 2 * i + 1] = T::from_f64(Float::cos(a));
                }
            }
        }
    }
    Tensor::new(&[h * w, d], data)
}

/// Scaled dot-product attention with `heads` heads over `[B, T, d]` tokens.
#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub heads: usize,
}

impl MultiHeadAttention {
    pub fn new<T: Scalar>(ps: &mut ParamStore<T>, name: &str, d: usize, heads: usize, rng: &mut impl Rng) -> Self {
        Self {
            q: Linear::new(ps, &format!("{name}.q"), d, d, rng),
            k: Linear::new(ps, &format!("{name}.k"), d, d, rng),
            v: Linear::new(ps, &format!("{name}.v"), d, d, rng),
            o: Linear::new(ps, &format!("{name}.o"), d, d, rng),
            heads,
        }
    }

    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        ps: &ParamStore<T>,
        query: Var,
        key: Var,
        value: Var,
    ) -> Result<Var> {
        let (b, tq, d) = dims3(g, query)?;
        let q = self.q.forward(g, ps, query)?;
        let k = self.k.forward(g, ps, key)?;
        let v = self.v.forward(g, ps, value)?;
        let q = split_heads(g, q, self.heads)?;
        let k = split_heads(g, k, self.heads)?;
        let v = split_heads(g, v, self.heads)?;
        let scores = g.bmm(q, k, true)?;
        let scores = g.scale(scores, 1.0 / Float::sqrt((d / self.heads) as f64));
        let attn = g.softmax(scores, 2)?;
        let ctx = g.bmm(attn, v, false)?;
        let ctx = g.reshape(ctx, &[b, self.heads, tq, d / self.heads])?;
        let ctx = g.permute(ctx, &[0, 2, 1, 3])?;
        let ctx = g.reshape(ctx, &[b, tq, d])?;
        self.o.forward(g, ps, ctx)
    }
}

fn dims3<T: Scalar>(g: &Graph<T>, x: Var) -> Result<(usize, usize, usize)> {
    match *g.shape(x) {
        [b, t, d] => Ok((b, t, d)),
        ref s => Err(Error::dim("attention", format!("expected [B, T, d] tokens, got {s:?}"))),
    }
}

/// `[B, T, d] -> [B * heads, T, d / heads]`.
fn split_heads<T: Scalar>(g: &mut Graph<T>, x: Var, heads: usize) -> Result<Var> {
    let (b, t, d) = dims3(g, x)?;
    let x = g.reshape(x, &[b, t, heads, d / heads])?;
    let x = g.permute(x, &[0, 2, 1, 3])?;
    g.reshape(x, &[b * heads, t, d / heads])
}

#[derive(Clone, Debug)]
pub struct FeedForward {
    pub l1: Linear,
    pub l2: Linear,
}

impl FeedForward {
    fn new<T: Scalar>(ps: &mut ParamStore<T>, name: &str, d: usize, hidden: usize, rng: &mut impl Rng) -> Self {
        Self {
            l1: Linear::new(ps, &format!("{name}.l1"), d, hidden, rng),
            l2: Linear::new(ps, &format!("{name}.l2"), hidden, d, rng),
        }
    }

    fn forward<T: Scalar>(&self, g: &mut Graph<T>, ps: &ParamStore<T>, x: Var) -> Result<Var> {
        let h = self.l1.forward(g, ps, x)?;
        let h = g.relu(h);
        self.l2.forward(g, ps, h)
    }
}

/// Pre-norm self-attention + FFN layer; positions are added to queries and
/// keys only.
#[derive(Clone, Debug)]
pub struct EncoderLayer {
    pub norm1: LayerNorm,
    pub attn: MultiHeadAttention,
    pub norm2: LayerNorm,
    pub ffn: FeedForward,
}

impl EncoderLayer {
    fn forward<T: Scalar>(&self, g: &mut Graph<T>, ps: &ParamStore<T>, x: Var, pos: Var) -> Result<Var> {
        let n = self.norm1.forward(g, ps, x)?;
        let qk = g.add(n, pos)?;
        let a = self.attn.forward(g, ps, qk, qk, n)?;
        let x = g.add(x, a)?;
        let n = self.norm2.forward(g, ps, x)?;
        let f = self.ffn.forward(g, ps, n)?;
        g.add(x, f)
    }
}

/// Pre-norm query self-attention, cross-attention into the encoder memory,
/// and FFN.
#[derive(Clone, Debug)]
pub struct DecoderLayer {
    pub norm1: LayerNorm,
    pub self_attn: MultiHeadAttention,
    pub norm2: LayerNorm,
    pub cross_attn: MultiHeadAttention,
    pub norm3: LayerNorm,
    pub ffn: FeedForward,
}

impl DecoderLayer {
    fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        ps: &ParamStore<T>,
        t: Var,
        memory: Var,
        memory_key: Var,
    ) -> Result<Var> {
        let n = self.norm1.forward(g, ps, t)?;
        let a = self.self_attn.forward(g, ps, n, n, n)?;
        let t = g.add(t, a)?;
        let n = self.norm2.forward(g, ps, t)?;
        let c = self.cross_attn.forward(g, ps, n, memory_key, memory)?;
        let t = g.add(t, c)?;
        let n = self.norm3.forward(g, ps, t)?;
        let f = self.ffn.forward(g, ps, n)?;
        g.add(t, f)
    }
}

/// Query and key projections of the heatmap block.
#[derive(Clone, Debug)]
pub struct HeatmapBlock {
    pub q: Linear,
    pub k: Linear,
    pub m: usize,
}

/// Activations of one PFE pass.
#[derive(Clone, Debug)]
pub struct PfeOutput {
    /// Encoder memory `f^E`, `[B, T, d]` with `T = h * w`.
    pub memory: Var,
    /// Decoded queries `f^D`, `[B, R + 1, d]`.
    pub decoded: Var,
    /// Heatmaps `[B * (R + 1), m, h, w]`, row `b * (R + 1) + r`.
    pub heatmaps: Var,
}

#[derive(Clone, Debug)]
pub struct Pfe {
    pub encoder_layers: Vec<EncoderLayer>,
    pub encoder_norm: LayerNorm,
    pub decoder_layers: Vec<DecoderLayer>,
    pub decoder_norm: LayerNorm,
    /// Preference queries `[R + 1, d]`; row 0 is the meta segmentation.
    pub queries: ParamId,
    pub heatmap: HeatmapBlock,
    pub d: usize,
}

impl Pfe {
    pub fn new<T: Scalar>(ps: &mut ParamStore<T>, cfg: &ModelConfig, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        let (d, p) = (cfg.d, &cfg.pfe);
        let hidden = d * p.ffn_mult;
        let encoder_layers = (0..p.layers_enc)
            .map(|i| {
                let name = format!("pfe.enc{i}");
                EncoderLayer {
                    norm1: LayerNorm::new(ps, &format!("{name}.norm1"), d),
                    attn: MultiHeadAttention::new(ps, &format!("{name}.attn"), d, p.heads, rng),
                    norm2: LayerNorm::new(ps, &format!("{name}.norm2"), d),
                    ffn: FeedForward::new(ps, &format!("{name}.ffn"), d, hidden, rng),
                }
            })
            .collect();
        let encoder_norm = LayerNorm::new(ps, "pfe.enc_norm", d);
        let decoder_layers = (0..p.layers_dec)
            .map(|i| {
                let name = format!("pfe.dec{i}");
                DecoderLayer {
                    norm1: LayerNorm::new(ps, &format!("{name}.norm1"), d),
                    self_attn: MultiHeadAttention::new(ps, &format!("{name}.self_attn"), d, p.heads, rng),
                    norm2: LayerNorm::new(ps, &format!("{name}.norm2"), d),
                    cross_attn: MultiHeadAttention::new(ps, &format!("{name}.cross_attn"), d, p.heads, rng),
                    norm3: LayerNorm::new(ps, &format!("{name}.norm3"), d),
                    ffn: FeedForward::new(ps, &format!("{name}.ffn"), d, hidden, rng),
                }
            })
            .collect();
        let decoder_norm = LayerNorm::new(ps, "pfe.dec_norm", d);
        let q = Init::Normal { std: 0.02 }.tensor(&[cfg.preferences(), d], rng);
        let queries = ps.add("pfe.queries", q, true);
        let heatmap = HeatmapBlock {
            q: Linear::new(ps, "pfe.heatmap.q", d, d, rng),
            k: Linear::new(ps, "pfe.heatmap.k", d, d, rng),
            m: p.m,
        };
        Ok(Self {
            encoder_layers,
            encoder_norm,
            decoder_layers,
            decoder_norm,
            queries,
            heatmap,
            d,
        })
    }

    /// Broadcasts a `[T, d]` encoding over the batch as a constant.
    fn batch_pos<T: Scalar>(g: &mut Graph<T>, pos: &Tensor<T>, b: usize) -> Result<Var> {
        let mut data = Vec::with_capacity(b * pos.len());
        for _ in 0..b {
            data.extend_from_slice(pos.data());
        }
        let mut shape = vec![b];
        shape.extend_from_slice(pos.shape());
        Ok(g.constant(Tensor::new(&shape, data)?))
    }

    /// Transformer encoder over `[B, T, d]` tokens with positions `[T, d]`.
    pub fn encode_tokens<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        ps: &ParamStore<T>,
        tokens: Var,
        pos: &Tensor<T>,
    ) -> Result<Var> {
        let (b, t, d) = dims3(g, tokens)?;
        if pos.shape() != [t, d] {
            return Err(Error::shapes("transformer_encoder", pos.shape(), &[t, d]));
        }
        let pos = Self::batch_pos(g, pos, b)?;
        let mut x = tokens;
        for layer in &self.encoder_layers {
            x = layer.forward(g, ps, x, pos)?;
        }
        self.encoder_norm.forward(g, ps, x)
    }

    /// `[B, d, h, w]` feature map to `[B, h * w, d]` tokens.
    pub fn tokens<T: Scalar>(g: &mut Graph<T>, f_re: Var) -> Result<Var> {
        let &[b, d, h, w] = g.shape(f_re) else {
            return Err(Error::dim("pfe", format!("expected [B, d, h, w], got {:?}", g.shape(f_re))));
        };
        let x = g.reshape(f_re, &[b, d, h * w])?;
        g.permute(x, &[0, 2, 1])
    }

    /// Runs all `R + 1` queries against the memory in one batch.
    pub fn decode<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        ps: &ParamStore<T>,
        memory: Var,
        pos: &Tensor<T>,
    ) -> Result<Var> {
        let (b, _, _) = dims3(g, memory)?;
        let q = g.param(ps, self.queries);
        let rows = g.shape(q)[0];
        let q = g.reshape(q, &[1, rows, self.d])?;
        let mut t = g.index_select0(q, &vec![0; b])?;
        let pos = Self::batch_pos(g, pos, b)?;
        let memory_key = g.add(memory, pos)?;
        for layer in &self.decoder_layers {
            t = layer.forward(g, ps, t, memory, memory_key)?;
        }
        self.decoder_norm.forward(g, ps, t)
    }

    /// Softmax over positions of head-wise scaled dot products between the
    /// decoded queries `[B, Q, d]` and the memory `[B, h * w, d]`; returns
    /// `[B * Q, m, h, w]`.
    pub fn heatmaps<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        ps: &ParamStore<T>,
        decoded: Var,
        memory: Var,
        h: usize,
        w: usize,
    ) -> Result<Var> {
        let m = self.heatmap.m;
        let (b, nq, d) = dims3(g, decoded)?;
        let q = self.heatmap.q.forward(g, ps, decoded)?;
        let k = self.heatmap.k.forward(g, ps, memory)?;
        let q = split_heads(g, q, m)?;
        let k = split_heads(g, k, m)?;
        let scores = g.bmm(q, k, true)?;
        let scores = g.scale(scores, 1.0 / Float::sqrt((d / m) as f64));
        let maps = g.softmax(scores, 2)?;
        let maps = g.reshape(maps, &[b, m, nq, h * w])?;
        let maps = g.permute(maps, &[0, 2, 1, 3])?;
        g.reshape(maps, &[b * nq, m, h, w])
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, ps: &ParamStore<T>, f_re: Var) -> Result<PfeOutput> {
        let &[_, d, h, w] = g.shape(f_re) else {
            return Err(Error::dim("pfe", format!("expected [B, d, h, w], got {:?}", g.shape(f_re))));
        };
        if d != self.d {
            return Err(Error::dim("pfe", format!("feature width {d}, model width {}", self.d)));
        }
        let pos = positional_encoding::<T>(d, h, w)?;
        let tokens = Self::tokens(g, f_re)?;
        let memory = self.encode_tokens(g, ps, tokens, &pos)?;
        let decoded = self.decode(g, ps, memory, &pos)?;
        let heatmaps = self.heatmaps(g, ps, decoded, memory, h, w)?;
        Ok(PfeOutput {
            memory,
            decoded,
            heatmaps,
        })
    }
}

