//! The segmentation model: residual encoder, preference feature extraction,
//! a shared decoder and the stochastic head, wired per [`Variant`].

mod config;
mod encoder;
mod pfe;
mod ss_head;

pub use config::{DecoderConfig, EncoderConfig, ModelConfig, PfeConfig, SsConfig, Variant};
pub use encoder::{ConvBn, Encoder, EncoderOutput, ResidualStage, SegDecoder, SEG_CHANNELS};
pub use pfe::{
    positional_encoding, DecoderLayer, EncoderLayer, FeedForward, HeatmapBlock, MultiHeadAttention, Pfe,
    PfeOutput,
};
pub use ss_head::{HeadOutput, SampleNoise, SsHead};

use alloc::vec::Vec;

use rand::Rng;

use crate::autograd::{Graph, Var};
use crate::error::Result;
use crate::nn::ParamStore;
use crate::scalar::Scalar;

/// Graph nodes of one forward pass over `B` images. Per-preference tensors
/// have `B * (R + 1)` rows ordered `b * (R + 1) + r`, row `r = 0` being the
/// meta segmentation.
#[derive(Clone, Debug)]
pub struct TabOutput {
    pub batch: usize,
    pub preferences: usize,
    pub encoder: EncoderOutput,
    pub pfe: Option<PfeOutput>,
    /// `[B * (R + 1), 32, H, W]`.
    pub f_seg: Var,
    pub head: HeadOutput,
    /// Logits the loss is taken on: a reparameterised sample for stochastic
    /// variants, `mu` otherwise.
    pub logits: Var,
}

#[derive(Clone, Debug)]
pub struct TabModel {
    pub config: ModelConfig,
    pub encoder: Encoder,
    pub pfe: Option<Pfe>,
    pub decoder: SegDecoder,
    pub head: SsHead,
}

impl TabModel {
    /// Registers every parameter in `ps`; initialisation draws from `rng`.
    pub fn new<T: Scalar>(ps: &mut ParamStore<T>, config: &ModelConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let encoder = Encoder::new(ps, config, rng)?;
        let pfe = if config.variant.uses_pfe() {
            Some(Pfe::new(ps, config, rng)?)
        } else {
            None
        };
        let c_in = config.d + if pfe.is_some() { config.pfe.m } else { 0 };
        let decoder = SegDecoder::new(ps, config, c_in, rng)?;
        let head = SsHead::new(ps, config, rng)?;
        Ok(Self {
            config: config.clone(),
            encoder,
            pfe,
            decoder,
            head,
        })
    }

    /// Noise for one training forward over `batch` images of `h x w`, or
    /// `None` for deterministic variants.
    pub fn draw_noise<T: Scalar>(
        &self,
        batch: usize,
        h: usize,
        w: usize,
        rng: &mut impl Rng,
    ) -> Option<SampleNoise<T>> {
        self.config.variant.stochastic().then(|| {
            SampleNoise::draw(batch * self.config.preferences(), self.config.ss.alpha, h, w, rng)
        })
    }

    /// Forward pass on `x` `[B, C, H, W]`. With `noise` the logits are a
    /// reparameterised sample; without, they are `mu`.
    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        ps: &ParamStore<T>,
        x: Var,
        noise: Option<&SampleNoise<T>>,
    ) -> Result<TabOutput> {
        let batch = g.shape(x).first().copied().unwrap_or(0);
        let rows = self.config.preferences();
        let enc = self.encoder.forward(g, ps, x)?;
        let (pfe_out, f_seg) = match &self.pfe {
            Some(pfe) => {
                let out = pfe.forward(g, ps, enc.f_re)?;
                let f_re = g.repeat_interleave0(enc.f_re, rows)?;
                let input = g.concat(&[f_re, out.heatmaps], 1)?;
                let skips = enc
                    .skips
                    .iter()
                    .map(|&s| g.repeat_interleave0(s, rows))
                    .collect::<Result<Vec<_>>>()?;
                let f_seg = self.decoder.forward(g, ps, input, &skips)?;
                (Some(out), f_seg)
            }
            None => {
                // Every preference shares one decoded map.
                let f_seg = self.decoder.forward(g, ps, enc.f_re, &enc.skips)?;
                (None, g.repeat_interleave0(f_seg, rows)?)
            }
        };
        let head = self.head.forward(g, ps, f_seg)?;
        let logits = match noise {
            Some(n) => self.head.sample(g, &head, n)?,
            None => head.mu,
        };
        Ok(TabOutput {
            batch,
            preferences: rows,
            encoder: enc,
            pfe: pfe_out,
            f_seg,
            head,
            logits,
        })
    }
}
