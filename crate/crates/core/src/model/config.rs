use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Residual mini-encoder shape.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    /// Stem width followed by one width per residual stage; every entry
    /// halves the resolution, so `widths.len() == log2(stride)`.
    pub widths: Vec<usize>,
    /// Total downsampling factor, a power of two.
    pub stride: usize,
}

/// Upsampling decoder: one width per x2 stage, `len == log2(stride)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecoderConfig {
    pub widths: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PfeConfig {
    pub layers_enc: usize,
    pub layers_dec: usize,
    pub heads: usize,
    /// Heatmaps per preference.
    pub m: usize,
    pub ffn_mult: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SsConfig {
    /// Rank of the covariance factor.
    pub alpha: usize,
    /// Additive floor on the diagonal after softplus.
    pub eps_floor: f64,
}

/// Architecture variants compared in the ablation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Full,
    NoPfe,
    NoSs,
    DiagGauss,
    NoMuPrior,
}

impl Variant {
    pub const ALL: [Variant; 5] = [
        Variant::Full,
        Variant::NoPfe,
        Variant::NoSs,
        Variant::DiagGauss,
        Variant::NoMuPrior,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoPfe => "no_pfe",
            Variant::NoSs => "no_ss",
            Variant::DiagGauss => "diag_gauss",
            Variant::NoMuPrior => "no_mu_prior",
        }
    }

    pub fn uses_pfe(self) -> bool {
        self != Variant::NoPfe
    }

    pub fn stochastic(self) -> bool {
        self != Variant::NoSs
    }
}

impl core::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown variant `{s}`")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub in_channels: usize,
    /// Number of annotators R.
    pub annotators: usize,
    /// Transformer width.
    pub d: usize,
    pub encoder: EncoderConfig,
    pub decoder: DecoderConfig,
    pub pfe: PfeConfig,
    pub ss: SsConfig,
    pub variant: Variant,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            in_channels: 1,
            annotators: 3,
            d: 64,
            encoder: EncoderConfig {
                widths: vec![16, 32, 64, 128],
                stride: 16,
            },
            decoder: DecoderConfig {
                widths: vec![64, 32, 16, 16],
            },
            pfe: PfeConfig {
                layers_enc: 2,
                layers_dec: 2,
                heads: 4,
                m: 4,
                ffn_mult: 4,
            },
            ss: SsConfig {
                alpha: 10,
                eps_floor: 1e-5,
            },
            variant: Variant::Full,
        }
    }
}

impl ModelConfig {
    /// Number of x2 stages, `log2(encoder.stride)`.
    pub fn levels(&self) -> usize {
        self.encoder.stride.trailing_zeros() as usize
    }

    /// Rows decoded per image: the meta query plus one per annotator.
    pub fn preferences(&self) -> usize {
        self.annotators + 1
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: alloc::string::String| Err(Error::Config(msg));
        let s = self.encoder.stride;
        if s < 2 || !s.is_power_of_two() {
            return fail(format!("encoder.stride must be a power of two >= 2, got {s}"));
        }
        if self.encoder.widths.len() != self.levels() {
            return fail(format!(
                "encoder.widths has {} entries but stride {s} needs {}",
                self.encoder.widths.len(),
                self.levels()
            ));
        }
        if self.decoder.widths.len() != self.levels() {
            return fail(format!(
                "decoder.widths has {} stages but the encoder has {}",
                self.decoder.widths.len(),
                self.levels()
            ));
        }
        let widths = self.encoder.widths.iter().chain(&self.decoder.widths);
        if self.in_channels == 0 || widths.into_iter().any(|&w| w == 0) {
            return fail("channel counts must be positive".into());
        }
        if self.annotators < 1 {
            return fail("annotators must be >= 1".into());
        }
        if self.d == 0 || !self.d.is_multiple_of(4) {
            return fail(format!("model.d must be a positive multiple of 4, got {}", self.d));
        }
        let p = &self.pfe;
        if p.heads == 0 || !self.d.is_multiple_of(p.heads) {
            return fail(format!("model.d = {} is not divisible by pfe.heads = {}", self.d, p.heads));
        }
        if p.m == 0 || !self.d.is_multiple_of(p.m) {
            return fail(format!("model.d = {} is not divisible by pfe.m = {}", self.d, p.m));
        }
        if p.ffn_mult == 0 {
            return fail("pfe.ffn_mult must be >= 1".into());
        }
        if self.ss.alpha == 0 {
            return fail("ss.alpha must be >= 1".into());
        }
        if !(self.ss.eps_floor > 0.0) {
            return fail(format!("ss.eps_floor must be positive, got {}", self.ss.eps_floor));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_is_valid() {
        ModelConfig::default().validate().unwrap();
        assert_eq!(ModelConfig::default().levels(), 4);
    }

    #[test]
    fn indivisible_heads_rejected() {
        let mut c = ModelConfig::default();
        c.pfe.heads = 5;
        assert!(matches!(c.validate(), Err(Error::Config(_))));
        let mut c = ModelConfig::default();
        c.pfe.m = 3;
        assert!(matches!(c.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn stage_counts_must_agree() {
        let mut c = ModelConfig::default();
        c.decoder.widths.pop();
        assert!(matches!(c.validate(), Err(Error::Config(_))));
        let mut c = ModelConfig::default();
        c.encoder.stride = 32;
        assert!(c.validate().is_err());
    }

    #[test]
    fn variant_names_round_trip() {
        for v in Variant::ALL {
            assert_eq!(v.name().parse::<Variant>().unwrap(), v);
        }
    }
}
