use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

/// Which network and output factorization a model uses.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Variant {
    /// Left-to-right encoder-decoder.
    At,
    /// Encoder-decoder with relative positions and a pointer head.
    Indigo,
    /// Encoder-decoder scoring every slot of a sorted canvas.
    InsertionTransformer,
    /// Encoder only, over features and canvas tokens together.
    Kermit,
    /// Encoder only, CTC head alone.
    Ctc,
}

impl Variant {
    pub fn has_decoder(self) -> bool {
        matches!(self, Variant::At | Variant::Indigo | Variant::InsertionTransformer)
    }

    /// Scores all slots of a sorted canvas at once.
    pub fn scores_slots(self) -> bool {
        matches!(self, Variant::InsertionTransformer | Variant::Kermit)
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "at" => Ok(Variant::At),
            "indigo" => Ok(Variant::Indigo),
            "insertion_transformer" | "insertion-transformer" | "it" => {
                Ok(Variant::InsertionTransformer)
            }
            "kermit" => Ok(Variant::Kermit),
            "ctc" => Ok(Variant::Ctc),
            other => Err(Error::Config(format!("unknown model variant `{other}`"))),
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Variant::At => "at",
            Variant::Indigo => "indigo",
            Variant::InsertionTransformer => "insertion_transformer",
            Variant::Kermit => "kermit",
            Variant::Ctc => "ctc",
        })
    }
}

/// Weight of the CTC term in the joint objective, in `[0, 1]`.
#[derive(Clone, Copy, Debug, PartialEq, PartialOrd)]
pub struct CtcWeight(f64);

impl CtcWeight {
    pub fn new(alpha: f64) -> Result<Self> {
        if (0.0..=1.0).contains(&alpha) {
            Ok(CtcWeight(alpha))
        } else {
            Err(Error::Config(format!("ctc weight {alpha} outside [0, 1]")))
        }
    }

    pub fn value(self) -> f64 {
        self.0
    }

    pub fn uses_ctc(self) -> bool {
        self.0 > 0.0
    }

    pub fn uses_insertion(self) -> bool {
        self.0 < 1.0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub variant: Variant,
    /// Attention dimension `b`.
    pub dim: usize,
    pub heads: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub ff_dim: usize,
    /// Output labels including blank, pad and end-of-slot.
    pub vocab_size: usize,
    /// Input feature dimension `d`.
    pub feat_dim: usize,
    /// Longest input in raw frames.
    pub max_frames: usize,
    /// Longest transcript.
    pub max_tokens: usize,
    pub frame_stack: usize,
    pub ctc_weight: CtcWeight,
}

impl ModelConfig {
    /// Small defaults for the given variant.
    pub fn toy(variant: Variant, vocab_size: usize, feat_dim: usize) -> Self {
        let encoder_only = matches!(variant, Variant::Kermit | Variant::Ctc);
        ModelConfig {
            variant,
            dim: 64,
            heads: 4,
            encoder_layers: if encoder_only { 4 } else { 2 },
            decoder_layers: if encoder_only { 0 } else { 2 },
            ff_dim: 128,
            vocab_size,
            feat_dim,
            max_frames: 256,
            max_tokens: 64,
            frame_stack: 2,
            ctc_weight: CtcWeight(if variant == Variant::Ctc { 1.0 } else { 0.0 }),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.dim == 0 || self.heads == 0 || self.dim % self.heads != 0 {
            return fail(format!("dim {} not divisible into {} heads", self.dim, self.heads));
        }
        if self.frame_stack == 0 || self.feat_dim == 0 || self.ff_dim == 0 {
            return fail("frame_stack, feat_dim and ff_dim must be positive".into());
        }
        if self.vocab_size <= crate::sequence::FIRST_CONTENT {
            return fail(format!("vocabulary of {} has no content tokens", self.vocab_size));
        }
        if self.encoder_layers == 0 {
            return fail("at least one encoder layer is required".into());
        }
        match self.variant {
            Variant::Kermit | Variant::Ctc if self.decoder_layers != 0 => {
                fail(format!("{} has no decoder layers", self.variant))
            }
            v if v.has_decoder() && self.decoder_layers == 0 => {
                fail(format!("{v} needs decoder layers"))
            }
            Variant::Ctc if self.ctc_weight.value() != 1.0 => {
                fail("the ctc variant trains with ctc weight 1".into())
            }
            _ => Ok(()),
        }
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    /// Stacked frame count `T'` for `frames` raw frames.
    pub fn stacked_len(&self, frames: usize) -> usize {
        frames.div_ceil(self.frame_stack)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toy_configs_validate() {
        for v in [
            Variant::At,
            Variant::Indigo,
            Variant::InsertionTransformer,
            Variant::Kermit,
            Variant::Ctc,
        ] {
            ModelConfig::toy(v, 33, 16).validate().unwrap();
            assert_eq!(v.to_string().parse::<Variant>().unwrap(), v);
        }
    }

    #[test]
    fn invalid_configs() {
        let mut c = ModelConfig::toy(Variant::Kermit, 33, 16);
        c.decoder_layers = 1;
        assert!(c.validate().is_err());
        let mut c = ModelConfig::toy(Variant::At, 33, 16);
        c.heads = 5;
        assert!(c.validate().is_err());
        assert!(CtcWeight::new(1.5).is_err());
    }

    #[test]
    fn stacking_rounds_up() {
        let c = ModelConfig::toy(Variant::At, 33, 16);
        assert_eq!(c.stacked_len(8), 4);
        assert_eq!(c.stacked_len(9), 5);
    }
}
