//! A small pre-norm encoder-decoder transformer whose every layer is a
//! gated residual block: a layer whose gate is off is skipped and passes
//! its input through untouched.
//!
//! Everything runs in `f64` on one sequence at a time, with hand-written
//! backward passes.

mod checkpoint;
mod decode;
mod forward;
mod ops;
mod params;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::assignment::SubNetwork;
use crate::error::{Error, Result};

pub use checkpoint::{
    load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
};
pub use decode::greedy_decode;
pub use forward::{backward, forward_loss, forward_pass_count, loss_and_grad, Forward};
pub use params::{init_params, Gradients, Parameters};

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub width: usize,
    pub heads: usize,
    pub ffn_width: usize,
    pub vocab_size: usize,
    /// Longest source or decoder-input sequence (target plus the start token).
    pub max_len: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            enc_layers: 4,
            dec_layers: 2,
            width: 32,
            heads: 2,
            ffn_width: 64,
            vocab_size: 16,
            max_len: 16,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidModelConfig(m.to_string()));
        if self.enc_layers == 0 || self.dec_layers == 0 {
            return bad("encoder and decoder need at least one layer");
        }
        if self.width == 0 || self.heads == 0 || !self.width.is_multiple_of(self.heads) {
            return bad("width must be a positive multiple of heads");
        }
        if self.ffn_width == 0 || self.max_len == 0 {
            return bad("ffn_width and max_len must be positive");
        }
        if self.vocab_size <= crate::data::FIRST_SYMBOL as usize {
            return bad("vocab_size must leave room for content symbols");
        }
        Ok(())
    }

    pub fn head_width(&self) -> usize {
        self.width / self.heads
    }
}

/// Per-layer on/off switches for one forward pass, shared by every sequence
/// in the batch.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct GateVector {
    pub enc: Vec<bool>,
    pub dec: Vec<bool>,
}

impl GateVector {
    pub fn all_on(config: &ModelConfig) -> Self {
        GateVector {
            enc: vec![true; config.enc_layers],
            dec: vec![true; config.dec_layers],
        }
    }

    pub fn all_off(config: &ModelConfig) -> Self {
        GateVector {
            enc: vec![false; config.enc_layers],
            dec: vec![false; config.dec_layers],
        }
    }

    /// Gates open exactly on the layers of each sub-network.
    pub fn from_sub_networks(enc: &SubNetwork, dec: &SubNetwork) -> Self {
        GateVector {
            enc: enc.mask(),
            dec: dec.mask(),
        }
    }

    /// Independent gates, each closed with probability `p`.
    pub fn sample(p: f64, config: &ModelConfig, rng: &mut impl Rng) -> Result<Self> {
        if !(0.0..=1.0).contains(&p) {
            return Err(Error::InvalidProbability(p));
        }
        let mut draw = |n: usize| (0..n).map(|_| rng.gen::<f64>() >= p).collect();
        let enc = draw(config.enc_layers);
        let dec = draw(config.dec_layers);
        Ok(GateVector { enc, dec })
    }

    pub fn check(&self, config: &ModelConfig) -> Result<()> {
        if self.enc.len() != config.enc_layers {
            return Err(Error::GateLength {
                side: "encoder",
                expected: config.enc_layers,
                got: self.enc.len(),
            });
        }
        if self.dec.len() != config.dec_layers {
            return Err(Error::GateLength {
                side: "decoder",
                expected: config.dec_layers,
                got: self.dec.len(),
            });
        }
        Ok(())
    }

    pub fn active_encoder(&self) -> usize {
        self.enc.iter().filter(|&&g| g).count()
    }

    pub fn active_decoder(&self) -> usize {
        self.dec.iter().filter(|&&g| g).count()
    }
}

/// [`GateVector::sample`] from a fresh generator seeded with `seed`.
pub fn sample_gates(p: f64, config: &ModelConfig, seed: u64) -> Result<GateVector> {
    GateVector::sample(p, config, &mut ChaCha8Rng::seed_from_u64(seed))
}
