//! Synthetic sequence-to-sequence tasks.
//!
//! Token ids: `0` is reserved padding (never emitted), `1` begins a decoder
//! input, `2` ends a sequence, and `3..vocab_size` are content symbols.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const PAD: u32 = 0;
pub const BOS: u32 = 1;
pub const EOS: u32 = 2;
pub const FIRST_SYMBOL: u32 = 3;

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Example {
    pub source: Vec<u32>,
    pub target: Vec<u32>,
}

impl Example {
    pub fn new(source: Vec<u32>, target: Vec<u32>) -> Self {
        Example { source, target }
    }

    /// Decoder input: `BOS` followed by the target.
    pub fn decoder_input(&self) -> Vec<u32> {
        std::iter::once(BOS).chain(self.target.iter().copied()).collect()
    }

    /// Decoder labels: the target followed by `EOS`.
    pub fn decoder_labels(&self) -> Vec<u32> {
        self.target.iter().copied().chain(std::iter::once(EOS)).collect()
    }

    /// Number of predicted positions (target plus `EOS`).
    pub fn label_count(&self) -> usize {
        self.target.len() + 1
    }
}

/// A set of sequence pairs processed together. Every example is run at its
/// own length, so no padding or masks are involved.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Batch {
    pub id: u64,
    pub examples: Vec<Example>,
}

impl Batch {
    pub fn new(id: u64, examples: Vec<Example>) -> Self {
        Batch { id, examples }
    }

    /// Predicted-token count; the loss is normalized by it.
    pub fn token_count(&self) -> usize {
        self.examples.iter().map(Example::label_count).sum()
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    /// Draws `size` examples uniformly with replacement.
    pub fn sample(id: u64, pool: &[Example], size: usize, rng: &mut impl Rng) -> Self {
        let examples = (0..size).filter_map(|_| pool.choose(rng).cloned()).collect();
        Batch { id, examples }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskKind {
    Copy,
    Reverse,
}

impl TaskKind {
    pub fn apply(self, source: &[u32]) -> Vec<u32> {
        match self {
            TaskKind::Copy => source.to_vec(),
            TaskKind::Reverse => source.iter().rev().copied().collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub task: TaskKind,
    pub min_len: usize,
    pub max_len: usize,
    pub train_size: usize,
    pub test_size: usize,
    /// Probability that a training target symbol is replaced by a random
    /// symbol. Test references are always clean.
    pub noise: f64,
    pub seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            task: TaskKind::Copy,
            min_len: 3,
            max_len: 8,
            train_size: 2000,
            test_size: 200,
            noise: 0.0,
            seed: 7,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub train: Vec<Example>,
    pub test: Vec<Example>,
}

impl DataConfig {
    pub fn validate(&self, vocab_size: usize) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidTrainConfig(m));
        if self.min_len == 0 || self.min_len > self.max_len {
            return bad(format!(
                "need 1 <= min_len <= max_len, got {}..{}",
                self.min_len, self.max_len
            ));
        }
        if vocab_size <= FIRST_SYMBOL as usize {
            return bad(format!("vocab_size {vocab_size} leaves no content symbols"));
        }
        if !(0.0..=1.0).contains(&self.noise) {
            return Err(Error::InvalidProbability(self.noise));
        }
        Ok(())
    }

    /// Generates disjoint train and test sets. Test sources never appear in
    /// the training set.
    pub fn generate(&self, vocab_size: usize) -> Result<Dataset> {
        self.validate(vocab_size)?;
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let symbols = vocab_size as u32 - FIRST_SYMBOL;
        let draw = |rng: &mut ChaCha8Rng| -> Vec<u32> {
            let len = rng.gen_range(self.min_len..=self.max_len);
            (0..len).map(|_| FIRST_SYMBOL + rng.gen_range(0..symbols)).collect()
        };

        let mut test = Vec::with_capacity(self.test_size);
        let mut seen = std::collections::HashSet::new();
        while test.len() < self.test_size {
            let src = draw(&mut rng);
            if seen.insert(src.clone()) {
                test.push(Example::new(src.clone(), self.task.apply(&src)));
            }
        }
        let mut train = Vec::with_capacity(self.train_size);
        let mut attempts = 0usize;
        while train.len() < self.train_size {
            attempts += 1;
            if attempts > 100 * (self.train_size + 1) {
                return Err(Error::InvalidTrainConfig(
                    "sequence space too small for the requested train size".into(),
                ));
            }
            let src = draw(&mut rng);
            if seen.contains(&src) {
                continue;
            }
            let mut tgt = self.task.apply(&src);
            for t in tgt.iter_mut() {
                if rng.gen::<f64>() < self.noise {
                    *t = FIRST_SYMBOL + rng.gen_range(0..symbols);
                }
            }
            train.push(Example::new(src, tgt));
        }
        Ok(Dataset { train, test })
    }
}
