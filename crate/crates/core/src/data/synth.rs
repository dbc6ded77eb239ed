//! Seeded synthetic corpora with learnable structure, for desk-scale runs.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{ByteTokenizer, DataError, ShardHeader, TokenShard, Tokenizer};

/// First-order Markov source over ids `1..vocab` (0 is EOD). Every state has
/// `fanout` successors with geometrically decaying probabilities.
#[derive(Debug, Clone)]
pub struct MarkovSource {
    successors: Vec<Vec<u32>>,
    cumulative: Vec<f64>,
    vocab: u32,
}

impl MarkovSource {
    pub fn new(vocab: u32, fanout: usize, seed: u64) -> Self {
        assert!(vocab >= 2 && fanout >= 1);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let successors = (0..vocab)
            .map(|_| (0..fanout).map(|_| rng.random_range(1..vocab)).collect())
            .collect();
        let weights: Vec<f64> = (0..fanout).map(|j| 0.5f64.powi(j as i32)).collect();
        let total: f64 = weights.iter().sum();
        let cumulative = weights
            .iter()
            .scan(0.0, |acc, w| {
                *acc += w / total;
                Some(*acc)
            })
            .collect();
        Self {
            successors,
            cumulative,
            vocab,
        }
    }

    /// Entropy rate in nats per non-EOD token.
    pub fn entropy_rate(&self) -> f64 {
        let mut prev = 0.0;
        let mut h = 0.0;
        for &c in &self.cumulative {
            let p: f64 = c - prev;
            prev = c;
            h -= p * p.ln();
        }
        h
    }

    /// Exactly `n_tokens` ids: documents of 32..=512 tokens, each closed
    /// by EOD (the last one possibly truncated).
    pub fn generate(&self, n_tokens: usize, seed: u64) -> Vec<u32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut out = Vec::with_capacity(n_tokens);
        while out.len() < n_tokens {
            let len = rng.random_range(32..=512usize);
            let mut state = rng.random_range(1..self.vocab);
            for _ in 0..len {
                out.push(state);
                let u: f64 = rng.random();
                let j = self.cumulative.iter().position(|&c| u < c).unwrap_or(self.cumulative.len() - 1);
                state = self.successors[state as usize][j];
            }
            out.push(ByteTokenizer::EOD);
        }
        out.truncate(n_tokens);
        out
    }
}

/// Synthetic byte-vocabulary shard.
pub fn synthetic_shard(n_tokens: usize, fanout: usize, seed: u64) -> Result<TokenShard, DataError> {
    let vocab = ByteTokenizer.vocab();
    let source = MarkovSource::new(vocab.base_size, fanout, seed);
    let header = ShardHeader {
        vocab_size: vocab.padded_size,
        eod_id: vocab.eod_id,
        fingerprint: vocab.fingerprint,
    };
    TokenShard::new(header, source.generate(n_tokens, seed.wrapping_add(1)))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exact_length_and_deterministic() {
        let a = synthetic_shard(10_000, 6, 3).unwrap();
        assert_eq!(a.len(), 10_000);
        assert_eq!(a, synthetic_shard(10_000, 6, 3).unwrap());
        assert_ne!(a, synthetic_shard(10_000, 6, 4).unwrap());
        assert!(a.documents().len() > 15);
    }

    #[test]
    fn entropy_is_well_below_uniform() {
        let s = MarkovSource::new(256, 6, 0);
        assert!((s.entropy_rate() - 1.30).abs() < 0.01, "{}", s.entropy_rate());
        assert!(s.entropy_rate() < (255f64).ln() - 3.0);
    }
}
