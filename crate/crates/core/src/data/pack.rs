//! Concatenate-and-chunk packing into fixed-context batches.
//!
//! The corpus is one stream: shards in manifest order, documents separated
//! by EOD ids, no cross-document attention mask. The stream is cut into
//! `floor(total / context)` chunks. Each pass over the data visits the chunks
//! in a fresh seeded permutation, `batch_rows` chunks per batch; the
//! remainder that does not fill a batch is skipped for that pass. Targets
//! are the next stream token, so the last target of a chunk is the first
//! token of the following chunk (wrapping to the stream start).
//!
//! Batch `k` is a pure function of `(corpus, seed, k)`, which makes the
//! stream seekable for resumption.

use std::sync::mpsc::{sync_channel, Receiver};
use std::sync::Arc;
use std::thread::JoinHandle;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{DataError, ShardHeader, TokenShard};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Batch {
    pub index: u64,
    pub rows: usize,
    pub context: usize,
    /// Row-major `rows x context`.
    pub inputs: Vec<u32>,
    pub targets: Vec<u32>,
    /// `(row, position)` of every input that is an EOD id.
    pub doc_boundaries: Vec<(usize, usize)>,
}

impl Batch {
    pub fn tokens(&self) -> usize {
        self.rows * self.context
    }

    /// Rows `start..start + len` as their own batch (for gradient accumulation).
    pub fn rows_slice(&self, start: usize, len: usize) -> Batch {
        let span = start * self.context..(start + len) * self.context;
        Batch {
            index: self.index,
            rows: len,
            context: self.context,
            inputs: self.inputs[span.clone()].to_vec(),
            targets: self.targets[span].to_vec(),
            doc_boundaries: self
                .doc_boundaries
                .iter()
                .filter(|(r, _)| (start..start + len).contains(r))
                .map(|&(r, p)| (r - start, p))
                .collect(),
        }
    }
}

/// Concatenated, validated token stream.
#[derive(Debug, Clone)]
pub struct Corpus {
    pub header: ShardHeader,
    tokens: Arc<Vec<u32>>,
}

impl Corpus {
    /// Concatenates shards. Fingerprint, vocabulary and EOD id must agree.
    pub fn new(shards: &[TokenShard]) -> Result<Self, DataError> {
        let first = shards.first().ok_or(DataError::EmptyCorpus)?;
        let header = first.header.clone();
        for (i, s) in shards.iter().enumerate().skip(1) {
            if s.header.fingerprint != header.fingerprint {
                return Err(DataError::FingerprintMismatch {
                    shard: i,
                    expected: header.fingerprint,
                    found: s.header.fingerprint,
                });
            }
            if s.header.vocab_size != header.vocab_size || s.header.eod_id != header.eod_id {
                return Err(DataError::VocabMismatch(format!(
                    "shard {i} has vocab {} / eod {}, shard 0 has {} / {}",
                    s.header.vocab_size, s.header.eod_id, header.vocab_size, header.eod_id
                )));
            }
        }
        let tokens: Vec<u32> = shards.iter().flat_map(|s| s.tokens().iter().copied()).collect();
        if tokens.is_empty() {
            return Err(DataError::EmptyCorpus);
        }
        Ok(Self {
            header,
            tokens: Arc::new(tokens),
        })
    }

    pub fn tokens(&self) -> &[u32] {
        &self.tokens
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

#[derive(Debug, Clone)]
pub struct BatchStream {
    corpus: Corpus,
    context: usize,
    rows: usize,
    seed: u64,
    num_chunks: usize,
    cached_pass: Option<(u64, Arc<Vec<u32>>)>,
}

/// Builds the batch stream over `shards`.
pub fn pack(
    shards: &[TokenShard],
    context_length: usize,
    global_batch_tokens: usize,
    seed: u64,
) -> Result<BatchStream, DataError> {
    BatchStream::new(Corpus::new(shards)?, context_length, global_batch_tokens, seed)
}

impl BatchStream {
    pub fn new(corpus: Corpus, context_length: usize, global_batch_tokens: usize, seed: u64) -> Result<Self, DataError> {
        if context_length == 0 || global_batch_tokens == 0 {
            return Err(DataError::Config("context and batch size must be positive".into()));
        }
        if global_batch_tokens % context_length != 0 {
            return Err(DataError::Config(format!(
                "global batch of {global_batch_tokens} tokens is not a multiple of context {context_length}"
            )));
        }
        let rows = global_batch_tokens / context_length;
        let num_chunks = corpus.len() / context_length;
        if num_chunks < rows {
            return Err(DataError::Config(format!(
                "corpus of {} tokens is smaller than one batch of {global_batch_tokens}",
                corpus.len()
            )));
        }
        Ok(Self {
            corpus,
            context: context_length,
            rows,
            seed,
            num_chunks,
            cached_pass: None,
        })
    }

    pub fn context(&self) -> usize {
        self.context
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn global_batch_tokens(&self) -> usize {
        self.rows * self.context
    }

    pub fn corpus(&self) -> &Corpus {
        &self.corpus
    }

    /// `floor(total_tokens / global_batch_tokens)`.
    pub fn batches_per_pass(&self) -> u64 {
        (self.corpus.len() / self.global_batch_tokens()) as u64
    }

    fn permutation(&mut self, pass: u64) -> Arc<Vec<u32>> {
        if let Some((p, perm)) = &self.cached_pass {
            if *p == pass {
                return perm.clone();
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(pass);
        let mut perm: Vec<u32> = (0..self.num_chunks as u32).collect();
        perm.shuffle(&mut rng);
        let perm = Arc::new(perm);
        self.cached_pass = Some((pass, perm.clone()));
        perm
    }

    /// Batch `index` of the stream.
    pub fn batch(&mut self, index: u64) -> Batch {
        let per_pass = self.batches_per_pass();
        let (pass, k) = (index / per_pass, (index % per_pass) as usize);
        let perm = self.permutation(pass);
        let stream = self.corpus.tokens();
        let (n, t) = (stream.len(), self.context);
        let eod = self.corpus.header.eod_id;
        let mut inputs = Vec::with_capacity(self.rows * t);
        let mut targets = Vec::with_capacity(self.rows * t);
        let mut doc_boundaries = Vec::new();
        for row in 0..self.rows {
            let start = perm[k * self.rows + row] as usize * t;
            inputs.extend_from_slice(&stream[start..start + t]);
            targets.extend_from_slice(&stream[start + 1..(start + t + 1).min(n)]);
            if start + t + 1 > n {
                targets.push(stream[0]);
            }
            for (pos, &id) in stream[start..start + t].iter().enumerate() {
                if id == eod {
                    doc_boundaries.push((row, pos));
                }
            }
        }
        Batch {
            index,
            rows: self.rows,
            context: t,
            inputs,
            targets,
            doc_boundaries,
        }
    }

    /// Batches `start, start + 1, ...`.
    pub fn iter_from(self, start: u64) -> impl Iterator<Item = Batch> {
        let mut s = self;
        (start..).map(move |i| s.batch(i))
    }

    /// Produces batches `start..end` on a background thread, at most `depth`
    /// ahead of the consumer. Order is independent of `depth`.
    pub fn prefetch(self, start: u64, end: u64, depth: usize) -> Prefetcher {
        let (tx, rx) = sync_channel(depth.max(1));
        let handle = std::thread::spawn(move || {
            let mut s = self;
            for i in start..end {
                if tx.send(s.batch(i)).is_err() {
                    break;
                }
            }
        });
        Prefetcher {
            rx: Some(rx),
            handle: Some(handle),
        }
    }
}

pub struct Prefetcher {
    rx: Option<Receiver<Batch>>,
    handle: Option<JoinHandle<()>>,
}

impl Iterator for Prefetcher {
    type Item = Batch;
    fn next(&mut self) -> Option<Batch> {
        self.rx.as_ref()?.recv().ok()
    }
}

impl Drop for Prefetcher {
    fn drop(&mut self) {
        // closing the receiver unblocks a producer waiting on a full queue
        drop(self.rx.take());
        if let Some(h) = self.handle.take() {
            let _ = h.join();
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Fingerprint;

    fn shard(tokens: Vec<u32>) -> TokenShard {
        TokenShard::new(
            ShardHeader {
                vocab_size: 1000,
                eod_id: 0,
                fingerprint: Fingerprint::of_bytes(b"t"),
            },
            tokens,
        )
        .unwrap()
    }

    #[test]
    fn five_batches_per_pass() {
        let s = pack(&[shard((0..10_240).map(|i| i % 1000).collect())], 2048, 2048, 1).unwrap();
        assert_eq!(s.batches_per_pass(), 5);
    }

    #[test]
    fn non_multiple_batch_and_empty_corpus_rejected() {
        assert!(pack(&[shard(vec![1; 100])], 16, 40, 0).is_err());
        assert!(matches!(pack(&[], 16, 32, 0), Err(DataError::EmptyCorpus)));
        assert!(matches!(pack(&[shard(vec![])], 16, 32, 0), Err(DataError::EmptyCorpus)));
    }

    #[test]
    fn fingerprint_mismatch_is_fatal() {
        let mut other = shard(vec![1, 2, 3]);
        other.header.fingerprint = Fingerprint::of_bytes(b"u");
        let err = pack(&[shard(vec![1; 64]), other], 4, 8, 0).unwrap_err();
        assert!(matches!(err, DataError::FingerprintMismatch { shard: 1, .. }));
    }

    #[test]
    fn pass_visits_every_chunk_once() {
        let n = 4 * 8 * 6;
        let mut s = pack(&[shard((1..=n as u32).collect())], 8, 32, 9).unwrap();
        let mut seen: Vec<u32> = (0..s.batches_per_pass()).flat_map(|k| s.batch(k).inputs).collect();
        seen.sort_unstable();
        assert_eq!(seen, (1..=n as u32).collect::<Vec<_>>());
    }

    #[test]
    fn last_target_wraps_to_stream_start() {
        let mut s = pack(&[shard((1..=8).collect())], 4, 4, 0).unwrap();
        let b = (0..2).map(|k| s.batch(k)).find(|b| b.inputs[0] == 5).unwrap();
        assert_eq!(b.targets, vec![6, 7, 8, 1]);
    }

    #[test]
    fn prefetch_preserves_order() {
        let s = pack(&[shard((0..5000).map(|i| (i * 7) % 1000).collect())], 16, 64, 3).unwrap();
        let direct: Vec<Batch> = s.clone().iter_from(10).take(40).collect();
        for depth in [1, 2, 7] {
            let fetched: Vec<Batch> = s.clone().prefetch(10, 50, depth).collect();
            assert_eq!(fetched, direct);
        }
        let mut early = s.prefetch(0, 1_000_000, 2);
        assert!(early.next().is_some());
        drop(early);
    }

    #[test]
    fn boundaries_point_at_eod() {
        let tokens: Vec<u32> = (0..640).map(|i| if i % 37 == 0 { 0 } else { 1 + i % 500 }).collect();
        let mut s = pack(&[shard(tokens)], 32, 64, 5).unwrap();
        for k in 0..s.batches_per_pass() {
            let b = s.batch(k);
            for &(r, p) in &b.doc_boundaries {
                assert_eq!(b.inputs[r * b.context + p], 0);
            }
            let eods = b.inputs.iter().filter(|&&t| t == 0).count();
            assert_eq!(eods, b.doc_boundaries.len());
        }
    }
}
