//! Token shards, vocabularies, packing into training batches, and holdout
//! splitting.

mod manifest;
mod pack;
mod shard;
mod split;
mod synth;
mod vocab;

pub use manifest::CorpusManifest;
pub use pack::{pack, Batch, BatchStream, Corpus, Prefetcher};
pub use shard::{ShardHeader, TokenShard, SHARD_MAGIC, SHARD_VERSION, TOKEN_WIDTH};
pub use split::split_holdout;
pub use synth::{synthetic_shard, MarkovSource};
pub use vocab::{
    pad_vocab, ByteTokenizer, Fingerprint, Tokenizer, VocabDescriptor, NEOX_BASE_VOCAB, VOCAB_PAD_MULTIPLE,
};

use std::path::Path;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("not a token shard (bad magic)")]
    BadMagic,
    #[error("unsupported shard version {found} (expected {SHARD_VERSION})")]
    Version { found: u32 },
    #[error("shard CRC mismatch: stored {stored:#010x}, computed {computed:#010x}")]
    Crc { stored: u32, computed: u32 },
    #[error("malformed shard: {0}")]
    Malformed(String),
    #[error("token {token} at position {position} is outside vocab {vocab}")]
    TokenOutOfRange { position: usize, token: u32, vocab: u32 },
    #[error("shard {shard}: tokenizer fingerprint {found} differs from {expected}")]
    FingerprintMismatch {
        shard: usize,
        expected: Fingerprint,
        found: Fingerprint,
    },
    #[error("vocabulary mismatch: {0}")]
    VocabMismatch(String),
    #[error("empty corpus")]
    EmptyCorpus,
    #[error("{0}")]
    Config(String),
}

impl DataError {
    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        DataError::Io {
            path: path.display().to_string(),
            source,
        }
    }
}
