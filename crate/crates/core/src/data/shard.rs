//! Binary token shard.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic        8 bytes  "RSTOKS\0\0"
//! version      u32
//! token_width  u32      bytes per id, always 4
//! vocab_size   u32
//! eod_id       u32
//! fingerprint  32 bytes tokenizer fingerprint
//! count        u64      number of ids
//! payload      count x u32
//! crc32        u32 over every preceding byte
//! ```

use std::fs;
use std::path::Path;

use super::{DataError, Fingerprint};
use crate::model::checkpoint::write_atomic;

pub const SHARD_MAGIC: &[u8; 8] = b"RSTOKS\0\0";
pub const SHARD_VERSION: u32 = 1;
pub const TOKEN_WIDTH: u32 = 4;
const HEADER_LEN: usize = 8 + 4 + 4 + 4 + 4 + 32 + 8;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ShardHeader {
    pub vocab_size: u32,
    pub eod_id: u32,
    pub fingerprint: Fingerprint,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenShard {
    pub header: ShardHeader,
    tokens: Vec<u32>,
}

impl TokenShard {
    /// Validates every id against the vocabulary.
    pub fn new(header: ShardHeader, tokens: Vec<u32>) -> Result<Self, DataError> {
        if header.eod_id >= header.vocab_size {
            return Err(DataError::Config(format!(
                "eod id {} outside vocab {}",
                header.eod_id, header.vocab_size
            )));
        }
        if let Some((position, &token)) = tokens.iter().enumerate().find(|(_, &t)| t >= header.vocab_size) {
            return Err(DataError::TokenOutOfRange {
                position,
                token,
                vocab: header.vocab_size,
            });
        }
        Ok(Self { header, tokens })
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

    /// Document spans as `start..end`, each ending with (and including) an
    /// EOD id, except possibly an unterminated final document.
    pub fn documents(&self) -> Vec<std::ops::Range<usize>> {
        let mut out = Vec::new();
        let mut start = 0;
        for (i, &t) in self.tokens.iter().enumerate() {
            if t == self.header.eod_id {
                out.push(start..i + 1);
                start = i + 1;
            }
        }
        if start < self.tokens.len() {
            out.push(start..self.tokens.len());
        }
        out
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + 4 * self.tokens.len() + 4);
        out.extend_from_slice(SHARD_MAGIC);
        out.extend_from_slice(&SHARD_VERSION.to_le_bytes());
        out.extend_from_slice(&TOKEN_WIDTH.to_le_bytes());
        out.extend_from_slice(&self.header.vocab_size.to_le_bytes());
        out.extend_from_slice(&self.header.eod_id.to_le_bytes());
        out.extend_from_slice(&self.header.fingerprint.0);
        out.extend_from_slice(&(self.tokens.len() as u64).to_le_bytes());
        for &t in &self.tokens {
            out.extend_from_slice(&t.to_le_bytes());
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        out
    }

    /// Parses a shard; the CRC is checked before any field is trusted.
    pub fn decode(bytes: &[u8]) -> Result<Self, DataError> {
        if bytes.len() < HEADER_LEN + 4 {
            return Err(DataError::Malformed(format!("shard too short ({} bytes)", bytes.len())));
        }
        if &bytes[..8] != SHARD_MAGIC {
            return Err(DataError::BadMagic);
        }
        let (body, tail) = bytes.split_at(bytes.len() - 4);
        let stored = u32::from_le_bytes(tail.try_into().expect("4 bytes"));
        let computed = crc32fast::hash(body);
        if stored != computed {
            return Err(DataError::Crc { stored, computed });
        }
        let u32_at = |o: usize| u32::from_le_bytes(body[o..o + 4].try_into().expect("4 bytes"));
        let version = u32_at(8);
        if version != SHARD_VERSION {
            return Err(DataError::Version { found: version });
        }
        let width = u32_at(12);
        if width != TOKEN_WIDTH {
            return Err(DataError::Malformed(format!("token width {width}, expected {TOKEN_WIDTH}")));
        }
        let vocab_size = u32_at(16);
        let eod_id = u32_at(20);
        let fingerprint = Fingerprint(body[24..56].try_into().expect("32 bytes"));
        let count = u64::from_le_bytes(body[56..64].try_into().expect("8 bytes"));
        let payload = &body[HEADER_LEN..];
        if (payload.len() as u64) != count.saturating_mul(4) {
            return Err(DataError::Malformed(format!(
                "header count {count} disagrees with payload of {} bytes",
                payload.len()
            )));
        }
        let tokens = payload
            .chunks_exact(4)
            .map(|c| u32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        Self::new(
            ShardHeader {
                vocab_size,
                eod_id,
                fingerprint,
            },
            tokens,
        )
    }

    pub fn save(&self, path: &Path) -> Result<(), DataError> {
        write_atomic(path, &self.encode()).map_err(|e| DataError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self, DataError> {
        let bytes = fs::read(path).map_err(|e| DataError::io(path, e))?;
        Self::decode(&bytes)
    }
}
