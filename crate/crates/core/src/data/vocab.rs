//! Vocabulary descriptors and the tokenizer interface.
//!
//! Subword tokenizers are external: a corpus is pre-tokenized elsewhere and
//! described here only by its sizes, EOD id and a fingerprint of the
//! tokenizer definition file.

use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::DataError;

/// SHA-256 of a tokenizer definition.
#[derive(Clone, Copy, PartialEq, Eq, Hash)]
pub struct Fingerprint(pub [u8; 32]);

impl Fingerprint {
    pub fn of_bytes(bytes: &[u8]) -> Self {
        Self(Sha256::digest(bytes).into())
    }

    pub fn of_file(path: &Path) -> Result<Self, DataError> {
        let bytes = std::fs::read(path).map_err(|e| DataError::io(path, e))?;
        Ok(Self::of_bytes(&bytes))
    }

    pub fn to_hex(&self) -> String {
        hex::encode(self.0)
    }

    pub fn from_hex(s: &str) -> Result<Self, DataError> {
        let bytes = hex::decode(s).map_err(|e| DataError::Config(format!("fingerprint {s:?}: {e}")))?;
        let arr: [u8; 32] = bytes
            .try_into()
            .map_err(|_| DataError::Config(format!("fingerprint {s:?} is not 32 bytes")))?;
        Ok(Self(arr))
    }
}

impl fmt::Debug for Fingerprint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Fingerprint({})", self.to_hex())
    }
}

impl fmt::Display for Fingerprint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_hex())
    }
}

impl Serialize for Fingerprint {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_hex())
    }
}

impl<'de> Deserialize<'de> for Fingerprint {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        Fingerprint::from_hex(&s).map_err(serde::de::Error::custom)
    }
}

/// Rounds `vocab` up to a multiple of `multiple` (embedding tables are
/// padded so their rows align with matrix-kernel tiles).
pub fn pad_vocab(vocab: u32, multiple: u32) -> u32 {
    assert!(multiple > 0, "padding multiple must be positive");
    vocab.div_ceil(multiple) * multiple
}

/// Base size of the GPT-NeoX-20B tokenizer.
pub const NEOX_BASE_VOCAB: u32 = 50_277;
/// Row multiple used when padding the embedding table.
pub const VOCAB_PAD_MULTIPLE: u32 = 128;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VocabDescriptor {
    pub name: String,
    /// Ids the tokenizer can emit.
    pub base_size: u32,
    /// Rows in the embedding table; `>= base_size`.
    pub padded_size: u32,
    pub eod_id: u32,
    pub fingerprint: Fingerprint,
}

impl VocabDescriptor {
    /// Describes an external tokenizer by its definition file.
    pub fn external(name: &str, definition: &Path, base_size: u32, eod_id: u32) -> Result<Self, DataError> {
        Ok(Self {
            name: name.to_string(),
            base_size,
            padded_size: pad_vocab(base_size, VOCAB_PAD_MULTIPLE),
            eod_id,
            fingerprint: Fingerprint::of_file(definition)?,
        })
    }
}

pub trait Tokenizer: Send + Sync {
    fn vocab(&self) -> VocabDescriptor;
    fn encode(&self, text: &str) -> Result<Vec<u32>, DataError>;
    fn decode(&self, ids: &[u32]) -> String;
}

/// One id per UTF-8 byte; id 0 (NUL) doubles as end-of-document.
#[derive(Debug, Clone, Copy, Default)]
pub struct ByteTokenizer;

impl ByteTokenizer {
    pub const EOD: u32 = 0;
    pub const VOCAB: u32 = 256;
}

impl Tokenizer for ByteTokenizer {
    fn vocab(&self) -> VocabDescriptor {
        VocabDescriptor {
            name: "bytes".into(),
            base_size: Self::VOCAB,
            padded_size: Self::VOCAB,
            eod_id: Self::EOD,
            fingerprint: Fingerprint::of_bytes(b"refscale byte tokenizer v1"),
        }
    }

    fn encode(&self, text: &str) -> Result<Vec<u32>, DataError> {
        if let Some(position) = text.bytes().position(|b| b == 0) {
            return Err(DataError::Config(format!("NUL byte at {position} collides with the EOD id")));
        }
        Ok(text.bytes().map(u32::from).collect())
    }

    fn decode(&self, ids: &[u32]) -> String {
        let bytes: Vec<u8> = ids.iter().filter(|&&i| i != Self::EOD && i < 256).map(|&i| i as u8).collect();
        String::from_utf8_lossy(&bytes).into_owned()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn neox_vocab_pads_to_50304() {
        assert_eq!(pad_vocab(NEOX_BASE_VOCAB, VOCAB_PAD_MULTIPLE), 50_304);
        assert_eq!(pad_vocab(256, 128), 256);
        assert_eq!(pad_vocab(1, 128), 128);
    }

    #[test]
    fn byte_tokenizer_round_trips() {
        let t = ByteTokenizer;
        let ids = t.encode("héllo").unwrap();
        assert_eq!(ids.len(), 6);
        assert_eq!(t.decode(&ids), "héllo");
        assert!(t.encode("a\0b").is_err());
    }

    #[test]
    fn fingerprint_hex_round_trip() {
        let f = Fingerprint::of_bytes(b"x");
        assert_eq!(Fingerprint::from_hex(&f.to_hex()).unwrap(), f);
        let json = serde_json::to_string(&f).unwrap();
        assert_eq!(serde_json::from_str::<Fingerprint>(&json).unwrap(), f);
        assert!(Fingerprint::from_hex("abcd").is_err());
    }
}
