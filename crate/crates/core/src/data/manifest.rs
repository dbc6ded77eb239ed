use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{Corpus, DataError, Fingerprint, TokenShard};

/// JSON listing of a corpus. Shard paths are relative to the manifest file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusManifest {
    pub dataset: String,
    pub tokenizer: String,
    pub fingerprint: Fingerprint,
    pub shards: Vec<PathBuf>,
}

impl CorpusManifest {
    pub fn load(path: &Path) -> Result<Self, DataError> {
        let text = std::fs::read_to_string(path).map_err(|e| DataError::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| DataError::Config(format!("{}: {e}", path.display())))
    }

    pub fn save(&self, path: &Path) -> Result<(), DataError> {
        let text = serde_json::to_string_pretty(self).expect("manifest serializes");
        crate::model::checkpoint::write_atomic(path, text.as_bytes()).map_err(|e| DataError::io(path, e))
    }

    /// Loads all shards, checking each fingerprint against the manifest.
    pub fn load_shards(&self, manifest_path: &Path) -> Result<Vec<TokenShard>, DataError> {
        let base = manifest_path.parent().unwrap_or(Path::new("."));
        let mut out = Vec::with_capacity(self.shards.len());
        for (i, rel) in self.shards.iter().enumerate() {
            let shard = TokenShard::load(&base.join(rel))?;
            if shard.header.fingerprint != self.fingerprint {
                return Err(DataError::FingerprintMismatch {
                    shard: i,
                    expected: self.fingerprint,
                    found: shard.header.fingerprint,
                });
            }
            out.push(shard);
        }
        Ok(out)
    }

    pub fn load_corpus(&self, manifest_path: &Path) -> Result<Corpus, DataError> {
        Corpus::new(&self.load_shards(manifest_path)?)
    }
}
