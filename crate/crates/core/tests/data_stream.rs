use proptest::prelude::*;
use refscale::data::{pack, split_holdout, synthetic_shard, CorpusManifest, DataError, Fingerprint, ShardHeader, TokenShard};
use sha2::{Digest, Sha256};

fn header(vocab: u32) -> ShardHeader {
    ShardHeader {
        vocab_size: vocab,
        eod_id: 0,
        fingerprint: Fingerprint::of_bytes(b"prop"),
    }
}

fn stream_digest(seed: u64, n: u64) -> [u8; 32] {
    let mut s = pack(&[synthetic_shard(20_000, 5, 1).unwrap()], 64, 256, seed).unwrap();
    let mut h = Sha256::new();
    for k in 0..n {
        let b = s.batch(k);
        for t in b.inputs.iter().chain(&b.targets) {
            h.update(t.to_le_bytes());
        }
    }
    h.finalize().into()
}

#[test]
fn same_seed_same_stream_hash() {
    assert_eq!(stream_digest(11, 200), stream_digest(11, 200));
    assert_ne!(stream_digest(11, 200), stream_digest(12, 200));
}

#[test]
fn manifest_round_trip_and_fingerprint_check() {
    let dir = tempfile::tempdir().unwrap();
    let shard = synthetic_shard(4096, 4, 2).unwrap();
    shard.save(&dir.path().join("a.tok")).unwrap();
    let mut manifest = CorpusManifest {
        dataset: "synthetic".into(),
        tokenizer: "bytes".into(),
        fingerprint: shard.header.fingerprint,
        shards: vec!["a.tok".into()],
    };
    let mpath = dir.path().join("corpus.json");
    manifest.save(&mpath).unwrap();
    let loaded = CorpusManifest::load(&mpath).unwrap();
    assert_eq!(loaded, manifest);
    assert_eq!(loaded.load_corpus(&mpath).unwrap().len(), 4096);
    manifest.fingerprint = Fingerprint::of_bytes(b"other");
    assert!(matches!(
        manifest.load_shards(&mpath),
        Err(DataError::FingerprintMismatch { shard: 0, .. })
    ));
}

proptest! {
    #[test]
    fn shard_round_trip_is_bit_identical(tokens in prop::collection::vec(0u32..50_304, 0..500)) {
        let s = TokenShard::new(header(50_304), tokens).unwrap();
        let bytes = s.encode();
        let back = TokenShard::decode(&bytes).unwrap();
        prop_assert_eq!(&back, &s);
        prop_assert_eq!(back.encode(), bytes);
    }

    #[test]
    fn truncated_shard_is_rejected(tokens in prop::collection::vec(0u32..256, 1..200), cut in 1usize..64) {
        let bytes = TokenShard::new(header(256), tokens).unwrap().encode();
        let cut = cut.min(bytes.len() - 1);
        prop_assert!(TokenShard::decode(&bytes[..bytes.len() - cut]).is_err());
    }

    #[test]
    fn targets_are_shifted_inputs(seed in 0u64..1000, ctx in 2usize..40, rows in 1usize..5, k in 0u64..30) {
        // distinct ids make each chunk's source position recoverable
        let shard = TokenShard::new(header(50_304), (1..=3000).collect()).unwrap();
        let mut s = pack(&[shard.clone()], ctx, ctx * rows, seed).unwrap();
        let b = s.batch(k);
        let stream = shard.tokens();
        for r in 0..rows {
            let row_in = &b.inputs[r * ctx..(r + 1) * ctx];
            let row_tg = &b.targets[r * ctx..(r + 1) * ctx];
            prop_assert_eq!(&row_in[1..], &row_tg[..ctx - 1]);
            let start = row_in[0] as usize - 1;
            prop_assert_eq!(start % ctx, 0);
            prop_assert_eq!(&stream[start..start + ctx], row_in);
            prop_assert_eq!(row_tg[ctx - 1], stream[(start + ctx) % stream.len()]);
        }
    }

    #[test]
    fn tokens_consumed_is_k_times_batch(k in 0u64..500) {
        let mut s = pack(&[synthetic_shard(5000, 4, 0).unwrap()], 16, 64, 1).unwrap();
        let consumed: usize = (0..k).map(|i| s.batch(i).tokens()).sum();
        prop_assert_eq!(consumed as u64, k * 64);
    }

    #[test]
    fn holdout_is_a_partition(seed in any::<u64>(), fraction in 0.05f64..0.95) {
        let shard = synthetic_shard(20_000, 4, 7).unwrap();
        let (train, test) = split_holdout(&shard, fraction, seed).unwrap();
        prop_assert_eq!(train.len() + test.len(), shard.len());
        let n = shard.documents().len();
        prop_assert_eq!(test.documents().len(), (n as f64 * fraction).round() as usize);
    }
}
