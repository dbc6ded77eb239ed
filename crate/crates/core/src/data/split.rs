use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{DataError, TokenShard};

/// Document-level holdout: `round(n_docs * fraction)` documents, chosen by
/// a seeded shuffle, go to the test side. Both sides keep corpus order.
pub fn split_holdout(shard: &TokenShard, fraction: f64, seed: u64) -> Result<(TokenShard, TokenShard), DataError> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(DataError::Config(format!("holdout fraction {fraction} not in (0, 1)")));
    }
    let docs = shard.documents();
    let n = docs.len();
    let n_test = (n as f64 * fraction).round() as usize;
    if n_test == 0 || n_test == n {
        return Err(DataError::Config(format!(
            "holdout fraction {fraction} of {n} documents leaves one side empty"
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut is_test = vec![false; n];
    for &i in &order[..n_test] {
        is_test[i] = true;
    }
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for (doc, &t) in docs.iter().zip(&is_test) {
        let side = if t { &mut test } else { &mut train };
        side.extend_from_slice(&shard.tokens()[doc.clone()]);
    }
    Ok((
        TokenShard::new(shard.header.clone(), train)?,
        TokenShard::new(shard.header.clone(), test)?,
    ))
}
