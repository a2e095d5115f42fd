//! Packing utterances into batches by total duration.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Default per-batch audio budget in seconds.
pub const MAX_BATCH_SECONDS: f64 = 120.0;

/// Shuffles utterance indices with `seed`, then packs them greedily in that
/// order: an utterance joins the current batch if the batch stays within
/// `max_seconds`, otherwise it opens a new batch.
pub fn make_batches(durations: &[f64], max_seconds: f64, seed: u64) -> Result<Vec<Vec<usize>>> {
    if let Some((index, &seconds)) = durations.iter().enumerate().find(|(_, &d)| d > max_seconds) {
        return Err(Error::OversizedUtterance {
            index,
            seconds,
            max_seconds,
        });
    }
    let mut order: Vec<usize> = (0..durations.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut batches = Vec::new();
    let mut current = Vec::new();
    let mut total = 0.0;
    for i in order {
        if !current.is_empty() && total + durations[i] > max_seconds {
            batches.push(std::mem::take(&mut current));
            total = 0.0;
        }
        current.push(i);
        total += durations[i];
    }
    if !current.is_empty() {
        batches.push(current);
    }
    Ok(batches)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn greedy_packing() {
        let b = make_batches(&[60.0, 60.0, 60.0], 120.0, 0).unwrap();
        let sizes: Vec<usize> = b.iter().map(Vec::len).collect();
        assert_eq!(sizes, [2, 1]);
    }

    #[test]
    fn oversized_is_an_error() {
        assert!(matches!(
            make_batches(&[121.0, 121.0], 120.0, 0),
            Err(Error::OversizedUtterance { index: 0, .. })
        ));
    }

    #[test]
    fn empty_dataset_gives_no_batches() {
        assert!(make_batches(&[], 120.0, 0).unwrap().is_empty());
    }
}
