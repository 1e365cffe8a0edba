use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{DataError, Result};

/// Patient-level split into `(train, test)`.
///
/// `round(ratio · n)` items go to train, clamped so both sides are nonempty.
/// Both halves keep the input order.
pub fn split_train_test<T: Clone>(data: &[T], ratio: f64, seed: u64) -> Result<(Vec<T>, Vec<T>)> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(DataError::InvalidRatio(ratio));
    }
    let n = data.len();
    if n < 2 {
        return Err(DataError::TooFewPatients(n));
    }
    let n_train = ((ratio * n as f64).round() as usize).clamp(1, n - 1);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut in_train = vec![false; n];
    for &i in &order[..n_train] {
        in_train[i] = true;
    }
    let mut train = Vec::with_capacity(n_train);
    let mut test = Vec::with_capacity(n - n_train);
    for (item, &flag) in data.iter().zip(&in_train) {
        if flag {
            train.push(item.clone());
        } else {
            test.push(item.clone());
        }
    }
    Ok((train, test))
}
