use alloc::vec::Vec;

use crate::error::{invalid, Result};
use crate::rng::SplitMix64;

/// Index batches over `0..n`. With `shuffle`, the order is a Fisher–Yates
/// permutation driven by `splitmix64(epoch_seed)` (`j = next() % (i + 1)` for
/// `i` from `n-1` down to 1). The last batch may be short.
pub fn batch_iter(n: usize, batch_size: usize, epoch_seed: u64, shuffle: bool) -> Result<Vec<Vec<usize>>> {
    if batch_size == 0 {
        return Err(invalid("batch size must be positive"));
    }
    if batch_size > n {
        return Err(invalid("batch size exceeds dataset size"));
    }
    let mut order: Vec<usize> = (0..n).collect();
    if shuffle {
        let mut rng = SplitMix64::new(epoch_seed);
        for i in (1..n).rev() {
            let j = (rng.next_u64() % (i as u64 + 1)) as usize;
            order.swap(i, j);
        }
    }
    Ok(order.chunks(batch_size).map(|c| c.to_vec()).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    #[test]
    fn sequential_partition_keeps_short_tail() {
        let b = batch_iter(10, 4, 0, false).unwrap();
        assert_eq!(b, vec![vec![0, 1, 2, 3], vec![4, 5, 6, 7], vec![8, 9]]);
    }

    #[test]
    fn rejects_bad_sizes() {
        assert!(batch_iter(10, 0, 0, false).is_err());
        assert!(batch_iter(10, 11, 0, false).is_err());
    }

    #[test]
    fn shuffle_is_seeded() {
        assert_eq!(
            batch_iter(50, 7, 3, true).unwrap(),
            batch_iter(50, 7, 3, true).unwrap()
        );
        assert_ne!(
            batch_iter(50, 7, 3, true).unwrap(),
            batch_iter(50, 7, 4, true).unwrap()
        );
    }
}
