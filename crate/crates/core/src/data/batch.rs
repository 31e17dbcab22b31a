//! Seeded epoch batching.

use alloc::vec::Vec;

use crate::rng::Rng;

/// Split a seed-determined permutation of `0..n_items` into batches.
/// The final partial batch is kept unless `drop_last`.
pub fn epoch_batches(
    n_items: usize,
    batch_size: usize,
    rng: &mut Rng,
    drop_last: bool,
) -> Vec<Vec<usize>> {
    debug_assert!(batch_size >= 1);
    let perm = rng.permutation(n_items);
    let mut batches: Vec<Vec<usize>> = perm
        .chunks(batch_size)
        .map(|chunk| chunk.to_vec())
        .collect();
    if drop_last {
        if let Some(last) = batches.last() {
            if last.len() < batch_size {
                batches.pop();
            }
        }
    }
    batches
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn batch_count_with_kept_remainder() {
        let mut rng = Rng::new(0);
        let batches = epoch_batches(11_439, 256, &mut rng, false);
        assert_eq!(batches.len(), 45);
        assert!(batches[..44].iter().all(|b| b.len() == 256));
        assert_eq!(batches[44].len(), 175);
    }

    #[test]
    fn same_seed_same_order() {
        let a = epoch_batches(100, 7, &mut Rng::new(3), false);
        let b = epoch_batches(100, 7, &mut Rng::new(3), false);
        assert_eq!(a, b);
    }

    #[test]
    fn yielded_indices_are_a_bijection() {
        let batches = epoch_batches(257, 16, &mut Rng::new(5), false);
        let mut all: Vec<usize> = batches.into_iter().flatten().collect();
        all.sort_unstable();
        assert_eq!(all, (0..257).collect::<Vec<_>>());
    }

    #[test]
    fn drop_last_removes_partial_batch() {
        let batches = epoch_batches(10, 4, &mut Rng::new(1), true);
        assert_eq!(batches.len(), 2);
        assert!(batches.iter().all(|b| b.len() == 4));
    }
}
