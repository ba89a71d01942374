use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Shuffled index batches for one epoch. The permutation depends only on
/// `(seed, epoch)`; the final partial batch is kept.
pub fn batch_indices(len: usize, batch_size: usize, seed: u64, epoch: u64) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..len).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch);
    order.shuffle(&mut rng);
    order.chunks(batch_size.max(1)).map(<[usize]>::to_vec).collect()
}

pub fn batch_iter<T>(split: &[T], batch_size: usize, seed: u64, epoch: u64) -> Vec<Vec<&T>> {
    batch_indices(split.len(), batch_size, seed, epoch)
        .into_iter()
        .map(|b| b.into_iter().map(|i| &split[i]).collect())
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sizes_keep_partial_batch() {
        let sizes: Vec<usize> = batch_indices(10, 4, 0, 0).iter().map(Vec::len).collect();
        assert_eq!(sizes, vec![4, 4, 2]);
    }

    #[test]
    fn order_keyed_by_seed_and_epoch() {
        assert_eq!(batch_indices(50, 8, 3, 1), batch_indices(50, 8, 3, 1));
        assert_ne!(batch_indices(50, 8, 3, 1), batch_indices(50, 8, 3, 2));
        assert_ne!(batch_indices(50, 8, 3, 1), batch_indices(50, 8, 4, 1));
    }

    #[test]
    fn every_item_exactly_once() {
        let items: Vec<u32> = (0..37).collect();
        let mut seen: Vec<u32> = batch_iter(&items, 5, 11, 4).into_iter().flatten().copied().collect();
        seen.sort_unstable();
        assert_eq!(seen, items);
    }
}
