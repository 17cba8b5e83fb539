use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Index batches over `n` items. With shuffling on, the order depends only
/// on `(seed, epoch)`; the last partial batch is kept.
#[derive(Debug, Clone)]
pub struct Batches {
    order: Vec<usize>,
    batch_size: usize,
    cursor: usize,
}

impl Batches {
    pub fn new(n: usize, batch_size: usize, shuffle: bool, seed: u64, epoch: u64) -> Self {
        assert!(batch_size >= 1, "batch_size must be at least 1");
        let mut order: Vec<usize> = (0..n).collect();
        if shuffle {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(epoch);
            order.shuffle(&mut rng);
        }
        Batches {
            order,
            batch_size,
            cursor: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.order.len().div_ceil(self.batch_size)
    }

    pub fn is_empty(&self) -> bool {
        self.order.is_empty()
    }
}

impl Iterator for Batches {
    type Item = Vec<usize>;

    fn next(&mut self) -> Option<Vec<usize>> {
        if self.cursor >= self.order.len() {
            return None;
        }
        let end = (self.cursor + self.batch_size).min(self.order.len());
        let batch = self.order[self.cursor..end].to_vec();
        self.cursor = end;
        Some(batch)
    }
}

/// Batches of borrowed items.
pub fn batches<'a, T>(
    items: &'a [T],
    batch_size: usize,
    shuffle: bool,
    seed: u64,
    epoch: u64,
) -> impl Iterator<Item = Vec<&'a T>> + 'a {
    Batches::new(items.len(), batch_size, shuffle, seed, epoch)
        .map(move |idx| idx.into_iter().map(|i| &items[i]).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sizes_keep_partial_batch() {
        let sizes: Vec<usize> = Batches::new(10, 4, true, 1, 0).map(|b| b.len()).collect();
        assert_eq!(sizes, vec![4, 4, 2]);
        assert_eq!(Batches::new(10, 4, true, 1, 0).len(), 3);
    }

    #[test]
    fn shuffle_replays_by_seed_and_epoch() {
        let a: Vec<_> = Batches::new(50, 8, true, 9, 3).collect();
        let b: Vec<_> = Batches::new(50, 8, true, 9, 3).collect();
        assert_eq!(a, b);
        let c: Vec<_> = Batches::new(50, 8, true, 9, 4).collect();
        assert_ne!(a, c);
    }

    #[test]
    fn no_shuffle_preserves_order() {
        let items = ["a", "b", "c"];
        let flat: Vec<&&str> = batches(&items, 2, false, 0, 0).flatten().collect();
        assert_eq!(flat, vec![&"a", &"b", &"c"]);
    }

    #[test]
    fn empty_input_is_empty_stream() {
        assert_eq!(Batches::new(0, 4, true, 0, 0).count(), 0);
    }
}
