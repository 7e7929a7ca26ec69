//! Quadrant-stratified train/val/test splitting of labeled cells.

use std::collections::BTreeSet;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{GridError, GridSpec};

/// Disjoint location sets; together they cover the input label cells.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Splits {
    pub train: BTreeSet<(usize, usize)>,
    pub val: BTreeSet<(usize, usize)>,
    pub test: BTreeSet<(usize, usize)>,
}

impl Splits {
    pub fn contains(&self, cell: &(usize, usize)) -> bool {
        self.train.contains(cell) || self.val.contains(cell) || self.test.contains(cell)
    }
}

/// Assigns labeled cells to train/val/test at 60/20/20 within each quadrant,
/// keeping the spatial distribution of sensors in every subset.
///
/// Quadrants are the four index blocks split at `H/2` and `W/2` (integer
/// division). Within a quadrant the cells are shuffled with a seeded
/// generator and the first `⌊0.6n⌋` go to train, the next `⌊0.2n⌋` to val,
/// and the remainder to test.
pub fn split_locations(
    label_cells: &BTreeSet<(usize, usize)>,
    spec: &GridSpec,
    seed: u64,
) -> Result<Splits, GridError> {
    if label_cells.is_empty() {
        return Err(GridError::EmptyLabelSet);
    }
    let (half_h, half_w) = (spec.height / 2, spec.width / 2);
    let mut quadrants: [Vec<(usize, usize)>; 4] = Default::default();
    for &(r, c) in label_cells {
        let q = usize::from(r >= half_h) * 2 + usize::from(c >= half_w);
        quadrants[q].push((r, c));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut splits = Splits {
        train: BTreeSet::new(),
        val: BTreeSet::new(),
        test: BTreeSet::new(),
    };
    for cells in &mut quadrants {
        // BTreeSet iteration gives row-major order, so the shuffle input is canonical
        fisher_yates(cells, &mut rng);
        let n = cells.len();
        let n_train = (0.6 * n as f64).floor() as usize;
        let n_val = (0.2 * n as f64).floor() as usize;
        for (i, cell) in cells.iter().enumerate() {
            if i < n_train {
                splits.train.insert(*cell);
            } else if i < n_train + n_val {
                splits.val.insert(*cell);
            } else {
                splits.test.insert(*cell);
            }
        }
    }
    Ok(splits)
}

fn fisher_yates<T>(items: &mut [T], rng: &mut ChaCha8Rng) {
    for i in (1..items.len()).rev() {
        let j = rng.gen_range(0..=i);
        items.swap(i, j);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn spec(h: usize, w: usize) -> GridSpec {
        GridSpec::new((0.0, 0.0), 1.0, h, w).unwrap()
    }

    #[test]
    fn ten_cells_in_one_quadrant_split_six_two_two() {
        let cells: BTreeSet<_> = (0..10).map(|i| (i / 4, i % 4)).collect();
        let splits = split_locations(&cells, &spec(10, 10), 0).unwrap();
        assert_eq!(splits.train.len(), 6);
        assert_eq!(splits.val.len(), 2);
        assert_eq!(splits.test.len(), 2);
    }

    #[test]
    fn same_seed_gives_identical_partitions() {
        let cells: BTreeSet<_> = (0..8).flat_map(|r| (0..8).map(move |c| (r, c))).collect();
        let a = split_locations(&cells, &spec(8, 8), 42).unwrap();
        let b = split_locations(&cells, &spec(8, 8), 42).unwrap();
        assert_eq!(a, b);
        let c = split_locations(&cells, &spec(8, 8), 43).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn five_cells_per_quadrant_split_three_one_one_each() {
        let mut cells = BTreeSet::new();
        for (r0, c0) in [(0, 0), (0, 5), (5, 0), (5, 5)] {
            for i in 0..5 {
                cells.insert((r0 + i / 3, c0 + i % 3));
            }
        }
        let splits = split_locations(&cells, &spec(10, 10), 7).unwrap();
        assert_eq!(splits.train.len(), 12);
        assert_eq!(splits.val.len(), 4);
        assert_eq!(splits.test.len(), 4);
        // per-quadrant counts are 3/1/1
        for (r0, c0) in [(0usize, 0usize), (0, 5), (5, 0), (5, 5)] {
            let in_q = |s: &BTreeSet<(usize, usize)>| {
                s.iter()
                    .filter(|(r, c)| (*r >= 5) == (r0 >= 5) && (*c >= 5) == (c0 >= 5))
                    .count()
            };
            assert_eq!(in_q(&splits.train), 3);
            assert_eq!(in_q(&splits.val), 1);
            assert_eq!(in_q(&splits.test), 1);
        }
    }

    #[test]
    fn empty_label_set_is_an_error() {
        let err = split_locations(&BTreeSet::new(), &spec(4, 4), 0).unwrap_err();
        assert!(matches!(err, GridError::EmptyLabelSet));
    }

    proptest! {
        #[test]
        fn splits_partition_the_input(seed in 0u64..500, n in 1usize..60) {
            let cells: BTreeSet<_> = (0..n).map(|i| (i / 8, i % 8)).collect();
            let splits = split_locations(&cells, &spec(8, 8), seed).unwrap();
            prop_assert!(splits.train.is_disjoint(&splits.val));
            prop_assert!(splits.train.is_disjoint(&splits.test));
            prop_assert!(splits.val.is_disjoint(&splits.test));
            let union: BTreeSet<_> = splits
                .train
                .iter()
                .chain(&splits.val)
                .chain(&splits.test)
                .cloned()
                .collect();
            prop_assert_eq!(union, cells);
        }
    }
}
