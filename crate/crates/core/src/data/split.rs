//! Per-shopper stratified train/val/test assignment.

use log::warn;

use super::{DataError, Dataset, Split};
use crate::rng::keyed_hash;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SplitFractions {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl SplitFractions {
    pub fn new(train: f64, val: f64, test: f64) -> Result<Self, DataError> {
        let f = SplitFractions { train, val, test };
        let parts = [train, val, test];
        if parts.iter().any(|p| !(0.0..=1.0).contains(p))
            || (parts.iter().sum::<f64>() - 1.0).abs() > 1e-9
        {
            return Err(DataError::Config(format!(
                "split fractions must lie in [0, 1] and sum to 1, got ({train}, {val}, {test})"
            )));
        }
        Ok(f)
    }

    /// Floor each share of `n`, then hand the leftover outfits to the largest
    /// fractional remainders (train, then val, then test on ties).
    pub fn counts(&self, n: usize) -> [usize; 3] {
        let raw = [
            self.train * n as f64,
            self.val * n as f64,
            self.test * n as f64,
        ];
        let mut counts = raw.map(|x| (x + 1e-9).floor() as usize);
        let mut left = n.saturating_sub(counts.iter().sum());
        let mut order = [0usize, 1, 2];
        let frac = raw.map(|x| x - (x + 1e-9).floor());
        order.sort_by(|&a, &b| frac[b].partial_cmp(&frac[a]).unwrap().then(a.cmp(&b)));
        let mut k = 0;
        while left > 0 {
            counts[order[k % 3]] += 1;
            left -= 1;
            k += 1;
        }
        counts
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct SplitReport {
    /// Shoppers with fewer than three outfits, kept entirely in train.
    pub small_shoppers: Vec<String>,
}

/// Assigns every outfit to train, val or test, shopper by shopper.
///
/// Within a shopper the outfits are ordered by a seeded hash of their id and
/// cut by [`SplitFractions::counts`]; each shopper keeps at least one train
/// outfit so it has history at evaluation time.
pub fn split_dataset(ds: Dataset, fractions: SplitFractions, seed: u64) -> (Dataset, SplitReport) {
    let mut splits = vec![Split::Train; ds.outfits().len()];
    let mut report = SplitReport::default();
    for shopper in ds.shoppers() {
        let n = shopper.outfits.len();
        if n < 3 {
            warn!(
                "shopper {} has {n} outfits; assigning all to train",
                shopper.shopper_id
            );
            report.small_shoppers.push(shopper.shopper_id.clone());
            continue;
        }
        let mut order: Vec<(u64, &str, usize)> = shopper
            .outfits
            .iter()
            .map(|&o| {
                let id = ds.outfit(o).outfit_id.as_str();
                (keyed_hash(seed, id), id, o)
            })
            .collect();
        order.sort();
        let [mut n_train, mut n_val, n_test] = fractions.counts(n);
        if n_train == 0 {
            n_val = n_val.saturating_sub(1);
            n_train = 1;
        }
        for (k, &(_, _, o)) in order.iter().enumerate() {
            splits[o] = if k < n_train {
                Split::Train
            } else if k < n_train + n_val {
                Split::Val
            } else {
                Split::Test
            };
        }
        debug_assert!(n_train + n_val + n_test >= n);
    }
    (ds.with_splits(splits), report)
}

#[cfg(test)]
mod tests {
    use super::super::fixtures::*;
    use super::*;

    fn dataset(shoppers: &[(&str, usize)]) -> Dataset {
        let items = vec![item("a", "t", vec![1.0]), item("b", "s", vec![1.0])];
        let mut outfits = Vec::new();
        let mut recs = Vec::new();
        for (s, n) in shoppers {
            let ids: Vec<String> = (0..*n).map(|k| format!("{s}_o{k}")).collect();
            for id in &ids {
                outfits.push(outfit(id, s, &["a", "b"]));
            }
            let refs: Vec<&str> = ids.iter().map(String::as_str).collect();
            recs.push(shopper(s, &refs));
        }
        Dataset::from_records(items, outfits, recs, 20).unwrap()
    }

    #[test]
    fn floor_and_distribute_counts() {
        let f = SplitFractions::new(0.8, 0.1, 0.1).unwrap();
        assert_eq!(f.counts(20), [16, 2, 2]);
        // Enumerate small n and check the counts always sum to n and never
        // undershoot the floor.
        for n in 0..50 {
            let c = f.counts(n);
            assert_eq!(c.iter().sum::<usize>(), n);
            assert!(c[0] >= (0.8 * n as f64 + 1e-9).floor() as usize);
        }
        assert_eq!(
            SplitFractions::new(0.5, 0.25, 0.25).unwrap().counts(3),
            [1, 1, 1]
        );
        assert_eq!(
            SplitFractions::new(0.5, 0.25, 0.25).unwrap().counts(2),
            [1, 1, 0]
        );
    }

    #[test]
    fn fractions_must_sum_to_one() {
        assert!(SplitFractions::new(0.5, 0.5, 0.5).is_err());
    }

    #[test]
    fn all_train_fraction() {
        let ds = dataset(&[("s1", 5), ("s2", 4)]);
        let (ds, _) = split_dataset(ds, SplitFractions::new(1.0, 0.0, 0.0).unwrap(), 3);
        assert!(ds.splits().iter().all(|&s| s == Split::Train));
    }

    #[test]
    fn stratified_sixteen_two_two() {
        let ds = dataset(&[("s1", 20), ("s2", 20), ("s3", 20)]);
        let (ds, _) = split_dataset(ds, SplitFractions::new(0.8, 0.1, 0.1).unwrap(), 11);
        for s in 0..3 {
            assert_eq!(ds.shopper_outfits_in(s, Split::Train).len(), 16);
            assert_eq!(ds.shopper_outfits_in(s, Split::Val).len(), 2);
            assert_eq!(ds.shopper_outfits_in(s, Split::Test).len(), 2);
        }
    }

    #[test]
    fn same_seed_same_assignment_and_small_shoppers_stay_in_train() {
        let f = SplitFractions::new(0.6, 0.2, 0.2).unwrap();
        let (a, rep) = split_dataset(dataset(&[("s1", 10), ("s2", 2)]), f, 5);
        let (b, _) = split_dataset(dataset(&[("s1", 10), ("s2", 2)]), f, 5);
        assert_eq!(a.splits(), b.splits());
        assert_eq!(rep.small_shoppers, vec!["s2".to_string()]);
        assert_eq!(a.shopper_outfits_in(1, Split::Train).len(), 2);
        let (c, _) = split_dataset(dataset(&[("s1", 10), ("s2", 2)]), f, 6);
        assert_ne!(a.splits(), c.splits());
    }
}
