//! Stratified train/validation splitting.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::label::DamageLabel;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub train_ids: Vec<String>,
    pub val_ids: Vec<String>,
    pub ratio: (u32, u32),
    pub seed: u64,
}

impl DatasetSplit {
    pub fn is_train(&self, id: &str) -> bool {
        self.train_ids.binary_search_by(|x| x.as_str().cmp(id)).is_ok()
    }
}

/// Parse `"8:2"` style ratios.
pub fn parse_ratio(s: &str) -> Result<(u32, u32)> {
    let (a, b) = s
        .split_once(':')
        .ok_or_else(|| Error::Invalid(format!("ratio `{s}` is not of the form a:b")))?;
    let parse = |t: &str| {
        t.trim()
            .parse::<u32>()
            .map_err(|_| Error::Invalid(format!("ratio component `{t}` is not a positive integer")))
    };
    let r = (parse(a)?, parse(b)?);
    if r.0 == 0 || r.1 == 0 {
        return Err(Error::Invalid(format!("ratio `{s}` has a zero component")));
    }
    Ok(r)
}

/// Train count for a class of `n` items under largest-remainder rounding of
/// the two quotas; an exact tie sends the extra item to validation.
pub fn train_quota(n: usize, ratio: (u32, u32)) -> usize {
    let (a, b) = (ratio.0 as u128, ratio.1 as u128);
    let total = a + b;
    let n = n as u128;
    let (train_floor, train_rem) = ((n * a) / total, (n * a) % total);
    let (val_floor, val_rem) = ((n * b) / total, (n * b) % total);
    let leftover = n - train_floor - val_floor;
    let extra = if leftover > 0 && train_rem > val_rem { 1 } else { 0 };
    (train_floor + extra) as usize
}

/// Stratify `pairs` by label and split each class by `ratio`.
///
/// Input order does not matter: items are sorted by id before a seeded
/// per-class shuffle. Returns the split and any warnings.
pub fn split_dataset(
    pairs: &[(String, DamageLabel)],
    ratio: (u32, u32),
    seed: u64,
) -> Result<(DatasetSplit, Vec<String>)> {
    if ratio.0 == 0 || ratio.1 == 0 {
        return Err(Error::Invalid(format!("ratio {}:{} has a zero component", ratio.0, ratio.1)));
    }
    let mut seen = BTreeSet::new();
    let mut by_class: BTreeMap<DamageLabel, Vec<&str>> = BTreeMap::new();
    for (id, label) in pairs {
        if !seen.insert(id.as_str()) {
            return Err(Error::Invalid(format!("duplicate pair id `{id}` in split input")));
        }
        by_class.entry(*label).or_default().push(id);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut warnings = Vec::new();
    let mut train = Vec::new();
    let mut val = Vec::new();
    for (label, mut ids) in by_class {
        ids.sort_unstable();
        if ids.len() < 2 {
            let msg = format!("class {label} has {} sample(s), fewer than 2 split parts; all placed in train", ids.len());
            log::warn!("{msg}");
            warnings.push(msg);
            train.extend(ids.iter().map(|s| s.to_string()));
            continue;
        }
        ids.shuffle(&mut rng);
        let k = train_quota(ids.len(), ratio);
        train.extend(ids[..k].iter().map(|s| s.to_string()));
        val.extend(ids[k..].iter().map(|s| s.to_string()));
    }
    train.sort();
    val.sort();
    Ok((
        DatasetSplit {
            train_ids: train,
            val_ids: val,
            ratio,
            seed,
        },
        warnings,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn labeled(counts: &[usize]) -> Vec<(String, DamageLabel)> {
        let mut out = Vec::new();
        for (c, &n) in counts.iter().enumerate() {
            for i in 0..n {
                out.push((format!("c{c}-{i:05}"), DamageLabel::from_index(c).unwrap()));
            }
        }
        out
    }

    #[test]
    fn exact_division() {
        let (s, w) = split_dataset(&labeled(&[10]), (8, 2), 1).unwrap();
        assert_eq!((s.train_ids.len(), s.val_ids.len()), (8, 2));
        assert!(w.is_empty());
    }

    #[test]
    fn largest_remainder_fixture() {
        assert_eq!(train_quota(555, (8, 2)), 444);
        assert_eq!(train_quota(1088, (8, 2)), 870);
        assert_eq!(train_quota(606, (8, 2)), 485);
        let (s, _) = split_dataset(&labeled(&[555, 1088, 606]), (8, 2), 3).unwrap();
        for (c, want) in [(0, 444), (1, 870), (2, 485)] {
            let got = s.train_ids.iter().filter(|id| id.starts_with(&format!("c{c}-"))).count();
            assert_eq!(got, want);
        }
    }

    #[test]
    fn tie_goes_to_validation() {
        // 5 items at 1:1: quotas 2.5 / 2.5.
        assert_eq!(train_quota(5, (1, 1)), 2);
    }

    #[test]
    fn singleton_class_goes_to_train_with_warning() {
        let (s, w) = split_dataset(&labeled(&[5, 1]), (8, 2), 0).unwrap();
        assert!(s.train_ids.contains(&"c1-00000".to_string()));
        assert_eq!(w.len(), 1);
    }

    #[test]
    fn seeds_change_membership() {
        let items = labeled(&[12, 10]);
        let base = split_dataset(&items, (8, 2), 0).unwrap().0;
        assert!((1..20).any(|s| split_dataset(&items, (8, 2), s).unwrap().0.val_ids != base.val_ids));
    }

    #[test]
    fn ratio_parsing() {
        assert_eq!(parse_ratio("8:2").unwrap(), (8, 2));
        assert!(parse_ratio("8:0").is_err());
        assert!(parse_ratio("82").is_err());
    }

    proptest! {
        #[test]
        fn partition_and_stratification(counts in proptest::collection::vec(0usize..40, 1..4), a in 1u32..10, b in 1u32..10, seed in 0u64..1000) {
            let items = labeled(&counts);
            let (s, _) = split_dataset(&items, (a, b), seed).unwrap();
            let mut shuffled = items.clone();
            shuffled.reverse();
            prop_assert_eq!(&split_dataset(&shuffled, (a, b), seed).unwrap().0, &s);
            let train: BTreeSet<_> = s.train_ids.iter().collect();
            let val: BTreeSet<_> = s.val_ids.iter().collect();
            prop_assert!(train.is_disjoint(&val));
            prop_assert_eq!(train.len() + val.len(), items.len());
            for (c, &n) in counts.iter().enumerate() {
                if n < 2 { continue; }
                let t = s.train_ids.iter().filter(|id| id.starts_with(&format!("c{c}-"))).count() as f64;
                let expect = n as f64 * a as f64 / (a + b) as f64;
                prop_assert!((t - expect).abs() <= 1.0);
            }
        }
    }
}
