use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::DatasetIndex;
use crate::error::{Error, Result};

/// Stratified, disjoint, exhaustive image-level split.
///
/// Each image is stratified by the rarest class it contains (images without
/// annotations form their own stratum). The test quota `round(f * N)` is
/// apportioned across strata by largest remainder, so every stratum is within
/// one image of its proportional share. Strata with at least two images keep at
/// least one image on each side; singleton strata go to train with a warning.
pub fn split_train_test(ds: &DatasetIndex, test_fraction: f64, seed: u64) -> Result<(Vec<u64>, Vec<u64>)> {
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(Error::config(format!(
            "test_fraction must lie in (0, 1), got {test_fraction}"
        )));
    }
    let mut class_freq: BTreeMap<u32, usize> = BTreeMap::new();
    for a in &ds.annotations {
        *class_freq.entry(a.class_id).or_default() += 1;
    }
    let by_image = ds.annotations_by_image();
    let mut strata: BTreeMap<u32, Vec<u64>> = BTreeMap::new();
    for im in &ds.images {
        let key = by_image
            .get(&im.id)
            .and_then(|anns| {
                anns.iter()
                    .map(|a| a.class_id)
                    .min_by_key(|c| (class_freq[c], *c))
            })
            .unwrap_or(0);
        strata.entry(key).or_default().push(im.id);
    }

    let total = ds.images.len();
    let quota = (test_fraction * total as f64).round() as usize;
    let mut alloc: Vec<(u32, usize, f64)> = strata
        .iter()
        .map(|(k, ids)| {
            let exact = test_fraction * ids.len() as f64;
            (*k, exact.floor() as usize, exact - exact.floor())
        })
        .collect();
    let assigned: usize = alloc.iter().map(|a| a.1).sum();
    let mut order: Vec<usize> = (0..alloc.len()).collect();
    order.sort_by(|&i, &j| alloc[j].2.total_cmp(&alloc[i].2).then(i.cmp(&j)));
    for &i in order.iter().take(quota.saturating_sub(assigned)) {
        alloc[i].1 += 1;
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut train = Vec::new();
    let mut test = Vec::new();
    for (key, n_test, _) in alloc {
        let mut ids = strata[&key].clone();
        ids.sort_unstable();
        ids.shuffle(&mut rng);
        let n = ids.len();
        let n_test = if n == 1 {
            if key != 0 {
                log::warn!("class {key} has a single image; assigned to train");
            }
            0
        } else {
            n_test.clamp(1, n - 1)
        };
        test.extend_from_slice(&ids[..n_test]);
        train.extend_from_slice(&ids[n_test..]);
    }
    train.sort_unstable();
    test.sort_unstable();
    Ok((train, test))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{generate_synthetic, SyntheticSpec};

    fn single_class(images: usize, seed: u64) -> DatasetIndex {
        let mut spec = SyntheticSpec::confusable(6, 32, images, seed);
        spec.single_class_images = true;
        generate_synthetic(&spec).unwrap()
    }

    #[test]
    fn hundred_images_split_seventy_thirty_reproducibly() {
        let ds = single_class(100, 1);
        let (tr, te) = split_train_test(&ds, 0.3, 9).unwrap();
        assert_eq!((tr.len(), te.len()), (70, 30));
        assert_eq!(split_train_test(&ds, 0.3, 9).unwrap(), (tr.clone(), te.clone()));
        let mut all: Vec<u64> = tr.iter().chain(&te).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (1..=100).collect::<Vec<_>>());
    }

    #[test]
    fn two_images_one_class_split_evenly() {
        let mut spec = SyntheticSpec::confusable(2, 32, 2, 0);
        spec.single_class_images = true;
        let mut ds = generate_synthetic(&spec).unwrap();
        for a in &mut ds.annotations {
            a.class_id = 1;
        }
        let (tr, te) = split_train_test(&ds, 0.5, 0).unwrap();
        assert_eq!((tr.len(), te.len()), (1, 1));
    }

    #[test]
    fn singleton_class_goes_to_train() {
        let mut spec = SyntheticSpec::confusable(2, 32, 5, 0);
        spec.single_class_images = true;
        let mut ds = generate_synthetic(&spec).unwrap();
        for a in &mut ds.annotations {
            a.class_id = if a.image_id == 3 { 2 } else { 1 };
        }
        let (tr, te) = split_train_test(&ds, 0.4, 0).unwrap();
        assert!(tr.contains(&3));
        assert!(!te.contains(&3));
    }

    #[test]
    fn per_class_test_share_is_within_one_image() {
        for seed in 0..5 {
            let ds = single_class(137, seed);
            let f = 0.3;
            let (_, te) = split_train_test(&ds, f, seed).unwrap();
            let by_image = ds.annotations_by_image();
            for c in ds.class_ids() {
                let with_c: Vec<u64> = ds
                    .images
                    .iter()
                    .filter(|im| by_image.get(&im.id).is_some_and(|v| v.iter().any(|a| a.class_id == c)))
                    .map(|im| im.id)
                    .collect();
                let in_test = with_c.iter().filter(|id| te.contains(id)).count();
                let expected = f * with_c.len() as f64;
                assert!(
                    (in_test as f64 - expected).abs() <= 1.0,
                    "class {c}: {in_test} vs {expected}"
                );
            }
        }
    }

    #[test]
    fn fraction_must_be_open_unit_interval() {
        let ds = single_class(4, 0);
        assert!(split_train_test(&ds, 0.0, 0).is_err());
        assert!(split_train_test(&ds, 1.0, 0).is_err());
    }
}
