mod common;

use flatgrad_core::data::{
    sha256_hex, split_train_val, Dataset, SplitTag, CANONICAL_FILES, TRAIN_SIZE, VAL_SIZE,
};
use std::collections::HashSet;

#[test]
fn canonical_files_match_their_checksums() {
    let Some(dir) = common::mnist_dir() else {
        return;
    };
    for (name, want) in CANONICAL_FILES {
        let bytes = std::fs::read(dir.join(name)).unwrap();
        assert_eq!(sha256_hex(&bytes), want, "{name}");
    }
}

#[test]
fn canonical_sets_have_the_expected_shapes() {
    let Some(dir) = common::mnist_dir() else {
        return;
    };
    let train = Dataset::load_mnist(&dir, true).unwrap();
    let test = Dataset::load_mnist(&dir, false).unwrap();
    assert_eq!(train.images().shape(), &[60_000, 1, 28, 28]);
    assert_eq!(test.images().shape(), &[10_000, 1, 28, 28]);
    assert_eq!(
        (train.tag(), test.tag()),
        (SplitTag::Full60000, SplitTag::Test10000)
    );
    for d in [&train, &test] {
        assert!(d.labels().iter().all(|&l| l < 10));
        assert!(d.images().data().iter().all(|&p| (0.0..=1.0).contains(&p)));
        // every pixel is a byte over 255
        assert!(d.images().data()[..784 * 50]
            .iter()
            .all(|&p| (p * 255.0).round() / 255.0 == p));
    }
    // first test labels of the canonical file
    assert_eq!(&test.labels()[..10], &[7, 2, 1, 0, 4, 1, 4, 9, 5, 9]);
    assert_eq!(&train.labels()[..5], &[5, 0, 4, 1, 9]);
}

#[test]
fn seeded_split_partitions_the_training_file() {
    let Some(dir) = common::mnist_dir() else {
        return;
    };
    let full = Dataset::load_mnist(&dir, true).unwrap();
    let (a_train, a_val) = split_train_val(&full, 7).unwrap();
    let (b_train, b_val) = split_train_val(&full, 7).unwrap();
    let (c_train, _) = split_train_val(&full, 8).unwrap();
    assert_eq!((a_train.len(), a_val.len()), (TRAIN_SIZE, VAL_SIZE));
    assert_eq!(a_train.images().data(), b_train.images().data());
    assert_eq!(a_val.labels(), b_val.labels());
    assert_ne!(a_train.labels()[..100], c_train.labels()[..100]);

    // images are distinct enough to identify rows; check train ∪ val covers 60000 rows by label histogram
    let hist = |ls: &[usize]| {
        ls.iter().fold([0usize; 10], |mut h, &l| {
            h[l] += 1;
            h
        })
    };
    let (ht, hv, hf) = (
        hist(a_train.labels()),
        hist(a_val.labels()),
        hist(full.labels()),
    );
    for k in 0..10 {
        assert_eq!(ht[k] + hv[k], hf[k]);
    }
    let rows = |d: &Dataset| -> HashSet<Vec<u64>> {
        d.images()
            .data()
            .chunks(784)
            .take(2000)
            .map(|r| r.iter().map(|v| v.to_bits()).collect())
            .collect()
    };
    let val_rows = rows(&a_val);
    let overlap = rows(&a_train).intersection(&val_rows).count();
    // MNIST holds a handful of exact duplicate images; a real overlap would be in the hundreds
    assert!(overlap < 5, "{overlap} shared rows");
}
