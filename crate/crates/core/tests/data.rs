//! Synthetic generator, dataset directories and the Poisson sampler.

use std::fs;

use dpmae::data::{
    generate_synthetic, image_file_name, labeled_images, load_dataset, poisson_sample, synthetic_images, DataError,
    Role,
};

fn correlation(a: &[u8], b: &[u8]) -> f64 {
    let n = a.len() as f64;
    let ma = a.iter().map(|&v| v as f64).sum::<f64>() / n;
    let mb = b.iter().map(|&v| v as f64).sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (&x, &y) in a.iter().zip(b) {
        let (dx, dy) = (x as f64 - ma, y as f64 - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    if saa == 0.0 || sbb == 0.0 {
        return 0.0;
    }
    sab / (saa * sbb).sqrt()
}

#[test]
fn synthetic_images_are_diverse() {
    let set = synthetic_images(100, 32, 0).unwrap();
    let mut total = 0.0;
    let mut pairs = 0;
    for i in 0..100 {
        for j in i + 1..100 {
            total += correlation(set.image_bytes(i), set.image_bytes(j));
            pairs += 1;
        }
    }
    let mean = total / pairs as f64;
    assert!(mean < 0.5, "mean pairwise correlation {mean}");
    let distinct: std::collections::HashSet<&[u8]> = (0..100).map(|i| set.image_bytes(i)).collect();
    assert_eq!(distinct.len(), 100);
}

#[test]
fn generation_is_deterministic() {
    assert_eq!(synthetic_images(20, 16, 5).unwrap(), synthetic_images(20, 16, 5).unwrap());
    assert_ne!(synthetic_images(20, 16, 5).unwrap().digest(), synthetic_images(20, 16, 6).unwrap().digest());
    // image i does not depend on how many images are generated
    let small = synthetic_images(3, 16, 5).unwrap();
    let big = synthetic_images(20, 16, 5).unwrap();
    assert_eq!(small.image_bytes(2), big.image_bytes(2));
    assert_eq!(labeled_images(12, 16, 1, 4).unwrap(), labeled_images(12, 16, 1, 4).unwrap());
}

#[test]
fn bad_generation_arguments() {
    assert!(matches!(synthetic_images(0, 32, 0), Err(DataError::InvalidArgument(_))));
    assert!(matches!(synthetic_images(3, 0, 0), Err(DataError::InvalidArgument(_))));
    assert!(labeled_images(10, 16, 0, 1).is_err());
    assert!(labeled_images(10, 16, 0, 11).is_err());
}

#[test]
fn directory_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().join("ds");
    let written = generate_synthetic(&root, 7, 16, 3, Role::PrivateTrain).unwrap();
    let (manifest, set) = load_dataset(&root).unwrap();
    assert_eq!(manifest, written);
    assert_eq!(manifest.n, 7);
    assert_eq!(manifest.role, Role::PrivateTrain);
    assert_eq!(set, synthetic_images(7, 16, 3).unwrap());

    let labeled = labeled_images(6, 16, 2, 3).unwrap();
    let lroot = dir.path().join("labeled");
    labeled.write(&lroot, Role::Eval).unwrap();
    let (m, back) = load_dataset(&lroot).unwrap();
    assert_eq!(m.labels.as_deref(), Some(&[0, 1, 2, 0, 1, 2][..]));
    assert_eq!(back, labeled);
}

#[test]
fn changed_byte_breaks_digest() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().join("ds");
    generate_synthetic(&root, 4, 8, 1, Role::SyntheticPretrain).unwrap();
    let path = root.join(image_file_name(2));
    let mut bytes = fs::read(&path).unwrap();
    let last = bytes.len() - 1;
    bytes[last] ^= 1;
    fs::write(&path, bytes).unwrap();
    let err = load_dataset(&root).unwrap_err();
    assert!(err.to_string().contains("digest"), "{err}");
}

#[test]
fn empty_or_inconsistent_directories() {
    let dir = tempfile::tempdir().unwrap();
    assert!(matches!(load_dataset(dir.path()), Err(DataError::Io { .. })));

    let root = dir.path().join("ds");
    generate_synthetic(&root, 3, 8, 1, Role::SyntheticPretrain).unwrap();
    fs::copy(root.join(image_file_name(0)), root.join(image_file_name(3))).unwrap();
    assert!(matches!(load_dataset(&root), Err(DataError::Manifest(_))));
    fs::remove_file(root.join(image_file_name(3))).unwrap();
    fs::remove_file(root.join(image_file_name(1))).unwrap();
    assert!(matches!(load_dataset(&root), Err(DataError::Io { .. })));
}

#[test]
fn fetch_and_subset() {
    let set = labeled_images(8, 8, 0, 4).unwrap();
    let batch = set.fetch(&[3, 3, 0]).unwrap();
    assert_eq!(batch.shape(), &[3, 3, 8, 8]);
    assert_eq!(batch.index_outer(0), batch.index_outer(1));
    assert!(set.fetch(&[8]).is_err());
    let sub = set.subset(&[5, 1]).unwrap();
    assert_eq!(sub.labels(), Some(&[1, 1][..]));
    assert_eq!(sub.image_bytes(0), set.image_bytes(5));
}

#[test]
fn poisson_batch_size_mean() {
    let (n, q, steps) = (10_000usize, 0.1, 1_000u64);
    let total: usize = (0..steps).map(|t| poisson_sample(n, q, 42, t).unwrap().len()).sum();
    let mean = total as f64 / steps as f64;
    let sd_of_mean = (n as f64 * q * (1.0 - q) / steps as f64).sqrt();
    let z = (mean - n as f64 * q) / sd_of_mean;
    assert!(z.abs() < 3.0, "mean batch {mean}, z = {z}");
}

#[test]
fn poisson_inclusions_are_independent() {
    // 2x2 contingency of (i in step t, i in step t+1) and of
    // (i in step t, i+1 in step t); chi-square with one degree of freedom
    let (n, q, steps) = (2_000usize, 0.3, 200u64);
    let member = |t: u64| {
        let mut m = vec![false; n];
        for i in poisson_sample(n, q, 7, t).unwrap() {
            m[i] = true;
        }
        m
    };
    let rows: Vec<Vec<bool>> = (0..=steps).map(member).collect();
    let chi2 = |pairs: &mut dyn Iterator<Item = (bool, bool)>| {
        let mut c = [[0f64; 2]; 2];
        for (a, b) in pairs {
            c[a as usize][b as usize] += 1.0;
        }
        let total: f64 = c.iter().flatten().sum();
        let mut stat = 0.0;
        for a in 0..2 {
            for b in 0..2 {
                let expected = (c[a][0] + c[a][1]) * (c[0][b] + c[1][b]) / total;
                stat += (c[a][b] - expected).powi(2) / expected;
            }
        }
        stat
    };
    let across_steps = chi2(&mut (0..steps as usize).flat_map(|t| {
        let (r, s) = (&rows[t], &rows[t + 1]);
        (0..n).map(move |i| (r[i], s[i]))
    }));
    let across_indices = chi2(&mut rows.iter().flat_map(|r| (0..n - 1).map(move |i| (r[i], r[i + 1]))));
    // 10.83 is the 0.999 quantile
    assert!(across_steps < 10.83, "steps chi2 {across_steps}");
    assert!(across_indices < 10.83, "indices chi2 {across_indices}");
}
