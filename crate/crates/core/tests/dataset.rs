use proptest::prelude::*;

use tailreg_core::dataset::{
    class_scale_report, generate, partition_by_frequency, DatasetConfig, FreqGroup,
    FrequencyPartition, FrequencyThresholds, Split, SyntheticDataset,
};
use tailreg_core::digest::sha256_hex;

/// Least squares by normal equations and Gauss-Jordan elimination with
/// partial pivoting. `rows` are design rows, `ys` the matching targets.
fn lstsq(rows: &[Vec<f64>], ys: &[f64]) -> Vec<f64> {
    let n = rows[0].len();
    let mut a = vec![vec![0.0; n + 1]; n];
    for (r, &y) in rows.iter().zip(ys) {
        for i in 0..n {
            for j in 0..n {
                a[i][j] += r[i] * r[j];
            }
            a[i][n] += r[i] * y;
        }
    }
    for col in 0..n {
        let piv = (col..n)
            .max_by(|&x, &y| a[x][col].abs().total_cmp(&a[y][col].abs()))
            .unwrap();
        a.swap(col, piv);
        let p = a[col][col];
        for v in a[col].iter_mut() {
            *v /= p;
        }
        for r in 0..n {
            if r != col {
                let f = a[r][col];
                for c in 0..=n {
                    a[r][c] -= f * a[col][c];
                }
            }
        }
    }
    a.iter().map(|row| row[n]).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[test]
fn regeneration_is_byte_identical() {
    let cfg = DatasetConfig::lt60(7);
    let a = generate(&cfg).unwrap().to_jsonl().unwrap();
    let b = generate(&cfg).unwrap().to_jsonl().unwrap();
    assert_eq!(sha256_hex(a.as_bytes()), sha256_hex(b.as_bytes()));
    let other = generate(&DatasetConfig::lt60(8))
        .unwrap()
        .to_jsonl()
        .unwrap();
    assert_ne!(a, other);
}

#[test]
fn saved_dataset_reloads_identically() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("d.jsonl");
    let ds = generate(&DatasetConfig::lt60(3)).unwrap();
    let digest = ds.save(&path).unwrap();
    let back = SyntheticDataset::load(&path).unwrap();
    assert_eq!(back, ds);
    assert_eq!(sha256_hex(&std::fs::read(&path).unwrap()), digest);
}

#[test]
fn train_image_counts_follow_the_power_law() {
    let ds = generate(&DatasetConfig::lt60(7)).unwrap();
    let counts = ds.class_image_counts(Split::Train);
    assert!(counts[0] >= counts[59]);
    assert!(counts.windows(2).all(|w| w[0] >= w[1]), "{counts:?}");
    let sizes = partition_by_frequency(&ds, FrequencyThresholds::default()).sizes();
    assert!(FreqGroup::ALL.iter().all(|g| sizes[g] > 0), "{sizes:?}");
}

#[test]
fn shared_noise_free_features_are_exactly_linear() {
    let cfg = DatasetConfig {
        shared_map_weight: 1.0,
        noise_sigma: 0.0,
        ..DatasetConfig::lt60(4)
    };
    let ds = generate(&cfg).unwrap();
    let items = &ds.train;
    // feature_i = m_i . t + b_i with one (m_i, b_i) for all classes
    let design: Vec<Vec<f64>> = items
        .iter()
        .map(|x| {
            let mut r = x.target_delta.to_array().to_vec();
            r.push(1.0);
            r
        })
        .collect();
    let mut maps = Vec::new();
    for i in 0..cfg.feature_dim {
        let ys: Vec<f64> = items.iter().map(|x| x.feature[i]).collect();
        let coef = lstsq(&design, &ys);
        let worst = design
            .iter()
            .zip(&ys)
            .map(|(r, y)| (dot(r, &coef) - y).abs())
            .fold(0.0, f64::max);
        assert!(worst < 1e-8, "feature {i}: residual {worst:e}");
        maps.push(coef);
    }
    // invert the fitted map: t = (M^T M)^-1 M^T (f - b), recovered for every class
    let m_rows: Vec<Vec<f64>> = maps.iter().map(|c| c[..4].to_vec()).collect();
    for x in items.iter().chain(&ds.val) {
        let centered: Vec<f64> = x.feature.iter().zip(&maps).map(|(f, c)| f - c[4]).collect();
        let t = lstsq(&m_rows, &centered);
        let target = x.target_delta.to_array();
        for k in 0..4 {
            assert!(
                (t[k] - target[k]).abs() < 1e-8,
                "class {}: {t:?} vs {target:?}",
                x.class_id
            );
        }
    }
}

#[test]
fn private_maps_make_features_class_dependent() {
    let ds = generate(&DatasetConfig {
        noise_sigma: 0.0,
        ..DatasetConfig::lt60(4)
    })
    .unwrap();
    // a single affine fit over all classes leaves a clear residual
    let items = &ds.train;
    let design: Vec<Vec<f64>> = items
        .iter()
        .map(|x| {
            let mut r = x.target_delta.to_array().to_vec();
            r.push(1.0);
            r
        })
        .collect();
    let ys: Vec<f64> = items.iter().map(|x| x.feature[0]).collect();
    let coef = lstsq(&design, &ys);
    let worst = design
        .iter()
        .zip(&ys)
        .map(|(r, y)| (dot(r, &coef) - y).abs())
        .fold(0.0, f64::max);
    assert!(worst > 1e-3, "{worst:e}");
}

#[test]
fn val_scale_shift_grows_toward_the_tail() {
    let ds = generate(&DatasetConfig::lt60(7)).unwrap();
    let mean_scale = |split: Split, class: usize| {
        let s: Vec<f64> = ds
            .split(split)
            .iter()
            .filter(|x| x.class_id == class)
            .map(|x| x.gt_box.area().sqrt())
            .collect();
        s.iter().sum::<f64>() / s.len() as f64
    };
    let delta = |c| -(mean_scale(Split::Train, c) - mean_scale(Split::Val, c));
    let report = class_scale_report(&ds);
    for c in [0, 59] {
        assert!((report[c].delta.unwrap() - delta(c)).abs() < 1e-9);
    }
    assert!(
        delta(59).abs() > delta(0).abs(),
        "{} vs {}",
        delta(59),
        delta(0)
    );
    let zero = generate(&DatasetConfig {
        scale_shift_rare: 0.0,
        ..DatasetConfig::lt60(7)
    })
    .unwrap();
    for c in [0, 30, 59] {
        assert_eq!(
            zero.config.split_scale_mean(c, Split::Train),
            zero.config.split_scale_mean(c, Split::Val)
        );
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn partition_covers_every_class_once(counts in prop::collection::vec(0usize..400, 3..80)) {
        let p = FrequencyPartition::from_image_counts(&counts, FrequencyThresholds::default());
        let sizes = p.sizes();
        prop_assert_eq!(sizes.values().sum::<usize>(), counts.len());
        let mut seen = vec![0; counts.len()];
        for g in FreqGroup::ALL {
            for c in p.members(g) {
                seen[c] += 1;
                prop_assert_eq!(p.group_of(c), g);
            }
        }
        prop_assert!(seen.iter().all(|&n| n == 1));
    }
}
