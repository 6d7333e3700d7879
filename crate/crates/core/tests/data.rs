mod common;

use common::restricted_ols;
use halo_core::data::{
    corrupt_labels, encode_idx_images, encode_idx_labels, epoch_batches, gen_sparse_linear, load_idx,
    parse_idx_images, save_idx, write_idx_file, Dataset, IdxImages, Targets,
};
use halo_core::engine::Tensor;
use halo_core::pruning::{weighted_lasso, CdOptions, LinearProblem};
use halo_core::Error;
use proptest::prelude::*;

/// Two 2×2 images with pixels 0, 1, …, 7 written byte by byte.
fn fixture_bytes() -> (Vec<u8>, Vec<u8>) {
    let mut images = vec![0x00, 0x00, 0x08, 0x03];
    images.extend([0, 0, 0, 2]); // count
    images.extend([0, 0, 0, 2]); // rows
    images.extend([0, 0, 0, 2]); // cols
    images.extend([0, 1, 2, 3, 4, 5, 6, 255]);
    let mut labels = vec![0x00, 0x00, 0x08, 0x01];
    labels.extend([0, 0, 0, 2]);
    labels.extend([7, 3]);
    (images, labels)
}

fn labelled(labels: Vec<usize>, classes: usize) -> Dataset {
    let n = labels.len();
    Dataset::new(
        Tensor::zeros(&[n, 1]),
        Targets::Classes {
            labels,
            num_classes: classes,
        },
        "train",
        "test",
    )
    .unwrap()
}

#[test]
fn idx_fixture_parses_exactly() {
    let (images, labels) = fixture_bytes();
    let dir = tempfile::tempdir().unwrap();
    let (ip, lp) = (dir.path().join("img"), dir.path().join("lbl"));
    std::fs::write(&ip, &images).unwrap();
    std::fs::write(&lp, &labels).unwrap();
    let data = load_idx(&ip, &lp).unwrap();
    assert_eq!(data.inputs.shape(), &[2, 4]);
    let expected: Vec<f64> = [0u8, 1, 2, 3, 4, 5, 6, 255].iter().map(|&b| f64::from(b) / 255.0).collect();
    assert_eq!(data.inputs.data(), expected.as_slice());
    assert_eq!(data.inputs.data()[1], 1.0 / 255.0);
    assert_eq!(data.labels().unwrap(), &[7, 3]);

    // byte-level round trip through the encoder
    let parsed = parse_idx_images(&images).unwrap();
    assert_eq!(encode_idx_images(&parsed), images);
    assert_eq!(encode_idx_labels(&[7, 3]), labels);
}

#[test]
fn image_magic_is_three_dimensional_unsigned_bytes() {
    let (images, _) = fixture_bytes();
    assert_eq!(&images[..4], &[0x00, 0x00, 0x08, 0x03]);
    let parsed = parse_idx_images(&images).unwrap();
    assert_eq!((parsed.count, parsed.rows, parsed.cols), (2, 2, 2));

    let mut bad = images.clone();
    bad[3] = 0x01;
    assert!(matches!(parse_idx_images(&bad), Err(Error::Format { offset: 0, .. })));
    assert!(matches!(parse_idx_images(&images[..20]), Err(Error::Format { .. })));
}

#[test]
fn label_image_count_mismatch_is_format_error() {
    let images = IdxImages {
        count: 12,
        rows: 1,
        cols: 1,
        pixels: vec![9; 12],
    };
    let dir = tempfile::tempdir().unwrap();
    let (ip, lp) = (dir.path().join("i.gz"), dir.path().join("l"));
    save_idx(&ip, &lp, &images, &[1; 10]).unwrap();
    match load_idx(&ip, &lp) {
        Err(Error::Format { message, .. }) => assert!(message.contains("10") && message.contains("12")),
        other => panic!("expected a format error, got {other:?}"),
    }
}

#[test]
fn gzip_and_plain_files_load_identically() {
    let (images, labels) = fixture_bytes();
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    write_idx_file(&d.join("a.gz"), &images).unwrap();
    write_idx_file(&d.join("b.gz"), &labels).unwrap();
    write_idx_file(&d.join("a"), &images).unwrap();
    write_idx_file(&d.join("b"), &labels).unwrap();
    assert_eq!(
        load_idx(&d.join("a.gz"), &d.join("b.gz")).unwrap().inputs,
        load_idx(&d.join("a"), &d.join("b")).unwrap().inputs
    );
}

#[test]
fn noiseless_ols_recovers_coefficients() {
    let sl = gen_sparse_linear(80, 10, 4, 0.0, 1.5, 3).unwrap();
    let prob = LinearProblem::from_dataset(&sl.dataset).unwrap();
    let w = restricted_ols(&prob.x, &prob.y, 80, 10, &[true; 10]);
    for (a, b) in w.iter().zip(&sl.coefficients) {
        assert!((a - b).abs() <= 1e-10);
    }
    assert_eq!(sl.support.len(), 4);
    assert!(sl.coefficients.iter().all(|c| *c == 0.0 || c.abs() == 1.5));
}

#[test]
fn pure_noise_lasso_is_all_zero() {
    let sl = gen_sparse_linear(200, 50, 0, 1.0, 1.0, 8).unwrap();
    let prob = LinearProblem::from_dataset(&sl.dataset).unwrap();
    let w = weighted_lasso(&prob, &[0.5; 50], None, CdOptions::default()).unwrap();
    assert!(w.iter().all(|v| *v == 0.0));
}

#[test]
fn restricted_ols_rmse_on_the_benchmark_task() {
    let mut rmse: Vec<f64> = (0..10)
        .map(|seed| {
            let sl = gen_sparse_linear(200, 50, 5, 0.5, 1.0, seed).unwrap();
            let prob = LinearProblem::from_dataset(&sl.dataset).unwrap();
            let support: Vec<bool> = (0..50).map(|j| sl.support.contains(&j)).collect();
            let w = restricted_ols(&prob.x, &prob.y, 200, 50, &support);
            let se: f64 = sl.support.iter().map(|&j| (w[j] - sl.coefficients[j]).powi(2)).sum();
            (se / 5.0).sqrt()
        })
        .collect();
    rmse.sort_by(f64::total_cmp);
    let median = 0.5 * (rmse[4] + rmse[5]);
    assert!(median <= 0.1, "{median}");
}

#[test]
fn support_larger_than_dimension_is_config_error() {
    assert!(matches!(gen_sparse_linear(10, 3, 4, 0.1, 1.0, 0), Err(Error::Config(_))));
}

#[test]
fn corruption_examples() {
    let labels: Vec<usize> = (0..10_000).map(|i| i % 10).collect();
    let clean = labelled(labels.clone(), 10);
    assert_eq!(corrupt_labels(&clean, 0.0, 10, 1).unwrap().labels().unwrap(), labels.as_slice());

    let all = corrupt_labels(&clean, 1.0, 10, 1).unwrap();
    assert!(all.labels().unwrap().iter().zip(&labels).all(|(a, b)| a != b));

    let noisy = corrupt_labels(&clean, 0.4, 10, 7).unwrap();
    let changed = noisy.labels().unwrap().iter().zip(&labels).filter(|(a, b)| a != b).count();
    let frac = changed as f64 / 10_000.0;
    assert!((frac - 0.4).abs() <= 0.015, "{frac}");
    assert_eq!(noisy.clean_labels.as_deref(), Some(labels.as_slice()));

    assert!(matches!(corrupt_labels(&labelled(vec![0; 3], 1), 0.5, 1, 0), Err(Error::Config(_))));
}

#[test]
fn dataset_rejects_out_of_range_labels() {
    let r = Dataset::new(
        Tensor::zeros(&[2, 1]),
        Targets::Classes {
            labels: vec![0, 3],
            num_classes: 3,
        },
        "x",
        "y",
    );
    assert!(r.is_err());
}

proptest! {
    #[test]
    fn generator_is_seed_deterministic(seed in any::<u64>()) {
        let a = gen_sparse_linear(20, 6, 2, 0.3, 1.0, seed).unwrap();
        let b = gen_sparse_linear(20, 6, 2, 0.3, 1.0, seed).unwrap();
        let bits = |d: &Dataset| d.inputs.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        prop_assert_eq!(bits(&a.dataset), bits(&b.dataset));
        prop_assert_eq!(a.dataset.targets, b.dataset.targets);
        prop_assert_eq!(a.support, b.support);
    }

    #[test]
    fn corruption_never_maps_a_flip_to_itself(
        labels in prop::collection::vec(0usize..4, 1..200),
        rho in 0.0f64..=1.0,
        seed in any::<u64>(),
    ) {
        let clean = labelled(labels.clone(), 4);
        let a = corrupt_labels(&clean, rho, 4, seed).unwrap();
        let b = corrupt_labels(&clean, rho, 4, seed).unwrap();
        prop_assert_eq!(a.labels(), b.labels());
        prop_assert!(a.labels().unwrap().iter().all(|l| *l < 4));
        if rho == 1.0 {
            prop_assert!(a.labels().unwrap().iter().zip(&labels).all(|(x, y)| x != y));
        }
    }

    #[test]
    fn save_then_load_is_identity(
        count in 1usize..6,
        rows in 1usize..5,
        cols in 1usize..5,
        seed in any::<u8>(),
    ) {
        let pixels: Vec<u8> = (0..count * rows * cols).map(|i| (i as u8).wrapping_mul(31).wrapping_add(seed)).collect();
        let labels: Vec<u8> = (0..count).map(|i| (i % 10) as u8).collect();
        let images = IdxImages { count, rows, cols, pixels: pixels.clone() };
        let dir = tempfile::tempdir().unwrap();
        let (ip, lp) = (dir.path().join("i.gz"), dir.path().join("l.gz"));
        save_idx(&ip, &lp, &images, &labels).unwrap();
        let data = load_idx(&ip, &lp).unwrap();
        let back: Vec<u8> = data.inputs.data().iter().map(|v| (v * 255.0).round() as u8).collect();
        prop_assert_eq!(back, pixels);
        prop_assert_eq!(data.labels().unwrap().iter().map(|&l| l as u8).collect::<Vec<_>>(), labels);
    }

    #[test]
    fn batches_cover_every_index_once(n in 0usize..300, bs in 1usize..64) {
        let mut all: Vec<usize> = epoch_batches(n, bs, None).concat();
        all.sort_unstable();
        prop_assert_eq!(all, (0..n).collect::<Vec<_>>());
    }
}
