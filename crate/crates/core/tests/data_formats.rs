use fedsim_core::data::{
    generate_synthetic, load_idx, parse_idx, partition, sample_batch, PartitionScheme, SyntheticSpec,
    IDX_IMAGES_MAGIC, IDX_LABELS_MAGIC,
};
use fedsim_core::{Dataset, Error, IdxError};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn idx_images(magic: u32, n: u32, rows: u32, cols: u32, pixels: &[u8]) -> Vec<u8> {
    let mut out = Vec::new();
    for v in [magic, n, rows, cols] {
        out.extend(v.to_be_bytes());
    }
    out.extend_from_slice(pixels);
    out
}

fn idx_labels(magic: u32, labels: &[u8]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend(magic.to_be_bytes());
    out.extend((labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    out
}

fn two_images() -> Vec<u8> {
    let mut pixels = vec![0u8; 2 * 784];
    pixels[0] = 17;
    pixels[2] = 255;
    pixels[784 + 783] = 128;
    pixels[784 + 28] = 1;
    pixels
}

#[test]
fn hand_built_idx_pair_loads_exact_pixels() {
    let dir = tempfile::tempdir().unwrap();
    let img = dir.path().join("images-idx3-ubyte");
    let lbl = dir.path().join("labels-idx1-ubyte");
    std::fs::write(&img, idx_images(IDX_IMAGES_MAGIC, 2, 28, 28, &two_images())).unwrap();
    std::fs::write(&lbl, idx_labels(IDX_LABELS_MAGIC, &[7, 0])).unwrap();

    let d = load_idx(&img, &lbl).unwrap();
    assert_eq!(d.len(), 2);
    assert_eq!(d.dim(), 784);
    assert_eq!(d.class_count(), 10);
    assert_eq!(d.labels(), &[7, 0]);
    assert_eq!(d.row(0)[0], 17.0 / 255.0);
    assert_eq!(d.row(0)[1], 0.0);
    assert_eq!(d.row(0)[2], 1.0);
    assert_eq!(d.row(1)[783], 128.0 / 255.0);
    // Row-major: second image row, first column.
    assert_eq!(d.row(1)[28], 1.0 / 255.0);
}

#[test]
fn idx_error_kinds_are_distinct() {
    let pixels = two_images();
    let labels = idx_labels(IDX_LABELS_MAGIC, &[1, 2]);

    let bad_magic = idx_images(0x0000_0802, 2, 28, 28, &pixels);
    assert!(matches!(
        parse_idx(&bad_magic, &labels),
        Err(Error::Idx(IdxError::BadMagic { found: 0x0802, .. }))
    ));
    let bad_label_magic = idx_labels(0x0000_0803, &[1, 2]);
    assert!(matches!(
        parse_idx(&idx_images(IDX_IMAGES_MAGIC, 2, 28, 28, &pixels), &bad_label_magic),
        Err(Error::Idx(IdxError::BadMagic { file: "labels", .. }))
    ));

    let three_labels = idx_labels(IDX_LABELS_MAGIC, &[1, 2, 3]);
    assert!(matches!(
        parse_idx(&idx_images(IDX_IMAGES_MAGIC, 2, 28, 28, &pixels), &three_labels),
        Err(Error::Idx(IdxError::LengthMismatch { images: 2, labels: 3 }))
    ));

    let truncated = idx_images(IDX_IMAGES_MAGIC, 2, 28, 28, &pixels[..1000]);
    assert!(matches!(
        parse_idx(&truncated, &labels),
        Err(Error::Idx(IdxError::Truncated { file: "images", .. }))
    ));
    assert!(matches!(
        parse_idx(&[0, 0, 8], &labels),
        Err(Error::Idx(IdxError::Truncated { .. }))
    ));
    let mut short_labels = labels.clone();
    short_labels.pop();
    assert!(matches!(
        parse_idx(&idx_images(IDX_IMAGES_MAGIC, 2, 28, 28, &pixels), &short_labels),
        Err(Error::Idx(IdxError::Truncated { file: "labels", .. }))
    ));

    let big_label = idx_labels(IDX_LABELS_MAGIC, &[1, 12]);
    assert!(matches!(
        parse_idx(&idx_images(IDX_IMAGES_MAGIC, 2, 28, 28, &pixels), &big_label),
        Err(Error::Idx(IdxError::LabelOutOfRange { index: 1, .. }))
    ));
}

#[test]
fn missing_file_is_io_error() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("absent");
    assert!(matches!(load_idx(&p, &p), Err(Error::Io { .. })));
}

fn blobs(per_class: usize) -> Dataset {
    generate_synthetic(SyntheticSpec { classes: 10, dim: 16, per_class, spread: 0.3 }, 1).unwrap()
}

#[test]
fn dirichlet_large_alpha_is_near_global_histogram() {
    let d = blobs(4500);
    let plan = partition(&d, 30, PartitionScheme::Dirichlet { alpha: 1000.0 }, 6).unwrap();
    let all: Vec<usize> = (0..d.len()).collect();
    let global = d.label_histogram(&all);
    for list in &plan.assignments {
        let hist = d.label_histogram(list);
        let tv: f64 = hist
            .iter()
            .zip(&global)
            .map(|(&c, &g)| (c as f64 / list.len() as f64 - g as f64 / d.len() as f64).abs())
            .sum::<f64>()
            / 2.0;
        assert!(tv < 0.05, "total variation {tv}");
    }
}

#[test]
fn batch_draws_are_uniform_over_partition() {
    let d = blobs(10);
    let idx: Vec<usize> = (0..50).map(|i| i * 2).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(123);
    let mut counts = vec![0usize; d.len()];
    for _ in 0..100 {
        let batch = sample_batch(&d, &idx, 100, &mut rng).unwrap();
        // Recover the drawn rows through their exact feature values.
        for r in 0..batch.len() {
            let hit = idx.iter().find(|&&i| d.row(i) == batch.row(r)).unwrap();
            counts[*hit] += 1;
        }
    }
    let expected = 10_000.0 / 50.0;
    let sigma = (10_000.0_f64 * (1.0 / 50.0) * (49.0 / 50.0)).sqrt();
    for &i in &idx {
        let dev = (counts[i] as f64 - expected).abs();
        assert!(dev < 5.0 * sigma, "row {i}: {} draws", counts[i]);
    }
    assert_eq!(counts.iter().sum::<usize>(), 10_000);
}

fn scheme_strategy() -> impl Strategy<Value = PartitionScheme> {
    prop_oneof![
        Just(PartitionScheme::Iid),
        (1usize..4).prop_map(|s| PartitionScheme::LabelShard { shards_per_client: s }),
        (0.05f64..50.0).prop_map(|alpha| PartitionScheme::Dirichlet { alpha }),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn partition_is_a_disjoint_cover(
        scheme in scheme_strategy(),
        seed in any::<u64>(),
        clients in 1usize..12,
        per_class in 5usize..30,
    ) {
        let d = generate_synthetic(SyntheticSpec { classes: 4, dim: 2, per_class, spread: 0.1 }, seed).unwrap();
        prop_assume!(match scheme {
            PartitionScheme::LabelShard { shards_per_client } => clients * shards_per_client <= d.len(),
            _ => true,
        });
        let plan = partition(&d, clients, scheme, seed).unwrap();
        prop_assert_eq!(plan.client_count(), clients);
        prop_assert!(plan.assignments.iter().all(|l| !l.is_empty()));
        let mut all = plan.assignments.concat();
        all.sort_unstable();
        prop_assert_eq!(all, (0..d.len()).collect::<Vec<_>>());
        prop_assert_eq!(&partition(&d, clients, scheme, seed).unwrap(), &plan);

        if let PartitionScheme::LabelShard { shards_per_client } = scheme {
            // A shard no longer than a class touches at most two classes,
            // and exactly one when shards tile the class boundaries.
            let shard_count = clients * shards_per_client;
            let aligned = d.len().is_multiple_of(shard_count) && per_class % (d.len() / shard_count) == 0;
            for list in &plan.assignments {
                let distinct = d.label_histogram(list).iter().filter(|&&c| c > 0).count();
                if d.len().div_ceil(shard_count) <= per_class {
                    prop_assert!(distinct <= 2 * shards_per_client);
                }
                if aligned {
                    prop_assert!(distinct <= shards_per_client);
                }
            }
        }
    }
}
