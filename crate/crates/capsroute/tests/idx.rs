use capsroute::idx::{
    encode_images, encode_labels, load_idx, load_mnist_dir, parse_images, parse_labels, write_file,
    IdxError, PIXELS, TEST_IMAGES, TEST_LABELS, TRAIN_IMAGES, TRAIN_LABELS,
};
use rand::{Rng, SeedableRng};

fn fixture(count: usize, seed: u64) -> (Vec<u8>, Vec<u8>) {
    let mut r = rand::rngs::StdRng::seed_from_u64(seed);
    let pixels = (0..count * PIXELS).map(|_| r.random()).collect();
    let labels = (0..count).map(|_| r.random_range(0..10)).collect();
    (pixels, labels)
}

#[test]
fn two_image_fixture_loads() {
    let dir = tempfile::tempdir().unwrap();
    let (pixels, labels) = fixture(2, 1);
    let ip = dir.path().join("img");
    let lp = dir.path().join("lbl");
    write_file(&ip, &encode_images(&pixels)).unwrap();
    write_file(&lp, &encode_labels(&labels)).unwrap();
    let data = load_idx(&ip, &lp).unwrap();
    assert_eq!(data.len(), 2);
    assert_eq!(data.images.len(), 2 * 28 * 28);
    assert!(data.images.iter().all(|&p| (0.0..=1.0).contains(&p)));
}

#[test]
fn round_trip_is_bit_identical() {
    let dir = tempfile::tempdir().unwrap();
    let (pixels, labels) = fixture(5, 2);
    let ip = dir.path().join("img.gz");
    let lp = dir.path().join("lbl.gz");
    write_file(&ip, &encode_images(&pixels)).unwrap();
    write_file(&lp, &encode_labels(&labels)).unwrap();
    let data = load_idx(&ip, &lp).unwrap();
    let want: Vec<f64> = pixels.iter().map(|&p| p as f64 / 255.0).collect();
    assert!(data
        .images
        .iter()
        .zip(&want)
        .all(|(a, b)| a.to_bits() == b.to_bits()));
    assert_eq!(
        data.labels,
        labels.iter().map(|&l| l as usize).collect::<Vec<_>>()
    );
}

#[test]
fn wrong_magic_names_itself() {
    let (pixels, _) = fixture(1, 3);
    let mut bytes = encode_images(&pixels);
    bytes[2] = 0x09;
    let err = parse_images(&bytes).unwrap_err();
    assert!(matches!(err, IdxError::BadMagic { .. }));
    assert!(err.to_string().contains("bad magic"));
}

#[test]
fn every_header_byte_mutation_is_rejected() {
    let (pixels, labels) = fixture(3, 4);
    let images = encode_images(&pixels);
    for pos in 0..16 {
        for delta in [1u8, 0x80, 0xff] {
            let mut bad = images.clone();
            bad[pos] = bad[pos].wrapping_add(delta);
            assert!(
                parse_images(&bad).is_err(),
                "image header byte {pos} + {delta}"
            );
        }
    }
    let lbl = encode_labels(&labels);
    for pos in 0..8 {
        for delta in [1u8, 0x80, 0xff] {
            let mut bad = lbl.clone();
            bad[pos] = bad[pos].wrapping_add(delta);
            assert!(
                parse_labels(&bad).is_err(),
                "label header byte {pos} + {delta}"
            );
        }
    }
}

#[test]
fn distinct_errors() {
    let (pixels, labels) = fixture(3, 5);
    let images = encode_images(&pixels);
    assert!(matches!(
        parse_images(&images[..images.len() - 1]),
        Err(IdxError::Truncated { .. })
    ));
    assert!(matches!(
        parse_images(&images[..10]),
        Err(IdxError::Truncated { .. })
    ));

    let dir = tempfile::tempdir().unwrap();
    let ip = dir.path().join("img");
    let lp = dir.path().join("lbl");
    write_file(&ip, &images).unwrap();
    write_file(&lp, &encode_labels(&labels[..2])).unwrap();
    assert!(matches!(
        load_idx(&ip, &lp),
        Err(IdxError::CountMismatch {
            images: 3,
            labels: 2
        })
    ));
    assert!(matches!(
        load_idx(&dir.path().join("missing"), &lp),
        Err(IdxError::Io { .. })
    ));
    assert!(matches!(
        parse_labels(&encode_labels(&[10])),
        Err(IdxError::LabelRange(10))
    ));
}

#[test]
fn directory_with_mixed_compression() {
    let dir = tempfile::tempdir().unwrap();
    let (p1, l1) = fixture(4, 6);
    let (p2, l2) = fixture(2, 7);
    write_file(
        &dir.path().join(format!("{TRAIN_IMAGES}.gz")),
        &encode_images(&p1),
    )
    .unwrap();
    write_file(&dir.path().join(TRAIN_LABELS), &encode_labels(&l1)).unwrap();
    write_file(&dir.path().join(TEST_IMAGES), &encode_images(&p2)).unwrap();
    write_file(
        &dir.path().join(format!("{TEST_LABELS}.gz")),
        &encode_labels(&l2),
    )
    .unwrap();
    let (train, test) = load_mnist_dir(dir.path()).unwrap();
    assert_eq!((train.len(), test.len()), (4, 2));
    assert_eq!(train.take(10).len(), 4);
    assert_eq!(train.take(1).images.len(), PIXELS);
}

#[test]
fn bundled_subset_parses() {
    let dir = std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/mnist");
    let (train, test) = load_mnist_dir(&dir).unwrap();
    assert!(train.len() >= 2000 && test.len() >= 1000);
    for d in 0..10 {
        assert!(train.labels.contains(&d));
    }
}
