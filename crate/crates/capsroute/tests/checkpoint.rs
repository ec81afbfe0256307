use capsroute::checkpoint::{decode, encode, load, save, CheckpointError};
use capsroute::core::capsnet::{
    DeskModel, DeskModelConfig, LossMode, MarginLossParams, RoutingAlgorithm,
};
use capsroute::core::data::rng;
use capsroute::core::optim::{Adam, AdamConfig};
use capsroute::core::routing::DynamicRoutingConfig;

fn trained(algorithm: RoutingAlgorithm, loss: LossMode) -> DeskModel {
    let cfg = DeskModelConfig {
        input_dim: 12,
        primary_caps: 4,
        k: 9,
        classes: 3,
        algorithm,
        loss,
    };
    let mut model = DeskModel::init(cfg, &mut rng(3)).unwrap();
    let mut adam = Adam::new(AdamConfig::default(), &model.parameter_sizes());
    let images: Vec<f64> = (0..48).map(|x| ((x * 7) % 11) as f64 / 11.0).collect();
    model.train_step(&images, &[0, 1, 2, 1], &mut adam).unwrap();
    model
}

fn bits(m: &DeskModel) -> Vec<u64> {
    let bn = &m.caps.bn;
    m.feature
        .data()
        .iter()
        .chain(&m.caps.matrices)
        .chain(&bn.gamma)
        .chain(&bn.beta)
        .chain(&bn.running_mean)
        .chain(&bn.running_var)
        .chain(&[bn.momentum, bn.eps])
        .map(|x| x.to_bits())
        .collect()
}

#[test]
fn round_trip_is_bit_exact() {
    for (algo, loss) in [
        (RoutingAlgorithm::Fm, LossMode::Softmax),
        (
            RoutingAlgorithm::Dynamic(DynamicRoutingConfig::new(2).unwrap()),
            LossMode::Margin(MarginLossParams::new(0.25, 0.8, 0.2).unwrap()),
        ),
    ] {
        let model = trained(algo, loss);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.caps");
        save(&model, &path).unwrap();
        let back = load(&path).unwrap();
        assert_eq!(back.config, model.config);
        assert_eq!(bits(&back), bits(&model));
        assert_eq!(encode(&back).unwrap(), encode(&model).unwrap());
    }
}

#[test]
fn header_layout() {
    let bytes = encode(&trained(RoutingAlgorithm::Fm, LossMode::Softmax)).unwrap();
    assert_eq!(&bytes[..4], b"CAPS");
    assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
    let dims: Vec<u32> = bytes[8..36]
        .chunks(4)
        .map(|c| u32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    assert_eq!(dims, [12, 4, 9, 3, 0, 0, 0]);
    let floats = 3 + 12 * 36 + 4 * 3 * 9 + 4 * 27 + 2;
    assert_eq!(bytes.len(), 36 + 8 * floats);
}

#[test]
fn corrupt_files_are_rejected() {
    let good = encode(&trained(RoutingAlgorithm::Fm, LossMode::Softmax)).unwrap();
    let mut bad = good.clone();
    bad[0] = b'X';
    assert!(matches!(decode(&bad), Err(CheckpointError::BadMagic)));
    let mut bad = good.clone();
    bad[4] = 9;
    assert!(matches!(decode(&bad), Err(CheckpointError::Version(9))));
    assert!(matches!(
        decode(&good[..good.len() - 3]),
        Err(CheckpointError::Truncated { .. })
    ));
    let mut long = good.clone();
    long.push(0);
    assert!(matches!(
        decode(&long),
        Err(CheckpointError::TrailingBytes { extra: 1 })
    ));
    let mut bad = good.clone();
    bad[24] = 7;
    assert!(matches!(
        decode(&bad),
        Err(CheckpointError::Tag {
            field: "algorithm",
            ..
        })
    ));
    let mut bad = good;
    bad[16] = 8;
    assert!(decode(&bad).is_err());
}
