use idc_core::model::{
    build_model, decode_model, encode_model, load_checkpoint, parse_checkpoint, save_checkpoint, CheckpointError,
    CheckpointMeta, ModelConfig, MAGIC,
};

fn small_config() -> ModelConfig {
    ModelConfig::feature_file(12)
}

#[test]
fn save_load_is_bitwise() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = ModelConfig::default();
    let model = build_model(&cfg, 5).unwrap();
    let path = dir.path().join("m.idcm");
    save_checkpoint(&model, &CheckpointMeta::new(&cfg), &path).unwrap();
    let (loaded, meta) = load_checkpoint(&path).unwrap();
    assert_eq!(meta.model_config, cfg);
    let (a, b) = (model.named_tensors(), loaded.named_tensors());
    assert_eq!(a.len(), b.len());
    for ((na, ta), (nb, tb)) in a.iter().zip(&b) {
        assert_eq!(na, nb);
        assert_eq!(ta.shape(), tb.shape());
        let bits = |t: &idc_core::Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(ta), bits(tb), "{na}");
    }
    assert_eq!(encode_model(&loaded), encode_model(&model));
}

#[test]
fn every_byte_after_the_magic_is_covered() {
    let cfg = small_config();
    let bytes = encode_model(&build_model(&cfg, 1).unwrap());
    for i in MAGIC.len()..bytes.len() {
        for flip in [0x01u8, 0x80] {
            let mut bad = bytes.clone();
            bad[i] ^= flip;
            assert!(decode_model(&bad, &cfg).is_err(), "flip {flip:#x} at byte {i} went unnoticed");
            assert!(parse_checkpoint(&bad).is_err());
        }
    }
}

#[test]
fn damaged_magic_and_truncation_are_distinct() {
    let cfg = small_config();
    let bytes = encode_model(&build_model(&cfg, 1).unwrap());
    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(matches!(parse_checkpoint(&bad), Err(CheckpointError::BadMagic)));
    assert!(matches!(parse_checkpoint(&bytes[..bytes.len() / 2]), Err(CheckpointError::Truncated { .. })));
}

#[test]
fn config_mismatch_is_refused() {
    let bytes = encode_model(&build_model(&small_config(), 1).unwrap());
    let err = decode_model(&bytes, &ModelConfig::feature_file(13)).unwrap_err();
    assert!(matches!(err, CheckpointError::ConfigHash { .. }), "{err:?}");
}
