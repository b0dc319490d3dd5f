use std::fs;

use emogen::checkpoint::{decode, decode_header, encode, load, save, MAGIC};
use emogen_core::model::{Model, ModelConfig, Variant};
use emogen_core::seeded_rng;
use serde_json::json;

#[test]
fn every_variant_round_trips_bit_exactly() {
    let dir = tempfile::tempdir().unwrap();
    for (i, variant) in Variant::ALL.into_iter().enumerate() {
        let model = Model::<f32>::new(ModelConfig::toy(variant, 2, 32, 4, 64, 24), &mut seeded_rng(i as u64)).unwrap();
        let path = dir.path().join(format!("{variant}.ckpt"));
        save(&path, &model, json!({"step": i})).unwrap();
        let (back, meta) = load(&path).unwrap();
        assert_eq!(back.config, model.config);
        assert_eq!(meta["step"], i);
        for ((n1, a), (n2, b)) in model.params.iter().zip(back.params.iter()) {
            assert_eq!(n1, n2);
            assert_eq!(a.shape(), b.shape());
            let bits = |t: &emogen_core::tensor::Tensor<f32>| t.data().iter().map(|x| x.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(a), bits(b), "{variant} {n1}");
        }
    }
}

#[test]
fn header_describes_payload() {
    let model = Model::<f32>::new(ModelConfig::toy(Variant::ContinuousToken, 1, 16, 2, 32, 8), &mut seeded_rng(0)).unwrap();
    let bytes = encode(&model, json!({})).unwrap();
    assert_eq!(&bytes[..8], MAGIC);
    let (header, payload_start) = decode_header(&bytes).unwrap();
    let total: usize = header.tensors.iter().map(|t| t.shape.iter().product::<usize>() * 4).sum();
    assert_eq!(bytes.len() - payload_start, total);
    assert_eq!(header.tensors.len(), model.params.len());
}

#[test]
fn damaged_files_are_rejected() {
    let model = Model::<f32>::new(ModelConfig::toy(Variant::Vanilla, 1, 16, 2, 32, 8), &mut seeded_rng(0)).unwrap();
    let bytes = encode(&model, json!({})).unwrap();
    assert!(decode(&bytes[..bytes.len() - 4]).is_err());
    assert!(decode(&bytes[..20]).is_err());
    let mut bad_magic = bytes.clone();
    bad_magic[0] = b'X';
    assert!(decode(&bad_magic).is_err());
    let mut bad_version = bytes.clone();
    bad_version[8] = 9;
    assert!(decode(&bad_version).is_err());
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("x.ckpt");
    fs::write(&p, b"").unwrap();
    assert!(load(&p).is_err());
    assert!(load(&dir.path().join("missing.ckpt")).is_err());
}
