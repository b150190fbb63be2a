use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;

fn sample_store() -> ParamStore<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut s = ParamStore::new();
    s.insert("prelude.0.q", Tensor::randn(&[4, 3], 1.0, &mut rng), true);
    s.insert("stepnorm.12", Tensor::ones(&[3]), false);
    s.insert("scalar", Tensor::scalar(-0.0), false);
    s.insert("controller.head.3", Tensor::from_f64(&[1, 2], &[f64::MIN_POSITIVE, 1e300]).unwrap(), false);
    s
}

#[test]
fn empty_store_round_trips() {
    let bytes = encode(&ParamStore::<f32>::new());
    assert_eq!(bytes.len(), HEADER_LEN + CRC_LEN);
    assert!(decode::<f32>(&bytes).unwrap().is_empty());
}

#[test]
fn single_tensor_has_exact_size() {
    let mut s = ParamStore::<f32>::new();
    s.insert("w", Tensor::from_f64(&[2, 2], &[1.0, 2.0, 3.0, 4.0]).unwrap(), false);
    let bytes = encode(&s);
    // fixed header, name length + name, dtype, rank, two extents, payload, crc
    let header = HEADER_LEN + 4 + 1 + 1 + 4 + 2 * 8;
    assert_eq!(bytes.len(), header + 16 + CRC_LEN);
    assert_eq!(&bytes[..4], b"OURO");
    assert_eq!(&bytes[header..header + 4], &1.0f32.to_le_bytes());
}

#[test]
fn round_trip_is_bit_exact() {
    let s = sample_store();
    let bytes = encode(&s);
    let back = decode::<f64>(&bytes).unwrap();
    assert_eq!(back.names().collect::<Vec<_>>(), s.names().collect::<Vec<_>>());
    for (name, p) in s.iter() {
        let a: Vec<u64> = p.tensor.data().iter().map(|x| x.to_bits()).collect();
        let b: Vec<u64> = back.get(name).unwrap().data().iter().map(|x| x.to_bits()).collect();
        assert_eq!(a, b, "{name}");
        assert_eq!(p.tensor.shape(), back.get(name).unwrap().shape());
    }
    assert_eq!(encode(&back), bytes);
}

#[test]
fn file_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ouro");
    save(&path, &sample_store()).unwrap();
    assert_eq!(encode(&load::<f64>(&path).unwrap()), encode(&sample_store()));
    assert!(!path.with_extension("tmp").exists());
}

#[test]
fn distinct_errors_for_magic_version_checksum() {
    let bytes = encode(&sample_store());

    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(matches!(decode::<f64>(&bad), Err(Error::BadMagic)));

    let mut bad = bytes.clone();
    bad[4..8].copy_from_slice(&7u32.to_le_bytes());
    assert!(matches!(decode::<f64>(&bad), Err(Error::BadVersion(7))));

    let mut bad = bytes.clone();
    let last = bad.len() - 1;
    bad[last] ^= 1;
    assert!(matches!(decode::<f64>(&bad), Err(Error::ChecksumMismatch { .. })));

    assert!(matches!(decode::<f64>(&bytes[..10]), Err(Error::Malformed(_))));
}

#[test]
fn dtype_is_checked_or_converted() {
    let bytes = encode(&sample_store());
    assert!(matches!(decode::<f32>(&bytes), Err(Error::DTypeMismatch { .. })));
    let f32s = decode_as::<f32>(&bytes).unwrap();
    assert_eq!(f32s.get("stepnorm.12").unwrap().data(), &[1.0f32; 3]);
}

#[test]
fn consistent_but_truncated_body_is_malformed() {
    // Recompute the checksum over a body that claims one more tensor than it holds.
    let mut bytes = encode(&sample_store());
    bytes.truncate(bytes.len() - CRC_LEN);
    bytes[8..16].copy_from_slice(&5u64.to_le_bytes());
    let crc = crc32fast::hash(&bytes);
    bytes.extend_from_slice(&crc.to_le_bytes());
    assert!(matches!(decode::<f64>(&bytes), Err(Error::Malformed(_))));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn any_single_byte_corruption_is_detected(pos_frac in 0.0f64..1.0, flip in 1u8..=255) {
        let bytes = encode(&sample_store());
        let pos = ((bytes.len() - 1) as f64 * pos_frac) as usize;
        let mut bad = bytes.clone();
        bad[pos] ^= flip;
        prop_assert!(decode::<f64>(&bad).is_err());
    }
}
