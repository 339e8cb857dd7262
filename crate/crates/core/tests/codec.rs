use p2u::checksum::Digest;
use p2u::codec::{decode, encode, encoded_size, payload_size, raw_packed_size, Bitstream, CodecError, Payload};
use p2u::model::{Bitwidth, QTensor, QuantizedModel};
use p2u::update::UpdateModel;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn codes(b: Bitwidth, n: usize) -> impl Strategy<Value = Vec<i32>> {
    let q = b.qmax();
    // Mix of small codes, extremes and anything in range.
    let one = prop_oneof![-2i32..=2, Just(q), Just(-q), -q..=q];
    prop::collection::vec(one, n)
}

fn arb_qmodel() -> impl Strategy<Value = QuantizedModel> {
    prop::sample::select(Bitwidth::ALL.to_vec()).prop_flat_map(|b| {
        let tensor = prop::collection::vec(1usize..6, 1..4).prop_flat_map(move |shape| {
            let n = shape.iter().product();
            (Just(shape), codes(b, n), 1e-8f32..1e4)
        });
        prop::collection::vec(tensor, 0..5).prop_map(move |ts| {
            let tensors = ts
                .into_iter()
                .enumerate()
                .map(|(i, (shape, q, s))| QTensor::new(format!("layer{i}"), shape, q, s, b).unwrap())
                .collect();
            QuantizedModel::new("prop", b, tensors).unwrap()
        })
    })
}

proptest! {
    #[test]
    fn model_roundtrip(m in arb_qmodel()) {
        let bs = encode(&m);
        prop_assert_eq!(decode(&bs).unwrap(), Payload::Model(m.clone()));
        prop_assert_eq!(encode(&m), bs.clone());
        prop_assert_eq!(encoded_size(&m), bs.len() as u64);
    }

    #[test]
    fn update_roundtrip(m in arb_qmodel(), base in any::<[u8; 32]>()) {
        prop_assume!(m.bitwidth() != Bitwidth::B4);
        let u = UpdateModel::new(
            "prop",
            Bitwidth::B4,
            m.bitwidth(),
            Digest::from_bytes(base),
            m.tensors().to_vec(),
        )
        .unwrap();
        let bs = encode(&u);
        let back = decode(&bs).unwrap().into_update().unwrap();
        prop_assert_eq!(back.base_checksum().as_bytes(), &base);
        prop_assert_eq!(back, u);
    }

    #[test]
    fn flipped_byte_never_decodes_silently(m in arb_qmodel(), pos in any::<prop::sample::Index>()) {
        let mut bytes = encode(&m).into_bytes();
        let i = pos.index(bytes.len());
        bytes[i] ^= 0x40;
        prop_assert!(decode(&Bitstream::from_bytes(bytes)).is_err());
    }
}

fn uniform_model(b: Bitwidth, n: usize, seed: u64) -> QuantizedModel {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let q = b.qmax();
    let codes = (0..n).map(|_| rng.random_range(-q..=q)).collect();
    QuantizedModel::new("u", b, vec![QTensor::new("w", vec![n], codes, 0.5, b).unwrap()]).unwrap()
}

#[test]
fn all_zero_model_is_tiny() {
    let n = 1_000_000;
    let m = QuantizedModel::new(
        "z",
        Bitwidth::B8,
        vec![QTensor::new("w", vec![n], vec![0; n], 1.0, Bitwidth::B8).unwrap()],
    )
    .unwrap();
    let size = payload_size(&m);
    assert!((size as f64) < 0.02 * raw_packed_size(n, Bitwidth::B8) as f64, "{size}");
}

#[test]
fn uniform_codes_do_not_compress() {
    let n = 200_000;
    for b in Bitwidth::ALL {
        let m = uniform_model(b, n, b.bits() as u64);
        // Entropy of a uniform code over 2*qmax+1 symbols, in bytes.
        let entropy = n as f64 * ((2 * b.qmax() as i64 + 1) as f64).log2() / 8.0;
        let raw = raw_packed_size(n, b) as f64;
        let size = payload_size(&m) as f64;
        assert!(size >= 0.98 * entropy, "{b:?}: {size} < 0.98 * {entropy}");
        assert!(size <= 1.02 * raw, "{b:?}: {size} > 1.02 * {raw}");
    }
}

#[test]
fn tiny_roundtrip_and_empty_model() {
    let m = QuantizedModel::new(
        "t",
        Bitwidth::B4,
        vec![QTensor::new("w", vec![3], vec![7, -4, 2], 1.0 / 7.0, Bitwidth::B4).unwrap()],
    )
    .unwrap();
    assert_eq!(decode(&encode(&m)).unwrap().into_model().unwrap(), m);

    let empty = QuantizedModel::new("e", Bitwidth::B8, vec![]).unwrap();
    assert_eq!(payload_size(&empty), 0);
    let bs = encode(&empty);
    // magic, version, kind, bits, name, tensor count, payload length, digest
    assert_eq!(bs.len(), 4 + 2 + 1 + 1 + (4 + 1) + 4 + 8 + 32);
    assert_eq!(decode(&bs).unwrap().into_model().unwrap(), empty);
}

#[test]
fn truncation_is_an_error() {
    let m = uniform_model(Bitwidth::B8, 1000, 9);
    let bytes = encode(&m).into_bytes();
    for cut in [0, 3, 20, bytes.len() / 2, bytes.len() - 1] {
        let r = decode(&Bitstream::from_bytes(bytes[..cut].to_vec()));
        assert!(r.is_err(), "cut at {cut}");
    }
    let mut bad = bytes.clone();
    bad[0] = b'Q';
    assert_eq!(decode(&Bitstream::from_bytes(bad)), Err(CodecError::BadMagic));
}
