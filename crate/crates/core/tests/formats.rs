use gldn_core::checkpoint::{decode_checkpoint, encode_checkpoint, CHECKPOINT_MAGIC};
use gldn_core::dataset::container::{decode_volume, encode_volume};
use gldn_core::dataset::{gen_phantom, read_volume, write_volume, Manifest, PhantomParams};
use gldn_core::{load_checkpoint, save_checkpoint, Error, Gldn, ModelConfig, Tensor};
use proptest::prelude::*;

fn is_format(r: Result<impl std::fmt::Debug, Error>) -> Option<u64> {
    match r {
        Err(Error::Format { offset, .. }) => Some(offset),
        other => panic!("expected a format error, got {other:?}"),
    }
}

#[test]
fn phantom_volume_round_trips_through_disk() {
    let dir = tempfile::tempdir().unwrap();
    let v = gen_phantom(61.3, &PhantomParams::default()).unwrap();
    let path = dir.path().join("p.vol");
    write_volume(&v, &path).unwrap();
    let back = read_volume(&path).unwrap();
    assert_eq!(back.shape(), v.shape());
    assert!(back
        .data()
        .iter()
        .zip(v.data())
        .all(|(a, b)| a.to_bits() == b.to_bits()));
}

#[test]
fn volume_header_corruptions() {
    let v = Tensor::from_fn(&[1, 4, 4, 4], |i| i as f32);
    let good = encode_volume(&v);

    let mut m = good.clone();
    m[5] ^= 0xff;
    assert_eq!(is_format(decode_volume(&m)), Some(0));

    let mut ver = good.clone();
    ver[8..12].copy_from_slice(&9u32.to_le_bytes());
    assert_eq!(is_format(decode_volume(&ver)), Some(8));

    // Extents claim more payload than present.
    let mut dims = good.clone();
    dims[16..20].copy_from_slice(&5u32.to_le_bytes());
    is_format(decode_volume(&dims));

    // Payload longer than the extents describe.
    let mut long = good.clone();
    long.extend_from_slice(&[0, 0, 0, 0]);
    is_format(decode_volume(&long));

    is_format(decode_volume(&good[..good.len() - 1]));
    is_format(decode_volume(&good[..6]));

    let mut huge = good[..12].to_vec();
    huge.extend_from_slice(&4u32.to_le_bytes());
    for _ in 0..4 {
        huge.extend_from_slice(&u32::MAX.to_le_bytes());
    }
    is_format(decode_volume(&huge));
}

#[test]
fn checkpoint_round_trip_is_bitwise() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = ModelConfig::desk();
    let (_, store) = Gldn::build::<f32>(&cfg, 5).unwrap();
    let path = dir.path().join("m.ckpt");
    save_checkpoint(&path, &cfg, &store).unwrap();
    let ck = load_checkpoint(&path).unwrap();
    assert_eq!(ck.config, cfg);
    for (a, b) in ck.store.params().iter().zip(store.params()) {
        assert_eq!(a.name, b.name);
        assert!(a
            .value
            .data()
            .iter()
            .zip(b.value.data())
            .all(|(x, y)| x.to_bits() == y.to_bits()));
    }
    let bytes = std::fs::read(&path).unwrap();
    assert_eq!(encode_checkpoint(&ck.config, &ck.store).unwrap(), bytes);
}

#[test]
fn checkpoint_header_corruptions() {
    let cfg = ModelConfig::tiny();
    let (_, store) = Gldn::build::<f32>(&cfg, 1).unwrap();
    let good = encode_checkpoint(&cfg, &store).unwrap();
    assert_eq!(&good[..8], CHECKPOINT_MAGIC);

    let mut m = good.clone();
    m[0] = b'g';
    assert_eq!(is_format(decode_checkpoint(&m)), Some(0));

    let mut ver = good.clone();
    ver[8] = 0;
    assert_eq!(is_format(decode_checkpoint(&ver)), Some(8));

    is_format(decode_checkpoint(&good[..good.len() - 2]));
    is_format(decode_checkpoint(&good[..12]));

    // A trailing record the model does not have.
    let mut extra = good.clone();
    let name = b"ghost";
    extra.extend_from_slice(&(name.len() as u32).to_le_bytes());
    extra.extend_from_slice(name);
    extra.extend_from_slice(&1u32.to_le_bytes());
    extra.extend_from_slice(&1u32.to_le_bytes());
    extra.extend_from_slice(&0f32.to_le_bytes());
    is_format(decode_checkpoint(&extra));
}

#[test]
fn missing_files_are_io_errors() {
    let dir = tempfile::tempdir().unwrap();
    assert!(matches!(
        load_checkpoint(dir.path().join("none")),
        Err(Error::Io { .. })
    ));
    assert!(matches!(
        read_volume(dir.path().join("none")),
        Err(Error::Io { .. })
    ));
    assert!(Manifest::read(dir.path().join("none.csv")).is_err());
}

proptest! {
    #[test]
    fn any_finite_volume_round_trips(
        d in 1usize..5, h in 1usize..5, w in 1usize..5,
        seed in any::<u32>(),
    ) {
        let mut s = seed | 1;
        let v = Tensor::from_fn(&[1, d, h, w], |_| {
            s ^= s << 13; s ^= s >> 17; s ^= s << 5;
            f32::from_bits(s & 0x7f7f_ffff) * if s & 1 == 0 { 1.0 } else { -1.0 }
        });
        let back = decode_volume(&encode_volume(&v)).unwrap();
        prop_assert!(back.data().iter().zip(v.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
        prop_assert_eq!(back.shape(), v.shape());
    }
}
