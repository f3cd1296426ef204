use proptest::prelude::*;

use super::*;
use crate::attribution::{attribute, AttributionConfig, zscore_binarize};
use crate::encoder::Model;
use crate::navsim::{make_nav_dataset, NavConfig};
use crate::synth::{make_dataset, SynthConfig};

#[test]
fn f64_round_trip_and_errors() {
    let v = [0.0, -1.5, 1e300, f64::MIN_POSITIVE];
    assert_eq!(decode_f64s(&encode_f64s(&v), 4).unwrap(), v);
    assert!(decode_f64s(&[0; 7], 1).is_err());
    assert!(decode_f64s(&encode_f64s(&[f64::NAN]), 1).is_err());
    assert!(decode_f64s(&[], usize::MAX).is_err());
    assert!(decode_binary_map(&[0, 1, 2, 0], 2, 2).is_err());
    assert_eq!(decode_binary_map(&[0, 1, 1, 0], 2, 2).unwrap().count_ones(), 2);
}

#[test]
fn synthetic_dataset_round_trip_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let (data, _) = make_dataset(&SynthConfig { t: 300, ..SynthConfig::default() }).unwrap();
    write_dataset(&dir.path().join("a"), &data, false).unwrap();
    let back = read_dataset(&dir.path().join("a")).unwrap();
    assert_eq!(back.meta, data.meta);
    assert_eq!(back.x, data.x);
    assert_eq!(back.c, data.c);
    assert_eq!(back.z, data.z);
    assert_eq!(back.ground_truth, data.ground_truth);
    // same seed, same bytes
    let (again, _) = make_dataset(&SynthConfig { t: 300, ..SynthConfig::default() }).unwrap();
    write_dataset(&dir.path().join("b"), &again, false).unwrap();
    for f in ["meta.json", "x.f64", "c.f64", "z.f64", "A.u8"] {
        assert_eq!(fs::read(dir.path().join("a").join(f)).unwrap(), fs::read(dir.path().join("b").join(f)).unwrap(), "{f}");
    }
    assert!(matches!(write_dataset(&dir.path().join("a"), &data, false), Err(IoError::NotEmpty(_))));
    write_dataset(&dir.path().join("a"), &data, true).unwrap();
}

#[test]
fn navsim_dataset_round_trip_keeps_extras() {
    let dir = tempfile::tempdir().unwrap();
    let (data, _) = make_nav_dataset(&NavConfig { t: 200, cells_per_kind: 5, ..NavConfig::default() }).unwrap();
    write_dataset(dir.path(), &data, false).unwrap();
    let back = read_dataset(dir.path()).unwrap();
    assert_eq!(back.meta, data.meta);
    assert_eq!(back.extras, data.extras);
    assert!(dir.path().join("speed.f64").exists());
}

#[test]
fn checkpoint_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let enc = MlpEncoder::init(3, 6, 8, &[2, 1], 1.1).unwrap().with_geometry(vec![Geometry::Box, Geometry::Sphere]).unwrap();
    write_checkpoint(dir.path(), &enc, false).unwrap();
    let back = read_checkpoint(dir.path()).unwrap();
    assert_eq!(back, enc);
    let x = Tensor::from_fn(5, 6, |i, j| (i + j) as f64 * 0.1);
    assert_eq!(back.embed(&x).unwrap(), enc.embed(&x).unwrap());
}

#[test]
fn checkpoint_meta_is_validated() {
    let dir = tempfile::tempdir().unwrap();
    let enc = MlpEncoder::init(3, 6, 8, &[2], 1.1).unwrap();
    write_checkpoint(dir.path(), &enc, false).unwrap();
    let text = fs::read_to_string(dir.path().join("meta.json")).unwrap();
    assert!(parse_checkpoint_meta(text.as_bytes()).is_ok());
    assert!(parse_checkpoint_meta(text.replace("\"hidden_width\": 8", "\"hidden_width\": 9").as_bytes()).is_err());
    assert!(parse_checkpoint_meta(text.replace("layer0_weight.f64", "../x").as_bytes()).is_err());
    assert!(parse_checkpoint_meta(text.replace("\"seed\"", "\"bogus\": 1, \"seed\"").as_bytes()).is_err());
}

#[test]
fn attribution_artifacts_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let enc = MlpEncoder::init(3, 6, 8, &[2], 1.1).unwrap();
    let x = Tensor::from_fn(40, 6, |i, j| ((i * 6 + j) as f64).sin());
    let global = attribute(&enc, &x, Method::InvertedNeuronGradient, &AttributionConfig::default()).unwrap();
    let binary = zscore_binarize(&global.scores);
    write_attribution(dir.path(), &global, &binary, None).unwrap();
    let (g, b, meta) = read_attribution(dir.path()).unwrap();
    assert_eq!(g, global);
    assert_eq!(b, binary);
    assert_eq!(meta.timesteps, 40);
}

proptest! {
    #[test]
    fn decoders_never_panic(bytes in proptest::collection::vec(any::<u8>(), 0..64), n in 0usize..10) {
        let _ = decode_f64s(&bytes, n);
        let _ = decode_binary_map(&bytes, n, 3);
        let _ = parse_dataset_meta(&bytes);
        let _ = parse_checkpoint_meta(&bytes);
    }

    #[test]
    fn finite_values_round_trip(values in proptest::collection::vec(-1e12f64..1e12, 0..50)) {
        prop_assert_eq!(decode_f64s(&encode_f64s(&values), values.len()).unwrap(), values);
    }
}
