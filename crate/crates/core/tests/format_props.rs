//! SWT1 container round trips and rejection of corrupted files.

use ndarray::{Array2, Array3};
use proptest::prelude::*;
use synweather_core::swt1::{default_channel_names, NamedArray, Swt1};
use synweather_core::{load_field, save_field, Error, FieldFile, NormState, RegionId, SatelliteStack, VariableId, WeatherField};

fn doc() -> impl Strategy<Value = Swt1> {
    prop::collection::vec((1usize..5, 1usize..6, -1e6f32..1e6), 1..4).prop_map(|specs| {
        let arrays = specs
            .into_iter()
            .enumerate()
            .map(|(i, (a, b, base))| NamedArray::new(format!("a{i}"), vec![a, b], (0..a * b).map(|k| base + k as f32).collect()).unwrap())
            .collect();
        Swt1 { arrays, meta: serde_json::Map::new() }
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn bytes_round_trip_exactly(d in doc()) {
        let bytes = d.to_bytes().unwrap();
        let back = Swt1::from_bytes(&bytes).unwrap();
        prop_assert_eq!(&back.arrays, &d.arrays);
        prop_assert_eq!(back.to_bytes().unwrap(), bytes);
    }

    #[test]
    fn any_truncation_is_rejected(d in doc(), cut in 1usize..64) {
        let bytes = d.to_bytes().unwrap();
        let keep = bytes.len().saturating_sub(cut);
        prop_assert!(Swt1::from_bytes(&bytes[..keep]).is_err());
    }
}

#[test]
fn files_round_trip_byte_exact_with_metadata() {
    let dir = tempfile::tempdir().unwrap();
    let mut f = WeatherField::new(Array2::from_shape_fn((8, 12), |(r, c)| (r * 12 + c) as f32 * 0.25), RegionId::Europe, VariableId::Precipitation, 1_700_000_000).unwrap();
    f.norm = Some(NormState::new(0.0, 5.0, true).unwrap());
    let a = dir.path().join("a.swt1");
    let b = dir.path().join("b.swt1");
    save_field(&FieldFile::Weather(f.clone()), &a).unwrap();
    let back = load_field(&a).unwrap().into_weather().unwrap();
    assert_eq!(back, f);
    save_field(&FieldFile::Weather(back), &b).unwrap();
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());

    let s = SatelliteStack::new(Array3::from_elem((10, 4, 4), 250.0), default_channel_names(10), RegionId::EastAsia, 7).unwrap();
    save_field(&FieldFile::Satellite(s.clone()), &a).unwrap();
    assert_eq!(load_field(&a).unwrap().into_stack().unwrap(), s);
}

#[test]
fn corrupted_magic_and_truncation_name_their_errors() {
    let d = Swt1 { arrays: vec![NamedArray::new("x", vec![2, 2], vec![1.0; 4]).unwrap()], meta: serde_json::Map::new() };
    let mut bytes = d.to_bytes().unwrap();
    let short = &bytes[..bytes.len() - 3];
    let e = Swt1::from_bytes(short).unwrap_err();
    assert!(matches!(e, Error::PayloadLength(_)));
    assert!(e.to_string().starts_with("payload length mismatch"));
    bytes[3] = b'X';
    let e = Swt1::from_bytes(&bytes).unwrap_err();
    assert!(matches!(e, Error::BadMagic));
    assert_eq!(e.to_string(), "bad magic");
}
