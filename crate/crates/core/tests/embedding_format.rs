use std::fmt::Write as _;
use std::path::PathBuf;

use mahaguard::embedding::{decode_emb, encode_emb, read_csv_from};
use mahaguard::scorers::{score_md, score_rmd};
use mahaguard::stats::fit_gaussian_stats;
use mahaguard::{read_emb, write_emb, EmbeddingSet, Error, ShrinkageMode};
use ndarray::{array, Array2};
use proptest::prelude::*;

fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

fn finite_f64() -> impl Strategy<Value = f64> {
    prop_oneof![
        prop::num::f64::NORMAL | prop::num::f64::SUBNORMAL | prop::num::f64::ZERO,
        -10.0f64..10.0,
    ]
}

fn embedding_set() -> impl Strategy<Value = EmbeddingSet> {
    (1usize..12, 1usize..9, any::<bool>()).prop_flat_map(|(n, d, labeled)| {
        (
            prop::collection::vec(finite_f64(), n * d),
            prop::collection::vec(0usize..1000, n),
        )
            .prop_map(move |(values, labels)| {
                let data = Array2::from_shape_vec((n, d), values).unwrap();
                EmbeddingSet::new(data, labeled.then_some(labels)).unwrap()
            })
    })
}

fn bits(set: &EmbeddingSet) -> Vec<u64> {
    set.data().iter().map(|v| v.to_bits()).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn encode_decode_is_identity(set in embedding_set()) {
        let back = decode_emb(&encode_emb(&set).unwrap()).unwrap();
        prop_assert_eq!(bits(&back), bits(&set));
        prop_assert_eq!(back.labels(), set.labels());
        prop_assert_eq!(back.data().dim(), set.data().dim());
    }

    #[test]
    fn any_length_change_is_rejected(set in embedding_set(), cut in 1usize..64, extra in 1usize..16) {
        let bytes = encode_emb(&set).unwrap();
        let short = &bytes[..bytes.len().saturating_sub(cut)];
        let rejected = matches!(decode_emb(short), Err(Error::TruncatedFile { .. }));
        prop_assert!(rejected);
        let mut long = bytes.clone();
        long.extend(std::iter::repeat_n(0u8, extra));
        let rejected = matches!(decode_emb(&long), Err(Error::TruncatedFile { .. }));
        prop_assert!(rejected);
    }

    #[test]
    fn file_round_trip(set in embedding_set()) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("set.emb");
        write_emb(&set, &path).unwrap();
        let back = read_emb(&path).unwrap();
        prop_assert_eq!(bits(&back), bits(&set));
        prop_assert_eq!(back.labels(), set.labels());
    }
}

#[test]
fn golden_minimal_file() {
    let bytes = std::fs::read(fixture("minimal.emb")).unwrap();
    assert_eq!(bytes.len(), 22);
    let set = read_emb(fixture("minimal.emb")).unwrap();
    assert_eq!(set.data(), array![[0.5]]);
    assert!(set.labels().is_none());
    assert_eq!(encode_emb(&set).unwrap(), bytes);
}

#[test]
fn golden_labeled_file() {
    let bytes = std::fs::read(fixture("three_labeled.emb")).unwrap();
    let set = read_emb(fixture("three_labeled.emb")).unwrap();
    assert_eq!(set.data(), array![[1.0, -2.0], [0.25, 3.5], [-0.125, 1e-3]]);
    assert_eq!(set.labels(), Some(&[0usize, 1, 1][..]));
    assert_eq!(encode_emb(&set).unwrap(), bytes);
}

#[test]
fn corrupt_headers_are_rejected() {
    let good = std::fs::read(fixture("three_labeled.emb")).unwrap();
    let mut magic = good.clone();
    magic[0] = b'X';
    assert!(matches!(decode_emb(&magic), Err(Error::BadMagic { .. })));
    let mut version = good.clone();
    version[4] = 2;
    assert!(matches!(decode_emb(&version), Err(Error::UnsupportedVersion(2))));
    let mut nan = good.clone();
    nan[14..22].copy_from_slice(&f64::NAN.to_le_bytes());
    assert!(matches!(decode_emb(&nan), Err(Error::NonFiniteValue(0))));
    let mut negative = good;
    let last = negative.len() - 4;
    negative[last..].copy_from_slice(&(-1i32).to_le_bytes());
    assert!(matches!(decode_emb(&negative), Err(Error::LabelOutOfRange { row: 2, .. })));
}

#[test]
fn csv_and_binary_inputs_score_identically() {
    let mut state = 0x2545_f491_4f6c_dd1du64;
    let mut next = || {
        state ^= state << 13;
        state ^= state >> 7;
        state ^= state << 17;
        (state >> 11) as f64 / (1u64 << 53) as f64 * 8.0 - 4.0
    };
    let (n, d) = (60, 5);
    let data = Array2::from_shape_fn((n, d), |_| next());
    let labels: Vec<usize> = (0..n).map(|i| i % 3).collect();
    let set = EmbeddingSet::new(data, Some(labels)).unwrap();

    let mut csv = String::new();
    for (row, y) in set.data().rows().into_iter().zip(set.labels().unwrap()) {
        for v in row {
            write!(csv, "{v},").unwrap();
        }
        writeln!(csv, "{y}").unwrap();
    }
    let from_csv = read_csv_from(csv.as_bytes(), true).unwrap();
    let from_bin = decode_emb(&encode_emb(&set).unwrap()).unwrap();

    let (stats_csv, _) = fit_gaussian_stats(&from_csv, 3, ShrinkageMode::LedoitWolfAuto).unwrap();
    let (stats_bin, _) = fit_gaussian_stats(&from_bin, 3, ShrinkageMode::LedoitWolfAuto).unwrap();
    assert_eq!(stats_csv, stats_bin);
    assert_eq!(score_md(&from_csv, &stats_csv).unwrap(), score_md(&from_bin, &stats_bin).unwrap());
    assert_eq!(score_rmd(&from_csv, &stats_csv).unwrap(), score_rmd(&from_bin, &stats_bin).unwrap());
}
