//! Replays the checked-in fuzz corpus, and random mutations of it, through
//! the same round-trip checks the fuzz targets make.

use std::path::PathBuf;

use darcy_core::domain::DomainSpec;
use darcy_core::fdsolver::{decode_field, FieldHeader};
use darcy_core::harness::{aggregate_records, ExperimentConfig};
use darcy_core::pointprocess::{RadiiLaw, Realization};
use proptest::prelude::*;

fn check_realization(data: &[u8]) -> bool {
    let Ok(text) = std::str::from_utf8(data) else { return false };
    match Realization::from_dump(text) {
        Ok(real) => {
            assert_eq!(Realization::from_dump(&real.to_dump()).unwrap(), real);
            true
        }
        Err(_) => false,
    }
}

fn check_config(data: &[u8]) -> bool {
    let Ok(text) = std::str::from_utf8(data) else { return false };
    match ExperimentConfig::parse(text, None) {
        Ok(config) => {
            let echo: String = config.echo().iter().map(|(k, v)| format!("{k} = {v}\n")).collect();
            assert_eq!(ExperimentConfig::parse(&echo, None).unwrap(), config);
            true
        }
        Err(_) => false,
    }
}

fn check_sidecar(data: &[u8]) -> bool {
    let split = data.first().map_or(0, |&b| b as usize).min(data.len().saturating_sub(1));
    let (head, body) = data.get(1..).unwrap_or_default().split_at(split);
    let Ok(text) = std::str::from_utf8(head) else { return false };
    let Ok(header) = text.parse::<FieldHeader>() else { return false };
    assert_eq!(header.to_string().parse::<FieldHeader>().unwrap(), header);
    match decode_field(&header, body) {
        Ok(values) => {
            assert_eq!(Some(values.len()), header.node_count());
            true
        }
        Err(_) => false,
    }
}

fn check_csv(data: &[u8]) -> bool {
    let Ok(text) = std::str::from_utf8(data) else { return false };
    let mut lines = text.lines().map(|l| l.split(',').map(String::from).collect::<Vec<_>>());
    let Some(header) = lines.next() else { return false };
    let rows: Vec<Vec<String>> = lines.collect();
    match aggregate_records(&header, &rows) {
        Ok(report) => {
            assert!(header.contains(&report.scale_column));
            true
        }
        Err(_) => false,
    }
}

fn check_law_domain(data: &[u8]) -> bool {
    let Ok(text) = std::str::from_utf8(data) else { return false };
    let mut ok = false;
    if let Ok(law) = text.parse::<RadiiLaw>() {
        assert!(law.validate().is_ok());
        assert_eq!(law.to_string().parse::<RadiiLaw>(), Ok(law));
        ok = true;
    }
    if let Ok(domain) = text.parse::<DomainSpec>() {
        assert!(domain.validate().is_ok());
        assert_eq!(domain.to_string().parse::<DomainSpec>(), Ok(domain));
        ok = true;
    }
    ok
}

type Check = fn(&[u8]) -> bool;

const TARGETS: [(&str, Check); 5] = [
    ("realization_dump", check_realization),
    ("config", check_config),
    ("field_sidecar", check_sidecar),
    ("aggregate_csv", check_csv),
    ("law_domain", check_law_domain),
];

fn corpus(target: &str) -> Vec<(String, Vec<u8>)> {
    let dir = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("fuzz/corpus").join(target);
    let mut files: Vec<(String, Vec<u8>)> = std::fs::read_dir(&dir)
        .unwrap_or_else(|e| panic!("{}: {e}", dir.display()))
        .map(|e| {
            let p = e.unwrap().path();
            (p.file_name().unwrap().to_string_lossy().into_owned(), std::fs::read(&p).unwrap())
        })
        .collect();
    files.sort();
    files
}

#[test]
fn corpus_seeds_parse_as_labelled() {
    // seeds named after a defect must be rejected, every other seed accepted
    let rejected = ["bad_mark", "count_mismatch", "bad_alpha", "duplicate_key", "short_body", "missing_body", "ragged", "uniform_bad", "box_inverted"];
    for (target, check) in TARGETS {
        let seeds = corpus(target);
        assert!(!seeds.is_empty(), "no seeds for {target}");
        for (name, bytes) in seeds {
            let expect = !rejected.contains(&name.as_str());
            assert_eq!(check(&bytes), expect, "{target}/{name}");
        }
    }
}

fn all_seeds() -> Vec<(usize, Vec<u8>)> {
    TARGETS.iter().enumerate().flat_map(|(i, (t, _))| corpus(t).into_iter().map(move |(_, b)| (i, b))).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(512))]

    #[test]
    fn mutated_seeds_never_panic(
        pick in any::<prop::sample::Index>(),
        edits in prop::collection::vec((any::<prop::sample::Index>(), any::<u8>(), 0u8..3), 1..6),
    ) {
        let seeds = all_seeds();
        let (target, mut bytes) = seeds[pick.index(seeds.len())].clone();
        for (at, byte, op) in edits {
            let i = at.index(bytes.len() + 1);
            match op {
                0 if i < bytes.len() => bytes[i] = byte,
                1 => bytes.insert(i, byte),
                _ if i < bytes.len() => { bytes.remove(i); }
                _ => bytes.push(byte),
            }
        }
        TARGETS[target].1(&bytes);
    }

    #[test]
    fn arbitrary_bytes_never_panic(data in prop::collection::vec(any::<u8>(), 0..256)) {
        for (_, check) in TARGETS {
            check(&data);
        }
    }
}
