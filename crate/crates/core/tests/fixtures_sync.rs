//! The shipped benchmark corpora must match the generator.
//!
//! Regenerate with `MCTAILOR_REGEN=1 cargo test --test fixtures_sync`.

use std::path::PathBuf;

use mctailor::fixtures::{benchmark, write_benchmark_files, BenchmarkSizes};

pub fn shipped_sizes() -> BenchmarkSizes {
    BenchmarkSizes {
        general: 5000,
        ..BenchmarkSizes::default()
    }
}

#[test]
fn shipped_benchmark_matches_generator() {
    let dir = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("fixtures/bench");
    let b = benchmark(0, &shipped_sizes()).unwrap();
    if std::env::var_os("MCTAILOR_REGEN").is_some() {
        write_benchmark_files(&b, &dir).unwrap();
    }
    let tmp = tempfile::tempdir().unwrap();
    write_benchmark_files(&b, tmp.path()).unwrap();
    for name in ["general.txt", "domain_train.txt", "domain_test.txt"] {
        let shipped = std::fs::read_to_string(dir.join(name)).unwrap();
        let fresh = std::fs::read_to_string(tmp.path().join(name)).unwrap();
        assert!(shipped == fresh, "{name} is stale; regenerate it");
    }
}
