use std::path::Path;

use omr_core::corpus::{ingest_records, SkipReason};

#[test]
fn hundred_lines_seven_malformed() {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/ingest_100.jsonl");
    let rep = ingest_records(&path, "fixture").unwrap();
    assert_eq!(rep.manifest.len(), 93);
    assert_eq!(rep.skip_count(), 7);
    assert_eq!(rep.count(SkipReason::Malformed), 7);
    let again = ingest_records(&path, "fixture").unwrap();
    assert_eq!(again.manifest.records, rep.manifest.records);
}
