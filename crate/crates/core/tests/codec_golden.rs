//! Range-coder bitstreams for fixed integer tables, compared byte for byte
//! with committed fixtures. Set `NTC_WRITE_GOLDEN=1` to regenerate them.

mod common;

#[test]
fn skewed_table_stream_matches_fixture() {
    common::golden_skewed().unwrap();
}

#[test]
fn alternating_tables_stream_matches_fixture() {
    common::golden_alternating().unwrap();
}

#[test]
fn one_count_symbols_only_stream_matches_fixture() {
    common::golden_rare().unwrap();
}
