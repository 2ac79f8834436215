// Regenerates the checked-in default config when invoked explicitly:
//   cargo test -p prw-core --test gen_default_config -- --ignored --nocapture
use prw_core::config::RunConfig;

#[test]
fn default_config_matches_the_checked_in_file() {
    let want = RunConfig::toy_default().to_toml_string();
    let path = concat!(env!("CARGO_MANIFEST_DIR"), "/../../configs/toy.toml");
    let have = std::fs::read_to_string(path).expect("configs/toy.toml missing");
    assert_eq!(have, want, "configs/toy.toml drifted from RunConfig::toy_default()");
}

#[test]
#[ignore]
fn regenerate() {
    let path = concat!(env!("CARGO_MANIFEST_DIR"), "/../../configs/toy.toml");
    std::fs::write(path, RunConfig::toy_default().to_toml_string()).unwrap();
}
