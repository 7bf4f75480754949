//! The shipped config files resolve to the built-in presets.

use finsent::config::{Preset, RunConfig};

#[test]
fn shipped_configs_match_presets() {
    for (file, preset) in [
        ("configs/toy.conf", Preset::Toy),
        ("configs/paper.conf", Preset::Paper),
    ] {
        let text =
            std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/").to_owned() + file)
                .unwrap();
        assert_eq!(
            RunConfig::parse(&text).unwrap(),
            RunConfig::preset(preset),
            "{file}"
        );
    }
}

#[test]
fn toy_data_file_parses() {
    let path = concat!(env!("CARGO_MANIFEST_DIR"), "/data/toy_phrasebank.txt");
    let ex = finsent::dataset::load_phrasebank(path).unwrap();
    assert_eq!(ex.len(), 300);
}
