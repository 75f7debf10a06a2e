use tidyloop::config::{BackendKind, EngineConfig};
use tidyloop::formats::BenchSpec;

#[test]
fn empty_file_is_the_default() {
    assert_eq!(EngineConfig::parse("").unwrap(), EngineConfig::default());
    let d = EngineConfig::default();
    assert_eq!(d.loop_budget, 5);
    assert_eq!(d.remote.temperature, 0.0);
    assert_eq!(d.remote.timeout_secs, 30);
}

#[test]
fn every_section_parses() {
    let cfg = EngineConfig::parse(
        r#"
backend = "remote"
seed = 3
loop_budget = 7

[synthesis]
seed = 99

[synthesis.weights]
w_manhattan = 2.0
w_area = 1.0
w_orth = 1.0
w_collision = 10.0
w_stability = 1.0

[server]
port = 9000
"#,
    )
    .unwrap();
    assert_eq!(cfg.backend, BackendKind::Remote);
    assert_eq!(cfg.loop_budget, 7);
    assert_eq!(cfg.server.port, 9000);
    assert_eq!(cfg.synthesis.weights.w_manhattan, 2.0);
    // the engine seed wins over the synthesis section
    assert_eq!(cfg.loop_config().synthesis.seed, 3);
    assert_eq!(cfg.loop_config().budget, 7);
}

#[test]
fn hash_tracks_content() {
    let a = EngineConfig::default();
    let mut b = a.clone();
    assert_eq!(a.hash(), b.hash());
    b.seed = 1;
    assert_ne!(a.hash(), b.hash());
}

#[test]
fn bench_spec_in_both_syntaxes() {
    let t = BenchSpec::parse("activity = \"pack_unpack\"\nseeds = 4\n", "s.toml".as_ref()).unwrap();
    let j = BenchSpec::parse(r#"{"activity": "pack_unpack", "seeds": 4}"#, "s.json".as_ref()).unwrap();
    assert_eq!(t, j);
    assert_eq!(t.held_out, 2);
    assert!(t.activity().is_ok());
    assert!(BenchSpec::parse("activity = \"juggle\"\n", "s.toml".as_ref()).unwrap().activity().is_err());
    assert!(BenchSpec::parse("activity = \"tidy\"\nseeds = 0\n", "s.toml".as_ref()).is_err());
}
