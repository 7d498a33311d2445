use std::fs;

use vsi_strain::io::{emit_trace, ingest_trace, load_config};
use vsi_strain::Error;

const CONFIG: &str = r#"{
  "model": {
    "rates": {"preset": "table2_no_strain"},
    "strain": {"preset": "table1_strain"},
    "efficiency": 0.8,
    "dark_rate": 7
  },
  "experiments": [
    "lifetime",
    {"kind": "repolarization", "init": "A1", "offres": "pump_50uw_no_strain", "durations": [1, 2, 4]}
  ],
  "seed": 11
}"#;

#[test]
fn config_file_to_traces_and_back() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("run.json");
    fs::write(&path, CONFIG).unwrap();
    let cfg = load_config(&path).unwrap();
    assert_eq!(cfg.seed, 11);
    let model = cfg.model_config().unwrap();
    assert_eq!(model.efficiency, 0.8);
    let experiments = cfg.resolved_experiments().unwrap();
    assert_eq!(experiments.len(), 2);
    for (k, e) in experiments.iter().enumerate() {
        let trace = e.simulate(&model).unwrap();
        let file = dir.path().join(format!("{k}.csv"));
        emit_trace(&file, &trace).unwrap();
        let back = ingest_trace(&file).unwrap();
        assert_eq!(back.times, trace.times);
        assert_eq!(back.pl, trace.pl);
        // Identical inputs give identical bytes.
        let again = dir.path().join(format!("{k}b.csv"));
        emit_trace(&again, &e.simulate(&model).unwrap()).unwrap();
        assert_eq!(fs::read(&file).unwrap(), fs::read(&again).unwrap());
    }
}

#[test]
fn rejected_configs_never_load() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.json");
    fs::write(&path, CONFIG.replace("\"efficiency\": 0.8", "\"efficiency\": 0")).unwrap();
    match load_config(&path) {
        Err(Error::InvalidParameter { name, .. }) => assert_eq!(name, "model.efficiency"),
        other => panic!("{other:?}"),
    }
    fs::write(&path, "").unwrap();
    assert!(matches!(load_config(&path), Err(Error::Config(_))));
}
