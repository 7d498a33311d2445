use serde_json::Value;
use vsi_strain::estimate::{abc_errors, rate_fit, ABCConfig, Dataset, FitOptions, FitProblem, FreeParam};
use vsi_strain::io::{
    experiment_preset, LineshapeResult, Provenance, ResultDocument, RunConfig, SweepResult, RESULT_SCHEMA,
};
use vsi_strain::repro::CriterionRow;
use vsi_strain::sequences::Excitation;

fn validator() -> jsonschema::Validator {
    let schema: Value = serde_json::from_str(RESULT_SCHEMA).unwrap();
    jsonschema::validator_for(&schema).unwrap()
}

fn check(doc: &ResultDocument) {
    let v: Value = serde_json::from_str(&doc.to_json().unwrap()).unwrap();
    let errors: Vec<String> = validator().iter_errors(&v).map(|e| format!("{e} at {}", e.instance_path)).collect();
    assert!(errors.is_empty(), "{errors:#?}");
}

#[test]
fn documents_of_every_command_validate() {
    let mut cfg = RunConfig::from_rates_preset("table2_no_strain");
    cfg.apply_preset("lifetime").unwrap();
    let model = cfg.model_config().unwrap();
    let experiments = ["lifetime", "lifetime_a2"].map(|n| experiment_preset(n).unwrap());
    let datasets: Vec<Dataset> =
        experiments.iter().map(|e| Dataset { experiment: e.clone(), trace: e.simulate(&model).unwrap() }).collect();

    let mut doc = ResultDocument::new(Some(cfg.clone()), Provenance::now(3, "simulate"));
    doc.traces = datasets.iter().map(|d| d.trace.clone()).collect();
    check(&doc);

    let problem = FitProblem { datasets, free_params: vec![FreeParam::new("gamma_r", 40.0, 80.0)], baseline: model };
    let opts = FitOptions { starts: 1, ..FitOptions::default() };
    let fit = rate_fit(&problem, &opts).unwrap();
    let abc = abc_errors(&problem, &fit, &ABCConfig { iterations: 50, ..ABCConfig::default() }).unwrap();
    doc.fit = Some(fit);
    doc.abc = Some(abc);
    doc.sweep = Some(SweepResult {
        excitation: Excitation::Offres,
        gamma_3: vec![1.0],
        gamma_4: vec![0.1, 0.2],
        change_pct: vec![vec![0.5, -0.5]],
    });
    doc.lineshape = Some(LineshapeResult {
        energies: vec![0.0, 1.0],
        a: vec![0.5, 0.5],
        norm: 1.0,
        first_moment: 0.5,
        relaxation_energy: 0.5,
        isc_rate: Some(2.0),
    });
    check(&doc);

    let mut repro = ResultDocument::new(None, Provenance::now(0, "paper-repro"));
    repro.acceptance = Some(vec![CriterionRow {
        id: 1,
        title: "t".into(),
        passed: true,
        informational: false,
        detail: "d".into(),
        seconds: 0.1,
    }]);
    check(&repro);
}

#[test]
fn schema_rejects_malformed_documents() {
    let doc = ResultDocument::new(None, Provenance::now(0, "x"));
    let mut v: Value = serde_json::from_str(&doc.to_json().unwrap()).unwrap();
    assert!(validator().is_valid(&v));
    v["schema_version"] = Value::from(2);
    assert!(!validator().is_valid(&v));
    v["schema_version"] = Value::from(1);
    v.as_object_mut().unwrap().remove("provenance");
    assert!(!validator().is_valid(&v));
}
