use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn cli(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_vsi-strain"))
        .args(args)
        .current_dir(dir)
        .env_remove("STRAINSPIN_WORKERS")
        .output()
        .unwrap()
}

fn text(bytes: &[u8]) -> String {
    String::from_utf8_lossy(bytes).into_owned()
}

fn read_csv(path: &Path) -> (Vec<f64>, Vec<f64>) {
    let mut t = Vec::new();
    let mut p = Vec::new();
    for line in fs::read_to_string(path).unwrap().lines().skip(1) {
        let mut cells = line.split(',');
        t.push(cells.next().unwrap().parse().unwrap());
        p.push(cells.next().unwrap().parse().unwrap());
    }
    (t, p)
}

fn csv_files(dir: &Path) -> Vec<PathBuf> {
    let mut v: Vec<PathBuf> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|e| e == "csv"))
        .collect();
    v.sort();
    v
}

#[test]
fn unknown_subcommand_prints_usage_and_exits_1() {
    let dir = tempfile::tempdir().unwrap();
    let out = cli(&["frobnicate"], dir.path());
    assert_eq!(out.status.code(), Some(1));
    assert!(text(&out.stderr).contains("Usage"), "{}", text(&out.stderr));
    let help = cli(&["--help"], dir.path());
    assert_eq!(help.status.code(), Some(0));
    assert!(text(&help.stdout).contains("paper-repro"));
}

#[test]
fn simulate_lifetime_preset_decays_at_total_rate() {
    let dir = tempfile::tempdir().unwrap();
    let out = cli(&["simulate", "--preset", "lifetime", "--out", "run"], dir.path());
    assert_eq!(out.status.code(), Some(0), "{}", text(&out.stderr));
    let files = csv_files(&dir.path().join("run"));
    assert_eq!(files.len(), 1);
    let (t, p) = read_csv(&files[0]);
    // Log-linear least squares over the decay tail.
    let pts: Vec<(f64, f64)> =
        t.iter().zip(&p).filter(|(t, p)| **t > 0.005 && **p > 0.0).map(|(t, p)| (*t, p.ln())).collect();
    let n = pts.len() as f64;
    let (sx, sy) = pts.iter().fold((0.0, 0.0), |a, (x, y)| (a.0 + x, a.1 + y));
    let (mx, my) = (sx / n, sy / n);
    let slope = pts.iter().map(|(x, y)| (x - mx) * (y - my)).sum::<f64>()
        / pts.iter().map(|(x, _)| (x - mx).powi(2)).sum::<f64>();
    // Γ₁ = γ_r + γ₁ + γ₁' of the no-strain preset (MHz).
    let gamma_1 = 56.39 + 55.38 + 54.62;
    assert!((-slope / gamma_1 - 1.0).abs() < 0.01, "rate {} vs {gamma_1}", -slope);
    let doc: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("run/result.json")).unwrap()).unwrap();
    assert_eq!(doc["schema_version"], 1);
    assert_eq!(doc["provenance"]["command"], "simulate");
}

#[test]
fn same_seed_same_bytes() {
    let dir = tempfile::tempdir().unwrap();
    let run = |seed: &str, out: &str| {
        let o = cli(
            &["simulate", "--preset", "visibility", "--repetitions", "50", "--seed", seed, "--out", out],
            dir.path(),
        );
        assert_eq!(o.status.code(), Some(0), "{}", text(&o.stderr));
        fs::read(&csv_files(&dir.path().join(out))[0]).unwrap()
    };
    let a = run("5", "a");
    assert_eq!(a, run("5", "b"));
    assert_ne!(a, run("6", "c"));
}

#[test]
fn config_errors_exit_1_with_location() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("empty.json"), "").unwrap();
    let out = cli(&["simulate", "empty.json"], dir.path());
    assert_eq!(out.status.code(), Some(1));
    assert!(text(&out.stderr).contains("required keys"), "{}", text(&out.stderr));

    fs::write(
        dir.path().join("bad.json"),
        "{\n  \"model\": {\"rates\": {\"preset\": \"table2_no_strain\"}},\n  \"experiment\": lifetime\n}",
    )
    .unwrap();
    let out = cli(&["simulate", "bad.json"], dir.path());
    assert_eq!(out.status.code(), Some(1));
    assert!(text(&out.stderr).contains("bad.json:3:"), "{}", text(&out.stderr));

    let out = cli(&["simulate", "--preset", "no_such_thing"], dir.path());
    assert_eq!(out.status.code(), Some(1));
    assert!(text(&out.stderr).contains("no_such_thing"));
    assert!(!dir.path().join("out").exists());
}

#[test]
fn worker_override_is_validated() {
    let dir = tempfile::tempdir().unwrap();
    let run = |v: &str| {
        Command::new(env!("CARGO_BIN_EXE_vsi-strain"))
            .args(["simulate", "--preset", "lifetime", "--out", "w"])
            .current_dir(dir.path())
            .env("STRAINSPIN_WORKERS", v)
            .output()
            .unwrap()
    };
    assert_eq!(run("0").status.code(), Some(1));
    assert_eq!(run("many").status.code(), Some(1));
    assert_eq!(run("2").status.code(), Some(0));
}

#[test]
fn fit_then_abc_from_files() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    let config = r#"{
  "model": {"rates": {"preset": "table2_no_strain", "gamma_r": 50}},
  "experiments": ["lifetime", "lifetime_a2"],
  "fit": {"free_params": [{"name": "gamma_r", "lower": 30, "upper": 80}], "options": {"starts": 2}},
  "abc": {"iterations": 200}
}"#;
    fs::write(p.join("fit.json"), config).unwrap();
    fs::write(p.join("truth.json"), config.replace("\"gamma_r\": 50", "\"gamma_r\": 56.39")).unwrap();
    let sim = cli(&["simulate", "truth.json", "--out", "data"], p);
    assert_eq!(sim.status.code(), Some(0), "{}", text(&sim.stderr));
    let data = csv_files(&p.join("data"));
    let mut args = vec!["fit", "fit.json"];
    let names: Vec<String> = data.iter().map(|d| d.to_string_lossy().into_owned()).collect();
    args.extend(names.iter().map(String::as_str));
    args.extend(["--out", "fitted", "--seed", "1"]);
    let fit = cli(&args, p);
    assert_eq!(fit.status.code(), Some(0), "{}", text(&fit.stderr));
    let doc: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(p.join("fitted/result.json")).unwrap()).unwrap();
    let g = doc["fit"]["best_params"][0].as_f64().unwrap();
    assert!((g / 56.39 - 1.0).abs() < 1e-4, "{g}");

    let abc = cli(&["abc", "fit.json", "fitted/result.json", "--out", "abc", "--seed", "2"], p);
    assert_eq!(abc.status.code(), Some(0), "{}", text(&abc.stderr));
    let doc: serde_json::Value = serde_json::from_str(&fs::read_to_string(p.join("abc/result.json")).unwrap()).unwrap();
    let ci = &doc["abc"]["params"][0]["ci"];
    assert!(ci[0].as_f64().unwrap() <= 56.39 && 56.39 <= ci[1].as_f64().unwrap(), "{ci}");
    assert!(p.join("abc/abc_samples.csv").exists());

    // Data count must match the configured experiments.
    let short = cli(&["fit", "fit.json", &names[0], "--out", "x"], p);
    assert_eq!(short.status.code(), Some(1));
}

#[test]
fn sweep_and_lineshape_write_csv() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    fs::write(
        p.join("sweep.json"),
        r#"{"model": {"rates": {"preset": "table2_no_strain"}},
            "sweep": {"gamma_3": [1.0, 3.81], "gamma_4": [0.24], "excitation": "offres", "window": 5},
            "output": {"directory": "s", "formats": ["csv"]}}"#,
    )
    .unwrap();
    let out = cli(&["sweep", "sweep.json"], p);
    assert_eq!(out.status.code(), Some(0), "{}", text(&out.stderr));
    let csv = fs::read_to_string(p.join("s/sweep.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "gamma_3_mhz,gamma_4_mhz,emission_change_pct");
    assert_eq!(lines.len(), 3);
    // The base point itself changes nothing.
    assert_eq!(lines[2], "3.81,0.24,0");
    assert!(!p.join("s/result.json").exists());

    fs::write(p.join("modes.csv"), "omega_mev,sigma_mev,s_k\n30,2,0.5\n60,2,0.3\n").unwrap();
    fs::write(
        p.join("ls.json"),
        r#"{"model": {"rates": {"preset": "table2_no_strain"}},
            "lineshape": {"modes_csv": "modes.csv", "grid": {"min": -1500, "max": 2000, "step": 0.5},
                          "isc": {"lambda": 0.05, "delta": 40}}}"#,
    )
    .unwrap();
    let out = cli(&["lineshape", "ls.json", "--out", "l"], p);
    assert_eq!(out.status.code(), Some(0), "{}", text(&out.stderr));
    assert!(text(&out.stdout).contains("ISC rate"));
    let doc: serde_json::Value = serde_json::from_str(&fs::read_to_string(p.join("l/result.json")).unwrap()).unwrap();
    assert!((doc["lineshape"]["norm"].as_f64().unwrap() - 1.0).abs() < 1e-3);
    assert!((doc["lineshape"]["relaxation_energy"].as_f64().unwrap() - 33.0).abs() < 1e-12);
}

#[test]
fn strain_fit_from_observables() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(
        dir.path().join("strain.json"),
        r#"{"model": {"rates": {"preset": "table2_no_strain"}},
            "strain_fit": {"observables": {"odmr_peak": 73.02, "p32_after_a1": 0.9, "p12_after_a2": 0.9},
                           "options": {"fit": {"starts": 1}}}}"#,
    )
    .unwrap();
    let out = cli(&["fit", "strain.json", "--out", "st"], dir.path());
    assert_eq!(out.status.code(), Some(0), "{}", text(&out.stderr));
    assert!(text(&out.stdout).contains("pi_z"));
}
