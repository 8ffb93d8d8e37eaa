use std::path::{Path, PathBuf};
use std::process::Command;

fn plk() -> Command {
    Command::new(env!("CARGO_BIN_EXE_plk"))
}

fn scenario(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../scenarios").join(name)
}

fn run(verb: &str, config: &Path, seed: u64, out: &Path) -> i32 {
    let st = plk().args([verb, "--config"]).arg(config).args(["--seed", &seed.to_string(), "--out"]).arg(out).status().unwrap();
    st.code().unwrap()
}

fn write(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p
}

fn files(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut v: Vec<_> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (e.file_name().to_string_lossy().into_owned(), std::fs::read(e.path()).unwrap())
        })
        .collect();
    v.sort();
    v
}

#[test]
fn all_is_byte_identical_for_a_seed() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b, c) = (dir.path().join("a"), dir.path().join("b"), dir.path().join("c"));
    let cfg = scenario("quick.json");
    assert_eq!(run("all", &cfg, 11, &a), 0);
    assert_eq!(run("all", &cfg, 11, &b), 0);
    assert_eq!(run("all", &cfg, 12, &c), 0);
    let (fa, fb) = (files(&a), files(&b));
    assert_eq!(fa.len(), 10);
    assert_eq!(fa, fb);
    assert_ne!(fa, files(&c));
}

#[test]
fn each_verb_writes_its_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = scenario("quick.json");
    let expect: [(&str, &[&str]); 4] = [
        ("estimate", &["frrf_full.csv", "frrf_sparse.csv", "summary.json"]),
        ("design", &["summary.json"]),
        ("simulate", &["fusion_proactive.csv", "l1_proactive.csv", "trajectory_proactive.csv", "summary.json"]),
        ("sweep", &["sweep.csv", "summary.json"]),
    ];
    for (verb, names) in expect {
        let out = dir.path().join(verb);
        assert_eq!(run(verb, &cfg, 1, &out), 0, "{verb}");
        for n in names {
            assert!(out.join(n).exists(), "{verb} missing {n}");
        }
    }
    let header = std::fs::read_to_string(dir.path().join("simulate/trajectory_proactive.csv")).unwrap();
    assert!(header.starts_with("t,x1,x1dot,x2,x2dot,u,R\n"));
    let header = std::fs::read_to_string(dir.path().join("simulate/l1_proactive.csv")).unwrap();
    assert!(header.starts_with("t,x1,x1dot,x2,x2dot,u_m,u_ad,w_hat,sigma_hat,theta_hat_1,theta_hat_2,theta_hat_3,theta_hat_4\n"));
}

#[test]
fn default_scenario_file_matches_built_in_defaults() {
    let text = std::fs::read_to_string(scenario("default.json")).unwrap();
    let cfg = plk_core::harness::ScenarioConfig::from_json_str(&text).unwrap();
    assert_eq!(cfg, plk_core::harness::ScenarioConfig::default());
}

const SMALL: &str = r#""frrf": {"rows": 3, "cols": 3, "steps": 30, "burn_in": 5, "design_step": 20}"#;

#[test]
fn config_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let bad = write(dir.path(), "bad.json", r#"{"frrf": {"rank": 0}}"#);
    assert_eq!(run("estimate", &bad, 0, &dir.path().join("o1")), 2);
    let unknown = write(dir.path(), "unknown.json", r#"{"fruf": {}}"#);
    assert_eq!(run("estimate", &unknown, 0, &dir.path().join("o2")), 2);
    assert_eq!(run("estimate", &dir.path().join("missing.json"), 0, &dir.path().join("o3")), 2);
}

#[test]
fn infeasible_design_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let text = format!(
        r#"{{{SMALL},
        "design": {{"velocity": {{"omega_grid": 3, "ag_grid": 3, "k_candidates": 4, "scan_step": 2.0, "resolution": 0.1}}}},
        "runs": [{{"name": "dry", "area": 1, "truth": 23214.0,
                   "prior": {{"mean": 80000.0, "variance": 1937.0}}, "design": {{"mode": "optimize"}}}}]}}"#
    );
    let cfg = write(dir.path(), "inf.json", &text);
    let out = dir.path().join("o");
    assert_eq!(run("design", &cfg, 0, &out), 3);
    let summary = std::fs::read_to_string(out.join("summary.json")).unwrap();
    assert!(summary.contains("\"feasible\": false"));
}

#[test]
fn divergence_exits_4() {
    let dir = tempfile::tempdir().unwrap();
    let text = format!(
        r#"{{{SMALL},
        "simulation": {{"duration": 1.0, "dt": 0.001, "x0": [2e6, 0, 0, 0]}},
        "runs": [{{"name": "far", "area": 1, "truth": 23214.0,
                   "prior": {{"mean": 23240.0, "variance": 1937.0}}, "design": {{"mode": "fixed", "v": 12.96, "k": 10.0}}}}]}}"#
    );
    let cfg = write(dir.path(), "div.json", &text);
    assert_eq!(run("simulate", &cfg, 0, &dir.path().join("o")), 4);
}
