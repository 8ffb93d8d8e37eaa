//! Every emitted file parses back with the documented columns.

use std::path::Path;

use plk_core::harness::{execute, FrrfRow, FusionRow, ScenarioConfig, SweepRow, Verb};

fn quick() -> ScenarioConfig {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../scenarios/quick.json");
    ScenarioConfig::from_path(&path).unwrap()
}

fn rows<T: serde::de::DeserializeOwned>(path: &Path) -> Vec<T> {
    let mut r = csv::Reader::from_path(path).unwrap();
    r.deserialize().map(|x| x.unwrap()).collect()
}

fn numeric_table(path: &Path, header: &str) -> Vec<Vec<f64>> {
    let mut r = csv::Reader::from_path(path).unwrap();
    let h: Vec<_> = r.headers().unwrap().iter().map(str::to_owned).collect();
    assert_eq!(h.join(","), header, "{}", path.display());
    r.records()
        .map(|rec| {
            let rec = rec.unwrap();
            assert_eq!(rec.len(), h.len());
            rec.iter().filter(|f| !f.is_empty()).map(|f| f.parse::<f64>().unwrap()).collect()
        })
        .collect()
}

#[test]
fn all_outputs_parse_back() {
    let cfg = quick();
    let dir = tempfile::tempdir().unwrap();
    let summary = execute(Verb::All, &cfg, 5, dir.path()).unwrap();
    assert_eq!(summary.exit_code, 0);

    for name in ["frrf_sparse.csv", "frrf_full.csv"] {
        let r: Vec<FrrfRow> = rows(&dir.path().join(name));
        assert_eq!(r.len(), cfg.frrf.steps as usize * cfg.frrf.rows * cfg.frrf.cols);
        assert!(r
            .iter()
            .all(|x| x.q_hat.is_finite() && x.p_q > 0.0 && (x.error - (x.truth - x.q_hat)).abs() < 1e-6 * (1.0 + x.truth.abs())));
    }

    for run in &cfg.runs {
        let traj = numeric_table(&dir.path().join(format!("trajectory_{}.csv", run.name)), "t,x1,x1dot,x2,x2dot,u,R");
        let l1 = numeric_table(
            &dir.path().join(format!("l1_{}.csv", run.name)),
            "t,x1,x1dot,x2,x2dot,u_m,u_ad,w_hat,sigma_hat,theta_hat_1,theta_hat_2,theta_hat_3,theta_hat_4",
        );
        assert_eq!(traj.len(), l1.len());
        assert!(traj.len() > 1);
        for (a, b) in traj.iter().zip(&l1) {
            assert_eq!(a[..5], b[..5]);
            assert!(a.iter().chain(b).all(|v| v.is_finite()));
        }
        assert!(traj.windows(2).all(|w| w[1][0] > w[0][0]));

        let fusion: Vec<FusionRow> = rows(&dir.path().join(format!("fusion_{}.csv", run.name)));
        assert!(!fusion.is_empty());
        assert!(fusion.windows(2).all(|w| w[1].c_post_var <= w[0].c_post_var && w[1].t > w[0].t));
    }

    let sweep: Vec<SweepRow> = rows(&dir.path().join("sweep.csv"));
    assert_eq!(sweep.len(), cfg.sweep.points);
    assert!(sweep.iter().all(|r| r.g_norm.is_finite() && r.v_star.is_some() == r.k_star.is_some()));

    let json: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(dir.path().join("summary.json")).unwrap()).unwrap();
    for key in ["scenario", "seed", "verb", "estimate", "designs", "runs", "sweep", "exit_code"] {
        assert!(json.get(key).is_some(), "summary.json lacks {key}");
    }
}
