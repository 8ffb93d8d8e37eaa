use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{HarnessError, Summary};
use crate::l1ac::TraceSample;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FrrfRow {
    pub k: u64,
    pub area: usize,
    pub q_hat: f64,
    pub p_q: f64,
    pub truth: f64,
    pub error: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FusionRow {
    pub t: f64,
    #[serde(rename = "C_post_mean")]
    pub c_post_mean: f64,
    #[serde(rename = "C_post_var")]
    pub c_post_var: f64,
    pub k_current: f64,
}

/// One point of the `V*(Ĉ)` curve; `v_star` is empty where no feasible
/// velocity exists, and `g_norm` then holds the smallest norm found.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    #[serde(rename = "C_hat")]
    pub c_hat: f64,
    #[serde(rename = "V_star")]
    pub v_star: Option<f64>,
    pub k_star: Option<f64>,
    pub g_norm: f64,
}

#[derive(Serialize)]
struct TrajectoryRow {
    t: f64,
    x1: f64,
    x1dot: f64,
    x2: f64,
    x2dot: f64,
    u: f64,
    #[serde(rename = "R")]
    r: Option<f64>,
}

#[derive(Serialize)]
struct L1Row {
    t: f64,
    x1: f64,
    x1dot: f64,
    x2: f64,
    x2dot: f64,
    u_m: f64,
    u_ad: f64,
    w_hat: f64,
    sigma_hat: f64,
    theta_hat_1: f64,
    theta_hat_2: f64,
    theta_hat_3: f64,
    theta_hat_4: f64,
}

fn write_rows<T: Serialize>(path: &Path, rows: impl IntoIterator<Item = T>) -> Result<(), HarnessError> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub(super) fn write_frrf(path: &Path, rows: &[FrrfRow]) -> Result<(), HarnessError> {
    write_rows(path, rows)
}

pub(super) fn write_fusion(path: &Path, rows: &[FusionRow]) -> Result<(), HarnessError> {
    write_rows(path, rows)
}

pub(super) fn write_sweep(path: &Path, rows: &[SweepRow]) -> Result<(), HarnessError> {
    write_rows(path, rows)
}

pub(super) fn write_trajectory(path: &Path, samples: &[TraceSample]) -> Result<(), HarnessError> {
    write_rows(
        path,
        samples.iter().map(|s| TrajectoryRow { t: s.t, x1: s.x.x1, x1dot: s.x.x1dot, x2: s.x.x2, x2dot: s.x.x2dot, u: s.u, r: s.radius }),
    )
}

pub(super) fn write_l1_trace(path: &Path, samples: &[TraceSample]) -> Result<(), HarnessError> {
    write_rows(
        path,
        samples.iter().map(|s| L1Row {
            t: s.t,
            x1: s.x.x1,
            x1dot: s.x.x1dot,
            x2: s.x.x2,
            x2dot: s.x.x2dot,
            u_m: s.u_m,
            u_ad: s.u_ad,
            w_hat: s.w_hat,
            sigma_hat: s.sigma_hat,
            theta_hat_1: s.theta_hat[0],
            theta_hat_2: s.theta_hat[1],
            theta_hat_3: s.theta_hat[2],
            theta_hat_4: s.theta_hat[3],
        }),
    )
}

pub(super) fn write_summary(path: &Path, summary: &Summary) -> Result<(), HarnessError> {
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut w, summary).map_err(|e| HarnessError::Io(e.to_string()))?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn headers_match_schemas() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("s.csv");
        write_sweep(&p, &[SweepRow { c_hat: 1.0, v_star: None, k_star: Some(2.0), g_norm: 0.5 }]).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        assert_eq!(text, "C_hat,V_star,k_star,g_norm\n1.0,,2.0,0.5\n");

        write_fusion(&p, &[FusionRow { t: 0.0, c_post_mean: 1.0, c_post_var: 2.0, k_current: 10.0 }]).unwrap();
        assert!(std::fs::read_to_string(&p).unwrap().starts_with("t,C_post_mean,C_post_var,k_current\n"));

        write_frrf(&p, &[FrrfRow { k: 1, area: 2, q_hat: 0.0, p_q: 0.0, truth: 0.0, error: 0.0 }]).unwrap();
        assert!(std::fs::read_to_string(&p).unwrap().starts_with("k,area,q_hat,p_q,truth,error\n"));
    }
}
