//! Scenario files: typed configuration plus load-time validation that
//! reports the offending JSON path.

use std::collections::{BTreeMap, HashSet};
use std::path::Path;

use nalgebra::{Matrix4, Vector4};
use serde::{Deserialize, Serialize};

use super::HarnessError;
use crate::codesign::{reference_k_m, VelocityDesignConfig, DEFAULT_POLES};
use crate::frrf::sim::{ArrivalModel, InputWaveform};
use crate::frrf::{AreaId, PriorDistribution};
use crate::fusion::GainSearch;
use crate::l1ac::ClosedLoopOptions;
use crate::vehicle::{check_assumptions, RoadProfile, VehicleParams};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WeatherSpec {
    pub lo: f64,
    pub hi: f64,
    /// Areas whose forecast stays constant over time.
    pub fixed: BTreeMap<AreaId, f64>,
}

impl Default for WeatherSpec {
    fn default() -> Self {
        Self { lo: 19_000.0, hi: 84_000.0, fixed: BTreeMap::from([(AreaId(1), 51_867.0), (AreaId(2), 23_214.0)]) }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FrrfScenario {
    pub rows: usize,
    pub cols: usize,
    pub rank: usize,
    pub p_eps: f64,
    pub p_xi: f64,
    /// Scalar multiple of the identity.
    pub p_zeta: f64,
    pub p0: f64,
    pub weather: WeatherSpec,
    pub input: InputWaveform,
    /// Sparse reporting.
    pub arrivals: ArrivalModel,
    /// The better-measured comparison run.
    pub full_arrivals: ArrivalModel,
    pub steps: u64,
    /// Steps excluded from the averaged metrics.
    pub burn_in: u64,
    /// Step whose query estimates serve as controller priors.
    pub design_step: u64,
}

impl Default for FrrfScenario {
    fn default() -> Self {
        Self {
            rows: 5,
            cols: 5,
            rank: 4,
            p_eps: 10.0,
            p_xi: 100.0,
            p_zeta: 100.0,
            p0: 1000.0,
            weather: WeatherSpec::default(),
            input: InputWaveform::Sinusoid { amplitude: 100.0, half_period: 25.0 },
            arrivals: ArrivalModel::Poisson { mean_interarrival: 20.0 },
            full_arrivals: ArrivalModel::Anchored { always: vec![AreaId(1), AreaId(2)], mean_interarrival: 20.0 },
            steps: 100,
            burn_in: 10,
            design_step: 50,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DesignScenario {
    pub velocity: VelocityDesignConfig,
    pub poles: [f64; 4],
    /// Shared state-feedback gain; pole placement is used when absent.
    pub k_m: Option<[f64; 4]>,
}

impl Default for DesignScenario {
    fn default() -> Self {
        Self { velocity: VelocityDesignConfig::default(), poles: DEFAULT_POLES, k_m: Some(reference_k_m().into()) }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ControllerScenario {
    pub gamma: f64,
    pub proj_eps: f64,
}

impl Default for ControllerScenario {
    fn default() -> Self {
        Self { gamma: 100_000.0, proj_eps: 0.1 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FusionScenario {
    pub enabled: bool,
    /// Seconds between on-board readings.
    pub period: f64,
    pub measurement_variance: f64,
    pub search: GainSearch,
}

impl Default for FusionScenario {
    fn default() -> Self {
        Self { enabled: true, period: 0.5, measurement_variance: 1.0e6, search: GainSearch::default() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepScenario {
    pub c_min: f64,
    pub c_max: f64,
    pub points: usize,
    /// Prior variance used at every sampled nominal stiffness.
    pub variance: f64,
}

impl Default for SweepScenario {
    fn default() -> Self {
        Self { c_min: 20_000.0, c_max: 80_000.0, points: 13, variance: 1413.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum PriorSource {
    Explicit {
        mean: f64,
        variance: f64,
    },
    /// `"filter"`: the estimate at the design step of the prior run.
    Filter(FilterTag),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FilterTag {
    Filter,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case", deny_unknown_fields)]
pub enum DesignMode {
    /// Velocity and filter gain from the co-design program.
    Optimize,
    /// Injected velocity and filter gain; `p` is row-major and designed when absent.
    Fixed { v: f64, k: f64, k_m: Option<[f64; 4]>, p: Option<[[f64; 4]; 4]> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSpec {
    pub name: String,
    pub area: AreaId,
    /// True `C_f`; also `C_r` unless `truth_r` is given.
    pub truth: f64,
    #[serde(default)]
    pub truth_r: Option<f64>,
    pub prior: PriorSource,
    pub design: DesignMode,
}

impl RunSpec {
    pub fn truth_r(&self) -> f64 {
        self.truth_r.unwrap_or(self.truth)
    }
}

fn reference_p1() -> [[f64; 4]; 4] {
    [
        [1.9111, 0.0053, 0.3485, 0.0090],
        [0.0053, 0.0196, -0.0052, -0.0294],
        [0.3485, -0.0052, 5.2183, 0.0438],
        [0.0090, -0.0294, 0.0438, 0.0543],
    ]
}

fn default_runs() -> Vec<RunSpec> {
    let fixed = |v: f64, p: Option<[[f64; 4]; 4]>| DesignMode::Fixed { v, k: 10.0, k_m: None, p };
    let explicit = |mean: f64, variance: f64| PriorSource::Explicit { mean, variance };
    vec![
        RunSpec {
            name: "area1_proactive".into(),
            area: AreaId(1),
            truth: 51_867.0,
            truth_r: None,
            prior: explicit(51_826.0, 1413.0),
            design: fixed(18.61, Some(reference_p1())),
        },
        RunSpec {
            name: "area2_proactive".into(),
            area: AreaId(2),
            truth: 23_214.0,
            truth_r: None,
            prior: explicit(23_240.0, 1937.0),
            design: fixed(12.96, None),
        },
        RunSpec {
            name: "area2_nonproactive".into(),
            area: AreaId(2),
            truth: 23_214.0,
            truth_r: None,
            prior: explicit(60_000.0, 1937.0),
            design: fixed(22.96, None),
        },
        RunSpec {
            name: "area2_dry".into(),
            area: AreaId(2),
            truth: 23_214.0,
            truth_r: None,
            prior: explicit(80_000.0, 1937.0),
            design: fixed(22.96, None),
        },
    ]
}

fn default_name() -> String {
    "default".into()
}

fn default_road() -> RoadProfile {
    RoadProfile::winding()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    #[serde(default = "default_name")]
    pub name: String,
    #[serde(default)]
    pub frrf: FrrfScenario,
    #[serde(default)]
    pub vehicle: VehicleParams,
    #[serde(default = "default_road")]
    pub road: RoadProfile,
    #[serde(default)]
    pub design: DesignScenario,
    #[serde(default)]
    pub controller: ControllerScenario,
    #[serde(default)]
    pub simulation: ClosedLoopOptions,
    #[serde(default)]
    pub fusion: FusionScenario,
    #[serde(default = "default_runs")]
    pub runs: Vec<RunSpec>,
    #[serde(default)]
    pub sweep: SweepScenario,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            name: default_name(),
            frrf: FrrfScenario::default(),
            vehicle: VehicleParams::default(),
            road: default_road(),
            design: DesignScenario::default(),
            controller: ControllerScenario::default(),
            simulation: ClosedLoopOptions::default(),
            fusion: FusionScenario::default(),
            runs: default_runs(),
            sweep: SweepScenario::default(),
        }
    }
}

fn err(path: impl Into<String>, message: impl Into<String>) -> HarnessError {
    HarnessError::Config { path: path.into(), message: message.into() }
}

fn positive(path: &str, x: f64) -> Result<(), HarnessError> {
    if x > 0.0 && x.is_finite() {
        Ok(())
    } else {
        Err(err(path, format!("must be positive and finite, got {x}")))
    }
}

fn non_negative(path: &str, x: f64) -> Result<(), HarnessError> {
    if x >= 0.0 && x.is_finite() {
        Ok(())
    } else {
        Err(err(path, format!("must be non-negative and finite, got {x}")))
    }
}

fn check_prior(path: &str, mean: f64, variance: f64) -> Result<(), HarnessError> {
    positive(&format!("{path}.variance"), variance)?;
    let lo = PriorDistribution::new(mean, variance).interval().0;
    if !(lo > 0.0) {
        return Err(err(path, format!("95% lower bound {lo} must be positive")));
    }
    Ok(())
}

impl ScenarioConfig {
    pub fn from_json_str(text: &str) -> Result<Self, HarnessError> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let cfg: Self = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            err(if path == "." { "$".to_string() } else { format!("$.{path}") }, e.inner().to_string())
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_path(path: &Path) -> Result<Self, HarnessError> {
        let text = std::fs::read_to_string(path).map_err(|e| err("$", format!("cannot read {}: {e}", path.display())))?;
        Self::from_json_str(&text)
    }

    pub fn n_areas(&self) -> usize {
        self.frrf.rows * self.frrf.cols
    }

    fn check_area(&self, path: &str, a: AreaId) -> Result<(), HarnessError> {
        if a.0 >= 1 && a.0 <= self.n_areas() {
            Ok(())
        } else {
            Err(err(path, format!("area {} is not on the {}x{} grid", a.0, self.frrf.rows, self.frrf.cols)))
        }
    }

    fn check_arrivals(&self, path: &str, m: &ArrivalModel) -> Result<(), HarnessError> {
        match m {
            ArrivalModel::Full => Ok(()),
            ArrivalModel::Poisson { mean_interarrival } => positive(&format!("{path}.mean_interarrival"), *mean_interarrival),
            ArrivalModel::Anchored { always, mean_interarrival } => {
                for (i, a) in always.iter().enumerate() {
                    self.check_area(&format!("{path}.always[{i}]"), *a)?;
                }
                positive(&format!("{path}.mean_interarrival"), *mean_interarrival)
            }
        }
    }

    /// Every module precondition that can be checked before running.
    pub fn validate(&self) -> Result<(), HarnessError> {
        let f = &self.frrf;
        if f.rows == 0 || f.cols == 0 {
            return Err(err("$.frrf.rows", "grid must have at least one row and column"));
        }
        if f.rank == 0 || f.rank > self.n_areas() {
            return Err(err("$.frrf.rank", format!("must lie in 1..={}, got {}", self.n_areas(), f.rank)));
        }
        positive("$.frrf.p_eps", f.p_eps)?;
        non_negative("$.frrf.p_xi", f.p_xi)?;
        non_negative("$.frrf.p_zeta", f.p_zeta)?;
        non_negative("$.frrf.p0", f.p0)?;
        if !(f.weather.lo.is_finite() && f.weather.hi.is_finite() && f.weather.lo <= f.weather.hi) {
            return Err(err("$.frrf.weather", format!("need lo <= hi, got [{}, {}]", f.weather.lo, f.weather.hi)));
        }
        for a in f.weather.fixed.keys() {
            self.check_area(&format!("$.frrf.weather.fixed.{}", a.0), *a)?;
        }
        if let InputWaveform::Sinusoid { amplitude, half_period } = f.input {
            if !amplitude.is_finite() {
                return Err(err("$.frrf.input.amplitude", "must be finite"));
            }
            positive("$.frrf.input.half_period", half_period)?;
        }
        self.check_arrivals("$.frrf.arrivals", &f.arrivals)?;
        self.check_arrivals("$.frrf.full_arrivals", &f.full_arrivals)?;
        if f.steps == 0 {
            return Err(err("$.frrf.steps", "must be at least 1"));
        }
        if f.burn_in >= f.steps {
            return Err(err("$.frrf.burn_in", format!("must be below steps ({})", f.steps)));
        }
        if f.design_step == 0 || f.design_step > f.steps {
            return Err(err("$.frrf.design_step", format!("must lie in 1..={}", f.steps)));
        }

        self.vehicle.validate().map_err(|e| err("$.vehicle", e.to_string()))?;
        match self.road {
            RoadProfile::Straight => {}
            RoadProfile::Constant { radius } => positive("$.road.radius", radius)?,
            RoadProfile::Sinusoidal { amplitude, period, offset } => {
                positive("$.road.period", period)?;
                if !(offset - amplitude.abs() > 0.0) {
                    return Err(err("$.road", "radius must stay positive (offset > |amplitude|)"));
                }
            }
        }
        let rep = check_assumptions(&self.vehicle, &self.road);
        if !rep.all_ok() {
            return Err(err("$.vehicle", format!("vehicle/road assumptions fail: {rep:?}")));
        }

        let v = &self.design.velocity;
        positive("$.design.velocity.lambda_gp", v.lambda_gp)?;
        positive("$.design.velocity.k_bar", v.k_bar)?;
        positive("$.design.velocity.v_min", v.v_min)?;
        if !(v.v_max > v.v_min) {
            return Err(err("$.design.velocity.v_max", "must exceed v_min"));
        }
        positive("$.design.velocity.scan_step", v.scan_step)?;
        positive("$.design.velocity.resolution", v.resolution)?;
        positive("$.design.velocity.norm_dt", v.norm_dt)?;
        for (name, n) in [("omega_grid", v.omega_grid), ("ag_grid", v.ag_grid), ("k_candidates", v.k_candidates)] {
            if n == 0 {
                return Err(err(format!("$.design.velocity.{name}"), "must be at least 1"));
            }
        }
        for (i, p) in self.design.poles.iter().enumerate() {
            if !(*p < 0.0) {
                return Err(err(format!("$.design.poles[{i}]"), format!("must be negative, got {p}")));
            }
        }

        positive("$.controller.gamma", self.controller.gamma)?;
        positive("$.controller.proj_eps", self.controller.proj_eps)?;
        self.simulation.validate().map_err(|e| err("$.simulation", e.to_string()))?;
        positive("$.fusion.period", self.fusion.period)?;
        positive("$.fusion.measurement_variance", self.fusion.measurement_variance)?;
        positive("$.fusion.search.step", self.fusion.search.step)?;
        non_negative("$.fusion.search.radius", self.fusion.search.radius)?;

        let mut names = HashSet::new();
        for (i, r) in self.runs.iter().enumerate() {
            let p = format!("$.runs[{i}]");
            if r.name.is_empty() || !r.name.chars().all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-') {
                return Err(err(format!("{p}.name"), "must be non-empty and use only [A-Za-z0-9_-]"));
            }
            if !names.insert(r.name.as_str()) {
                return Err(err(format!("{p}.name"), format!("duplicate run name {:?}", r.name)));
            }
            self.check_area(&format!("{p}.area"), r.area)?;
            positive(&format!("{p}.truth"), r.truth)?;
            if let Some(cr) = r.truth_r {
                positive(&format!("{p}.truth_r"), cr)?;
            }
            if let PriorSource::Explicit { mean, variance } = r.prior {
                check_prior(&format!("{p}.prior"), mean, variance)?;
            }
            if let DesignMode::Fixed { v, k, p: pm, .. } = &r.design {
                positive(&format!("{p}.design.v"), *v)?;
                positive(&format!("{p}.design.k"), *k)?;
                if let Some(m) = pm {
                    let m = rows_to_matrix(m);
                    if (m - m.transpose()).abs().max() > 1e-9 * m.abs().max().max(1.0) {
                        return Err(err(format!("{p}.design.p"), "must be symmetric"));
                    }
                }
            }
        }

        let s = &self.sweep;
        positive("$.sweep.c_min", s.c_min)?;
        if !(s.c_max >= s.c_min) {
            return Err(err("$.sweep.c_max", "must be at least c_min"));
        }
        if s.points == 0 {
            return Err(err("$.sweep.points", "must be at least 1"));
        }
        check_prior("$.sweep", s.c_min, s.variance)?;
        Ok(())
    }

    /// Shared `k_m` from the design section, if set.
    pub fn shared_k_m(&self) -> Option<Vector4<f64>> {
        self.design.k_m.map(Vector4::from)
    }
}

pub fn rows_to_matrix(rows: &[[f64; 4]; 4]) -> Matrix4<f64> {
    Matrix4::from_fn(|i, j| rows[i][j])
}
