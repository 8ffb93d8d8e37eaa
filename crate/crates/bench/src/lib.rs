//! Shared fixtures for the benchmarks.

use nalgebra::{DMatrix, DVector};
use plk_core::codesign::DesignResult;
use plk_core::frrf::sim::{ArrivalModel, FieldSimulator};
use plk_core::harness::{build_model, design_run, ScenarioConfig};
use plk_core::{AreaId, FilterState, FixedRankResilientFilter, MeasurementBatch};

pub struct FrrfFixture {
    pub filter: FixedRankResilientFilter,
    /// Readings for step 1.
    pub batch: MeasurementBatch,
    pub areas: Vec<AreaId>,
}

/// A fresh filter on an `n × n` grid with one step of simulated readings.
pub fn frrf_fixture(n: usize, arrivals: ArrivalModel) -> FrrfFixture {
    let mut f = ScenarioConfig::default().frrf;
    f.rows = n;
    f.cols = n;
    let model = build_model(&f, 1).unwrap();
    let r = f.rank;
    let p0 = DMatrix::identity(r, r) * f.p0;
    let mut sim = FieldSimulator::new(model.clone(), arrivals, f.input, &DVector::zeros(r), &p0, 7).unwrap();
    let batch = sim.next_step().unwrap().batch;
    let filter = FixedRankResilientFilter::new(model.clone(), FilterState::new(0, DVector::zeros(r), p0)).unwrap();
    FrrfFixture { filter, batch, areas: model.grid.areas().collect() }
}

/// The first default run, designed at its configured velocity.
pub fn default_design() -> (ScenarioConfig, DesignResult) {
    let cfg = ScenarioConfig::default();
    let d = design_run(&cfg, &cfg.runs[0], None).unwrap().design;
    (cfg, d)
}
