//! Synthetic ground truth and measurement arrivals for filter experiments.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{AreaId, FrrfError, GridSpec, Measurement, MeasurementBatch, SpatioTemporalModel, WeatherTable};

/// Which areas report at each step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ArrivalModel {
    /// Every area reports exactly once per step.
    Full,
    /// Independent Poisson report counts per area with mean `1/mean_interarrival`.
    Poisson { mean_interarrival: f64 },
    /// The listed areas report every step; the rest follow the Poisson model.
    Anchored { always: Vec<AreaId>, mean_interarrival: f64 },
}

impl ArrivalModel {
    /// Probability that an area reports at least once in a step.
    pub fn arrival_probability(&self, area: AreaId) -> f64 {
        match self {
            ArrivalModel::Full => 1.0,
            ArrivalModel::Poisson { mean_interarrival } => 1.0 - (-1.0 / mean_interarrival).exp(),
            ArrivalModel::Anchored { always, mean_interarrival } => {
                if always.contains(&area) {
                    1.0
                } else {
                    1.0 - (-1.0 / mean_interarrival).exp()
                }
            }
        }
    }

    fn counts(&self, grid: &GridSpec, rng: &mut ChaCha8Rng) -> Vec<u64> {
        let poisson = |mean: f64| Poisson::new(1.0 / mean).expect("positive rate");
        match self {
            ArrivalModel::Full => vec![1; grid.n_areas()],
            ArrivalModel::Poisson { mean_interarrival } => {
                let p = poisson(*mean_interarrival);
                grid.areas().map(|_| p.sample(rng) as u64).collect()
            }
            ArrivalModel::Anchored { always, mean_interarrival } => {
                let p = poisson(*mean_interarrival);
                grid.areas()
                    .map(|a| {
                        let extra = p.sample(rng) as u64;
                        if always.contains(&a) {
                            extra.max(1)
                        } else {
                            extra
                        }
                    })
                    .collect()
            }
        }
    }
}

/// Unknown input `d_k`, applied identically to every input channel.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum InputWaveform {
    Zero,
    /// `amplitude · sin(π k / half_period)`.
    Sinusoid {
        amplitude: f64,
        half_period: f64,
    },
}

impl InputWaveform {
    pub fn value(&self, k: u64) -> f64 {
        match *self {
            InputWaveform::Zero => 0.0,
            InputWaveform::Sinusoid { amplitude, half_period } => amplitude * (std::f64::consts::PI * k as f64 / half_period).sin(),
        }
    }
}

/// Draws a weather-prior table for steps `0..=k_max`: areas in `fixed` keep
/// their value, all others are drawn uniformly from `[lo, hi]` at every step.
pub fn generate_weather(
    grid: &GridSpec,
    k_max: u64,
    lo: f64,
    hi: f64,
    fixed: &BTreeMap<AreaId, f64>,
    rng: &mut ChaCha8Rng,
) -> WeatherTable {
    let values = (0..=k_max)
        .map(|_| {
            grid.areas()
                .map(|a| {
                    let draw = rng.random_range(lo..=hi);
                    fixed.get(&a).copied().unwrap_or(draw)
                })
                .collect()
        })
        .collect();
    WeatherTable::Dense { first_k: 0, values }
}

/// Sample from `N(0, cov)` through a symmetric square root, so singular
/// covariances are fine.
pub fn sample_gaussian<R: Rng + ?Sized>(cov: &DMatrix<f64>, rng: &mut R) -> DVector<f64> {
    let n = cov.nrows();
    if n == 0 {
        return DVector::zeros(0);
    }
    let eig = cov.clone().symmetric_eigen();
    let z = DVector::from_iterator(n, (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)));
    let scaled = DVector::from_iterator(n, eig.eigenvalues.iter().zip(z.iter()).map(|(l, v)| l.max(0.0).sqrt() * v));
    &eig.eigenvectors * scaled
}

#[derive(Debug, Clone)]
pub struct SimStep {
    pub k: u64,
    /// `d_{k-1}`, the input that drove `η_{k-1} → η_k`.
    pub d_prev: DVector<f64>,
    pub eta: DVector<f64>,
    /// True `q_{s,k}` for every area.
    pub truth: Vec<f64>,
    /// Raw readings, possibly with repeated areas.
    pub batch: MeasurementBatch,
}

/// Generates `η_k`, `q_k` and readings from the model's own noise description.
#[derive(Debug, Clone)]
pub struct FieldSimulator {
    model: SpatioTemporalModel,
    arrivals: ArrivalModel,
    input: InputWaveform,
    eta: DVector<f64>,
    k: u64,
    rng: ChaCha8Rng,
}

impl FieldSimulator {
    /// The initial hidden state is drawn from `N(eta0_mean, p0)`.
    pub fn new(
        model: SpatioTemporalModel,
        arrivals: ArrivalModel,
        input: InputWaveform,
        eta0_mean: &DVector<f64>,
        p0: &DMatrix<f64>,
        seed: u64,
    ) -> Result<Self, FrrfError> {
        model.validate()?;
        if eta0_mean.len() != model.n_eta() {
            return Err(FrrfError::Dimension("initial mean does not match basis rank".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let eta = eta0_mean + sample_gaussian(p0, &mut rng);
        Ok(Self { model, arrivals, input, eta, k: 0, rng })
    }

    pub fn k(&self) -> u64 {
        self.k
    }

    pub fn eta(&self) -> &DVector<f64> {
        &self.eta
    }

    pub fn next_step(&mut self) -> Result<SimStep, FrrfError> {
        let d_prev = DVector::from_element(self.model.n_input(), self.input.value(self.k));
        let zeta = sample_gaussian(&self.model.p_zeta, &mut self.rng);
        self.eta = &self.model.transition * &self.eta + &self.model.input_map * &d_prev + zeta;
        self.k += 1;
        let k = self.k;

        let s = self.model.basis.matrix(k);
        let field = s * &self.eta;
        let mut truth = Vec::with_capacity(self.model.grid.n_areas());
        for a in self.model.grid.areas() {
            let xi_sd = self.model.p_xi[a.index()].sqrt();
            let xi = xi_sd * self.rng.sample::<f64, _>(StandardNormal);
            truth.push(self.model.mu(a, k)? + field[a.index()] + xi);
        }

        let counts = self.arrivals.counts(&self.model.grid, &mut self.rng);
        let mut entries = Vec::new();
        for a in self.model.grid.areas() {
            let sd = self.model.p_eps[a.index()].sqrt();
            let noise =
                Normal::new(0.0, sd).map_err(|_| FrrfError::InvalidVariance { area: a.0, variance: self.model.p_eps[a.index()] })?;
            for _ in 0..counts[a.index()] {
                entries.push(Measurement { area: a, value: truth[a.index()] + noise.sample(&mut self.rng), variance: None });
            }
        }
        Ok(SimStep { k, d_prev, eta: self.eta.clone(), truth, batch: MeasurementBatch::new(k, entries) })
    }
}
