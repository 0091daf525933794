//! Greedy active learning on a single series: grow the context one point
//! at a time, choosing either the most uncertain time or a random one.

use std::path::Path;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::TimeSeries;
use crate::diffcore::Matrix;
use crate::error::{Error, Result};
use crate::model::{draw_latents, ContextSet, Model, PredictMode};

/// Samples used by the uncertainty estimate unless configured otherwise.
pub const DEFAULT_SAMPLES: usize = 50;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Strategy {
    MaxUncertainty,
    Random,
}

impl std::str::FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "max-uncertainty" | "uncertainty" | "active" => Ok(Strategy::MaxUncertainty),
            "random" => Ok(Strategy::Random),
            other => Err(Error::Config(format!("unknown query policy `{other}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct QueryPolicy {
    pub strategy: Strategy,
    /// Latent draws per uncertainty estimate.
    pub samples: usize,
    pub seed: u64,
}

impl QueryPolicy {
    pub fn max_uncertainty(seed: u64) -> Self {
        Self {
            strategy: Strategy::MaxUncertainty,
            samples: DEFAULT_SAMPLES,
            seed,
        }
    }

    pub fn random(seed: u64) -> Self {
        Self {
            strategy: Strategy::Random,
            samples: DEFAULT_SAMPLES,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.strategy == Strategy::MaxUncertainty && self.samples < 2 {
            return Err(Error::Config("uncertainty estimation needs at least 2 samples".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlStep {
    pub step: usize,
    /// Series index added at this step; `None` for the initial context.
    pub queried_index: Option<usize>,
    pub queried_t: Option<f64>,
    /// Mean-mode MSE over the whole series.
    pub mse: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlRun {
    pub initial_context: Vec<usize>,
    pub steps: Vec<AlStep>,
}

impl AlRun {
    pub fn mse_curve(&self) -> Vec<f64> {
        self.steps.iter().map(|s| s.mse).collect()
    }

    pub fn queried(&self) -> Vec<usize> {
        self.steps.iter().filter_map(|s| s.queried_index).collect()
    }

    /// CSV with header `step,queried_t,mse`; `queried_t` is empty for the
    /// initial context.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let csv_err = |source| Error::Csv {
            path: path.to_path_buf(),
            source,
        };
        let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
        w.write_record(["step", "queried_t", "mse"]).map_err(csv_err)?;
        for s in &self.steps {
            let t = s.queried_t.map(|t| t.to_string()).unwrap_or_default();
            w.write_record([s.step.to_string(), t, s.mse.to_string()]).map_err(csv_err)?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

/// Population variance across trajectories at each row, summed over
/// output dimensions. Values are shifted by the first trajectory, so
/// identical trajectories give exactly zero.
pub fn population_variance(trajectories: &[Matrix]) -> Vec<f64> {
    let Some(first) = trajectories.first() else {
        return Vec::new();
    };
    let s = trajectories.len() as f64;
    (0..first.rows())
        .map(|i| {
            (0..first.cols())
                .map(|j| {
                    let x0 = first.get(i, j);
                    let mean = trajectories.iter().map(|m| m.get(i, j) - x0).sum::<f64>() / s;
                    trajectories.iter().map(|m| (m.get(i, j) - x0 - mean).powi(2)).sum::<f64>() / s
                })
                .sum()
        })
        .collect()
}

/// Variance of `samples` sampled predictive means at each candidate time.
pub fn predictive_uncertainty(
    model: &Model,
    ctx: &ContextSet,
    candidate_times: &[f64],
    samples: usize,
    seed: u64,
) -> Result<Vec<f64>> {
    if samples < 2 {
        return Err(Error::Config("uncertainty estimation needs at least 2 samples".into()));
    }
    let posterior = model.infer_posterior(ctx)?;
    let latents = draw_latents(&posterior, samples, seed)?;
    Ok(population_variance(&model.predict_latents(&latents, candidate_times)?))
}

fn series_mse(model: &Model, series: &TimeSeries, ctx: &ContextSet) -> Result<f64> {
    let pred = model.predict(ctx, &series.times, PredictMode::Mean)?;
    let mut total = 0.0;
    let mut count = 0usize;
    for (i, y) in series.values.iter().enumerate() {
        for (a, p) in y.iter().zip(pred.mean.row(i)) {
            total += (a - p) * (a - p);
        }
        count += y.len();
    }
    Ok(total / count as f64)
}

/// Index of the largest score; ties go to the earliest time.
fn argmax_earliest(candidates: &[usize], scores: &[f64], times: &[f64]) -> usize {
    let mut best = 0;
    for k in 1..candidates.len() {
        let (s, b) = (scores[k], scores[best]);
        if s > b || (s == b && times[candidates[k]] < times[candidates[best]]) {
            best = k;
        }
    }
    candidates[best]
}

/// Runs `steps` greedy queries from a random initial context of
/// `init_ctx_size` points. The initial context depends only on
/// `policy.seed`, so both strategies start from the same points.
pub fn active_learning_run(
    model: &Model,
    series: &TimeSeries,
    init_ctx_size: usize,
    steps: usize,
    policy: &QueryPolicy,
) -> Result<AlRun> {
    policy.validate()?;
    let len = series.len();
    if init_ctx_size == 0 {
        return Err(Error::EmptyContext);
    }
    if init_ctx_size + steps > len {
        return Err(Error::InsufficientPoints {
            needed: init_ctx_size + steps,
            available: len,
        });
    }
    let mut init_rng = ChaCha8Rng::seed_from_u64(policy.seed);
    let initial = index::sample(&mut init_rng, len, init_ctx_size).into_vec();
    let mut query_rng = ChaCha8Rng::seed_from_u64(policy.seed);
    query_rng.set_stream(1);

    let mut in_ctx = vec![false; len];
    for &i in &initial {
        in_ctx[i] = true;
    }
    let mut ctx = ContextSet::from_series(series, &initial);
    let mut run = AlRun {
        initial_context: initial,
        steps: vec![AlStep {
            step: 0,
            queried_index: None,
            queried_t: None,
            mse: series_mse(model, series, &ctx)?,
        }],
    };
    for step in 1..=steps {
        let candidates: Vec<usize> = (0..len).filter(|&i| !in_ctx[i]).collect();
        let pick = match policy.strategy {
            Strategy::Random => candidates[query_rng.random_range(0..candidates.len())],
            Strategy::MaxUncertainty => {
                let times: Vec<f64> = candidates.iter().map(|&i| series.times[i]).collect();
                let seed = query_rng.random::<u64>();
                let scores = predictive_uncertainty(model, &ctx, &times, policy.samples, seed)?;
                argmax_earliest(&candidates, &scores, &series.times)
            }
        };
        in_ctx[pick] = true;
        ctx.push(series.times[pick], series.values[pick].clone());
        run.steps.push(AlStep {
            step,
            queried_index: Some(pick),
            queried_t: Some(series.times[pick]),
            mse: series_mse(model, series, &ctx)?,
        });
    }
    Ok(run)
}
