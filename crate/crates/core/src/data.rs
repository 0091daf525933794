//! Synthetic time-series generators and the on-disk dataset format.
//!
//! Each dataset is a pair of JSON-lines files, `<task>-train.jsonl` and
//! `<task>-test.jsonl`, one series per line:
//!
//! ```text
//! {"t":[...],"y":[[...],...],"meta":{"task":"sine","params":{"a":0.3,"b":-0.1}}}
//! ```
//!
//! plus a sidecar `<task>.spec.json` holding the generating [`TaskSpec`].

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::odeint::{prepare_times, rk4_integrate};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Task {
    Sine,
    Exponential,
    Linear,
    Oscillator,
    LotkaVolterra,
}

impl Task {
    pub const ALL: [Task; 5] = [
        Task::Sine,
        Task::Exponential,
        Task::Linear,
        Task::Oscillator,
        Task::LotkaVolterra,
    ];

    pub const ONE_DIMENSIONAL: [Task; 4] = [Task::Sine, Task::Exponential, Task::Linear, Task::Oscillator];

    pub fn name(self) -> &'static str {
        match self {
            Task::Sine => "sine",
            Task::Exponential => "exponential",
            Task::Linear => "linear",
            Task::Oscillator => "oscillator",
            Task::LotkaVolterra => "lotka-volterra",
        }
    }

    pub fn obs_dim(self) -> usize {
        match self {
            Task::LotkaVolterra => 2,
            _ => 1,
        }
    }

    pub fn is_1d(self) -> bool {
        self.obs_dim() == 1
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.to_ascii_lowercase();
        Task::ALL
            .into_iter()
            .find(|t| t.name() == s)
            .or(match s.as_str() {
                "sines" => Some(Task::Sine),
                "lv" | "lotka_volterra" => Some(Task::LotkaVolterra),
                _ => None,
            })
            .ok_or_else(|| Error::Config(format!("unknown task `{s}`")))
    }
}

/// Generating parameters of one series.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeriesMeta {
    pub task: Task,
    pub params: BTreeMap<String, f64>,
}

/// One realization: strictly increasing times with `d`-dimensional values.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimeSeries {
    #[serde(rename = "t")]
    pub times: Vec<f64>,
    #[serde(rename = "y")]
    pub values: Vec<Vec<f64>>,
    pub meta: SeriesMeta,
}

impl TimeSeries {
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.values.first().map_or(0, Vec::len)
    }

    /// Checks ordering, finiteness and rectangular values.
    pub fn validate(&self) -> Result<()> {
        if self.times.len() != self.values.len() {
            return Err(Error::shape("TimeSeries", self.times.len(), self.values.len()));
        }
        if self.times.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Domain("series times must be strictly increasing".into()));
        }
        let d = self.dim();
        if self.values.iter().any(|v| v.len() != d) {
            return Err(Error::Domain("ragged series values".into()));
        }
        if self.times.iter().chain(self.values.iter().flatten()).any(|v| !v.is_finite()) {
            return Err(Error::Domain("series contains non-finite values".into()));
        }
        Ok(())
    }
}

/// Parameters of the generating distribution for one task.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSpec {
    pub task: Task,
    /// Uniform sampling ranges per generating parameter (`a`, `b`, or `E`).
    pub param_ranges: BTreeMap<String, [f64; 2]>,
    /// Simulated time range before any rescaling.
    pub time_range: [f64; 2],
    /// Factor applied to stored times.
    pub time_scale: f64,
    pub n_points: usize,
    pub train_count: usize,
    pub test_count: usize,
    pub seed: u64,
}

impl TaskSpec {
    pub fn new(task: Task, seed: u64) -> Self {
        let ab = |a: [f64; 2], b: [f64; 2]| {
            BTreeMap::from([("a".to_owned(), a), ("b".to_owned(), b)])
        };
        let (param_ranges, time_range, time_scale, train_count) = match task {
            Task::Sine => (ab([-1.0, 1.0], [-0.5, 0.5]), [-std::f64::consts::PI, std::f64::consts::PI], 1.0, 490),
            Task::Exponential => (ab([-1.0, 1.0], [-0.5, 0.5]), [-1.0, 4.0], 1.0, 490),
            Task::Linear | Task::Oscillator => (ab([-1.0, 1.0], [-0.5, 0.5]), [0.0, 5.0], 1.0, 490),
            Task::LotkaVolterra => (
                BTreeMap::from([("E".to_owned(), [0.25, 1.0])]),
                [0.0, 15.0],
                0.1,
                40,
            ),
        };
        Self {
            task,
            param_ranges,
            time_range,
            time_scale,
            n_points: 100,
            train_count,
            test_count: 10,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_points < 2 {
            return Err(Error::Config("n_points must be at least 2".into()));
        }
        if self.train_count == 0 || self.test_count == 0 {
            return Err(Error::Config("train and test counts must be at least 1".into()));
        }
        let [lo, hi] = self.time_range;
        if !(lo < hi) || !(self.time_scale > 0.0) {
            return Err(Error::Config("time range must be increasing and scale positive".into()));
        }
        let required: &[&str] = if self.task.is_1d() { &["a", "b"] } else { &["E"] };
        for key in required {
            let [a, b] = self
                .param_ranges
                .get(*key)
                .ok_or_else(|| Error::Config(format!("missing parameter range `{key}`")))?;
            if !(a < b) {
                return Err(Error::Config(format!("empty range for `{key}`")));
            }
        }
        if self.task == Task::LotkaVolterra && self.param_ranges["E"][0] <= 0.0 {
            return Err(Error::Config("E must be positive".into()));
        }
        Ok(())
    }

    /// First stored time (after rescaling).
    pub fn t0(&self) -> f64 {
        self.time_range[0] * self.time_scale
    }

    /// Spacing between consecutive stored times.
    pub fn spacing(&self) -> f64 {
        (self.time_range[1] - self.time_range[0]) / (self.n_points - 1) as f64 * self.time_scale
    }

    /// Raw (unscaled) sample times.
    fn raw_times(&self) -> Vec<f64> {
        let [lo, hi] = self.time_range;
        let h = (hi - lo) / (self.n_points - 1) as f64;
        (0..self.n_points).map(|i| lo + i as f64 * h).collect()
    }

    fn draw<R: Rng + ?Sized>(&self, key: &str, rng: &mut R) -> f64 {
        let [lo, hi] = self.param_ranges[key];
        rng.random_range(lo..hi)
    }
}

/// Closed-form value of a one-dimensional task at time `t`.
pub fn closed_form(task: Task, a: f64, b: f64, t: f64) -> f64 {
    match task {
        Task::Sine => a * (t - b).sin(),
        Task::Exponential => a / 60.0 * (t - b).exp(),
        Task::Linear => a * t + b,
        Task::Oscillator => a * (t - b).sin() * (-t / 2.0).exp(),
        Task::LotkaVolterra => panic!("closed_form called for a two-dimensional task"),
    }
}

/// Samples `a`, `b` and evaluates the closed form on the task grid.
pub fn gen_1d<R: Rng + ?Sized>(spec: &TaskSpec, rng: &mut R) -> TimeSeries {
    assert!(spec.task.is_1d(), "gen_1d called for {}", spec.task);
    let a = spec.draw("a", rng);
    let b = spec.draw("b", rng);
    series_1d(spec, a, b)
}

/// The series for fixed generating parameters.
pub fn series_1d(spec: &TaskSpec, a: f64, b: f64) -> TimeSeries {
    let raw = spec.raw_times();
    TimeSeries {
        values: raw.iter().map(|&t| vec![closed_form(spec.task, a, b, t)]).collect(),
        times: raw.iter().map(|&t| t * spec.time_scale).collect(),
        meta: SeriesMeta {
            task: spec.task,
            params: BTreeMap::from([("a".to_owned(), a), ("b".to_owned(), b)]),
        },
    }
}

/// Predator-prey coefficients `(α, β, γ, δ)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LotkaVolterra {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub delta: f64,
}

impl Default for LotkaVolterra {
    fn default() -> Self {
        Self {
            alpha: 2.0 / 3.0,
            beta: 4.0 / 3.0,
            gamma: 1.0,
            delta: 1.0,
        }
    }
}

/// Internal RK4 step of the predator-prey generator.
pub const LV_STEP: f64 = 0.0015;

impl LotkaVolterra {
    /// `(u̇, v̇) = (αu − βuv, δuv − γv)`.
    pub fn derivative(&self, u: f64, v: f64) -> [f64; 2] {
        [
            self.alpha * u - self.beta * u * v,
            self.delta * u * v - self.gamma * v,
        ]
    }

    /// First integral `V = δu − γ ln u + βv − α ln v`.
    pub fn conserved_quantity(&self, u: f64, v: f64) -> Result<f64> {
        if !(u > 0.0 && v > 0.0) {
            return Err(Error::Domain(format!("populations must be positive, got ({u}, {v})")));
        }
        Ok(self.delta * u - self.gamma * u.ln() + self.beta * v - self.alpha * v.ln())
    }

    /// Interior fixed point `(γ/δ, α/β)`.
    pub fn equilibrium(&self) -> [f64; 2] {
        [self.gamma / self.delta, self.alpha / self.beta]
    }
}

/// Conserved quantity with the default coefficients.
pub fn conserved_quantity(u: f64, v: f64) -> Result<f64> {
    LotkaVolterra::default().conserved_quantity(u, v)
}

/// Draws `E`, starts from `(2E, E)` and integrates the predator-prey system
/// at step [`LV_STEP`], sampling the task grid and rescaling stored times.
pub fn gen_lotka_volterra<R: Rng + ?Sized>(spec: &TaskSpec, rng: &mut R) -> Result<TimeSeries> {
    let e = spec.draw("E", rng);
    lotka_volterra_series(spec, e)
}

/// The predator-prey series started from `(2E, E)`.
pub fn lotka_volterra_series(spec: &TaskSpec, e: f64) -> Result<TimeSeries> {
    let lv = LotkaVolterra::default();
    let raw = spec.raw_times();
    let grid = prepare_times(&raw, spec.time_range[0], LV_STEP)?;
    let (u0, v0) = (2.0 * e, e);
    let states = rk4_integrate(|_, s| lv.derivative(s[0], s[1]).to_vec(), &[u0, v0], &grid)?;
    if let Some(index) = states.iter().position(|s| !(s[0] > 0.0 && s[1] > 0.0)) {
        return Err(Error::Positivity { index });
    }
    Ok(TimeSeries {
        times: raw.iter().map(|&t| t * spec.time_scale).collect(),
        values: states,
        meta: SeriesMeta {
            task: Task::LotkaVolterra,
            params: BTreeMap::from([
                ("E".to_owned(), e),
                ("u0".to_owned(), u0),
                ("v0".to_owned(), v0),
            ]),
        },
    })
}

/// Largest relative deviation of `V` from its initial value along a series.
pub fn conservation_drift(series: &TimeSeries) -> Result<f64> {
    let lv = LotkaVolterra::default();
    let v0 = lv.conserved_quantity(series.values[0][0], series.values[0][1])?;
    let mut worst: f64 = 0.0;
    for s in &series.values {
        let v = lv.conserved_quantity(s[0], s[1])?;
        worst = worst.max((v - v0).abs() / v0.abs());
    }
    Ok(worst)
}

/// Train and test splits of one task.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub spec: TaskSpec,
    pub train: Vec<TimeSeries>,
    pub test: Vec<TimeSeries>,
}

const TRAIN_STREAM: u64 = 1;
const TEST_STREAM: u64 = 2;

fn split_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn generate<R: Rng + ?Sized>(spec: &TaskSpec, count: usize, rng: &mut R) -> Result<Vec<TimeSeries>> {
    (0..count)
        .map(|_| {
            if spec.task.is_1d() {
                Ok(gen_1d(spec, rng))
            } else {
                gen_lotka_volterra(spec, rng)
            }
        })
        .collect()
}

/// Generates both splits from disjoint random streams of `spec.seed`.
pub fn make_dataset(spec: &TaskSpec) -> Result<Dataset> {
    spec.validate()?;
    let train = generate(spec, spec.train_count, &mut split_rng(spec.seed, TRAIN_STREAM))?;
    let test = generate(spec, spec.test_count, &mut split_rng(spec.seed, TEST_STREAM))?;
    Ok(Dataset {
        spec: spec.clone(),
        train,
        test,
    })
}

impl Dataset {
    pub fn split_path(dir: &Path, task: Task, split: &str) -> PathBuf {
        dir.join(format!("{task}-{split}.jsonl"))
    }

    pub fn spec_path(dir: &Path, task: Task) -> PathBuf {
        dir.join(format!("{task}.spec.json"))
    }

    /// Writes both splits and the sidecar spec into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write_jsonl(&Self::split_path(dir, self.spec.task, "train"), &self.train)?;
        write_jsonl(&Self::split_path(dir, self.spec.task, "test"), &self.test)?;
        let spec_path = Self::spec_path(dir, self.spec.task);
        let text = serde_json::to_string_pretty(&self.spec).map_err(|e| Error::json(&spec_path, e))?;
        fs::write(&spec_path, text + "\n").map_err(|e| Error::io(&spec_path, e))
    }

    pub fn read(dir: &Path, task: Task) -> Result<Self> {
        let spec_path = Self::spec_path(dir, task);
        let text = fs::read_to_string(&spec_path).map_err(|e| Error::io(&spec_path, e))?;
        let spec: TaskSpec = serde_json::from_str(&text).map_err(|e| Error::json(&spec_path, e))?;
        Ok(Self {
            train: read_jsonl(&Self::split_path(dir, task, "train"))?,
            test: read_jsonl(&Self::split_path(dir, task, "test"))?,
            spec,
        })
    }
}

pub fn write_jsonl(path: &Path, series: &[TimeSeries]) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for s in series {
        serde_json::to_writer(&mut w, s).map_err(|e| Error::json(path, e))?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_jsonl(path: &Path) -> Result<Vec<TimeSeries>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for line in BufReader::new(file).lines() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let s: TimeSeries = serde_json::from_str(&line).map_err(|e| Error::json(path, e))?;
        s.validate()?;
        out.push(s);
    }
    Ok(out)
}

/// Removes `k` uniformly chosen points, preserving order. With `keep_t0`
/// the first point is never removed.
pub fn irregular_subsample<R: Rng + ?Sized>(
    series: &TimeSeries,
    k: usize,
    rng: &mut R,
    keep_t0: bool,
) -> Result<TimeSeries> {
    let n = series.len();
    let offset = usize::from(keep_t0);
    if k >= n || k > n - offset {
        return Err(Error::InsufficientPoints {
            needed: k + 1,
            available: n,
        });
    }
    let mut removed = vec![false; n];
    for i in index::sample(rng, n - offset, k) {
        removed[i + offset] = true;
    }
    let keep = |i: &usize| !removed[*i];
    Ok(TimeSeries {
        times: (0..n).filter(keep).map(|i| series.times[i]).collect(),
        values: (0..n).filter(keep).map(|i| series.values[i].clone()).collect(),
        meta: series.meta.clone(),
    })
}
