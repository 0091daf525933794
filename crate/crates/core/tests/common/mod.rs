//! Independent oracles shared by the integration tests and the acceptance
//! suite.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use ndp::data::{series_1d, lotka_volterra_series, Task, TaskSpec, TimeSeries};
use ndp::diffcore::{DiagGaussian, Graph, Matrix, ParamId, ParamStore, Var};
use ndp::model::{ContextSet, Model, ModelSpec, Variant};
use ndp::vi::elbo_gradient;

pub const FD_STEP: f64 = 1e-5;
pub const FD_REL_TOL: f64 = 1e-3;
/// Below this magnitude both gradients count as zero; central differences
/// carry roughly `1e-16 · |loss| / h` of rounding noise.
pub const FD_ZERO: f64 = 1e-7;

pub fn zero_predictor_mse(series: &[TimeSeries]) -> f64 {
    let (mut total, mut count) = (0.0, 0usize);
    for s in series {
        for y in &s.values {
            total += y.iter().map(|v| v * v).sum::<f64>();
            count += y.len();
        }
    }
    total / count as f64
}

pub fn random_gaussian<R: Rng>(rng: &mut R, dim: usize) -> DiagGaussian {
    DiagGaussian {
        mu: (0..dim).map(|_| rng.random_range(-2.0..2.0)).collect(),
        sigma: (0..dim).map(|_| rng.random_range(0.1..1.5)).collect(),
    }
}

fn log_density(q: &DiagGaussian, x: &[f64]) -> f64 {
    x.iter()
        .zip(q.mu.iter().zip(&q.sigma))
        .map(|(x, (m, s))| -0.5 * (2.0 * std::f64::consts::PI).ln() - s.ln() - (x - m).powi(2) / (2.0 * s * s))
        .sum()
}

/// Monte-Carlo estimate of `E_q[log q − log p]` and its standard error.
pub fn kl_monte_carlo<R: Rng>(q: &DiagGaussian, p: &DiagGaussian, draws: usize, rng: &mut R) -> (f64, f64) {
    let (mut sum, mut sum_sq) = (0.0, 0.0);
    let mut x = vec![0.0; q.mu.len()];
    for _ in 0..draws {
        for (i, xi) in x.iter_mut().enumerate() {
            let e: f64 = StandardNormal.sample(rng);
            *xi = q.mu[i] + q.sigma[i] * e;
        }
        let v = log_density(q, &x) - log_density(p, &x);
        sum += v;
        sum_sq += v * v;
    }
    let n = draws as f64;
    let mean = sum / n;
    let var = (sum_sq / n - mean * mean).max(0.0);
    (mean, (var / n).sqrt())
}

/// `true` when analytic and numerical derivatives agree.
pub fn grads_agree(analytic: f64, numeric: f64) -> bool {
    let scale = analytic.abs().max(numeric.abs());
    scale < FD_ZERO || (analytic - numeric).abs() <= FD_REL_TOL * scale
}

#[derive(Default)]
pub struct OracleReport {
    pub checked: Vec<(String, usize)>,
    pub failures: Vec<String>,
    pub worst_rel: f64,
}

impl OracleReport {
    pub fn summary(&self) -> String {
        let names: Vec<String> = self.checked.iter().map(|(n, k)| format!("{n}({k})")).collect();
        format!(
            "{} checks, worst relative error {:.2e}, {} failures{}\n      {}",
            self.checked.len(),
            self.worst_rel,
            self.failures.len(),
            if self.failures.is_empty() {
                String::new()
            } else {
                format!(": {}", self.failures.join("; "))
            },
            names.join(" ")
        )
    }

    fn compare(&mut self, name: &str, k: usize, analytic: f64, numeric: f64) {
        let scale = analytic.abs().max(numeric.abs());
        if scale >= FD_ZERO {
            self.worst_rel = self.worst_rel.max((analytic - numeric).abs() / scale);
        }
        if !grads_agree(analytic, numeric) {
            self.failures.push(format!("{name}[{k}]: analytic {analytic:.6e} vs numeric {numeric:.6e}"));
        }
    }
}

/// Kinds of random initial values for primitive inputs.
#[derive(Clone, Copy)]
enum Init {
    /// Uniform in ±[0.2, 1.2], kept away from ReLU kinks.
    Signed,
    /// Uniform in [0.5, 2].
    Positive,
}

fn input<R: Rng>(store: &mut ParamStore, rng: &mut R, name: &str, rows: usize, cols: usize, init: Init) -> ParamId {
    let data = (0..rows * cols)
        .map(|_| match init {
            Init::Signed => {
                let v: f64 = rng.random_range(0.2..1.2);
                if rng.random::<bool>() {
                    v
                } else {
                    -v
                }
            }
            Init::Positive => rng.random_range(0.5..2.0),
        })
        .collect();
    store.add(name, Matrix::from_vec(rows, cols, data))
}

type Build = dyn Fn(&mut Graph, &[Var]) -> Var;

/// Checks `∂ sum(R ⊙ op(inputs)) / ∂ inputs` against central differences.
fn check_primitive(report: &mut OracleReport, name: &str, shapes: &[(usize, usize, Init)], build: &Build) -> ndp::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(name.len() as u64 * 7919 + name.bytes().map(u64::from).sum::<u64>());
    let mut store = ParamStore::new();
    let ids: Vec<ParamId> = shapes
        .iter()
        .enumerate()
        .map(|(i, &(r, c, init))| input(&mut store, &mut rng, &format!("x{i}"), r, c, init))
        .collect();
    let eval = |store: &ParamStore, weights: Option<&Matrix>| -> (Graph, Var, Matrix) {
        let mut g = Graph::new();
        let vars: Vec<Var> = ids.iter().map(|&id| g.param(store, id)).collect();
        let out = build(&mut g, &vars);
        let shape = g.value(out).shape();
        let w = weights.cloned().unwrap_or_else(|| {
            let mut wr = ChaCha8Rng::seed_from_u64(99);
            Matrix::from_vec(shape.0, shape.1, (0..shape.0 * shape.1).map(|_| wr.random_range(-1.0..1.0)).collect())
        });
        let wv = g.constant(w.clone());
        let prod = g.mul(out, wv);
        let loss = g.sum(prod);
        (g, loss, w)
    };
    let (mut g, loss, weights) = eval(&store, None);
    let grads = g.backward(loss, &store)?;
    let total = store.total_count();
    for k in 0..total {
        let orig = store.flat_get(k);
        store.flat_set(k, orig + FD_STEP);
        let (g1, l1, _) = eval(&store, Some(&weights));
        store.flat_set(k, orig - FD_STEP);
        let (g2, l2, _) = eval(&store, Some(&weights));
        store.flat_set(k, orig);
        let numeric = (g1.scalar(l1) - g2.scalar(l2)) / (2.0 * FD_STEP);
        report.compare(name, k, grads.flat_get(k), numeric);
    }
    report.checked.push((name.to_string(), total));
    Ok(())
}

fn primitive_checks(report: &mut OracleReport) -> ndp::Result<()> {
    use Init::{Positive as P, Signed as S};
    check_primitive(report, "linear", &[(3, 4, S), (2, 4, S), (1, 2, S)], &|g, v| g.linear(v[0], v[1], v[2]))?;
    check_primitive(report, "add", &[(3, 2, S), (3, 2, S)], &|g, v| g.add(v[0], v[1]))?;
    check_primitive(report, "sub", &[(3, 2, S), (3, 2, S)], &|g, v| g.sub(v[0], v[1]))?;
    check_primitive(report, "mul", &[(3, 2, S), (3, 2, S)], &|g, v| g.mul(v[0], v[1]))?;
    check_primitive(report, "div", &[(3, 2, S), (3, 2, P)], &|g, v| g.div(v[0], v[1]))?;
    check_primitive(report, "add_scaled", &[(3, 2, S), (3, 2, S)], &|g, v| g.add_scaled(v[0], v[1], 0.7))?;
    check_primitive(report, "scale", &[(3, 2, S)], &|g, v| g.scale(v[0], -1.3))?;
    check_primitive(report, "offset", &[(3, 2, S)], &|g, v| g.offset(v[0], 0.4))?;
    check_primitive(report, "relu", &[(3, 3, S)], &|g, v| g.relu(v[0]))?;
    check_primitive(report, "tanh", &[(3, 3, S)], &|g, v| g.tanh(v[0]))?;
    check_primitive(report, "sigmoid", &[(3, 3, S)], &|g, v| g.sigmoid(v[0]))?;
    check_primitive(report, "exp", &[(3, 3, S)], &|g, v| g.exp(v[0]))?;
    check_primitive(report, "log", &[(3, 3, P)], &|g, v| g.log(v[0]))?;
    check_primitive(report, "square", &[(3, 3, S)], &|g, v| g.square(v[0]))?;
    check_primitive(report, "hconcat", &[(3, 2, S), (3, 1, S)], &|g, v| g.hconcat(&[v[0], v[1], v[0]]))?;
    check_primitive(report, "slice_cols", &[(3, 4, S)], &|g, v| g.slice_cols(v[0], 1, 2))?;
    check_primitive(report, "select_rows", &[(3, 2, S)], &|g, v| g.select_rows(v[0], vec![2, 0, 2]))?;
    check_primitive(report, "pick_rows", &[(3, 2, S), (2, 2, S)], &|g, v| {
        g.pick_rows(vec![(v[0], 1), (v[1], 0), (v[0], 1), (v[0], 2)])
    })?;
    check_primitive(report, "segment_mean", &[(4, 3, S)], &|g, v| {
        g.segment_mean(v[0], vec![vec![0, 2], vec![1], vec![3, 0, 1, 2]])
    })?;
    check_primitive(report, "sum", &[(3, 2, S)], &|g, v| g.sum(v[0]))?;
    check_primitive(report, "rk4_combine", &[(2, 3, S), (2, 3, S), (2, 3, S), (2, 3, S), (2, 3, S)], &|g, v| {
        g.rk4_combine(v[0], [v[1], v[2], v[3], v[4]], 0.3)
    })?;
    Ok(())
}

/// A three-point toy context/target pair: two context points plus one
/// extra target.
pub fn toy_sets(task: Task) -> (ContextSet, ContextSet) {
    let series = if task.is_1d() {
        series_1d(&TaskSpec::new(task, 0), 0.8, -0.3)
    } else {
        lotka_volterra_series(&TaskSpec::new(task, 0), 0.6).unwrap()
    };
    (
        ContextSet::from_series(&series, &[7, 60]),
        ContextSet::from_series(&series, &[7, 60, 31]),
    )
}

/// Deterministic standard-normal noise: the same sequence on every call.
pub fn fixed_noise(seed: u64) -> impl FnMut(usize) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    move |n| (0..n).map(|_| StandardNormal.sample(&mut rng)).collect()
}

/// Central-difference check of the full ELBO gradient of a small model.
pub fn check_elbo(report: &mut OracleReport, task: Task, variant: Variant, seed: u64) -> ndp::Result<()> {
    let mut model = Model::new(ModelSpec::tiny(task, variant), seed)?;
    let (ctx, targets) = toy_sets(task);
    let loss_at = |m: &Model| -> ndp::Result<f64> { Ok(elbo_gradient(m, &ctx, &targets, &mut fixed_noise(seed))?.0) };
    let (_, grads) = elbo_gradient(&model, &ctx, &targets, &mut fixed_noise(seed))?;
    let name = format!("elbo:{variant}:{task}");
    let total = model.params().total_count();
    for k in 0..total {
        let orig = model.params().flat_get(k);
        model.params_mut().flat_set(k, orig + FD_STEP);
        let up = loss_at(&model)?;
        model.params_mut().flat_set(k, orig - FD_STEP);
        let down = loss_at(&model)?;
        model.params_mut().flat_set(k, orig);
        report.compare(&name, k, grads.flat_get(k), (up - down) / (2.0 * FD_STEP));
    }
    report.checked.push((name, total));
    Ok(())
}

/// Every primitive plus the full ELBO for each variant.
pub fn gradient_oracle_report() -> ndp::Result<OracleReport> {
    let mut report = OracleReport::default();
    primitive_checks(&mut report)?;
    for (i, variant) in Variant::ODE_VARIANTS.into_iter().chain([Variant::Np]).enumerate() {
        check_elbo(&mut report, Task::Sine, variant, 90 + i as u64)?;
    }
    check_elbo(&mut report, Task::LotkaVolterra, Variant::Nd2p, 95)?;
    Ok(report)
}
