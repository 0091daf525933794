//! Amortized variational training: the ELBO, its closed-form KL terms,
//! context/target sampling and MSE evaluation.

use std::fs;
use std::path::Path;
use std::time::Instant;

use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::TimeSeries;
use crate::diffcore::{rmsprop_step, DiagGaussian, GaussianVars, Graph, Matrix, OptState, ParamStore, RmsPropConfig, Var};
use crate::error::{Error, Result};
use crate::model::{Bound, ContextSet, LatentVars, Model, TargetSet};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Inclusive range of context sizes `m`.
    pub context_range: [usize; 2],
    /// Inclusive range of extra target points `n`.
    pub extra_target_range: [usize; 2],
    pub learning_rate: f64,
    pub seed: u64,
    /// Context size used by [`evaluate_mse`] after each epoch.
    pub eval_context: usize,
    /// Seed of the evaluation context draws.
    pub eval_seed: u64,
    /// Restore the parameters of the epoch with the lowest test MSE.
    pub keep_best: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 5,
            context_range: [1, 10],
            extra_target_range: [0, 5],
            learning_rate: 1e-3,
            seed: 0,
            eval_context: 10,
            eval_seed: 0,
            keep_best: true,
        }
    }
}

impl TrainConfig {
    /// Lotka-Volterra settings: context 1–100, up to 45 extra targets,
    /// evaluation with 90 context points.
    pub fn lotka_volterra() -> Self {
        Self {
            epochs: 300,
            context_range: [1, 100],
            extra_target_range: [0, 45],
            eval_context: 90,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let [m_min, m_max] = self.context_range;
        let [n_min, n_max] = self.extra_target_range;
        if m_min < 1 || m_min > m_max {
            return Err(Error::Config(format!("invalid context range [{m_min}, {m_max}]")));
        }
        if n_min > n_max {
            return Err(Error::Config(format!("invalid extra target range [{n_min}, {n_max}]")));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        if self.eval_context == 0 {
            return Err(Error::Config("eval_context must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub test_mse: f64,
    pub seconds: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
    /// 1-based epoch whose parameters the model holds after training.
    pub best_epoch: Option<usize>,
}

impl TrainHistory {
    pub fn best(&self) -> Option<&EpochRecord> {
        self.best_epoch.map(|e| &self.epochs[e - 1])
    }

    pub fn final_record(&self) -> Option<&EpochRecord> {
        self.epochs.last()
    }

    /// CSV with header `epoch,train_loss,test_mse,seconds`.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let csv_err = |source| Error::Csv {
            path: path.to_path_buf(),
            source,
        };
        let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
        if self.epochs.is_empty() {
            w.write_record(["epoch", "train_loss", "test_mse", "seconds"]).map_err(csv_err)?;
        }
        for r in &self.epochs {
            w.serialize(r).map_err(csv_err)?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let csv_err = |source| Error::Csv {
            path: path.to_path_buf(),
            source,
        };
        let mut r = csv::Reader::from_path(path).map_err(csv_err)?;
        let epochs = r.deserialize().collect::<std::result::Result<Vec<EpochRecord>, _>>().map_err(csv_err)?;
        let best_epoch = epochs
            .iter()
            .min_by(|a, b| a.test_mse.total_cmp(&b.test_mse))
            .map(|r| r.epoch);
        Ok(Self { epochs, best_epoch })
    }
}

fn check_sigma(q: &DiagGaussian) -> Result<()> {
    if q.sigma.iter().any(|&s| !(s > 0.0)) {
        return Err(Error::Domain("standard deviations must be positive".into()));
    }
    Ok(())
}

/// `KL(q ‖ p)` between diagonal Gaussians.
pub fn kl_diag(q: &DiagGaussian, p: &DiagGaussian) -> Result<f64> {
    if q.dim() != p.dim() {
        return Err(Error::shape("kl_diag", q.dim(), p.dim()));
    }
    check_sigma(q)?;
    check_sigma(p)?;
    let mut total = 0.0;
    for i in 0..q.dim() {
        let (qs, ps) = (q.sigma[i], p.sigma[i]);
        let dm = q.mu[i] - p.mu[i];
        total += (ps.ln() - qs.ln()) + (qs * qs + dm * dm) / (2.0 * ps * ps) - 0.5;
    }
    Ok(total)
}

/// Log density of `y` under `N(mean, sigma² I)`.
pub fn gaussian_loglik(y: &[f64], mean: &[f64], sigma: f64) -> Result<f64> {
    if y.len() != mean.len() {
        return Err(Error::shape("gaussian_loglik", mean.len(), y.len()));
    }
    if !(sigma > 0.0) {
        return Err(Error::Domain(format!("observation sigma must be positive, got {sigma}")));
    }
    let norm = -0.5 * (LN_2PI + 2.0 * sigma.ln());
    Ok(y.iter()
        .zip(mean)
        .map(|(a, m)| norm - (a - m) * (a - m) / (2.0 * sigma * sigma))
        .sum())
}

/// Summed `KL(q ‖ p)` over every row and dimension, on the graph.
pub(crate) fn kl_vars(g: &mut Graph, q: GaussianVars, p: GaussianVars) -> Var {
    let log_p = g.log(p.sigma);
    let log_q = g.log(q.sigma);
    let log_ratio = g.sub(log_p, log_q);
    let q_var = g.square(q.sigma);
    let dm = g.sub(q.mu, p.mu);
    let dm2 = g.square(dm);
    let num = g.add(q_var, dm2);
    let p_var = g.square(p.sigma);
    let den = g.scale(p_var, 2.0);
    let ratio = g.div(num, den);
    let terms = g.add(log_ratio, ratio);
    let terms = g.offset(terms, -0.5);
    g.sum(terms)
}

/// Draws `(target indices, m)`: the first `m` target indices form the
/// context. The number of extra targets is capped at `len - m`.
pub fn sample_split<R: Rng + ?Sized>(len: usize, rng: &mut R, cfg: &TrainConfig) -> Result<(Vec<usize>, usize)> {
    let [m_min, m_max] = cfg.context_range;
    let [n_min, n_max] = cfg.extra_target_range;
    let needed = m_max + n_min;
    if len < needed {
        return Err(Error::InsufficientPoints { needed, available: len });
    }
    let m = rng.random_range(m_min..=m_max);
    let n = rng.random_range(n_min..=n_max.min(len - m));
    Ok((index::sample(rng, len, m + n).into_vec(), m))
}

/// Context and target sets with `C ⊆ T`.
pub fn split_context_target<R: Rng + ?Sized>(
    series: &TimeSeries,
    rng: &mut R,
    cfg: &TrainConfig,
) -> Result<(ContextSet, TargetSet)> {
    let (idx, m) = sample_split(series.len(), rng, cfg)?;
    Ok((ContextSet::from_series(series, &idx[..m]), ContextSet::from_series(series, &idx)))
}

/// Moves the `t0` observation into the context if the model infers the
/// initial state from `y0` alone; adds it when it was not drawn.
fn ensure_y0(model: &Model, series: &TimeSeries, idx: &mut Vec<usize>, m: &mut usize) -> Result<()> {
    if !model.spec().y0_always_in_context {
        return Ok(());
    }
    let t0 = model.spec().t0;
    let tol = 1e-9 * model.spec().step;
    let i0 = series
        .times
        .iter()
        .position(|t| (t - t0).abs() <= tol)
        .ok_or(Error::MissingY0 { t0 })?;
    match idx.iter().position(|&i| i == i0) {
        Some(p) if p < *m => {}
        Some(p) => idx.swap(p, 0),
        None => {
            idx.insert(0, i0);
            *m += 1;
        }
    }
    Ok(())
}

/// One batch element: a series with sampled target indices, the first
/// `context` of which form the context set.
#[derive(Clone, Debug)]
pub struct BatchItem<'a> {
    pub times: &'a [f64],
    pub values: &'a [Vec<f64>],
    pub targets: Vec<usize>,
    pub context: usize,
}

/// Batched negative ELBO, averaged over the batch. Builds the graph and
/// returns it with the loss node.
pub(crate) fn elbo_graph(
    model: &Model,
    items: &[BatchItem<'_>],
    noise: &mut dyn FnMut(usize) -> Vec<f64>,
) -> Result<(Graph, Bound, Var)> {
    let spec = model.spec();
    let mut g = Graph::new();
    let b = model.bind(&mut g);
    let mut points = Vec::new();
    let mut t_segments = Vec::with_capacity(items.len());
    let mut c_segments = Vec::with_capacity(items.len());
    let mut queries = Vec::with_capacity(items.len());
    let mut y_rows = Vec::new();
    for item in items {
        if item.context == 0 || item.context > item.targets.len() {
            return Err(Error::EmptyContext);
        }
        let start = points.len();
        for &i in &item.targets {
            points.push((item.times[i], item.values[i].clone()));
            y_rows.push(item.values[i].as_slice());
        }
        t_segments.push((start..points.len()).collect::<Vec<_>>());
        c_segments.push((start..start + item.context).collect::<Vec<_>>());
        queries.push(item.targets.iter().map(|&i| item.times[i]).collect::<Vec<_>>());
    }
    for (_, y) in &points {
        if y.len() != spec.obs_dim {
            return Err(Error::shape("elbo_loss", spec.obs_dim, y.len()));
        }
    }
    let encoded = model.encode_vars(&mut g, &b, &points);
    let q_t = model.posterior_from_encoding(&mut g, &b, &points, encoded, t_segments)?;
    let q_c = model.posterior_from_encoding(&mut g, &b, &points, encoded, c_segments)?;
    let batch = items.len();
    let mut draw = |g: &mut Graph, q: GaussianVars| {
        let cols = g.value(q.mu).cols();
        let eps = g.constant(Matrix::from_vec(batch, cols, noise(batch * cols)));
        q.reparam(g, eps)
    };
    let l0 = q_t.initial.map(|q| draw(&mut g, q));
    let d = draw(&mut g, q_t.control);
    let decoded = model.decode_queries(&mut g, &b, LatentVars { l0, d }, &queries)?;
    let y = g.constant(Matrix::from_rows(&y_rows));
    let resid = g.sub(decoded.mean, y);
    let sq = g.square(resid);
    let sse = g.sum(sq);
    let sigma = spec.obs_sigma;
    let count = (y_rows.len() * spec.obs_dim) as f64;
    let nll = g.scale(sse, 1.0 / (2.0 * sigma * sigma));
    let nll = g.offset(nll, 0.5 * count * (LN_2PI + 2.0 * sigma.ln()));
    let mut loss = nll;
    if let (Some(qt), Some(qc)) = (q_t.initial, q_c.initial) {
        let kl = kl_vars(&mut g, qt, qc);
        loss = g.add(loss, kl);
    }
    let kl = kl_vars(&mut g, q_t.control, q_c.control);
    loss = g.add(loss, kl);
    let loss = g.scale(loss, 1.0 / batch as f64);
    Ok((g, b, loss))
}

fn normal_noise<R: Rng + ?Sized>(rng: &mut R) -> impl FnMut(usize) -> Vec<f64> + '_ {
    move |n| (0..n).map(|_| StandardNormal.sample(&mut *rng)).collect()
}

/// Negative ELBO for one context/target pair (`C ⊆ T` by value).
pub fn elbo_loss<R: Rng + ?Sized>(model: &Model, ctx: &ContextSet, targets: &TargetSet, rng: &mut R) -> Result<f64> {
    let mut noise = normal_noise(rng);
    elbo_loss_with_noise(model, ctx, targets, &mut noise)
}

/// [`elbo_loss`] with injected standard-normal noise.
pub fn elbo_loss_with_noise(
    model: &Model,
    ctx: &ContextSet,
    targets: &TargetSet,
    noise: &mut dyn FnMut(usize) -> Vec<f64>,
) -> Result<f64> {
    let (times, values, m) = context_target_series(ctx, targets)?;
    let item = BatchItem {
        times: &times,
        values: &values,
        targets: (0..times.len()).collect(),
        context: m,
    };
    let (g, _, loss) = elbo_graph(model, &[item], noise)?;
    Ok(g.scalar(loss))
}

/// Gradient of the negated ELBO for one context/target pair.
pub fn elbo_gradient(
    model: &Model,
    ctx: &ContextSet,
    targets: &TargetSet,
    noise: &mut dyn FnMut(usize) -> Vec<f64>,
) -> Result<(f64, crate::diffcore::Grads)> {
    let (times, values, m) = context_target_series(ctx, targets)?;
    let item = BatchItem {
        times: &times,
        values: &values,
        targets: (0..times.len()).collect(),
        context: m,
    };
    let (mut g, _, loss) = elbo_graph(model, &[item], noise)?;
    let value = g.scalar(loss);
    let grads = g.backward(loss, model.params())?;
    Ok((value, grads))
}

/// Rewrites `(C, T)` as points holding `C` first and then the targets
/// not matched by a context point.
fn context_target_series(ctx: &ContextSet, targets: &TargetSet) -> Result<(Vec<f64>, Vec<Vec<f64>>, usize)> {
    if ctx.is_empty() {
        return Err(Error::EmptyContext);
    }
    let mut rest: Vec<&(f64, Vec<f64>)> = targets.points().iter().collect();
    for p in ctx.points() {
        let pos = rest
            .iter()
            .position(|q| q.0.to_bits() == p.0.to_bits() && q.1 == p.1)
            .ok_or_else(|| Error::Domain("context point missing from the target set".into()))?;
        rest.remove(pos);
    }
    let all: Vec<&(f64, Vec<f64>)> = ctx.points().iter().chain(rest).collect();
    Ok((
        all.iter().map(|p| p.0).collect(),
        all.iter().map(|p| p.1.clone()).collect(),
        ctx.len(),
    ))
}

/// Mean squared error of mean-mode predictions at every point of every
/// test series, each conditioned on `ctx_size` random points. Context
/// draws depend only on `seed` and the series position.
pub fn evaluate_mse(model: &Model, test: &[TimeSeries], ctx_size: usize, seed: u64) -> Result<f64> {
    if test.is_empty() {
        return Err(Error::Config("evaluation set is empty".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut contexts = Vec::with_capacity(test.len());
    for s in test {
        if ctx_size > s.len() {
            return Err(Error::InsufficientPoints {
                needed: ctx_size,
                available: s.len(),
            });
        }
        let mut idx = index::sample(&mut rng, s.len(), ctx_size).into_vec();
        let mut m = idx.len();
        ensure_y0(model, s, &mut idx, &mut m)?;
        contexts.push(idx);
    }
    let preds = predict_batch(model, test, &contexts)?;
    let mut total = 0.0;
    let mut count = 0usize;
    for (s, pred) in test.iter().zip(&preds) {
        for (i, y) in s.values.iter().enumerate() {
            for (a, p) in y.iter().zip(pred.row(i)) {
                total += (a - p) * (a - p);
            }
            count += y.len();
        }
    }
    Ok(total / count as f64)
}

/// Mean-mode predictions at every time of each series given the context
/// indices, in one batched integration.
pub(crate) fn predict_batch(model: &Model, series: &[TimeSeries], contexts: &[Vec<usize>]) -> Result<Vec<Matrix>> {
    let mut g = Graph::new();
    let b = model.bind(&mut g);
    let mut points = Vec::new();
    let mut segments = Vec::with_capacity(series.len());
    for (s, idx) in series.iter().zip(contexts) {
        if idx.is_empty() {
            return Err(Error::EmptyContext);
        }
        let start = points.len();
        points.extend(idx.iter().map(|&i| (s.times[i], s.values[i].clone())));
        segments.push((start..points.len()).collect());
    }
    let post = model.infer_vars(&mut g, &b, &points, segments)?;
    let latents = LatentVars {
        l0: post.initial.map(|q| q.mu),
        d: post.control.mu,
    };
    let queries: Vec<Vec<f64>> = series.iter().map(|s| s.times.clone()).collect();
    let decoded = model.decode_queries(&mut g, &b, latents, &queries)?;
    Ok(crate::model::split_rows(g.value(decoded.mean), &decoded.offsets))
}

/// Trains `model` in place. Each epoch shuffles the training set, takes
/// one optimizer step per batch and evaluates on `test`.
pub fn train(model: &mut Model, train_set: &[TimeSeries], test: &[TimeSeries], cfg: &TrainConfig) -> Result<TrainHistory> {
    train_with(model, train_set, test, cfg, |_| {})
}

/// [`train`] with a callback after every epoch.
pub fn train_with(
    model: &mut Model,
    train_set: &[TimeSeries],
    test: &[TimeSeries],
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainHistory> {
    cfg.validate()?;
    let mut history = TrainHistory::default();
    if cfg.epochs == 0 {
        return Ok(history);
    }
    if train_set.is_empty() || test.is_empty() {
        return Err(Error::Config("training and test sets must be nonempty".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(3);
    let mut opt = OptState::new(
        model.params(),
        RmsPropConfig {
            lr: cfg.learning_rate,
            ..RmsPropConfig::default()
        },
    );
    let mut best: Option<(f64, ParamStore)> = None;
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut step = 0usize;
    for epoch in 1..=cfg.epochs {
        let start = Instant::now();
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let mut items = Vec::with_capacity(chunk.len());
            for &k in chunk {
                let series = &train_set[k];
                let (mut targets, mut context) = sample_split(series.len(), &mut rng, cfg)?;
                ensure_y0(model, series, &mut targets, &mut context)?;
                items.push(BatchItem {
                    times: &series.times,
                    values: &series.values,
                    targets,
                    context,
                });
            }
            let mut noise = normal_noise(&mut rng);
            let (mut g, _, loss) = elbo_graph(model, &items, &mut noise).map_err(|e| at_step(e, step))?;
            let value = g.scalar(loss);
            if !value.is_finite() {
                return Err(Error::Divergence { step, row: None });
            }
            let grads = g.backward(loss, model.params())?;
            rmsprop_step(model.params_mut(), &grads, &mut opt).map_err(|e| at_step(e, step))?;
            loss_sum += value;
            batches += 1;
            step += 1;
        }
        let test_mse = evaluate_mse(model, test, cfg.eval_context, cfg.eval_seed)?;
        let record = EpochRecord {
            epoch,
            train_loss: loss_sum / batches as f64,
            test_mse,
            seconds: start.elapsed().as_secs_f64(),
        };
        on_epoch(&record);
        if best.as_ref().is_none_or(|(m, _)| test_mse < *m) {
            best = Some((test_mse, model.params().clone()));
            history.best_epoch = Some(epoch);
        }
        history.epochs.push(record);
    }
    if cfg.keep_best {
        if let Some((_, params)) = best {
            model.set_params(params);
        }
    } else {
        history.best_epoch = Some(cfg.epochs);
    }
    Ok(history)
}

fn at_step(e: Error, step: usize) -> Error {
    match e {
        Error::Divergence { row, .. } => Error::Divergence { step, row },
        Error::NonFiniteGradient { .. } => Error::Divergence { step, row: None },
        other => other,
    }
}

/// Writes the checkpoint and history of a training run into `dir`.
pub fn write_run(dir: &Path, model: &Model, seed: u64, history: &TrainHistory) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    model.save(&dir.join("checkpoint.json"), seed)?;
    history.write_csv(&dir.join("history.csv"))
}
