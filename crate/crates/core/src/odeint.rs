//! Fixed-step classic Runge-Kutta integration on an anchored time lattice.
//!
//! Full steps of length `h` are always taken from `t0` along the lattice
//! `t0, t0 + h, t0 + 2h, …`. A requested time `t` is reached by one partial
//! step of length `t − (t0 + k h)` launched from the lattice point `k`
//! immediately preceding it. The state reported at `t` therefore depends only
//! on `t`, the initial state and the vector field, never on which other times
//! were requested alongside it.

use crate::diffcore::{rk4_combine_scalar, Matrix};
use crate::error::{Error, Result};

/// Relative tolerance (in units of `h`) within which a time snaps onto a
/// lattice point.
const SNAP: f64 = 1e-9;

/// Sorted, deduplicated target times with their lattice anchors.
#[derive(Clone, Debug, PartialEq)]
pub struct TimeGrid {
    t0: f64,
    step: f64,
    times: Vec<f64>,
    anchors: Vec<usize>,
    residuals: Vec<f64>,
    inverse: Vec<usize>,
}

impl TimeGrid {
    pub fn t0(&self) -> f64 {
        self.t0
    }

    pub fn step(&self) -> f64 {
        self.step
    }

    /// Unique target times, strictly increasing.
    pub fn times(&self) -> &[f64] {
        &self.times
    }

    /// Index `k` of the lattice point `t0 + k h` preceding each unique time.
    pub fn anchors(&self) -> &[usize] {
        &self.anchors
    }

    /// Partial-step length for each unique time, in `[0, h)`.
    pub fn residuals(&self) -> &[f64] {
        &self.residuals
    }

    /// For each originally requested time, its slot in [`TimeGrid::times`].
    pub fn inverse(&self) -> &[usize] {
        &self.inverse
    }

    /// Number of unique times.
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    /// Time of lattice point `k`.
    pub fn lattice_time(&self, k: usize) -> f64 {
        self.t0 + k as f64 * self.step
    }

    /// Reorders per-unique-time results back into request order.
    pub fn fan_out<T: Clone>(&self, unique: &[T]) -> Vec<T> {
        self.inverse.iter().map(|&u| unique[u].clone()).collect()
    }
}

/// Lattice anchor and residual for a single time `t ≥ t0`.
fn anchor(t: f64, t0: f64, h: f64) -> (usize, f64) {
    let mut k = ((t - t0) / h).floor().max(0.0) as usize;
    let mut r = t - (t0 + k as f64 * h);
    if r < 0.0 && k > 0 {
        k -= 1;
        r = t - (t0 + k as f64 * h);
    }
    if r >= h {
        k += 1;
        r = t - (t0 + k as f64 * h);
    }
    if r.abs() <= SNAP * h {
        r = 0.0;
    } else if h - r <= SNAP * h {
        k += 1;
        r = 0.0;
    }
    (k, r.max(0.0))
}

/// Sorts and deduplicates `targets`, anchoring each on the lattice of
/// spacing `step` that starts at `t0`.
pub fn prepare_times(targets: &[f64], t0: f64, step: f64) -> Result<TimeGrid> {
    if targets.is_empty() {
        return Err(Error::EmptyGrid);
    }
    if !(step.is_finite() && step > 0.0) {
        return Err(Error::InvalidStep(step));
    }
    if let Some(&t) = targets.iter().find(|&&t| !t.is_finite() || t < t0) {
        return Err(Error::BackwardTime { t, t0 });
    }
    let mut order: Vec<usize> = (0..targets.len()).collect();
    order.sort_by(|&a, &b| targets[a].total_cmp(&targets[b]));
    let mut times: Vec<f64> = Vec::new();
    let mut inverse = vec![0; targets.len()];
    for &i in &order {
        if times.last() != Some(&targets[i]) {
            times.push(targets[i]);
        }
        inverse[i] = times.len() - 1;
    }
    let (anchors, residuals) = times.iter().map(|&t| anchor(t, t0, step)).unzip();
    Ok(TimeGrid {
        t0,
        step,
        times,
        anchors,
        residuals,
        inverse,
    })
}

/// A vector field over some state representation (plain matrices, graph
/// nodes, ...). States hold one independent system per row.
pub trait VectorField {
    type State: Clone;

    /// Time derivative at `(t, state)`.
    fn eval(&mut self, t: f64, state: &Self::State) -> Self::State;

    /// `a + c·b`.
    fn add_scaled(&mut self, a: &Self::State, b: &Self::State, c: f64) -> Self::State;

    /// `l + dt/6 (k1 + 2k2 + 2k3 + k4)`.
    fn combine(&mut self, l: &Self::State, k: [&Self::State; 4], dt: f64) -> Self::State;

    /// First row holding a non-finite entry, if any.
    fn non_finite_row(&self, state: &Self::State) -> Option<usize>;
}

/// One classic RK4 step of length `dt` from `(t, l)`.
pub fn rk4_step<F: VectorField>(field: &mut F, t: f64, l: &F::State, dt: f64) -> F::State {
    let half = 0.5 * dt;
    let k1 = field.eval(t, l);
    let y2 = field.add_scaled(l, &k1, half);
    let k2 = field.eval(t + half, &y2);
    let y3 = field.add_scaled(l, &k2, half);
    let k3 = field.eval(t + half, &y3);
    let y4 = field.add_scaled(l, &k3, dt);
    let k4 = field.eval(t + dt, &y4);
    field.combine(l, [&k1, &k2, &k3, &k4], dt)
}

/// Integrates from `l0` at `grid.t0()` and returns the state at every
/// unique time of `grid`, in sorted order.
pub fn integrate<F: VectorField>(
    field: &mut F,
    l0: F::State,
    grid: &TimeGrid,
) -> Result<Vec<F::State>> {
    if let Some(row) = field.non_finite_row(&l0) {
        return Err(Error::Divergence {
            step: 0,
            row: Some(row),
        });
    }
    let mut state = l0;
    let mut k = 0usize;
    let mut out = Vec::with_capacity(grid.len());
    for (&target_k, &residual) in grid.anchors.iter().zip(&grid.residuals) {
        while k < target_k {
            state = rk4_step(field, grid.lattice_time(k), &state, grid.step);
            k += 1;
            if let Some(row) = field.non_finite_row(&state) {
                return Err(Error::Divergence { step: k, row: Some(row) });
            }
        }
        if residual == 0.0 {
            out.push(state.clone());
        } else {
            let partial = rk4_step(field, grid.lattice_time(k), &state, residual);
            if let Some(row) = field.non_finite_row(&partial) {
                return Err(Error::Divergence {
                    step: k + 1,
                    row: Some(row),
                });
            }
            out.push(partial);
        }
    }
    Ok(out)
}

/// Row-wise field over plain matrices, driven by a closure
/// `f(row, t, state_row) -> derivative_row`.
pub struct MatrixField<F> {
    f: F,
}

impl<F> MatrixField<F>
where
    F: FnMut(usize, f64, &[f64]) -> Vec<f64>,
{
    pub fn new(f: F) -> Self {
        Self { f }
    }
}

impl<F> VectorField for MatrixField<F>
where
    F: FnMut(usize, f64, &[f64]) -> Vec<f64>,
{
    type State = Matrix;

    fn eval(&mut self, t: f64, state: &Matrix) -> Matrix {
        let mut out = Matrix::zeros(state.rows(), state.cols());
        for r in 0..state.rows() {
            let d = (self.f)(r, t, state.row(r));
            assert_eq!(d.len(), state.cols(), "vector field changed the state dimension");
            out.row_mut(r).copy_from_slice(&d);
        }
        out
    }

    fn add_scaled(&mut self, a: &Matrix, b: &Matrix, c: f64) -> Matrix {
        a.zip_map(b, |x, y| x + c * y)
    }

    fn combine(&mut self, l: &Matrix, k: [&Matrix; 4], dt: f64) -> Matrix {
        let mut out = l.clone();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            *v = rk4_combine_scalar(
                l.data()[i],
                k[0].data()[i],
                k[1].data()[i],
                k[2].data()[i],
                k[3].data()[i],
                dt,
            );
        }
        out
    }

    fn non_finite_row(&self, state: &Matrix) -> Option<usize> {
        (0..state.rows()).find(|&r| state.row(r).iter().any(|v| !v.is_finite()))
    }
}

/// Integrates a single system `dl/dt = f(t, l)`; returns the state at each
/// requested time in request order.
pub fn rk4_integrate<F>(mut f: F, l0: &[f64], grid: &TimeGrid) -> Result<Vec<Vec<f64>>>
where
    F: FnMut(f64, &[f64]) -> Vec<f64>,
{
    let mut field = MatrixField::new(|_, t, l: &[f64]| f(t, l));
    let states = integrate(&mut field, Matrix::row_vector(l0.to_vec()), grid)?;
    let unique: Vec<Vec<f64>> = states.into_iter().map(|m| m.into_vec()).collect();
    Ok(grid.fan_out(&unique))
}

/// Integrates `B` independent systems (rows of `l0`) over a shared grid.
/// `f(b, t, l)` is the derivative of system `b`. Returns, per row, a
/// `requests × dim` matrix in request order.
pub fn batch_integrate<F>(f: F, l0: &Matrix, grid: &TimeGrid) -> Result<Vec<Matrix>>
where
    F: FnMut(usize, f64, &[f64]) -> Vec<f64>,
{
    let mut field = MatrixField::new(f);
    let states = integrate(&mut field, l0.clone(), grid)?;
    Ok((0..l0.rows())
        .map(|b| {
            let rows: Vec<&[f64]> = grid.inverse.iter().map(|&u| states[u].row(b)).collect();
            Matrix::from_rows(&rows)
        })
        .collect())
}
