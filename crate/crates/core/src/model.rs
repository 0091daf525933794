//! The Neural ODE Process family and the Neural Process baseline.
//!
//! A context set is encoded point-wise, mean-aggregated into `r`, and mapped
//! to two diagonal Gaussians: one over the initial latent state `l(t0)`, one
//! over a global control vector `d`. A draw `(l(t0), d)` fixes a latent ODE
//! `dl/dt = f(l, d, t)` whose solution is decoded at each query time. The
//! NP baseline replaces the ODE by a decoder applied to `(t, z)`.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::{Task, TaskSpec, TimeSeries};
use crate::diffcore::{
    sigma_head, Activation, BoundMlp, Checkpoint, DiagGaussian, GaussianVars, Graph, Matrix, Mlp,
    ParamStore, Var,
};
use crate::error::{Error, Result};
use crate::odeint::{integrate, prepare_times, TimeGrid, VectorField};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Variant {
    #[serde(rename = "NDP")]
    Ndp,
    #[serde(rename = "ND2P")]
    Nd2p,
    #[serde(rename = "NDP-L")]
    NdpL,
    #[serde(rename = "ND2P-L")]
    Nd2pL,
    #[serde(rename = "NP")]
    Np,
}

impl Variant {
    pub const ODE_VARIANTS: [Variant; 4] = [Variant::Ndp, Variant::Nd2p, Variant::NdpL, Variant::Nd2pL];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Ndp => "NDP",
            Variant::Nd2p => "ND2P",
            Variant::NdpL => "NDP-L",
            Variant::Nd2pL => "ND2P-L",
            Variant::Np => "NP",
        }
    }

    pub fn is_second_order(self) -> bool {
        matches!(self, Variant::Nd2p | Variant::Nd2pL)
    }

    pub fn is_latent_only(self) -> bool {
        matches!(self, Variant::NdpL | Variant::Nd2pL)
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('_', "-").as_str() {
            "ndp" => Ok(Variant::Ndp),
            "nd2p" => Ok(Variant::Nd2p),
            "ndp-l" => Ok(Variant::NdpL),
            "nd2p-l" => Ok(Variant::Nd2pL),
            "np" => Ok(Variant::Np),
            other => Err(Error::Config(format!("unknown model variant `{other}`"))),
        }
    }
}

/// Architecture and likelihood settings. Fully determines parameter shapes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub variant: Variant,
    pub obs_dim: usize,
    pub encoder_hidden: Vec<usize>,
    pub r_dim: usize,
    pub hidden_dim: usize,
    /// Size of the latent ODE state `l`.
    pub latent_dim: usize,
    /// Size of the global control `d`.
    pub control_dim: usize,
    /// Size of the NP global latent `z` (NP only).
    pub z_dim: usize,
    pub ode_hidden: Vec<usize>,
    pub decoder_hidden: Vec<usize>,
    /// Fixed observation standard deviation.
    pub obs_sigma: f64,
    /// Time origin of the latent ODE.
    pub t0: f64,
    /// Fixed solver step.
    pub step: f64,
    /// Infer `l(t0)` from the observation at `t0` alone.
    pub y0_always_in_context: bool,
}

impl ModelSpec {
    /// Defaults for a task. The solver step equals the spacing of the task
    /// grid, so every stored sample time is a lattice point.
    pub fn for_task(task: &TaskSpec, variant: Variant) -> Self {
        Self {
            variant,
            obs_dim: task.task.obs_dim(),
            encoder_hidden: vec![128, 128],
            r_dim: 50,
            hidden_dim: 64,
            latent_dim: 2,
            control_dim: 10,
            z_dim: 50,
            ode_hidden: vec![64, 64],
            decoder_hidden: vec![128, 128],
            obs_sigma: 0.1,
            t0: task.t0(),
            step: task.spacing(),
            y0_always_in_context: false,
        }
    }

    /// Small architecture for quick experiments and tests.
    pub fn tiny(task: Task, variant: Variant) -> Self {
        Self {
            encoder_hidden: vec![8],
            r_dim: 4,
            hidden_dim: 6,
            control_dim: 3,
            z_dim: 4,
            ode_hidden: vec![6],
            decoder_hidden: vec![6],
            ..Self::for_task(&TaskSpec::new(task, 0), variant)
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("obs_dim", self.obs_dim),
            ("r_dim", self.r_dim),
            ("hidden_dim", self.hidden_dim),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.variant == Variant::Np {
            if self.z_dim == 0 {
                return Err(Error::Config("z_dim must be positive".into()));
            }
        } else {
            if self.latent_dim == 0 || self.control_dim == 0 {
                return Err(Error::Config("latent_dim and control_dim must be positive".into()));
            }
            if self.variant.is_second_order() && !self.latent_dim.is_multiple_of(2) {
                return Err(Error::Config(format!(
                    "{} needs an even latent_dim, got {}",
                    self.variant, self.latent_dim
                )));
            }
        }
        if self
            .encoder_hidden
            .iter()
            .chain(&self.ode_hidden)
            .chain(&self.decoder_hidden)
            .any(|&w| w == 0)
        {
            return Err(Error::Config("layer widths must be positive".into()));
        }
        if !(self.obs_sigma > 0.0 && self.obs_sigma.is_finite()) {
            return Err(Error::Config("obs_sigma must be positive".into()));
        }
        if !(self.step > 0.0 && self.step.is_finite()) || !self.t0.is_finite() {
            return Err(Error::Config("step must be positive and t0 finite".into()));
        }
        Ok(())
    }

    /// Width of the ODE network output.
    fn ode_out(&self) -> usize {
        if self.variant.is_second_order() {
            self.latent_dim / 2
        } else {
            self.latent_dim
        }
    }

    /// Width of the latent slice seen by a linear decoder.
    fn decoded_latent(&self) -> usize {
        if self.variant == Variant::Nd2pL {
            self.latent_dim / 2
        } else {
            self.latent_dim
        }
    }
}

/// Observed `(t, y)` pairs. Order carries no meaning.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ContextSet {
    points: Vec<(f64, Vec<f64>)>,
}

/// Target points share the context representation.
pub type TargetSet = ContextSet;

impl ContextSet {
    /// Points must all have the same (non-zero) dimension.
    pub fn new(points: Vec<(f64, Vec<f64>)>) -> Result<Self> {
        if let Some((_, first)) = points.first() {
            let d = first.len();
            if d == 0 || points.iter().any(|(_, y)| y.len() != d) {
                return Err(Error::Domain("context values must share a positive dimension".into()));
            }
        }
        Ok(Self { points })
    }

    pub fn from_series(series: &TimeSeries, indices: &[usize]) -> Self {
        Self {
            points: indices
                .iter()
                .map(|&i| (series.times[i], series.values[i].clone()))
                .collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &[(f64, Vec<f64>)] {
        &self.points
    }

    pub fn times(&self) -> Vec<f64> {
        self.points.iter().map(|(t, _)| *t).collect()
    }

    pub fn push(&mut self, t: f64, y: Vec<f64>) {
        self.points.push((t, y));
    }

    pub fn dim(&self) -> Option<usize> {
        self.points.first().map(|(_, y)| y.len())
    }
}

/// A concrete draw of the two latent variables.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatentSample {
    pub l0: Vec<f64>,
    pub d: Vec<f64>,
}

/// Variational posterior over `l(t0)` and `d`. For the NP baseline the
/// global latent `z` occupies `control` and `initial` is empty.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Posterior {
    pub initial: DiagGaussian,
    pub control: DiagGaussian,
}

impl Posterior {
    /// Latent sample at the posterior means.
    pub fn mean_sample(&self) -> LatentSample {
        LatentSample {
            l0: self.initial.mu.clone(),
            d: self.control.mu.clone(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum PredictMode {
    /// Decode the trajectory driven by the posterior means.
    Mean,
    /// Additionally draw `samples` latent pairs from the posterior.
    Sample { samples: usize, seed: u64 },
}

/// Predictions at the requested times, in request order.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub times: Vec<f64>,
    /// `times × obs_dim` mean-mode prediction.
    pub mean: Matrix,
    /// One `times × obs_dim` matrix per sampled trajectory.
    pub samples: Vec<Matrix>,
}

#[derive(Clone, Debug)]
struct OdeNets {
    initial_mean: Mlp,
    initial_sigma: Mlp,
    y0_hidden: Option<Mlp>,
    ode: Mlp,
    decoder_h: Option<Mlp>,
    decoder_out: Mlp,
}

#[derive(Clone, Debug)]
enum Head {
    Ode(OdeNets),
    Np { decoder: Mlp },
}

#[derive(Clone, Debug)]
struct Nets {
    encoder: Mlp,
    to_hidden: Mlp,
    control_mean: Mlp,
    control_sigma: Mlp,
    head: Head,
}

/// Parameters plus the network layout for one [`ModelSpec`].
#[derive(Clone, Debug)]
pub struct Model {
    spec: ModelSpec,
    params: ParamStore,
    nets: Nets,
}

/// Checkpoint header.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelHeader {
    pub spec: ModelSpec,
    pub seed: u64,
}

pub(crate) struct BoundOde {
    initial_mean: BoundMlp,
    initial_sigma: BoundMlp,
    y0_hidden: Option<BoundMlp>,
    ode: BoundMlp,
    decoder_h: Option<BoundMlp>,
    decoder_out: BoundMlp,
}

pub(crate) enum BoundHead {
    Ode(BoundOde),
    Np { decoder: BoundMlp },
}

/// A model's networks placed on one graph.
pub(crate) struct Bound {
    encoder: BoundMlp,
    to_hidden: BoundMlp,
    control_mean: BoundMlp,
    control_sigma: BoundMlp,
    head: BoundHead,
}

/// Per-row posteriors on a graph. `initial` is `None` for the NP baseline.
#[derive(Clone, Copy, Debug)]
pub(crate) struct PosteriorVars {
    pub initial: Option<GaussianVars>,
    pub control: GaussianVars,
}

/// Rows of latent draws on a graph (`B × latent_dim`, `B × control_dim`).
#[derive(Clone, Copy, Debug)]
pub(crate) struct LatentVars {
    pub l0: Option<Var>,
    pub d: Var,
}

/// Decoded means for a batch of query lists.
pub(crate) struct Decoded {
    /// `Σ queries × obs_dim`.
    pub mean: Var,
    /// Row range of each batch row's queries inside `mean`.
    pub offsets: Vec<usize>,
}

struct LatentField<'a> {
    g: &'a mut Graph,
    ode: &'a BoundMlp,
    d: Var,
    second_order: bool,
    half: usize,
}

impl VectorField for LatentField<'_> {
    type State = Var;

    fn eval(&mut self, t: f64, l: &Var) -> Var {
        let rows = self.g.value(*l).rows();
        let tcol = self.g.constant(Matrix::filled(rows, 1, t));
        let input = self.g.hconcat(&[*l, self.d, tcol]);
        let accel = self.ode.forward(self.g, input);
        if self.second_order {
            let velocity = self.g.slice_cols(*l, self.half, self.half);
            self.g.hconcat(&[velocity, accel])
        } else {
            accel
        }
    }

    fn add_scaled(&mut self, a: &Var, b: &Var, c: f64) -> Var {
        self.g.add_scaled(*a, *b, c)
    }

    fn combine(&mut self, l: &Var, k: [&Var; 4], dt: f64) -> Var {
        self.g.rk4_combine(*l, [*k[0], *k[1], *k[2], *k[3]], dt)
    }

    fn non_finite_row(&self, state: &Var) -> Option<usize> {
        let m = self.g.value(*state);
        (0..m.rows()).find(|&r| m.row(r).iter().any(|v| !v.is_finite()))
    }
}

fn points_matrix(points: &[(f64, Vec<f64>)]) -> Matrix {
    let cols = 1 + points.first().map_or(0, |(_, y)| y.len());
    let mut m = Matrix::zeros(points.len(), cols);
    for (i, (t, y)) in points.iter().enumerate() {
        let row = m.row_mut(i);
        row[0] = *t;
        row[1..].copy_from_slice(y);
    }
    m
}

impl Model {
    /// Builds a model with weights drawn from `seed`.
    pub fn new(spec: ModelSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rng = &mut rng;
        let mut p = ParamStore::new();
        let s = &spec;
        let mut enc = vec![1 + s.obs_dim];
        enc.extend(&s.encoder_hidden);
        enc.push(s.r_dim);
        let encoder = Mlp::new(&mut p, "encoder", &enc, Activation::Relu, Activation::Identity, rng);
        let to_hidden = Mlp::new(&mut p, "to_hidden", &[s.r_dim, s.hidden_dim], Activation::Relu, Activation::Relu, rng);
        let global = if s.variant == Variant::Np { s.z_dim } else { s.control_dim };
        let (mean_name, sigma_name) = if s.variant == Variant::Np {
            ("z_mean", "z_sigma")
        } else {
            ("control_mean", "control_sigma")
        };
        let control_mean = Mlp::linear(&mut p, mean_name, s.hidden_dim, global, rng);
        let control_sigma = Mlp::linear(&mut p, sigma_name, s.hidden_dim, global, rng);
        let head = if s.variant == Variant::Np {
            let mut dec = vec![1 + s.z_dim];
            dec.extend(&s.decoder_hidden);
            dec.push(s.obs_dim);
            Head::Np {
                decoder: Mlp::new(&mut p, "decoder", &dec, Activation::Relu, Activation::Identity, rng),
            }
        } else {
            let initial_mean = Mlp::linear(&mut p, "initial_mean", s.hidden_dim, s.latent_dim, rng);
            let initial_sigma = Mlp::linear(&mut p, "initial_sigma", s.hidden_dim, s.latent_dim, rng);
            let y0_hidden = s.y0_always_in_context.then(|| {
                Mlp::new(&mut p, "y0_hidden", &[s.obs_dim, s.hidden_dim], Activation::Relu, Activation::Relu, rng)
            });
            let mut ode = vec![s.latent_dim + s.control_dim + 1];
            ode.extend(&s.ode_hidden);
            ode.push(s.ode_out());
            let ode = Mlp::new(&mut p, "ode", &ode, Activation::Tanh, Activation::Identity, rng);
            let (decoder_h, decoder_out) = if s.variant.is_latent_only() {
                (None, Mlp::linear(&mut p, "decoder_out", s.decoded_latent(), s.obs_dim, rng))
            } else {
                let mut h = vec![s.latent_dim + s.control_dim + 1];
                h.extend(&s.decoder_hidden);
                let last = *h.last().unwrap();
                let decoder_h = Mlp::new(&mut p, "decoder_h", &h, Activation::Relu, Activation::Relu, rng);
                let out = Mlp::linear(&mut p, "decoder_out", s.latent_dim + last, s.obs_dim, rng);
                (Some(decoder_h), out)
            };
            Head::Ode(OdeNets {
                initial_mean,
                initial_sigma,
                y0_hidden,
                ode,
                decoder_h,
                decoder_out,
            })
        };
        Ok(Self {
            spec,
            params: p,
            nets: Nets {
                encoder,
                to_hidden,
                control_mean,
                control_sigma,
                head,
            },
        })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn set_params(&mut self, params: ParamStore) {
        assert_eq!(params.len(), self.params.len(), "parameter layout mismatch");
        self.params = params;
    }

    pub fn param_count(&self) -> usize {
        self.params.total_count()
    }

    /// Zeroes the last layer of the latent ODE network, making
    /// `f(l, d, t) ≡ 0`. No-op for the NP baseline.
    pub fn zero_ode_output_layer(&mut self) {
        if let Head::Ode(nets) = &self.nets.head {
            let (w, b) = *nets.ode.layer_params().last().unwrap();
            self.params.get_mut(w).data_mut().fill(0.0);
            self.params.get_mut(b).data_mut().fill(0.0);
        }
    }

    /// `(weight, bias)` of the output layer of the decoder.
    pub fn decoder_output_layer(&self) -> (crate::diffcore::ParamId, crate::diffcore::ParamId) {
        match &self.nets.head {
            Head::Ode(n) => n.decoder_out.layer_params()[0],
            Head::Np { decoder } => *decoder.layer_params().last().unwrap(),
        }
    }

    pub fn save(&self, path: &Path, seed: u64) -> Result<()> {
        let ckpt = Checkpoint {
            header: ModelHeader {
                spec: self.spec.clone(),
                seed,
            },
            params: self.params.to_entries(),
        };
        let text = serde_json::to_string(&ckpt).map_err(|e| Error::json(path, e))?;
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<(Self, ModelHeader)> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let ckpt: Checkpoint<ModelHeader> = serde_json::from_str(&text).map_err(|e| Error::json(path, e))?;
        let mut model = Self::new(ckpt.header.spec.clone(), ckpt.header.seed)?;
        model.params.load_entries(&ckpt.params)?;
        Ok((model, ckpt.header))
    }

    pub(crate) fn bind(&self, g: &mut Graph) -> Bound {
        let p = &self.params;
        let n = &self.nets;
        Bound {
            encoder: n.encoder.bind(g, p),
            to_hidden: n.to_hidden.bind(g, p),
            control_mean: n.control_mean.bind(g, p),
            control_sigma: n.control_sigma.bind(g, p),
            head: match &n.head {
                Head::Np { decoder } => BoundHead::Np {
                    decoder: decoder.bind(g, p),
                },
                Head::Ode(o) => BoundHead::Ode(BoundOde {
                    initial_mean: o.initial_mean.bind(g, p),
                    initial_sigma: o.initial_sigma.bind(g, p),
                    y0_hidden: o.y0_hidden.as_ref().map(|m| m.bind(g, p)),
                    ode: o.ode.bind(g, p),
                    decoder_h: o.decoder_h.as_ref().map(|m| m.bind(g, p)),
                    decoder_out: o.decoder_out.bind(g, p),
                }),
            },
        }
    }

    fn check_points(&self, points: &[(f64, Vec<f64>)]) -> Result<()> {
        if let Some((_, y)) = points.iter().find(|(_, y)| y.len() != self.spec.obs_dim) {
            return Err(Error::shape("context", self.spec.obs_dim, y.len()));
        }
        Ok(())
    }

    /// Encodes every point once (`n × r_dim`).
    pub(crate) fn encode_vars(&self, g: &mut Graph, b: &Bound, points: &[(f64, Vec<f64>)]) -> Var {
        let input = g.constant(points_matrix(points));
        b.encoder.forward(g, input)
    }

    /// Encodes `points` once and aggregates them over `segments` (one per
    /// batch row). Returns the `B × r_dim` representation.
    pub(crate) fn aggregate_vars(
        &self,
        g: &mut Graph,
        b: &Bound,
        points: &[(f64, Vec<f64>)],
        segments: Vec<Vec<usize>>,
    ) -> Var {
        let encoded = self.encode_vars(g, b, points);
        g.segment_mean(encoded, segments)
    }

    /// Posteriors for each segment of an existing encoding of `points`.
    pub(crate) fn posterior_from_encoding(
        &self,
        g: &mut Graph,
        b: &Bound,
        points: &[(f64, Vec<f64>)],
        encoded: Var,
        segments: Vec<Vec<usize>>,
    ) -> Result<PosteriorVars> {
        let y0 = self.y0_rows(g, points, &segments)?;
        let r = g.segment_mean(encoded, segments);
        Ok(self.posterior_vars(g, b, r, y0))
    }

    /// Posterior heads for each aggregated row of `r`. `y0_rows` supplies
    /// the observation at `t0` per row when `y0_always_in_context` is set.
    pub(crate) fn posterior_vars(&self, g: &mut Graph, b: &Bound, r: Var, y0_rows: Option<Var>) -> PosteriorVars {
        let h = b.to_hidden.forward(g, r);
        let control = GaussianVars {
            mu: b.control_mean.forward(g, h),
            sigma: sigma_head(g, h, &b.control_sigma),
        };
        let initial = match &b.head {
            BoundHead::Np { .. } => None,
            BoundHead::Ode(o) => {
                let h_l = match (&o.y0_hidden, y0_rows) {
                    (Some(net), Some(y0)) => net.forward(g, y0),
                    _ => h,
                };
                Some(GaussianVars {
                    mu: o.initial_mean.forward(g, h_l),
                    sigma: sigma_head(g, h_l, &o.initial_sigma),
                })
            }
        };
        PosteriorVars { initial, control }
    }

    /// Observation at `t0` for each segment, as a constant `B × obs_dim` node.
    pub(crate) fn y0_rows(
        &self,
        g: &mut Graph,
        points: &[(f64, Vec<f64>)],
        segments: &[Vec<usize>],
    ) -> Result<Option<Var>> {
        if !self.spec.y0_always_in_context || self.spec.variant == Variant::Np {
            return Ok(None);
        }
        let t0 = self.spec.t0;
        let tol = 1e-9 * self.spec.step;
        let mut rows = Vec::with_capacity(segments.len());
        for seg in segments {
            let i = seg
                .iter()
                .copied()
                .find(|&i| (points[i].0 - t0).abs() <= tol)
                .ok_or(Error::MissingY0 { t0 })?;
            rows.push(points[i].1.clone());
        }
        Ok(Some(g.constant(Matrix::from_rows(&rows))))
    }

    /// Full inference path for a batch of point sets: encode, aggregate,
    /// and produce per-row posteriors.
    pub(crate) fn infer_vars(
        &self,
        g: &mut Graph,
        b: &Bound,
        points: &[(f64, Vec<f64>)],
        segments: Vec<Vec<usize>>,
    ) -> Result<PosteriorVars> {
        let encoded = self.encode_vars(g, b, points);
        self.posterior_from_encoding(g, b, points, encoded, segments)
    }

    /// Integrates the latent ODE for every row of `latents` over the union
    /// of `queries` and decodes row `i` at `queries[i]`.
    pub(crate) fn decode_queries(
        &self,
        g: &mut Graph,
        b: &Bound,
        latents: LatentVars,
        queries: &[Vec<f64>],
    ) -> Result<Decoded> {
        let mut offsets = Vec::with_capacity(queries.len() + 1);
        offsets.push(0);
        for q in queries {
            offsets.push(offsets.last().unwrap() + q.len());
        }
        let flat_times: Vec<f64> = queries.iter().flatten().copied().collect();
        let row_of: Vec<usize> = queries
            .iter()
            .enumerate()
            .flat_map(|(i, q)| std::iter::repeat_n(i, q.len()))
            .collect();
        let tcol = g.constant(Matrix::column(flat_times.clone()));
        let mean = match &b.head {
            BoundHead::Np { decoder } => {
                let z = g.select_rows(latents.d, row_of);
                let input = g.hconcat(&[tcol, z]);
                decoder.forward(g, input)
            }
            BoundHead::Ode(o) => {
                let l0 = latents.l0.expect("ODE variants need an initial state");
                let grid = prepare_times(&flat_times, self.spec.t0, self.spec.step)?;
                let states = self.integrate_vars(g, o, l0, latents.d, &grid)?;
                let picks = grid
                    .inverse()
                    .iter()
                    .zip(&row_of)
                    .map(|(&u, &r)| (states[u], r))
                    .collect();
                let l_t = g.pick_rows(picks);
                match &o.decoder_h {
                    Some(h_net) => {
                        let d_rows = g.select_rows(latents.d, row_of);
                        let input = g.hconcat(&[l_t, d_rows, tcol]);
                        let h = h_net.forward(g, input);
                        let cat = g.hconcat(&[l_t, h]);
                        o.decoder_out.forward(g, cat)
                    }
                    None => {
                        let l_in = if self.spec.variant == Variant::Nd2pL {
                            g.slice_cols(l_t, 0, self.spec.latent_dim / 2)
                        } else {
                            l_t
                        };
                        o.decoder_out.forward(g, l_in)
                    }
                }
            }
        };
        Ok(Decoded { mean, offsets })
    }

    fn integrate_vars(&self, g: &mut Graph, o: &BoundOde, l0: Var, d: Var, grid: &TimeGrid) -> Result<Vec<Var>> {
        let mut field = LatentField {
            g,
            ode: &o.ode,
            d,
            second_order: self.spec.variant.is_second_order(),
            half: self.spec.latent_dim / 2,
        };
        integrate(&mut field, l0, grid)
    }

    /// Mean of the encoded context, `r`.
    pub fn encode_aggregate(&self, ctx: &ContextSet) -> Result<Vec<f64>> {
        if ctx.is_empty() {
            return Err(Error::EmptyContext);
        }
        self.check_points(ctx.points())?;
        let mut g = Graph::new();
        let b = self.bind(&mut g);
        let r = self.aggregate_vars(&mut g, &b, ctx.points(), vec![(0..ctx.len()).collect()]);
        Ok(g.value(r).data().to_vec())
    }

    /// Variational posterior given a context.
    pub fn infer_posterior(&self, ctx: &ContextSet) -> Result<Posterior> {
        if ctx.is_empty() {
            return Err(Error::EmptyContext);
        }
        self.check_points(ctx.points())?;
        let mut g = Graph::new();
        let b = self.bind(&mut g);
        let post = self.infer_vars(&mut g, &b, ctx.points(), vec![(0..ctx.len()).collect()])?;
        Ok(Posterior {
            initial: post.initial.map_or_else(|| DiagGaussian::standard(0), |q| q.row(&g, 0)),
            control: post.control.row(&g, 0),
        })
    }

    /// Standard normal prior over the latent variables, for prior sampling.
    pub fn prior(&self) -> Posterior {
        match self.spec.variant {
            Variant::Np => Posterior {
                initial: DiagGaussian::standard(0),
                control: DiagGaussian::standard(self.spec.z_dim),
            },
            _ => Posterior {
                initial: DiagGaussian::standard(self.spec.latent_dim),
                control: DiagGaussian::standard(self.spec.control_dim),
            },
        }
    }

    /// `dl/dt` of the latent ODE at `(l, d, t)`.
    pub fn latent_derivative(&self, l: &[f64], d: &[f64], t: f64) -> Result<Vec<f64>> {
        let Head::Ode(_) = &self.nets.head else {
            return Err(Error::Config("the NP baseline has no latent ODE".into()));
        };
        self.check_latent(l, d)?;
        let mut g = Graph::new();
        let b = self.bind(&mut g);
        let BoundHead::Ode(o) = &b.head else { unreachable!() };
        let lv = g.constant(Matrix::row_vector(l.to_vec()));
        let dv = g.constant(Matrix::row_vector(d.to_vec()));
        let mut field = LatentField {
            g: &mut g,
            ode: &o.ode,
            d: dv,
            second_order: self.spec.variant.is_second_order(),
            half: self.spec.latent_dim / 2,
        };
        let out = field.eval(t, &lv);
        Ok(g.value(out).data().to_vec())
    }

    fn check_latent(&self, l: &[f64], d: &[f64]) -> Result<()> {
        let (want_l, want_d) = match self.spec.variant {
            Variant::Np => (0, self.spec.z_dim),
            _ => (self.spec.latent_dim, self.spec.control_dim),
        };
        if l.len() != want_l {
            return Err(Error::shape("latent state", want_l, l.len()));
        }
        if d.len() != want_d {
            return Err(Error::shape("control", want_d, d.len()));
        }
        Ok(())
    }

    /// Predictive distribution over `y` given the latent state at time `t`.
    /// For the NP baseline, `l_t` is empty and `d` is `z`.
    pub fn decode(&self, l_t: &[f64], d: &[f64], t: f64) -> Result<DiagGaussian> {
        self.check_latent(l_t, d)?;
        let mut g = Graph::new();
        let b = self.bind(&mut g);
        let tcol = g.constant(Matrix::filled(1, 1, t));
        let dv = g.constant(Matrix::row_vector(d.to_vec()));
        let mean = match &b.head {
            BoundHead::Np { decoder } => {
                let input = g.hconcat(&[tcol, dv]);
                decoder.forward(&mut g, input)
            }
            BoundHead::Ode(o) => {
                let lv = g.constant(Matrix::row_vector(l_t.to_vec()));
                match &o.decoder_h {
                    Some(h_net) => {
                        let input = g.hconcat(&[lv, dv, tcol]);
                        let h = h_net.forward(&mut g, input);
                        let cat = g.hconcat(&[lv, h]);
                        o.decoder_out.forward(&mut g, cat)
                    }
                    None => {
                        let l_in = if self.spec.variant == Variant::Nd2pL {
                            g.slice_cols(lv, 0, self.spec.latent_dim / 2)
                        } else {
                            lv
                        };
                        o.decoder_out.forward(&mut g, l_in)
                    }
                }
            }
        };
        Ok(DiagGaussian {
            mu: g.value(mean).data().to_vec(),
            sigma: vec![self.spec.obs_sigma; self.spec.obs_dim],
        })
    }

    /// Decoded mean trajectories for explicit latent draws, all integrated
    /// in one batch. Returns one `times × obs_dim` matrix per draw.
    pub fn predict_latents(&self, latents: &[LatentSample], times: &[f64]) -> Result<Vec<Matrix>> {
        if latents.is_empty() {
            return Ok(Vec::new());
        }
        for s in latents {
            self.check_latent(&s.l0, &s.d)?;
        }
        let mut g = Graph::new();
        let b = self.bind(&mut g);
        let l0 = (self.spec.variant != Variant::Np).then(|| {
            let rows: Vec<&[f64]> = latents.iter().map(|s| s.l0.as_slice()).collect();
            g.constant(Matrix::from_rows(&rows))
        });
        let d_rows: Vec<&[f64]> = latents.iter().map(|s| s.d.as_slice()).collect();
        let d = g.constant(Matrix::from_rows(&d_rows));
        let queries = vec![times.to_vec(); latents.len()];
        let dec = self.decode_queries(&mut g, &b, LatentVars { l0, d }, &queries)?;
        Ok(split_rows(g.value(dec.mean), &dec.offsets))
    }

    /// Predictions at `times` given a context. Handles every variant,
    /// including the NP baseline.
    pub fn predict(&self, ctx: &ContextSet, times: &[f64], mode: PredictMode) -> Result<Prediction> {
        let posterior = self.infer_posterior(ctx)?;
        self.predict_from_posterior(&posterior, times, mode)
    }

    /// NP-baseline prediction; identical contract to [`Model::predict`].
    pub fn np_predict(&self, ctx: &ContextSet, times: &[f64], mode: PredictMode) -> Result<Prediction> {
        if self.spec.variant != Variant::Np {
            return Err(Error::Config(format!("np_predict called on a {} model", self.spec.variant)));
        }
        self.predict(ctx, times, mode)
    }

    /// Predictions from an explicit posterior (or [`Model::prior`]).
    pub fn predict_from_posterior(&self, posterior: &Posterior, times: &[f64], mode: PredictMode) -> Result<Prediction> {
        let mut latents = vec![posterior.mean_sample()];
        if let PredictMode::Sample { samples, seed } = mode {
            latents.extend(draw_latents(posterior, samples, seed)?);
        }
        let mut trajectories = self.predict_latents(&latents, times)?.into_iter();
        let mean = trajectories.next().expect("mean trajectory");
        Ok(Prediction {
            times: times.to_vec(),
            mean,
            samples: trajectories.collect(),
        })
    }
}

/// `count` latent draws from `posterior`, reproducible from `seed`.
pub fn draw_latents(posterior: &Posterior, count: usize, seed: u64) -> Result<Vec<LatentSample>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut noise = |n: usize| -> Vec<f64> { (0..n).map(|_| StandardNormal.sample(&mut rng)).collect() };
    (0..count)
        .map(|_| {
            let el = noise(posterior.initial.dim());
            let ed = noise(posterior.control.dim());
            Ok(LatentSample {
                l0: crate::diffcore::reparam_sample(&posterior.initial, &el)?,
                d: crate::diffcore::reparam_sample(&posterior.control, &ed)?,
            })
        })
        .collect()
}

pub(crate) fn split_rows(m: &Matrix, offsets: &[usize]) -> Vec<Matrix> {
    offsets
        .windows(2)
        .map(|w| {
            let rows: Vec<&[f64]> = (w[0]..w[1]).map(|i| m.row(i)).collect();
            if rows.is_empty() {
                Matrix::zeros(0, m.cols())
            } else {
                Matrix::from_rows(&rows)
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{series_1d, TaskSpec};

    fn sine_ctx(indices: &[usize]) -> ContextSet {
        let s = series_1d(&TaskSpec::new(Task::Sine, 0), 0.8, 0.2);
        ContextSet::from_series(&s, indices)
    }

    #[test]
    fn second_order_needs_even_latent() {
        let mut spec = ModelSpec::tiny(Task::Sine, Variant::Nd2p);
        spec.latent_dim = 3;
        assert!(Model::new(spec, 0).is_err());
    }

    #[test]
    fn single_point_mean_is_the_encoding() {
        let model = Model::new(ModelSpec::tiny(Task::Sine, Variant::Ndp), 1).unwrap();
        let ctx = sine_ctx(&[17]);
        let (t, y) = &ctx.points()[0];
        let mut x = vec![*t];
        x.extend(y);
        let direct = model.nets.encoder.forward(model.params(), &x).unwrap();
        assert_eq!(model.encode_aggregate(&ctx).unwrap(), direct);
    }

    #[test]
    fn duplicated_point_aggregates_like_one() {
        let model = Model::new(ModelSpec::tiny(Task::Sine, Variant::Ndp), 1).unwrap();
        assert_eq!(
            model.encode_aggregate(&sine_ctx(&[4, 4])).unwrap(),
            model.encode_aggregate(&sine_ctx(&[4])).unwrap()
        );
    }

    #[test]
    fn empty_context_is_an_error() {
        let model = Model::new(ModelSpec::tiny(Task::Sine, Variant::Ndp), 1).unwrap();
        assert!(matches!(
            model.infer_posterior(&ContextSet::default()),
            Err(Error::EmptyContext)
        ));
    }

    #[test]
    fn y0_flag_requires_t0_in_context() {
        let mut spec = ModelSpec::tiny(Task::Sine, Variant::Ndp);
        spec.y0_always_in_context = true;
        let model = Model::new(spec, 2).unwrap();
        assert!(matches!(
            model.infer_posterior(&sine_ctx(&[5, 9])),
            Err(Error::MissingY0 { .. })
        ));
        let with = model.infer_posterior(&sine_ctx(&[5, 0])).unwrap();
        let other = model.infer_posterior(&sine_ctx(&[0, 40, 70])).unwrap();
        assert_eq!(with.initial, other.initial, "q_L depends on y0 only");
        assert_ne!(with.control, other.control);
    }

    #[test]
    fn second_order_zero_acceleration_drifts() {
        let mut model = Model::new(ModelSpec::tiny(Task::Sine, Variant::Nd2p), 3).unwrap();
        model.zero_ode_output_layer();
        let d = vec![0.1, 0.2, 0.3];
        assert_eq!(model.latent_derivative(&[0.7, -1.3], &d, 0.4).unwrap(), vec![-1.3, 0.0]);
    }

    #[test]
    fn zeroed_final_ode_layer_gives_zero_derivative() {
        let mut model = Model::new(ModelSpec::tiny(Task::Sine, Variant::Ndp), 3).unwrap();
        model.zero_ode_output_layer();
        let out = model.latent_derivative(&[0.7, -1.3], &[1.0, 2.0, 3.0], 0.4).unwrap();
        assert_eq!(out, vec![0.0, 0.0]);
    }

    #[test]
    fn latent_only_identity_decoder_returns_latent() {
        let mut spec = ModelSpec::tiny(Task::LotkaVolterra, Variant::NdpL);
        spec.latent_dim = 2;
        let mut model = Model::new(spec, 4).unwrap();
        let (w, _) = model.decoder_output_layer();
        *model.params_mut().get_mut(w) = Matrix::identity(2);
        let q = model.decode(&[0.3, -0.8], &[0.0; 3], 1.0).unwrap();
        assert_eq!(q.mu, vec![0.3, -0.8]);
        assert_eq!(q.sigma, vec![0.1, 0.1]);
    }

    #[test]
    fn zeroed_decoder_gives_zero_mean() {
        let mut model = Model::new(ModelSpec::tiny(Task::Sine, Variant::Ndp), 5).unwrap();
        let (w, b) = model.decoder_output_layer();
        model.params_mut().get_mut(w).data_mut().fill(0.0);
        model.params_mut().get_mut(b).data_mut().fill(0.0);
        let q = model.decode(&[0.3, -0.8], &[0.5; 3], 1.0).unwrap();
        assert_eq!(q.mu, vec![0.0]);
        assert_eq!(q.sigma, vec![0.1]);
    }

    #[test]
    fn sampling_is_seed_deterministic() {
        let model = Model::new(ModelSpec::tiny(Task::Sine, Variant::Ndp), 6).unwrap();
        let ctx = sine_ctx(&[3, 50]);
        let times = [-3.0, 0.0, 2.5];
        let mode = PredictMode::Sample { samples: 4, seed: 9 };
        let a = model.predict(&ctx, &times, mode).unwrap();
        let b = model.predict(&ctx, &times, mode).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.samples.len(), 4);
        let mean_only = model.predict(&ctx, &times, PredictMode::Mean).unwrap();
        assert_eq!(mean_only.mean, a.mean);
    }

    #[test]
    fn np_ignores_ode_and_predicts() {
        let model = Model::new(ModelSpec::tiny(Task::Sine, Variant::Np), 7).unwrap();
        let ctx = sine_ctx(&[3, 50]);
        let p = model.np_predict(&ctx, &[-1.0, 1.0], PredictMode::Mean).unwrap();
        assert_eq!(p.mean.shape(), (2, 1));
        assert!(model.latent_derivative(&[], &[0.0; 4], 0.0).is_err());
        let ndp = Model::new(ModelSpec::tiny(Task::Sine, Variant::Ndp), 7).unwrap();
        assert!(ndp.np_predict(&ctx, &[0.0], PredictMode::Mean).is_err());
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.json");
        let model = Model::new(ModelSpec::tiny(Task::Sine, Variant::Nd2pL), 8).unwrap();
        model.save(&path, 8).unwrap();
        let (loaded, header) = Model::load(&path).unwrap();
        assert_eq!(header.seed, 8);
        assert_eq!(loaded.params(), model.params());
    }
}
