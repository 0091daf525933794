use rand::Rng;
use serde::{Deserialize, Serialize};

use super::graph::sigmoid;
use super::{Graph, Matrix, ParamId, ParamStore, Var};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Tanh,
    Identity,
}

#[derive(Clone, Debug)]
struct Layer {
    weight: ParamId,
    bias: ParamId,
    activation: Activation,
}

/// Fully connected feed-forward network whose tensors live in a [`ParamStore`].
///
/// Layer `i` is registered as `{prefix}.{i}.weight` (shape `out × in`) and
/// `{prefix}.{i}.bias` (shape `1 × out`).
#[derive(Clone, Debug)]
pub struct Mlp {
    widths: Vec<usize>,
    layers: Vec<Layer>,
}

impl Mlp {
    /// `widths = [input, hidden..., output]`. Hidden layers use `hidden`,
    /// the last layer uses `output`.
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        widths: &[usize],
        hidden: Activation,
        output: Activation,
        rng: &mut R,
    ) -> Self {
        assert!(widths.len() >= 2, "an MLP needs at least input and output widths");
        let n = widths.len() - 1;
        let layers = (0..n)
            .map(|i| Layer {
                weight: store.add_weight(format!("{prefix}.{i}.weight"), widths[i + 1], widths[i], rng),
                bias: store.add_bias(format!("{prefix}.{i}.bias"), widths[i + 1]),
                activation: if i + 1 == n { output } else { hidden },
            })
            .collect();
        Self {
            widths: widths.to_vec(),
            layers,
        }
    }

    /// Single affine layer with no activation.
    pub fn linear<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        input: usize,
        output: usize,
        rng: &mut R,
    ) -> Self {
        Self::new(store, prefix, &[input, output], Activation::Identity, Activation::Identity, rng)
    }

    pub fn widths(&self) -> &[usize] {
        &self.widths
    }

    pub fn input_width(&self) -> usize {
        self.widths[0]
    }

    pub fn output_width(&self) -> usize {
        *self.widths.last().unwrap()
    }

    pub fn activations(&self) -> Vec<Activation> {
        self.layers.iter().map(|l| l.activation).collect()
    }

    /// `(weight, bias)` ids per layer.
    pub fn layer_params(&self) -> Vec<(ParamId, ParamId)> {
        self.layers.iter().map(|l| (l.weight, l.bias)).collect()
    }

    /// Puts the network's tensors on `g` once so repeated forward passes
    /// share them.
    pub fn bind(&self, g: &mut Graph, store: &ParamStore) -> BoundMlp {
        BoundMlp {
            input: self.input_width(),
            layers: self
                .layers
                .iter()
                .map(|l| (g.param(store, l.weight), g.param(store, l.bias), l.activation))
                .collect(),
        }
    }

    /// Forward pass on one input vector.
    pub fn forward(&self, store: &ParamStore, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.input_width() {
            return Err(Error::shape("mlp_forward", self.input_width(), x.len()));
        }
        let mut g = Graph::new();
        let bound = self.bind(&mut g, store);
        let input = g.constant(Matrix::row_vector(x.to_vec()));
        let y = bound.forward(&mut g, input);
        Ok(g.value(y).data().to_vec())
    }
}

/// An [`Mlp`] whose parameters are already on a graph.
#[derive(Clone, Debug)]
pub struct BoundMlp {
    input: usize,
    layers: Vec<(Var, Var, Activation)>,
}

impl BoundMlp {
    /// Applies the network row-wise to `x` (`n × input`).
    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        debug_assert_eq!(g.value(x).cols(), self.input);
        let mut h = x;
        for &(w, b, act) in &self.layers {
            h = g.linear(h, w, b);
            h = match act {
                Activation::Relu => g.relu(h),
                Activation::Tanh => g.tanh(h),
                Activation::Identity => h,
            };
        }
        h
    }
}

/// Lower bound of the bounded standard-deviation head.
pub const SIGMA_FLOOR: f64 = 0.1;

/// `0.1 + 0.9 · sigmoid(z)` for a head pre-activation `z`.
pub fn sigma_from_preactivation(z: f64) -> f64 {
    SIGMA_FLOOR + (1.0 - SIGMA_FLOOR) * sigmoid(z)
}

/// Bounded standard deviation head: `0.1 + 0.9 · sigmoid(W h + b)`.
pub fn sigma_head(g: &mut Graph, h: Var, head: &BoundMlp) -> Var {
    let z = head.forward(g, h);
    let s = g.sigmoid(z);
    let s = g.scale(s, 1.0 - SIGMA_FLOOR);
    g.offset(s, SIGMA_FLOOR)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(11)
    }

    #[test]
    fn zero_network_maps_to_zero() {
        let mut store = ParamStore::new();
        let net = Mlp::new(&mut store, "n", &[3, 5, 2], Activation::Tanh, Activation::Identity, &mut rng());
        for id in store.ids().collect::<Vec<_>>() {
            store.get_mut(id).data_mut().fill(0.0);
        }
        assert_eq!(net.forward(&store, &[1.0, -2.0, 3.0]).unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn identity_layer_is_identity() {
        let mut store = ParamStore::new();
        let net = Mlp::linear(&mut store, "id", 2, 2, &mut rng());
        let (w, _) = net.layer_params()[0];
        *store.get_mut(w) = Matrix::identity(2);
        assert_eq!(net.forward(&store, &[1.0, 2.0]).unwrap(), vec![1.0, 2.0]);
    }

    #[test]
    fn wrong_input_width_is_a_shape_error() {
        let mut store = ParamStore::new();
        let net = Mlp::linear(&mut store, "l", 2, 1, &mut rng());
        assert!(matches!(net.forward(&store, &[1.0]), Err(Error::Shape { .. })));
    }

    #[test]
    fn output_width_matches_declaration() {
        let mut store = ParamStore::new();
        let net = Mlp::new(&mut store, "n", &[4, 7, 7, 3], Activation::Relu, Activation::Identity, &mut rng());
        assert_eq!(net.forward(&store, &[0.5; 4]).unwrap().len(), 3);
        assert_eq!(store.total_count(), 4 * 7 + 7 + 7 * 7 + 7 + 7 * 3 + 3);
    }

    #[test]
    fn sigma_head_reference_values() {
        assert_eq!(sigma_from_preactivation(0.0), 0.55);
        assert!((sigma_from_preactivation(-4.0) - 0.116_187_59).abs() < 1e-8);
        assert!((sigma_from_preactivation(40.0) - 1.0).abs() < 1e-15);
    }
}
