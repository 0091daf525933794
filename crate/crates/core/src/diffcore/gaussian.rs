use serde::{Deserialize, Serialize};

use super::{Graph, Var};
use crate::error::{Error, Result};

/// Diagonal Gaussian: mean vector and per-dimension standard deviation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiagGaussian {
    pub mu: Vec<f64>,
    pub sigma: Vec<f64>,
}

impl DiagGaussian {
    /// Validates equal lengths, finite entries and strictly positive sigma.
    pub fn new(mu: Vec<f64>, sigma: Vec<f64>) -> Result<Self> {
        if mu.len() != sigma.len() {
            return Err(Error::shape("DiagGaussian", mu.len(), sigma.len()));
        }
        if mu.iter().chain(&sigma).any(|v| !v.is_finite()) {
            return Err(Error::Domain("Gaussian parameters must be finite".into()));
        }
        if sigma.iter().any(|&s| s <= 0.0) {
            return Err(Error::Domain("standard deviations must be positive".into()));
        }
        Ok(Self { mu, sigma })
    }

    pub fn standard(dim: usize) -> Self {
        Self {
            mu: vec![0.0; dim],
            sigma: vec![1.0; dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.mu.len()
    }
}

/// `mu + sigma ⊙ noise`, with `noise` drawn from a standard normal by the caller.
pub fn reparam_sample(q: &DiagGaussian, noise: &[f64]) -> Result<Vec<f64>> {
    if noise.len() != q.mu.len() {
        return Err(Error::shape("reparam_sample", q.mu.len(), noise.len()));
    }
    Ok(q.mu
        .iter()
        .zip(&q.sigma)
        .zip(noise)
        .map(|((m, s), e)| m + s * e)
        .collect())
}

/// A batch of diagonal Gaussians living on a graph, one per row.
#[derive(Clone, Copy, Debug)]
pub struct GaussianVars {
    pub mu: Var,
    pub sigma: Var,
}

impl GaussianVars {
    /// Differentiable `mu + sigma ⊙ noise`; `noise` is a constant node of the same shape.
    pub fn reparam(&self, g: &mut Graph, noise: Var) -> Var {
        let scaled = g.mul(self.sigma, noise);
        g.add(self.mu, scaled)
    }

    /// Reads row `i` back as a plain [`DiagGaussian`].
    pub fn row(&self, g: &Graph, i: usize) -> DiagGaussian {
        DiagGaussian {
            mu: g.value(self.mu).row(i).to_vec(),
            sigma: g.value(self.sigma).row(i).to_vec(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_noise_returns_mean_exactly() {
        let q = DiagGaussian::new(vec![0.3, -1.7], vec![0.4, 0.9]).unwrap();
        assert_eq!(reparam_sample(&q, &[0.0, 0.0]).unwrap(), q.mu);
    }

    #[test]
    fn standard_normal_passes_noise_through() {
        let q = DiagGaussian::standard(3);
        let eps = [0.25, -1.5, 2.0];
        assert_eq!(reparam_sample(&q, &eps).unwrap(), eps.to_vec());
    }

    #[test]
    fn elementwise_formula() {
        let q = DiagGaussian::new(vec![1.0, 2.0], vec![0.5, 0.2]).unwrap();
        let s = reparam_sample(&q, &[2.0, -1.0]).unwrap();
        assert_eq!(s, vec![2.0, 1.8]);
    }

    #[test]
    fn length_mismatch_and_bad_sigma_are_errors() {
        let q = DiagGaussian::standard(2);
        assert!(reparam_sample(&q, &[1.0]).is_err());
        assert!(DiagGaussian::new(vec![0.0], vec![0.0]).is_err());
        assert!(DiagGaussian::new(vec![0.0], vec![1.0, 1.0]).is_err());
    }
}
