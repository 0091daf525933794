//! Neural ODE Processes: stochastic processes over time series driven by a
//! data-conditioned distribution over latent neural ODEs.

pub mod active;
pub mod data;
pub mod diffcore;
mod error;
pub mod model;
pub mod odeint;
pub mod vi;

pub use error::{Error, Result};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../README.md")]
    struct Readme;
    #[doc = include_str!("../../../book/src/introduction.md")]
    struct Introduction;
    #[doc = include_str!("../../../book/src/data.md")]
    struct Data;
    #[doc = include_str!("../../../book/src/autodiff.md")]
    struct Autodiff;
    #[doc = include_str!("../../../book/src/solver.md")]
    struct Solver;
    #[doc = include_str!("../../../book/src/model.md")]
    struct Model;
    #[doc = include_str!("../../../book/src/training.md")]
    struct Training;
    #[doc = include_str!("../../../book/src/active.md")]
    struct Active;
    #[doc = include_str!("../../../book/src/cli.md")]
    struct Cli;
}
