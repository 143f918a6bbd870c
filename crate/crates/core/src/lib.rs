//! Mean-field equilibria of extended mean field games with common noise and
//! controlled volatility, the matching N-player Nash systems, and the
//! experiments that compare the two.

pub mod error;
pub mod hamiltonian;
pub mod harness;
pub mod linalg;
pub mod measures;
pub mod mkv;
pub mod model;
pub mod monotonicity;
pub mod nplayer;
pub mod stochastic;

pub use error::{Error, Result};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/model.md")]
    mod model {}
    #[doc = include_str!("../../../book/src/noise.md")]
    mod noise {}
    #[doc = include_str!("../../../book/src/mean-field.md")]
    mod mean_field {}
    #[doc = include_str!("../../../book/src/nplayer.md")]
    mod nplayer {}
    #[doc = include_str!("../../../book/src/monotonicity.md")]
    mod monotonicity {}
    #[doc = include_str!("../../../book/src/convergence.md")]
    mod convergence {}
}
