pub mod error;
pub mod bench;
pub mod clustering;
pub mod corruption;
pub mod covariance;
pub mod grid;
pub mod identify;
pub mod inference;
pub mod kernel;
pub mod learning;
pub mod metrics;
mod quadrature;
pub mod record;
pub mod simulate;
pub mod synth;

pub use error::{Error, Result};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/overview.md")]
    mod overview {}
    #[doc = include_str!("../../../book/src/model.md")]
    mod model {}
    #[doc = include_str!("../../../book/src/simulation.md")]
    mod simulation {}
    #[doc = include_str!("../../../book/src/corruption.md")]
    mod corruption {}
    #[doc = include_str!("../../../book/src/kernel.md")]
    mod kernel {}
    #[doc = include_str!("../../../book/src/learning.md")]
    mod learning {}
    #[doc = include_str!("../../../book/src/identification.md")]
    mod identification {}
    #[doc = include_str!("../../../book/src/inference.md")]
    mod inference {}
    #[doc = include_str!("../../../book/src/clustering.md")]
    mod clustering {}
    #[doc = include_str!("../../../book/src/scenarios.md")]
    mod scenarios {}
}
