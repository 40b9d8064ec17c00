pub mod cli;
pub mod dataset;
pub mod decoder;
pub mod error;
pub mod gmi;
pub mod modes;
pub mod npy;
pub mod probe;
pub mod rng;
pub mod stats;
pub mod synth;
pub mod transport;
#[cfg(test)]
mod testkit;

pub use error::{Error, Result};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/data.md")]
    mod data {}
    #[doc = include_str!("../../../book/src/synth.md")]
    mod synth {}
    #[doc = include_str!("../../../book/src/bound.md")]
    mod bound {}
    #[doc = include_str!("../../../book/src/modes.md")]
    mod modes {}
    #[doc = include_str!("../../../book/src/probes.md")]
    mod probes {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
