//! Learning optimal advantage from regret-generated pairwise preferences in
//! deterministic gridworlds, and comparing greedy action on the learned table
//! with planning on it as a reward.
//!
//! See the guide in `book/` for a walkthrough.

#[macro_use]
mod macros;

pub mod analysis;
pub mod cli;
pub mod dp;
pub mod error;
pub mod gridworld;
pub mod harness;
pub mod learner;
pub mod policies;
pub mod preferences;
pub mod seed;

pub use error::{Error, Result};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/gridworlds.md")]
    mod gridworlds {}
    #[doc = include_str!("../../../book/src/values.md")]
    mod values {}
    #[doc = include_str!("../../../book/src/preferences.md")]
    mod preferences {}
    #[doc = include_str!("../../../book/src/learning.md")]
    mod learning {}
    #[doc = include_str!("../../../book/src/policies.md")]
    mod policies {}
    #[doc = include_str!("../../../book/src/loops.md")]
    mod loops {}
    #[doc = include_str!("../../../book/src/experiments.md")]
    mod experiments {}
    #[doc = include_str!("../../../book/src/statistics.md")]
    mod statistics {}
}
