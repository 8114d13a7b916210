//! fpklab — a particle laboratory for nonlinear Fokker-Planck-Kolmogorov
//! equations on the space of subprobability measures.
//!
//! The crate simulates deterministic and common-noise stochastic nonlinear
//! FPK equations by interacting particle systems, embeds the measure space
//! into sequence spaces through countable test-function dictionaries, and
//! verifies the structural identities of the theory as testable residuals
//! and martingale statistics:
//!
//! * the time-integrated weak formulation of the nonlinear equation and its
//!   mass-conservation consequences ([`detflow`]);
//! * the lifted linear continuity equation for mixture laws on the measure
//!   space, the sequence-space coordinate equations, and the constructive
//!   superposition audit ([`lift`]);
//! * the stochastic weak formulation with its Itô term, the coordinate
//!   martingale problem with covariation identity, and the lifted
//!   second-order equation ([`stochflow`]).
//!
//! Everything is reproducible: one master seed drives counter-derived
//! streams ([`rng`]), reductions have thread-independent shapes, and rerun
//! artifacts are byte-identical.
//!
//! A narrative guide with runnable examples lives in the `book/` directory
//! of the repository; its code blocks compile as doctests of this crate.

pub mod detflow;
pub mod error;
pub mod generator;
pub mod harness;
pub mod lift;
pub mod measure;
pub mod residual;
pub mod rng;
pub mod stochflow;
pub mod testfn;
pub mod util;

pub use error::{Error, Result};
pub use measure::{Chart, CoordinatePath, MeasurePath, ParticleMeasure};
pub use residual::ResidualCurve;
pub use testfn::{c2b_norm, cutoff_sequence, make_bump, FamilyParams, TestFamily, TestFunction};

/// Book chapters compiled as doctests (kept in sync with `book/src/`).
#[cfg(doctest)]
mod book {
    macro_rules! chapter {
        ($name:ident, $path:literal) => {
            #[doc = include_str!($path)]
            #[allow(unused)]
            pub struct $name;
        };
    }

    chapter!(Introduction, "../../../book/src/introduction.md");
    chapter!(Dictionaries, "../../../book/src/dictionaries.md");
    chapter!(MeasuresAndCharts, "../../../book/src/measures-and-charts.md");
    chapter!(Generators, "../../../book/src/generators.md");
    chapter!(DeterministicFlow, "../../../book/src/deterministic-flow.md");
    chapter!(LiftedEquations, "../../../book/src/lifted-equations.md");
    chapter!(StochasticFlow, "../../../book/src/stochastic-flow.md");
    chapter!(CliAndFormats, "../../../book/src/cli-and-formats.md");
}
