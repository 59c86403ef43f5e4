//! Clustering-based controller synthesis from signal temporal logic
//! specifications.
//!
//! The crate is layered bottom-up: [`autodiff`] provides the reverse-mode
//! tape, [`stl`] parses formulas and evaluates exact and smooth robustness,
//! [`dynamics`] rolls out system models, [`trajopt`] solves individual
//! instances, [`clustering`] groups the solutions, [`classifier`] learns to
//! predict the group from the environment, [`policy`] trains one recurrent
//! controller per group and [`experiment`] ties everything into a
//! reproducible pipeline.

pub mod autodiff;
pub mod stl;
pub mod dynamics;
pub mod rng;
pub mod trajopt;
pub mod clustering;
pub mod classifier;
pub mod policy;
pub mod experiment;
