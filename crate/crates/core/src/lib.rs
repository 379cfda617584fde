//! Two-sided latent heterogeneity toolkit for matched employer-employee
//! panels: firm classing from wage distributions, worker-type mixture
//! estimation from movers and stayers, and a family of wage-gap
//! decompositions with the graph diagnostics that justify them.
//!
//! The pipeline runs in stages, each consuming the artifacts of the last:
//!
//! 1. [`panel`] / [`ingest`]: clean contract rows into balanced biennial
//!    panels (or [`synth`]: simulate one with known ground truth);
//! 2. [`cluster`]: class firms by k-means on wage eCDF ventiles;
//! 3. [`mixture`]: fit the bilinear Gaussian mixture on movers, then stayer
//!    type proportions, then assign worker types by posterior mode;
//! 4. [`decompose`] / [`counterfactual`]: regression, fixed-effects,
//!    variance, segregation, and separable-market gap decompositions;
//! 5. [`graph`]: mover-graph connectivity and limited-mobility diagnostics.
//!
//! Everything randomized draws from named seeds through hierarchical
//! substreams, so identical configs reproduce identical artifacts bit for
//! bit, independent of thread count.

pub mod align;
pub mod cluster;
pub mod counterfactual;
pub mod decompose;
pub mod error;
pub mod graph;
pub mod ingest;
pub mod mixture;
pub mod panel;
pub mod pipeline;
pub mod synth;
pub mod util;

pub use error::{Error, Result};
pub use panel::{
    BiennialPanel, Education, FirmId, Gender, Observation, RawContract, Sector, WorkerId,
    WorkerPair,
};
