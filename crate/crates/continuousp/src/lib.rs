//! Energy-based crystal structure prediction over periodic units.
//!
//! A crystal is described by a [`unit::PeriodicUnit`]: atomic numbers,
//! Cartesian coordinates, and a lattice whose columns span the cell. The
//! library scores such units with a graph convolutional energy network,
//! draws new candidates with annealed Langevin sampling, fits the network
//! contrastively against a dataset, and checks predictions against
//! references with a reduced-cell structure matcher.

pub mod checkpoint;
pub mod cli;
pub mod composition;
pub mod config;
pub mod dataset;
pub mod element;
pub mod error;
pub mod evaluator;
pub mod grad;
pub mod graph;
pub mod lattice;
pub mod matcher;
pub mod model;
pub mod sampler;
pub mod suites;
pub mod trainer;
pub mod unit;

pub use error::{Error, Result};
