//! Grid-based laboratory for approximating manifold-valued Sobolev maps by
//! bounded maps: cube skeleta, opening, adaptive smoothing, zero-degree
//! homogenization, trimming, the good/bad-cube pipeline and the funnel
//! counterexample with its degree obstruction.

#![allow(clippy::needless_range_loop, clippy::neg_cmp_op_on_partial_ord, clippy::type_complexity)]

pub mod counterexample;
pub mod cli;
pub mod cubication;
pub mod error;
pub mod grid;
pub mod homogenization;
pub mod io;
pub mod manifolds;
pub mod maps;
pub mod opening;
pub mod pipeline;
pub mod smoothing;
pub mod trimming;
pub mod util;

pub use error::{Error, Result};
pub use grid::{Grid, GridMap, Region};
