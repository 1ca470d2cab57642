//! Horocycle geometry in the Poincare disc, and numerical verification of the
//! horocyclic Brunn-Minkowski and Borell-Brascamp-Lieb inequalities.
//!
//! Modules, bottom-up:
//!
//! - [`hypdisc`]: points, tangent vectors, distances and isometries of the disc model.
//! - [`horocycle`]: oriented unit-speed horocycles, `[x:y]_lambda` and horocyclic dilation.
//! - [`finsler`]: the Randers metric whose geodesics are oriented horocycles.
//! - [`regions`]: rasterized regions, hyperbolic area and horocyclic/geodesic Minkowski sums.
//! - [`meanbbl`]: p-means and the one-dimensional directed Borell-Brascamp-Lieb machinery.
//! - [`needles`]: discrete Kantorovich potentials, transport rays and needle checks.
//! - [`harness`]: experiment configuration, reports and figures for the CLI.

pub mod error;
pub mod finsler;
pub mod harness;
pub mod horocycle;
pub mod hypdisc;
pub mod meanbbl;
pub mod needles;
pub mod regions;

pub use error::{Error, Result};
pub use horocycle::Horocycle;
pub use hypdisc::{DiscPoint, Mobius, TangentVec};
pub use regions::{Grid, Region, RegionSpec};
