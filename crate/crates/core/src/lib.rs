//! Simulation and analysis of series-nanowire photon-number-resolving detectors.
//!
//! The crate covers the electrical response of the detector (`circuit`), the
//! statistics of element clicks under coherent light (`photonstats`), the
//! spread of output levels caused by element non-uniformity (`noisemodel`), a
//! virtual measurement chain (`experiment`), and the analysis of recorded
//! pulse-height histograms (`analysis`).

// Negated comparisons are how NaN inputs get rejected.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod analysis;
pub mod circuit;
pub mod experiment;
pub mod histogram;
pub mod noisemodel;
pub mod numerics;
pub mod peaks;
pub mod photonstats;
