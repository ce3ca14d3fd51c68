//! Bifurcation and complex-frequency laboratory for converter-dominated
//! distribution networks.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cfreq;
pub mod contin;
pub mod converter;
pub mod engine;
pub mod netmodel;
pub mod report;
pub mod run;
pub mod scenario;
pub mod secondary;
pub mod smoothlim;
pub mod system;
pub mod val;
