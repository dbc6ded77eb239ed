//! Desk-scale reference pretraining and compute-aligned comparison.

pub mod compare;
pub mod data;
pub mod evals;
pub mod ledger;
pub mod model;
pub mod numerics;
pub mod schedule;
pub mod trainer;
