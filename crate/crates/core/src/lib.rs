//! Hierarchical outfit transformer: data, models, losses, training and
//! evaluation for personalised outfit compatibility.

pub mod data;
pub mod eval;
pub mod losses;
pub mod model;
pub mod numerics;
pub mod rng;
pub mod sampling;
pub mod training;
