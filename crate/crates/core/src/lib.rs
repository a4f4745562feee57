//! Goal-conditioned pedestrian trajectory prediction.
//!
//! The pipeline has two independently trained halves. A goal module fuses a
//! scene image carrying a drawn visual prompt of the pedestrian's past motion
//! with a semantic map and history heatmap, and scores every grid cell as a
//! possible final position. A sequence-to-sequence text model then receives the
//! serialized observation plus a sentence stating the sampled goal and writes
//! out the full future trajectory. Closed-form guidance fields can be added to
//! the goal logits to steer predictions toward a direction, a neighbour's goal
//! or an explicit point.

pub mod cot;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod goal;
pub mod guidance;
pub mod nn;
pub mod pipeline;
pub mod raster;
pub mod render;

pub use error::{Error, Result};

/// A 2D point or vector `(x, y)`.
pub type Vec2 = [f64; 2];
