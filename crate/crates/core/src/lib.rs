//! Interactive promptable segmentation for ultrasound-like images: a toy promptable model,
//! click simulation, training and distillation loops, evaluation and cine-loop tracking.

pub mod distiller;
pub mod error;
pub mod grid;
pub mod io;
pub mod metrics;
pub mod model;
pub mod morphology;
pub mod objectives;
pub mod prompting;
pub mod service;
pub mod synth;
pub mod tracking;
pub mod trainer;

pub use error::{Error, Result};
pub use grid::{BinaryMask, BoxPrompt, ImageGrid, Label, MaskLogits, Point, PromptSet};
