//! Reaction-diffusion pattern simulation, resistance-distance histogram
//! features and kernel/neural parameter recovery.

pub mod config;
pub mod error;
pub mod grid;
pub mod kernels;
pub mod model;
pub mod neural;
pub mod ovk;
pub mod pipeline;
pub mod features;
pub mod formats;
pub mod simulate;
pub mod svr;

pub use error::{Error, Result};
pub use grid::{SpectralOperator, TorusGrid};
pub use model::{gm_stability, GiererMeinhardt, GmParams, ReactionModel, StabilityReport};
pub use simulate::{simulate, simulate_gm, PatternField, SimConfig};
pub use config::RunConfig;
pub use formats::{Predictor, SavedModel};
pub use pipeline::{Dataset, LearningData, Method, SamplingPlan, Target, TrainingConfig};
