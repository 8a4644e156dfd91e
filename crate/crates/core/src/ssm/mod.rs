//! Fast learner: input differencing, convolutional stem, Conv-SSM blocks
//! (local spatial mixing followed by a selective scan) and the patch head.

mod config;
mod model;
mod params;
pub mod scan;

pub use config::ModelConfig;
pub use model::{build_input, last_frames, Forward, MemoryStep, NestS6, SsmParamVars, StreamState};
pub use params::{Bound, ParamStore, LAMBDA_INIT};
pub use scan::{ssm_scan, ssm_scan_reference, HiddenState, SsmParams};
