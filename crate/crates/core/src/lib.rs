pub mod decoder;
pub mod error;
pub mod hypergraph;
pub mod message_passing;
pub mod motion;
pub mod params;
pub mod pose_encoder;
pub mod real;
pub mod scene_io;
pub mod synthetic;
pub mod tape;

pub use error::CoreError;
pub use motion::{MotionSequence, SceneSplit, Skeleton};
pub use real::Real;
pub use synthetic::{MotionStyle, SyntheticSceneConfig};
