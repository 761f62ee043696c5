pub mod attention;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod img;
pub mod metrics;
pub mod model;
pub mod solar;
pub mod synth;
pub mod tensor;
pub mod train;
