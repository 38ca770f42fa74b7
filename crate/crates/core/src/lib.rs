pub mod backbone;
pub mod data;
pub mod heads;
pub mod losses;
pub mod network;
pub mod rng;
pub mod tensor;
pub mod weightgen;
pub mod trainer;
pub mod composer;
pub mod config;
pub mod checkpoint;
pub mod pipeline;
