pub mod cli;
pub mod dataset;
pub mod error;
pub mod evaluation;
pub mod image;
pub mod layers;
pub mod network;
pub mod tensor;
pub mod text_encoder;
pub mod training;
