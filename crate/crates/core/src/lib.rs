//! Occlusion edge detection in RGB-D frames with a small patch CNN.

pub mod cli;
pub mod config;
pub mod dataset;
pub mod evaluator;
pub mod fusion;
pub mod model;
pub mod tensor;
pub mod trainer;
