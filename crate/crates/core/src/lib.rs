//! Salient-object layout engine: label-map rasterization, memory-bank
//! background retrieval, background fusion and SPADE-modulated generation
//! on a small dense-tensor kernel with verified gradients.

pub mod bank;
pub mod fusion;
pub mod generator;
pub mod layout;
pub mod params;
pub mod retrieval;
pub mod tensor;
pub mod verify;
