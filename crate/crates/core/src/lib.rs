//! Cloud–device collaborative recommendation.
//!
//! A cloud agent plans and runs semantic modeling plus candidate retrieval,
//! a device agent keeps raw history local, runs the structured sequential
//! encoder and produces the final ranking.

pub mod cloud;
pub mod device;
pub mod domain;
pub mod encoders;
pub mod eval;
pub mod lm;
pub mod orchestrator;
pub mod store;
pub mod synth;
pub mod system;
pub mod vecmath;
