//! Modeling, analysis, H∞ output-feedback synthesis and simulation of a
//! mixed platoon in which one automated vehicle drives among human-driven
//! vehicles that follow the optimal-velocity model.

pub mod linalg;
pub mod lmi;
pub mod matrix_json;
pub mod modal;
pub mod ovm;
pub mod par;
pub mod platoon;
pub mod sim;
pub mod synth;
