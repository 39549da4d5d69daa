pub mod domain;
pub mod geometry;
pub mod fields;
pub mod par;
pub mod solver;
pub mod convexity;
pub mod envelope;
pub mod serde_ext;
pub mod experiments;
