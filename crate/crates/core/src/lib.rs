pub mod dataset;
pub mod diff;
pub mod encoder;
pub mod linalg;
pub mod navsim;
pub mod rng;
pub mod synth;
pub mod sampling;
pub mod trainer;
pub mod attribution;
pub mod eval;
pub mod io;
pub mod config;
pub mod bench;
pub mod claims;
