pub mod config;
pub mod datasets;
pub mod eval;
pub mod losses;
pub mod memory;
pub mod model;
pub mod numerics;
pub mod trainer;
