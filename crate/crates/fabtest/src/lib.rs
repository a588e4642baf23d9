pub mod analysis;
pub mod config;
pub mod error;
pub mod ingest;
pub mod kernels;
pub mod linalg;
pub mod linking;
pub mod model;
pub mod multigroup;
pub mod nullmc;
pub mod quad;
pub mod report;
pub mod rng;
pub mod special;
