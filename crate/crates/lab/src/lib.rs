pub mod baselines;
pub mod config;
pub mod data;
pub mod eval;
pub mod experiment;
pub mod fit;
pub mod io;
pub mod training;
pub mod zoo;
