pub mod autodiff;
pub mod catalog;
pub mod config;
pub mod eval;
pub mod graph;
pub mod model;
pub mod synth;
pub mod training;
