pub mod autodiff;
pub mod cli;
pub mod data;
pub mod diagnostics;
pub mod hpo;
pub mod model;
pub mod prefixnas;
pub mod rng;
pub mod trainer;
