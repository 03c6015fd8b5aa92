pub mod biomarkers;
pub mod classify;
pub mod cli;
pub mod config;
pub mod diffeo;
pub mod error;
pub mod io;
pub mod metrics;
pub mod nifti;
pub mod optim;
pub mod phantom;
pub mod report;
pub mod rigid;
pub mod synth;
pub mod volume;
