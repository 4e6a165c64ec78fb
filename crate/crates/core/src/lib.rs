pub mod autodiff;
pub mod cunet;
pub mod ingest;
pub mod metrics;
pub mod synth;
pub mod trainer;
