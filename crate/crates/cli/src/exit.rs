//! Process exit codes and the mapping from library errors onto them.

use shiftgrid::ingest::IngestError;
use shiftgrid::metrics::MetricsError;
use shiftgrid::synth::SynthError;
use shiftgrid::trainer::TrainError;
use shiftgrid::cunet::CunetError;

pub const OK: u8 = 0;
pub const CONFIG: u8 = 2;
pub const IO: u8 = 3;
pub const DOMAIN: u8 = 4;
pub const NUMERIC: u8 = 5;

/// An error with an explicit exit code.
#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    pub message: String,
}

impl std::fmt::Display for Failure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.message)
    }
}

impl std::error::Error for Failure {}

pub fn config(message: impl Into<String>) -> anyhow::Error {
    Failure { code: CONFIG, message: message.into() }.into()
}

pub fn domain(message: impl Into<String>) -> anyhow::Error {
    Failure { code: DOMAIN, message: message.into() }.into()
}

fn ingest(e: &IngestError) -> u8 {
    match e {
        IngestError::Io { .. } => IO,
        IngestError::Json(_) => CONFIG,
        _ => DOMAIN,
    }
}

fn train(e: &TrainError) -> u8 {
    match e {
        TrainError::InvalidConfig(_) => CONFIG,
        TrainError::NonFiniteLoss { .. } => NUMERIC,
        TrainError::Io { .. } => IO,
        TrainError::Model(CunetError::InvalidConfig(_)) => CONFIG,
        _ => DOMAIN,
    }
}

/// First recognizable error in the chain decides the code; anything else is
/// a domain error.
pub fn classify(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(f) = cause.downcast_ref::<Failure>() {
            return f.code;
        }
        if let Some(e) = cause.downcast_ref::<TrainError>() {
            return train(e);
        }
        if let Some(e) = cause.downcast_ref::<IngestError>() {
            return ingest(e);
        }
        if let Some(e) = cause.downcast_ref::<MetricsError>() {
            return match e {
                MetricsError::Train(t) => train(t),
                MetricsError::Ingest(i) => ingest(i),
                MetricsError::Io { .. } => IO,
                MetricsError::Model(CunetError::InvalidConfig(_)) => CONFIG,
                _ => DOMAIN,
            };
        }
        if let Some(e) = cause.downcast_ref::<SynthError>() {
            return match e {
                SynthError::Io { .. } => IO,
                _ => CONFIG,
            };
        }
        if let Some(e) = cause.downcast_ref::<CunetError>() {
            return match e {
                CunetError::InvalidConfig(_) => CONFIG,
                _ => DOMAIN,
            };
        }
        if cause.downcast_ref::<serde_json::Error>().is_some() {
            return CONFIG;
        }
        if cause.downcast_ref::<std::io::Error>().is_some() {
            return IO;
        }
    }
    DOMAIN
}
