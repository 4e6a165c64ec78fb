//! Trajectory/POI tables and the per-individual features derived from them:
//! movement grids, reliance profiles and spatial context crops.

mod archive;
mod features;
mod tables;

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

pub use archive::{read_split, write_split, SplitManifest, SampleEntry};
pub use features::{
    build_samples, compute_home_anchor, compute_sir, compute_spatial_context, crop_window,
    rasterize_movement, BuildOutcome,
};
pub use tables::{load_pois, load_trajectories, PoiTable};

pub const SLOTS_PER_DAY: u32 = 48;

/// Night slots used for the home anchor: 00:00–08:00 and 20:00–24:00.
pub fn default_night_slots() -> Vec<u32> {
    (0..16).chain(40..48).collect()
}

#[derive(Debug, thiserror::Error)]
pub enum IngestError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: expected header `{expected}`")]
    BadHeader { path: PathBuf, expected: &'static str },
    #[error("line {0}: malformed row")]
    MalformedRow(u64),
    #[error("line {line}: {field} out of range")]
    OutOfRange { line: u64, field: &'static str },
    #[error("user {0} has no pre-event records")]
    NoPreEventData(u64),
    #[error("crop size {g} exceeds world {m}x{n}")]
    CropTooLarge { g: usize, m: usize, n: usize },
    #[error("invalid sample archive: {0}")]
    Archive(String),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl IngestError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io {
            path: path.into(),
            source,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct TrajectoryRecord {
    pub user_id: u64,
    pub day: u32,
    pub timeslot: u32,
    pub x: u32,
    pub y: u32,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct PoiEntry {
    pub x: u32,
    pub y: u32,
    pub category: u32,
    pub count: u32,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct HomeAnchor {
    pub user_id: u64,
    pub center_x: u32,
    pub center_y: u32,
}

/// Square `g × g` window with world origin `(x0, y0)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Crop {
    pub x0: u32,
    pub y0: u32,
    pub g: usize,
}

impl Crop {
    /// Crop-local `(i, j)` of a world cell, if inside.
    pub fn local(&self, x: u32, y: u32) -> Option<(usize, usize)> {
        let i = x.checked_sub(self.x0)? as usize;
        let j = y.checked_sub(self.y0)? as usize;
        (i < self.g && j < self.g).then_some((i, j))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Phase {
    Pre,
    Post,
}

/// Binary visitation bitmap, row-major `bitmap[i * g + j]` with
/// `i = x − x0`, `j = y − y0`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MovementGrid {
    pub user_id: u64,
    pub phase: Phase,
    pub g: usize,
    pub crop_offset: (u32, u32),
    pub bitmap: Vec<u8>,
}

impl MovementGrid {
    pub fn get(&self, i: usize, j: usize) -> u8 {
        self.bitmap[i * self.g + j]
    }

    pub fn count_ones(&self) -> usize {
        self.bitmap.iter().filter(|&&b| b == 1).count()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SirVector {
    pub user_id: u64,
    pub values: Vec<f64>,
}

/// Category-major `values[c * g * g + i * g + j]`.
#[derive(Clone, Debug, PartialEq)]
pub struct SpatialContext {
    pub user_id: u64,
    pub k: usize,
    pub g: usize,
    pub crop_offset: (u32, u32),
    pub values: Vec<f64>,
}

impl SpatialContext {
    pub fn cell(&self, i: usize, j: usize) -> Vec<f64> {
        let plane = self.g * self.g;
        (0..self.k).map(|c| self.values[c * plane + i * self.g + j]).collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct IndividualSample {
    pub user_id: u64,
    pub v_pre: MovementGrid,
    pub v_post: MovementGrid,
    pub sir: SirVector,
    pub sc: SpatialContext,
}

impl IndividualSample {
    pub fn g(&self) -> usize {
        self.v_pre.g
    }

    pub fn k(&self) -> usize {
        self.sir.values.len()
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct IngestConfig {
    pub world_m: usize,
    pub world_n: usize,
    pub k: usize,
    pub g: usize,
    pub pre_days: u32,
    pub post_days: u32,
    #[serde(default = "default_night_slots")]
    pub night_slots: Vec<u32>,
}

impl IngestConfig {
    /// The 200×200 / 85-category / 60+15-day layout with 100×100 crops.
    pub fn yjmob100k() -> Self {
        Self {
            world_m: 200,
            world_n: 200,
            k: 85,
            g: 100,
            pre_days: 60,
            post_days: 15,
            night_slots: default_night_slots(),
        }
    }

    pub fn total_days(&self) -> u32 {
        self.pre_days + self.post_days
    }

    pub fn world_dims(&self) -> (usize, usize) {
        (self.world_m, self.world_n)
    }
}
