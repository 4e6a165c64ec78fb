use std::collections::{BTreeMap, HashMap};
use std::ops::Range;

use rayon::prelude::*;

use super::tables::PoiTable;
use super::{
    Crop, HomeAnchor, IndividualSample, IngestConfig, IngestError, MovementGrid, Phase,
    SirVector, SpatialContext, TrajectoryRecord,
};

fn modal_cell<'a>(records: impl Iterator<Item = &'a TrajectoryRecord>) -> Option<(u32, u32)> {
    let mut counts: BTreeMap<(u32, u32), usize> = BTreeMap::new();
    for r in records {
        *counts.entry((r.x, r.y)).or_default() += 1;
    }
    // BTreeMap iterates in ascending (x, y); keep the first maximum.
    let mut best: Option<((u32, u32), usize)> = None;
    for (cell, n) in counts {
        if best.is_none_or(|(_, b)| n > b) {
            best = Some((cell, n));
        }
    }
    best.map(|(cell, _)| cell)
}

/// Modal night-time pre-event cell, falling back to the modal pre-event cell
/// when no night records exist. Ties go to the smallest `(x, y)`.
pub fn compute_home_anchor(
    user_id: u64,
    records: &[TrajectoryRecord],
    pre_days: u32,
    night_slots: &[u32],
) -> Result<HomeAnchor, IngestError> {
    let pre: Vec<&TrajectoryRecord> = records.iter().filter(|r| r.day < pre_days).collect();
    if pre.is_empty() {
        return Err(IngestError::NoPreEventData(user_id));
    }
    let night = modal_cell(pre.iter().copied().filter(|r| night_slots.contains(&r.timeslot)));
    let (center_x, center_y) = night
        .or_else(|| modal_cell(pre.iter().copied()))
        .expect("non-empty pre-event records");
    Ok(HomeAnchor {
        user_id,
        center_x,
        center_y,
    })
}

/// Window of side `g` with the anchor at local index `⌊g/2⌋`, translated
/// inward so it lies fully inside the world.
pub fn crop_window(anchor: &HomeAnchor, g: usize, world_dims: (usize, usize)) -> Result<Crop, IngestError> {
    let (m, n) = world_dims;
    if g == 0 || g > m || g > n {
        return Err(IngestError::CropTooLarge { g, m, n });
    }
    let place = |c: u32, size: usize| -> u32 {
        let start = c as i64 - (g / 2) as i64;
        start.clamp(0, (size - g) as i64) as u32
    };
    Ok(Crop {
        x0: place(anchor.center_x, m),
        y0: place(anchor.center_y, n),
        g,
    })
}

/// Binary grid of crop cells visited on days in `days`. Returns the grid and
/// the number of in-range records that fell outside the crop.
pub fn rasterize_movement(
    user_id: u64,
    phase: Phase,
    records: &[TrajectoryRecord],
    days: Range<u32>,
    crop: Crop,
) -> (MovementGrid, usize) {
    let g = crop.g;
    let mut bitmap = vec![0u8; g * g];
    let mut outside = 0;
    for r in records.iter().filter(|r| days.contains(&r.day)) {
        match crop.local(r.x, r.y) {
            Some((i, j)) => bitmap[i * g + j] = 1,
            None => outside += 1,
        }
    }
    let grid = MovementGrid {
        user_id,
        phase,
        g,
        crop_offset: (crop.x0, crop.y0),
        bitmap,
    };
    (grid, outside)
}

/// Per-cell category proportions inside the crop; POI-free cells stay zero.
pub fn compute_spatial_context(user_id: u64, pois: &PoiTable, crop: Crop) -> SpatialContext {
    let (g, k) = (crop.g, pois.k());
    let plane = g * g;
    let mut values = vec![0.0; k * plane];
    for ((x, y), counts) in pois.occupied_cells() {
        let Some((i, j)) = crop.local(x, y) else { continue };
        let total: u64 = counts.iter().sum();
        if total == 0 {
            continue;
        }
        for (c, &n) in counts.iter().enumerate() {
            values[c * plane + i * g + j] = n as f64 / total as f64;
        }
    }
    SpatialContext {
        user_id,
        k,
        g,
        crop_offset: (crop.x0, crop.y0),
        values,
    }
}

/// Accumulates the category proportions of every visited POI cell (world
/// wide, one record = one visit) and L1-normalizes; all-zero when no visit
/// touched a POI cell.
pub fn compute_sir(user_id: u64, pre_records: &[TrajectoryRecord], pois: &PoiTable) -> SirVector {
    let k = pois.k();
    let mut acc = vec![0.0; k];
    let mut cache: HashMap<(u32, u32), Option<Vec<f64>>> = HashMap::new();
    for r in pre_records {
        let props = cache
            .entry((r.x, r.y))
            .or_insert_with(|| pois.proportions(r.x, r.y));
        if let Some(p) = props {
            for (a, v) in acc.iter_mut().zip(p.iter()) {
                *a += v;
            }
        }
    }
    let total: f64 = acc.iter().sum();
    if total > 0.0 {
        for a in &mut acc {
            *a /= total;
        }
    }
    SirVector { user_id, values: acc }
}

#[derive(Clone, Debug, Default)]
pub struct BuildOutcome {
    pub samples: Vec<IndividualSample>,
    /// Users without pre-event records.
    pub skipped: Vec<u64>,
    /// In-range records that fell outside the user's crop.
    pub outside_records: usize,
}

fn build_one(
    user_id: u64,
    records: &[TrajectoryRecord],
    pois: &PoiTable,
    cfg: &IngestConfig,
) -> Result<Option<(IndividualSample, usize)>, IngestError> {
    let anchor = match compute_home_anchor(user_id, records, cfg.pre_days, &cfg.night_slots) {
        Ok(a) => a,
        Err(IngestError::NoPreEventData(_)) => return Ok(None),
        Err(e) => return Err(e),
    };
    let crop = crop_window(&anchor, cfg.g, cfg.world_dims())?;
    let (v_pre, out_pre) = rasterize_movement(user_id, Phase::Pre, records, 0..cfg.pre_days, crop);
    let (v_post, out_post) =
        rasterize_movement(user_id, Phase::Post, records, cfg.pre_days..cfg.total_days(), crop);
    let pre: Vec<TrajectoryRecord> = records.iter().filter(|r| r.day < cfg.pre_days).copied().collect();
    let sample = IndividualSample {
        user_id,
        v_pre,
        v_post,
        sir: compute_sir(user_id, &pre, pois),
        sc: compute_spatial_context(user_id, pois, crop),
    };
    Ok(Some((sample, out_pre + out_post)))
}

/// One sample per individual with pre-event data, ordered by user id.
pub fn build_samples(
    trajectories: &[TrajectoryRecord],
    pois: &PoiTable,
    cfg: &IngestConfig,
) -> Result<BuildOutcome, IngestError> {
    if pois.k() != cfg.k {
        return Err(IngestError::Archive(format!(
            "POI table has {} categories, config expects {}",
            pois.k(),
            cfg.k
        )));
    }
    let mut by_user: BTreeMap<u64, Vec<TrajectoryRecord>> = BTreeMap::new();
    for r in trajectories {
        by_user.entry(r.user_id).or_default().push(*r);
    }
    let users: Vec<(u64, Vec<TrajectoryRecord>)> = by_user.into_iter().collect();
    let built: Vec<(u64, Option<(IndividualSample, usize)>)> = users
        .par_iter()
        .map(|(uid, recs)| build_one(*uid, recs, pois, cfg).map(|s| (*uid, s)))
        .collect::<Result<_, _>>()?;
    let mut out = BuildOutcome::default();
    for (uid, s) in built {
        match s {
            Some((sample, outside)) => {
                out.outside_records += outside;
                out.samples.push(sample);
            }
            None => {
                log::warn!("skipping user {uid}: no pre-event records");
                out.skipped.push(uid);
            }
        }
    }
    Ok(out)
}
