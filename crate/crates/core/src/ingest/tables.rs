use std::collections::BTreeMap;
use std::fs::File;
use std::path::Path;

use super::{IngestError, PoiEntry, TrajectoryRecord, SLOTS_PER_DAY};

const TRAJECTORY_HEADER: &str = "uid,d,t,x,y";
const POI_HEADER: &str = "x,y,category,count";

fn open_csv(path: &Path, expected: &'static str) -> Result<csv::Reader<File>, IngestError> {
    let file = File::open(path).map_err(|e| IngestError::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_reader(file);
    let header = reader
        .headers()
        .map_err(|_| IngestError::BadHeader { path: path.into(), expected })?;
    let got: Vec<&str> = header.iter().map(str::trim).collect();
    if got.join(",") != expected {
        return Err(IngestError::BadHeader { path: path.into(), expected });
    }
    Ok(reader)
}

fn parse_fields<const N: usize>(record: &csv::StringRecord, line: u64) -> Result<[u64; N], IngestError> {
    if record.len() != N {
        return Err(IngestError::MalformedRow(line));
    }
    let mut out = [0u64; N];
    for (slot, field) in out.iter_mut().zip(record.iter()) {
        *slot = field.trim().parse().map_err(|_| IngestError::MalformedRow(line))?;
    }
    Ok(out)
}

fn read_rows<const N: usize>(
    path: &Path,
    header: &'static str,
    mut f: impl FnMut([u64; N], u64) -> Result<(), IngestError>,
) -> Result<(), IngestError> {
    let mut reader = open_csv(path, header)?;
    let mut record = csv::StringRecord::new();
    loop {
        match reader.read_record(&mut record) {
            Ok(false) => return Ok(()),
            Ok(true) => {
                let line = record.position().map_or(0, |p| p.line());
                f(parse_fields::<N>(&record, line)?, line)?;
            }
            Err(e) => {
                let line = e.position().map_or(0, |p| p.line());
                return match e.into_kind() {
                    csv::ErrorKind::Io(io) => Err(IngestError::io(path, io)),
                    _ => Err(IngestError::MalformedRow(line)),
                };
            }
        }
    }
}

/// Reads a `uid,d,t,x,y` table in file order. Rows outside the declared
/// world, day or slot ranges are rejected.
pub fn load_trajectories(
    path: &Path,
    world_dims: (usize, usize),
    d_total: u32,
) -> Result<Vec<TrajectoryRecord>, IngestError> {
    let (m, n) = (world_dims.0 as u64, world_dims.1 as u64);
    let mut out = Vec::new();
    read_rows::<5>(path, TRAJECTORY_HEADER, |[uid, d, t, x, y], line| {
        let bad = |field| Err(IngestError::OutOfRange { line, field });
        if d >= u64::from(d_total) {
            return bad("day");
        }
        if t >= u64::from(SLOTS_PER_DAY) {
            return bad("timeslot");
        }
        if x >= m {
            return bad("x");
        }
        if y >= n {
            return bad("y");
        }
        out.push(TrajectoryRecord {
            user_id: uid,
            day: d as u32,
            timeslot: t as u32,
            x: x as u32,
            y: y as u32,
        });
        Ok(())
    })?;
    Ok(out)
}

/// Per-cell POI counts by category.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PoiTable {
    k: usize,
    cells: BTreeMap<(u32, u32), Vec<u64>>,
}

impl PoiTable {
    pub fn new(k: usize) -> Self {
        Self {
            k,
            cells: BTreeMap::new(),
        }
    }

    /// Builds a table, summing duplicate `(x, y, category)` entries.
    pub fn from_entries(k: usize, entries: impl IntoIterator<Item = PoiEntry>) -> Self {
        let mut table = Self::new(k);
        for e in entries {
            table.add(e);
        }
        table
    }

    pub fn add(&mut self, e: PoiEntry) {
        assert!((e.category as usize) < self.k, "category out of range");
        let counts = self.cells.entry((e.x, e.y)).or_insert_with(|| vec![0; self.k]);
        counts[e.category as usize] += u64::from(e.count);
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn counts(&self, x: u32, y: u32) -> Option<&[u64]> {
        self.cells.get(&(x, y)).map(Vec::as_slice)
    }

    /// Category proportions of a cell; `None` for POI-free cells.
    pub fn proportions(&self, x: u32, y: u32) -> Option<Vec<f64>> {
        let counts = self.counts(x, y)?;
        let total: u64 = counts.iter().sum();
        (total > 0).then(|| counts.iter().map(|&c| c as f64 / total as f64).collect())
    }

    /// Merged entries sorted by `(x, y, category)`.
    pub fn entries(&self) -> Vec<PoiEntry> {
        self.cells
            .iter()
            .flat_map(|(&(x, y), counts)| {
                counts.iter().enumerate().filter(|(_, &c)| c > 0).map(move |(cat, &c)| PoiEntry {
                    x,
                    y,
                    category: cat as u32,
                    count: c as u32,
                })
            })
            .collect()
    }

    /// Cells holding at least one POI of `category`, in `(x, y)` order.
    pub fn cells_with(&self, category: usize) -> impl Iterator<Item = (u32, u32)> + '_ {
        self.cells
            .iter()
            .filter(move |(_, c)| c[category] > 0)
            .map(|(&xy, _)| xy)
    }

    pub fn occupied_cells(&self) -> impl Iterator<Item = ((u32, u32), &[u64])> + '_ {
        self.cells.iter().map(|(&xy, c)| (xy, c.as_slice()))
    }
}

/// Reads an `x,y,category,count` table; duplicates are summed.
pub fn load_pois(path: &Path, world_dims: (usize, usize), k: usize) -> Result<PoiTable, IngestError> {
    let (m, n) = (world_dims.0 as u64, world_dims.1 as u64);
    let mut table = PoiTable::new(k);
    read_rows::<4>(path, POI_HEADER, |[x, y, cat, count], line| {
        let bad = |field| Err(IngestError::OutOfRange { line, field });
        if x >= m {
            return bad("x");
        }
        if y >= n {
            return bad("y");
        }
        if cat >= k as u64 {
            return bad("category");
        }
        if count == 0 || count > u64::from(u32::MAX) {
            return bad("count");
        }
        table.add(PoiEntry {
            x: x as u32,
            y: y as u32,
            category: cat as u32,
            count: count as u32,
        });
        Ok(())
    })?;
    Ok(table)
}
