//! Rule-governed synthetic populations with known latent reliance and a
//! disruption that relocates trips of highly reliant individuals.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::ingest::{default_night_slots, IngestConfig, PoiEntry, PoiTable, TrajectoryRecord, SLOTS_PER_DAY};

/// First and one-past-last daytime slot (08:00–20:00).
const DAY_SLOTS: (u32, u32) = (16, 40);
const CLUSTER_STD: f64 = 2.0;
const DOMINANT_SHARE: f64 = 0.8;
const HOME_SHARE: f64 = 0.4;
const NEAREST_CANDIDATES: usize = 3;

#[derive(Debug, thiserror::Error)]
pub enum SynthError {
    #[error("invalid synthetic config: {0}")]
    InvalidConfig(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> SynthError + '_ {
    move |source| SynthError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub world_m: usize,
    pub world_n: usize,
    pub k: usize,
    pub n_poi_clusters: usize,
    pub poi_per_cluster: usize,
    pub n_individuals: usize,
    pub pre_days: u32,
    pub post_days: u32,
    pub slots_per_day: u32,
    pub visits_per_day: usize,
    pub home_spread: f64,
    pub reliance_concentration: f64,
    pub disrupted_category: usize,
    pub reliance_threshold: f64,
    pub shift_fraction: f64,
    pub noise_rate: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            world_m: 64,
            world_n: 64,
            k: 4,
            n_poi_clusters: 8,
            poi_per_cluster: 12,
            n_individuals: 2400,
            pre_days: 20,
            post_days: 5,
            slots_per_day: SLOTS_PER_DAY,
            visits_per_day: 10,
            home_spread: 1.5,
            reliance_concentration: 0.5,
            disrupted_category: 0,
            reliance_threshold: 0.5,
            shift_fraction: 0.6,
            noise_rate: 0.02,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: &str| Err(SynthError::InvalidConfig(m.into()));
        if self.world_m == 0 || self.world_n == 0 || self.k == 0 {
            return bad("world dims and k must be positive");
        }
        if self.slots_per_day != SLOTS_PER_DAY {
            return bad("slots_per_day must be 48");
        }
        if self.pre_days == 0 {
            return bad("pre_days must be positive");
        }
        if self.disrupted_category >= self.k {
            return bad("disrupted_category must be < k");
        }
        if !(0.0..=1.0).contains(&self.shift_fraction) || !(0.0..=1.0).contains(&self.noise_rate) {
            return bad("shift_fraction and noise_rate must lie in [0, 1]");
        }
        if !(self.reliance_concentration > 0.0) || !(self.home_spread >= 0.0) {
            return bad("reliance_concentration must be positive and home_spread non-negative");
        }
        Ok(())
    }

    /// Ingest settings matching this world, with crop size `g`.
    pub fn ingest_config(&self, g: usize) -> IngestConfig {
        IngestConfig {
            world_m: self.world_m,
            world_n: self.world_n,
            k: self.k,
            g,
            pre_days: self.pre_days,
            post_days: self.post_days,
            night_slots: default_night_slots(),
        }
    }

    fn world_rng(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(0);
        rng
    }

    /// Independent stream per individual so generation order does not matter.
    pub fn individual_rng(&self, user_id: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(user_id + 1);
        rng
    }
}

#[derive(Clone, Debug)]
pub struct SynthWorld {
    /// Raw placements, one per POI, before per-cell merging.
    pub entries: Vec<PoiEntry>,
    pub table: PoiTable,
    cells_by_category: Vec<Vec<(u32, u32)>>,
}

impl SynthWorld {
    pub fn cells_of(&self, category: usize) -> &[(u32, u32)] {
        &self.cells_by_category[category]
    }

    /// Up to `n` cells of `category` nearest to `(x, y)`, with distances;
    /// equal distances keep `(x, y)` order.
    pub fn nearest(&self, category: usize, x: u32, y: u32, n: usize) -> Vec<((u32, u32), f64)> {
        let mut cells: Vec<((u32, u32), f64)> = self.cells_by_category[category]
            .iter()
            .map(|&(cx, cy)| ((cx, cy), dist((x, y), (cx, cy))))
            .collect();
        cells.sort_by(|a, b| a.1.total_cmp(&b.1));
        cells.truncate(n);
        cells
    }
}

fn dist(a: (u32, u32), b: (u32, u32)) -> f64 {
    let dx = f64::from(a.0) - f64::from(b.0);
    let dy = f64::from(a.1) - f64::from(b.1);
    dx.hypot(dy)
}

fn clamp_cell(v: f64, size: usize) -> u32 {
    v.round().clamp(0.0, (size - 1) as f64) as u32
}

pub fn generate_world(cfg: &SynthConfig) -> SynthWorld {
    let mut rng = cfg.world_rng();
    let scatter = Normal::new(0.0, CLUSTER_STD).expect("positive std");
    let mut entries = Vec::with_capacity(cfg.n_poi_clusters * cfg.poi_per_cluster);
    for cluster in 0..cfg.n_poi_clusters {
        let cx = rng.random_range(0.0..cfg.world_m as f64);
        let cy = rng.random_range(0.0..cfg.world_n as f64);
        let dominant = cluster % cfg.k;
        for _ in 0..cfg.poi_per_cluster {
            let x = clamp_cell(cx + scatter.sample(&mut rng), cfg.world_m);
            let y = clamp_cell(cy + scatter.sample(&mut rng), cfg.world_n);
            let category = if cfg.k == 1 || rng.random_bool(DOMINANT_SHARE) {
                dominant
            } else {
                // uniform over the other categories
                let c = rng.random_range(0..cfg.k - 1);
                if c >= dominant { c + 1 } else { c }
            };
            entries.push(PoiEntry {
                x,
                y,
                category: category as u32,
                count: 1,
            });
        }
    }
    let table = PoiTable::from_entries(cfg.k, entries.iter().copied());
    let cells_by_category = (0..cfg.k).map(|c| table.cells_with(c).collect()).collect();
    SynthWorld {
        entries,
        table,
        cells_by_category,
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthIndividual {
    pub user_id: u64,
    pub home: (u32, u32),
    pub reliance: Vec<f64>,
    pub shifted: bool,
    pub pre_records: Vec<TrajectoryRecord>,
}

fn sample_reliance(k: usize, alpha: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let gamma = Gamma::new(alpha, 1.0).expect("positive concentration");
    loop {
        let draws: Vec<f64> = (0..k).map(|_| gamma.sample(rng)).collect();
        let s: f64 = draws.iter().sum();
        if s > 0.0 && s.is_finite() {
            return draws.into_iter().map(|d| d / s).collect();
        }
    }
}

fn sample_index(weights: &[f64], rng: &mut ChaCha8Rng) -> usize {
    let total: f64 = weights.iter().sum();
    let mut u = rng.random_range(0.0..total);
    for (i, &w) in weights.iter().enumerate() {
        if u < w {
            return i;
        }
        u -= w;
    }
    weights.len() - 1
}

/// One simulated trip: its target category and destination.
#[derive(Clone, Copy, Debug)]
struct Trip {
    category: usize,
    dest: (u32, u32),
}

struct Behavior<'a> {
    cfg: &'a SynthConfig,
    home: (u32, u32),
    reliance: &'a [f64],
    /// Per category: candidate destinations and their distance-decay weights.
    candidates: Vec<(Vec<(u32, u32)>, Vec<f64>)>,
    night: Vec<u32>,
    home_scatter: Option<Normal<f64>>,
}

impl<'a> Behavior<'a> {
    fn new(cfg: &'a SynthConfig, world: &SynthWorld, home: (u32, u32), reliance: &'a [f64]) -> Self {
        let candidates = (0..cfg.k)
            .map(|c| {
                let near = world.nearest(c, home.0, home.1, NEAREST_CANDIDATES);
                let cells = near.iter().map(|(xy, _)| *xy).collect();
                let weights = near.iter().map(|(_, d)| 1.0 / (1.0 + d)).collect();
                (cells, weights)
            })
            .collect();
        Self {
            cfg,
            home,
            reliance,
            candidates,
            night: default_night_slots(),
            home_scatter: (cfg.home_spread > 0.0).then(|| Normal::new(0.0, cfg.home_spread).expect("std")),
        }
    }

    fn near_home(&self, rng: &mut ChaCha8Rng) -> (u32, u32) {
        match &self.home_scatter {
            Some(n) => (
                clamp_cell(f64::from(self.home.0) + n.sample(rng), self.cfg.world_m),
                clamp_cell(f64::from(self.home.1) + n.sample(rng), self.cfg.world_n),
            ),
            None => self.home,
        }
    }

    fn trip(&self, rng: &mut ChaCha8Rng) -> Trip {
        let category = sample_index(self.reliance, rng);
        let (cells, weights) = &self.candidates[category];
        let dest = if cells.is_empty() {
            self.home
        } else {
            cells[sample_index(weights, rng)]
        };
        Trip { category, dest }
    }

    /// Records for `days`, plus the trips behind the daytime records.
    fn simulate(&self, user_id: u64, days: std::ops::Range<u32>, rng: &mut ChaCha8Rng) -> Vec<(TrajectoryRecord, Option<Trip>)> {
        let n_home = (HOME_SHARE * self.cfg.visits_per_day as f64).round() as usize;
        let n_trips = self.cfg.visits_per_day.saturating_sub(n_home);
        let mut out = Vec::new();
        for day in days {
            let mut today = Vec::with_capacity(self.cfg.visits_per_day);
            for _ in 0..n_home {
                let (x, y) = self.near_home(rng);
                let timeslot = self.night[rng.random_range(0..self.night.len())];
                today.push((TrajectoryRecord { user_id, day, timeslot, x, y }, None));
            }
            for _ in 0..n_trips {
                let trip = self.trip(rng);
                let timeslot = rng.random_range(DAY_SLOTS.0..DAY_SLOTS.1);
                let (x, y) = trip.dest;
                today.push((TrajectoryRecord { user_id, day, timeslot, x, y }, Some(trip)));
            }
            today.sort_by_key(|(r, _)| r.timeslot);
            out.extend(today);
        }
        out
    }
}

pub fn is_shifted(cfg: &SynthConfig, reliance: &[f64]) -> bool {
    reliance[cfg.disrupted_category] > cfg.reliance_threshold
}

/// Category with the largest reliance other than the disrupted one; ties go
/// to the lower index.
pub fn substitute_category(cfg: &SynthConfig, reliance: &[f64]) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (c, &r) in reliance.iter().enumerate() {
        if c != cfg.disrupted_category && best.is_none_or(|(_, b)| r > b) {
            best = Some((c, r));
        }
    }
    best.map(|(c, _)| c)
}

pub fn generate_individual(cfg: &SynthConfig, world: &SynthWorld, user_id: u64, rng: &mut ChaCha8Rng) -> SynthIndividual {
    let home = (
        rng.random_range(0..cfg.world_m as u32),
        rng.random_range(0..cfg.world_n as u32),
    );
    let reliance = sample_reliance(cfg.k, cfg.reliance_concentration, rng);
    let behavior = Behavior::new(cfg, world, home, &reliance);
    let pre_records = behavior
        .simulate(user_id, 0..cfg.pre_days, rng)
        .into_iter()
        .map(|(r, _)| r)
        .collect();
    let shifted = is_shifted(cfg, &reliance);
    SynthIndividual {
        user_id,
        home,
        reliance,
        shifted,
        pre_records,
    }
}

/// Post-event records. Shifted individuals send `ceil(shift_fraction · n)`
/// of their `n` disrupted-category trips (chosen uniformly) to the
/// substitute-category cell nearest the trip's original destination;
/// everyone else keeps the pre-event process. Each record then moves to a
/// uniform random cell with probability `noise_rate`.
pub fn apply_disruption_rule(
    cfg: &SynthConfig,
    world: &SynthWorld,
    individual: &SynthIndividual,
    rng: &mut ChaCha8Rng,
) -> Vec<TrajectoryRecord> {
    let behavior = Behavior::new(cfg, world, individual.home, &individual.reliance);
    let mut sim = behavior.simulate(individual.user_id, cfg.pre_days..cfg.pre_days + cfg.post_days, rng);
    if individual.shifted {
        if let Some(sub) = substitute_category(cfg, &individual.reliance) {
            let mut disrupted: Vec<usize> = sim
                .iter()
                .enumerate()
                .filter(|(_, (_, t))| t.is_some_and(|t| t.category == cfg.disrupted_category))
                .map(|(i, _)| i)
                .collect();
            let n_shift = (cfg.shift_fraction * disrupted.len() as f64).ceil() as usize;
            disrupted.shuffle(rng);
            for &i in &disrupted[..n_shift] {
                let (rec, trip) = &mut sim[i];
                let origin = trip.expect("trip record").dest;
                let pick = world.nearest(sub, origin.0, origin.1, 1).first().map(|c| c.0);
                if let Some((x, y)) = pick {
                    rec.x = x;
                    rec.y = y;
                }
            }
        }
    }
    sim.into_iter()
        .map(|(mut r, _)| {
            if rng.random_bool(cfg.noise_rate) {
                r.x = rng.random_range(0..cfg.world_m as u32);
                r.y = rng.random_range(0..cfg.world_n as u32);
            }
            r
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Splits {
    pub train: Vec<u64>,
    pub val: Vec<u64>,
    pub test: Vec<u64>,
}

impl Splits {
    /// 20:1:1 split after a seeded shuffle: val and test get `⌊n/22⌋` each,
    /// train takes the remainder. Each list is sorted.
    pub fn ratio_20_1_1(ids: &[u64], seed: u64) -> Self {
        let mut ids = ids.to_vec();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(u64::MAX);
        ids.shuffle(&mut rng);
        let held = ids.len() / 22;
        let mut test = ids[..held].to_vec();
        let mut val = ids[held..2 * held].to_vec();
        let mut train = ids[2 * held..].to_vec();
        for v in [&mut train, &mut val, &mut test] {
            v.sort_unstable();
        }
        Self { train, val, test }
    }
}

#[derive(Clone, Debug)]
pub struct SynthDataset {
    pub config: SynthConfig,
    pub world: SynthWorld,
    pub individuals: Vec<SynthIndividual>,
    pub post_records: Vec<Vec<TrajectoryRecord>>,
    pub splits: Splits,
}

impl SynthDataset {
    pub fn records(&self) -> impl Iterator<Item = &TrajectoryRecord> {
        self.individuals
            .iter()
            .zip(&self.post_records)
            .flat_map(|(ind, post)| ind.pre_records.iter().chain(post))
    }

    /// Writes `trajectories.csv`, `pois.csv`, `splits.json` and
    /// `truth/truth.csv` under `dir`.
    pub fn write(&self, dir: &Path) -> Result<(), SynthError> {
        fs::create_dir_all(dir.join("truth")).map_err(io_err(dir))?;
        let mut traj = String::from("uid,d,t,x,y\n");
        for r in self.records() {
            traj.push_str(&format!("{},{},{},{},{}\n", r.user_id, r.day, r.timeslot, r.x, r.y));
        }
        write_file(&dir.join("trajectories.csv"), traj.as_bytes())?;

        let mut pois = String::from("x,y,category,count\n");
        for e in self.world.table.entries() {
            pois.push_str(&format!("{},{},{},{}\n", e.x, e.y, e.category, e.count));
        }
        write_file(&dir.join("pois.csv"), pois.as_bytes())?;

        let mut splits = serde_json::to_string_pretty(&self.splits)?;
        splits.push('\n');
        write_file(&dir.join("splits.json"), splits.as_bytes())?;

        let mut truth = String::from("uid");
        for c in 0..self.config.k {
            truth.push_str(&format!(",reliance_{c}"));
        }
        truth.push_str(",shifted\n");
        for ind in &self.individuals {
            truth.push_str(&ind.user_id.to_string());
            for r in &ind.reliance {
                truth.push_str(&format!(",{r}"));
            }
            truth.push_str(&format!(",{}\n", u8::from(ind.shifted)));
        }
        write_file(&dir.join("truth").join("truth.csv"), truth.as_bytes())
    }
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), SynthError> {
    let mut f = fs::File::create(path).map_err(io_err(path))?;
    f.write_all(bytes).map_err(io_err(path))
}

pub fn generate_dataset(cfg: &SynthConfig) -> Result<SynthDataset, SynthError> {
    cfg.validate()?;
    let world = generate_world(cfg);
    let pairs: Vec<(SynthIndividual, Vec<TrajectoryRecord>)> = (0..cfg.n_individuals as u64)
        .into_par_iter()
        .map(|uid| {
            let mut rng = cfg.individual_rng(uid);
            let ind = generate_individual(cfg, &world, uid, &mut rng);
            let post = apply_disruption_rule(cfg, &world, &ind, &mut rng);
            (ind, post)
        })
        .collect();
    let (individuals, post_records): (Vec<_>, Vec<_>) = pairs.into_iter().unzip();
    let ids: Vec<u64> = individuals.iter().map(|i| i.user_id).collect();
    let splits = Splits::ratio_20_1_1(&ids, cfg.seed);
    Ok(SynthDataset {
        config: cfg.clone(),
        world,
        individuals,
        post_records,
        splits,
    })
}

/// Reads `truth/truth.csv` as `uid → (reliance, shifted)`.
pub fn read_truth(path: &Path) -> Result<BTreeMap<u64, (Vec<f64>, bool)>, SynthError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let mut out = BTreeMap::new();
    for line in text.lines().skip(1) {
        let fields: Vec<&str> = line.split(',').collect();
        let parse_err = || SynthError::InvalidConfig(format!("bad truth row `{line}`"));
        let (uid, rest) = fields.split_first().ok_or_else(parse_err)?;
        let (flag, rel) = rest.split_last().ok_or_else(parse_err)?;
        let uid = uid.parse().map_err(|_| parse_err())?;
        let rel = rel
            .iter()
            .map(|v| v.parse::<f64>())
            .collect::<Result<Vec<_>, _>>()
            .map_err(|_| parse_err())?;
        out.insert(uid, (rel, *flag == "1"));
    }
    Ok(out)
}
