//! Brute-force reimplementations of the feature extractors, compared on
//! random small worlds.

use proptest::prelude::*;
use shiftgrid::ingest::{
    compute_sir, compute_spatial_context, crop_window, rasterize_movement, HomeAnchor, Phase,
    PoiEntry, PoiTable, TrajectoryRecord,
};

fn oracle_proportions(entries: &[PoiEntry], k: usize, x: u32, y: u32) -> Option<Vec<f64>> {
    let mut counts = vec![0u64; k];
    for e in entries {
        if e.x == x && e.y == y {
            counts[e.category as usize] += u64::from(e.count);
        }
    }
    let total: u64 = counts.iter().sum();
    (total > 0).then(|| counts.iter().map(|&c| c as f64 / total as f64).collect())
}

fn oracle_sir(records: &[TrajectoryRecord], entries: &[PoiEntry], k: usize) -> Vec<f64> {
    let mut acc = vec![0.0; k];
    for r in records {
        if let Some(p) = oracle_proportions(entries, k, r.x, r.y) {
            for c in 0..k {
                acc[c] += p[c];
            }
        }
    }
    let s: f64 = acc.iter().sum();
    if s > 0.0 {
        acc.iter().map(|a| a / s).collect()
    } else {
        acc
    }
}

#[derive(Debug, Clone)]
struct World {
    m: u32,
    n: u32,
    k: usize,
    entries: Vec<PoiEntry>,
    records: Vec<TrajectoryRecord>,
}

fn world() -> impl Strategy<Value = World> {
    (1u32..=8, 1u32..=8, 1usize..=5).prop_flat_map(|(m, n, k)| {
        let entry = (0..m, 0..n, 0..k as u32, 1u32..5).prop_map(|(x, y, category, count)| PoiEntry {
            x,
            y,
            category,
            count,
        });
        let record = (0u64..10, 0u32..4, 0u32..48, 0..m, 0..n).prop_map(|(user_id, day, timeslot, x, y)| {
            TrajectoryRecord {
                user_id,
                day,
                timeslot,
                x,
                y,
            }
        });
        (
            Just((m, n, k)),
            prop::collection::vec(entry, 0..30),
            prop::collection::vec(record, 0..60),
        )
            .prop_map(|((m, n, k), entries, records)| World {
                m,
                n,
                k,
                entries,
                records,
            })
    })
}

proptest! {
    #[test]
    fn sir_matches_oracle(w in world()) {
        let table = PoiTable::from_entries(w.k, w.entries.iter().copied());
        for uid in 0..10 {
            let recs: Vec<_> = w.records.iter().filter(|r| r.user_id == uid).copied().collect();
            let sir = compute_sir(uid, &recs, &table);
            let expected = oracle_sir(&recs, &w.entries, w.k);
            prop_assert_eq!(&sir.values, &expected);
            let s: f64 = sir.values.iter().sum();
            prop_assert!(s == 0.0 || (s - 1.0).abs() < 1e-9);
            prop_assert!(sir.values.iter().all(|&v| v >= 0.0));
        }
    }

    #[test]
    fn spatial_context_matches_oracle(w in world(), ax in 0u32..8, ay in 0u32..8, g in 1usize..=8) {
        prop_assume!(g <= w.m as usize && g <= w.n as usize);
        let table = PoiTable::from_entries(w.k, w.entries.iter().copied());
        let anchor = HomeAnchor { user_id: 0, center_x: ax % w.m, center_y: ay % w.n };
        let crop = crop_window(&anchor, g, (w.m as usize, w.n as usize)).unwrap();
        prop_assert!(crop.x0 as usize + g <= w.m as usize);
        prop_assert!(crop.y0 as usize + g <= w.n as usize);
        let sc = compute_spatial_context(0, &table, crop);
        for i in 0..g {
            for j in 0..g {
                let cell = sc.cell(i, j);
                let expected = oracle_proportions(&w.entries, w.k, crop.x0 + i as u32, crop.y0 + j as u32)
                    .unwrap_or_else(|| vec![0.0; w.k]);
                prop_assert_eq!(&cell, &expected);
                let s: f64 = cell.iter().sum();
                prop_assert!(s == 0.0 || (s - 1.0).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn rasterize_ignores_duplicates(w in world(), g in 1usize..=8) {
        prop_assume!(g <= w.m as usize && g <= w.n as usize);
        let anchor = HomeAnchor { user_id: 0, center_x: 0, center_y: 0 };
        let crop = crop_window(&anchor, g, (w.m as usize, w.n as usize)).unwrap();
        let (once, _) = rasterize_movement(0, Phase::Pre, &w.records, 0..4, crop);
        let doubled: Vec<_> = w.records.iter().chain(&w.records).copied().collect();
        let (twice, _) = rasterize_movement(0, Phase::Pre, &doubled, 0..4, crop);
        prop_assert_eq!(&once, &twice);
        prop_assert!(once.bitmap.iter().all(|&b| b <= 1));
    }
}
