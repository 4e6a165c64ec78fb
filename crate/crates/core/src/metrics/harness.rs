use std::collections::BTreeSet;

use super::{evaluate_model, MetricsError, MetricsReport};
use crate::cunet::{CUNetConfig, CUNetModel, Variant};
use crate::ingest::{build_samples, IndividualSample, IngestConfig, PoiTable, TrajectoryRecord};
use crate::synth::Splits;
use crate::trainer::{fit, EpochLog, FitOutcome, TrainConfig};

/// Train/validation/test samples for one study.
#[derive(Clone, Debug, Default)]
pub struct StudyData {
    pub train: Vec<IndividualSample>,
    pub val: Vec<IndividualSample>,
    pub test: Vec<IndividualSample>,
}

/// Assigns samples to splits by user id; samples in no split are dropped.
pub fn partition(samples: Vec<IndividualSample>, splits: &Splits) -> StudyData {
    let val: BTreeSet<u64> = splits.val.iter().copied().collect();
    let test: BTreeSet<u64> = splits.test.iter().copied().collect();
    let train: BTreeSet<u64> = splits.train.iter().copied().collect();
    let mut out = StudyData::default();
    for s in samples {
        if train.contains(&s.user_id) {
            out.train.push(s);
        } else if val.contains(&s.user_id) {
            out.val.push(s);
        } else if test.contains(&s.user_id) {
            out.test.push(s);
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub variant: Variant,
    pub report: MetricsReport,
    pub log: Vec<EpochLog>,
}

/// Trains each variant from the same seed and data and evaluates its best
/// checkpoint on the test split. `sink` receives every finished run, e.g.
/// to persist checkpoints.
pub fn ablation_harness(
    data: &StudyData,
    base: &CUNetConfig,
    train: &TrainConfig,
    variants: &[Variant],
    mut sink: impl FnMut(Variant, &FitOutcome) -> Result<(), MetricsError>,
) -> Result<Vec<AblationRow>, MetricsError> {
    if data.test.is_empty() {
        return Err(MetricsError::Empty("test split"));
    }
    let mut rows = Vec::with_capacity(variants.len());
    for &variant in variants {
        log::info!("training {}", variant.label());
        let cfg = CUNetConfig {
            variant,
            ..base.clone()
        };
        let outcome = fit(CUNetModel::build(cfg)?, &data.train, &data.val, train)?;
        let model = outcome.best.model()?;
        let report = evaluate_model(&model, &data.test, train.binarize_threshold, train.batch_size)?;
        sink(variant, &outcome)?;
        rows.push(AblationRow {
            variant,
            report,
            log: outcome.log,
        });
    }
    Ok(rows)
}

#[derive(Clone, Debug, PartialEq)]
pub struct SensitivityRow {
    pub g: usize,
    pub report: MetricsReport,
    pub samples: usize,
    pub skipped: usize,
}

/// Re-runs feature extraction, training and evaluation for each crop size
/// with shared seeds.
#[allow(clippy::too_many_arguments)]
pub fn crop_sensitivity_harness(
    trajectories: &[TrajectoryRecord],
    pois: &PoiTable,
    ingest: &IngestConfig,
    splits: &Splits,
    sizes: &[usize],
    model: &CUNetConfig,
    train: &TrainConfig,
    mut sink: impl FnMut(usize, &FitOutcome) -> Result<(), MetricsError>,
) -> Result<Vec<SensitivityRow>, MetricsError> {
    let mut rows = Vec::with_capacity(sizes.len());
    for &g in sizes {
        log::info!("crop size {g}");
        let cfg = IngestConfig { g, ..ingest.clone() };
        let built = build_samples(trajectories, pois, &cfg)?;
        let n = built.samples.len();
        let data = partition(built.samples, splits);
        if data.test.is_empty() {
            return Err(MetricsError::Empty("test split"));
        }
        let mcfg = CUNetConfig { g, ..model.clone() };
        let outcome = fit(CUNetModel::build(mcfg)?, &data.train, &data.val, train)?;
        let best = outcome.best.model()?;
        let report = evaluate_model(&best, &data.test, train.binarize_threshold, train.batch_size)?;
        sink(g, &outcome)?;
        rows.push(SensitivityRow {
            g,
            report,
            samples: n,
            skipped: built.skipped.len(),
        });
    }
    Ok(rows)
}
