//! Set-recall accuracies over visited cells, their aggregation, and the
//! ablation, crop-size and pair studies built on them.

mod harness;

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::autodiff::{Real, Tensor};
use crate::cunet::{CUNetModel, CunetError, ModelInputs};
use crate::ingest::{IngestError, IndividualSample};
use crate::trainer::TrainError;

pub use harness::{
    ablation_harness, crop_sensitivity_harness, partition, AblationRow, SensitivityRow, StudyData,
};

#[derive(Debug, thiserror::Error)]
pub enum MetricsError {
    #[error("cosine similarity of a zero vector")]
    ZeroVector,
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("empty {0}")]
    Empty(&'static str),
    #[error(transparent)]
    Model(#[from] CunetError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Ingest(#[from] IngestError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

/// `1` where `pred ≥ threshold`.
pub fn binarize<T: Real>(pred: &[T], threshold: f64) -> Vec<u8> {
    let t = T::from_f64_lossy(threshold);
    pred.iter().map(|&p| u8::from(p >= t)).collect()
}

/// Cell counts behind one report. `hit_*` are numerators, `post_*`
/// denominators; `*_visited` restricts to cells also visited before, and
/// `*_unvisited` to cells not visited before.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct SetCounts {
    pub hit: usize,
    pub post: usize,
    pub hit_visited: usize,
    pub post_visited: usize,
    pub hit_unvisited: usize,
    pub post_unvisited: usize,
    pub agree: usize,
    pub cells: usize,
}

impl SetCounts {
    pub fn of(pred: &[u8], post: &[u8], pre: &[u8]) -> Result<Self, MetricsError> {
        if pred.len() != post.len() || pre.len() != post.len() {
            return Err(MetricsError::ShapeMismatch(format!(
                "pred {}, post {}, pre {} cells",
                pred.len(),
                post.len(),
                pre.len()
            )));
        }
        let mut c = SetCounts {
            cells: pred.len(),
            ..Default::default()
        };
        for ((&p, &v), &b) in pred.iter().zip(post).zip(pre) {
            let (p, v, b) = (p != 0, v != 0, b != 0);
            c.agree += usize::from(p == v);
            if !v {
                continue;
            }
            c.post += 1;
            c.hit += usize::from(p);
            if b {
                c.post_visited += 1;
                c.hit_visited += usize::from(p);
            } else {
                c.post_unvisited += 1;
                c.hit_unvisited += usize::from(p);
            }
        }
        Ok(c)
    }
}

fn ratio(num: usize, den: usize) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

/// Accuracies of one prediction, or the mean over many.
///
/// For a single prediction `n_*` are the denominators in cells; after
/// [`aggregate`] they count the individuals with a defined value.
/// Undefined metrics (empty denominator) are `None`.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct MetricsReport {
    pub overall: Option<f64>,
    pub visited: Option<f64>,
    pub unvisited: Option<f64>,
    /// Fraction of cells where the binary prediction equals the post grid.
    pub cellwise: Option<f64>,
    pub n_overall: usize,
    pub n_visited: usize,
    pub n_unvisited: usize,
}

impl MetricsReport {
    pub fn from_counts(c: &SetCounts) -> Self {
        Self {
            overall: ratio(c.hit, c.post),
            visited: ratio(c.hit_visited, c.post_visited),
            unvisited: ratio(c.hit_unvisited, c.post_unvisited),
            cellwise: ratio(c.agree, c.cells),
            n_overall: c.post,
            n_visited: c.post_visited,
            n_unvisited: c.post_unvisited,
        }
    }
}

pub fn accuracy_metrics(pred_bin: &[u8], v_post: &[u8], v_pre: &[u8]) -> Result<MetricsReport, MetricsError> {
    Ok(MetricsReport::from_counts(&SetCounts::of(pred_bin, v_post, v_pre)?))
}

fn mean_defined(values: impl Iterator<Item = Option<f64>>) -> (Option<f64>, usize) {
    let (sum, n) = values.flatten().fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (ratio_f(sum, n), n)
}

fn ratio_f(sum: f64, n: usize) -> Option<f64> {
    (n > 0).then(|| sum / n as f64)
}

/// Per-metric mean over the reports where it is defined.
pub fn aggregate(reports: &[MetricsReport]) -> MetricsReport {
    let (overall, n_overall) = mean_defined(reports.iter().map(|r| r.overall));
    let (visited, n_visited) = mean_defined(reports.iter().map(|r| r.visited));
    let (unvisited, n_unvisited) = mean_defined(reports.iter().map(|r| r.unvisited));
    let (cellwise, _) = mean_defined(reports.iter().map(|r| r.cellwise));
    MetricsReport {
        overall,
        visited,
        unvisited,
        cellwise,
        n_overall,
        n_visited,
        n_unvisited,
    }
}

pub fn cosine_similarity(a: &[f64], b: &[f64]) -> Result<f64, MetricsError> {
    if a.len() != b.len() {
        return Err(MetricsError::ShapeMismatch(format!("{} vs {} entries", a.len(), b.len())));
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(MetricsError::ZeroVector);
    }
    Ok(dot / (na * nb))
}

fn grid_f64(g: &[u8]) -> Vec<f64> {
    g.iter().map(|&b| f64::from(b)).collect()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PairCandidate {
    pub uid_a: u64,
    pub uid_b: u64,
    pub pre_cosine: f64,
    pub sir_cosine: f64,
}

pub const DEFAULT_PRE_SIM_MIN: f64 = 0.3;
pub const DEFAULT_SIR_SIM_MAX: f64 = 0.5;

/// Unordered pairs with pre-grid cosine `> pre_sim_min` and SIR cosine
/// `< sir_sim_max`, most similar pre grids first, then least similar SIR.
/// Samples with an empty pre grid or a zero SIR never pair.
pub fn find_similar_pairs(samples: &[IndividualSample], pre_sim_min: f64, sir_sim_max: f64) -> Vec<PairCandidate> {
    let pre: Vec<Vec<f64>> = samples.iter().map(|s| grid_f64(&s.v_pre.bitmap)).collect();
    let mut out = Vec::new();
    for i in 0..samples.len() {
        for j in i + 1..samples.len() {
            let Ok(pc) = cosine_similarity(&pre[i], &pre[j]) else { continue };
            if !(pc > pre_sim_min) {
                continue;
            }
            let Ok(sc) = cosine_similarity(&samples[i].sir.values, &samples[j].sir.values) else { continue };
            if sc < sir_sim_max {
                out.push(PairCandidate {
                    uid_a: samples[i].user_id,
                    uid_b: samples[j].user_id,
                    pre_cosine: pc,
                    sir_cosine: sc,
                });
            }
        }
    }
    out.sort_by(|a, b| {
        b.pre_cosine
            .total_cmp(&a.pre_cosine)
            .then(a.sir_cosine.total_cmp(&b.sir_cosine))
            .then((a.uid_a, a.uid_b).cmp(&(b.uid_a, b.uid_b)))
    });
    out
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PairStudyResult {
    pub uid_a: u64,
    pub uid_b: u64,
    pub pre_cosine: f64,
    pub sir_cosine: f64,
    /// Mean absolute difference of the two predicted probability maps.
    pub map_l1_mean: f64,
}

/// Frozen-model predictions for both individuals and their distance.
/// Similarities of undefined (zero) vectors are reported as 0.
pub fn pair_divergence(
    model: &CUNetModel,
    a: &IndividualSample,
    b: &IndividualSample,
) -> Result<PairStudyResult, MetricsError> {
    let inputs = ModelInputs::from_samples(&[a, b])?;
    let pred = model.predict(&inputs)?;
    let plane = a.g() * a.g();
    let (pa, pb) = pred.data().split_at(plane);
    let l1 = pa
        .iter()
        .zip(pb)
        .map(|(x, y)| (f64::from(*x) - f64::from(*y)).abs())
        .sum::<f64>()
        / plane as f64;
    let or_zero = |r: Result<f64, MetricsError>| match r {
        Err(MetricsError::ZeroVector) => Ok(0.0),
        other => other,
    };
    Ok(PairStudyResult {
        uid_a: a.user_id,
        uid_b: b.user_id,
        pre_cosine: or_zero(cosine_similarity(&grid_f64(&a.v_pre.bitmap), &grid_f64(&b.v_pre.bitmap)))?,
        sir_cosine: or_zero(cosine_similarity(&a.sir.values, &b.sir.values))?,
        map_l1_mean: l1,
    })
}

/// Probability maps `[G²]` per sample, batched through the frozen model.
pub fn predict_maps(model: &CUNetModel, samples: &[IndividualSample], batch: usize) -> Result<Vec<Vec<f32>>, MetricsError> {
    let mut out = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(batch.max(1)) {
        let refs: Vec<&IndividualSample> = chunk.iter().collect();
        let pred: Tensor<f32> = model.predict(&ModelInputs::from_samples(&refs)?)?;
        let plane = chunk[0].g() * chunk[0].g();
        out.extend(pred.data().chunks(plane).map(<[f32]>::to_vec));
    }
    Ok(out)
}

/// Per-sample reports for given probability maps.
pub fn evaluate_predictions(
    maps: &[Vec<f32>],
    samples: &[IndividualSample],
    threshold: f64,
) -> Result<Vec<MetricsReport>, MetricsError> {
    if maps.len() != samples.len() {
        return Err(MetricsError::ShapeMismatch(format!("{} maps for {} samples", maps.len(), samples.len())));
    }
    maps.iter()
        .zip(samples)
        .map(|(m, s)| accuracy_metrics(&binarize(m, threshold), &s.v_post.bitmap, &s.v_pre.bitmap))
        .collect()
}

/// Aggregated report of `model` on `samples`.
pub fn evaluate_model(
    model: &CUNetModel,
    samples: &[IndividualSample],
    threshold: f64,
    batch: usize,
) -> Result<MetricsReport, MetricsError> {
    if samples.is_empty() {
        return Err(MetricsError::Empty("evaluation split"));
    }
    let maps = predict_maps(model, samples, batch)?;
    Ok(aggregate(&evaluate_predictions(&maps, samples, threshold)?))
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub const METRICS_HEADER: &str = "variant,overall,visited,unvisited,cellwise,n_overall,n_visited,n_unvisited";
pub const PAIRS_HEADER: &str = "uid_a,uid_b,pre_cosine,sir_cosine,map_l1_mean";

fn report_fields(r: &MetricsReport) -> String {
    format!(
        "{},{},{},{},{},{},{}",
        opt(r.overall),
        opt(r.visited),
        opt(r.unvisited),
        opt(r.cellwise),
        r.n_overall,
        r.n_visited,
        r.n_unvisited
    )
}

/// Metrics table with one row per labelled report; undefined values are
/// left empty.
pub fn metrics_csv(first_column: &str, rows: &[(String, MetricsReport)]) -> String {
    let mut out = METRICS_HEADER.replacen("variant", first_column, 1);
    out.push('\n');
    for (label, r) in rows {
        let _ = writeln!(out, "{label},{}", report_fields(r));
    }
    out
}

pub fn pairs_csv(rows: &[PairStudyResult]) -> String {
    let mut out = String::from(PAIRS_HEADER);
    out.push('\n');
    for r in rows {
        let _ = writeln!(out, "{},{},{},{},{}", r.uid_a, r.uid_b, r.pre_cosine, r.sir_cosine, r.map_l1_mean);
    }
    out
}

pub fn write_text(path: &Path, text: &str) -> Result<(), MetricsError> {
    std::fs::write(path, text).map_err(|source| MetricsError::Io {
        path: path.to_path_buf(),
        source,
    })
}
