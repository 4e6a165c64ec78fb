use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use shiftgrid::cunet::{CUNetConfig, CUNetModel, Variant};
use shiftgrid::ingest::{build_samples, load_pois, load_trajectories, read_split, write_split, IndividualSample, IngestConfig};
use shiftgrid::metrics::{
    ablation_harness, binarize, crop_sensitivity_harness, evaluate_predictions, find_similar_pairs, metrics_csv,
    aggregate, pair_divergence, pairs_csv, partition, predict_maps, write_text, StudyData,
};
use shiftgrid::synth::{generate_dataset, Splits, SynthConfig};
use shiftgrid::trainer::{fit, write_epoch_log, Checkpoint, FitOutcome, TrainConfig, TrainError};

use crate::exit;
use crate::manifest::RunManifest;
use crate::pgm;
use crate::{AblateArgs, EvalArgs, ExportMapArgs, PairsArgs, PrepareArgs, SensitivityArgs, SynthGenArgs, TrainArgs, TrainOptions};

const SPLITS: [&str; 3] = ["train", "val", "test"];

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

/// Architecture settings that do not depend on the data.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct ModelSettings {
    base_channels: usize,
    mlp_hidden: usize,
    mlp_layers: usize,
    attention_token_budget: usize,
}

impl Default for ModelSettings {
    fn default() -> Self {
        let c = CUNetConfig::new(1, 1, Variant::Full);
        Self {
            base_channels: c.base_channels,
            mlp_hidden: c.mlp_hidden,
            mlp_layers: c.mlp_layers,
            attention_token_budget: c.attention_token_budget,
        }
    }
}

impl ModelSettings {
    fn build(&self, g: usize, k: usize, variant: Variant, seed: u64) -> CUNetConfig {
        CUNetConfig {
            base_channels: self.base_channels,
            mlp_hidden: self.mlp_hidden,
            mlp_layers: self.mlp_layers,
            attention_token_budget: self.attention_token_budget,
            seed,
            ..CUNetConfig::new(g, k, variant)
        }
    }
}

#[derive(Serialize)]
struct Resolved<'a, T: Serialize> {
    model: &'a ModelSettings,
    train: &'a TrainConfig,
    #[serde(flatten)]
    extra: T,
}

fn resolve(opts: &TrainOptions) -> Result<(ModelSettings, TrainConfig)> {
    let mut model: ModelSettings = match &opts.model_config {
        Some(p) => read_json(p)?,
        None => ModelSettings::default(),
    };
    let mut train: TrainConfig = match &opts.train_config {
        Some(p) => read_json(p)?,
        None => TrainConfig::default(),
    };
    if let Some(s) = opts.seed {
        train.seed = s;
    }
    if let Some(w) = opts.w_max {
        train.w_max = w;
    }
    if let Some(e) = opts.epochs {
        train.max_epochs = e;
    }
    if let Some(b) = opts.batch_size {
        train.batch_size = b;
    }
    if let Some(lr) = opts.lr {
        train.learning_rate = lr;
        train.min_lr = train.min_lr.min(lr);
    }
    if let Some(b) = opts.base_channels {
        model.base_channels = b;
    }
    train.validate()?;
    Ok((model, train))
}

fn parse_variant(s: &str) -> Result<Variant> {
    Variant::parse(s).ok_or_else(|| {
        let names: Vec<&str> = Variant::ALL.iter().map(|v| v.slug()).collect();
        exit::config(format!("unknown variant `{s}`; expected one of {}", names.join(", ")))
    })
}

fn load_split(samples: &Path, split: &str) -> Result<(usize, usize, Vec<IndividualSample>)> {
    if !SPLITS.contains(&split) {
        return Err(exit::config(format!("unknown split `{split}`")));
    }
    let (m, s) = read_split(&samples.join(split)).with_context(|| format!("reading the {split} split"))?;
    Ok((m.g, m.k, s))
}

fn load_model(checkpoint: &Path, g: usize, k: usize) -> Result<(Checkpoint, CUNetModel)> {
    let ckpt = Checkpoint::load(checkpoint).with_context(|| format!("loading checkpoint {}", checkpoint.display()))?;
    let c = &ckpt.model_config;
    if (c.g, c.k) != (g, k) {
        return Err(exit::domain(format!(
            "checkpoint expects g={}, k={} but samples have g={g}, k={k}",
            c.g, c.k
        )));
    }
    let model = ckpt.model()?;
    Ok((ckpt, model))
}

fn save_run(dir: &Path, outcome: &FitOutcome) -> Result<Vec<PathBuf>, TrainError> {
    fs::create_dir_all(dir).map_err(|source| TrainError::Io {
        path: dir.to_path_buf(),
        source,
    })?;
    let ckpt = dir.join("checkpoint");
    outcome.best.save(&ckpt)?;
    let log = dir.join("epochs.csv");
    write_epoch_log(&log, &outcome.log)?;
    Ok(vec![ckpt, log])
}

pub fn synth_gen(a: &SynthGenArgs) -> Result<()> {
    let mut m = RunManifest::start("synth-gen");
    let mut cfg: SynthConfig = match &a.config {
        Some(p) => {
            m.input("config", p);
            read_json(p)?
        }
        None => SynthConfig::default(),
    };
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    let ingest = cfg.ingest_config(a.g);
    if a.g == 0 || a.g > cfg.world_m.min(cfg.world_n) {
        return Err(exit::config(format!("g={} does not fit the {}x{} world", a.g, cfg.world_m, cfg.world_n)));
    }
    m.config(&cfg)?;
    m.seed("synth", cfg.seed);
    let ds = generate_dataset(&cfg)?;
    create_dir(&a.out)?;
    ds.write(&a.out)?;
    write_json(&a.out.join("ingest_config.json"), &ingest)?;
    for f in ["trajectories.csv", "pois.csv", "splits.json", "ingest_config.json", "truth/truth.csv"] {
        m.output(a.out.join(f));
    }
    let shifted = ds.individuals.iter().filter(|i| i.shifted).count();
    println!(
        "generated {} individuals ({} shifted), {} POI cells",
        ds.individuals.len(),
        shifted,
        ds.world.table.entries().len()
    );
    m.finish(&a.out)
}

struct RawData {
    ingest: IngestConfig,
    trajectories: Vec<shiftgrid::ingest::TrajectoryRecord>,
    pois: shiftgrid::ingest::PoiTable,
    splits: Splits,
}

fn load_raw(raw: &Path, config: Option<&Path>, g: Option<usize>, split_seed: u64, m: &mut RunManifest) -> Result<RawData> {
    let cfg_path = config.map_or_else(|| raw.join("ingest_config.json"), Path::to_path_buf);
    m.input("ingest_config", &cfg_path);
    let mut ingest: IngestConfig = read_json(&cfg_path)?;
    if let Some(g) = g {
        ingest.g = g;
    }
    let traj = raw.join("trajectories.csv");
    let pois_path = raw.join("pois.csv");
    m.input("trajectories", &traj);
    m.input("pois", &pois_path);
    let trajectories = load_trajectories(&traj, ingest.world_dims(), ingest.total_days())?;
    let pois = load_pois(&pois_path, ingest.world_dims(), ingest.k)?;
    let split_path = raw.join("splits.json");
    let splits = if split_path.exists() {
        m.input("splits", &split_path);
        read_json(&split_path)?
    } else {
        let ids: BTreeSet<u64> = trajectories.iter().map(|r| r.user_id).collect();
        let ids: Vec<u64> = ids.into_iter().collect();
        m.seed("split", split_seed);
        Splits::ratio_20_1_1(&ids, split_seed)
    };
    Ok(RawData {
        ingest,
        trajectories,
        pois,
        splits,
    })
}

pub fn prepare(a: &PrepareArgs) -> Result<()> {
    let mut m = RunManifest::start("prepare");
    let raw = load_raw(&a.raw, a.config.as_deref(), a.g, a.seed, &mut m)?;
    m.config(&raw.ingest)?;
    let built = build_samples(&raw.trajectories, &raw.pois, &raw.ingest)?;
    let (n, skipped) = (built.samples.len(), built.skipped.len());
    let data = partition(built.samples, &raw.splits);
    create_dir(&a.out)?;
    for (name, samples) in [("train", &data.train), ("val", &data.val), ("test", &data.test)] {
        let dir = a.out.join(name);
        write_split(&dir, samples, raw.ingest.g, raw.ingest.k)?;
        m.output(dir);
    }
    println!(
        "built {n} samples (train {}, val {}, test {}); skipped {skipped} without pre-event data; {} records outside crops",
        data.train.len(),
        data.val.len(),
        data.test.len(),
        built.outside_records
    );
    m.finish(&a.out)
}

pub fn train(a: &TrainArgs) -> Result<()> {
    let mut m = RunManifest::start("train");
    let variant = parse_variant(&a.variant)?;
    let (settings, tcfg) = resolve(&a.opts)?;
    m.input("samples", &a.samples);
    let (g, k, train) = load_split(&a.samples, "train")?;
    let (_, _, val) = load_split(&a.samples, "val")?;
    let mcfg = settings.build(g, k, variant, tcfg.seed);
    m.config(&Resolved {
        model: &settings,
        train: &tcfg,
        extra: serde_json::json!({ "variant": variant, "g": g, "k": k }),
    })?;
    m.seed("train", tcfg.seed);
    let outcome = fit(CUNetModel::build(mcfg)?, &train, &val, &tcfg)?;
    create_dir(&a.out)?;
    for p in save_run(&a.out, &outcome)? {
        m.output(p);
    }
    if let Some(last) = outcome.log.last() {
        println!(
            "{} epochs, best val loss {:.6}, final lr {:.2e}",
            outcome.log.len(),
            outcome.best.best_val.unwrap_or(last.val_loss),
            last.lr
        );
    }
    m.finish(&a.out)
}

pub fn eval(a: &EvalArgs) -> Result<()> {
    let mut m = RunManifest::start("eval");
    m.input("samples", &a.samples);
    let (g, k, samples) = load_split(&a.samples, &a.split)?;
    if samples.is_empty() {
        return Err(exit::domain(format!("the {} split is empty", a.split)));
    }
    let (label, maps, threshold) = if a.oracle {
        let maps: Vec<Vec<f32>> = samples
            .iter()
            .map(|s| s.v_post.bitmap.iter().map(|&b| f32::from(b)).collect())
            .collect();
        ("Oracle".to_string(), maps, a.threshold.unwrap_or(0.5))
    } else {
        let path = a.checkpoint.as_deref().expect("clap requires --checkpoint");
        m.input("checkpoint", path);
        let (ckpt, model) = load_model(path, g, k)?;
        let threshold = a.threshold.unwrap_or(ckpt.train_config.binarize_threshold);
        let maps = predict_maps(&model, &samples, ckpt.train_config.batch_size)?;
        (ckpt.model_config.variant.label().to_string(), maps, threshold)
    };
    m.config(&serde_json::json!({ "split": a.split, "oracle": a.oracle, "threshold": threshold }))?;
    let report = aggregate(&evaluate_predictions(&maps, &samples, threshold)?);
    create_dir(&a.out)?;
    let out = a.out.join("metrics.csv");
    let text = metrics_csv("variant", &[(label, report)]);
    write_text(&out, &text)?;
    print!("{text}");
    m.output(out);
    m.finish(&a.out)
}

pub fn ablate(a: &AblateArgs) -> Result<()> {
    let mut m = RunManifest::start("ablate");
    let (settings, tcfg) = resolve(&a.opts)?;
    m.input("samples", &a.samples);
    let (g, k, train) = load_split(&a.samples, "train")?;
    let (_, _, val) = load_split(&a.samples, "val")?;
    let (_, _, test) = load_split(&a.samples, "test")?;
    let data = StudyData { train, val, test };
    let base = settings.build(g, k, Variant::Baseline, tcfg.seed);
    m.config(&Resolved {
        model: &settings,
        train: &tcfg,
        extra: serde_json::json!({ "g": g, "k": k }),
    })?;
    m.seed("train", tcfg.seed);
    create_dir(&a.out)?;
    let mut outputs = Vec::new();
    let rows = ablation_harness(&data, &base, &tcfg, &Variant::ALL, |v, outcome| {
        outputs.extend(save_run(&a.out.join(v.slug()), outcome)?);
        Ok(())
    })?;
    let labelled: Vec<_> = rows.iter().map(|r| (r.variant.label().to_string(), r.report)).collect();
    let out = a.out.join("ablation.csv");
    let text = metrics_csv("variant", &labelled);
    write_text(&out, &text)?;
    print!("{text}");
    outputs.into_iter().for_each(|p| m.output(p));
    m.output(out);
    m.finish(&a.out)
}

pub fn sensitivity(a: &SensitivityArgs) -> Result<()> {
    let mut m = RunManifest::start("sensitivity");
    let variant = parse_variant(&a.variant)?;
    let (settings, tcfg) = resolve(&a.opts)?;
    if a.sizes.is_empty() || a.sizes.contains(&0) {
        return Err(exit::config("--sizes needs positive crop sizes"));
    }
    let raw = load_raw(&a.raw, a.config.as_deref(), None, a.split_seed, &mut m)?;
    let model = settings.build(raw.ingest.g, raw.ingest.k, variant, tcfg.seed);
    m.config(&Resolved {
        model: &settings,
        train: &tcfg,
        extra: serde_json::json!({ "variant": variant, "sizes": a.sizes, "ingest": raw.ingest }),
    })?;
    m.seed("train", tcfg.seed);
    create_dir(&a.out)?;
    let mut outputs = Vec::new();
    let rows = crop_sensitivity_harness(
        &raw.trajectories,
        &raw.pois,
        &raw.ingest,
        &raw.splits,
        &a.sizes,
        &model,
        &tcfg,
        |g, outcome| {
            outputs.extend(save_run(&a.out.join(format!("g{g}")), outcome)?);
            Ok(())
        },
    )?;
    let labelled: Vec<_> = rows.iter().map(|r| (r.g.to_string(), r.report)).collect();
    let out = a.out.join("sensitivity.csv");
    let text = metrics_csv("size", &labelled);
    write_text(&out, &text)?;
    print!("{text}");
    outputs.into_iter().for_each(|p| m.output(p));
    m.output(out);
    m.finish(&a.out)
}

pub fn pairs(a: &PairsArgs) -> Result<()> {
    let mut m = RunManifest::start("pairs");
    m.input("samples", &a.samples);
    m.input("checkpoint", &a.checkpoint);
    let (g, k, samples) = load_split(&a.samples, &a.split)?;
    let (_, model) = load_model(&a.checkpoint, g, k)?;
    m.config(&serde_json::json!({
        "split": a.split, "pre_min": a.pre_min, "sir_max": a.sir_max, "limit": a.limit
    }))?;
    let mut candidates = find_similar_pairs(&samples, a.pre_min, a.sir_max);
    if let Some(n) = a.limit {
        candidates.truncate(n);
    }
    let by_uid: std::collections::HashMap<u64, &IndividualSample> = samples.iter().map(|s| (s.user_id, s)).collect();
    let results = candidates
        .iter()
        .map(|c| pair_divergence(&model, by_uid[&c.uid_a], by_uid[&c.uid_b]))
        .collect::<Result<Vec<_>, _>>()?;
    create_dir(&a.out)?;
    let out = a.out.join("pairs.csv");
    write_text(&out, &pairs_csv(&results))?;
    println!("{} qualifying pairs", results.len());
    m.output(out);
    m.finish(&a.out)
}

pub fn export_map(a: &ExportMapArgs) -> Result<()> {
    let mut m = RunManifest::start("export-map");
    m.input("samples", &a.samples);
    m.input("checkpoint", &a.checkpoint);
    let mut found = None;
    for split in SPLITS {
        let (g, k, samples) = load_split(&a.samples, split)?;
        if let Some(s) = samples.into_iter().find(|s| s.user_id == a.uid) {
            found = Some((g, k, s));
            break;
        }
    }
    let (g, k, sample) = found.ok_or_else(|| exit::domain(format!("uid {} is not in any split", a.uid)))?;
    let (ckpt, model) = load_model(&a.checkpoint, g, k)?;
    let threshold = a.threshold.unwrap_or(ckpt.train_config.binarize_threshold);
    m.config(&serde_json::json!({ "uid": a.uid, "threshold": threshold }))?;
    let probs = predict_maps(&model, std::slice::from_ref(&sample), 1)?.remove(0);
    let bin = binarize(&probs, threshold);
    let as_f64 = |v: &[u8]| v.iter().map(|&b| f64::from(b)).collect::<Vec<f64>>();
    let prob64: Vec<f64> = probs.iter().map(|&p| f64::from(p)).collect();
    create_dir(&a.out)?;
    let uid = a.uid;
    let images = [
        ("pre", as_f64(&sample.v_pre.bitmap)),
        ("post", as_f64(&sample.v_post.bitmap)),
        ("pred", prob64),
        ("bin", as_f64(&bin)),
    ];
    for (name, values) in &images {
        let path = a.out.join(format!("{uid}_{name}.pgm"));
        fs::write(&path, pgm::encode(g, values)).with_context(|| format!("writing {}", path.display()))?;
        m.output(path);
    }
    let mut csv = String::from("i,j,pre,post,probability,predicted\n");
    for i in 0..g {
        for j in 0..g {
            let c = i * g + j;
            csv.push_str(&format!(
                "{i},{j},{},{},{},{}\n",
                sample.v_pre.bitmap[c], sample.v_post.bitmap[c], probs[c], bin[c]
            ));
        }
    }
    let path = a.out.join(format!("{uid}_map.csv"));
    write_text(&path, &csv)?;
    m.output(path);
    m.finish(&a.out)
}
