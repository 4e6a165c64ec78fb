//! Acceptance run: one PASS/FAIL line per criterion, non-zero exit if any
//! criterion fails. Criteria 6 and 7 train on the default synthetic world
//! and take several minutes.

use std::collections::BTreeSet;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::process::ExitCode;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use shiftgrid::autodiff::{
    grad_check, random_tensor, AutodiffError, BatchNormConfig, NormMode, RunningStats, Tape, Tensor, Var,
};
use shiftgrid::cunet::{CUNetConfig, CUNetModel, ModelInputs, Variant};
use shiftgrid::ingest::{
    build_samples, compute_sir, compute_spatial_context, crop_window, read_split, write_split, HomeAnchor,
    IndividualSample, PoiEntry, PoiTable, TrajectoryRecord,
};
use shiftgrid::metrics::*;
use shiftgrid::synth::{generate_dataset, SynthConfig, SynthDataset};
use shiftgrid::trainer::*;

type Outcome = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        if !$cond {
            return Err(format!($($msg)+));
        }
    };
}

// ---------------------------------------------------------------- 1

type Op = Box<dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var, AutodiffError>>;

struct GradCase {
    name: &'static str,
    op: Op,
    shapes: Vec<Vec<usize>>,
    differentiable: Vec<bool>,
    range: (f64, f64),
}

fn case(name: &'static str, shapes: &[&[usize]], range: (f64, f64), op: Op) -> GradCase {
    GradCase {
        name,
        op,
        shapes: shapes.iter().map(|s| s.to_vec()).collect(),
        differentiable: vec![true; shapes.len()],
        range,
    }
}

fn gradient_cases() -> Vec<GradCase> {
    let u = (-1.0, 1.0);
    let mut bce = case("bce", &[&[2, 1, 4, 4], &[2, 1, 4, 4]], (0.05, 0.95), Box::new(|t, v| {
        let target = t.value(v[1]).map(|x| if x > 0.5 { 1.0 } else { 0.0 });
        let tv = t.constant(target);
        t.bce_elementwise(v[0], tv)
    }));
    bce.differentiable = vec![true, false];
    let bn = |mode| -> Op {
        Box::new(move |t, v| {
            let mut stats = RunningStats::new(3);
            stats.mean = vec![0.1, -0.2, 0.3];
            stats.var = vec![0.5, 1.5, 2.0];
            t.batchnorm2d(v[0], v[1], v[2], &mut stats, mode, BatchNormConfig::default())
        })
    };
    vec![
        case("conv2d", &[&[2, 2, 4, 4], &[3, 2, 3, 3], &[3]], u, Box::new(|t, v| t.conv2d(v[0], v[1], v[2], 1, 1))),
        case("conv2d stride 2", &[&[2, 3, 6, 6], &[2, 3, 3, 3], &[2]], u, Box::new(|t, v| t.conv2d(v[0], v[1], v[2], 2, 1))),
        case("conv_transpose2d", &[&[2, 3, 3, 3], &[3, 2, 2, 2], &[2]], u, Box::new(|t, v| t.conv_transpose2d(v[0], v[1], v[2], 2, 0))),
        case("batchnorm2d train", &[&[4, 3, 5, 5], &[3], &[3]], (-2.0, 2.0), bn(NormMode::Train)),
        case("batchnorm2d eval", &[&[4, 3, 5, 5], &[3], &[3]], (-2.0, 2.0), bn(NormMode::Eval)),
        case("relu", &[&[3, 7]], u, Box::new(|t, v| Ok(t.relu(v[0])))),
        case("sigmoid", &[&[3, 7]], (-4.0, 4.0), Box::new(|t, v| Ok(t.sigmoid(v[0])))),
        case("linear", &[&[4, 5], &[3, 5], &[3]], u, Box::new(|t, v| t.linear(v[0], v[1], v[2]))),
        case("concat", &[&[2, 3, 4, 4], &[2, 2, 4, 4]], u, Box::new(|t, v| t.concat_channels(v[0], v[1]))),
        case("tile", &[&[2, 5]], u, Box::new(|t, v| t.tile_vector_to_map(v[0], 3, 4))),
        case("film_modulate", &[&[2, 3, 4, 4], &[2, 3], &[2, 3]], u, Box::new(|t, v| t.film_modulate(v[0], v[1], v[2]))),
        case("cross_attention", &[&[2, 4, 6], &[2, 3, 6], &[2, 3, 6]], u, Box::new(|t, v| t.cross_attention(v[0], v[1], v[2]))),
        bce,
        case("adaptive_avg_pool", &[&[2, 2, 5, 7]], u, Box::new(|t, v| t.adaptive_avg_pool(v[0], 2, 3))),
    ]
}

fn gradient_suite() -> Outcome {
    let start = Instant::now();
    let seeds = 5u64;
    let mut worst: f64 = 0.0;
    let cases = gradient_cases();
    for c in &cases {
        for seed in 0..seeds {
            let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
            let inputs: Vec<Tensor<f64>> = c.shapes.iter().map(|s| random_tensor(s, c.range.0, c.range.1, &mut rng)).collect();
            let report = grad_check(&c.op, &inputs, &c.differentiable, 1e-6, 1e-4, seed).map_err(|e| format!("{}: {e}", c.name))?;
            ensure!(report.passed(), "{} seed {seed}: max relative error {:.3e}", c.name, report.max_rel_error());
            worst = worst.max(report.max_rel_error());
        }
    }
    let took = start.elapsed();
    ensure!(took < Duration::from_secs(120), "suite took {took:?}");
    Ok(format!("{} cases x {seeds} seeds, worst relative error {worst:.2e}, {:.1}s", cases.len(), took.as_secs_f64()))
}

// ---------------------------------------------------------------- 2

fn weight_oracle(r: f64, w_max: f64) -> f64 {
    w_max - (w_max - 1.0) * r
}

fn loss_weighting() -> Outcome {
    for w in [1.0, 3.0, 10.0] {
        ensure!(sample_weight(0.0, w) == w && sample_weight(1.0, w) == 1.0, "endpoints at w_max={w}");
    }
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let r: f64 = rng.random_range(0.0..=1.0);
        let w: f64 = rng.random_range(1.0..50.0);
        worst = worst.max((sample_weight(r, w) - weight_oracle(r, w)).abs());
    }
    ensure!(worst < 1e-12, "weight error {worst:e}");
    let mut loss_worst: f64 = 0.0;
    for _ in 0..100 {
        let b = rng.random_range(1..6);
        let pred: Vec<f64> = (0..b * 16).map(|_| rng.random_range(0.01..0.99)).collect();
        let target: Vec<f64> = (0..b * 16).map(|_| f64::from(u8::from(rng.random_bool(0.3)))).collect();
        let w_max = rng.random_range(1.0..20.0);
        let mut expected = 0.0;
        for s in 0..b {
            let t = &target[s * 16..(s + 1) * 16];
            let p = &pred[s * 16..(s + 1) * 16];
            let r = t.iter().sum::<f64>() / 16.0;
            let bce: f64 = p.iter().zip(t).map(|(p, t)| -(t * p.ln() + (1.0 - t) * (1.0 - p).ln())).sum::<f64>() / 16.0;
            expected += weight_oracle(r, w_max) * bce;
        }
        expected /= b as f64;
        let got = weighted_bce_loss(
            &Tensor::new(&[b, 1, 4, 4], pred).unwrap(),
            &Tensor::new(&[b, 1, 4, 4], target).unwrap(),
            w_max,
        )
        .map_err(|e| e.to_string())?;
        loss_worst = loss_worst.max((got - expected).abs());
    }
    ensure!(loss_worst < 1e-12, "loss error {loss_worst:e}");
    Ok(format!("weight error {worst:.1e}, loss error {loss_worst:.1e}"))
}

// ---------------------------------------------------------------- 3

fn metrics_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let n = 8;
    let set = |g: &[u8]| -> BTreeSet<usize> { (0..n * n).filter(|&c| g[c] == 1).collect() };
    for i in 0..1000 {
        let p = rng.random_range(0.0..0.7);
        let grids: Vec<Vec<u8>> = (0..3).map(|_| (0..n * n).map(|_| u8::from(rng.random_bool(p))).collect()).collect();
        let (pred, post, pre) = (set(&grids[0]), set(&grids[1]), set(&grids[2]));
        let hit: BTreeSet<usize> = pred.intersection(&post).copied().collect();
        let hit_vis = hit.intersection(&pre).count();
        let hit_new = hit.difference(&pre).count();
        let post_vis = post.intersection(&pre).count();
        let post_new = post.difference(&pre).count();
        let frac = |a: usize, d: usize| (d > 0).then(|| a as f64 / d as f64);
        let r = accuracy_metrics(&grids[0], &grids[1], &grids[2]).map_err(|e| e.to_string())?;
        ensure!(
            r.overall == frac(hit.len(), post.len())
                && r.visited == frac(hit_vis, post_vis)
                && r.unvisited == frac(hit_new, post_new),
            "instance {i}: {r:?}"
        );
        let c = SetCounts::of(&grids[0], &grids[1], &grids[2]).map_err(|e| e.to_string())?;
        ensure!(c.hit == c.hit_visited + c.hit_unvisited && c.hit == hit_vis + hit_new, "decomposition at {i}");
    }
    Ok("1000 random 8x8 triples exact".into())
}

// ---------------------------------------------------------------- 4

fn lcg_inputs(b: usize, g: usize, k: usize, seed: u64) -> ModelInputs {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ModelInputs {
        v_pre: Tensor::new(&[b, 1, g, g], (0..b * g * g).map(|_| f32::from(u8::from(rng.random_bool(0.15)))).collect()).unwrap(),
        sc: Tensor::new(&[b, k, g, g], (0..b * k * g * g).map(|_| rng.random::<f32>()).collect()).unwrap(),
        sir: Tensor::new(&[b, k], (0..b * k).map(|_| rng.random::<f32>()).collect()).unwrap(),
    }
}

fn model(variant: Variant, g: usize, k: usize, seed: u64) -> CUNetModel {
    CUNetModel::build(CUNetConfig {
        base_channels: 8,
        seed,
        ..CUNetConfig::new(g, k, variant)
    })
    .unwrap()
}

fn conditioning_contracts() -> Outcome {
    let base = model(Variant::Baseline, 32, 4, 1);
    let a = lcg_inputs(2, 32, 4, 1);
    let mut b = lcg_inputs(2, 32, 4, 2);
    b.v_pre = a.v_pre.clone();
    let (pa, pb) = (base.predict(&a).map_err(|e| e.to_string())?, base.predict(&b).map_err(|e| e.to_string())?);
    ensure!(pa.data().iter().zip(pb.data()).all(|(x, y)| x.to_bits() == y.to_bits()), "Baseline reacts to SC/SIR");

    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let f = random_tensor(&[3, 5, 4, 4], -2.0, 2.0, &mut rng).cast::<f32>();
    let mut tape = Tape::<f32>::new();
    let fv = tape.constant(f.clone());
    let z = tape.constant(Tensor::zeros(&[3, 5]));
    let out = tape.film_modulate(fv, z, z).map_err(|e| e.to_string())?;
    ensure!(tape.value(out).data().iter().zip(f.data()).all(|(x, y)| x.to_bits() == y.to_bits()), "zero modulation changes features");

    let full = model(Variant::Full, 32, 4, 2);
    let pairs = full.modulation_params(&a.sir).map_err(|e| e.to_string())?;
    ensure!(pairs.len() == 9, "{} modulated blocks", pairs.len());
    ensure!(pairs.iter().all(|(g, b)| g.data().iter().chain(b.data()).all(|&v| v == 0.0)), "fresh projections are not zero");

    for g in [16, 32, 100] {
        for v in [Variant::Baseline, Variant::Full] {
            let out = model(v, g, 4, 3).predict(&lcg_inputs(1, g, 4, g as u64)).map_err(|e| e.to_string())?;
            ensure!(out.shape() == [1, 1, g, g], "{v} shape {:?} at g={g}", out.shape());
            ensure!(out.data().iter().all(|&p| p > 0.0 && p < 1.0), "{v} output leaves (0,1) at g={g}");
        }
    }
    Ok("baseline blind, identity modulation, zero projections, shapes for g in {16,32,100}".into())
}

// ---------------------------------------------------------------- 5

fn plateau_trace(losses: &[f64], lr0: f64, factor: f64, patience: usize, min_lr: f64) -> Vec<f64> {
    let (mut lr, mut best, mut bad) = (lr0, f64::INFINITY, 0);
    losses
        .iter()
        .map(|&l| {
            if best - l >= 1e-6 {
                best = l;
                bad = 0;
            } else {
                bad += 1;
                if bad == patience {
                    lr = (lr * factor).max(min_lr);
                    bad = 0;
                }
            }
            lr
        })
        .collect()
}

fn clipping_and_schedule() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut worst = f64::NEG_INFINITY;
    for _ in 0..500 {
        let clip = rng.random_range(0.01..5.0);
        let boost = 10f64.powf(rng.random_range(0.0..6.0));
        let mut grads: Vec<Tensor<f64>> = (0..rng.random_range(1..6))
            .map(|_| {
                let n = rng.random_range(1..40);
                Tensor::new(&[n], (0..n).map(|_| rng.random_range(-1.0..1.0) * boost).collect()).unwrap()
            })
            .collect();
        clip_gradients(&mut grads, clip);
        let after = global_norm(&grads);
        ensure!(after <= clip + 1e-9, "norm {after} above {clip}");
        worst = worst.max(after - clip);
    }
    let scripted: [&[f64]; 4] = [
        &[1.0, 0.9, 0.89999995, 0.8999999, 0.9],
        &[1.0, 1.0, 1.0, 1.0, 0.5, 0.5, 0.5, 0.5],
        &[0.5, 0.4, 0.3, 0.3, 0.3, 0.3, 0.3, 0.3, 0.3, 0.3, 0.3, 0.3],
        &[1.0, 0.9999995, 0.999999, 0.9999989, 0.999998, 0.9],
    ];
    for seq in scripted {
        let mut s = PlateauScheduler::new(1e-3, 0.5, 3, 1.25e-4);
        let got: Vec<f64> = seq.iter().map(|&l| s.step(l)).collect();
        let want = plateau_trace(seq, 1e-3, 0.5, 3, 1.25e-4);
        ensure!(got == want, "lr {got:?}, expected {want:?}");
    }
    let mut s = PlateauScheduler::new(1e-3, 0.5, 3, 1e-5);
    let got: Vec<f64> = [1.0, 0.9, 0.89999995, 0.8999999, 0.9].iter().map(|&l| s.step(l)).collect();
    ensure!(got == [1e-3, 1e-3, 1e-3, 1e-3, 5e-4], "sub-tolerance improvements counted: {got:?}");
    Ok(format!("max post-clip excess {worst:.1e}, 5 scripted schedules match"))
}

// ---------------------------------------------------------------- 6, 7

const LEARN_EPOCHS: usize = 10;
const LEARN_SEEDS: [u64; 3] = [0, 1, 2];

struct Trained {
    full: CUNetModel,
    baseline: CUNetModel,
    test: Vec<IndividualSample>,
    disrupted: usize,
}

fn default_world() -> (SynthConfig, SynthDataset, StudyData) {
    let cfg = SynthConfig::default();
    let ds = generate_dataset(&cfg).unwrap();
    let recs: Vec<_> = ds.records().copied().collect();
    let built = build_samples(&recs, &ds.world.table, &cfg.ingest_config(32)).unwrap();
    let data = partition(built.samples, &ds.splits);
    (cfg, ds, data)
}

fn learnability(keep: &mut Option<Trained>) -> Outcome {
    let (cfg, _ds, data) = default_world();
    let mut gaps = Vec::new();
    let mut slowest = Duration::ZERO;
    for seed in LEARN_SEEDS {
        let train = TrainConfig {
            max_epochs: LEARN_EPOCHS,
            seed,
            ..TrainConfig::default()
        };
        let mut run = |variant| -> Result<(CUNetModel, f64), String> {
            let start = Instant::now();
            let out = fit(model(variant, 32, cfg.k, seed), &data.train, &data.val, &train).map_err(|e| e.to_string())?;
            let best = out.best.model().map_err(|e| e.to_string())?;
            let report = evaluate_model(&best, &data.test, train.binarize_threshold, 64).map_err(|e| e.to_string())?;
            slowest = slowest.max(start.elapsed());
            let u = report.unvisited.ok_or("no unvisited cells in test split")?;
            eprintln!("  seed {seed} {}: overall {:?} visited {:?} unvisited {u:.4}", variant.label(), report.overall, report.visited);
            Ok((best, u))
        };
        let (full, uf) = run(Variant::Full)?;
        let (baseline, ub) = run(Variant::Baseline)?;
        gaps.push(uf - ub);
        if keep.is_none() {
            *keep = Some(Trained {
                full,
                baseline,
                test: data.test.clone(),
                disrupted: cfg.disrupted_category,
            });
        }
    }
    let mean = gaps.iter().sum::<f64>() / gaps.len() as f64;
    let detail = format!(
        "unvisited gap Full-Baseline {mean:.4} (per seed {:?}), {LEARN_EPOCHS} epochs, slowest run {:.0}s",
        gaps.iter().map(|g| format!("{g:.4}")).collect::<Vec<_>>(),
        slowest.as_secs_f64()
    );
    ensure!(slowest < Duration::from_secs(1800), "{detail}");
    ensure!(mean >= 0.05, "{detail}; need >= 0.05");
    Ok(detail)
}

fn pair_study(trained: &Option<Trained>) -> Outcome {
    let t = trained.as_ref().ok_or("criterion 6 produced no models")?;
    let base = t.test.iter().find(|s| s.v_pre.count_ones() > 0).ok_or("no test sample with history")?;
    let k = base.k();
    let mut reliant = base.clone();
    let mut other = base.clone();
    reliant.user_id = 1_000_000;
    other.user_id = 1_000_001;
    reliant.sir.values = (0..k).map(|c| f64::from(u8::from(c == t.disrupted))).collect();
    other.sir.values = (0..k).map(|c| f64::from(u8::from(c == (t.disrupted + 1) % k))).collect();
    let cos = cosine_similarity(&reliant.sir.values, &other.sir.values).map_err(|e| e.to_string())?;
    ensure!(cos == 0.0, "reliance vectors not orthogonal");
    let full = pair_divergence(&t.full, &reliant, &other).map_err(|e| e.to_string())?;
    let baseline = pair_divergence(&t.baseline, &reliant, &other).map_err(|e| e.to_string())?;
    let detail = format!("Full mean |diff| {:.4}, Baseline {}", full.map_l1_mean, baseline.map_l1_mean);
    ensure!(baseline.map_l1_mean == 0.0, "{detail}");
    ensure!(full.map_l1_mean >= 0.01, "{detail}; need >= 0.01");
    Ok(detail)
}

// ---------------------------------------------------------------- 8

fn harness_structure() -> Outcome {
    let small = SynthConfig {
        world_m: 40,
        world_n: 40,
        n_individuals: 110,
        pre_days: 6,
        post_days: 2,
        seed: 8,
        ..SynthConfig::default()
    };
    let one = TrainConfig {
        max_epochs: 1,
        batch_size: 16,
        ..TrainConfig::default()
    };
    let ds = generate_dataset(&small).unwrap();
    let recs: Vec<_> = ds.records().copied().collect();
    let built = build_samples(&recs, &ds.world.table, &small.ingest_config(16)).map_err(|e| e.to_string())?;
    let data = partition(built.samples, &ds.splits);
    let base = CUNetConfig {
        base_channels: 8,
        ..CUNetConfig::new(16, small.k, Variant::Baseline)
    };
    let rows = ablation_harness(&data, &base, &one, &Variant::ALL, |_, _| Ok(())).map_err(|e| e.to_string())?;
    let labelled: Vec<(String, MetricsReport)> = rows.iter().map(|r| (r.variant.label().to_string(), r.report)).collect();
    let csv = metrics_csv("variant", &labelled);
    let names: Vec<&str> = csv.lines().skip(1).map(|l| l.split(',').next().unwrap_or("")).collect();
    let want = ["Baseline", "+Spatial", "+Spatial+SIR (Concat)", "+Spatial+SIR (Modulation)", "Full Model"];
    ensure!(names == want, "ablation rows {names:?}");

    let wide = SynthConfig {
        world_m: 150,
        world_n: 150,
        n_individuals: 44,
        pre_days: 6,
        post_days: 2,
        seed: 9,
        ..SynthConfig::default()
    };
    let ds = generate_dataset(&wide).unwrap();
    let recs: Vec<_> = ds.records().copied().collect();
    let sizes = [50, 100, 150];
    let model_cfg = CUNetConfig {
        base_channels: 8,
        ..CUNetConfig::new(50, wide.k, Variant::Baseline)
    };
    let sens = crop_sensitivity_harness(&recs, &ds.world.table, &wide.ingest_config(50), &ds.splits, &sizes, &model_cfg, &one, |_, _| Ok(()))
        .map_err(|e| e.to_string())?;
    let got: Vec<usize> = sens.iter().map(|r| r.g).collect();
    ensure!(got == sizes, "sensitivity rows {got:?}");

    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut total = 0;
    for set in 0..5 {
        let samples: Vec<IndividualSample> = data.train.iter().take(100).cloned().map(|mut s| {
            for v in &mut s.sir.values {
                *v = rng.random_range(0.0..1.0);
            }
            s
        }).collect();
        ensure!(samples.len() == 100, "only {} samples", samples.len());
        let found = find_similar_pairs(&samples, DEFAULT_PRE_SIM_MIN, DEFAULT_SIR_SIM_MAX);
        let oracle = exhaustive_pairs(&samples, DEFAULT_PRE_SIM_MIN, DEFAULT_SIR_SIM_MAX);
        let found: BTreeSet<(u64, u64)> = found.iter().map(|p| (p.uid_a, p.uid_b)).collect();
        ensure!(found == oracle, "set {set}: {} pairs vs {} in oracle", found.len(), oracle.len());
        total += oracle.len();
    }
    Ok(format!("5 ablation rows in order, sizes {sizes:?}, {total} pairs matched over 5 sets of 100"))
}

fn cos(a: &[f64], b: &[f64]) -> Option<f64> {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let (na, nb) = (a.iter().map(|x| x * x).sum::<f64>(), b.iter().map(|x| x * x).sum::<f64>());
    (na > 0.0 && nb > 0.0).then(|| dot / (na.sqrt() * nb.sqrt()))
}

fn exhaustive_pairs(samples: &[IndividualSample], pre_min: f64, sir_max: f64) -> BTreeSet<(u64, u64)> {
    let pre = |s: &IndividualSample| s.v_pre.bitmap.iter().map(|&b| f64::from(b)).collect::<Vec<_>>();
    let mut out = BTreeSet::new();
    for a in samples {
        for b in samples {
            if a.user_id >= b.user_id {
                continue;
            }
            let (Some(p), Some(s)) = (cos(&pre(a), &pre(b)), cos(&a.sir.values, &b.sir.values)) else { continue };
            if p > pre_min && s < sir_max {
                out.insert((a.user_id, b.user_id));
            }
        }
    }
    out
}

// ---------------------------------------------------------------- 9

fn dir_bytes(dir: &std::path::Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(dir).unwrap().display().to_string(), std::fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

fn determinism() -> Outcome {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let root = tmp.path();
    let cfg = SynthConfig {
        world_m: 40,
        world_n: 40,
        n_individuals: 44,
        pre_days: 6,
        post_days: 2,
        seed: 12,
        ..SynthConfig::default()
    };
    for run in ["a", "b"] {
        let ds = generate_dataset(&cfg).map_err(|e| e.to_string())?;
        ds.write(&root.join(run).join("raw")).map_err(|e| e.to_string())?;
        let recs: Vec<_> = ds.records().copied().collect();
        let built = build_samples(&recs, &ds.world.table, &cfg.ingest_config(16)).map_err(|e| e.to_string())?;
        let data = partition(built.samples, &ds.splits);
        write_split(&root.join(run).join("train"), &data.train, 16, cfg.k).map_err(|e| e.to_string())?;
        write_split(&root.join(run).join("val"), &data.val, 16, cfg.k).map_err(|e| e.to_string())?;
        let (_, train) = read_split(&root.join(run).join("train")).map_err(|e| e.to_string())?;
        let (_, val) = read_split(&root.join(run).join("val")).map_err(|e| e.to_string())?;
        let tc = TrainConfig {
            max_epochs: 2,
            batch_size: 8,
            seed: 3,
            ..TrainConfig::default()
        };
        let out = fit(model(Variant::Full, 16, cfg.k, 3), &train, &val, &tc).map_err(|e| e.to_string())?;
        out.best.save(&root.join(run).join("run/checkpoint")).map_err(|e| e.to_string())?;
        write_epoch_log(&root.join(run).join("run/epochs.csv"), &out.log).map_err(|e| e.to_string())?;
    }
    let (a, b) = (dir_bytes(&root.join("a")), dir_bytes(&root.join("b")));
    ensure!(a.len() == b.len(), "file sets differ");
    for ((na, ba), (nb, bb)) in a.iter().zip(&b) {
        ensure!(na == nb && ba == bb, "{na} differs between reruns");
    }

    let (_, train) = read_split(&root.join("a/train")).map_err(|e| e.to_string())?;
    let ckpt = Checkpoint::load(&root.join("a/run/checkpoint")).map_err(|e| e.to_string())?;
    let refs: Vec<&IndividualSample> = train.iter().take(8).collect();
    let inputs = ModelInputs::from_samples(&refs).map_err(|e| e.to_string())?;
    let target = targets(&refs).map_err(|e| e.to_string())?;
    let mut original = Trainer::from_checkpoint(&ckpt).map_err(|e| e.to_string())?;
    original.checkpoint().save(&root.join("resave")).map_err(|e| e.to_string())?;
    let mut resumed = Trainer::from_checkpoint(&Checkpoint::load(&root.join("resave")).map_err(|e| e.to_string())?).map_err(|e| e.to_string())?;
    let sa = original.train_step(&inputs, &target).map_err(|e| e.to_string())?;
    let sb = resumed.train_step(&inputs, &target).map_err(|e| e.to_string())?;
    ensure!(sa == sb, "step stats differ after resume");
    let (ba, bb) = (original.checkpoint().to_bytes().map_err(|e| e.to_string())?, resumed.checkpoint().to_bytes().map_err(|e| e.to_string())?);
    ensure!(ba == bb, "state differs after one resumed step");
    Ok(format!("{} files byte-identical across reruns, resumed step bit-exact", a.len()))
}

// ---------------------------------------------------------------- 10

fn ingest_oracles() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let mut worlds = 0;
    for _ in 0..500 {
        let (m, n, k) = (rng.random_range(1..=8u32), rng.random_range(1..=8u32), rng.random_range(1..=6usize));
        let entries: Vec<PoiEntry> = (0..rng.random_range(0..30))
            .map(|_| PoiEntry {
                x: rng.random_range(0..m),
                y: rng.random_range(0..n),
                category: rng.random_range(0..k as u32),
                count: rng.random_range(1..6),
            })
            .collect();
        let records: Vec<TrajectoryRecord> = (0..rng.random_range(0..50))
            .map(|_| TrajectoryRecord {
                user_id: 7,
                day: rng.random_range(0..3),
                timeslot: rng.random_range(0..48),
                x: rng.random_range(0..m),
                y: rng.random_range(0..n),
            })
            .collect();
        let table = PoiTable::from_entries(k, entries.iter().copied());
        let props = |x: u32, y: u32| -> Option<Vec<f64>> {
            let mut c = vec![0u64; k];
            for e in entries.iter().filter(|e| e.x == x && e.y == y) {
                c[e.category as usize] += u64::from(e.count);
            }
            let total: u64 = c.iter().sum();
            (total > 0).then(|| c.iter().map(|&v| v as f64 / total as f64).collect())
        };

        let mut acc = vec![0.0f64; k];
        for r in &records {
            if let Some(p) = props(r.x, r.y) {
                acc.iter_mut().zip(&p).for_each(|(a, v)| *a += v);
            }
        }
        let s: f64 = acc.iter().sum();
        if s > 0.0 {
            acc.iter_mut().for_each(|a| *a /= s);
        }
        let sir = compute_sir(7, &records, &table);
        ensure!(sir.values == acc, "sir {:?} vs {acc:?}", sir.values);
        let total: f64 = sir.values.iter().sum();
        ensure!(total == 0.0 || (total - 1.0).abs() < 1e-9, "sir sums to {total}");

        let g = rng.random_range(1..=m.min(n) as usize);
        let anchor = HomeAnchor {
            user_id: 7,
            center_x: rng.random_range(0..m),
            center_y: rng.random_range(0..n),
        };
        let crop = crop_window(&anchor, g, (m as usize, n as usize)).map_err(|e| e.to_string())?;
        let sc = compute_spatial_context(7, &table, crop);
        for i in 0..g {
            for j in 0..g {
                let want = props(crop.x0 + i as u32, crop.y0 + j as u32).unwrap_or_else(|| vec![0.0; k]);
                let cell = sc.cell(i, j);
                ensure!(cell == want, "sc cell ({i},{j})");
                let t: f64 = cell.iter().sum();
                ensure!(t == 0.0 || (t - 1.0).abs() < 1e-9, "sc cell sums to {t}");
                ensure!(cell.iter().all(|&v| (0.0..=1.0).contains(&v)), "sc out of range");
            }
        }
        worlds += 1;
    }
    Ok(format!("{worlds} random worlds exact"))
}

// ----------------------------------------------------------------

fn run(id: usize, name: &str, f: impl FnOnce() -> Outcome) -> bool {
    let start = Instant::now();
    let result = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
        Err(p.downcast_ref::<String>().cloned().or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string())).unwrap_or_else(|| "panicked".into()))
    });
    let secs = start.elapsed().as_secs_f64();
    match result {
        Ok(detail) => {
            println!("criterion {id:>2} PASS  {name}: {detail} [{secs:.1}s]");
            true
        }
        Err(detail) => {
            println!("criterion {id:>2} FAIL  {name}: {detail} [{secs:.1}s]");
            false
        }
    }
}

fn main() -> ExitCode {
    rayon::ThreadPoolBuilder::new().num_threads(1).build_global().ok();
    let mut trained = None;
    let results = [
        run(1, "gradient suite", gradient_suite),
        run(2, "loss weighting", loss_weighting),
        run(3, "metrics oracle", metrics_oracle),
        run(4, "conditioning contracts", conditioning_contracts),
        run(5, "clipping and scheduling", clipping_and_schedule),
        run(6, "synthetic learnability", || learnability(&mut trained)),
        run(7, "pair divergence", || pair_study(&trained)),
        run(8, "harness structure", harness_structure),
        run(9, "determinism and persistence", determinism),
        run(10, "ingest oracles", ingest_oracles),
    ];
    let passed = results.iter().filter(|&&r| r).count();
    println!("acceptance: {passed}/{} criteria passed", results.len());
    if passed == results.len() {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
