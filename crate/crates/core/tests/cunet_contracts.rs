use shiftgrid::autodiff::{Tape, Tensor};
use shiftgrid::cunet::{CUNetConfig, CUNetModel, ModelInputs, Variant};

fn cfg(variant: Variant, g: usize, k: usize) -> CUNetConfig {
    CUNetConfig {
        base_channels: 8,
        seed: 17,
        ..CUNetConfig::new(g, k, variant)
    }
}

fn lcg(state: &mut u64) -> f32 {
    *state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
    (*state >> 40) as f32 / (1u64 << 24) as f32
}

fn inputs(b: usize, g: usize, k: usize, seed: u64) -> ModelInputs {
    let mut s = seed;
    let v_pre = (0..b * g * g).map(|_| if lcg(&mut s) > 0.85 { 1.0 } else { 0.0 }).collect();
    let sc = (0..b * k * g * g).map(|_| lcg(&mut s)).collect();
    let sir = (0..b * k).map(|_| lcg(&mut s)).collect();
    ModelInputs {
        v_pre: Tensor::new(&[b, 1, g, g], v_pre).unwrap(),
        sc: Tensor::new(&[b, k, g, g], sc).unwrap(),
        sir: Tensor::new(&[b, k], sir).unwrap(),
    }
}

/// Hand-derived Baseline size: 3×3 conv blocks with bias and batch-norm
/// affine pairs, 2×2 transposed convs, 1×1 head.
fn baseline_count(b: usize) -> usize {
    let conv = |cin: usize, cout: usize, k: usize| cin * cout * k * k + cout;
    let block = |cin: usize, cout: usize| conv(cin, cout, 3) + 2 * cout;
    let c = [b, 2 * b, 4 * b, 8 * b];
    let bott = 16 * b;
    let mut n = conv(1, b, 3);
    n += block(b, c[0]) + block(c[0], c[1]) + block(c[1], c[2]) + block(c[2], c[3]);
    n += block(c[3], bott);
    let mut deeper = bott;
    for &cl in c.iter().rev() {
        n += deeper * cl * 4 + cl;
        n += block(2 * cl, cl);
        deeper = cl;
    }
    n + conv(b, 1, 1)
}

#[test]
fn baseline_parameter_count_matches_closed_form() {
    let m = CUNetModel::build(cfg(Variant::Baseline, 32, 4)).unwrap();
    assert_eq!(baseline_count(8), 241_249);
    assert_eq!(m.count_parameters(), baseline_count(8));
    let again = CUNetModel::build(cfg(Variant::Baseline, 32, 4)).unwrap();
    assert_eq!(again.count_parameters(), m.count_parameters());
}

#[test]
fn baseline_ignores_conditions() {
    let m = CUNetModel::build(cfg(Variant::Baseline, 32, 4)).unwrap();
    let a = inputs(2, 32, 4, 1);
    let mut b = inputs(2, 32, 4, 99);
    b.v_pre = a.v_pre.clone();
    assert_ne!(a.sc, b.sc);
    assert_eq!(m.predict(&a).unwrap(), m.predict(&b).unwrap());
}

#[test]
fn full_starts_as_concat_topology() {
    let full = CUNetModel::build(cfg(Variant::Full, 32, 4)).unwrap();
    let concat = CUNetModel::build(cfg(Variant::SpatialSirConcat, 32, 4)).unwrap();
    let x = inputs(2, 32, 4, 5);
    assert_eq!(full.predict(&x).unwrap(), concat.predict(&x).unwrap());
    let spatial = CUNetModel::build(cfg(Variant::Spatial, 32, 4)).unwrap();
    let modulation = CUNetModel::build(cfg(Variant::SpatialSirModulation, 32, 4)).unwrap();
    assert_eq!(spatial.predict(&x).unwrap(), modulation.predict(&x).unwrap());
}

#[test]
fn shape_and_range_over_grid_sizes() {
    for g in [16, 17, 32, 48, 100] {
        for v in [Variant::Baseline, Variant::Full] {
            let m = CUNetModel::build(cfg(v, g, 3)).unwrap();
            let out = m.predict(&inputs(1, g, 3, g as u64)).unwrap();
            assert_eq!(out.shape(), &[1, 1, g, g], "{v} g={g}");
            assert!(out.data().iter().all(|&p| p > 0.0 && p < 1.0), "{v} g={g}");
        }
    }
}

#[test]
fn perturbed_head_separates_reliance_profiles() {
    let mut m = CUNetModel::build(cfg(Variant::Full, 16, 4)).unwrap();
    let mut s = 3u64;
    for p in m.parameters_mut().iter_mut().filter(|p| p.name.starts_with("film.proj")) {
        for v in p.value.data_mut() {
            *v = lcg(&mut s) - 0.5;
        }
    }
    let sir = Tensor::new(&[2, 4], vec![1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0]).unwrap();
    let pairs = m.modulation_params(&sir).unwrap();
    for ((g, b), w) in pairs.iter().zip(m.config().modulation_widths()) {
        assert_eq!(g.shape(), &[2, w]);
        assert_ne!(g.data()[..w], g.data()[w..]);
        assert_ne!(b.data()[..w], b.data()[w..]);
    }
}

fn loss_and_grads(m: &mut CUNetModel, x: &ModelInputs, target: &Tensor<f32>) -> Vec<Tensor<f32>> {
    let mut tape = Tape::new();
    let fwd = m.forward_train(&mut tape, x).unwrap();
    let t = tape.constant(target.clone());
    let bce = tape.bce_elementwise(fwd.output, t).unwrap();
    let loss = tape.weighted_sample_mean(bce, &vec![1.0; x.batch()]).unwrap();
    tape.backward(loss);
    fwd.params
        .iter()
        .map(|&v| tape.grad(v).cloned().unwrap_or_else(|| Tensor::zeros(tape.value(v).shape())))
        .collect()
}

#[test]
fn gradient_reaches_every_parameter() {
    let mut m = CUNetModel::build(cfg(Variant::Full, 16, 4)).unwrap();
    let x = inputs(2, 16, 4, 11);
    let target = inputs(2, 16, 4, 12).v_pre;
    let grads = loss_and_grads(&mut m, &x, &target);
    for (p, g) in m.parameters().iter().zip(&grads) {
        let zero = g.data().iter().all(|&v| v == 0.0);
        // the MLP only sees gradient once the zero-initialized projections move
        assert_eq!(zero, p.name.starts_with("film.mlp"), "{}", p.name);
    }

    for (p, g) in m.parameters_mut().iter_mut().zip(&grads) {
        for (v, d) in p.value.data_mut().iter_mut().zip(g.data()) {
            *v -= 0.05 * d;
        }
    }
    let grads = loss_and_grads(&mut m, &x, &target);
    for (p, g) in m.parameters().iter().zip(&grads) {
        assert!(g.data().iter().any(|&v| v != 0.0), "{} still has no gradient", p.name);
    }
}

#[test]
fn modulation_responds_to_reliance_after_one_step() {
    let mut m = CUNetModel::build(cfg(Variant::SpatialSirModulation, 16, 4)).unwrap();
    let x = inputs(2, 16, 4, 21);
    let mut other = x.clone();
    other.sir = Tensor::new(&[2, 4], vec![0.0, 0.0, 0.0, 1.0, 0.0, 1.0, 0.0, 0.0]).unwrap();
    assert_eq!(m.predict(&x).unwrap(), m.predict(&other).unwrap());
    let target = inputs(2, 16, 4, 22).v_pre;
    let grads = loss_and_grads(&mut m, &x, &target);
    for (p, g) in m.parameters_mut().iter_mut().zip(&grads) {
        for (v, d) in p.value.data_mut().iter_mut().zip(g.data()) {
            *v -= 0.05 * d;
        }
    }
    assert_ne!(m.predict(&x).unwrap(), m.predict(&other).unwrap());
}
