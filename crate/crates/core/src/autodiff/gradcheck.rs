//! Central finite-difference verification of analytic gradients (64-bit).

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::tape::{Tape, Var};
use super::tensor::Tensor;
use super::AutodiffError;

/// Relative gradient error of one input: `‖a − n‖₂ / max(‖a‖₂, ‖n‖₂)`,
/// zero when both gradients vanish.
#[derive(Clone, Debug)]
pub struct InputReport {
    pub rel_error: f64,
    pub max_abs_error: f64,
    pub analytic_norm: f64,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub inputs: Vec<InputReport>,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.inputs.iter().map(|r| r.rel_error).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.max_rel_error() < self.tolerance
    }
}

/// Compares the tape's gradients of `⟨op(inputs), probe⟩` with central
/// differences of step `h`, for a random probe drawn from `probe_seed`.
/// Only the inputs flagged in `differentiable` are checked; the rest enter
/// as constants.
pub fn grad_check<F>(
    op: F,
    inputs: &[Tensor<f64>],
    differentiable: &[bool],
    h: f64,
    tol: f64,
    probe_seed: u64,
) -> Result<GradCheckReport, AutodiffError>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var, AutodiffError>,
{
    assert_eq!(inputs.len(), differentiable.len());
    let build = |tape: &mut Tape<f64>, values: &[Tensor<f64>]| -> Vec<Var> {
        values
            .iter()
            .zip(differentiable)
            .map(|(v, &d)| if d { tape.leaf(v.clone()) } else { tape.constant(v.clone()) })
            .collect()
    };

    let mut tape = Tape::new();
    let vars = build(&mut tape, inputs);
    let out = op(&mut tape, &vars)?;
    let mut rng = ChaCha8Rng::seed_from_u64(probe_seed);
    let out_shape = tape.value(out).shape().to_vec();
    let n: usize = out_shape.iter().product();
    let probe = Tensor::new(&out_shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect())?;
    let loss = tape.dot_constant(out, &probe)?;
    tape.backward(loss);

    let evaluate = |values: &[Tensor<f64>]| -> Result<f64, AutodiffError> {
        let mut t = Tape::new();
        let vars = build(&mut t, values);
        let o = op(&mut t, &vars)?;
        Ok(t.value(o).dot(&probe))
    };

    let mut reports = Vec::new();
    let mut work = inputs.to_vec();
    for (i, input) in inputs.iter().enumerate() {
        if !differentiable[i] {
            continue;
        }
        let analytic = tape
            .grad(vars[i])
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(input.shape()));
        let mut diff_sq = 0.0;
        let mut num_sq = 0.0;
        let mut max_abs: f64 = 0.0;
        for j in 0..input.len() {
            let orig = input.data()[j];
            work[i].data_mut()[j] = orig + h;
            let plus = evaluate(&work)?;
            work[i].data_mut()[j] = orig - h;
            let minus = evaluate(&work)?;
            work[i].data_mut()[j] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            let a = analytic.data()[j];
            diff_sq += (a - numeric).powi(2);
            num_sq += numeric * numeric;
            max_abs = max_abs.max((a - numeric).abs());
        }
        let an = analytic.sq_norm().sqrt();
        let denom = an.max(num_sq.sqrt());
        reports.push(InputReport {
            rel_error: if denom == 0.0 { 0.0 } else { diff_sq.sqrt() / denom },
            max_abs_error: max_abs,
            analytic_norm: an,
        });
    }
    Ok(GradCheckReport {
        inputs: reports,
        tolerance: tol,
    })
}

/// Uniform random tensor in `[lo, hi)`.
pub fn random_tensor(shape: &[usize], lo: f64, hi: f64, rng: &mut impl Rng) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(lo..hi)).collect())
        .expect("random tensor shape")
}
