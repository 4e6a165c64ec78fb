//! Elementwise, affine, reshaping, pooling and loss operators.

use super::conv::{matmul_at_into, matmul_bt_into, matmul_into};
use super::tape::{Tape, Var};
use super::tensor::{Real, Tensor};
use super::AutodiffError;

/// Probability clamp applied before the logarithms in BCE.
pub const BCE_EPS: f64 = 1e-7;

fn clamp_nan<T: Real>(v: T, lo: T, hi: T) -> T {
    if v < lo {
        lo
    } else if v > hi {
        hi
    } else {
        v
    }
}

fn mismatch(msg: String) -> AutodiffError {
    AutodiffError::ShapeMismatch(msg)
}

/// Half-open source range of adaptive pooling bin `i` out of `out` bins.
pub(crate) fn pool_bin(i: usize, input: usize, out: usize) -> (usize, usize) {
    let start = i * input / out;
    let end = ((i + 1) * input).div_ceil(out);
    (start, end)
}

impl<T: Real> Tape<T> {
    pub fn relu(&mut self, input: Var) -> Var {
        let value = self
            .value(input)
            .map(|v| if v < T::zero() { T::zero() } else { v });
        self.record(value, &[input], move |g, nodes| {
            let x = nodes[input.0].value.data();
            let dx = g
                .data()
                .iter()
                .zip(x)
                .map(|(&g, &x)| if x > T::zero() { g } else { T::zero() })
                .collect();
            vec![(input, Tensor::new(g.shape(), dx).unwrap())]
        })
    }

    pub fn sigmoid(&mut self, input: Var) -> Var {
        let value = self
            .value(input)
            .map(|v| T::one() / (T::one() + (-v).exp()));
        let out = Var(self.len());
        self.record(value, &[input], move |g, nodes| {
            let y = nodes[out.0].value.data();
            let dx = g
                .data()
                .iter()
                .zip(y)
                .map(|(&g, &y)| g * y * (T::one() - y))
                .collect();
            vec![(input, Tensor::new(g.shape(), dx).unwrap())]
        })
    }

    /// Clamps into `[lo, hi]`; gradient passes only where the input is inside.
    /// NaN stays NaN.
    pub fn clamp(&mut self, input: Var, lo: T, hi: T) -> Var {
        let value = self.value(input).map(|v| clamp_nan(v, lo, hi));
        self.record(value, &[input], move |g, nodes| {
            let x = nodes[input.0].value.data();
            let dx = g
                .data()
                .iter()
                .zip(x)
                .map(|(&g, &x)| if x < lo || x > hi { T::zero() } else { g })
                .collect();
            vec![(input, Tensor::new(g.shape(), dx).unwrap())]
        })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        let (x, y) = (self.value(a), self.value(b));
        if x.shape() != y.shape() {
            return Err(mismatch(format!("add {:?} vs {:?}", x.shape(), y.shape())));
        }
        let mut value = x.clone();
        value.add_assign(y);
        Ok(self.record(value, &[a, b], move |g, _| {
            vec![(a, g.clone()), (b, g.clone())]
        }))
    }

    /// Free reshape; element order is unchanged.
    pub fn reshape(&mut self, input: Var, shape: &[usize]) -> Result<Var, AutodiffError> {
        let src_shape = self.value(input).shape().to_vec();
        let value = self.value(input).clone().reshape(shape)?;
        Ok(self.record(value, &[input], move |g, _| {
            vec![(input, g.clone().reshape(&src_shape).unwrap())]
        }))
    }

    /// Affine map over the last axis: `x·Wᵀ + b` with `weight[F_out, F_in]`.
    /// Leading axes are treated as batch.
    pub fn linear(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var, AutodiffError> {
        let x = self.value(input);
        let w = self.value(weight);
        let (fout, fin) = match w.shape() {
            &[o, i] => (o, i),
            s => return Err(mismatch(format!("linear weight must be rank 2, got {s:?}"))),
        };
        if x.rank() < 2 || *x.shape().last().unwrap() != fin {
            return Err(mismatch(format!(
                "linear input {:?} incompatible with weight {:?}",
                x.shape(),
                w.shape()
            )));
        }
        if self.value(bias).shape() != [fout] {
            return Err(mismatch(format!("linear bias must be [{fout}]")));
        }
        let rows = x.len() / fin;
        let mut out = Vec::with_capacity(rows * fout);
        let bvals = self.value(bias).data();
        for _ in 0..rows {
            out.extend_from_slice(bvals);
        }
        matmul_bt_into(rows, fin, fout, x.data(), w.data(), &mut out, true);
        let mut shape = x.shape().to_vec();
        *shape.last_mut().unwrap() = fout;
        let value = Tensor::new(&shape, out)?;
        Ok(self.record(value, &[input, weight, bias], move |g, nodes| {
            let x = &nodes[input.0].value;
            let w = &nodes[weight.0].value;
            let gd = g.data();
            let mut dx = vec![T::zero(); x.len()];
            matmul_into(rows, fout, fin, gd, w.data(), &mut dx, false);
            let mut dw = vec![T::zero(); w.len()];
            matmul_at_into(fout, rows, fin, gd, x.data(), &mut dw, false);
            let mut db = vec![T::zero(); fout];
            for row in gd.chunks(fout) {
                for (acc, &v) in db.iter_mut().zip(row) {
                    *acc += v;
                }
            }
            vec![
                (input, Tensor::new(x.shape(), dx).unwrap()),
                (weight, Tensor::new(w.shape(), dw).unwrap()),
                (bias, Tensor::new(&[fout], db).unwrap()),
            ]
        }))
    }

    /// Channel concatenation of `[B,C1,H,W]` and `[B,C2,H,W]`.
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        let (ba, ca, ha, wa) = self.value(a).dims4()?;
        let (bb, cb, hb, wb) = self.value(b).dims4()?;
        if (ba, ha, wa) != (bb, hb, wb) {
            return Err(mismatch(format!(
                "concat needs matching B,H,W: {:?} vs {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        let plane = ha * wa;
        let (sa, sb) = (ca * plane, cb * plane);
        let mut out = Vec::with_capacity(ba * (sa + sb));
        for i in 0..ba {
            out.extend_from_slice(&self.value(a).data()[i * sa..(i + 1) * sa]);
            out.extend_from_slice(&self.value(b).data()[i * sb..(i + 1) * sb]);
        }
        let value = Tensor::new(&[ba, ca + cb, ha, wa], out)?;
        Ok(self.record(value, &[a, b], move |g, _| {
            let gd = g.data();
            let mut ga = Vec::with_capacity(ba * sa);
            let mut gb = Vec::with_capacity(ba * sb);
            for i in 0..ba {
                let row = &gd[i * (sa + sb)..(i + 1) * (sa + sb)];
                ga.extend_from_slice(&row[..sa]);
                gb.extend_from_slice(&row[sa..]);
            }
            vec![
                (a, Tensor::new(&[ba, ca, ha, wa], ga).unwrap()),
                (b, Tensor::new(&[bb, cb, hb, wb], gb).unwrap()),
            ]
        }))
    }

    /// Broadcasts `v[B,K]` to `[B,K,h,w]`.
    pub fn tile_vector_to_map(&mut self, v: Var, h: usize, w: usize) -> Result<Var, AutodiffError> {
        let (b, k) = match self.value(v).shape() {
            &[b, k] => (b, k),
            s => return Err(mismatch(format!("tile expects [B,K], got {s:?}"))),
        };
        let plane = h * w;
        let mut out = Vec::with_capacity(b * k * plane);
        for &x in self.value(v).data() {
            out.extend(std::iter::repeat_n(x, plane));
        }
        let value = Tensor::new(&[b, k, h, w], out)?;
        Ok(self.record(value, &[v], move |g, _| {
            let dv = g.data().chunks(plane).map(|c| c.iter().copied().sum()).collect();
            vec![(v, Tensor::new(&[b, k], dv).unwrap())]
        }))
    }

    /// Feature-wise affine modulation `f·(1+γ) + β`, with `γ, β` of shape
    /// `[B,C]` broadcast over the spatial axes of `f[B,C,H,W]`.
    pub fn film_modulate(&mut self, f: Var, gamma: Var, beta: Var) -> Result<Var, AutodiffError> {
        let (b, c, h, w) = self.value(f).dims4()?;
        for p in [gamma, beta] {
            if self.value(p).shape() != [b, c] {
                return Err(mismatch(format!(
                    "modulation parameters {:?}, expected [{b}, {c}]",
                    self.value(p).shape()
                )));
            }
        }
        let plane = h * w;
        let fd = self.value(f).data();
        let gd = self.value(gamma).data();
        let bd = self.value(beta).data();
        let mut out = Vec::with_capacity(fd.len());
        for (idx, chunk) in fd.chunks(plane).enumerate() {
            let scale = T::one() + gd[idx];
            let shift = bd[idx];
            out.extend(chunk.iter().map(|&x| x * scale + shift));
        }
        let value = Tensor::new(&[b, c, h, w], out)?;
        Ok(self.record(value, &[f, gamma, beta], move |g, nodes| {
            let fd = nodes[f.0].value.data();
            let gam = nodes[gamma.0].value.data();
            let gd = g.data();
            let mut df = Vec::with_capacity(gd.len());
            let mut dgamma = vec![T::zero(); b * c];
            let mut dbeta = vec![T::zero(); b * c];
            for idx in 0..b * c {
                let gs = &gd[idx * plane..(idx + 1) * plane];
                let xs = &fd[idx * plane..(idx + 1) * plane];
                let scale = T::one() + gam[idx];
                df.extend(gs.iter().map(|&v| v * scale));
                dgamma[idx] = gs.iter().zip(xs).map(|(&a, &x)| a * x).sum();
                dbeta[idx] = gs.iter().copied().sum();
            }
            vec![
                (f, Tensor::new(&[b, c, h, w], df).unwrap()),
                (gamma, Tensor::new(&[b, c], dgamma).unwrap()),
                (beta, Tensor::new(&[b, c], dbeta).unwrap()),
            ]
        }))
    }

    /// Columns `[start, start+len)` of a rank-2 tensor.
    pub fn narrow_columns(&mut self, input: Var, start: usize, len: usize) -> Result<Var, AutodiffError> {
        let (rows, cols) = match self.value(input).shape() {
            &[r, c] => (r, c),
            s => return Err(mismatch(format!("narrow expects rank 2, got {s:?}"))),
        };
        if len == 0 || start + len > cols {
            return Err(mismatch(format!("columns {start}..{} out of {cols}", start + len)));
        }
        let out: Vec<T> = self
            .value(input)
            .data()
            .chunks(cols)
            .flat_map(|row| row[start..start + len].iter().copied())
            .collect();
        let value = Tensor::new(&[rows, len], out)?;
        Ok(self.record(value, &[input], move |g, _| {
            let mut dx = vec![T::zero(); rows * cols];
            for (r, chunk) in g.data().chunks(len).enumerate() {
                dx[r * cols + start..r * cols + start + len].copy_from_slice(chunk);
            }
            vec![(input, Tensor::new(&[rows, cols], dx).unwrap())]
        }))
    }

    /// `[B,C,H,W]` feature map to `[B,H·W,C]` token sequence.
    pub fn to_tokens(&mut self, input: Var) -> Result<Var, AutodiffError> {
        let (b, c, h, w) = self.value(input).dims4()?;
        let value = Tensor::new(&[b, h * w, c], transpose_blocks(self.value(input).data(), b, c, h * w))?;
        Ok(self.record(value, &[input], move |g, _| {
            let dx = transpose_blocks(g.data(), b, h * w, c);
            vec![(input, Tensor::new(&[b, c, h, w], dx).unwrap())]
        }))
    }

    /// Inverse of [`Tape::to_tokens`].
    pub fn from_tokens(&mut self, input: Var, h: usize, w: usize) -> Result<Var, AutodiffError> {
        let (b, t, c) = match self.value(input).shape() {
            &[b, t, c] => (b, t, c),
            s => return Err(mismatch(format!("tokens must be rank 3, got {s:?}"))),
        };
        if t != h * w {
            return Err(mismatch(format!("{t} tokens cannot fill {h}x{w}")));
        }
        let value = Tensor::new(&[b, c, h, w], transpose_blocks(self.value(input).data(), b, t, c))?;
        Ok(self.record(value, &[input], move |g, _| {
            let dx = transpose_blocks(g.data(), b, c, t);
            vec![(input, Tensor::new(&[b, t, c], dx).unwrap())]
        }))
    }

    /// Zero-pads the spatial axes at the bottom/right to `(h, w)`.
    pub fn pad_spatial(&mut self, input: Var, h: usize, w: usize) -> Result<Var, AutodiffError> {
        let (b, c, ih, iw) = self.value(input).dims4()?;
        if h < ih || w < iw {
            return Err(mismatch(format!("cannot pad {ih}x{iw} down to {h}x{w}")));
        }
        if (h, w) == (ih, iw) {
            return Ok(input);
        }
        let src = self.value(input).data();
        let mut out = vec![T::zero(); b * c * h * w];
        for p in 0..b * c {
            for y in 0..ih {
                let s = (p * ih + y) * iw;
                let d = (p * h + y) * w;
                out[d..d + iw].copy_from_slice(&src[s..s + iw]);
            }
        }
        let value = Tensor::new(&[b, c, h, w], out)?;
        Ok(self.record(value, &[input], move |g, _| {
            vec![(input, crop_planes(g.data(), b * c, h, w, ih, iw, &[b, c, ih, iw]))]
        }))
    }

    /// Keeps the top-left `(h, w)` window of the spatial axes.
    pub fn crop_spatial(&mut self, input: Var, h: usize, w: usize) -> Result<Var, AutodiffError> {
        let (b, c, ih, iw) = self.value(input).dims4()?;
        if h > ih || w > iw || h == 0 || w == 0 {
            return Err(mismatch(format!("cannot crop {ih}x{iw} to {h}x{w}")));
        }
        if (h, w) == (ih, iw) {
            return Ok(input);
        }
        let value = crop_planes(self.value(input).data(), b * c, ih, iw, h, w, &[b, c, h, w]);
        Ok(self.record(value, &[input], move |g, _| {
            let gd = g.data();
            let mut dx = vec![T::zero(); b * c * ih * iw];
            for p in 0..b * c {
                for y in 0..h {
                    let s = (p * h + y) * w;
                    let d = (p * ih + y) * iw;
                    dx[d..d + w].copy_from_slice(&gd[s..s + w]);
                }
            }
            vec![(input, Tensor::new(&[b, c, ih, iw], dx).unwrap())]
        }))
    }

    /// Mean over near-equal spatial bins, producing `[B,C,out_h,out_w]`.
    pub fn adaptive_avg_pool(&mut self, input: Var, out_h: usize, out_w: usize) -> Result<Var, AutodiffError> {
        let (b, c, h, w) = self.value(input).dims4()?;
        if out_h == 0 || out_w == 0 || out_h > h || out_w > w {
            return Err(mismatch(format!("cannot pool {h}x{w} to {out_h}x{out_w}")));
        }
        let src = self.value(input).data();
        let mut out = Vec::with_capacity(b * c * out_h * out_w);
        for p in 0..b * c {
            let plane = &src[p * h * w..(p + 1) * h * w];
            for oy in 0..out_h {
                let (y0, y1) = pool_bin(oy, h, out_h);
                for ox in 0..out_w {
                    let (x0, x1) = pool_bin(ox, w, out_w);
                    let mut s = T::zero();
                    for y in y0..y1 {
                        s += plane[y * w + x0..y * w + x1].iter().copied().sum::<T>();
                    }
                    out.push(s / T::from_usize((y1 - y0) * (x1 - x0)).unwrap());
                }
            }
        }
        let value = Tensor::new(&[b, c, out_h, out_w], out)?;
        Ok(self.record(value, &[input], move |g, _| {
            let gd = g.data();
            let mut dx = vec![T::zero(); b * c * h * w];
            for p in 0..b * c {
                let plane = &mut dx[p * h * w..(p + 1) * h * w];
                for oy in 0..out_h {
                    let (y0, y1) = pool_bin(oy, h, out_h);
                    for ox in 0..out_w {
                        let (x0, x1) = pool_bin(ox, w, out_w);
                        let share = gd[(p * out_h + oy) * out_w + ox]
                            / T::from_usize((y1 - y0) * (x1 - x0)).unwrap();
                        for y in y0..y1 {
                            for v in &mut plane[y * w + x0..y * w + x1] {
                                *v += share;
                            }
                        }
                    }
                }
            }
            vec![(input, Tensor::new(&[b, c, h, w], dx).unwrap())]
        }))
    }

    /// Elementwise `−[t·ln p + (1−t)·ln(1−p)]` with `p` clamped to
    /// `[ε, 1−ε]`. Targets are not differentiated.
    pub fn bce_elementwise(&mut self, pred: Var, target: Var) -> Result<Var, AutodiffError> {
        let (p, t) = (self.value(pred), self.value(target));
        if p.shape() != t.shape() {
            return Err(mismatch(format!("bce {:?} vs {:?}", p.shape(), t.shape())));
        }
        let eps = T::from_f64_lossy(BCE_EPS);
        let hi = T::one() - eps;
        let out = p
            .data()
            .iter()
            .zip(t.data())
            .map(|(&p, &t)| {
                let pc = clamp_nan(p, eps, hi);
                -(t * pc.ln() + (T::one() - t) * (T::one() - pc).ln())
            })
            .collect();
        let value = Tensor::new(p.shape(), out)?;
        Ok(self.record(value, &[pred], move |g, nodes| {
            let p = nodes[pred.0].value.data();
            let t = nodes[target.0].value.data();
            let dp = g
                .data()
                .iter()
                .zip(p.iter().zip(t))
                .map(|(&g, (&p, &t))| {
                    if p < eps || p > hi {
                        T::zero()
                    } else {
                        g * (-t / p + (T::one() - t) / (T::one() - p))
                    }
                })
                .collect();
            vec![(pred, Tensor::new(g.shape(), dp).unwrap())]
        }))
    }

    /// `Σ_b weights[b] · mean(x[b, ...]) / B`: per-sample means combined
    /// with constant sample weights, averaged over the batch.
    pub fn weighted_sample_mean(&mut self, input: Var, weights: &[T]) -> Result<Var, AutodiffError> {
        let x = self.value(input);
        let b = x.shape()[0];
        if weights.len() != b {
            return Err(mismatch(format!("{} weights for batch of {b}", weights.len())));
        }
        let per = x.len() / b;
        let nb = T::from_usize(b).unwrap();
        let np = T::from_usize(per).unwrap();
        let total = x
            .data()
            .chunks(per)
            .zip(weights)
            .map(|(chunk, &w)| w * (chunk.iter().copied().sum::<T>() / np))
            .sum::<T>()
            / nb;
        let shape = x.shape().to_vec();
        let weights = weights.to_vec();
        Ok(self.record(Tensor::scalar(total), &[input], move |g, _| {
            let go = g.data()[0];
            let mut dx = Vec::with_capacity(b * per);
            for &w in &weights {
                let v = go * w / (np * nb);
                dx.extend(std::iter::repeat_n(v, per));
            }
            vec![(input, Tensor::new(&shape, dx).unwrap())]
        }))
    }

    /// Sum of `x ⊙ probe` for a constant probe tensor; used to scalarize
    /// outputs in gradient checks.
    pub fn dot_constant(&mut self, input: Var, probe: &Tensor<T>) -> Result<Var, AutodiffError> {
        let x = self.value(input);
        if x.shape() != probe.shape() {
            return Err(mismatch(format!("probe {:?} vs {:?}", probe.shape(), x.shape())));
        }
        let total = x.data().iter().zip(probe.data()).map(|(&a, &b)| a * b).sum::<T>();
        let probe = probe.clone();
        Ok(self.record(Tensor::scalar(total), &[input], move |g, _| {
            let mut d = probe.clone();
            d.scale(g.data()[0]);
            vec![(input, d)]
        }))
    }
}

/// Per-batch transpose of `rows × cols` blocks.
fn transpose_blocks<T: Real>(src: &[T], batch: usize, rows: usize, cols: usize) -> Vec<T> {
    let mut out = vec![T::zero(); src.len()];
    for b in 0..batch {
        let s = &src[b * rows * cols..(b + 1) * rows * cols];
        let d = &mut out[b * rows * cols..(b + 1) * rows * cols];
        for r in 0..rows {
            for c in 0..cols {
                d[c * rows + r] = s[r * cols + c];
            }
        }
    }
    out
}

fn crop_planes<T: Real>(
    src: &[T],
    planes: usize,
    ih: usize,
    iw: usize,
    h: usize,
    w: usize,
    shape: &[usize],
) -> Tensor<T> {
    let mut out = Vec::with_capacity(planes * h * w);
    for p in 0..planes {
        for y in 0..h {
            let s = (p * ih + y) * iw;
            out.extend_from_slice(&src[s..s + w]);
        }
    }
    Tensor::new(shape, out).unwrap()
}
