//! 2-d convolution and transposed convolution via im2col + GEMM.

use super::tape::{Tape, Var};
use super::tensor::{Real, Tensor};
use super::AutodiffError;

/// Sliding-window geometry shared by im2col/col2im.
#[derive(Clone, Copy, Debug)]
struct Window {
    channels: usize,
    in_h: usize,
    in_w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    out_h: usize,
    out_w: usize,
}

impl Window {
    fn rows(&self) -> usize {
        self.channels * self.kh * self.kw
    }

    fn cols(&self) -> usize {
        self.out_h * self.out_w
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }
}

/// Unfolds `image` (`channels × in_h × in_w`) into `rows × cols`.
fn im2col<T: Real>(image: &[T], win: &Window, cols: &mut [T]) {
    let n_cols = win.cols();
    for c in 0..win.channels {
        let plane = &image[c * win.in_h * win.in_w..(c + 1) * win.in_h * win.in_w];
        for ki in 0..win.kh {
            for kj in 0..win.kw {
                let row = (c * win.kh + ki) * win.kw + kj;
                let dst = &mut cols[row * n_cols..(row + 1) * n_cols];
                for oy in 0..win.out_h {
                    let y = (oy * win.stride + ki) as isize - win.pad as isize;
                    let line = &mut dst[oy * win.out_w..(oy + 1) * win.out_w];
                    if y < 0 || y as usize >= win.in_h {
                        line.fill(T::zero());
                        continue;
                    }
                    let src = &plane[y as usize * win.in_w..(y as usize + 1) * win.in_w];
                    for (ox, out) in line.iter_mut().enumerate() {
                        let x = (ox * win.stride + kj) as isize - win.pad as isize;
                        *out = if x < 0 || x as usize >= win.in_w {
                            T::zero()
                        } else {
                            src[x as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters-adds `cols` back into `image`.
fn col2im<T: Real>(cols: &[T], win: &Window, image: &mut [T]) {
    let n_cols = win.cols();
    for c in 0..win.channels {
        let plane = &mut image[c * win.in_h * win.in_w..(c + 1) * win.in_h * win.in_w];
        for ki in 0..win.kh {
            for kj in 0..win.kw {
                let row = (c * win.kh + ki) * win.kw + kj;
                let src = &cols[row * n_cols..(row + 1) * n_cols];
                for oy in 0..win.out_h {
                    let y = (oy * win.stride + ki) as isize - win.pad as isize;
                    if y < 0 || y as usize >= win.in_h {
                        continue;
                    }
                    let dst = &mut plane[y as usize * win.in_w..(y as usize + 1) * win.in_w];
                    for ox in 0..win.out_w {
                        let x = (ox * win.stride + kj) as isize - win.pad as isize;
                        if x >= 0 && (x as usize) < win.in_w {
                            dst[x as usize] += src[oy * win.out_w + ox];
                        }
                    }
                }
            }
        }
    }
}

fn unfold<'a, T: Real>(image: &'a [T], win: &Window, scratch: &'a mut Vec<T>) -> &'a [T] {
    if win.is_pointwise() {
        image
    } else {
        scratch.resize(win.rows() * win.cols(), T::zero());
        im2col(image, win, scratch);
        scratch
    }
}

/// `c[m×n] (+)= a[m×k] · b[k×n]`, all row-major contiguous.
pub(crate) fn matmul_into<T: Real>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    b: &[T],
    c: &mut [T],
    accumulate: bool,
) {
    let beta = if accumulate { T::one() } else { T::zero() };
    T::gemm(
        m, k, n, T::one(), a, k as isize, 1, b, n as isize, 1, beta, c, n as isize, 1,
    );
}

/// `c[m×n] (+)= a[m×k] · b[n×k]ᵀ`.
pub(crate) fn matmul_bt_into<T: Real>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    b: &[T],
    c: &mut [T],
    accumulate: bool,
) {
    let beta = if accumulate { T::one() } else { T::zero() };
    T::gemm(
        m, k, n, T::one(), a, k as isize, 1, b, 1, k as isize, beta, c, n as isize, 1,
    );
}

/// `c[m×n] (+)= a[k×m]ᵀ · b[k×n]`.
pub(crate) fn matmul_at_into<T: Real>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    b: &[T],
    c: &mut [T],
    accumulate: bool,
) {
    let beta = if accumulate { T::one() } else { T::zero() };
    T::gemm(
        m, k, n, T::one(), a, 1, m as isize, b, n as isize, 1, beta, c, n as isize, 1,
    );
}

fn conv_out(size: usize, k: usize, stride: usize, pad: usize) -> Result<usize, AutodiffError> {
    if stride == 0 {
        return Err(AutodiffError::InvalidArgument("stride must be positive".into()));
    }
    if size + 2 * pad < k {
        return Err(AutodiffError::ShapeMismatch(format!(
            "kernel {k} larger than padded input {}",
            size + 2 * pad
        )));
    }
    Ok((size + 2 * pad - k) / stride + 1)
}

fn check_bias<T: Real>(bias: &Tensor<T>, channels: usize) -> Result<(), AutodiffError> {
    if bias.shape() != [channels] {
        return Err(AutodiffError::ShapeMismatch(format!(
            "bias shape {:?}, expected [{channels}]",
            bias.shape()
        )));
    }
    Ok(())
}

fn bias_grad<T: Real>(g: &[T], batch: usize, channels: usize, plane: usize) -> Tensor<T> {
    let mut db = vec![T::zero(); channels];
    for b in 0..batch {
        for (c, acc) in db.iter_mut().enumerate() {
            let off = (b * channels + c) * plane;
            *acc += g[off..off + plane].iter().copied().sum::<T>();
        }
    }
    Tensor::new(&[channels], db).expect("bias grad shape")
}

impl<T: Real> Tape<T> {
    /// Cross-correlation of `input[B,Cin,H,W]` with `weight[Cout,Cin,kh,kw]`.
    pub fn conv2d(
        &mut self,
        input: Var,
        weight: Var,
        bias: Var,
        stride: usize,
        padding: usize,
    ) -> Result<Var, AutodiffError> {
        let x = self.value(input);
        let w = self.value(weight);
        let (batch, cin, h, wd) = x.dims4()?;
        let (cout, wcin, kh, kw) = w.dims4()?;
        if wcin != cin {
            return Err(AutodiffError::ShapeMismatch(format!(
                "conv2d input has {cin} channels, weight expects {wcin}"
            )));
        }
        check_bias(self.value(bias), cout)?;
        let win = Window {
            channels: cin,
            in_h: h,
            in_w: wd,
            kh,
            kw,
            stride,
            pad: padding,
            out_h: conv_out(h, kh, stride, padding)?,
            out_w: conv_out(wd, kw, stride, padding)?,
        };
        let (rows, ncols) = (win.rows(), win.cols());
        let mut out = vec![T::zero(); batch * cout * ncols];
        let mut scratch = Vec::new();
        let bvals = self.value(bias).data();
        for b in 0..batch {
            let img = &x.data()[b * cin * h * wd..(b + 1) * cin * h * wd];
            let cols = unfold(img, &win, &mut scratch);
            let dst = &mut out[b * cout * ncols..(b + 1) * cout * ncols];
            for (c, plane) in dst.chunks_mut(ncols).enumerate() {
                plane.fill(bvals[c]);
            }
            matmul_into(cout, rows, ncols, w.data(), cols, dst, true);
        }
        let value = Tensor::new(&[batch, cout, win.out_h, win.out_w], out)?;
        Ok(self.record(value, &[input, weight, bias], move |g, nodes| {
            let x = &nodes[input.0].value;
            let w = &nodes[weight.0].value;
            let g = g.data();
            let mut dx = vec![T::zero(); x.len()];
            let mut dw = vec![T::zero(); w.len()];
            let mut dcols = vec![T::zero(); rows * ncols];
            let mut scratch = Vec::new();
            for b in 0..batch {
                let img = &x.data()[b * cin * h * wd..(b + 1) * cin * h * wd];
                let gb = &g[b * cout * ncols..(b + 1) * cout * ncols];
                let cols = unfold(img, &win, &mut scratch);
                matmul_bt_into(cout, ncols, rows, gb, cols, &mut dw, true);
                let dxb = &mut dx[b * cin * h * wd..(b + 1) * cin * h * wd];
                if win.is_pointwise() {
                    matmul_at_into(rows, cout, ncols, w.data(), gb, dxb, true);
                } else {
                    matmul_at_into(rows, cout, ncols, w.data(), gb, &mut dcols, false);
                    col2im(&dcols, &win, dxb);
                }
            }
            vec![
                (input, Tensor::new(x.shape(), dx).expect("dx shape")),
                (weight, Tensor::new(w.shape(), dw).expect("dw shape")),
                (bias, bias_grad(g, batch, cout, ncols)),
            ]
        }))
    }

    /// Transposed convolution of `input[B,Cin,H,W]` with
    /// `weight[Cin,Cout,kh,kw]`; output side `(H−1)·stride − 2·pad + k`.
    pub fn conv_transpose2d(
        &mut self,
        input: Var,
        weight: Var,
        bias: Var,
        stride: usize,
        padding: usize,
    ) -> Result<Var, AutodiffError> {
        let x = self.value(input);
        let w = self.value(weight);
        let (batch, cin, h, wd) = x.dims4()?;
        let (wcin, cout, kh, kw) = w.dims4()?;
        if wcin != cin {
            return Err(AutodiffError::ShapeMismatch(format!(
                "conv_transpose2d input has {cin} channels, weight expects {wcin}"
            )));
        }
        if stride == 0 {
            return Err(AutodiffError::InvalidArgument("stride must be positive".into()));
        }
        check_bias(self.value(bias), cout)?;
        let full_h = (h - 1) * stride + kh;
        let full_w = (wd - 1) * stride + kw;
        if full_h <= 2 * padding || full_w <= 2 * padding {
            return Err(AutodiffError::ShapeMismatch(
                "padding consumes the whole transposed output".into(),
            ));
        }
        let (oh, ow) = (full_h - 2 * padding, full_w - 2 * padding);
        // Geometry of the equivalent forward convolution from output to input.
        let win = Window {
            channels: cout,
            in_h: oh,
            in_w: ow,
            kh,
            kw,
            stride,
            pad: padding,
            out_h: h,
            out_w: wd,
        };
        let (rows, ncols) = (win.rows(), win.cols());
        let mut out = vec![T::zero(); batch * cout * oh * ow];
        let mut cols = vec![T::zero(); rows * ncols];
        let bvals = self.value(bias).data();
        for b in 0..batch {
            let xb = &x.data()[b * cin * ncols..(b + 1) * cin * ncols];
            let dst = &mut out[b * cout * oh * ow..(b + 1) * cout * oh * ow];
            for (c, plane) in dst.chunks_mut(oh * ow).enumerate() {
                plane.fill(bvals[c]);
            }
            matmul_at_into(rows, cin, ncols, w.data(), xb, &mut cols, false);
            col2im(&cols, &win, dst);
        }
        let value = Tensor::new(&[batch, cout, oh, ow], out)?;
        Ok(self.record(value, &[input, weight, bias], move |g, nodes| {
            let x = &nodes[input.0].value;
            let w = &nodes[weight.0].value;
            let g = g.data();
            let mut dx = vec![T::zero(); x.len()];
            let mut dw = vec![T::zero(); w.len()];
            let mut scratch = Vec::new();
            for b in 0..batch {
                let gb = &g[b * cout * oh * ow..(b + 1) * cout * oh * ow];
                let gcols = unfold(gb, &win, &mut scratch);
                let xb = &x.data()[b * cin * ncols..(b + 1) * cin * ncols];
                matmul_into(cin, rows, ncols, w.data(), gcols, &mut dx[b * cin * ncols..(b + 1) * cin * ncols], false);
                matmul_bt_into(cin, ncols, rows, xb, gcols, &mut dw, true);
            }
            vec![
                (input, Tensor::new(x.shape(), dx).expect("dx shape")),
                (weight, Tensor::new(w.shape(), dw).expect("dw shape")),
                (bias, bias_grad(g, batch, cout, oh * ow)),
            ]
        }))
    }
}
