//! Slice-level compute kernels behind the tape ops.
//!
//! Convolution is lowered to im2col + GEMM per batch item. The column
//! buffer is laid out `(Cin * k * k) x (Ho * Wo)`, row index
//! `(c * k + ky) * k + kx`, matching the `(Cout, Cin, k, k)` weight layout
//! so the weight tensor is used directly as a row-major `Cout x K` matrix.

use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvGeom {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeom {
    pub fn col_rows(&self) -> usize {
        self.channels * self.kernel * self.kernel
    }

    pub fn col_cols(&self) -> usize {
        self.out_h * self.out_w
    }

    /// 1x1, stride 1, no padding: the input already is the column matrix.
    pub fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1 && self.padding == 0
    }
}

pub(crate) fn im2col<T: Scalar>(input: &[T], g: &ConvGeom, cols: &mut [T]) {
    let (k, ow) = (g.kernel, g.out_w);
    let n = g.col_cols();
    for c in 0..g.channels {
        let plane = &input[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let dst = &mut cols[row * n..(row + 1) * n];
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ky) as isize - g.padding as isize;
                    let line = &mut dst[oy * ow..(oy + 1) * ow];
                    if iy < 0 || iy >= g.height as isize {
                        line.iter_mut().for_each(|v| *v = T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * g.width..(iy as usize + 1) * g.width];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.padding as isize;
                        *v = if ix < 0 || ix >= g.width as isize {
                            T::zero()
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Scatter-adds a column matrix back onto the (zero-initialised) input grid.
pub(crate) fn col2im<T: Scalar>(cols: &[T], g: &ConvGeom, out: &mut [T]) {
    let (k, ow) = (g.kernel, g.out_w);
    let n = g.col_cols();
    for c in 0..g.channels {
        let plane = &mut out[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let src = &cols[row * n..(row + 1) * n];
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ky) as isize - g.padding as isize;
                    if iy < 0 || iy >= g.height as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.width..(iy as usize + 1) * g.width];
                    for ox in 0..ow {
                        let ix = (ox * g.stride + kx) as isize - g.padding as isize;
                        if ix >= 0 && ix < g.width as isize {
                            dst[ix as usize] += src[oy * ow + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Forward convolution of a whole batch; returns `(B, Cout, Ho, Wo)` data.
pub(crate) fn conv_forward<T: Scalar>(
    input: &[T],
    batch: usize,
    g: &ConvGeom,
    weight: &[T],
    bias: &[T],
    out_channels: usize,
) -> Vec<T> {
    let kk = g.col_rows();
    let n = g.col_cols();
    let in_stride = g.channels * g.height * g.width;
    let mut out = vec![T::zero(); batch * out_channels * n];
    let mut cols = if g.is_pointwise() { Vec::new() } else { vec![T::zero(); kk * n] };
    for b in 0..batch {
        let x = &input[b * in_stride..(b + 1) * in_stride];
        let col: &[T] = if g.is_pointwise() {
            x
        } else {
            im2col(x, g, &mut cols);
            &cols
        };
        let y = &mut out[b * out_channels * n..(b + 1) * out_channels * n];
        for (o, row) in y.chunks_exact_mut(n).enumerate() {
            row.iter_mut().for_each(|v| *v = bias[o]);
        }
        T::gemm(out_channels, kk, n, T::one(), weight, kk, 1, col, n, 1, T::one(), y, n, 1);
    }
    out
}

pub(crate) struct ConvGrads<T> {
    pub input: Vec<T>,
    pub weight: Vec<T>,
    pub bias: Vec<T>,
}

pub(crate) fn conv_backward<T: Scalar>(
    input: &[T],
    batch: usize,
    g: &ConvGeom,
    weight: &[T],
    out_channels: usize,
    grad_out: &[T],
) -> ConvGrads<T> {
    let kk = g.col_rows();
    let n = g.col_cols();
    let in_stride = g.channels * g.height * g.width;
    let mut d_input = vec![T::zero(); input.len()];
    let mut d_weight = vec![T::zero(); weight.len()];
    let mut d_bias = vec![T::zero(); out_channels];
    let pointwise = g.is_pointwise();
    let mut cols = if pointwise { Vec::new() } else { vec![T::zero(); kk * n] };
    let mut d_cols = if pointwise { Vec::new() } else { vec![T::zero(); kk * n] };
    for b in 0..batch {
        let x = &input[b * in_stride..(b + 1) * in_stride];
        let dy = &grad_out[b * out_channels * n..(b + 1) * out_channels * n];
        for (o, row) in dy.chunks_exact(n).enumerate() {
            d_bias[o] += row.iter().copied().sum::<T>();
        }
        let col: &[T] = if pointwise {
            x
        } else {
            im2col(x, g, &mut cols);
            &cols
        };
        // dW += dY (Cout x n) * col^T (n x K)
        T::gemm(out_channels, n, kk, T::one(), dy, n, 1, col, 1, n, T::one(), &mut d_weight, kk, 1);
        // dcol = W^T (K x Cout) * dY (Cout x n)
        let dx = &mut d_input[b * in_stride..(b + 1) * in_stride];
        if pointwise {
            T::gemm(kk, out_channels, n, T::one(), weight, 1, kk, dy, n, 1, T::one(), dx, n, 1);
        } else {
            T::gemm(kk, out_channels, n, T::one(), weight, 1, kk, dy, n, 1, T::zero(), &mut d_cols, n, 1);
            col2im(&d_cols, g, dx);
        }
    }
    ConvGrads {
        input: d_input,
        weight: d_weight,
        bias: d_bias,
    }
}

/// Max pooling with floor-division output size; ties resolve to the first
/// (row-major) element of the window. Returns values and flat argmax indices
/// into the input.
pub(crate) fn max_pool_forward<T: Scalar>(
    input: &[T],
    planes: usize,
    height: usize,
    width: usize,
    window: usize,
    stride: usize,
) -> (Vec<T>, Vec<usize>, usize, usize) {
    let oh = (height - window) / stride + 1;
    let ow = (width - window) / stride + 1;
    let mut out = Vec::with_capacity(planes * oh * ow);
    let mut arg = Vec::with_capacity(planes * oh * ow);
    for p in 0..planes {
        let base = p * height * width;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = base + oy * stride * width + ox * stride;
                for ky in 0..window {
                    for kx in 0..window {
                        let idx = base + (oy * stride + ky) * width + ox * stride + kx;
                        if input[idx] > input[best] {
                            best = idx;
                        }
                    }
                }
                out.push(input[best]);
                arg.push(best);
            }
        }
    }
    (out, arg, oh, ow)
}
