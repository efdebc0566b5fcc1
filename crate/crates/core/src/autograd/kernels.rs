//! Slice-level forward/backward kernels behind the spatial graph ops.
//!
//! Everything here works on one sample at a time in (c, h, w) order and
//! knows nothing about the graph.

/// Geometry of a valid-mode sliding window over one sample.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Window {
    pub channels: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub k_h: usize,
    pub k_w: usize,
    pub stride: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl Window {
    /// `None` when the kernel does not fit at least once.
    pub fn new(
        channels: usize,
        in_h: usize,
        in_w: usize,
        k_h: usize,
        k_w: usize,
        stride: usize,
    ) -> Option<Self> {
        let out_h = valid_extent(in_h, k_h, stride)?;
        let out_w = valid_extent(in_w, k_w, stride)?;
        Some(Window {
            channels,
            in_h,
            in_w,
            k_h,
            k_w,
            stride,
            out_h,
            out_w,
        })
    }

    /// Rows of the column matrix: channels * k_h * k_w.
    pub fn patch(&self) -> usize {
        self.channels * self.k_h * self.k_w
    }

    /// Columns of the column matrix: out_h * out_w.
    pub fn positions(&self) -> usize {
        self.out_h * self.out_w
    }
}

/// `floor((input - kernel) / stride) + 1`, or `None` if that is below one.
pub fn valid_extent(input: usize, kernel: usize, stride: usize) -> Option<usize> {
    if kernel == 0 || stride == 0 || kernel > input {
        return None;
    }
    Some((input - kernel) / stride + 1)
}

/// Gathers every kernel window of `input` into a (patch x positions) matrix.
pub(crate) fn im2col(win: &Window, input: &[f64], cols: &mut [f64]) {
    let p = win.positions();
    debug_assert_eq!(input.len(), win.channels * win.in_h * win.in_w);
    debug_assert_eq!(cols.len(), win.patch() * p);
    let mut row = 0;
    for c in 0..win.channels {
        let plane = &input[c * win.in_h * win.in_w..(c + 1) * win.in_h * win.in_w];
        for ky in 0..win.k_h {
            for kx in 0..win.k_w {
                let dst = &mut cols[row * p..(row + 1) * p];
                let mut i = 0;
                for oy in 0..win.out_h {
                    let src_row = (oy * win.stride + ky) * win.in_w + kx;
                    for ox in 0..win.out_w {
                        dst[i] = plane[src_row + ox * win.stride];
                        i += 1;
                    }
                }
                row += 1;
            }
        }
    }
}

/// Scatter-adds a (patch x positions) matrix back onto the input layout.
pub(crate) fn col2im_add(win: &Window, cols: &[f64], input: &mut [f64]) {
    let p = win.positions();
    let mut row = 0;
    for c in 0..win.channels {
        let plane = &mut input[c * win.in_h * win.in_w..(c + 1) * win.in_h * win.in_w];
        for ky in 0..win.k_h {
            for kx in 0..win.k_w {
                let src = &cols[row * p..(row + 1) * p];
                let mut i = 0;
                for oy in 0..win.out_h {
                    let dst_row = (oy * win.stride + ky) * win.in_w + kx;
                    for ox in 0..win.out_w {
                        plane[dst_row + ox * win.stride] += src[i];
                        i += 1;
                    }
                }
                row += 1;
            }
        }
    }
}

/// Strided view of a row-major matrix, optionally transposed.
#[derive(Clone, Copy)]
pub(crate) struct MatRef<'a> {
    pub data: &'a [f64],
    pub rows: usize,
    pub cols: usize,
    transposed: bool,
}

impl<'a> MatRef<'a> {
    pub fn new(data: &'a [f64], rows: usize, cols: usize) -> Self {
        debug_assert_eq!(data.len(), rows * cols);
        MatRef {
            data,
            rows,
            cols,
            transposed: false,
        }
    }

    pub fn t(self) -> Self {
        MatRef {
            data: self.data,
            rows: self.cols,
            cols: self.rows,
            transposed: !self.transposed,
        }
    }

    fn strides(&self) -> (isize, isize) {
        if self.transposed {
            (1, self.rows as isize)
        } else {
            (self.cols as isize, 1)
        }
    }
}

/// `out = a * b + beta * out`, with `out` row-major (a.rows x b.cols).
pub(crate) fn gemm(a: MatRef<'_>, b: MatRef<'_>, beta: f64, out: &mut [f64]) {
    assert_eq!(a.cols, b.rows, "gemm inner dimensions");
    assert_eq!(out.len(), a.rows * b.cols, "gemm output size");
    assert_eq!(a.data.len(), a.rows * a.cols);
    assert_eq!(b.data.len(), b.rows * b.cols);
    let (rsa, csa) = a.strides();
    let (rsb, csb) = b.strides();
    // SAFETY: the asserts above guarantee every strided access stays inside
    // the three slices, and `out` is uniquely borrowed.
    unsafe {
        matrixmultiply::dgemm(
            a.rows,
            a.cols,
            b.cols,
            1.0,
            a.data.as_ptr(),
            rsa,
            csa,
            b.data.as_ptr(),
            rsb,
            csb,
            beta,
            out.as_mut_ptr(),
            b.cols as isize,
            1,
        );
    }
}

/// Windowed max per channel; records the flat input index of each winner.
///
/// Ties go to the first maximal position in row-major window order.
pub(crate) fn maxpool_forward(win: &Window, input: &[f64], out: &mut [f64], argmax: &mut [usize]) {
    let plane_in = win.in_h * win.in_w;
    let plane_out = win.positions();
    for c in 0..win.channels {
        for oy in 0..win.out_h {
            for ox in 0..win.out_w {
                let mut best = f64::NEG_INFINITY;
                let mut best_idx = usize::MAX;
                for ky in 0..win.k_h {
                    for kx in 0..win.k_w {
                        let idx = c * plane_in + (oy * win.stride + ky) * win.in_w + ox * win.stride + kx;
                        let v = input[idx];
                        if best_idx == usize::MAX || v > best {
                            best = v;
                            best_idx = idx;
                        }
                    }
                }
                let o = c * plane_out + oy * win.out_w + ox;
                out[o] = best;
                argmax[o] = best_idx;
            }
        }
    }
}

/// Per-channel statistics from batch normalization's training pass.
pub(crate) struct BnStats {
    pub mean: Vec<f64>,
    /// Biased (population) variance.
    pub var: Vec<f64>,
    pub inv_std: Vec<f64>,
    pub xhat: Vec<f64>,
}

/// Normalizes each channel over (n, h, w) using batch statistics.
pub(crate) fn batchnorm_train(
    input: &[f64],
    n: usize,
    c: usize,
    plane: usize,
    gamma: &[f64],
    beta: &[f64],
    eps: f64,
    out: &mut [f64],
) -> BnStats {
    let m = (n * plane) as f64;
    let mut mean = vec![0.0; c];
    let mut var = vec![0.0; c];
    for s in 0..n {
        for ch in 0..c {
            let base = (s * c + ch) * plane;
            mean[ch] += input[base..base + plane].iter().sum::<f64>();
        }
    }
    mean.iter_mut().for_each(|v| *v /= m);
    for s in 0..n {
        for ch in 0..c {
            let base = (s * c + ch) * plane;
            var[ch] += input[base..base + plane]
                .iter()
                .map(|x| (x - mean[ch]) * (x - mean[ch]))
                .sum::<f64>();
        }
    }
    var.iter_mut().for_each(|v| *v /= m);
    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
    let mut xhat = vec![0.0; input.len()];
    for s in 0..n {
        for ch in 0..c {
            let base = (s * c + ch) * plane;
            for i in base..base + plane {
                let xh = (input[i] - mean[ch]) * inv_std[ch];
                xhat[i] = xh;
                out[i] = gamma[ch] * xh + beta[ch];
            }
        }
    }
    BnStats {
        mean,
        var,
        inv_std,
        xhat,
    }
}

/// Gradients of batch normalization's training pass.
///
/// Returns (d_input, d_gamma, d_beta).
pub(crate) fn batchnorm_backward(
    grad_out: &[f64],
    xhat: &[f64],
    inv_std: &[f64],
    gamma: &[f64],
    n: usize,
    c: usize,
    plane: usize,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let m = (n * plane) as f64;
    let mut d_gamma = vec![0.0; c];
    let mut d_beta = vec![0.0; c];
    for s in 0..n {
        for ch in 0..c {
            let base = (s * c + ch) * plane;
            for i in base..base + plane {
                d_beta[ch] += grad_out[i];
                d_gamma[ch] += grad_out[i] * xhat[i];
            }
        }
    }
    // dxhat = dy * gamma, so sum(dxhat) = gamma * d_beta and
    // sum(dxhat * xhat) = gamma * d_gamma.
    let mut d_input = vec![0.0; grad_out.len()];
    for s in 0..n {
        for ch in 0..c {
            let base = (s * c + ch) * plane;
            let k = gamma[ch] * inv_std[ch] / m;
            for i in base..base + plane {
                d_input[i] = k * (m * grad_out[i] - d_beta[ch] - xhat[i] * d_gamma[ch]);
            }
        }
    }
    (d_input, d_gamma, d_beta)
}

/// `log(1 + exp(z))` without overflow.
pub fn softplus(z: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn valid_extent_matches_floor_formula() {
        assert_eq!(valid_extent(127, 11, 2), Some(59));
        assert_eq!(valid_extent(59, 3, 2), Some(29));
        assert_eq!(valid_extent(3, 3, 1), Some(1));
        assert_eq!(valid_extent(2, 3, 1), None);
        assert_eq!(valid_extent(5, 1, 0), None);
    }

    #[test]
    fn gemm_handles_transposed_views() {
        // a = [[1,2],[3,4]], b = [[5,6],[7,8]]
        let a = [1.0, 2.0, 3.0, 4.0];
        let b = [5.0, 6.0, 7.0, 8.0];
        let mut out = [0.0; 4];
        gemm(MatRef::new(&a, 2, 2), MatRef::new(&b, 2, 2), 0.0, &mut out);
        assert_eq!(out, [19.0, 22.0, 43.0, 50.0]);
        gemm(MatRef::new(&a, 2, 2).t(), MatRef::new(&b, 2, 2), 0.0, &mut out);
        assert_eq!(out, [26.0, 30.0, 38.0, 44.0]);
        gemm(MatRef::new(&a, 2, 2), MatRef::new(&b, 2, 2).t(), 1.0, &mut out);
        assert_eq!(out, [26.0 + 17.0, 30.0 + 23.0, 38.0 + 39.0, 44.0 + 53.0]);
    }

    #[test]
    fn im2col_col2im_are_adjoint() {
        let win = Window::new(2, 5, 4, 3, 2, 2).unwrap();
        let x: Vec<f64> = (0..40).map(|i| (i as f64 * 0.37).sin()).collect();
        let y: Vec<f64> = (0..win.patch() * win.positions())
            .map(|i| (i as f64 * 0.11).cos())
            .collect();
        let mut cols = vec![0.0; y.len()];
        im2col(&win, &x, &mut cols);
        let lhs: f64 = cols.iter().zip(&y).map(|(a, b)| a * b).sum();
        let mut back = vec![0.0; x.len()];
        col2im_add(&win, &y, &mut back);
        let rhs: f64 = x.iter().zip(&back).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn maxpool_breaks_ties_toward_first_position() {
        let win = Window::new(1, 2, 2, 2, 2, 1).unwrap();
        let mut out = [0.0];
        let mut arg = [0];
        maxpool_forward(&win, &[1.0, 1.0, 1.0, 1.0], &mut out, &mut arg);
        assert_eq!((out[0], arg[0]), (1.0, 0));
        maxpool_forward(&win, &[0.0, 2.0, 2.0, 1.0], &mut out, &mut arg);
        assert_eq!((out[0], arg[0]), (2.0, 1));
    }

    #[test]
    fn softplus_is_stable() {
        assert!((softplus(0.0) - std::f64::consts::LN_2).abs() < 1e-15);
        assert_eq!(softplus(-1000.0), 0.0);
        assert_eq!(softplus(1000.0), 1000.0);
        assert!((sigmoid(0.0) - 0.5).abs() < 1e-15);
    }
}
