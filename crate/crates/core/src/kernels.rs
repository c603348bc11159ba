//! Dense kernels behind the tape: GEMM and the im2col lowering for 1-D convolution.

/// Matrix operand: row-major `rows x cols` slice, optionally read transposed.
#[derive(Clone, Copy)]
pub(crate) struct Mat<'a> {
    pub data: &'a [f32],
    pub rows: usize,
    pub cols: usize,
    pub trans: bool,
}

impl<'a> Mat<'a> {
    pub fn new(data: &'a [f32], rows: usize, cols: usize) -> Self {
        debug_assert_eq!(data.len(), rows * cols);
        Self {
            data,
            rows,
            cols,
            trans: false,
        }
    }

    pub fn t(self) -> Self {
        Self {
            trans: !self.trans,
            ..self
        }
    }

    fn dims(&self) -> (usize, usize) {
        if self.trans {
            (self.cols, self.rows)
        } else {
            (self.rows, self.cols)
        }
    }

    fn strides(&self) -> (isize, isize) {
        if self.trans {
            (1, self.cols as isize)
        } else {
            (self.cols as isize, 1)
        }
    }
}

/// `out = beta * out + a * b` where `out` is row-major `m x n`.
pub(crate) fn gemm(a: Mat, b: Mat, beta: f32, out: &mut [f32]) {
    let (m, k) = a.dims();
    let (k2, n) = b.dims();
    assert_eq!(k, k2, "gemm inner dimensions");
    assert_eq!(out.len(), m * n, "gemm output size");
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        out.iter_mut().for_each(|v| *v *= beta);
        return;
    }
    let (rsa, csa) = a.strides();
    let (rsb, csb) = b.strides();
    // SAFETY: strides and dimensions describe in-bounds views of the slices
    // checked above; `out` is a distinct, exclusively borrowed buffer.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.data.as_ptr(),
            rsa,
            csa,
            b.data.as_ptr(),
            rsb,
            csb,
            beta,
            out.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Geometry of a same-padded strided 1-D convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub batch: usize,
    pub channels: usize,
    pub len: usize,
    pub kernel: usize,
    pub stride: usize,
    pub out_len: usize,
}

impl ConvGeom {
    pub fn new(batch: usize, channels: usize, len: usize, kernel: usize, stride: usize) -> Self {
        Self {
            batch,
            channels,
            len,
            kernel,
            stride,
            out_len: conv_out_len(len, stride),
        }
    }

    fn pad(&self) -> usize {
        (self.kernel - 1) / 2
    }

    pub fn col_rows(&self) -> usize {
        self.channels * self.kernel
    }

    pub fn col_cols(&self) -> usize {
        self.batch * self.out_len
    }
}

/// Output length under the same-style padding rule.
pub fn conv_out_len(len: usize, stride: usize) -> usize {
    len.div_ceil(stride)
}

/// Unfolds `x[B, C, L]` into `cols[C*K, B*L_out]`.
pub(crate) fn im2col(x: &[f32], g: &ConvGeom) -> Vec<f32> {
    let ncols = g.col_cols();
    let mut cols = vec![0.0f32; g.col_rows() * ncols];
    let pad = g.pad() as isize;
    for c in 0..g.channels {
        for kk in 0..g.kernel {
            let row = &mut cols[(c * g.kernel + kk) * ncols..(c * g.kernel + kk + 1) * ncols];
            for b in 0..g.batch {
                let src = &x[(b * g.channels + c) * g.len..(b * g.channels + c + 1) * g.len];
                let dst = &mut row[b * g.out_len..(b + 1) * g.out_len];
                for (t, d) in dst.iter_mut().enumerate() {
                    let pos = (t * g.stride) as isize + kk as isize - pad;
                    if pos >= 0 && (pos as usize) < g.len {
                        *d = src[pos as usize];
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: folds `cols[C*K, B*L_out]` back into `x[B, C, L]`, summing overlaps.
pub(crate) fn col2im(cols: &[f32], g: &ConvGeom) -> Vec<f32> {
    let ncols = g.col_cols();
    let mut x = vec![0.0f32; g.batch * g.channels * g.len];
    let pad = g.pad() as isize;
    for c in 0..g.channels {
        for kk in 0..g.kernel {
            let row = &cols[(c * g.kernel + kk) * ncols..(c * g.kernel + kk + 1) * ncols];
            for b in 0..g.batch {
                let dst = &mut x[(b * g.channels + c) * g.len..(b * g.channels + c + 1) * g.len];
                let src = &row[b * g.out_len..(b + 1) * g.out_len];
                for (t, s) in src.iter().enumerate() {
                    let pos = (t * g.stride) as isize + kk as isize - pad;
                    if pos >= 0 && (pos as usize) < g.len {
                        dst[pos as usize] += s;
                    }
                }
            }
        }
    }
    x
}

/// `[B, C, L]` -> `[C, B*L]`.
pub(crate) fn batch_to_channel_major(x: &[f32], batch: usize, channels: usize, len: usize) -> Vec<f32> {
    let mut out = vec![0.0f32; x.len()];
    for b in 0..batch {
        for c in 0..channels {
            let src = &x[(b * channels + c) * len..(b * channels + c + 1) * len];
            out[c * batch * len + b * len..c * batch * len + (b + 1) * len].copy_from_slice(src);
        }
    }
    out
}

/// `[C, B*L]` -> `[B, C, L]`.
pub(crate) fn channel_to_batch_major(x: &[f32], batch: usize, channels: usize, len: usize) -> Vec<f32> {
    let mut out = vec![0.0f32; x.len()];
    for b in 0..batch {
        for c in 0..channels {
            let src = &x[c * batch * len + b * len..c * batch * len + (b + 1) * len];
            out[(b * channels + c) * len..(b * channels + c + 1) * len].copy_from_slice(src);
        }
    }
    out
}

/// Forward 1-D convolution: `x[B, Ci, L]`, `w[Co, Ci, K]` -> `[B, Co, L_out]`.
pub(crate) fn conv1d_forward(x: &[f32], w: &[f32], g: &ConvGeom, out_channels: usize) -> Vec<f32> {
    let cols = im2col(x, g);
    let mut y = vec![0.0f32; out_channels * g.col_cols()];
    gemm(
        Mat::new(w, out_channels, g.col_rows()),
        Mat::new(&cols, g.col_rows(), g.col_cols()),
        0.0,
        &mut y,
    );
    channel_to_batch_major(&y, g.batch, out_channels, g.out_len)
}

/// Adjoint of [`conv1d_forward`] with respect to `x`: maps `[B, Co, L_out]` to `[B, Ci, L]`.
pub(crate) fn conv1d_adjoint(dy: &[f32], w: &[f32], g: &ConvGeom, out_channels: usize) -> Vec<f32> {
    let dy_cm = batch_to_channel_major(dy, g.batch, out_channels, g.out_len);
    let mut dcols = vec![0.0f32; g.col_rows() * g.col_cols()];
    gemm(
        Mat::new(w, out_channels, g.col_rows()).t(),
        Mat::new(&dy_cm, out_channels, g.col_cols()),
        0.0,
        &mut dcols,
    );
    col2im(&dcols, g)
}

/// Kernel gradient of [`conv1d_forward`]: `dW[Co, Ci*K] = dy_cm · colsᵀ`.
pub(crate) fn conv1d_kernel_grad(x: &[f32], dy: &[f32], g: &ConvGeom, out_channels: usize) -> Vec<f32> {
    let cols = im2col(x, g);
    let dy_cm = batch_to_channel_major(dy, g.batch, out_channels, g.out_len);
    let mut dw = vec![0.0f32; out_channels * g.col_rows()];
    gemm(
        Mat::new(&dy_cm, out_channels, g.col_cols()),
        Mat::new(&cols, g.col_rows(), g.col_cols()).t(),
        0.0,
        &mut dw,
    );
    dw
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_gemm(a: &[f32], b: &[f32], m: usize, k: usize, n: usize) -> Vec<f32> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for p in 0..k {
                    c[i * n + j] += a[i * k + p] * b[p * n + j];
                }
            }
        }
        c
    }

    #[test]
    fn gemm_matches_naive_with_transposes() {
        let a: Vec<f32> = (0..6).map(|v| v as f32 * 0.5 - 1.0).collect();
        let b: Vec<f32> = (0..12).map(|v| (v as f32).sin()).collect();
        let expect = naive_gemm(&a, &b, 2, 3, 4);
        let mut out = vec![0.0; 8];
        gemm(Mat::new(&a, 2, 3), Mat::new(&b, 3, 4), 0.0, &mut out);
        for (x, y) in out.iter().zip(&expect) {
            assert!((x - y).abs() < 1e-6);
        }
        // aᵀ stored as [3, 2]
        let at: Vec<f32> = (0..6).map(|i| a[(i % 2) * 3 + i / 2]).collect();
        let mut out2 = vec![0.0; 8];
        gemm(Mat::new(&at, 3, 2).t(), Mat::new(&b, 3, 4), 0.0, &mut out2);
        assert_eq!(out, out2);
    }

    #[test]
    fn out_len_follows_ceil_rule() {
        assert_eq!(conv_out_len(360, 2), 180);
        assert_eq!(conv_out_len(180, 2), 90);
        assert_eq!(conv_out_len(90, 1), 90);
        assert_eq!(conv_out_len(7, 2), 4);
    }
}
