//! Tape-free numeric kernels shared by the recorded ops and by plain
//! inference.

use crate::error::{dim_err, Error, Result};

/// `c = beta * c + op(a) * op(b)` with `op(a)` m×k and `op(b)` k×n, all
/// row-major. A transposed operand is stored in its untransposed layout
/// (k×m for `a`, n×k for `b`).
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_transposed: bool,
    b: &[f64],
    b_transposed: bool,
    c: &mut [f64],
    beta: f64,
) {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), k * n);
    assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c.iter_mut().for_each(|v| *v *= beta);
        return;
    }
    let (rsa, csa) = if a_transposed { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_transposed { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the asserts above pin every buffer to the extents and strides
    // handed to dgemm.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Geometry of a 2-d convolution over an N×C×H×W input.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub batch: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub filters: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeometry {
    pub fn from_shapes(input: &[usize], kernel: &[usize], stride: usize, padding: usize) -> Result<Self> {
        if input.len() != 4 || kernel.len() != 4 {
            return dim_err(format!(
                "conv2d expects N×C×H×W input and F×C×kh×kw kernel, got {input:?} and {kernel:?}"
            ));
        }
        if input[1] != kernel[1] {
            return dim_err(format!(
                "conv2d channel mismatch: input {input:?}, kernel {kernel:?}"
            ));
        }
        if stride == 0 {
            return Err(Error::Contract("conv2d stride must be positive".into()));
        }
        let g = Self {
            batch: input[0],
            channels: input[1],
            height: input[2],
            width: input[3],
            filters: kernel[0],
            kernel_h: kernel[2],
            kernel_w: kernel[3],
            stride,
            padding,
        };
        if g.kernel_h > g.height + 2 * padding || g.kernel_w > g.width + 2 * padding {
            return dim_err(format!(
                "kernel {kernel:?} larger than padded input {input:?} (padding {padding})"
            ));
        }
        Ok(g)
    }

    pub fn out_h(&self) -> usize {
        (self.height + 2 * self.padding - self.kernel_h) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.width + 2 * self.padding - self.kernel_w) / self.stride + 1
    }

    pub fn out_shape(&self) -> Vec<usize> {
        vec![self.batch, self.filters, self.out_h(), self.out_w()]
    }

    fn patch_len(&self) -> usize {
        self.channels * self.kernel_h * self.kernel_w
    }

    fn sample_len(&self) -> usize {
        self.channels * self.height * self.width
    }

    /// Unfolds one sample into a (C·kh·kw) × (oh·ow) matrix.
    fn im2col(&self, sample: &[f64], cols: &mut [f64]) {
        let (oh, ow) = (self.out_h(), self.out_w());
        let positions = oh * ow;
        for c in 0..self.channels {
            for ki in 0..self.kernel_h {
                for kj in 0..self.kernel_w {
                    let row = (c * self.kernel_h + ki) * self.kernel_w + kj;
                    let dst = &mut cols[row * positions..(row + 1) * positions];
                    for oy in 0..oh {
                        let y = (oy * self.stride + ki) as isize - self.padding as isize;
                        for ox in 0..ow {
                            let x = (ox * self.stride + kj) as isize - self.padding as isize;
                            dst[oy * ow + ox] = if y >= 0
                                && (y as usize) < self.height
                                && x >= 0
                                && (x as usize) < self.width
                            {
                                sample[(c * self.height + y as usize) * self.width + x as usize]
                            } else {
                                0.0
                            };
                        }
                    }
                }
            }
        }
    }

    fn col2im(&self, cols: &[f64], sample_grad: &mut [f64]) {
        let (oh, ow) = (self.out_h(), self.out_w());
        let positions = oh * ow;
        for c in 0..self.channels {
            for ki in 0..self.kernel_h {
                for kj in 0..self.kernel_w {
                    let row = (c * self.kernel_h + ki) * self.kernel_w + kj;
                    let src = &cols[row * positions..(row + 1) * positions];
                    for oy in 0..oh {
                        let y = (oy * self.stride + ki) as isize - self.padding as isize;
                        if y < 0 || y as usize >= self.height {
                            continue;
                        }
                        for ox in 0..ow {
                            let x = (ox * self.stride + kj) as isize - self.padding as isize;
                            if x < 0 || x as usize >= self.width {
                                continue;
                            }
                            sample_grad[(c * self.height + y as usize) * self.width + x as usize] +=
                                src[oy * ow + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Cross-correlation (no kernel flip).
pub fn conv2d_forward(g: &ConvGeometry, input: &[f64], kernel: &[f64]) -> Vec<f64> {
    let positions = g.out_h() * g.out_w();
    let patch = g.patch_len();
    let mut out = vec![0.0; g.batch * g.filters * positions];
    let mut cols = vec![0.0; patch * positions];
    for n in 0..g.batch {
        g.im2col(&input[n * g.sample_len()..(n + 1) * g.sample_len()], &mut cols);
        let dst = &mut out[n * g.filters * positions..(n + 1) * g.filters * positions];
        gemm(g.filters, patch, positions, kernel, false, &cols, false, dst, 0.0);
    }
    out
}

/// Gradients of a convolution with respect to its input and kernel.
pub fn conv2d_backward(
    g: &ConvGeometry,
    input: &[f64],
    kernel: &[f64],
    grad_out: &[f64],
    want_input: bool,
    want_kernel: bool,
) -> (Option<Vec<f64>>, Option<Vec<f64>>) {
    let positions = g.out_h() * g.out_w();
    let patch = g.patch_len();
    let mut d_input = want_input.then(|| vec![0.0; input.len()]);
    let mut d_kernel = want_kernel.then(|| vec![0.0; kernel.len()]);
    let mut cols = vec![0.0; patch * positions];
    let mut d_cols = vec![0.0; patch * positions];
    for n in 0..g.batch {
        let go = &grad_out[n * g.filters * positions..(n + 1) * g.filters * positions];
        if let Some(dk) = d_kernel.as_mut() {
            g.im2col(&input[n * g.sample_len()..(n + 1) * g.sample_len()], &mut cols);
            gemm(g.filters, positions, patch, go, false, &cols, true, dk, 1.0);
        }
        if let Some(di) = d_input.as_mut() {
            gemm(patch, g.filters, positions, kernel, true, go, false, &mut d_cols, 0.0);
            g.col2im(&d_cols, &mut di[n * g.sample_len()..(n + 1) * g.sample_len()]);
        }
    }
    (d_input, d_kernel)
}

/// Non-overlapping max pooling over N×C×H×W. Returns pooled values and,
/// for each output, the flat input index of the first maximal element in
/// row-major window order.
pub fn maxpool2d_forward(shape: &[usize], input: &[f64], window: usize) -> Result<(Vec<usize>, Vec<f64>, Vec<usize>)> {
    if shape.len() != 4 {
        return dim_err(format!("maxpool2d expects N×C×H×W, got {shape:?}"));
    }
    if window == 0 {
        return Err(Error::Contract("pool window must be positive".into()));
    }
    let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    if h % window != 0 || w % window != 0 {
        return dim_err(format!(
            "spatial extents {h}×{w} not divisible by pool window {window}"
        ));
    }
    let (oh, ow) = (h / window, w / window);
    let mut out = Vec::with_capacity(n * c * oh * ow);
    let mut arg = Vec::with_capacity(n * c * oh * ow);
    for plane in 0..n * c {
        let base = plane * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = f64::NEG_INFINITY;
                let mut best_idx = base + oy * window * w + ox * window;
                for dy in 0..window {
                    for dx in 0..window {
                        let idx = base + (oy * window + dy) * w + ox * window + dx;
                        if input[idx] > best {
                            best = input[idx];
                            best_idx = idx;
                        }
                    }
                }
                out.push(best);
                arg.push(best_idx);
            }
        }
    }
    Ok((vec![n, c, oh, ow], out, arg))
}

/// Numerically stable softmax per row of an N×K matrix.
pub fn softmax_rows(logits: &[f64], classes: usize) -> Vec<f64> {
    let mut probs = logits.to_vec();
    for row in probs.chunks_mut(classes) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            total += *v;
        }
        row.iter_mut().for_each(|v| *v /= total);
    }
    probs
}

/// Per-row negative log-likelihood of the labelled class, computed with
/// max subtraction.
pub fn cross_entropy_rows(logits: &[f64], classes: usize, labels: &[usize]) -> Vec<f64> {
    logits
        .chunks(classes)
        .zip(labels)
        .map(|(row, &label)| {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = row.iter().map(|v| (v - max).exp()).sum::<f64>().ln() + max;
            lse - row[label]
        })
        .collect()
}

pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}
