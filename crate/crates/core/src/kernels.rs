//! Raw numeric kernels shared by the autodiff graph and the deploy runtime.
//!
//! All kernels operate on row-major slices and are single-threaded, so the
//! results are bit-identical from run to run.

use crate::error::{Error, Result};

/// `c = alpha * a·b + beta * c` with arbitrary strides.
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: &[f64],
    rsa: usize,
    csa: usize,
    b: &[f64],
    rsb: usize,
    csb: usize,
    beta: f64,
    c: &mut [f64],
    rsc: usize,
) {
    if m == 0 || n == 0 {
        return;
    }
    if k > 0 {
        assert!((m - 1) * rsa + (k - 1) * csa < a.len(), "gemm: lhs out of bounds");
        assert!((k - 1) * rsb + (n - 1) * csb < b.len(), "gemm: rhs out of bounds");
    }
    assert!((m - 1) * rsc + n - 1 < c.len(), "gemm: output out of bounds");
    // SAFETY: the asserts above bound every index the kernel touches.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            rsc as isize,
            1,
        );
    }
}

/// Geometry of a 2-D convolution over NCHW input and MCKK weights.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub batch: usize,
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    pub out_channels: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeometry {
    pub fn new(input: &[usize], weight: &[usize], stride: usize, padding: usize) -> Result<Self> {
        if input.len() != 4 || weight.len() != 4 {
            return Err(Error::shape(
                "conv2d",
                format!("expected 4-d input and weight, got {input:?} and {weight:?}"),
            ));
        }
        if input[1] != weight[1] {
            return Err(Error::shape(
                "conv2d",
                format!(
                    "input has {} channels but weight expects {} (input {input:?}, weight {weight:?})",
                    input[1], weight[1]
                ),
            ));
        }
        if stride == 0 {
            return Err(Error::InvalidArgument("conv2d stride must be >= 1".into()));
        }
        let geo = ConvGeometry {
            batch: input[0],
            in_channels: input[1],
            height: input[2],
            width: input[3],
            out_channels: weight[0],
            kernel_h: weight[2],
            kernel_w: weight[3],
            stride,
            padding,
        };
        if geo.height + 2 * padding < geo.kernel_h || geo.width + 2 * padding < geo.kernel_w {
            return Err(Error::shape(
                "conv2d",
                format!("kernel {}x{} larger than padded input {input:?}", geo.kernel_h, geo.kernel_w),
            ));
        }
        Ok(geo)
    }

    pub fn out_h(&self) -> usize {
        (self.height + 2 * self.padding - self.kernel_h) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.width + 2 * self.padding - self.kernel_w) / self.stride + 1
    }

    pub fn out_shape(&self) -> [usize; 4] {
        [self.batch, self.out_channels, self.out_h(), self.out_w()]
    }

    /// Receptive field size `C * Kh * Kw`.
    pub fn patch_len(&self) -> usize {
        self.in_channels * self.kernel_h * self.kernel_w
    }

    fn positions(&self) -> usize {
        self.out_h() * self.out_w()
    }

    /// Visits every in-bounds run of taps of one sample as
    /// `(patch_row, first_position, first_input_offset, len)`: consecutive
    /// positions of a run read input offsets `stride` apart.
    pub(crate) fn for_each_run(&self, mut f: impl FnMut(usize, usize, usize, usize)) {
        let (oh, ow) = (self.out_h(), self.out_w());
        let (s, pad) = (self.stride, self.padding);
        for c in 0..self.in_channels {
            for ky in 0..self.kernel_h {
                for kx in 0..self.kernel_w {
                    let row = (c * self.kernel_h + ky) * self.kernel_w + kx;
                    // ox range with 0 <= ox*s + kx - pad < width
                    let lo = if kx >= pad { 0 } else { (pad - kx).div_ceil(s) };
                    let hi = if self.width + pad > kx { ((self.width + pad - kx - 1) / s + 1).min(ow) } else { 0 };
                    if lo >= hi {
                        continue;
                    }
                    for oy in 0..oh {
                        let iy = (oy * s + ky) as isize - pad as isize;
                        if iy < 0 || iy >= self.height as isize {
                            continue;
                        }
                        let ix = lo * s + kx - pad;
                        let off = (c * self.height + iy as usize) * self.width + ix;
                        f(row, oy * ow + lo, off, hi - lo);
                    }
                }
            }
        }
    }
}

fn im2col(geo: &ConvGeometry, sample: &[f64], cols: &mut [f64]) {
    cols.fill(0.0);
    let (p, s) = (geo.positions(), geo.stride);
    geo.for_each_run(|row, pos, off, len| {
        let dst = &mut cols[row * p + pos..row * p + pos + len];
        if s == 1 {
            dst.copy_from_slice(&sample[off..off + len]);
        } else {
            for (j, d) in dst.iter_mut().enumerate() {
                *d = sample[off + j * s];
            }
        }
    });
}

fn col2im_add(geo: &ConvGeometry, cols: &[f64], sample_grad: &mut [f64]) {
    let (p, s) = (geo.positions(), geo.stride);
    geo.for_each_run(|row, pos, off, len| {
        let src = &cols[row * p + pos..row * p + pos + len];
        for (j, v) in src.iter().enumerate() {
            sample_grad[off + j * s] += v;
        }
    });
}

pub fn conv2d_forward(geo: &ConvGeometry, input: &[f64], weight: &[f64]) -> Vec<f64> {
    let (k, p, m) = (geo.patch_len(), geo.positions(), geo.out_channels);
    let in_len = geo.in_channels * geo.height * geo.width;
    let mut out = vec![0.0; geo.batch * m * p];
    let mut cols = vec![0.0; k * p];
    for b in 0..geo.batch {
        im2col(geo, &input[b * in_len..(b + 1) * in_len], &mut cols);
        gemm(m, k, p, 1.0, weight, k, 1, &cols, p, 1, 0.0, &mut out[b * m * p..(b + 1) * m * p], p);
    }
    out
}

/// Returns `(grad_input, grad_weight)`, each computed only when requested.
pub fn conv2d_backward(
    geo: &ConvGeometry,
    input: &[f64],
    weight: &[f64],
    grad_out: &[f64],
    want_input: bool,
    want_weight: bool,
) -> (Option<Vec<f64>>, Option<Vec<f64>>) {
    let (k, p, m) = (geo.patch_len(), geo.positions(), geo.out_channels);
    let in_len = geo.in_channels * geo.height * geo.width;
    let mut gin = want_input.then(|| vec![0.0; input.len()]);
    let mut gw = want_weight.then(|| vec![0.0; weight.len()]);
    let mut cols = vec![0.0; k * p];
    for b in 0..geo.batch {
        let go = &grad_out[b * m * p..(b + 1) * m * p];
        if let Some(gw) = gw.as_mut() {
            im2col(geo, &input[b * in_len..(b + 1) * in_len], &mut cols);
            // gW += gO · colsᵀ
            gemm(m, p, k, 1.0, go, p, 1, &cols, 1, p, 1.0, gw, k);
        }
        if let Some(gin) = gin.as_mut() {
            // gcols = Wᵀ · gO
            gemm(k, m, p, 1.0, weight, 1, k, go, p, 1, 0.0, &mut cols, p);
            col2im_add(geo, &cols, &mut gin[b * in_len..(b + 1) * in_len]);
        }
    }
    (gin, gw)
}

/// Mean over each contiguous run of `hw` values.
pub fn global_avg_pool(input: &[f64], hw: usize) -> Vec<f64> {
    input.chunks(hw).map(|c| c.iter().sum::<f64>() / hw as f64).collect()
}

/// Residual shortcut on NCHW: subsample by `stride`, then zero-pad channels
/// symmetrically to `out_channels`. Returns `(values, shape, low_pad)`.
pub fn shortcut_pad(input: &[f64], shape: &[usize], stride: usize, out_channels: usize) -> (Vec<f64>, [usize; 4], usize) {
    let (b, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    let (oh, ow) = (h.div_ceil(stride), w.div_ceil(stride));
    let pad_lo = (out_channels - c) / 2;
    let mut out = vec![0.0; b * out_channels * oh * ow];
    for bi in 0..b {
        for ci in 0..c {
            for y in 0..oh {
                for xx in 0..ow {
                    out[((bi * out_channels + ci + pad_lo) * oh + y) * ow + xx] =
                        input[((bi * c + ci) * h + y * stride) * w + xx * stride];
                }
            }
        }
    }
    (out, [b, out_channels, oh, ow], pad_lo)
}

/// Max pooling over NCHW. Returns the pooled values and, per output, the flat
/// input index of the winning element (first maximum on ties).
pub fn max_pool2d(
    input: &[f64],
    shape: &[usize],
    kernel: usize,
    stride: usize,
) -> (Vec<f64>, Vec<usize>, [usize; 4]) {
    let (b, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    let oh = (h - kernel) / stride + 1;
    let ow = (w - kernel) / stride + 1;
    let mut out = Vec::with_capacity(b * c * oh * ow);
    let mut arg = Vec::with_capacity(b * c * oh * ow);
    for plane in 0..b * c {
        let base = plane * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = f64::NEG_INFINITY;
                let mut best_i = base + oy * stride * w + ox * stride;
                for ky in 0..kernel {
                    for kx in 0..kernel {
                        let i = base + (oy * stride + ky) * w + ox * stride + kx;
                        if input[i] > best {
                            best = input[i];
                            best_i = i;
                        }
                    }
                }
                out.push(best);
                arg.push(best_i);
            }
        }
    }
    (out, arg, [b, c, oh, ow])
}

/// Softmax along the middle axis of an `[outer, axis, inner]` view.
pub fn softmax(input: &[f64], outer: usize, axis: usize, inner: usize) -> Vec<f64> {
    let mut out = vec![0.0; input.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |j: usize| (o * axis + j) * inner + i;
            let max = (0..axis).map(|j| input[at(j)]).fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for j in 0..axis {
                let e = (input[at(j)] - max).exp();
                out[at(j)] = e;
                sum += e;
            }
            for j in 0..axis {
                out[at(j)] /= sum;
            }
        }
    }
    out
}

/// Splits `shape` around `axis` into `(outer, axis_len, inner)`.
pub fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}
