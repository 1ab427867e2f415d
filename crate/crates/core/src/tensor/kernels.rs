//! Value-level numeric kernels shared by the tape and by no-grad utilities.
//!
//! Convolution is cross-correlation (no kernel flip) with zero padding,
//! lowered to a per-sample patch matrix and a GEMM. [`conv2d_direct`] is the
//! plain nested-loop definition the lowered path must agree with.

use super::Tensor;
use crate::error::{shape_err, Result};

/// `c = alpha * a @ b + beta * c` over strided row-major views.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    beta: f64,
    c: &mut [f64],
    (rsc, csc): (usize, usize),
) {
    if m == 0 || n == 0 {
        return;
    }
    let span = |rows: usize, cols: usize, rs: usize, cs: usize| {
        if rows == 0 || cols == 0 {
            0
        } else {
            (rows - 1) * rs + (cols - 1) * cs + 1
        }
    };
    assert!(span(m, k, rsa, csa) <= a.len(), "gemm: lhs out of bounds");
    assert!(span(k, n, rsb, csb) <= b.len(), "gemm: rhs out of bounds");
    assert!(span(m, n, rsc, csc) <= c.len(), "gemm: output out of bounds");
    // SAFETY: every index touched lies inside the slices checked above, and
    // `c` does not alias `a` or `b` (distinct borrows).
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
            csc as isize,
        );
    }
}

/// Geometry of one convolution call.
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
    pub pad: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeometry {
    pub fn new(input: &[usize], weight: &[usize], stride: usize, pad: usize) -> Result<Self> {
        let (&[n, c, h, w], &[k, wc, kh, kw]) = (input, weight) else {
            return shape_err(format!(
                "conv2d expects rank-4 input and weight, got {input:?} and {weight:?}"
            ));
        };
        if c != wc {
            return shape_err(format!(
                "conv2d input has {c} channels but weight {weight:?} expects {wc}"
            ));
        }
        if stride == 0 {
            return shape_err("conv2d stride must be at least 1");
        }
        if kh > h + 2 * pad || kw > w + 2 * pad {
            return shape_err(format!(
                "conv2d kernel {kh}x{kw} larger than padded input {}x{}",
                h + 2 * pad,
                w + 2 * pad
            ));
        }
        Ok(Self {
            batch: n,
            in_channels: c,
            height: h,
            width: w,
            out_channels: k,
            kernel_h: kh,
            kernel_w: kw,
            stride,
            pad,
            out_h: (h + 2 * pad - kh) / stride + 1,
            out_w: (w + 2 * pad - kw) / stride + 1,
        })
    }

    fn patch_len(&self) -> usize {
        self.in_channels * self.kernel_h * self.kernel_w
    }

    fn out_spatial(&self) -> usize {
        self.out_h * self.out_w
    }

    fn in_sample(&self) -> usize {
        self.in_channels * self.height * self.width
    }

    /// 1x1, stride 1, no padding: the input sample already is the patch matrix.
    fn is_pointwise(&self) -> bool {
        self.kernel_h == 1 && self.kernel_w == 1 && self.stride == 1 && self.pad == 0
    }

    pub fn output_shape(&self) -> [usize; 4] {
        [self.batch, self.out_channels, self.out_h, self.out_w]
    }
}

/// Output columns `[lo, hi)` whose input column `ow * stride + kj - pad`
/// falls inside the image.
fn valid_cols(g: &ConvGeometry, kj: usize) -> (usize, usize) {
    let lo = g.pad.saturating_sub(kj).div_ceil(g.stride).min(g.out_w);
    let hi = (g.width + g.pad).saturating_sub(kj).div_ceil(g.stride).min(g.out_w);
    (lo, hi.max(lo))
}

/// Unfolds one `[C, H, W]` sample into a `[C*kh*kw, out_h*out_w]` matrix.
fn im2col(g: &ConvGeometry, x: &[f64], cols: &mut [f64]) {
    let ohw = g.out_spatial();
    let mut row = 0;
    for c in 0..g.in_channels {
        let plane = &x[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ki in 0..g.kernel_h {
            for kj in 0..g.kernel_w {
                let (lo, hi) = valid_cols(g, kj);
                let dst = &mut cols[row * ohw..(row + 1) * ohw];
                for oh in 0..g.out_h {
                    let ih = (oh * g.stride + ki) as isize - g.pad as isize;
                    let out_row = &mut dst[oh * g.out_w..(oh + 1) * g.out_w];
                    if ih < 0 || ih >= g.height as isize {
                        out_row.fill(0.0);
                        continue;
                    }
                    let src = &plane[ih as usize * g.width..(ih as usize + 1) * g.width];
                    out_row[..lo].fill(0.0);
                    out_row[hi..].fill(0.0);
                    if lo < hi {
                        let first = lo * g.stride + kj - g.pad;
                        if g.stride == 1 {
                            out_row[lo..hi].copy_from_slice(&src[first..first + hi - lo]);
                        } else {
                            for (v, &s) in out_row[lo..hi].iter_mut().zip(src[first..].iter().step_by(g.stride)) {
                                *v = s;
                            }
                        }
                    }
                }
                row += 1;
            }
        }
    }
}

/// Scatters (accumulates) a patch-matrix gradient back onto a sample.
fn col2im(g: &ConvGeometry, cols: &[f64], dx: &mut [f64]) {
    let ohw = g.out_spatial();
    let mut row = 0;
    for c in 0..g.in_channels {
        let plane = &mut dx[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ki in 0..g.kernel_h {
            for kj in 0..g.kernel_w {
                let (lo, hi) = valid_cols(g, kj);
                let src = &cols[row * ohw..(row + 1) * ohw];
                for oh in 0..g.out_h {
                    let ih = (oh * g.stride + ki) as isize - g.pad as isize;
                    if ih < 0 || ih >= g.height as isize || lo >= hi {
                        continue;
                    }
                    let dst = &mut plane[ih as usize * g.width..(ih as usize + 1) * g.width];
                    let first = lo * g.stride + kj - g.pad;
                    let grads = &src[oh * g.out_w + lo..oh * g.out_w + hi];
                    for (d, &v) in dst[first..].iter_mut().step_by(g.stride).zip(grads) {
                        *d += v;
                    }
                }
                row += 1;
            }
        }
    }
}

fn check_bias(bias: Option<&Tensor>, out_channels: usize) -> Result<()> {
    if let Some(b) = bias {
        if b.shape() != [out_channels] {
            return shape_err(format!(
                "conv2d bias shape {:?} does not match {out_channels} output channels",
                b.shape()
            ));
        }
    }
    Ok(())
}

pub fn conv2d(
    input: &Tensor,
    weight: &Tensor,
    bias: Option<&Tensor>,
    stride: usize,
    pad: usize,
) -> Result<Tensor> {
    let g = ConvGeometry::new(input.shape(), weight.shape(), stride, pad)?;
    check_bias(bias, g.out_channels)?;
    let (ohw, plen) = (g.out_spatial(), g.patch_len());
    let out_sample = g.out_channels * ohw;
    let mut out = vec![0.0; g.batch * out_sample];
    let mut cols = if g.is_pointwise() {
        Vec::new()
    } else {
        vec![0.0; plen * ohw]
    };
    for n in 0..g.batch {
        let x = &input.data()[n * g.in_sample()..(n + 1) * g.in_sample()];
        let patches: &[f64] = if g.is_pointwise() {
            x
        } else {
            im2col(&g, x, &mut cols);
            &cols
        };
        let y = &mut out[n * out_sample..(n + 1) * out_sample];
        gemm(
            g.out_channels,
            plen,
            ohw,
            1.0,
            weight.data(),
            (plen, 1),
            patches,
            (ohw, 1),
            0.0,
            y,
            (ohw, 1),
        );
        if let Some(b) = bias {
            for (k, chunk) in y.chunks_mut(ohw).enumerate() {
                let bk = b.data()[k];
                chunk.iter_mut().for_each(|v| *v += bk);
            }
        }
    }
    Tensor::new(g.output_shape().to_vec(), out)
}

/// Gradients of `conv2d` with respect to input, weight and bias, each computed
/// only when requested.
pub struct ConvGrads {
    pub input: Option<Tensor>,
    pub weight: Option<Tensor>,
    pub bias: Option<Tensor>,
}

#[allow(clippy::too_many_arguments)]
pub fn conv2d_backward(
    input: &Tensor,
    weight: &Tensor,
    grad_out: &[f64],
    stride: usize,
    pad: usize,
    need_input: bool,
    need_weight: bool,
    need_bias: bool,
) -> Result<ConvGrads> {
    let g = ConvGeometry::new(input.shape(), weight.shape(), stride, pad)?;
    let (ohw, plen) = (g.out_spatial(), g.patch_len());
    let out_sample = g.out_channels * ohw;
    if grad_out.len() != g.batch * out_sample {
        return shape_err("conv2d backward: output gradient has the wrong length");
    }

    let mut dx = need_input.then(|| vec![0.0; input.len()]);
    let mut dw = need_weight.then(|| vec![0.0; weight.len()]);
    let mut cols = vec![0.0; plen * ohw];
    let mut dcols = if need_input && !g.is_pointwise() {
        vec![0.0; plen * ohw]
    } else {
        Vec::new()
    };

    for n in 0..g.batch {
        let dy = &grad_out[n * out_sample..(n + 1) * out_sample];
        if let Some(dw) = dw.as_mut() {
            let x = &input.data()[n * g.in_sample()..(n + 1) * g.in_sample()];
            let patches: &[f64] = if g.is_pointwise() {
                x
            } else {
                im2col(&g, x, &mut cols);
                &cols
            };
            // dW[K, P] += dY[K, S] @ patches[P, S]^T
            gemm(
                g.out_channels,
                ohw,
                plen,
                1.0,
                dy,
                (ohw, 1),
                patches,
                (1, ohw),
                1.0,
                dw,
                (plen, 1),
            );
        }
        if let Some(dx) = dx.as_mut() {
            let dx_n = &mut dx[n * g.in_sample()..(n + 1) * g.in_sample()];
            // dPatches[P, S] = W[K, P]^T @ dY[K, S]
            if g.is_pointwise() {
                gemm(
                    plen,
                    g.out_channels,
                    ohw,
                    1.0,
                    weight.data(),
                    (1, plen),
                    dy,
                    (ohw, 1),
                    1.0,
                    dx_n,
                    (ohw, 1),
                );
            } else {
                gemm(
                    plen,
                    g.out_channels,
                    ohw,
                    1.0,
                    weight.data(),
                    (1, plen),
                    dy,
                    (ohw, 1),
                    0.0,
                    &mut dcols,
                    (ohw, 1),
                );
                col2im(&g, &dcols, dx_n);
            }
        }
    }

    let db = need_bias.then(|| {
        let mut db = vec![0.0; g.out_channels];
        for n in 0..g.batch {
            for (k, chunk) in grad_out[n * out_sample..(n + 1) * out_sample]
                .chunks(ohw)
                .enumerate()
            {
                db[k] += chunk.iter().sum::<f64>();
            }
        }
        db
    });

    Ok(ConvGrads {
        input: dx.map(|d| Tensor::new(input.shape().to_vec(), d)).transpose()?,
        weight: dw.map(|d| Tensor::new(weight.shape().to_vec(), d)).transpose()?,
        bias: db.map(|d| Tensor::new(vec![g.out_channels], d)).transpose()?,
    })
}

/// Direct nested-loop cross-correlation; the definition `conv2d` must match.
pub fn conv2d_direct(
    input: &Tensor,
    weight: &Tensor,
    bias: Option<&Tensor>,
    stride: usize,
    pad: usize,
) -> Result<Tensor> {
    let g = ConvGeometry::new(input.shape(), weight.shape(), stride, pad)?;
    check_bias(bias, g.out_channels)?;
    let (x, w) = (input.data(), weight.data());
    let mut out = Tensor::zeros(&g.output_shape());
    let o = out.data_mut();
    for n in 0..g.batch {
        for k in 0..g.out_channels {
            for oh in 0..g.out_h {
                for ow in 0..g.out_w {
                    let mut acc = bias.map_or(0.0, |b| b.data()[k]);
                    for c in 0..g.in_channels {
                        for ki in 0..g.kernel_h {
                            for kj in 0..g.kernel_w {
                                let ih = (oh * stride + ki) as isize - pad as isize;
                                let iw = (ow * stride + kj) as isize - pad as isize;
                                if ih < 0
                                    || iw < 0
                                    || ih >= g.height as isize
                                    || iw >= g.width as isize
                                {
                                    continue;
                                }
                                let xi = ((n * g.in_channels + c) * g.height + ih as usize)
                                    * g.width
                                    + iw as usize;
                                let wi = ((k * g.in_channels + c) * g.kernel_h + ki)
                                    * g.kernel_w
                                    + kj;
                                acc += x[xi] * w[wi];
                            }
                        }
                    }
                    o[((n * g.out_channels + k) * g.out_h + oh) * g.out_w + ow] = acc;
                }
            }
        }
    }
    Ok(out)
}

/// `[N, D] @ [D, M] + [M]`.
pub fn linear(input: &Tensor, weight: &Tensor, bias: Option<&Tensor>) -> Result<Tensor> {
    let (n, d) = input.dims2()?;
    let (wd, m) = weight.dims2()?;
    if d != wd {
        return shape_err(format!(
            "linear input {:?} incompatible with weight {:?}",
            input.shape(),
            weight.shape()
        ));
    }
    let mut out = vec![0.0; n * m];
    if let Some(b) = bias {
        if b.shape() != [m] {
            return shape_err(format!(
                "linear bias {:?} does not match {m} outputs",
                b.shape()
            ));
        }
        for row in out.chunks_mut(m) {
            row.copy_from_slice(b.data());
        }
    }
    let beta = if bias.is_some() { 1.0 } else { 0.0 };
    gemm(
        n,
        d,
        m,
        1.0,
        input.data(),
        (d, 1),
        weight.data(),
        (m, 1),
        beta,
        &mut out,
        (m, 1),
    );
    Tensor::new(vec![n, m], out)
}

/// `[N, C, H, W] -> [N, C]` spatial means.
pub fn global_average_pool(input: &Tensor) -> Result<Tensor> {
    let (n, c, h, w) = input.dims4()?;
    let hw = h * w;
    let data = input
        .data()
        .chunks(hw)
        .map(|plane| plane.iter().sum::<f64>() / hw as f64)
        .collect();
    Tensor::new(vec![n, c], data)
}

pub fn softmax_rows(input: &Tensor) -> Result<Tensor> {
    let (_, k) = input.dims2()?;
    let mut out = input.data().to_vec();
    for row in out.chunks_mut(k) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            total += *v;
        }
        row.iter_mut().for_each(|v| *v /= total);
    }
    Tensor::new(input.shape().to_vec(), out)
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_kernel_preserves_input() {
        let x = Tensor::full(&[1, 1, 3, 3], 1.0);
        let w = Tensor::full(&[1, 1, 1, 1], 1.0);
        let y = conv2d(&x, &w, None, 1, 0).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn sum_kernel_on_two_by_two() {
        let x = Tensor::new(vec![1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let w = Tensor::full(&[1, 1, 2, 2], 1.0);
        let y = conv2d(&x, &w, None, 1, 0).unwrap();
        assert_eq!(y.shape(), &[1, 1, 1, 1]);
        assert_eq!(y.item(), 10.0);
    }

    #[test]
    fn output_extent_formula() {
        let g = ConvGeometry::new(&[1, 3, 7, 9], &[4, 3, 3, 3], 2, 1).unwrap();
        assert_eq!((g.out_h, g.out_w), (4, 5));
    }

    #[test]
    fn rejects_channel_mismatch_and_oversized_kernel() {
        let x = Tensor::zeros(&[1, 2, 4, 4]);
        let err = conv2d(&x, &Tensor::zeros(&[1, 3, 3, 3]), None, 1, 1).unwrap_err();
        assert!(err.to_string().contains("channels"), "{err}");
        assert!(conv2d(&x, &Tensor::zeros(&[1, 2, 7, 7]), None, 1, 1).is_err());
        assert!(conv2d(&x, &Tensor::zeros(&[1, 2, 3, 3]), None, 0, 1).is_err());
    }

    #[test]
    fn linear_small_case() {
        let x = Tensor::new(vec![1, 2], vec![1.0, 2.0]).unwrap();
        let w = Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let b = Tensor::new(vec![2], vec![1.0, 1.0]).unwrap();
        assert_eq!(linear(&x, &w, Some(&b)).unwrap().data(), &[2.0, 3.0]);
        assert!(linear(&x, &Tensor::zeros(&[3, 2]), None).is_err());
    }

    #[test]
    fn gap_of_small_map() {
        let x = Tensor::new(vec![1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(global_average_pool(&x).unwrap().data(), &[2.5]);
    }

    #[test]
    fn softmax_is_stable_for_large_logits() {
        let x = Tensor::new(vec![1, 2], vec![1000.0, 0.0]).unwrap();
        let p = softmax_rows(&x).unwrap();
        assert_eq!(p.data()[0], 1.0);
        assert!(p.data()[1] >= 0.0 && p.data()[1] < 1e-300);
        assert!(p.all_finite());
    }

    #[test]
    fn sigmoid_at_zero_and_tails() {
        assert_eq!(sigmoid(0.0), 0.5);
        assert!(sigmoid(-800.0) >= 0.0 && sigmoid(800.0) <= 1.0);
    }
}
