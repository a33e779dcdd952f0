//! 2D convolution with stride, dilation, and same/valid padding.
//!
//! Lowering: im2col into a pixel-major matrix `cols[B*OH*OW, C*KH*KW]`
//! followed by one GEMM against the weights viewed as `[C*KH*KW, OC]`.
//! That orientation (many rows, few columns) is the fast one for the GEMM
//! kernel on the shapes these models produce. 1x1 stride-1 convolutions
//! skip the lowering and multiply directly on the natural channel-major
//! planes.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::tensor::Tensor4;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Padding {
    /// Pad so that stride-1 output preserves spatial dims; total pad is
    /// dilation*(k-1) per axis, extra pad on the bottom/right when odd.
    Same,
    Valid,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvSpec {
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
    pub dilation: usize,
    pub padding: Padding,
    pub in_channels: usize,
    pub out_channels: usize,
    pub has_bias: bool,
}

impl ConvSpec {
    pub fn square(k: usize, in_ch: usize, out_ch: usize) -> Self {
        ConvSpec {
            kernel_h: k,
            kernel_w: k,
            stride: 1,
            dilation: 1,
            padding: Padding::Same,
            in_channels: in_ch,
            out_channels: out_ch,
            has_bias: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.kernel_h == 0 || self.kernel_w == 0 || self.stride == 0 || self.dilation == 0 {
            return Err(Error::InvalidArgument(format!(
                "conv spec dims must be >= 1: {self:?}"
            )));
        }
        if self.in_channels == 0 || self.out_channels == 0 {
            return Err(Error::InvalidArgument("conv channels must be >= 1".into()));
        }
        Ok(())
    }

    /// Effective kernel extent after dilation.
    fn effective(&self) -> (usize, usize) {
        (
            self.dilation * (self.kernel_h - 1) + 1,
            self.dilation * (self.kernel_w - 1) + 1,
        )
    }

    fn pad_total(&self) -> (usize, usize) {
        match self.padding {
            Padding::Same => (
                self.dilation * (self.kernel_h - 1),
                self.dilation * (self.kernel_w - 1),
            ),
            Padding::Valid => (0, 0),
        }
    }

    /// Output spatial dims: out = floor((in + pad - dil*(k-1) - 1)/stride) + 1.
    pub fn out_dims(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let (eff_h, eff_w) = self.effective();
        let (pad_h, pad_w) = self.pad_total();
        if h + pad_h < eff_h || w + pad_w < eff_w {
            return Err(Error::KernelExceedsInput(format!(
                "effective kernel {eff_h}x{eff_w} on padded input {}x{}",
                h + pad_h,
                w + pad_w
            )));
        }
        Ok((
            (h + pad_h - eff_h) / self.stride + 1,
            (w + pad_w - eff_w) / self.stride + 1,
        ))
    }

    /// Pad applied before the first row/column; the remainder goes after.
    fn pad_begin(&self) -> (isize, isize) {
        let (pad_h, pad_w) = self.pad_total();
        ((pad_h / 2) as isize, (pad_w / 2) as isize)
    }

    pub fn weight_shape(&self) -> [usize; 4] {
        [
            self.out_channels,
            self.in_channels,
            self.kernel_h,
            self.kernel_w,
        ]
    }

    /// Multiply-accumulate count for one forward pass at the given input dims.
    pub fn macs(&self, batch: usize, h: usize, w: usize) -> Result<u64> {
        let (oh, ow) = self.out_dims(h, w)?;
        Ok((batch * oh * ow) as u64
            * (self.out_channels * self.in_channels * self.kernel_h * self.kernel_w) as u64)
    }
}

/// Forward cache consumed by [`conv2d_backward`].
#[derive(Debug, Clone)]
pub struct ConvCache {
    in_shape: [usize; 4],
    out_hw: (usize, usize),
    /// Lowered input, absent on the 1x1 fast path.
    cols: Option<Vec<f64>>,
    /// Input copy kept by the 1x1 fast path for the weight gradient.
    input: Option<Tensor4>,
}

#[inline]
#[allow(clippy::too_many_arguments)]
unsafe fn dgemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    rsa: isize,
    csa: isize,
    b: &[f64],
    rsb: isize,
    csb: isize,
    beta: f64,
    c: &mut [f64],
    rsc: isize,
    csc: isize,
) {
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
        rsc,
        csc,
    )
}

fn is_pointwise(spec: &ConvSpec) -> bool {
    spec.kernel_h == 1 && spec.kernel_w == 1 && spec.stride == 1
}

/// Lowers `input` into `cols[B*OH*OW, C*KH*KW]`, zero-filling out-of-bounds taps.
fn im2col(input: &Tensor4, spec: &ConvSpec, oh: usize, ow: usize) -> Vec<f64> {
    let [batch, ch, h, w] = input.shape();
    let (kh, kw, stride, dil) = (spec.kernel_h, spec.kernel_w, spec.stride, spec.dilation);
    let (pad_top, pad_left) = spec.pad_begin();
    let k_total = ch * kh * kw;
    let rows_per_item = oh * ow;
    let mut cols = vec![0.0f64; batch * rows_per_item * k_total];

    let in_data = input.data();
    cols.par_chunks_mut(rows_per_item * k_total)
        .enumerate()
        .for_each(|(b, item_cols)| {
            let in_item = &in_data[b * ch * h * w..(b + 1) * ch * h * w];
            for oy in 0..oh {
                let iy0 = (oy * stride) as isize - pad_top;
                for ox in 0..ow {
                    let ix0 = (ox * stride) as isize - pad_left;
                    let row = &mut item_cols[(oy * ow + ox) * k_total..(oy * ow + ox + 1) * k_total];
                    let mut slot = 0usize;
                    for c in 0..ch {
                        let plane = &in_item[c * h * w..(c + 1) * h * w];
                        for ky in 0..kh {
                            let iy = iy0 + (ky * dil) as isize;
                            if iy < 0 || iy >= h as isize {
                                slot += kw;
                                continue;
                            }
                            let in_row = &plane[iy as usize * w..(iy as usize + 1) * w];
                            for kx in 0..kw {
                                let ix = ix0 + (kx * dil) as isize;
                                if ix >= 0 && ix < w as isize {
                                    row[slot] = in_row[ix as usize];
                                }
                                slot += 1;
                            }
                        }
                    }
                }
            }
        });
    cols
}

/// Scatter-adds `cols`-shaped gradients back onto an input-shaped tensor.
fn col2im(grad_cols: &[f64], spec: &ConvSpec, in_shape: [usize; 4], oh: usize, ow: usize) -> Tensor4 {
    let [batch, ch, h, w] = in_shape;
    let (kh, kw, stride, dil) = (spec.kernel_h, spec.kernel_w, spec.stride, spec.dilation);
    let (pad_top, pad_left) = spec.pad_begin();
    let k_total = ch * kh * kw;
    let rows_per_item = oh * ow;
    let mut grad = Tensor4::zeros(in_shape);

    let out = grad.data_mut();
    out.par_chunks_mut(ch * h * w)
        .enumerate()
        .for_each(|(b, g_item)| {
            let item_cols = &grad_cols[b * rows_per_item * k_total..(b + 1) * rows_per_item * k_total];
            for oy in 0..oh {
                let iy0 = (oy * stride) as isize - pad_top;
                for ox in 0..ow {
                    let ix0 = (ox * stride) as isize - pad_left;
                    let row = &item_cols[(oy * ow + ox) * k_total..(oy * ow + ox + 1) * k_total];
                    let mut slot = 0usize;
                    for c in 0..ch {
                        let plane = &mut g_item[c * h * w..(c + 1) * h * w];
                        for ky in 0..kh {
                            let iy = iy0 + (ky * dil) as isize;
                            if iy < 0 || iy >= h as isize {
                                slot += kw;
                                continue;
                            }
                            let g_row = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                            for kx in 0..kw {
                                let ix = ix0 + (kx * dil) as isize;
                                if ix >= 0 && ix < w as isize {
                                    g_row[ix as usize] += row[slot];
                                }
                                slot += 1;
                            }
                        }
                    }
                }
            }
        });
    grad
}

/// Convolution forward pass. `weight` is `[OC, C, KH, KW]`, `bias` is
/// `[1, OC, 1, 1]` and only read when the spec has a bias.
pub fn conv2d_forward(
    input: &Tensor4,
    spec: &ConvSpec,
    weight: &Tensor4,
    bias: Option<&Tensor4>,
    cache: Option<&mut Option<ConvCache>>,
) -> Result<Tensor4> {
    spec.validate()?;
    let [batch, ch, h, w] = input.shape();
    if ch != spec.in_channels {
        return Err(Error::ShapeMismatch {
            left: format!("input channels {ch}"),
            right: format!("spec in_channels {}", spec.in_channels),
        });
    }
    debug_assert_eq!(weight.shape(), spec.weight_shape());
    let (oh, ow) = spec.out_dims(h, w)?;
    let oc = spec.out_channels;
    let mut output = Tensor4::zeros([batch, oc, oh, ow]);

    if is_pointwise(spec) {
        // out[b] (OC, H*W) = W (OC, C) @ in[b] (C, H*W), all natural layouts.
        let hw = h * w;
        let in_data = input.data();
        let w_data = weight.data();
        output
            .data_mut()
            .par_chunks_mut(oc * hw)
            .enumerate()
            .for_each(|(b, out_item)| {
                let in_item = &in_data[b * ch * hw..(b + 1) * ch * hw];
                unsafe {
                    dgemm(
                        oc, ch, hw, w_data, ch as isize, 1, in_item, hw as isize, 1, 0.0,
                        out_item, hw as isize, 1,
                    );
                }
            });
        if let Some(c) = cache {
            *c = Some(ConvCache {
                in_shape: input.shape(),
                out_hw: (oh, ow),
                cols: None,
                input: Some(input.clone()),
            });
        }
    } else {
        let k_total = ch * spec.kernel_h * spec.kernel_w;
        let npix = batch * oh * ow;
        let cols = im2col(input, spec, oh, ow);
        // out_pix (NPIX, OC) = cols (NPIX, K) @ W^T (K, OC); W is (OC, K) row-major.
        let mut out_pix = vec![0.0f64; npix * oc];
        unsafe {
            dgemm(
                npix,
                k_total,
                oc,
                &cols,
                k_total as isize,
                1,
                weight.data(),
                1,
                k_total as isize,
                0.0,
                &mut out_pix,
                oc as isize,
                1,
            );
        }
        // Transpose pixel-major back to (B, OC, OH, OW).
        let ohw = oh * ow;
        output
            .data_mut()
            .par_chunks_mut(oc * ohw)
            .enumerate()
            .for_each(|(b, out_item)| {
                let pix_item = &out_pix[b * ohw * oc..(b + 1) * ohw * oc];
                for (p, px) in pix_item.chunks_exact(oc).enumerate() {
                    for (o, &v) in px.iter().enumerate() {
                        out_item[o * ohw + p] = v;
                    }
                }
            });
        if let Some(c) = cache {
            *c = Some(ConvCache {
                in_shape: input.shape(),
                out_hw: (oh, ow),
                cols: Some(cols),
                input: None,
            });
        }
    }

    if spec.has_bias {
        let bias = bias.ok_or_else(|| Error::InvalidArgument("conv bias tensor missing".into()))?;
        let ohw = oh * ow;
        for b in 0..batch {
            for o in 0..oc {
                let bv = bias.data()[o];
                let start = (b * oc + o) * ohw;
                for v in &mut output.data_mut()[start..start + ohw] {
                    *v += bv;
                }
            }
        }
    }
    Ok(output)
}

/// Gradients of a scalar sum-loss with respect to input, weight, and bias.
/// `need_input_grad` skips the input gradient for graph entry layers.
pub fn conv2d_backward(
    grad_out: &Tensor4,
    spec: &ConvSpec,
    weight: &Tensor4,
    cache: Option<&ConvCache>,
    need_input_grad: bool,
) -> Result<(Option<Tensor4>, Tensor4, Option<Tensor4>)> {
    let cache = cache.ok_or(Error::BackwardBeforeForward)?;
    let [batch, ch, h, w] = cache.in_shape;
    let (oh, ow) = cache.out_hw;
    let oc = spec.out_channels;
    if grad_out.shape() != [batch, oc, oh, ow] {
        return Err(Error::ShapeMismatch {
            left: format!("{:?}", grad_out.shape()),
            right: format!("{:?}", [batch, oc, oh, ow]),
        });
    }

    let grad_bias = if spec.has_bias {
        let mut gb = Tensor4::zeros([1, oc, 1, 1]);
        let ohw = oh * ow;
        for b in 0..batch {
            for o in 0..oc {
                let start = (b * oc + o) * ohw;
                gb.data_mut()[o] += grad_out.data()[start..start + ohw].iter().sum::<f64>();
            }
        }
        Some(gb)
    } else {
        None
    };

    if let Some(input) = &cache.input {
        // 1x1 fast path.
        let hw = h * w;
        let mut grad_w = Tensor4::zeros(spec.weight_shape());
        for b in 0..batch {
            let go_item = &grad_out.data()[b * oc * hw..(b + 1) * oc * hw];
            let in_item = &input.data()[b * ch * hw..(b + 1) * ch * hw];
            // gW (OC, C) += gO[b] (OC, HW) @ in[b]^T (HW, C)
            unsafe {
                dgemm(
                    oc, hw, ch, go_item, hw as isize, 1, in_item, 1, hw as isize, 1.0,
                    grad_w.data_mut(), ch as isize, 1,
                );
            }
        }
        let grad_input = if need_input_grad {
            let mut gi = Tensor4::zeros(cache.in_shape);
            let w_data = weight.data();
            let go_data = grad_out.data();
            gi.data_mut()
                .par_chunks_mut(ch * hw)
                .enumerate()
                .for_each(|(b, gi_item)| {
                    let go_item = &go_data[b * oc * hw..(b + 1) * oc * hw];
                    // gIn[b] (C, HW) = W^T (C, OC) @ gO[b] (OC, HW)
                    unsafe {
                        dgemm(
                            ch, oc, hw, w_data, 1, ch as isize, go_item, hw as isize, 1, 0.0,
                            gi_item, hw as isize, 1,
                        );
                    }
                });
            Some(gi)
        } else {
            None
        };
        return Ok((grad_input, grad_w, grad_bias));
    }

    let cols = cache
        .cols
        .as_ref()
        .ok_or(Error::BackwardBeforeForward)?;
    let k_total = ch * spec.kernel_h * spec.kernel_w;
    let npix = batch * oh * ow;
    let ohw = oh * ow;

    // Pixel-major view of grad_out: g_pix (NPIX, OC).
    let mut g_pix = vec![0.0f64; npix * oc];
    g_pix
        .par_chunks_mut(ohw * oc)
        .enumerate()
        .for_each(|(b, gp_item)| {
            let go_item = &grad_out.data()[b * oc * ohw..(b + 1) * oc * ohw];
            for o in 0..oc {
                let src = &go_item[o * ohw..(o + 1) * ohw];
                for (p, &v) in src.iter().enumerate() {
                    gp_item[p * oc + o] = v;
                }
            }
        });

    // gW^T (K, OC) = cols^T (K, NPIX) @ g_pix (NPIX, OC), then transpose out.
    let mut gwt = vec![0.0f64; k_total * oc];
    unsafe {
        dgemm(
            k_total,
            npix,
            oc,
            cols,
            1,
            k_total as isize,
            &g_pix,
            oc as isize,
            1,
            0.0,
            &mut gwt,
            oc as isize,
            1,
        );
    }
    let mut grad_w = Tensor4::zeros(spec.weight_shape());
    {
        let gw = grad_w.data_mut();
        for k in 0..k_total {
            for o in 0..oc {
                gw[o * k_total + k] = gwt[k * oc + o];
            }
        }
    }

    let grad_input = if need_input_grad {
        // g_cols (NPIX, K) = g_pix (NPIX, OC) @ W (OC, K)
        let mut g_cols = vec![0.0f64; npix * k_total];
        unsafe {
            dgemm(
                npix,
                oc,
                k_total,
                &g_pix,
                oc as isize,
                1,
                weight.data(),
                k_total as isize,
                1,
                0.0,
                &mut g_cols,
                k_total as isize,
                1,
            );
        }
        Some(col2im(&g_cols, spec, cache.in_shape, oh, ow))
    } else {
        None
    };

    Ok((grad_input, grad_w, grad_bias))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ones_kernel(spec: &ConvSpec) -> Tensor4 {
        Tensor4::filled(spec.weight_shape(), 1.0)
    }

    #[test]
    fn same_padding_border_sums() {
        // 5x5 ones, 3x3 ones kernel, same padding: center 9, corners 4.
        let spec = ConvSpec {
            has_bias: false,
            ..ConvSpec::square(3, 1, 1)
        };
        let input = Tensor4::filled([1, 1, 5, 5], 1.0);
        let out = conv2d_forward(&input, &spec, &ones_kernel(&spec), None, None).unwrap();
        assert_eq!(out.shape(), [1, 1, 5, 5]);
        assert_eq!(out.at(0, 0, 2, 2), 9.0);
        assert_eq!(out.at(0, 0, 0, 0), 4.0);
        assert_eq!(out.at(0, 0, 0, 4), 4.0);
        assert_eq!(out.at(0, 0, 4, 4), 4.0);
        assert_eq!(out.at(0, 0, 0, 2), 6.0);
    }

    #[test]
    fn identity_1x1() {
        let spec = ConvSpec {
            has_bias: true,
            ..ConvSpec::square(1, 1, 1)
        };
        let input = Tensor4::new([1, 1, 3, 3], (0..9).map(f64::from).collect()).unwrap();
        let weight = Tensor4::filled(spec.weight_shape(), 1.0);
        let bias = Tensor4::zeros([1, 1, 1, 1]);
        let out = conv2d_forward(&input, &spec, &weight, Some(&bias), None).unwrap();
        assert_eq!(out, input);
    }

    #[test]
    fn dilated_valid_shape() {
        // 7x7 input, 3x3 kernel, dilation 2, valid: effective kernel 5 -> 3x3 out.
        let spec = ConvSpec {
            dilation: 2,
            padding: Padding::Valid,
            has_bias: false,
            ..ConvSpec::square(3, 1, 1)
        };
        let input = Tensor4::zeros([1, 1, 7, 7]);
        let out = conv2d_forward(&input, &spec, &ones_kernel(&spec), None, None).unwrap();
        assert_eq!(out.shape(), [1, 1, 3, 3]);
    }

    #[test]
    fn kernel_exceeds_input_errors() {
        let spec = ConvSpec {
            padding: Padding::Valid,
            has_bias: false,
            ..ConvSpec::square(5, 1, 1)
        };
        let input = Tensor4::zeros([1, 1, 3, 3]);
        let err = conv2d_forward(&input, &spec, &ones_kernel(&spec), None, None).unwrap_err();
        assert!(matches!(err, Error::KernelExceedsInput(_)));
    }

    #[test]
    fn backward_before_forward_errors() {
        let spec = ConvSpec::square(3, 1, 1);
        let g = Tensor4::zeros([1, 1, 5, 5]);
        let w = ones_kernel(&spec);
        assert!(matches!(
            conv2d_backward(&g, &spec, &w, None, true),
            Err(Error::BackwardBeforeForward)
        ));
    }

    #[test]
    fn zero_grad_out_gives_zero_grads() {
        let spec = ConvSpec {
            has_bias: true,
            ..ConvSpec::square(3, 2, 4)
        };
        let input = crate::rng::rng_normal(5, "x", [2, 2, 6, 6]);
        let weight = crate::rng::rng_normal(5, "w", spec.weight_shape());
        let bias = Tensor4::zeros([1, 4, 1, 1]);
        let mut cache = None;
        conv2d_forward(&input, &spec, &weight, Some(&bias), Some(&mut cache)).unwrap();
        let g = Tensor4::zeros([2, 4, 6, 6]);
        let (gi, gw, gb) =
            conv2d_backward(&g, &spec, &weight, cache.as_ref(), true).unwrap();
        assert!(gi.unwrap().data().iter().all(|&v| v == 0.0));
        assert!(gw.data().iter().all(|&v| v == 0.0));
        assert!(gb.unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn identity_kernel_passes_gradient_through() {
        let spec = ConvSpec {
            has_bias: false,
            ..ConvSpec::square(1, 1, 1)
        };
        let input = crate::rng::rng_normal(6, "x", [1, 1, 4, 4]);
        let weight = Tensor4::filled([1, 1, 1, 1], 1.0);
        let mut cache = None;
        conv2d_forward(&input, &spec, &weight, None, Some(&mut cache)).unwrap();
        let g = crate::rng::rng_normal(6, "g", [1, 1, 4, 4]);
        let (gi, _, _) = conv2d_backward(&g, &spec, &weight, cache.as_ref(), true).unwrap();
        assert_eq!(gi.unwrap(), g);
    }

    #[test]
    fn stride2_same_halves_dims() {
        // Keras-style same padding at stride 2: out = ceil(in / 2).
        let spec = ConvSpec {
            stride: 2,
            has_bias: false,
            ..ConvSpec::square(3, 1, 1)
        };
        assert_eq!(spec.out_dims(64, 64).unwrap(), (32, 32));
        assert_eq!(spec.out_dims(7, 7).unwrap(), (4, 4));
    }
}
