//! Pure tensor math used by the autodiff tape: convolution, matrix
//! multiply, resampling and their adjoints. All loops are single-threaded
//! and deterministic; accumulation order is fixed by construction.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub struct ConvDims {
    pub batch: usize,
    pub c_in: usize,
    pub h_in: usize,
    pub w_in: usize,
    pub c_out: usize,
    pub kh: usize,
    pub kw: usize,
    pub h_out: usize,
    pub w_out: usize,
}

pub fn conv2d_dims<F: Scalar>(
    x: &Tensor<F>,
    w: &Tensor<F>,
    b: &Tensor<F>,
    stride: usize,
    pad: usize,
) -> Result<ConvDims> {
    if x.rank() != 4 || w.rank() != 4 {
        return Err(Error::ShapeMismatch {
            op: "conv2d",
            lhs: x.shape().to_vec(),
            rhs: w.shape().to_vec(),
        });
    }
    let (batch, c_in, h_in, w_in) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (c_out, wc_in, kh, kw) = (w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]);
    if wc_in != c_in {
        return Err(Error::ChannelMismatch {
            op: "conv2d",
            expected: wc_in,
            got: c_in,
        });
    }
    if b.shape() != [c_out] {
        return Err(Error::ShapeMismatch {
            op: "conv2d bias",
            lhs: b.shape().to_vec(),
            rhs: vec![c_out],
        });
    }
    if stride == 0 || h_in + 2 * pad < kh || w_in + 2 * pad < kw {
        return Err(Error::InvalidConfig(format!(
            "conv2d produces non-positive output for input {:?}, kernel {:?}, stride {stride}, pad {pad}",
            x.shape(),
            w.shape()
        )));
    }
    Ok(ConvDims {
        batch,
        c_in,
        h_in,
        w_in,
        c_out,
        kh,
        kw,
        h_out: (h_in + 2 * pad - kh) / stride + 1,
        w_out: (w_in + 2 * pad - kw) / stride + 1,
    })
}

/// Standard cross-correlation, NCHW input, OIHW kernel, per-output-channel
/// bias. The bias seeds the accumulator so folded-bias outputs stay
/// bit-identical to unfolded ones.
pub fn conv2d_forward<F: Scalar>(
    x: &Tensor<F>,
    w: &Tensor<F>,
    b: &Tensor<F>,
    stride: usize,
    pad: usize,
) -> Result<Tensor<F>> {
    let d = conv2d_dims(x, w, b, stride, pad)?;
    let xd = x.data();
    let wd = w.data();
    let bd = b.data();
    let mut out = vec![F::zero(); d.batch * d.c_out * d.h_out * d.w_out];
    let x_chan = d.h_in * d.w_in;
    let w_chan = d.kh * d.kw;
    for n in 0..d.batch {
        let x_img = &xd[n * d.c_in * x_chan..(n + 1) * d.c_in * x_chan];
        for co in 0..d.c_out {
            let w_filt = &wd[co * d.c_in * w_chan..(co + 1) * d.c_in * w_chan];
            let out_base = ((n * d.c_out) + co) * d.h_out * d.w_out;
            for ho in 0..d.h_out {
                for wo in 0..d.w_out {
                    let mut acc = bd[co];
                    for ci in 0..d.c_in {
                        let x_plane = &x_img[ci * x_chan..(ci + 1) * x_chan];
                        let w_plane = &w_filt[ci * w_chan..(ci + 1) * w_chan];
                        for kh in 0..d.kh {
                            let ih = (ho * stride + kh) as isize - pad as isize;
                            if ih < 0 || ih >= d.h_in as isize {
                                continue;
                            }
                            let x_row = &x_plane[ih as usize * d.w_in..(ih as usize + 1) * d.w_in];
                            let w_row = &w_plane[kh * d.kw..(kh + 1) * d.kw];
                            for kw in 0..d.kw {
                                let iw = (wo * stride + kw) as isize - pad as isize;
                                if iw < 0 || iw >= d.w_in as isize {
                                    continue;
                                }
                                acc += x_row[iw as usize] * w_row[kw];
                            }
                        }
                    }
                    out[out_base + ho * d.w_out + wo] = acc;
                }
            }
        }
    }
    Tensor::new(
        vec![d.batch, d.c_out, d.h_out, d.w_out],
        out,
    )
}

/// Adjoint of [`conv2d_forward`]; accumulates into the provided gradient
/// buffers (which must be zero-initialized or hold prior accumulation).
pub fn conv2d_backward<F: Scalar>(
    x: &Tensor<F>,
    w: &Tensor<F>,
    stride: usize,
    pad: usize,
    grad_out: &Tensor<F>,
    grad_x: Option<&mut Tensor<F>>,
    grad_w: Option<&mut Tensor<F>>,
    grad_b: Option<&mut Tensor<F>>,
) {
    let (batch, c_in, h_in, w_in) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (c_out, _, kh_n, kw_n) = (w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]);
    let (h_out, w_out) = (grad_out.shape()[2], grad_out.shape()[3]);
    let xd = x.data();
    let wd = w.data();
    let gd = grad_out.data();
    let x_chan = h_in * w_in;
    let w_chan = kh_n * kw_n;

    if let Some(gb) = grad_b {
        let gb = gb.data_mut();
        for n in 0..batch {
            for co in 0..c_out {
                let base = ((n * c_out) + co) * h_out * w_out;
                for g in &gd[base..base + h_out * w_out] {
                    gb[co] += *g;
                }
            }
        }
    }

    if let Some(gw) = grad_w {
        let gw = gw.data_mut();
        for n in 0..batch {
            let x_img = &xd[n * c_in * x_chan..(n + 1) * c_in * x_chan];
            for co in 0..c_out {
                let out_base = ((n * c_out) + co) * h_out * w_out;
                for ho in 0..h_out {
                    for wo in 0..w_out {
                        let g = gd[out_base + ho * w_out + wo];
                        if g == F::zero() {
                            continue;
                        }
                        for ci in 0..c_in {
                            let x_plane = &x_img[ci * x_chan..(ci + 1) * x_chan];
                            let gw_plane =
                                &mut gw[(co * c_in + ci) * w_chan..(co * c_in + ci + 1) * w_chan];
                            for kh in 0..kh_n {
                                let ih = (ho * stride + kh) as isize - pad as isize;
                                if ih < 0 || ih >= h_in as isize {
                                    continue;
                                }
                                for kw in 0..kw_n {
                                    let iw = (wo * stride + kw) as isize - pad as isize;
                                    if iw < 0 || iw >= w_in as isize {
                                        continue;
                                    }
                                    gw_plane[kh * kw_n + kw] +=
                                        g * x_plane[ih as usize * w_in + iw as usize];
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    if let Some(gx) = grad_x {
        let gx = gx.data_mut();
        for n in 0..batch {
            for co in 0..c_out {
                let w_filt = &wd[co * c_in * w_chan..(co + 1) * c_in * w_chan];
                let out_base = ((n * c_out) + co) * h_out * w_out;
                for ho in 0..h_out {
                    for wo in 0..w_out {
                        let g = gd[out_base + ho * w_out + wo];
                        if g == F::zero() {
                            continue;
                        }
                        for ci in 0..c_in {
                            let gx_plane =
                                &mut gx[(n * c_in + ci) * x_chan..(n * c_in + ci + 1) * x_chan];
                            let w_plane = &w_filt[ci * w_chan..(ci + 1) * w_chan];
                            for kh in 0..kh_n {
                                let ih = (ho * stride + kh) as isize - pad as isize;
                                if ih < 0 || ih >= h_in as isize {
                                    continue;
                                }
                                for kw in 0..kw_n {
                                    let iw = (wo * stride + kw) as isize - pad as isize;
                                    if iw < 0 || iw >= w_in as isize {
                                        continue;
                                    }
                                    gx_plane[ih as usize * w_in + iw as usize] +=
                                        g * w_plane[kh * kw_n + kw];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

/// 2-D matrix product, optionally transposing either side.
pub fn matmul<F: Scalar>(
    a: &Tensor<F>,
    b: &Tensor<F>,
    ta: bool,
    tb: bool,
) -> Result<Tensor<F>> {
    if a.rank() != 2 || b.rank() != 2 {
        return Err(Error::ShapeMismatch {
            op: "matmul",
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    let (m, ka) = if ta {
        (a.shape()[1], a.shape()[0])
    } else {
        (a.shape()[0], a.shape()[1])
    };
    let (kb, n) = if tb {
        (b.shape()[1], b.shape()[0])
    } else {
        (b.shape()[0], b.shape()[1])
    };
    if ka != kb {
        return Err(Error::ShapeMismatch {
            op: "matmul",
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    let ad = a.data();
    let bd = b.data();
    let (a_rs, a_cs) = if ta {
        (1, a.shape()[1])
    } else {
        (a.shape()[1], 1)
    };
    let (b_rs, b_cs) = if tb {
        (1, b.shape()[1])
    } else {
        (b.shape()[1], 1)
    };
    let mut out = vec![F::zero(); m * n];
    for i in 0..m {
        for j in 0..n {
            let mut acc = F::zero();
            for k in 0..ka {
                acc += ad[i * a_rs + k * a_cs] * bd[k * b_rs + j * b_cs];
            }
            out[i * n + j] = acc;
        }
    }
    Tensor::new(vec![m, n], out)
}

/// Nearest-neighbour 2x upsample on NCHW.
pub fn upsample2x_forward<F: Scalar>(x: &Tensor<F>) -> Result<Tensor<F>> {
    if x.rank() != 4 {
        return Err(Error::ShapeMismatch {
            op: "upsample2x",
            lhs: x.shape().to_vec(),
            rhs: vec![],
        });
    }
    let (n, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let xd = x.data();
    let mut out = vec![F::zero(); n * c * 4 * h * w];
    let (h2, w2) = (2 * h, 2 * w);
    for nc in 0..n * c {
        let src = &xd[nc * h * w..(nc + 1) * h * w];
        let dst = &mut out[nc * h2 * w2..(nc + 1) * h2 * w2];
        for i in 0..h2 {
            for j in 0..w2 {
                dst[i * w2 + j] = src[(i / 2) * w + j / 2];
            }
        }
    }
    Tensor::new(vec![n, c, h2, w2], out)
}

pub fn upsample2x_backward<F: Scalar>(grad_out: &Tensor<F>, grad_x: &mut Tensor<F>) {
    let (n, c, h2, w2) = (
        grad_out.shape()[0],
        grad_out.shape()[1],
        grad_out.shape()[2],
        grad_out.shape()[3],
    );
    let w = w2 / 2;
    let gd = grad_out.data();
    let gx = grad_x.data_mut();
    for nc in 0..n * c {
        let src = &gd[nc * h2 * w2..(nc + 1) * h2 * w2];
        let dst = &mut gx[nc * (h2 / 2) * w..(nc + 1) * (h2 / 2) * w];
        for i in 0..h2 {
            for j in 0..w2 {
                dst[(i / 2) * w + j / 2] += src[i * w2 + j];
            }
        }
    }
}

/// Spatial mean over H and W: `[N,C,H,W] -> [N,C]`.
pub fn global_avg_pool_forward<F: Scalar>(x: &Tensor<F>) -> Result<Tensor<F>> {
    if x.rank() != 4 {
        return Err(Error::ShapeMismatch {
            op: "global_avg_pool",
            lhs: x.shape().to_vec(),
            rhs: vec![],
        });
    }
    let (n, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let inv = F::from_f64(1.0 / (h * w) as f64);
    let xd = x.data();
    let mut out = Vec::with_capacity(n * c);
    for nc in 0..n * c {
        let mut acc = F::zero();
        for v in &xd[nc * h * w..(nc + 1) * h * w] {
            acc += *v;
        }
        out.push(acc * inv);
    }
    Tensor::new(vec![n, c], out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Direct six-nested-loop convolution used as an independent oracle.
    fn conv_oracle(
        x: &Tensor<f64>,
        w: &Tensor<f64>,
        b: &Tensor<f64>,
        stride: usize,
        pad: usize,
    ) -> Tensor<f64> {
        let (n_b, ci, h, wi) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
        let (co, _, kh, kw) = (w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]);
        let ho = (h + 2 * pad - kh) / stride + 1;
        let wo = (wi + 2 * pad - kw) / stride + 1;
        let mut out = Tensor::zeros(&[n_b, co, ho, wo]);
        for n in 0..n_b {
            for o in 0..co {
                for y in 0..ho {
                    for xo in 0..wo {
                        let mut acc = b.data()[o];
                        for c in 0..ci {
                            for dy in 0..kh {
                                for dx in 0..kw {
                                    let iy = (y * stride + dy) as isize - pad as isize;
                                    let ix = (xo * stride + dx) as isize - pad as isize;
                                    if iy < 0 || ix < 0 || iy >= h as isize || ix >= wi as isize {
                                        continue;
                                    }
                                    acc += x.data()
                                        [((n * ci + c) * h + iy as usize) * wi + ix as usize]
                                        * w.data()[((o * ci + c) * kh + dy) * kw + dx];
                                }
                            }
                        }
                        out.data_mut()[((n * co + o) * ho + y) * wo + xo] = acc;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn conv2d_identity_1x1() {
        let x = Tensor::<f64>::from_fn(&[1, 1, 3, 3], |i| i as f64);
        let w = Tensor::ones(&[1, 1, 1, 1]);
        let b = Tensor::zeros(&[1]);
        let y = conv2d_forward(&x, &w, &b, 1, 0).unwrap();
        assert_eq!(y.data(), x.data());
    }

    #[test]
    fn conv2d_counting_kernel() {
        let x = Tensor::<f64>::ones(&[1, 1, 3, 3]);
        let w = Tensor::ones(&[1, 1, 3, 3]);
        let b = Tensor::zeros(&[1]);
        let y = conv2d_forward(&x, &w, &b, 1, 0).unwrap();
        assert_eq!(y.shape(), &[1, 1, 1, 1]);
        assert_eq!(y.item(), 9.0);
    }

    #[test]
    fn conv2d_matches_nested_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        for &(stride, pad) in &[(1usize, 0usize), (1, 1), (2, 1)] {
            let x = Tensor::<f64>::randn(&[2, 3, 7, 6], 0.0, 1.0, &mut rng);
            let w = Tensor::<f64>::randn(&[4, 3, 3, 3], 0.0, 1.0, &mut rng);
            let b = Tensor::<f64>::randn(&[4], 0.0, 1.0, &mut rng);
            let got = conv2d_forward(&x, &w, &b, stride, pad).unwrap();
            let want = conv_oracle(&x, &w, &b, stride, pad);
            assert_eq!(got.shape(), want.shape());
            assert_eq!(got.max_abs_diff(&want).unwrap(), 0.0);
        }
    }

    #[test]
    fn conv2d_rejects_channel_mismatch() {
        let x = Tensor::<f64>::ones(&[1, 3, 4, 4]);
        let w = Tensor::<f64>::ones(&[2, 4, 3, 3]);
        let b = Tensor::<f64>::zeros(&[2]);
        assert!(matches!(
            conv2d_forward(&x, &w, &b, 1, 1),
            Err(Error::ChannelMismatch { .. })
        ));
    }

    #[test]
    fn matmul_hand_case_and_identity() {
        let a = Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let v = Tensor::new(vec![2, 1], vec![5.0, 6.0]).unwrap();
        let out = matmul(&a, &v, false, false).unwrap();
        assert_eq!(out.data(), &[17.0, 39.0]);
        let eye = Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let idv = matmul(&eye, &v, false, false).unwrap();
        assert_eq!(idv.data(), v.data());
    }

    #[test]
    fn matmul_transpose_flags() {
        let a = Tensor::new(vec![2, 3], vec![1., 2., 3., 4., 5., 6.]).unwrap();
        let b = Tensor::new(vec![2, 3], vec![7., 8., 9., 10., 11., 12.]).unwrap();
        // a^T b : [3,2]x[2,3] -> [3,3]
        let out = matmul(&a, &b, true, false).unwrap();
        assert_eq!(out.shape(), &[3, 3]);
        assert_eq!(out.data()[0], 1. * 7. + 4. * 10.);
        // a b^T : [2,3]x[3,2] -> [2,2]
        let out2 = matmul(&a, &b, false, true).unwrap();
        assert_eq!(out2.data()[0], 1. * 7. + 2. * 8. + 3. * 9.);
    }

    #[test]
    fn upsample_and_pool_shapes() {
        let x = Tensor::<f64>::from_fn(&[1, 2, 2, 2], |i| i as f64);
        let up = upsample2x_forward(&x).unwrap();
        assert_eq!(up.shape(), &[1, 2, 4, 4]);
        assert_eq!(up.data()[0], 0.0);
        assert_eq!(up.data()[1], 0.0);
        assert_eq!(up.data()[2], 1.0);
        let pooled = global_avg_pool_forward(&x).unwrap();
        assert_eq!(pooled.shape(), &[1, 2]);
        assert_eq!(pooled.data()[0], (0.0 + 1.0 + 2.0 + 3.0) / 4.0);
    }
}
