//! 2-D convolutions (cross-correlation form) via im2col + GEMM.
//!
//! Only "valid" convolutions exist here; padding is an explicit movement op,
//! so boundary policy (zero vs reflect) is always visible at the call site.

use ndarray::linalg::general_mat_mul;
use ndarray::{Array2, ArrayD, ArrayView2, ArrayViewMut2, IxDyn};
use rayon::prelude::*;

use super::Tensor;

fn im2col(
    x: &[f64],
    c_in: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    oh: usize,
    ow: usize,
) -> Array2<f64> {
    // Layout: [C*kh*kw, OH*OW]
    let mut cols = Array2::<f64>::zeros((c_in * kh * kw, oh * ow));
    let cols_sl = cols.as_slice_mut().unwrap();
    for c in 0..c_in {
        for ki in 0..kh {
            for kj in 0..kw {
                let row = (c * kh + ki) * kw + kj;
                let base = row * oh * ow;
                for oi in 0..oh {
                    let src = c * h * w + (oi * stride + ki) * w + kj;
                    let dst = base + oi * ow;
                    for oj in 0..ow {
                        cols_sl[dst + oj] = x[src + oj * stride];
                    }
                }
            }
        }
    }
    cols
}

fn col2im_add(
    cols: &Array2<f64>,
    gx: &mut [f64],
    c_in: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    oh: usize,
    ow: usize,
) {
    let cols_sl = cols.as_slice().unwrap();
    for c in 0..c_in {
        for ki in 0..kh {
            for kj in 0..kw {
                let row = (c * kh + ki) * kw + kj;
                let base = row * oh * ow;
                for oi in 0..oh {
                    let dst = c * h * w + (oi * stride + ki) * w + kj;
                    let src = base + oi * ow;
                    for oj in 0..ow {
                        gx[dst + oj * stride] += cols_sl[src + oj];
                    }
                }
            }
        }
    }
}

/// Valid cross-correlation of `[N, C_in, H, W]` with `[C_out, C_in, kh, kw]`.
pub fn conv2d(x: &Tensor, weight: &Tensor, stride: usize) -> Tensor {
    let (n, c_in, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (c_out, c_in2, kh, kw) = (
        weight.shape()[0],
        weight.shape()[1],
        weight.shape()[2],
        weight.shape()[3],
    );
    assert_eq!(c_in, c_in2, "conv2d: channel mismatch");
    assert!(h >= kh && w >= kw, "conv2d: kernel larger than input");
    assert!(stride >= 1);
    let oh = (h - kh) / stride + 1;
    let ow = (w - kw) / stride + 1;
    let k = c_in * kh * kw;

    let x_sl = x.value().as_slice().expect("standard layout");
    let w2d = ArrayView2::from_shape((c_out, k), weight.value().as_slice().unwrap()).unwrap();
    let mut value = ArrayD::<f64>::zeros(IxDyn(&[n, c_out, oh, ow]));
    value
        .as_slice_mut()
        .unwrap()
        .par_chunks_mut(c_out * oh * ow)
        .enumerate()
        .for_each(|(i, out)| {
            let cols = im2col(
                &x_sl[i * c_in * h * w..(i + 1) * c_in * h * w],
                c_in,
                h,
                w,
                kh,
                kw,
                stride,
                oh,
                ow,
            );
            let mut ov = ArrayViewMut2::from_shape((c_out, oh * ow), out).unwrap();
            general_mat_mul(1.0, &w2d, &cols.view(), 0.0, &mut ov);
        });

    let xv = x.value().clone();
    let wv = weight.value().clone();
    Tensor::from_op(
        value,
        vec![x.clone(), weight.clone()],
        Box::new(move |g| {
            let x_sl = xv.as_slice().unwrap();
            let g_sl = g.as_slice().unwrap();
            let w2d = ArrayView2::from_shape((c_out, k), wv.as_slice().unwrap()).unwrap();

            let mut gx = ArrayD::<f64>::zeros(IxDyn(&[n, c_in, h, w]));
            let gx_chunks: Vec<&mut [f64]> =
                gx.as_slice_mut().unwrap().chunks_mut(c_in * h * w).collect();
            // Per-sample weight gradients are reduced in index order afterwards
            // so the result does not depend on thread scheduling.
            let gw_parts: Vec<Array2<f64>> = gx_chunks
                .into_par_iter()
                .enumerate()
                .map(|(i, gx_c)| {
                    let g2 =
                        ArrayView2::from_shape((c_out, oh * ow), &g_sl[i * c_out * oh * ow..(i + 1) * c_out * oh * ow])
                            .unwrap();
                    let cols = im2col(
                        &x_sl[i * c_in * h * w..(i + 1) * c_in * h * w],
                        c_in,
                        h,
                        w,
                        kh,
                        kw,
                        stride,
                        oh,
                        ow,
                    );
                    let mut gw_i = Array2::<f64>::zeros((c_out, k));
                    general_mat_mul(1.0, &g2, &cols.t(), 0.0, &mut gw_i);
                    let mut gcols = Array2::<f64>::zeros((k, oh * ow));
                    general_mat_mul(1.0, &w2d.t(), &g2, 0.0, &mut gcols);
                    col2im_add(&gcols, gx_c, c_in, h, w, kh, kw, stride, oh, ow);
                    gw_i
                })
                .collect();
            let mut gw = Array2::<f64>::zeros((c_out, k));
            for part in gw_parts {
                gw += &part;
            }
            let gw = gw
                .into_shape_with_order(IxDyn(&[c_out, c_in, kh, kw]))
                .unwrap();
            vec![Some(gx), Some(gw)]
        }),
    )
}

/// Valid cross-correlation where each sample carries its own single 2-D kernel
/// applied to every channel: `out[n, c] = x[n, c] ⋆ k[n]`.
pub fn conv2d_per_sample(x: &Tensor, kernels: &Tensor) -> Tensor {
    let (n, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (n2, kh, kw) = (kernels.shape()[0], kernels.shape()[1], kernels.shape()[2]);
    assert_eq!(n, n2, "conv2d_per_sample: batch mismatch");
    assert!(h >= kh && w >= kw);
    let oh = h - kh + 1;
    let ow = w - kw + 1;
    let xv = x.value().clone();
    let kv = kernels.value().clone();
    let mut value = ArrayD::<f64>::zeros(IxDyn(&[n, c, oh, ow]));
    {
        let x_sl = xv.as_slice().unwrap();
        let k_sl = kv.as_slice().unwrap();
        value
            .as_slice_mut()
            .unwrap()
            .par_chunks_mut(c * oh * ow)
            .enumerate()
            .for_each(|(i, out)| {
                let ker = &k_sl[i * kh * kw..(i + 1) * kh * kw];
                for ch in 0..c {
                    let plane = &x_sl[(i * c + ch) * h * w..(i * c + ch + 1) * h * w];
                    let out_plane = &mut out[ch * oh * ow..(ch + 1) * oh * ow];
                    for oi in 0..oh {
                        for oj in 0..ow {
                            let mut acc = 0.0;
                            for ki in 0..kh {
                                let row = (oi + ki) * w + oj;
                                let krow = ki * kw;
                                for kj in 0..kw {
                                    acc += plane[row + kj] * ker[krow + kj];
                                }
                            }
                            out_plane[oi * ow + oj] = acc;
                        }
                    }
                }
            });
    }
    Tensor::from_op(
        value,
        vec![x.clone(), kernels.clone()],
        Box::new(move |g| {
            let g_sl = g.as_slice().unwrap();
            let x_sl = xv.as_slice().unwrap();
            let k_sl = kv.as_slice().unwrap();
            let mut gx = ArrayD::<f64>::zeros(IxDyn(&[n, c, h, w]));
            let mut gk = ArrayD::<f64>::zeros(IxDyn(&[n, kh, kw]));
            let gx_chunks: Vec<&mut [f64]> =
                gx.as_slice_mut().unwrap().chunks_mut(c * h * w).collect();
            let gk_chunks: Vec<&mut [f64]> =
                gk.as_slice_mut().unwrap().chunks_mut(kh * kw).collect();
            gx_chunks
                .into_par_iter()
                .zip(gk_chunks.into_par_iter())
                .enumerate()
                .for_each(|(i, (gx_c, gk_c))| {
                    let ker = &k_sl[i * kh * kw..(i + 1) * kh * kw];
                    for ch in 0..c {
                        let plane = &x_sl[(i * c + ch) * h * w..(i * c + ch + 1) * h * w];
                        let g_plane = &g_sl[(i * c + ch) * oh * ow..(i * c + ch + 1) * oh * ow];
                        let gx_plane = &mut gx_c[ch * h * w..(ch + 1) * h * w];
                        for oi in 0..oh {
                            for oj in 0..ow {
                                let gv = g_plane[oi * ow + oj];
                                if gv == 0.0 {
                                    continue;
                                }
                                for ki in 0..kh {
                                    let row = (oi + ki) * w + oj;
                                    let krow = ki * kw;
                                    for kj in 0..kw {
                                        gx_plane[row + kj] += gv * ker[krow + kj];
                                        gk_c[krow + kj] += gv * plane[row + kj];
                                    }
                                }
                            }
                        }
                    }
                });
            vec![Some(gx), Some(gk)]
        }),
    )
}
