//! Elementwise operations, activations, reductions and normalizations.

use ndarray::{ArrayD, Axis, IxDyn, Zip};

use super::Tensor;

fn same_shape(a: &Tensor, b: &Tensor, op: &str) {
    assert_eq!(a.shape(), b.shape(), "{op}: shape mismatch {:?} vs {:?}", a.shape(), b.shape());
}

pub fn add(a: &Tensor, b: &Tensor) -> Tensor {
    same_shape(a, b, "add");
    let value = a.value() + b.value();
    Tensor::from_op(
        value,
        vec![a.clone(), b.clone()],
        Box::new(|g| vec![Some(g.clone()), Some(g.clone())]),
    )
}

pub fn sub(a: &Tensor, b: &Tensor) -> Tensor {
    same_shape(a, b, "sub");
    let value = a.value() - b.value();
    Tensor::from_op(
        value,
        vec![a.clone(), b.clone()],
        Box::new(|g| vec![Some(g.clone()), Some(-g)]),
    )
}

pub fn mul(a: &Tensor, b: &Tensor) -> Tensor {
    same_shape(a, b, "mul");
    let value = a.value() * b.value();
    let av = a.value().clone();
    let bv = b.value().clone();
    Tensor::from_op(
        value,
        vec![a.clone(), b.clone()],
        Box::new(move |g| vec![Some(g * &bv), Some(g * &av)]),
    )
}

pub fn neg(a: &Tensor) -> Tensor {
    Tensor::from_op(
        -a.value(),
        vec![a.clone()],
        Box::new(|g| vec![Some(-g)]),
    )
}

pub fn add_scalar(a: &Tensor, s: f64) -> Tensor {
    Tensor::from_op(
        a.value() + s,
        vec![a.clone()],
        Box::new(|g| vec![Some(g.clone())]),
    )
}

pub fn mul_scalar(a: &Tensor, s: f64) -> Tensor {
    Tensor::from_op(
        a.value() * s,
        vec![a.clone()],
        Box::new(move |g| vec![Some(g * s)]),
    )
}

pub fn relu(a: &Tensor) -> Tensor {
    let value = a.value().mapv(|v| v.max(0.0));
    let av = a.value().clone();
    Tensor::from_op(
        value,
        vec![a.clone()],
        Box::new(move |g| {
            let mut out = g.clone();
            Zip::from(&mut out).and(&av).for_each(|o, &v| {
                if v <= 0.0 {
                    *o = 0.0;
                }
            });
            vec![Some(out)]
        }),
    )
}

pub fn leaky_relu(a: &Tensor, slope: f64) -> Tensor {
    let value = a.value().mapv(|v| if v >= 0.0 { v } else { slope * v });
    let av = a.value().clone();
    Tensor::from_op(
        value,
        vec![a.clone()],
        Box::new(move |g| {
            let mut out = g.clone();
            Zip::from(&mut out).and(&av).for_each(|o, &v| {
                if v < 0.0 {
                    *o *= slope;
                }
            });
            vec![Some(out)]
        }),
    )
}

pub fn sigmoid(a: &Tensor) -> Tensor {
    let value = a.value().mapv(|v| 1.0 / (1.0 + (-v).exp()));
    let yv = value.clone();
    Tensor::from_op(
        value,
        vec![a.clone()],
        Box::new(move |g| vec![Some(g * &(&yv * &yv.mapv(|y| 1.0 - y)))]),
    )
}

pub fn softplus(a: &Tensor) -> Tensor {
    // ln(1 + e^x), numerically stable form.
    let value = a.value().mapv(|v| if v > 30.0 { v } else { v.exp().ln_1p() });
    let av = a.value().clone();
    Tensor::from_op(
        value,
        vec![a.clone()],
        Box::new(move |g| vec![Some(g * &av.mapv(|v| 1.0 / (1.0 + (-v).exp())))]),
    )
}

pub fn exp(a: &Tensor) -> Tensor {
    let value = a.value().mapv(f64::exp);
    let yv = value.clone();
    Tensor::from_op(
        value,
        vec![a.clone()],
        Box::new(move |g| vec![Some(g * &yv)]),
    )
}

pub fn ln(a: &Tensor) -> Tensor {
    let value = a.value().mapv(f64::ln);
    let av = a.value().clone();
    Tensor::from_op(
        value,
        vec![a.clone()],
        Box::new(move |g| vec![Some(g / &av)]),
    )
}

pub fn sqrt(a: &Tensor) -> Tensor {
    let value = a.value().mapv(f64::sqrt);
    let yv = value.clone();
    Tensor::from_op(
        value,
        vec![a.clone()],
        Box::new(move |g| vec![Some(g / &(yv.mapv(|y| 2.0 * y)))]),
    )
}

pub fn abs(a: &Tensor) -> Tensor {
    let value = a.value().mapv(f64::abs);
    let av = a.value().clone();
    Tensor::from_op(
        value,
        vec![a.clone()],
        Box::new(move |g| vec![Some(g * &av.mapv(f64::signum))]),
    )
}

/// Clamp values into `[lo, hi]`. Gradient passes only strictly inside the band.
pub fn clamp(a: &Tensor, lo: f64, hi: f64) -> Tensor {
    let value = a.value().mapv(|v| v.clamp(lo, hi));
    let av = a.value().clone();
    Tensor::from_op(
        value,
        vec![a.clone()],
        Box::new(move |g| {
            let mut out = g.clone();
            Zip::from(&mut out).and(&av).for_each(|o, &v| {
                if v < lo || v > hi {
                    *o = 0.0;
                }
            });
            vec![Some(out)]
        }),
    )
}

pub fn clamp_min(a: &Tensor, lo: f64) -> Tensor {
    clamp(a, lo, f64::INFINITY)
}

/// Per-sample power: `out[n, ...] = x[n, ...] ^ e[n]`.
///
/// `x` must be strictly positive (clamp first); `e` has shape `[N]`.
pub fn pow_per_sample(x: &Tensor, e: &Tensor) -> Tensor {
    let n = x.shape()[0];
    assert_eq!(e.shape(), [n], "pow_per_sample: exponent must be [N]");
    let xv = x.value().clone();
    let ev = e.value().clone();
    let mut value = xv.clone();
    for (i, mut row) in value.outer_iter_mut().enumerate() {
        let p = ev[[i]];
        row.mapv_inplace(|v| v.powf(p));
    }
    let yv = value.clone();
    Tensor::from_op(
        value,
        vec![x.clone(), e.clone()],
        Box::new(move |g| {
            // dx = e * x^(e-1) * g ; de[n] = sum(x^e * ln(x) * g) over sample n
            let mut gx = g.clone();
            let mut ge = ArrayD::zeros(IxDyn(&[xv.shape()[0]]));
            for (i, mut gxr) in gx.outer_iter_mut().enumerate() {
                let p = ev[[i]];
                let xr = xv.index_axis(Axis(0), i);
                let yr = yv.index_axis(Axis(0), i);
                let gr = g.index_axis(Axis(0), i);
                let mut de = 0.0;
                Zip::from(&mut gxr)
                    .and(&xr)
                    .and(&yr)
                    .and(&gr)
                    .for_each(|gx_e, &x_e, &y_e, &g_e| {
                        *gx_e = g_e * p * y_e / x_e;
                        de += g_e * y_e * x_e.ln();
                    });
                ge[[i]] = de;
            }
            vec![Some(gx), Some(ge)]
        }),
    )
}

/// Multiply every element of sample `n` by the scalar `s[n]`.
pub fn mul_per_sample(x: &Tensor, s: &Tensor) -> Tensor {
    let n = x.shape()[0];
    assert_eq!(s.shape(), [n], "mul_per_sample: scale must be [N]");
    let sv = s.value().clone();
    let xv = x.value().clone();
    let mut value = xv.clone();
    for (i, mut row) in value.outer_iter_mut().enumerate() {
        row *= sv[[i]];
    }
    Tensor::from_op(
        value,
        vec![x.clone(), s.clone()],
        Box::new(move |g| {
            let mut gx = g.clone();
            for (i, mut row) in gx.outer_iter_mut().enumerate() {
                row *= sv[[i]];
            }
            let mut gs = ArrayD::zeros(IxDyn(&[xv.shape()[0]]));
            for i in 0..xv.shape()[0] {
                let xr = xv.index_axis(Axis(0), i);
                let gr = g.index_axis(Axis(0), i);
                gs[[i]] = (&xr * &gr).sum();
            }
            vec![Some(gx), Some(gs)]
        }),
    )
}

/// Scale channels of a `[N, C, H, W]` map by per-sample gains `[N, C]`.
pub fn scale_channels(x: &Tensor, gains: &Tensor) -> Tensor {
    let (n, c) = (x.shape()[0], x.shape()[1]);
    assert_eq!(gains.shape(), [n, c], "scale_channels: gains must be [N, C]");
    let xv = x.value().clone();
    let gv = gains.value().clone();
    let mut value = xv.clone();
    for i in 0..n {
        for ch in 0..c {
            let mut plane = value.index_axis_mut(Axis(0), i);
            let mut plane = plane.index_axis_mut(Axis(0), ch);
            plane *= gv[[i, ch]];
        }
    }
    Tensor::from_op(
        value,
        vec![x.clone(), gains.clone()],
        Box::new(move |g| {
            let mut gx = g.clone();
            let mut gg = ArrayD::zeros(IxDyn(&[n, c]));
            for i in 0..n {
                for ch in 0..c {
                    let xp = xv.index_axis(Axis(0), i);
                    let xp = xp.index_axis(Axis(0), ch);
                    let gp = g.index_axis(Axis(0), i);
                    let gp = gp.index_axis(Axis(0), ch);
                    gg[[i, ch]] = (&xp * &gp).sum();
                    let mut gxp = gx.index_axis_mut(Axis(0), i);
                    let mut gxp = gxp.index_axis_mut(Axis(0), ch);
                    gxp *= gv[[i, ch]];
                }
            }
            vec![Some(gx), Some(gg)]
        }),
    )
}

/// Scale positions of a `[N, C, H, W]` map by a per-sample mask `[N, 1, H, W]`.
pub fn scale_spatial(x: &Tensor, mask: &Tensor) -> Tensor {
    let (n, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    assert_eq!(mask.shape(), [n, 1, h, w], "scale_spatial: mask must be [N, 1, H, W]");
    let xv = x.value().clone();
    let mv = mask.value().clone();
    let mut value = xv.clone();
    for i in 0..n {
        for ch in 0..c {
            let mp = mv.index_axis(Axis(0), i);
            let mp = mp.index_axis(Axis(0), 0);
            let mut vp = value.index_axis_mut(Axis(0), i);
            let mut vp = vp.index_axis_mut(Axis(0), ch);
            vp *= &mp;
        }
    }
    Tensor::from_op(
        value,
        vec![x.clone(), mask.clone()],
        Box::new(move |g| {
            let mut gx = g.clone();
            let mut gm = ArrayD::zeros(IxDyn(&[n, 1, h, w]));
            for i in 0..n {
                let mp = mv.index_axis(Axis(0), i);
                let mp = mp.index_axis(Axis(0), 0).to_owned();
                for ch in 0..c {
                    let xp = xv.index_axis(Axis(0), i);
                    let xp = xp.index_axis(Axis(0), ch);
                    let gp = g.index_axis(Axis(0), i);
                    let gp = gp.index_axis(Axis(0), ch);
                    let mut gmp = gm.index_axis_mut(Axis(0), i);
                    let mut gmp = gmp.index_axis_mut(Axis(0), 0);
                    gmp += &(&xp * &gp);
                    let mut gxp = gx.index_axis_mut(Axis(0), i);
                    let mut gxp = gxp.index_axis_mut(Axis(0), ch);
                    gxp *= &mp;
                }
            }
            vec![Some(gx), Some(gm)]
        }),
    )
}

/// Multiply token features `[B, T, D]` by per-row gains `[B, D]`.
pub fn scale_tokens(x: &Tensor, gains: &Tensor) -> Tensor {
    let (b, t, d) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    assert_eq!(gains.shape(), [b, d], "scale_tokens: gains must be [B, D]");
    let xv = x.value().clone();
    let gv = gains.value().clone();
    let mut value = xv.clone();
    for i in 0..b {
        for tok in 0..t {
            for k in 0..d {
                value[[i, tok, k]] *= gv[[i, k]];
            }
        }
    }
    Tensor::from_op(
        value,
        vec![x.clone(), gains.clone()],
        Box::new(move |g| {
            let mut gx = g.clone();
            let mut gg = ArrayD::zeros(IxDyn(&[b, d]));
            for i in 0..b {
                for tok in 0..t {
                    for k in 0..d {
                        gg[[i, k]] += g[[i, tok, k]] * xv[[i, tok, k]];
                        gx[[i, tok, k]] *= gv[[i, k]];
                    }
                }
            }
            vec![Some(gx), Some(gg)]
        }),
    )
}

/// Add a per-channel bias `[C]` to a `[N, C, H, W]` map.
pub fn add_bias_channel(x: &Tensor, bias: &Tensor) -> Tensor {
    let c = x.shape()[1];
    assert_eq!(bias.shape(), [c], "add_bias_channel: bias must be [C]");
    let bv = bias.value().clone();
    let mut value = x.value().clone();
    for mut sample in value.outer_iter_mut() {
        for (ch, mut plane) in sample.outer_iter_mut().enumerate() {
            plane += bv[[ch]];
        }
    }
    let n = x.shape()[0];
    Tensor::from_op(
        value,
        vec![x.clone(), bias.clone()],
        Box::new(move |g| {
            let mut gb = ArrayD::zeros(IxDyn(&[c]));
            for i in 0..n {
                let gs = g.index_axis(Axis(0), i);
                for ch in 0..c {
                    gb[[ch]] += gs.index_axis(Axis(0), ch).sum();
                }
            }
            vec![Some(g.clone()), Some(gb)]
        }),
    )
}

/// Add a bias `[D]` along the last axis of any `[..., D]` tensor.
pub fn add_bias_last(x: &Tensor, bias: &Tensor) -> Tensor {
    let d = *x.shape().last().expect("non-scalar");
    assert_eq!(bias.shape(), [d], "add_bias_last: bias must be [D]");
    let bv = bias.value().clone();
    let mut value = x.value().clone();
    let rows = value.len() / d;
    {
        let mut flat = value.view_mut().into_shape_with_order((rows, d)).expect("contiguous");
        for mut row in flat.outer_iter_mut() {
            for k in 0..d {
                row[k] += bv[[k]];
            }
        }
    }
    Tensor::from_op(
        value,
        vec![x.clone(), bias.clone()],
        Box::new(move |g| {
            let rows = g.len() / d;
            let flat = g.view().into_shape_with_order((rows, d)).expect("contiguous");
            let mut gb = ArrayD::zeros(IxDyn(&[d]));
            for row in flat.outer_iter() {
                for k in 0..d {
                    gb[[k]] += row[k];
                }
            }
            vec![Some(g.clone()), Some(gb)]
        }),
    )
}

pub fn sum_all(a: &Tensor) -> Tensor {
    let s = a.value().sum();
    let shape: Vec<usize> = a.shape().to_vec();
    Tensor::from_op(
        ArrayD::from_elem(IxDyn(&[1]), s),
        vec![a.clone()],
        Box::new(move |g| {
            let gv = g[[0]];
            vec![Some(ArrayD::from_elem(IxDyn(&shape), gv))]
        }),
    )
}

pub fn mean_all(a: &Tensor) -> Tensor {
    let n = a.value().len() as f64;
    mul_scalar(&sum_all(a), 1.0 / n)
}

/// Mean absolute difference: `mean(|a - b|)`.
pub fn l1_loss(a: &Tensor, b: &Tensor) -> Tensor {
    mean_all(&abs(&sub(a, b)))
}

/// Mean squared difference.
pub fn mse_loss(a: &Tensor, b: &Tensor) -> Tensor {
    let d = sub(a, b);
    mean_all(&mul(&d, &d))
}

/// Global average pool `[N, C, H, W] -> [N, C]`.
pub fn global_avg_pool(x: &Tensor) -> Tensor {
    let (n, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let area = (h * w) as f64;
    let mut value = ArrayD::zeros(IxDyn(&[n, c]));
    for i in 0..n {
        for ch in 0..c {
            let plane = x.value().index_axis(Axis(0), i);
            let plane = plane.index_axis(Axis(0), ch);
            value[[i, ch]] = plane.sum() / area;
        }
    }
    Tensor::from_op(
        value,
        vec![x.clone()],
        Box::new(move |g| {
            let mut gx = ArrayD::zeros(IxDyn(&[n, c, h, w]));
            for i in 0..n {
                for ch in 0..c {
                    let gv = g[[i, ch]] / area;
                    let mut plane = gx.index_axis_mut(Axis(0), i);
                    let mut plane = plane.index_axis_mut(Axis(0), ch);
                    plane.fill(gv);
                }
            }
            vec![Some(gx)]
        }),
    )
}

/// Softmax along the last axis.
pub fn softmax_last(a: &Tensor) -> Tensor {
    let d = *a.shape().last().expect("non-scalar");
    let mut value = a.value().clone();
    let rows = value.len() / d;
    {
        let mut flat = value.view_mut().into_shape_with_order((rows, d)).expect("contiguous");
        for mut row in flat.outer_iter_mut() {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            row.mapv_inplace(|v| (v - max).exp());
            let sum: f64 = row.sum();
            row.mapv_inplace(|v| v / sum);
        }
    }
    let yv = value.clone();
    Tensor::from_op(
        value,
        vec![a.clone()],
        Box::new(move |g| {
            let rows = g.len() / d;
            let y = yv.view().into_shape_with_order((rows, d)).expect("contiguous");
            let gf = g.view().into_shape_with_order((rows, d)).expect("contiguous");
            let mut out = ArrayD::zeros(IxDyn(g.shape()));
            {
                let mut of = out.view_mut().into_shape_with_order((rows, d)).expect("contiguous");
                for r in 0..rows {
                    let yr = y.row(r);
                    let gr = gf.row(r);
                    let dot: f64 = yr.iter().zip(gr.iter()).map(|(&yv, &gv)| yv * gv).sum();
                    let mut or = of.row_mut(r);
                    for k in 0..d {
                        or[k] = yr[k] * (gr[k] - dot);
                    }
                }
            }
            vec![Some(out)]
        }),
    )
}

/// Layer normalization over the last axis with learned scale and shift.
pub fn layer_norm(x: &Tensor, gamma: &Tensor, beta: &Tensor, eps: f64) -> Tensor {
    let d = *x.shape().last().expect("non-scalar");
    assert_eq!(gamma.shape(), [d]);
    assert_eq!(beta.shape(), [d]);
    let xv = x.value().clone();
    let gv = gamma.value().clone();
    let bv = beta.value().clone();
    let rows = xv.len() / d;
    let mut value = ArrayD::zeros(IxDyn(x.shape()));
    let mut means = Vec::with_capacity(rows);
    let mut inv_stds = Vec::with_capacity(rows);
    {
        let xf = xv.view().into_shape_with_order((rows, d)).expect("contiguous");
        let mut vf = value.view_mut().into_shape_with_order((rows, d)).expect("contiguous");
        for r in 0..rows {
            let row = xf.row(r);
            let mean = row.sum() / d as f64;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let inv = 1.0 / (var + eps).sqrt();
            means.push(mean);
            inv_stds.push(inv);
            let mut vr = vf.row_mut(r);
            for k in 0..d {
                vr[k] = (row[k] - mean) * inv * gv[[k]] + bv[[k]];
            }
        }
    }
    Tensor::from_op(
        value,
        vec![x.clone(), gamma.clone(), beta.clone()],
        Box::new(move |g| {
            let xf = xv.view().into_shape_with_order((rows, d)).expect("contiguous");
            let gf = g.view().into_shape_with_order((rows, d)).expect("contiguous");
            let mut gx = ArrayD::zeros(IxDyn(xv.shape()));
            let mut gg = ArrayD::zeros(IxDyn(&[d]));
            let mut gb = ArrayD::zeros(IxDyn(&[d]));
            {
                let mut gxf = gx.view_mut().into_shape_with_order((rows, d)).expect("contiguous");
                for r in 0..rows {
                    let xr = xf.row(r);
                    let gr = gf.row(r);
                    let mean = means[r];
                    let inv = inv_stds[r];
                    // dy/dx with xhat = (x - mean) * inv
                    let mut sum_gy_g = 0.0; // sum of g * gamma
                    let mut sum_gy_g_xhat = 0.0;
                    for k in 0..d {
                        let xhat = (xr[k] - mean) * inv;
                        let gyg = gr[k] * gv[[k]];
                        sum_gy_g += gyg;
                        sum_gy_g_xhat += gyg * xhat;
                        gg[[k]] += gr[k] * xhat;
                        gb[[k]] += gr[k];
                    }
                    let mut gxr = gxf.row_mut(r);
                    for k in 0..d {
                        let xhat = (xr[k] - mean) * inv;
                        let gyg = gr[k] * gv[[k]];
                        gxr[k] = inv * (gyg - sum_gy_g / d as f64 - xhat * sum_gy_g_xhat / d as f64);
                    }
                }
            }
            vec![Some(gx), Some(gg), Some(gb)]
        }),
    )
}

/// L2-normalize along the last axis: `y = x / sqrt(sum(x^2) + eps)`.
pub fn l2_normalize_last(x: &Tensor, eps: f64) -> Tensor {
    let d = *x.shape().last().expect("non-scalar");
    let xv = x.value().clone();
    let rows = xv.len() / d;
    let mut value = ArrayD::zeros(IxDyn(x.shape()));
    let mut norms = Vec::with_capacity(rows);
    {
        let xf = xv.view().into_shape_with_order((rows, d)).expect("contiguous");
        let mut vf = value.view_mut().into_shape_with_order((rows, d)).expect("contiguous");
        for r in 0..rows {
            let row = xf.row(r);
            let norm = (row.iter().map(|&v| v * v).sum::<f64>() + eps).sqrt();
            norms.push(norm);
            let mut vr = vf.row_mut(r);
            for k in 0..d {
                vr[k] = row[k] / norm;
            }
        }
    }
    let yv = value.clone();
    Tensor::from_op(
        value,
        vec![x.clone()],
        Box::new(move |g| {
            let yf = yv.view().into_shape_with_order((rows, d)).expect("contiguous");
            let gf = g.view().into_shape_with_order((rows, d)).expect("contiguous");
            let mut gx = ArrayD::zeros(IxDyn(yv.shape()));
            {
                let mut gxf = gx.view_mut().into_shape_with_order((rows, d)).expect("contiguous");
                for r in 0..rows {
                    let yr = yf.row(r);
                    let gr = gf.row(r);
                    let dot: f64 = yr.iter().zip(gr.iter()).map(|(&a, &b)| a * b).sum();
                    let mut gxr = gxf.row_mut(r);
                    for k in 0..d {
                        gxr[k] = (gr[k] - yr[k] * dot) / norms[r];
                    }
                }
            }
            vec![Some(gx)]
        }),
    )
}
