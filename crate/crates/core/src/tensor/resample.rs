//! Bicubic resampling as a separable linear map.
//!
//! A resize is `Y = R_h · X · R_wᵀ` per channel, where the row/column
//! matrices hold Keys cubic weights (a = −0.5). Downscaling widens the
//! kernel support by the inverse scale (anti-aliasing) and every row is
//! normalized to sum 1, so constant images are preserved exactly up to
//! floating-point rounding. Being linear, the transpose matrices are the
//! exact backward map.

use ndarray::linalg::general_mat_mul;
use ndarray::{Array2, ArrayD, ArrayView2, IxDyn};

use super::Tensor;

/// Keys cubic interpolation kernel with a = −0.5.
fn cubic(x: f64) -> f64 {
    let x = x.abs();
    if x <= 1.0 {
        1.5 * x * x * x - 2.5 * x * x + 1.0
    } else if x < 2.0 {
        -0.5 * x * x * x + 2.5 * x * x - 4.0 * x + 2.0
    } else {
        0.0
    }
}

/// Dense `[out_len, in_len]` resampling matrix with edge-clamped taps and
/// rows normalized to sum 1.
pub fn bicubic_matrix(in_len: usize, out_len: usize) -> Array2<f64> {
    assert!(in_len >= 1 && out_len >= 1);
    let scale = out_len as f64 / in_len as f64;
    let (kernel_scale, support) = if scale < 1.0 {
        (scale, 2.0 / scale)
    } else {
        (1.0, 2.0)
    };
    let mut m = Array2::<f64>::zeros((out_len, in_len));
    for o in 0..out_len {
        let u = (o as f64 + 0.5) / scale - 0.5;
        let left = (u - support).floor() as isize + 1;
        let right = (u + support).floor() as isize;
        let mut weights: Vec<(usize, f64)> = Vec::with_capacity((right - left + 1) as usize);
        let mut sum = 0.0;
        for t in left..=right {
            let w = cubic((u - t as f64) * kernel_scale);
            if w == 0.0 {
                continue;
            }
            let idx = t.clamp(0, in_len as isize - 1) as usize;
            sum += w;
            weights.push((idx, w));
        }
        for (idx, w) in weights {
            m[[o, idx]] += w / sum;
        }
    }
    m
}

fn resize_values(x: &ArrayD<f64>, rh: &Array2<f64>, rw: &Array2<f64>) -> ArrayD<f64> {
    let (n, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (oh, ow) = (rh.shape()[0], rw.shape()[0]);
    let x_sl = x.as_slice().expect("standard layout");
    let mut out = ArrayD::<f64>::zeros(IxDyn(&[n, c, oh, ow]));
    let out_sl = out.as_slice_mut().unwrap();
    let mut tmp = Array2::<f64>::zeros((oh, w));
    for i in 0..n * c {
        let plane = ArrayView2::from_shape((h, w), &x_sl[i * h * w..(i + 1) * h * w]).unwrap();
        general_mat_mul(1.0, &rh.view(), &plane, 0.0, &mut tmp.view_mut());
        let mut oplane =
            ndarray::ArrayViewMut2::from_shape((oh, ow), &mut out_sl[i * oh * ow..(i + 1) * oh * ow])
                .unwrap();
        general_mat_mul(1.0, &tmp.view(), &rw.t(), 0.0, &mut oplane);
    }
    out
}

/// Differentiable bicubic resize of `[N, C, H, W]` to `(out_h, out_w)`.
pub fn resize_bicubic(x: &Tensor, out_h: usize, out_w: usize) -> Tensor {
    let (n, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    if out_h == h && out_w == w {
        // Identity resize is the identity map, bit-exact.
        return super::movement::reshape(x, &[n, c, h, w]);
    }
    let rh = bicubic_matrix(h, out_h);
    let rw = bicubic_matrix(w, out_w);
    let value = resize_values(x.value(), &rh, &rw);
    Tensor::from_op(
        value,
        vec![x.clone()],
        Box::new(move |g| {
            // dX = R_hᵀ · dY · R_w  — implemented as resize with transposes.
            let rht = rh.t().to_owned();
            let rwt = rw.t().to_owned();
            vec![Some(resize_values(g, &rht, &rwt))]
        }),
    )
}
