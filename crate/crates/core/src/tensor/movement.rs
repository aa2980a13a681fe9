//! Data-movement operations: reshapes, permutations, padding, windowing.
//!
//! These ops never mix values; their backward rules are pure index maps.

use ndarray::{ArrayD, Axis, IxDyn, Slice};

use super::Tensor;

pub fn reshape(x: &Tensor, shape: &[usize]) -> Tensor {
    let new_len: usize = shape.iter().product();
    assert_eq!(x.value().len(), new_len, "reshape: element count mismatch");
    let value = x
        .value()
        .clone()
        .into_shape_with_order(IxDyn(shape))
        .expect("reshape of contiguous array");
    let old_shape: Vec<usize> = x.shape().to_vec();
    Tensor::from_op(
        value,
        vec![x.clone()],
        Box::new(move |g| {
            vec![Some(
                g.clone()
                    .into_shape_with_order(IxDyn(&old_shape))
                    .expect("reshape grad"),
            )]
        }),
    )
}

pub fn permute(x: &Tensor, axes: &[usize]) -> Tensor {
    let value = x
        .value()
        .view()
        .permuted_axes(IxDyn(axes))
        .as_standard_layout()
        .to_owned();
    let mut inverse = vec![0usize; axes.len()];
    for (i, &a) in axes.iter().enumerate() {
        inverse[a] = i;
    }
    Tensor::from_op(
        value,
        vec![x.clone()],
        Box::new(move |g| {
            vec![Some(
                g.view()
                    .permuted_axes(IxDyn(&inverse))
                    .as_standard_layout()
                    .to_owned(),
            )]
        }),
    )
}

/// Swap the last two axes.
pub fn transpose_last2(x: &Tensor) -> Tensor {
    let n = x.shape().len();
    assert!(n >= 2);
    let mut axes: Vec<usize> = (0..n).collect();
    axes.swap(n - 2, n - 1);
    permute(x, &axes)
}

/// Take `len` entries starting at `start` along `axis`.
pub fn narrow(x: &Tensor, axis: usize, start: usize, len: usize) -> Tensor {
    let value = x
        .value()
        .slice_axis(Axis(axis), Slice::from(start..start + len))
        .to_owned();
    let full_shape: Vec<usize> = x.shape().to_vec();
    Tensor::from_op(
        value,
        vec![x.clone()],
        Box::new(move |g| {
            let mut gx = ArrayD::zeros(IxDyn(&full_shape));
            gx.slice_axis_mut(Axis(axis), Slice::from(start..start + len))
                .assign(g);
            vec![Some(gx)]
        }),
    )
}

pub fn concat(parts: &[Tensor], axis: usize) -> Tensor {
    assert!(!parts.is_empty());
    let views: Vec<_> = parts.iter().map(|t| t.value().view()).collect();
    let value = ndarray::concatenate(Axis(axis), &views).expect("concat shapes");
    let lens: Vec<usize> = parts.iter().map(|t| t.shape()[axis]).collect();
    Tensor::from_op(
        value,
        parts.to_vec(),
        Box::new(move |g| {
            let mut out = Vec::with_capacity(lens.len());
            let mut offset = 0;
            for &len in &lens {
                out.push(Some(
                    g.slice_axis(Axis(axis), Slice::from(offset..offset + len))
                        .to_owned(),
                ));
                offset += len;
            }
            out
        }),
    )
}

fn reflect_index(i: isize, len: usize) -> usize {
    // Mirror without repeating the edge sample: -1 -> 1, len -> len-2.
    let len = len as isize;
    let mut i = i;
    loop {
        if i < 0 {
            i = -i;
        } else if i >= len {
            i = 2 * (len - 1) - i;
        } else {
            return i as usize;
        }
    }
}

/// Pad the spatial dims of `[N, C, H, W]` by reflection.
pub fn pad_reflect_hw(x: &Tensor, top: usize, bottom: usize, left: usize, right: usize) -> Tensor {
    let (n, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    assert!(top < h && bottom < h && left < w && right < w, "reflect pad exceeds dims");
    let oh = h + top + bottom;
    let ow = w + left + right;
    let xv = x.value();
    let mut value = ArrayD::zeros(IxDyn(&[n, c, oh, ow]));
    for i in 0..n {
        for ch in 0..c {
            for oi in 0..oh {
                let si = reflect_index(oi as isize - top as isize, h);
                for oj in 0..ow {
                    let sj = reflect_index(oj as isize - left as isize, w);
                    value[[i, ch, oi, oj]] = xv[[i, ch, si, sj]];
                }
            }
        }
    }
    Tensor::from_op(
        value,
        vec![x.clone()],
        Box::new(move |g| {
            let mut gx = ArrayD::zeros(IxDyn(&[n, c, h, w]));
            for i in 0..n {
                for ch in 0..c {
                    for oi in 0..oh {
                        let si = reflect_index(oi as isize - top as isize, h);
                        for oj in 0..ow {
                            let sj = reflect_index(oj as isize - left as isize, w);
                            gx[[i, ch, si, sj]] += g[[i, ch, oi, oj]];
                        }
                    }
                }
            }
            vec![Some(gx)]
        }),
    )
}

/// Pad the spatial dims of `[N, C, H, W]` with zeros.
pub fn pad_zero_hw(x: &Tensor, top: usize, bottom: usize, left: usize, right: usize) -> Tensor {
    let (n, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let oh = h + top + bottom;
    let ow = w + left + right;
    let mut value = ArrayD::zeros(IxDyn(&[n, c, oh, ow]));
    value
        .slice_axis_mut(Axis(2), Slice::from(top..top + h))
        .slice_axis_mut(Axis(3), Slice::from(left..left + w))
        .assign(x.value());
    Tensor::from_op(
        value,
        vec![x.clone()],
        Box::new(move |g| {
            let gx = g
                .slice_axis(Axis(2), Slice::from(top..top + h))
                .slice_axis(Axis(3), Slice::from(left..left + w))
                .to_owned();
            vec![Some(gx)]
        }),
    )
}

/// Crop the spatial dims of `[N, C, H, W]`.
pub fn crop_hw(x: &Tensor, top: usize, left: usize, height: usize, width: usize) -> Tensor {
    let t = narrow(x, 2, top, height);
    narrow(&t, 3, left, width)
}

/// Cyclic shift of the spatial dims: `out[i, j] = in[(i - sh) mod H, (j - sw) mod W]`.
pub fn roll_hw(x: &Tensor, shift_h: isize, shift_w: isize) -> Tensor {
    let (n, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let m = |v: isize, len: usize| -> usize {
        let len = len as isize;
        (((v % len) + len) % len) as usize
    };
    let xv = x.value();
    let mut value = ArrayD::zeros(IxDyn(&[n, c, h, w]));
    for i in 0..n {
        for ch in 0..c {
            for oi in 0..h {
                let si = m(oi as isize - shift_h, h);
                for oj in 0..w {
                    let sj = m(oj as isize - shift_w, w);
                    value[[i, ch, oi, oj]] = xv[[i, ch, si, sj]];
                }
            }
        }
    }
    Tensor::from_op(
        value,
        vec![x.clone()],
        Box::new(move |g| {
            let mut gx = ArrayD::zeros(IxDyn(&[n, c, h, w]));
            for i in 0..n {
                for ch in 0..c {
                    for oi in 0..h {
                        let si = m(oi as isize - shift_h, h);
                        for oj in 0..w {
                            let sj = m(oj as isize - shift_w, w);
                            gx[[i, ch, si, sj]] += g[[i, ch, oi, oj]];
                        }
                    }
                }
            }
            vec![Some(gx)]
        }),
    )
}

/// Partition a `[N, D, H, W]` feature map into non-overlapping windows of
/// side `w`, producing `[N * nh * nw, w*w, D]` token blocks in row-major
/// window order.
pub fn window_partition(x: &Tensor, win: usize) -> Tensor {
    let (n, d, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    assert!(h % win == 0 && w % win == 0, "window_partition: dims must divide window");
    let (nh, nw) = (h / win, w / win);
    let xv = x.value();
    let mut value = ArrayD::zeros(IxDyn(&[n * nh * nw, win * win, d]));
    for i in 0..n {
        for wi in 0..nh {
            for wj in 0..nw {
                let b = (i * nh + wi) * nw + wj;
                for ti in 0..win {
                    for tj in 0..win {
                        let t = ti * win + tj;
                        for ch in 0..d {
                            value[[b, t, ch]] = xv[[i, ch, wi * win + ti, wj * win + tj]];
                        }
                    }
                }
            }
        }
    }
    Tensor::from_op(
        value,
        vec![x.clone()],
        Box::new(move |g| {
            let mut gx = ArrayD::zeros(IxDyn(&[n, d, h, w]));
            for i in 0..n {
                for wi in 0..nh {
                    for wj in 0..nw {
                        let b = (i * nh + wi) * nw + wj;
                        for ti in 0..win {
                            for tj in 0..win {
                                let t = ti * win + tj;
                                for ch in 0..d {
                                    gx[[i, ch, wi * win + ti, wj * win + tj]] = g[[b, t, ch]];
                                }
                            }
                        }
                    }
                }
            }
            vec![Some(gx)]
        }),
    )
}

/// Inverse of [`window_partition`].
pub fn window_reverse(wins: &Tensor, win: usize, n: usize, d: usize, h: usize, w: usize) -> Tensor {
    let (nh, nw) = (h / win, w / win);
    assert_eq!(wins.shape(), [n * nh * nw, win * win, d]);
    let wv = wins.value();
    let mut value = ArrayD::zeros(IxDyn(&[n, d, h, w]));
    for i in 0..n {
        for wi in 0..nh {
            for wj in 0..nw {
                let b = (i * nh + wi) * nw + wj;
                for ti in 0..win {
                    for tj in 0..win {
                        let t = ti * win + tj;
                        for ch in 0..d {
                            value[[i, ch, wi * win + ti, wj * win + tj]] = wv[[b, t, ch]];
                        }
                    }
                }
            }
        }
    }
    Tensor::from_op(
        value,
        vec![wins.clone()],
        Box::new(move |g| {
            let mut gw = ArrayD::zeros(IxDyn(&[n * nh * nw, win * win, d]));
            for i in 0..n {
                for wi in 0..nh {
                    for wj in 0..nw {
                        let b = (i * nh + wi) * nw + wj;
                        for ti in 0..win {
                            for tj in 0..win {
                                let t = ti * win + tj;
                                for ch in 0..d {
                                    gw[[b, t, ch]] = g[[i, ch, wi * win + ti, wj * win + tj]];
                                }
                            }
                        }
                    }
                }
            }
            vec![Some(gw)]
        }),
    )
}

/// Rearrange `[N, C*s*s, H, W]` into `[N, C, H*s, W*s]` (sub-pixel upsample).
pub fn pixel_shuffle(x: &Tensor, s: usize) -> Tensor {
    let (n, cs, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    assert_eq!(cs % (s * s), 0, "pixel_shuffle: channels must divide s^2");
    let c = cs / (s * s);
    let xv = x.value();
    let mut value = ArrayD::zeros(IxDyn(&[n, c, h * s, w * s]));
    for i in 0..n {
        for ch in 0..c {
            for di in 0..s {
                for dj in 0..s {
                    let src_c = ch * s * s + di * s + dj;
                    for y in 0..h {
                        for xcol in 0..w {
                            value[[i, ch, y * s + di, xcol * s + dj]] = xv[[i, src_c, y, xcol]];
                        }
                    }
                }
            }
        }
    }
    Tensor::from_op(
        value,
        vec![x.clone()],
        Box::new(move |g| {
            let mut gx = ArrayD::zeros(IxDyn(&[n, cs, h, w]));
            for i in 0..n {
                for ch in 0..c {
                    for di in 0..s {
                        for dj in 0..s {
                            let src_c = ch * s * s + di * s + dj;
                            for y in 0..h {
                                for xcol in 0..w {
                                    gx[[i, src_c, y, xcol]] = g[[i, ch, y * s + di, xcol * s + dj]];
                                }
                            }
                        }
                    }
                }
            }
            vec![Some(gx)]
        }),
    )
}

/// Tile the whole tensor `times` times along a new leading block:
/// `out[k*A + a, ...] = x[a, ...]` for `k in 0..times`.
pub fn repeat_outer(x: &Tensor, times: usize) -> Tensor {
    let a = x.shape()[0];
    let mut shape: Vec<usize> = x.shape().to_vec();
    shape[0] = a * times;
    let mut value = ArrayD::zeros(IxDyn(&shape));
    for k in 0..times {
        value
            .slice_axis_mut(Axis(0), Slice::from(k * a..(k + 1) * a))
            .assign(x.value());
    }
    Tensor::from_op(
        value,
        vec![x.clone()],
        Box::new(move |g| {
            let mut gx: Option<ArrayD<f64>> = None;
            for k in 0..times {
                let block = g.slice_axis(Axis(0), Slice::from(k * a..(k + 1) * a)).to_owned();
                gx = Some(match gx {
                    None => block,
                    Some(acc) => acc + block,
                });
            }
            vec![gx]
        }),
    )
}

/// Repeat each leading row `group` times consecutively:
/// `out[n*group + g, ...] = x[n, ...]`.
pub fn repeat_rows_grouped(x: &Tensor, group: usize) -> Tensor {
    let n = x.shape()[0];
    let mut shape: Vec<usize> = x.shape().to_vec();
    shape[0] = n * group;
    let mut value = ArrayD::zeros(IxDyn(&shape));
    for i in 0..n {
        for k in 0..group {
            value
                .index_axis_mut(Axis(0), i * group + k)
                .assign(&x.value().index_axis(Axis(0), i));
        }
    }
    Tensor::from_op(
        value,
        vec![x.clone()],
        Box::new(move |g| {
            let mut inner: Vec<usize> = g.shape().to_vec();
            inner[0] = n;
            let mut gx = ArrayD::zeros(IxDyn(&inner));
            for i in 0..n {
                let mut acc = gx.index_axis_mut(Axis(0), i);
                for k in 0..group {
                    acc += &g.index_axis(Axis(0), i * group + k);
                }
            }
            vec![Some(gx)]
        }),
    )
}

/// Gather rows along axis 0: `out[i, ...] = x[idx[i], ...]`.
pub fn index_select0(x: &Tensor, indices: &[usize]) -> Tensor {
    let r = x.shape()[0];
    for &i in indices {
        assert!(i < r, "index_select0: index out of range");
    }
    let mut shape: Vec<usize> = x.shape().to_vec();
    shape[0] = indices.len();
    let mut value = ArrayD::zeros(IxDyn(&shape));
    for (o, &i) in indices.iter().enumerate() {
        value
            .index_axis_mut(Axis(0), o)
            .assign(&x.value().index_axis(Axis(0), i));
    }
    let indices = indices.to_vec();
    let full_rows = r;
    Tensor::from_op(
        value,
        vec![x.clone()],
        Box::new(move |g| {
            let mut inner: Vec<usize> = g.shape().to_vec();
            inner[0] = full_rows;
            let mut gx = ArrayD::zeros(IxDyn(&inner));
            for (o, &i) in indices.iter().enumerate() {
                let mut row = gx.index_axis_mut(Axis(0), i);
                row += &g.index_axis(Axis(0), o);
            }
            vec![Some(gx)]
        }),
    )
}
