//! Dense and batched matrix products backed by `matrixmultiply` via ndarray.

use ndarray::linalg::general_mat_mul;
use ndarray::{Array2, ArrayD, ArrayView2, Ix2, IxDyn};
use rayon::prelude::*;

use super::Tensor;

fn as2(v: &ArrayD<f64>) -> ArrayView2<'_, f64> {
    v.view().into_dimensionality::<Ix2>().expect("2-D tensor")
}

/// `[M, K] x [K, N] -> [M, N]`.
pub fn matmul(a: &Tensor, b: &Tensor) -> Tensor {
    let (m, k) = (a.shape()[0], a.shape()[1]);
    let (k2, n) = (b.shape()[0], b.shape()[1]);
    assert_eq!(k, k2, "matmul: inner dims {k} vs {k2}");
    let mut value = Array2::<f64>::zeros((m, n));
    general_mat_mul(1.0, &as2(a.value()), &as2(b.value()), 0.0, &mut value);
    let av = a.value().clone();
    let bv = b.value().clone();
    Tensor::from_op(
        value.into_dyn(),
        vec![a.clone(), b.clone()],
        Box::new(move |g| {
            let g2 = as2(g);
            let mut ga = Array2::<f64>::zeros((m, k));
            general_mat_mul(1.0, &g2, &as2(&bv).t(), 0.0, &mut ga);
            let mut gb = Array2::<f64>::zeros((k, n));
            general_mat_mul(1.0, &as2(&av).t(), &g2, 0.0, &mut gb);
            vec![Some(ga.into_dyn()), Some(gb.into_dyn())]
        }),
    )
}

fn bmm_values(a: &ArrayD<f64>, b: &ArrayD<f64>) -> ArrayD<f64> {
    let (bs, m, k) = (a.shape()[0], a.shape()[1], a.shape()[2]);
    let n = b.shape()[2];
    let mut value = ArrayD::<f64>::zeros(IxDyn(&[bs, m, n]));
    let a_sl = a.as_slice().expect("standard layout");
    let b_sl = b.as_slice().expect("standard layout");
    value
        .as_slice_mut()
        .expect("standard layout")
        .par_chunks_mut(m * n)
        .enumerate()
        .for_each(|(i, out)| {
            let av = ArrayView2::from_shape((m, k), &a_sl[i * m * k..(i + 1) * m * k]).unwrap();
            let bv = ArrayView2::from_shape((k, n), &b_sl[i * k * n..(i + 1) * k * n]).unwrap();
            let mut ov = ndarray::ArrayViewMut2::from_shape((m, n), out).unwrap();
            general_mat_mul(1.0, &av, &bv, 0.0, &mut ov);
        });
    value
}

/// Batched product: `[B, M, K] x [B, K, N] -> [B, M, N]`.
pub fn bmm(a: &Tensor, b: &Tensor) -> Tensor {
    assert_eq!(a.shape().len(), 3);
    assert_eq!(b.shape().len(), 3);
    assert_eq!(a.shape()[0], b.shape()[0], "bmm: batch mismatch");
    assert_eq!(a.shape()[2], b.shape()[1], "bmm: inner dim mismatch");
    let value = bmm_values(a.value(), b.value());
    let av = a.value().clone();
    let bv = b.value().clone();
    Tensor::from_op(
        value,
        vec![a.clone(), b.clone()],
        Box::new(move |g| {
            let (bs, m, k) = (av.shape()[0], av.shape()[1], av.shape()[2]);
            let n = bv.shape()[2];
            let g_sl = g.as_slice().expect("standard layout");
            let a_sl = av.as_slice().expect("standard layout");
            let b_sl = bv.as_slice().expect("standard layout");
            let mut ga = ArrayD::<f64>::zeros(IxDyn(&[bs, m, k]));
            let mut gb = ArrayD::<f64>::zeros(IxDyn(&[bs, k, n]));
            let ga_chunks: Vec<&mut [f64]> =
                ga.as_slice_mut().unwrap().chunks_mut(m * k).collect();
            let gb_chunks: Vec<&mut [f64]> =
                gb.as_slice_mut().unwrap().chunks_mut(k * n).collect();
            ga_chunks
                .into_par_iter()
                .zip(gb_chunks.into_par_iter())
                .enumerate()
                .for_each(|(i, (ga_c, gb_c))| {
                    let gv = ArrayView2::from_shape((m, n), &g_sl[i * m * n..(i + 1) * m * n]).unwrap();
                    let av2 = ArrayView2::from_shape((m, k), &a_sl[i * m * k..(i + 1) * m * k]).unwrap();
                    let bv2 = ArrayView2::from_shape((k, n), &b_sl[i * k * n..(i + 1) * k * n]).unwrap();
                    let mut ga2 = ndarray::ArrayViewMut2::from_shape((m, k), ga_c).unwrap();
                    general_mat_mul(1.0, &gv, &bv2.t(), 0.0, &mut ga2);
                    let mut gb2 = ndarray::ArrayViewMut2::from_shape((k, n), gb_c).unwrap();
                    general_mat_mul(1.0, &av2.t(), &gv, 0.0, &mut gb2);
                });
            vec![Some(ga), Some(gb)]
        }),
    )
}
