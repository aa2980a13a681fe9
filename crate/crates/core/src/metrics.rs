//! Full-reference (PSNR, SSIM) and no-reference (NIQE, PIQE) image quality
//! metrics, plus the PCA machinery used to analyze degradation
//! representations.
//!
//! The NIQE pristine model shipped with the crate was fitted on this
//! repository's clean fixture corpus, so NIQE scores are internally
//! consistent across runs of this tool but are **not** comparable to
//! numbers produced by other implementations fitted on other corpora.

use ndarray::{Array1, Array2, Axis};

use crate::error::{Error, Result};
use crate::imaging::ImageTensor;
use crate::linalg;

/// Peak signal-to-noise ratio in dB over all RGB channels jointly.
///
/// Identical inputs return `f64::INFINITY`.
pub fn psnr(x: &ImageTensor, y: &ImageTensor) -> Result<f64> {
    if x.data().dim() != y.data().dim() {
        return Err(Error::shape(format!(
            "psnr: {:?} vs {:?}",
            x.data().dim(),
            y.data().dim()
        )));
    }
    let mut mse = 0.0;
    for (&a, &b) in x.data().iter().zip(y.data().iter()) {
        mse += (a - b) * (a - b);
    }
    mse /= x.data().len() as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (1.0 / mse).log10())
}

fn gaussian_window(size: usize, sigma: f64) -> Array2<f64> {
    let r = (size / 2) as f64;
    let mut w = Array2::from_shape_fn((size, size), |(i, j)| {
        let (di, dj) = (i as f64 - r, j as f64 - r);
        (-(di * di + dj * dj) / (2.0 * sigma * sigma)).exp()
    });
    let sum = w.sum();
    w.mapv_inplace(|v| v / sum);
    w
}

fn filter_valid(plane: &Array2<f64>, window: &Array2<f64>) -> Array2<f64> {
    let (h, w) = plane.dim();
    let (kh, kw) = window.dim();
    let (oh, ow) = (h - kh + 1, w - kw + 1);
    Array2::from_shape_fn((oh, ow), |(i, j)| {
        let mut acc = 0.0;
        for ki in 0..kh {
            for kj in 0..kw {
                acc += plane[[i + ki, j + kj]] * window[[ki, kj]];
            }
        }
        acc
    })
}

/// Structural similarity on luminance, 11×11 Gaussian window (σ = 1.5),
/// stabilizers C1 = 0.01², C2 = 0.03² on unit range.
pub fn ssim(x: &ImageTensor, y: &ImageTensor) -> Result<f64> {
    if x.data().dim() != y.data().dim() {
        return Err(Error::shape(format!(
            "ssim: {:?} vs {:?}",
            x.data().dim(),
            y.data().dim()
        )));
    }
    let lx = x.to_luma();
    let ly = y.to_luma();
    let (h, w) = lx.dim();
    if h < 11 || w < 11 {
        return Err(Error::shape("ssim: image smaller than the 11x11 window"));
    }
    let win = gaussian_window(11, 1.5);
    let c1 = 0.01_f64.powi(2);
    let c2 = 0.03_f64.powi(2);
    let mu_x = filter_valid(&lx, &win);
    let mu_y = filter_valid(&ly, &win);
    let xx = filter_valid(&(&lx * &lx), &win);
    let yy = filter_valid(&(&ly * &ly), &win);
    let xy = filter_valid(&(&lx * &ly), &win);
    let mut acc = 0.0;
    for i in 0..mu_x.dim().0 {
        for j in 0..mu_x.dim().1 {
            let (mx, my) = (mu_x[[i, j]], mu_y[[i, j]]);
            let vx = xx[[i, j]] - mx * mx;
            let vy = yy[[i, j]] - my * my;
            let cxy = xy[[i, j]] - mx * my;
            acc += ((2.0 * mx * my + c1) * (2.0 * cxy + c2))
                / ((mx * mx + my * my + c1) * (vx + vy + c2));
        }
    }
    Ok(acc / (mu_x.len() as f64))
}

// ---------------------------------------------------------------------------
// MSCN machinery shared by NIQE and PIQE.
// ---------------------------------------------------------------------------

/// Mean-subtracted contrast-normalized coefficients of a [0,255] gray plane,
/// with the locally estimated sigma field as the second return.
fn mscn(gray: &Array2<f64>) -> (Array2<f64>, Array2<f64>) {
    let win = gaussian_window(7, 7.0 / 6.0);
    let (h, w) = gray.dim();
    let r = 3usize;
    let reflect = |i: isize, len: usize| -> usize {
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
    };
    let mut mu = Array2::zeros((h, w));
    let mut mu2 = Array2::zeros((h, w));
    for i in 0..h {
        for j in 0..w {
            let mut m = 0.0;
            let mut m2 = 0.0;
            for ki in 0..7 {
                for kj in 0..7 {
                    let ii = reflect(i as isize + ki as isize - r as isize, h);
                    let jj = reflect(j as isize + kj as isize - r as isize, w);
                    let v = gray[[ii, jj]];
                    m += v * win[[ki, kj]];
                    m2 += v * v * win[[ki, kj]];
                }
            }
            mu[[i, j]] = m;
            mu2[[i, j]] = m2;
        }
    }
    let sigma = Array2::from_shape_fn((h, w), |(i, j)| (mu2[[i, j]] - mu[[i, j]] * mu[[i, j]]).abs().sqrt());
    let hat = Array2::from_shape_fn((h, w), |(i, j)| (gray[[i, j]] - mu[[i, j]]) / (sigma[[i, j]] + 1.0));
    (hat, sigma)
}

/// Generalized Gaussian fit by moment matching: returns (alpha, sigma^2).
fn fit_ggd(x: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let var = x.iter().map(|&v| v * v).sum::<f64>() / n;
    let mean_abs = x.iter().map(|&v| v.abs()).sum::<f64>() / n;
    let rho = var / (mean_abs * mean_abs).max(1e-12);
    let alpha = lookup_alpha(|a| {
        linalg::gamma(1.0 / a) * linalg::gamma(3.0 / a) / linalg::gamma(2.0 / a).powi(2)
    }, rho);
    (alpha, var)
}

/// Asymmetric generalized Gaussian fit: returns (alpha, eta, sigma_l^2, sigma_r^2).
fn fit_aggd(x: &[f64]) -> (f64, f64, f64, f64) {
    let mut nl = 0usize;
    let mut nr = 0usize;
    let mut sl = 0.0;
    let mut sr = 0.0;
    let mut mean_abs = 0.0;
    let mut mean_sq = 0.0;
    for &v in x {
        if v < 0.0 {
            nl += 1;
            sl += v * v;
        } else {
            nr += 1;
            sr += v * v;
        }
        mean_abs += v.abs();
        mean_sq += v * v;
    }
    let n = x.len() as f64;
    mean_abs /= n;
    mean_sq /= n;
    let sigma_l = (sl / (nl.max(1) as f64)).sqrt();
    let sigma_r = (sr / (nr.max(1) as f64)).sqrt();
    let gamma_hat = sigma_l / sigma_r.max(1e-12);
    let r_hat = (mean_abs * mean_abs) / mean_sq.max(1e-12);
    let r_big = r_hat * (gamma_hat.powi(3) + 1.0) * (gamma_hat + 1.0)
        / (gamma_hat * gamma_hat + 1.0).powi(2);
    let alpha = lookup_alpha(|a| {
        linalg::gamma(2.0 / a).powi(2) / (linalg::gamma(1.0 / a) * linalg::gamma(3.0 / a))
    }, r_big);
    let eta = (sigma_r - sigma_l) * linalg::gamma(2.0 / alpha) / linalg::gamma(1.0 / alpha)
        * (linalg::gamma(1.0 / alpha) / linalg::gamma(3.0 / alpha)).sqrt();
    (alpha, eta, sigma_l * sigma_l, sigma_r * sigma_r)
}

/// Grid search over alpha in [0.2, 10] minimizing |f(alpha) - target|.
fn lookup_alpha(f: impl Fn(f64) -> f64, target: f64) -> f64 {
    let mut best = 0.2;
    let mut best_err = f64::INFINITY;
    let mut a = 0.2;
    while a <= 10.0 {
        let err = (f(a) - target).abs();
        if err < best_err {
            best_err = err;
            best = a;
        }
        a += 0.005;
    }
    best
}

/// 18 features of one MSCN patch: GGD(2) + 4 neighbor products AGGD(4 each).
fn patch_features(hat: &Array2<f64>) -> Vec<f64> {
    let (h, w) = hat.dim();
    let flat: Vec<f64> = hat.iter().cloned().collect();
    let (alpha, var) = fit_ggd(&flat);
    let mut feats = vec![alpha, var];
    let mut products = [Vec::new(), Vec::new(), Vec::new(), Vec::new()];
    for i in 0..h {
        for j in 0..w {
            if j + 1 < w {
                products[0].push(hat[[i, j]] * hat[[i, j + 1]]);
            }
            if i + 1 < h {
                products[1].push(hat[[i, j]] * hat[[i + 1, j]]);
            }
            if i + 1 < h && j + 1 < w {
                products[2].push(hat[[i, j]] * hat[[i + 1, j + 1]]);
            }
            if i + 1 < h && j >= 1 {
                products[3].push(hat[[i, j]] * hat[[i + 1, j - 1]]);
            }
        }
    }
    for p in &products {
        let (a, eta, vl, vr) = fit_aggd(p);
        feats.extend_from_slice(&[a, eta, vl, vr]);
    }
    feats
}

const NIQE_PATCH: usize = 96;
const NIQE_FEATURES: usize = 36;
const NIQE_MODEL_VERSION: u32 = 1;

/// The pristine multivariate-Gaussian model NIQE compares against.
#[derive(Debug, Clone)]
pub struct NiqeModel {
    pub version: u32,
    pub mean: Array1<f64>,
    pub cov: Array2<f64>,
}

impl NiqeModel {
    pub fn to_text(&self) -> String {
        let mut out = format!("niqe_model_version\t{}\n", self.version);
        out.push_str(&format!("features\t{}\n", self.mean.len()));
        let mean_line: Vec<String> = self.mean.iter().map(|v| format!("{v:.17e}")).collect();
        out.push_str(&format!("mean\t{}\n", mean_line.join("\t")));
        for row in self.cov.rows() {
            let line: Vec<String> = row.iter().map(|v| format!("{v:.17e}")).collect();
            out.push_str(&format!("cov\t{}\n", line.join("\t")));
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut version = None;
        let mut dim = None;
        let mut mean = None;
        let mut cov_rows: Vec<Vec<f64>> = Vec::new();
        for line in text.lines() {
            let mut parts = line.split('\t');
            match parts.next() {
                Some("niqe_model_version") => {
                    version = Some(
                        parts
                            .next()
                            .and_then(|v| v.parse().ok())
                            .ok_or_else(|| Error::Config("bad niqe model version".into()))?,
                    )
                }
                Some("features") => {
                    dim = Some(
                        parts
                            .next()
                            .and_then(|v| v.parse().ok())
                            .ok_or_else(|| Error::Config("bad niqe feature count".into()))?,
                    )
                }
                Some("mean") => {
                    mean = Some(
                        parts
                            .map(|v| v.parse::<f64>())
                            .collect::<std::result::Result<Vec<_>, _>>()
                            .map_err(|_| Error::Config("bad niqe mean".into()))?,
                    )
                }
                Some("cov") => cov_rows.push(
                    parts
                        .map(|v| v.parse::<f64>())
                        .collect::<std::result::Result<Vec<_>, _>>()
                        .map_err(|_| Error::Config("bad niqe cov row".into()))?,
                ),
                _ => {}
            }
        }
        let version = version.ok_or_else(|| Error::Config("niqe model missing version".into()))?;
        let dim: usize = dim.ok_or_else(|| Error::Config("niqe model missing feature count".into()))?;
        let mean = mean.ok_or_else(|| Error::Config("niqe model missing mean".into()))?;
        if mean.len() != dim || cov_rows.len() != dim || cov_rows.iter().any(|r| r.len() != dim) {
            return Err(Error::Config("niqe model dimensions inconsistent".into()));
        }
        let cov = Array2::from_shape_fn((dim, dim), |(i, j)| cov_rows[i][j]);
        Ok(NiqeModel { version, mean: Array1::from_vec(mean), cov })
    }

    /// The model shipped with the crate, fitted on the clean fixture corpus.
    pub fn bundled() -> Result<Self> {
        NiqeModel::from_text(include_str!("../data/niqe_pristine_v1.tsv"))
    }
}

fn niqe_patch_feature_set(image: &ImageTensor, stride: usize) -> Result<Vec<Vec<f64>>> {
    let gray = image.to_luma().mapv(|v| v * 255.0);
    let (h, w) = gray.dim();
    if h < NIQE_PATCH || w < NIQE_PATCH {
        return Err(Error::shape(format!(
            "niqe requires at least {NIQE_PATCH}x{NIQE_PATCH}, got {h}x{w}"
        )));
    }
    let (hat1, sigma1) = mscn(&gray);
    // half-scale pass
    let (h2, w2) = (h / 2, w / 2);
    let small = Array2::from_shape_fn((h2, w2), |(i, j)| {
        (gray[[2 * i, 2 * j]]
            + gray[[2 * i + 1, 2 * j]]
            + gray[[2 * i, 2 * j + 1]]
            + gray[[2 * i + 1, 2 * j + 1]])
            / 4.0
    });
    let (hat2, _) = mscn(&small);

    let mut origins = Vec::new();
    let mut oi = 0;
    while oi + NIQE_PATCH <= h {
        let mut oj = 0;
        while oj + NIQE_PATCH <= w {
            // keep half-scale patches in bounds and 2-aligned
            if oi % 2 == 0 && oj % 2 == 0 {
                origins.push((oi, oj));
            }
            oj += stride;
        }
        oi += stride;
    }
    // Patch sharpness = mean local sigma; keep patches above 0.75 * max.
    let sharp_of = |(oi, oj): (usize, usize)| -> f64 {
        let mut s = 0.0;
        for i in 0..NIQE_PATCH {
            for j in 0..NIQE_PATCH {
                s += sigma1[[oi + i, oj + j]];
            }
        }
        s / (NIQE_PATCH * NIQE_PATCH) as f64
    };
    let sharpness: Vec<f64> = origins.iter().map(|&o| sharp_of(o)).collect();
    let max_sharp = sharpness.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let threshold = 0.75 * max_sharp;
    let mut features = Vec::new();
    for (&(oi, oj), &sharp) in origins.iter().zip(sharpness.iter()) {
        if sharp < threshold {
            continue;
        }
        let p1 = hat1
            .slice(ndarray::s![oi..oi + NIQE_PATCH, oj..oj + NIQE_PATCH])
            .to_owned();
        let half = NIQE_PATCH / 2;
        let p2 = hat2
            .slice(ndarray::s![oi / 2..oi / 2 + half, oj / 2..oj / 2 + half])
            .to_owned();
        let mut f = patch_features(&p1);
        f.extend(patch_features(&p2));
        debug_assert_eq!(f.len(), NIQE_FEATURES);
        features.push(f);
    }
    if features.is_empty() {
        return Err(Error::Numeric("niqe: no patches selected".into()));
    }
    Ok(features)
}

fn mvg_fit(features: &[Vec<f64>]) -> (Array1<f64>, Array2<f64>) {
    let n = features.len();
    let d = features[0].len();
    let mut mean = Array1::<f64>::zeros(d);
    for f in features {
        for (k, &v) in f.iter().enumerate() {
            mean[k] += v;
        }
    }
    mean.mapv_inplace(|v| v / n as f64);
    let mut cov = Array2::<f64>::zeros((d, d));
    for f in features {
        for i in 0..d {
            let di = f[i] - mean[i];
            for j in i..d {
                cov[[i, j]] += di * (f[j] - mean[j]);
            }
        }
    }
    let denom = (n.max(2) - 1) as f64;
    for i in 0..d {
        for j in i..d {
            cov[[i, j]] /= denom;
            cov[[j, i]] = cov[[i, j]];
        }
    }
    (mean, cov)
}

/// Fit a pristine NIQE model from a corpus of clean images.
pub fn fit_niqe_model(images: &[ImageTensor]) -> Result<NiqeModel> {
    let mut all = Vec::new();
    for img in images {
        // overlapping patches condition the 36-dim covariance better
        all.extend(niqe_patch_feature_set(img, NIQE_PATCH / 3)?);
    }
    if all.len() < 2 {
        return Err(Error::Corpus("niqe fit needs at least two patches".into()));
    }
    let (mean, cov) = mvg_fit(&all);
    Ok(NiqeModel { version: NIQE_MODEL_VERSION, mean, cov })
}

/// Natural image quality evaluator: distance between the image's
/// feature statistics and the pristine model (lower is better).
pub fn niqe(image: &ImageTensor, model: &NiqeModel) -> Result<f64> {
    let feats = niqe_patch_feature_set(image, NIQE_PATCH)?;
    let (mean_d, cov_d) = mvg_fit(&feats);
    let d = model.mean.len();
    let mut pooled = Array2::<f64>::zeros((d, d));
    for i in 0..d {
        for j in 0..d {
            pooled[[i, j]] = (model.cov[[i, j]] + cov_d[[i, j]]) / 2.0;
        }
        // ridge for numerical stability on small patch sets
        pooled[[i, i]] += 1e-6;
    }
    let diff = &model.mean - &mean_d;
    let x = linalg::solve(&pooled, &diff)?;
    let q: f64 = diff.iter().zip(x.iter()).map(|(&a, &b)| a * b).sum();
    Ok(q.max(0.0).sqrt())
}

const PIQE_BLOCK: usize = 16;
const PIQE_ACTIVITY_THRESHOLD: f64 = 0.1;
const PIQE_SEGMENT_THRESHOLD: f64 = 0.1;

/// Perception-based image quality evaluator (lower is better).
///
/// Procedure: MSCN coefficients over the [0,255] luminance plane; 16×16
/// blocks with variance above 0.1 are "spatially active"; an active block
/// is scored as distorted if any 6-sample boundary segment is near-uniform
/// (blockiness) or if its center/surround deviations look like pure noise;
/// the final score averages distortion over active blocks, scaled to
/// [0, 100].
pub fn piqe(image: &ImageTensor) -> Result<f64> {
    let gray = image.to_luma().mapv(|v| v * 255.0);
    let (h, w) = gray.dim();
    if h < PIQE_BLOCK || w < PIQE_BLOCK {
        return Err(Error::shape(format!(
            "piqe requires at least {PIQE_BLOCK}x{PIQE_BLOCK}, got {h}x{w}"
        )));
    }
    let (hat, _) = mscn(&gray);
    let rows = h / PIQE_BLOCK;
    let cols = w / PIQE_BLOCK;
    let mut active = 0usize;
    let mut dist_score_sum = 0.0;
    for bi in 0..rows {
        for bj in 0..cols {
            let block = hat.slice(ndarray::s![
                bi * PIQE_BLOCK..(bi + 1) * PIQE_BLOCK,
                bj * PIQE_BLOCK..(bj + 1) * PIQE_BLOCK
            ]);
            let n = block.len() as f64;
            let mean = block.sum() / n;
            let var = block.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / n;
            if var <= PIQE_ACTIVITY_THRESHOLD {
                continue;
            }
            active += 1;
            let impaired = block_has_uniform_segment(&block.to_owned());
            let noisy = block_is_noise_like(&block.to_owned(), var);
            if impaired {
                dist_score_sum += 1.0;
            } else if noisy {
                dist_score_sum += var.min(1.0);
            }
        }
    }
    Ok(100.0 * (dist_score_sum + 1.0) / (active as f64 + 1.0))
}

/// A compression-grid artifact leaves a near-uniform streak along *every*
/// block boundary; natural edges leave at most a couple.
fn block_has_uniform_segment(block: &Array2<f64>) -> bool {
    let b = PIQE_BLOCK;
    let seg = 6usize;
    let std_of = |vals: &[f64]| -> f64 {
        let m = vals.iter().sum::<f64>() / vals.len() as f64;
        (vals.iter().map(|&v| (v - m) * (v - m)).sum::<f64>() / vals.len() as f64).sqrt()
    };
    let mut uniform_boundaries = 0;
    for line in [0usize, b - 1] {
        let mut row_uniform = false;
        let mut col_uniform = false;
        for start in 0..=(b - seg) {
            let row: Vec<f64> = (start..start + seg).map(|j| block[[line, j]]).collect();
            if std_of(&row) < PIQE_SEGMENT_THRESHOLD {
                row_uniform = true;
            }
            let col: Vec<f64> = (start..start + seg).map(|i| block[[i, line]]).collect();
            if std_of(&col) < PIQE_SEGMENT_THRESHOLD {
                col_uniform = true;
            }
        }
        uniform_boundaries += usize::from(row_uniform) + usize::from(col_uniform);
    }
    uniform_boundaries == 4
}

/// Noise-like blocks have comparable center and surround deviation.
fn block_is_noise_like(block: &Array2<f64>, var: f64) -> bool {
    let b = PIQE_BLOCK;
    let mut center = Vec::new();
    let mut surround = Vec::new();
    for i in 0..b {
        for j in 0..b {
            let v = block[[i, j]];
            if (4..b - 4).contains(&i) && (4..b - 4).contains(&j) {
                center.push(v);
            } else {
                surround.push(v);
            }
        }
    }
    let sd = |vals: &[f64]| -> f64 {
        let m = vals.iter().sum::<f64>() / vals.len() as f64;
        (vals.iter().map(|&v| (v - m) * (v - m)).sum::<f64>() / vals.len() as f64).sqrt()
    };
    let (sc, ss) = (sd(&center), sd(&surround));
    let beta = (sc - ss).abs() / sc.max(ss).max(1e-12);
    var.sqrt() > 2.0 * beta
}

// ---------------------------------------------------------------------------
// PCA projection and cluster statistics.
// ---------------------------------------------------------------------------

/// Result of projecting representation vectors to 2-D.
#[derive(Debug, Clone)]
pub struct ProjectionResult {
    /// `[N, 2]` coordinates.
    pub coords: Array2<f64>,
    /// Fraction of total variance captured by each of the two components.
    pub explained: [f64; 2],
    pub labels: Vec<String>,
}

/// Mean-center and project onto the top-2 principal components.
///
/// Sign convention: within each component the loading with the largest
/// magnitude is made positive, so output is independent of input order.
pub fn pca_project(vectors: &Array2<f64>, labels: &[String]) -> Result<ProjectionResult> {
    let (n, d) = vectors.dim();
    if n < 3 {
        return Err(Error::parameter(format!("pca needs at least 3 vectors, got {n}")));
    }
    if labels.len() != n {
        return Err(Error::shape(format!("{} labels for {n} vectors", labels.len())));
    }
    let mean = vectors.sum_axis(Axis(0)) / n as f64;
    let centered = vectors - &mean.view().insert_axis(Axis(0));
    let cov = centered.t().dot(&centered) / (n as f64 - 1.0);
    let trace: f64 = (0..d).map(|i| cov[[i, i]]).sum();
    let (vals, vecs) = linalg::eigh_symmetric(&cov);
    let mut comps = Array2::<f64>::zeros((d, 2));
    let mut explained = [0.0, 0.0];
    for c in 0..2 {
        let mut col: Vec<f64> = (0..d).map(|k| vecs[[k, c]]).collect();
        // fixed sign convention
        let (mut max_abs, mut max_idx) = (0.0, 0);
        for (k, &v) in col.iter().enumerate() {
            if v.abs() > max_abs {
                max_abs = v.abs();
                max_idx = k;
            }
        }
        if col[max_idx] < 0.0 {
            for v in &mut col {
                *v = -*v;
            }
        }
        for k in 0..d {
            comps[[k, c]] = col[k];
        }
        explained[c] = if trace > 1e-18 { (vals[c] / trace).max(0.0) } else { 0.0 };
    }
    let coords = centered.dot(&comps);
    Ok(ProjectionResult { coords, explained, labels: labels.to_vec() })
}

/// Mean silhouette coefficient of the 2-D coordinates under their labels.
pub fn silhouette(coords: &Array2<f64>, labels: &[String]) -> Result<f64> {
    let n = coords.nrows();
    if labels.len() != n {
        return Err(Error::shape("silhouette: label count mismatch"));
    }
    let unique: std::collections::BTreeSet<&String> = labels.iter().collect();
    if unique.len() < 2 {
        return Err(Error::parameter("silhouette needs at least two clusters"));
    }
    let dist = |i: usize, j: usize| -> f64 {
        let dx = coords[[i, 0]] - coords[[j, 0]];
        let dy = coords[[i, 1]] - coords[[j, 1]];
        (dx * dx + dy * dy).sqrt()
    };
    let mut total = 0.0;
    for i in 0..n {
        let mut same_sum = 0.0;
        let mut same_count = 0usize;
        let mut other: std::collections::BTreeMap<&String, (f64, usize)> = Default::default();
        for j in 0..n {
            if i == j {
                continue;
            }
            if labels[j] == labels[i] {
                same_sum += dist(i, j);
                same_count += 1;
            } else {
                let e = other.entry(&labels[j]).or_insert((0.0, 0));
                e.0 += dist(i, j);
                e.1 += 1;
            }
        }
        if same_count == 0 {
            continue; // singleton cluster contributes 0
        }
        let a = same_sum / same_count as f64;
        let b = other
            .values()
            .map(|(s, c)| s / *c as f64)
            .fold(f64::INFINITY, f64::min);
        let s = (b - a) / a.max(b).max(1e-18);
        total += s;
    }
    Ok(total / n as f64)
}

/// Spearman rank correlation with average ranks on ties.
pub fn spearman(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return Err(Error::parameter("spearman needs two equal-length series"));
    }
    let rank = |v: &[f64]| -> Vec<f64> {
        let mut idx: Vec<usize> = (0..v.len()).collect();
        idx.sort_by(|&a, &b| v[a].partial_cmp(&v[b]).expect("finite"));
        let mut ranks = vec![0.0; v.len()];
        let mut i = 0;
        while i < idx.len() {
            let mut j = i;
            while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
                j += 1;
            }
            let avg = (i + j) as f64 / 2.0 + 1.0;
            for k in i..=j {
                ranks[idx[k]] = avg;
            }
            i = j + 1;
        }
        ranks
    };
    let rx = rank(x);
    let ry = rank(y);
    let n = x.len() as f64;
    let mx = rx.iter().sum::<f64>() / n;
    let my = ry.iter().sum::<f64>() / n;
    let mut num = 0.0;
    let mut dx = 0.0;
    let mut dy = 0.0;
    for i in 0..x.len() {
        num += (rx[i] - mx) * (ry[i] - my);
        dx += (rx[i] - mx).powi(2);
        dy += (ry[i] - my).powi(2);
    }
    if dx == 0.0 || dy == 0.0 {
        return Err(Error::Numeric("spearman: constant series".into()));
    }
    Ok(num / (dx * dy).sqrt())
}

// ---------------------------------------------------------------------------
// Reports.
// ---------------------------------------------------------------------------

/// Per-image rows plus aggregates; serializes to CSV and a text summary.
#[derive(Debug, Clone, Default)]
pub struct MetricReport {
    pub rows: Vec<MetricRow>,
    pub model_params_m: Option<f64>,
    pub model_gflops: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct MetricRow {
    pub name: String,
    pub psnr: Option<f64>,
    pub ssim: Option<f64>,
    pub niqe: Option<f64>,
    pub piqe: Option<f64>,
}

impl MetricReport {
    fn aggregate(&self, f: impl Fn(&MetricRow) -> Option<f64>) -> Option<f64> {
        let vals: Vec<f64> = self.rows.iter().filter_map(&f).collect();
        if vals.is_empty() {
            None
        } else {
            Some(vals.iter().sum::<f64>() / vals.len() as f64)
        }
    }

    pub fn mean_psnr(&self) -> Option<f64> {
        self.aggregate(|r| r.psnr)
    }

    pub fn mean_ssim(&self) -> Option<f64> {
        self.aggregate(|r| r.ssim)
    }

    pub fn mean_niqe(&self) -> Option<f64> {
        self.aggregate(|r| r.niqe)
    }

    pub fn mean_piqe(&self) -> Option<f64> {
        self.aggregate(|r| r.piqe)
    }

    pub fn to_csv(&self) -> String {
        let fmt = |v: Option<f64>| v.map_or(String::new(), |v| format!("{v:.6}"));
        let mut out = String::from("name,psnr_db,ssim,niqe,piqe\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                r.name,
                fmt(r.psnr),
                fmt(r.ssim),
                fmt(r.niqe),
                fmt(r.piqe)
            ));
        }
        out.push_str(&format!(
            "aggregate,{},{},{},{}\n",
            fmt(self.mean_psnr()),
            fmt(self.mean_ssim()),
            fmt(self.mean_niqe()),
            fmt(self.mean_piqe())
        ));
        out
    }

    pub fn summary(&self) -> String {
        let mut out = String::new();
        let fmt = |v: Option<f64>| v.map_or("-".to_string(), |v| format!("{v:.4}"));
        out.push_str(&format!("images: {}\n", self.rows.len()));
        out.push_str(&format!("mean PSNR (dB): {}\n", fmt(self.mean_psnr())));
        out.push_str(&format!("mean SSIM:      {}\n", fmt(self.mean_ssim())));
        out.push_str(&format!("mean NIQE:      {}\n", fmt(self.mean_niqe())));
        out.push_str(&format!("mean PIQE:      {}\n", fmt(self.mean_piqe())));
        if let Some(p) = self.model_params_m {
            out.push_str(&format!("model params (M): {p:.3}\n"));
        }
        if let Some(g) = self.model_gflops {
            out.push_str(&format!("model GFLOPs:     {g:.3}\n"));
        }
        out
    }
}
