//! Predefined degradation models: explicit, physically grounded forward
//! operators for noise, motion blur, low light, smoke and the composite
//! model used for real surgical footage, plus severity-level presets and
//! seeded parameter sampling.
//!
//! Every operator is a pure function of `(image, parameters, seed)`; the
//! identity parameterization returns its input bit-exactly.

use ndarray::{Array2, Array3};
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::imaging::{self, ImageTensor};
use crate::rng::rng_for;

/// The degradation families.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DegradationKind {
    Noise,
    MotionBlur,
    LowLight,
    Smoke,
    SesComposite,
}

impl DegradationKind {
    pub const ALL: [DegradationKind; 5] = [
        DegradationKind::Noise,
        DegradationKind::MotionBlur,
        DegradationKind::LowLight,
        DegradationKind::Smoke,
        DegradationKind::SesComposite,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            DegradationKind::Noise => "noise",
            DegradationKind::MotionBlur => "motion_blur",
            DegradationKind::LowLight => "low_light",
            DegradationKind::Smoke => "smoke",
            DegradationKind::SesComposite => "ses_composite",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "noise" => Ok(DegradationKind::Noise),
            "motion_blur" => Ok(DegradationKind::MotionBlur),
            "low_light" => Ok(DegradationKind::LowLight),
            "smoke" => Ok(DegradationKind::Smoke),
            "ses_composite" => Ok(DegradationKind::SesComposite),
            other => Err(Error::parameter(format!("unknown degradation kind '{other}'"))),
        }
    }
}

/// Severity levels; ranges for level i sit strictly above level i-1.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, serde::Serialize, serde::Deserialize)]
pub enum DegradationLevel {
    L1,
    L2,
    L3,
    L4,
}

impl DegradationLevel {
    pub const ALL: [DegradationLevel; 4] = [
        DegradationLevel::L1,
        DegradationLevel::L2,
        DegradationLevel::L3,
        DegradationLevel::L4,
    ];

    pub fn index(&self) -> usize {
        match self {
            DegradationLevel::L1 => 0,
            DegradationLevel::L2 => 1,
            DegradationLevel::L3 => 2,
            DegradationLevel::L4 => 3,
        }
    }

    pub fn name(&self) -> &'static str {
        ["L1", "L2", "L3", "L4"][self.index()]
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "L1" | "l1" => Ok(DegradationLevel::L1),
            "L2" | "l2" => Ok(DegradationLevel::L2),
            "L3" | "l3" => Ok(DegradationLevel::L3),
            "L4" | "l4" => Ok(DegradationLevel::L4),
            other => Err(Error::parameter(format!("unknown level '{other}'"))),
        }
    }

    /// Half-open noise std range `[lo, hi)`.
    pub fn noise_std_range(&self) -> (f64, f64) {
        [(0.02, 0.05), (0.05, 0.10), (0.10, 0.20), (0.20, 0.35)][self.index()]
    }

    /// Half-open motion blur length range in pixels.
    pub fn blur_len_range(&self) -> (f64, f64) {
        [(3.0, 5.0), (5.0, 9.0), (9.0, 15.0), (15.0, 25.0)][self.index()]
    }

    /// Half-open mean illumination range (lower is darker).
    pub fn illumination_mean_range(&self) -> (f64, f64) {
        [(0.6, 0.8), (0.4, 0.6), (0.25, 0.4), (0.1, 0.25)][self.index()]
    }

    /// Half-open mean transmission range (lower is thicker smoke).
    pub fn transmission_mean_range(&self) -> (f64, f64) {
        [(0.75, 0.9), (0.6, 0.75), (0.4, 0.6), (0.2, 0.4)][self.index()]
    }

    /// Half-open gamma range for the composite model (wider is more severe).
    pub fn ses_gamma_range(&self) -> (f64, f64) {
        [(0.9, 1.1), (0.8, 1.25), (0.65, 1.5), (0.5, 2.0)][self.index()]
    }
}

/// Airlight: scalar by default, per-channel as an option.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub enum Airlight {
    Scalar(f64),
    PerChannel([f64; 3]),
}

impl Airlight {
    pub fn channel(&self, c: usize) -> f64 {
        match self {
            Airlight::Scalar(a) => *a,
            Airlight::PerChannel(v) => v[c],
        }
    }

    fn validate(&self) -> Result<()> {
        let ok = match self {
            Airlight::Scalar(a) => (0.0..=1.0).contains(a),
            Airlight::PerChannel(v) => v.iter().all(|a| (0.0..=1.0).contains(a)),
        };
        if ok {
            Ok(())
        } else {
            Err(Error::parameter(format!("airlight {self:?} outside [0,1]")))
        }
    }
}

/// Explicit parameters for one degradation instance.
#[derive(Debug, Clone)]
pub struct DegradationParameters {
    pub kind: DegradationKind,
    /// Scalar std of the zero-mean Gaussian noise.
    pub noise_std: Option<f64>,
    /// Odd-sized kernel with non-negative entries summing to 1.
    pub blur_kernel: Option<Array2<f64>>,
    /// Per-pixel illumination in (0, 1].
    pub illumination: Option<Array2<f64>>,
    /// Per-pixel transmission in (0, 1].
    pub transmission: Option<Array2<f64>>,
    pub airlight: Option<Airlight>,
    pub ses_alpha: Option<f64>,
    pub ses_beta: Option<f64>,
    pub ses_gamma: Option<f64>,
    /// Downscale factor appended by the training pipelines (>= 1).
    pub scale: u32,
}

impl DegradationParameters {
    pub fn identity(kind: DegradationKind) -> Self {
        DegradationParameters {
            kind,
            noise_std: Some(0.0),
            blur_kernel: Some(delta_kernel(3)),
            illumination: None,
            transmission: None,
            airlight: Some(Airlight::Scalar(0.0)),
            ses_alpha: Some(1.0),
            ses_beta: Some(1.0),
            ses_gamma: Some(1.0),
            scale: 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(s) = self.noise_std {
            if !(0.0..=0.5).contains(&s) {
                return Err(Error::parameter(format!("noise std {s} outside [0, 0.5]")));
            }
        }
        if let Some(k) = &self.blur_kernel {
            validate_kernel(k)?;
        }
        for (name, field) in [("illumination", &self.illumination), ("transmission", &self.transmission)] {
            if let Some(f) = field {
                for &v in f.iter() {
                    if !(v > 0.0 && v <= 1.0) {
                        return Err(Error::parameter(format!("{name} value {v} outside (0, 1]")));
                    }
                }
            }
        }
        if let Some(a) = &self.airlight {
            a.validate()?;
        }
        for (name, v) in [("ses_alpha", self.ses_alpha), ("ses_beta", self.ses_beta), ("ses_gamma", self.ses_gamma)] {
            if let Some(v) = v {
                if !(v.is_finite() && v > 0.0) {
                    return Err(Error::parameter(format!("{name} must be positive, got {v}")));
                }
            }
        }
        if self.scale < 1 {
            return Err(Error::parameter("scale must be >= 1"));
        }
        Ok(())
    }

    /// Human-readable key-value serialization (sidecar diagnostics).
    pub fn to_kv_string(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!("kind = {}\n", self.kind.name()));
        out.push_str(&format!("scale = {}\n", self.scale));
        if let Some(s) = self.noise_std {
            out.push_str(&format!("noise_std = {s:.17e}\n"));
        }
        if let Some(k) = &self.blur_kernel {
            out.push_str(&format!("blur_kernel_size = {}\n", k.dim().0));
            out.push_str(&format!("blur_kernel_sum = {:.17e}\n", k.sum()));
        }
        if let Some(f) = &self.illumination {
            out.push_str(&field_stats("illumination", f));
        }
        if let Some(f) = &self.transmission {
            out.push_str(&field_stats("transmission", f));
        }
        match self.airlight {
            Some(Airlight::Scalar(a)) => out.push_str(&format!("airlight = {a:.17e}\n")),
            Some(Airlight::PerChannel([r, g, b])) => {
                out.push_str(&format!("airlight_rgb = {r:.17e} {g:.17e} {b:.17e}\n"))
            }
            None => {}
        }
        for (name, v) in [("ses_alpha", self.ses_alpha), ("ses_beta", self.ses_beta), ("ses_gamma", self.ses_gamma)] {
            if let Some(v) = v {
                out.push_str(&format!("{name} = {v:.17e}\n"));
            }
        }
        out
    }
}

fn field_stats(name: &str, f: &Array2<f64>) -> String {
    let mean = f.sum() / f.len() as f64;
    let min = f.iter().cloned().fold(f64::INFINITY, f64::min);
    let max = f.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    format!("{name}_mean = {mean:.6}\n{name}_min = {min:.6}\n{name}_max = {max:.6}\n")
}

fn validate_kernel(k: &Array2<f64>) -> Result<()> {
    let (kh, kw) = k.dim();
    if kh % 2 == 0 || kw % 2 == 0 {
        return Err(Error::parameter(format!("kernel must be odd-sized, got {kh}x{kw}")));
    }
    let mut sum = 0.0;
    for &v in k.iter() {
        if v < 0.0 {
            return Err(Error::parameter(format!("kernel entry {v} is negative")));
        }
        sum += v;
    }
    if (sum - 1.0).abs() > 1e-6 {
        return Err(Error::parameter(format!("kernel sums to {sum}, expected 1")));
    }
    Ok(())
}

/// The identity kernel: 1 at center.
pub fn delta_kernel(size: usize) -> Array2<f64> {
    assert!(size % 2 == 1);
    let mut k = Array2::zeros((size, size));
    k[[size / 2, size / 2]] = 1.0;
    k
}

/// An anti-aliased motion-blur line kernel of the given length and angle,
/// normalized to sum 1.
pub fn line_kernel(length: f64, angle: f64) -> Array2<f64> {
    assert!(length >= 1.0);
    let mut size = length.ceil() as usize;
    if size % 2 == 0 {
        size += 1;
    }
    size = size.max(3);
    let mut k = Array2::<f64>::zeros((size, size));
    let center = (size / 2) as f64;
    let (dy, dx) = (angle.sin(), angle.cos());
    let half = (length - 1.0) / 2.0;
    let steps = (length * 8.0).ceil() as usize;
    for s in 0..=steps {
        let t = -half + (s as f64 / steps as f64) * (length - 1.0);
        let (y, x) = (center + t * dy, center + t * dx);
        let (i0, j0) = (y.floor() as isize, x.floor() as isize);
        let (fy, fx) = (y - i0 as f64, x - j0 as f64);
        for (di, wy) in [(0isize, 1.0 - fy), (1, fy)] {
            for (dj, wx) in [(0isize, 1.0 - fx), (1, fx)] {
                let (i, j) = (i0 + di, j0 + dj);
                if i >= 0 && j >= 0 && (i as usize) < size && (j as usize) < size {
                    k[[i as usize, j as usize]] += wy * wx;
                }
            }
        }
    }
    let sum = k.sum();
    k.mapv_inplace(|v| v / sum);
    k
}

/// A smooth random field in `[lo, hi]`: blurred white noise, min-max rescaled.
pub fn smooth_field(h: usize, w: usize, lo: f64, hi: f64, rng: &mut rand_chacha::ChaCha12Rng) -> Array2<f64> {
    assert!(lo <= hi);
    let noise = Array2::from_shape_fn((h, w), |_| rng.random::<f64>());
    let sigma = (h.min(w) as f64 / 8.0).max(2.0);
    let kernel = imaging::gaussian_kernel_1d(sigma);
    let blurred = imaging::blur_plane(&noise, &kernel);
    let min = blurred.iter().cloned().fold(f64::INFINITY, f64::min);
    let max = blurred.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let span = (max - min).max(1e-12);
    blurred.mapv(|v| lo + (v - min) / span * (hi - lo))
}

/// Shared noise realization so composite and plain noise agree bit-for-bit.
fn noise_plane(h: usize, w: usize, std: f64, seed: u64) -> Array3<f64> {
    let mut rng = rng_for(seed, "noise-realization");
    let normal = Normal::new(0.0, std).expect("std validated");
    Array3::from_shape_fn((h, w, 3), |_| normal.sample(&mut rng))
}

/// `I = clamp(J + n)`, `n ~ N(0, n_std)`; `n_std = 0` returns `J` bit-exactly.
pub fn degrade_noise(image: &ImageTensor, n_std: f64, seed: u64) -> Result<ImageTensor> {
    if !(0.0..=0.5).contains(&n_std) {
        return Err(Error::parameter(format!("noise std {n_std} outside [0, 0.5]")));
    }
    if n_std == 0.0 {
        return Ok(image.clone());
    }
    let noise = noise_plane(image.height(), image.width(), n_std, seed);
    ImageTensor::from_clamped(image.data() + &noise)
}

fn convolve_reflect(plane: &Array2<f64>, k: &Array2<f64>) -> Array2<f64> {
    let (h, w) = plane.dim();
    let (kh, kw) = k.dim();
    let (rh, rw) = (kh / 2, kw / 2);
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
    Array2::from_shape_fn((h, w), |(i, j)| {
        let mut acc = 0.0;
        for ki in 0..kh {
            for kj in 0..kw {
                let ii = reflect(i as isize + ki as isize - rh as isize, h);
                let jj = reflect(j as isize + kj as isize - rw as isize, w);
                acc += plane[[ii, jj]] * k[[ki, kj]];
            }
        }
        acc
    })
}

/// `I = k ⊗ J`, per channel, reflective padding.
pub fn degrade_blur(image: &ImageTensor, kernel: &Array2<f64>) -> Result<ImageTensor> {
    validate_kernel(kernel)?;
    let mut out = Array3::zeros(image.data().dim());
    for c in 0..3 {
        let plane = image.data().index_axis(ndarray::Axis(2), c).to_owned();
        out.index_axis_mut(ndarray::Axis(2), c)
            .assign(&convolve_reflect(&plane, kernel));
    }
    ImageTensor::from_clamped(out)
}

/// `I = clamp(J · L + n)` with `L` in (0, 1].
pub fn degrade_lowlight(
    image: &ImageTensor,
    illumination: &Array2<f64>,
    n_std: f64,
    seed: u64,
) -> Result<ImageTensor> {
    let (h, w) = (image.height(), image.width());
    if illumination.dim() != (h, w) {
        return Err(Error::shape(format!(
            "illumination {:?} does not match image {h}x{w}",
            illumination.dim()
        )));
    }
    for &v in illumination.iter() {
        if !(v > 0.0 && v <= 1.0) {
            return Err(Error::parameter(format!("illumination value {v} outside (0, 1]")));
        }
    }
    if !(0.0..=0.5).contains(&n_std) {
        return Err(Error::parameter(format!("noise std {n_std} outside [0, 0.5]")));
    }
    let mut out = image.data().clone();
    for c in 0..3 {
        let mut plane = out.index_axis_mut(ndarray::Axis(2), c);
        plane.zip_mut_with(illumination, |p, &l| *p *= l);
    }
    if n_std > 0.0 {
        out += &noise_plane(h, w, n_std, seed);
    }
    ImageTensor::from_clamped(out)
}

/// `I = J·t + A·(1 − t)` with `t` in (0, 1] and `A` in [0, 1].
pub fn degrade_smoke(image: &ImageTensor, transmission: &Array2<f64>, airlight: Airlight) -> Result<ImageTensor> {
    let (h, w) = (image.height(), image.width());
    if transmission.dim() != (h, w) {
        return Err(Error::shape(format!(
            "transmission {:?} does not match image {h}x{w}",
            transmission.dim()
        )));
    }
    for &v in transmission.iter() {
        if !(v > 0.0 && v <= 1.0) {
            return Err(Error::parameter(format!("transmission value {v} outside (0, 1]")));
        }
    }
    airlight.validate()?;
    let mut out = image.data().clone();
    for c in 0..3 {
        let a = airlight.channel(c);
        let mut plane = out.index_axis_mut(ndarray::Axis(2), c);
        plane.zip_mut_with(transmission, |p, &t| *p = *p * t + a * (1.0 - t));
    }
    ImageTensor::from_clamped(out)
}

/// The composite model: gain, blur, gamma, gain, haze, downscale, noise —
/// applied strictly in that order, with a final clamp.
pub fn degrade_ses(image: &ImageTensor, p: &DegradationParameters, seed: u64) -> Result<ImageTensor> {
    if p.kind != DegradationKind::SesComposite {
        return Err(Error::parameter(format!(
            "degrade_ses requires ses_composite parameters, got {}",
            p.kind.name()
        )));
    }
    p.validate()?;
    let alpha = p.ses_alpha.ok_or_else(|| Error::parameter("ses_alpha missing"))?;
    let beta = p.ses_beta.ok_or_else(|| Error::parameter("ses_beta missing"))?;
    let gamma = p.ses_gamma.ok_or_else(|| Error::parameter("ses_gamma missing"))?;
    let kernel = p.blur_kernel.as_ref().ok_or_else(|| Error::parameter("blur_kernel missing"))?;
    let airlight = p.airlight.ok_or_else(|| Error::parameter("airlight missing"))?;
    let n_std = p.noise_std.unwrap_or(0.0);

    let (h, w) = (image.height(), image.width());
    // Work on a raw array: intermediates may leave [0,1] before the final clamp.
    let mut x = image.data().clone();
    if alpha != 1.0 {
        x.mapv_inplace(|v| v * alpha);
    }
    let mut blurred = Array3::zeros(x.dim());
    for c in 0..3 {
        let plane = x.index_axis(ndarray::Axis(2), c).to_owned();
        blurred
            .index_axis_mut(ndarray::Axis(2), c)
            .assign(&convolve_reflect(&plane, kernel));
    }
    let mut x = blurred;
    if gamma != 1.0 {
        x.mapv_inplace(|v| v.max(0.0).powf(gamma));
    }
    if beta != 1.0 {
        x.mapv_inplace(|v| v * beta);
    }
    if let Some(t) = &p.transmission {
        if t.dim() != (h, w) {
            return Err(Error::shape(format!(
                "transmission {:?} does not match image {h}x{w}",
                t.dim()
            )));
        }
        for c in 0..3 {
            let a = airlight.channel(c);
            let mut plane = x.index_axis_mut(ndarray::Axis(2), c);
            plane.zip_mut_with(t, |p, &tv| *p = *p * tv + a * (1.0 - tv));
        }
    }
    let s = p.scale as usize;
    let mut x = if s > 1 {
        let (oh, ow) = (h / s, w / s);
        if oh < imaging::MIN_DIM || ow < imaging::MIN_DIM {
            return Err(Error::shape(format!("downscaled output {oh}x{ow} below minimum")));
        }
        let rh = crate::tensor::resample::bicubic_matrix(h, oh);
        let rw = crate::tensor::resample::bicubic_matrix(w, ow);
        let mut out = Array3::zeros((oh, ow, 3));
        for c in 0..3 {
            let plane = x.index_axis(ndarray::Axis(2), c).to_owned();
            out.index_axis_mut(ndarray::Axis(2), c).assign(&rh.dot(&plane).dot(&rw.t()));
        }
        out
    } else {
        x
    };
    if n_std > 0.0 {
        let (oh, ow, _) = x.dim();
        x += &noise_plane(oh, ow, n_std, seed);
    }
    ImageTensor::from_clamped(x)
}

/// Apply `params` to an image. For the four primitive kinds this is the
/// training pipeline: degrade at full resolution, then bicubic-downscale by
/// `params.scale`. The composite kind follows its own internal order.
pub fn apply(image: &ImageTensor, params: &DegradationParameters, seed: u64) -> Result<ImageTensor> {
    params.validate()?;
    let degraded = match params.kind {
        DegradationKind::Noise => {
            let std = params.noise_std.ok_or_else(|| Error::parameter("noise_std missing"))?;
            degrade_noise(image, std, seed)?
        }
        DegradationKind::MotionBlur => {
            let k = params
                .blur_kernel
                .as_ref()
                .ok_or_else(|| Error::parameter("blur_kernel missing"))?;
            degrade_blur(image, k)?
        }
        DegradationKind::LowLight => {
            let l = params
                .illumination
                .as_ref()
                .ok_or_else(|| Error::parameter("illumination missing"))?;
            degrade_lowlight(image, l, params.noise_std.unwrap_or(0.0), seed)?
        }
        DegradationKind::Smoke => {
            let t = params
                .transmission
                .as_ref()
                .ok_or_else(|| Error::parameter("transmission missing"))?;
            let a = params.airlight.ok_or_else(|| Error::parameter("airlight missing"))?;
            degrade_smoke(image, t, a)?
        }
        DegradationKind::SesComposite => return degrade_ses(image, params, seed),
    };
    let s = params.scale;
    if s > 1 {
        imaging::resize_bicubic(&degraded, 1.0 / s as f64)
    } else {
        Ok(degraded)
    }
}

/// Draw parameters for `(kind, level)` deterministically from `seed`.
///
/// Field-valued parameters are sized for an `h`×`w` image.
pub fn sample_parameters(
    kind: DegradationKind,
    level: DegradationLevel,
    h: usize,
    w: usize,
    scale: u32,
    seed: u64,
) -> DegradationParameters {
    let tag = format!("params/{}/{}", kind.name(), level.name());
    let mut rng = rng_for(seed, &tag);
    let mut p = DegradationParameters {
        kind,
        noise_std: None,
        blur_kernel: None,
        illumination: None,
        transmission: None,
        airlight: None,
        ses_alpha: None,
        ses_beta: None,
        ses_gamma: None,
        scale,
    };
    match kind {
        DegradationKind::Noise => {
            let (lo, hi) = level.noise_std_range();
            p.noise_std = Some(rng.random_range(lo..hi));
        }
        DegradationKind::MotionBlur => {
            let (lo, hi) = level.blur_len_range();
            let len = rng.random_range(lo..hi);
            let angle = rng.random_range(0.0..std::f64::consts::PI);
            p.blur_kernel = Some(line_kernel(len, angle));
        }
        DegradationKind::LowLight => {
            let (lo, hi) = level.illumination_mean_range();
            let mean = rng.random_range(lo..hi);
            let band = 0.1_f64.min(mean * 0.5);
            p.illumination = Some(smooth_field(h, w, (mean - band).max(0.01), (mean + band).min(1.0), &mut rng));
            p.noise_std = Some(rng.random_range(0.005..0.02));
        }
        DegradationKind::Smoke => {
            let (lo, hi) = level.transmission_mean_range();
            let mean = rng.random_range(lo..hi);
            let band = 0.1_f64.min(mean * 0.5);
            p.transmission = Some(smooth_field(h, w, (mean - band).max(0.01), (mean + band).min(1.0), &mut rng));
            p.airlight = Some(Airlight::Scalar(rng.random_range(0.6..1.0)));
        }
        DegradationKind::SesComposite => {
            let (glo, ghi) = level.ses_gamma_range();
            p.ses_gamma = Some(rng.random_range(glo..ghi));
            p.ses_alpha = Some(rng.random_range(0.9..1.1));
            let (blo, bhi) = level.illumination_mean_range();
            p.ses_beta = Some(rng.random_range(blo..bhi).max(0.05) + 0.2);
            let (llo, lhi) = level.blur_len_range();
            let len = rng.random_range(llo..lhi);
            let angle = rng.random_range(0.0..std::f64::consts::PI);
            p.blur_kernel = Some(line_kernel(len, angle));
            let (tlo, thi) = level.transmission_mean_range();
            let mean = rng.random_range(tlo..thi);
            let band = 0.1_f64.min(mean * 0.5);
            p.transmission = Some(smooth_field(h, w, (mean - band).max(0.01), (mean + band).min(1.0), &mut rng));
            p.airlight = Some(Airlight::Scalar(rng.random_range(0.6..1.0)));
            let (nlo, nhi) = level.noise_std_range();
            p.noise_std = Some(rng.random_range(nlo..nhi));
        }
    }
    p
}

#[cfg(test)]
mod tests {
    use super::*;

    fn test_image() -> ImageTensor {
        ImageTensor::new(Array3::from_shape_fn((32, 32, 3), |(i, j, c)| {
            ((i * 7 + j * 3 + c * 11) % 64) as f64 / 63.0
        }))
        .unwrap()
    }

    #[test]
    fn zero_noise_is_bit_exact_identity() {
        let img = test_image();
        let out = degrade_noise(&img, 0.0, 99).unwrap();
        assert_eq!(out.data(), img.data());
    }

    #[test]
    fn noise_statistics_match_request() {
        let img = ImageTensor::constant(256, 256, 0.5).unwrap();
        let out = degrade_noise(&img, 0.1, 7).unwrap();
        let n = out.data().len() as f64;
        let mean = out.data().sum() / n;
        let var = out.data().iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / n;
        assert!((0.49..=0.51).contains(&mean), "mean {mean}");
        assert!((0.095..=0.105).contains(&var.sqrt()), "std {}", var.sqrt());
    }

    #[test]
    fn noise_clamps_at_one() {
        let img = ImageTensor::constant(16, 16, 1.0).unwrap();
        let out = degrade_noise(&img, 0.2, 3).unwrap();
        assert!(out.data().iter().all(|&v| v <= 1.0));
    }

    #[test]
    fn noise_rejects_out_of_range_std() {
        let img = test_image();
        assert!(degrade_noise(&img, 0.6, 0).is_err());
        assert!(degrade_noise(&img, -0.1, 0).is_err());
    }

    #[test]
    fn delta_kernel_blur_is_identity() {
        let img = test_image();
        let out = degrade_blur(&img, &delta_kernel(5)).unwrap();
        assert_eq!(out.data(), img.data());
    }

    #[test]
    fn constant_image_survives_any_kernel() {
        let img = ImageTensor::constant(16, 16, 0.42).unwrap();
        let k = line_kernel(7.0, 0.4);
        let out = degrade_blur(&img, &k).unwrap();
        for &v in out.data().iter() {
            assert!((v - 0.42).abs() < 1e-12);
        }
    }

    #[test]
    fn box_blur_matches_nested_loop_oracle() {
        let img = test_image();
        let k = Array2::from_elem((3, 3), 1.0 / 9.0);
        let out = degrade_blur(&img, &k).unwrap();
        // interior point oracle
        for (i, j) in [(5usize, 5usize), (10, 20), (16, 3)] {
            for c in 0..3 {
                let mut acc = 0.0;
                for di in 0..3 {
                    for dj in 0..3 {
                        acc += img.data()[[i + di - 1, j + dj - 1, c]] / 9.0;
                    }
                }
                assert!((out.data()[[i, j, c]] - acc).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn non_normalized_kernel_is_rejected() {
        let img = test_image();
        let k = Array2::from_elem((3, 3), 0.2);
        assert!(degrade_blur(&img, &k).is_err());
        let k = Array2::from_elem((4, 4), 1.0 / 16.0);
        assert!(degrade_blur(&img, &k).is_err());
    }

    #[test]
    fn lowlight_identity_and_product() {
        let img = test_image();
        let ones = Array2::from_elem((32, 32), 1.0);
        let out = degrade_lowlight(&img, &ones, 0.0, 0).unwrap();
        assert_eq!(out.data(), img.data());

        let img = ImageTensor::constant(32, 32, 0.8).unwrap();
        let half = Array2::from_elem((32, 32), 0.5);
        let out = degrade_lowlight(&img, &half, 0.0, 0).unwrap();
        for &v in out.data().iter() {
            assert!((v - 0.4).abs() < 1e-12);
        }

        let bad = Array2::from_elem((32, 32), 0.0);
        assert!(degrade_lowlight(&img, &bad, 0.0, 0).is_err());
    }

    #[test]
    fn lowlight_radial_field_pointwise() {
        let img = ImageTensor::constant(32, 32, 1.0).unwrap();
        let l = Array2::from_shape_fn((32, 32), |(i, j)| {
            let r = (((i as f64 - 16.0).powi(2) + (j as f64 - 16.0).powi(2)).sqrt() / 22.6).min(1.0);
            1.0 - 0.7 * r
        });
        let out = degrade_lowlight(&img, &l, 0.0, 0).unwrap();
        for i in 0..32 {
            for j in 0..32 {
                assert!((out.data()[[i, j, 0]] - l[[i, j]]).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn smoke_identity_and_formula() {
        let img = test_image();
        let full = Array2::from_elem((32, 32), 1.0);
        let out = degrade_smoke(&img, &full, Airlight::Scalar(0.8)).unwrap();
        assert_eq!(out.data(), img.data());

        let img = ImageTensor::constant(32, 32, 0.2).unwrap();
        let t = Array2::from_elem((32, 32), 0.5);
        let out = degrade_smoke(&img, &t, Airlight::Scalar(1.0)).unwrap();
        for &v in out.data().iter() {
            assert!((v - 0.6).abs() < 1e-12);
        }
    }

    #[test]
    fn smoke_spatial_field_pointwise() {
        let img = test_image();
        let mut rng = rng_for(11, "smoke-test");
        let t = smooth_field(32, 32, 0.3, 0.9, &mut rng);
        let a = 0.85;
        let out = degrade_smoke(&img, &t, Airlight::Scalar(a)).unwrap();
        for i in 0..32 {
            for j in 0..32 {
                for c in 0..3 {
                    let expected = (img.data()[[i, j, c]] * t[[i, j]] + a * (1.0 - t[[i, j]])).clamp(0.0, 1.0);
                    assert!((out.data()[[i, j, c]] - expected).abs() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn smoke_rejects_invalid_ranges() {
        let img = test_image();
        let t = Array2::from_elem((32, 32), 1.5);
        assert!(degrade_smoke(&img, &t, Airlight::Scalar(0.5)).is_err());
        let t = Array2::from_elem((32, 32), 0.5);
        assert!(degrade_smoke(&img, &t, Airlight::Scalar(1.5)).is_err());
    }

    #[test]
    fn ses_all_identity_returns_input() {
        let img = test_image();
        let p = DegradationParameters::identity(DegradationKind::SesComposite);
        let out = degrade_ses(&img, &p, 5).unwrap();
        assert_eq!(out.data(), img.data());
    }

    #[test]
    fn ses_gamma_squares_constant() {
        let img = ImageTensor::constant(32, 32, 0.5).unwrap();
        let mut p = DegradationParameters::identity(DegradationKind::SesComposite);
        p.ses_gamma = Some(2.0);
        let out = degrade_ses(&img, &p, 5).unwrap();
        for &v in out.data().iter() {
            assert!((v - 0.25).abs() < 1e-12);
        }
    }

    #[test]
    fn ses_downscale_shape() {
        let img = ImageTensor::constant(320, 320, 0.5).unwrap();
        let mut p = DegradationParameters::identity(DegradationKind::SesComposite);
        p.scale = 2;
        let out = degrade_ses(&img, &p, 5).unwrap();
        assert_eq!((out.height(), out.width()), (160, 160));
    }

    #[test]
    fn ses_noise_only_equals_degrade_noise() {
        let img = test_image();
        let mut p = DegradationParameters::identity(DegradationKind::SesComposite);
        p.noise_std = Some(0.1);
        let seed = 31;
        let via_ses = degrade_ses(&img, &p, seed).unwrap();
        let via_noise = degrade_noise(&img, 0.1, seed).unwrap();
        assert_eq!(via_ses.data(), via_noise.data());
    }

    #[test]
    fn sample_parameters_is_deterministic_and_leveled() {
        let a = sample_parameters(DegradationKind::Noise, DegradationLevel::L1, 32, 32, 2, 7);
        let b = sample_parameters(DegradationKind::Noise, DegradationLevel::L1, 32, 32, 2, 7);
        assert_eq!(a.noise_std, b.noise_std);

        // L4 noise always exceeds anything L1 can produce
        for seed in 0..50 {
            let l4 = sample_parameters(DegradationKind::Noise, DegradationLevel::L4, 32, 32, 2, seed);
            assert!(l4.noise_std.unwrap() >= 0.20);
            let l1 = sample_parameters(DegradationKind::Noise, DegradationLevel::L1, 32, 32, 2, seed);
            assert!(l1.noise_std.unwrap() < 0.05);
        }
    }

    #[test]
    fn sampled_blur_kernels_are_normalized() {
        for seed in 0..200 {
            let p = sample_parameters(DegradationKind::MotionBlur, DegradationLevel::L2, 32, 32, 2, seed);
            let k = p.blur_kernel.unwrap();
            assert!((k.sum() - 1.0).abs() < 1e-6, "seed {seed}: sum {}", k.sum());
            assert!(k.iter().all(|&v| v >= 0.0));
            assert!(k.dim().0 % 2 == 1);
        }
    }

    #[test]
    fn sampled_parameters_always_validate() {
        for kind in DegradationKind::ALL {
            for level in DegradationLevel::ALL {
                for seed in 0..20 {
                    let p = sample_parameters(kind, level, 24, 24, 2, seed);
                    p.validate().unwrap_or_else(|e| panic!("{kind:?} {level:?} {seed}: {e}"));
                }
            }
        }
    }

    #[test]
    fn apply_appends_downscale_for_primitive_kinds() {
        let img = ImageTensor::constant(64, 64, 0.5).unwrap();
        let p = sample_parameters(DegradationKind::Noise, DegradationLevel::L2, 64, 64, 2, 3);
        let out = apply(&img, &p, 3).unwrap();
        assert_eq!((out.height(), out.width()), (32, 32));
    }
}
