//! Pixel-level primitives: image containers, cropping, resampling, filtering.
//!
//! Images are `[H, W, 3]` arrays of `f64` in `[0, 1]`. Conversion from 8-bit
//! divides by 255; clamping back into range is always an explicit call,
//! never a silent wrap.

use std::path::Path;

use ndarray::{s, Array2, Array3, ArrayD, Axis, IxDyn};

use crate::error::{Error, Result};
use crate::tensor::resample::bicubic_matrix;

/// Minimum image side length.
pub const MIN_DIM: usize = 8;

/// An RGB image with values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTensor {
    data: Array3<f64>,
}

impl ImageTensor {
    /// Wrap an `[H, W, 3]` array, validating every invariant.
    pub fn new(data: Array3<f64>) -> Result<Self> {
        let (h, w, c) = data.dim();
        if c != 3 {
            return Err(Error::shape(format!("expected 3 channels, got {c}")));
        }
        if h < MIN_DIM || w < MIN_DIM {
            return Err(Error::shape(format!("image {h}x{w} below minimum {MIN_DIM}")));
        }
        for &v in data.iter() {
            if !v.is_finite() || !(0.0..=1.0).contains(&v) {
                return Err(Error::parameter(format!("pixel value {v} outside [0,1]")));
            }
        }
        Ok(ImageTensor { data })
    }

    /// Wrap an array after explicitly clamping it into `[0, 1]`.
    pub fn from_clamped(mut data: Array3<f64>) -> Result<Self> {
        data.mapv_inplace(|v| if v.is_finite() { v.clamp(0.0, 1.0) } else { 0.0 });
        ImageTensor::new(data)
    }

    pub fn constant(h: usize, w: usize, value: f64) -> Result<Self> {
        ImageTensor::new(Array3::from_elem((h, w, 3), value))
    }

    pub fn height(&self) -> usize {
        self.data.dim().0
    }

    pub fn width(&self) -> usize {
        self.data.dim().1
    }

    pub fn data(&self) -> &Array3<f64> {
        &self.data
    }

    pub fn into_data(self) -> Array3<f64> {
        self.data
    }

    /// `[1, 3, H, W]` layout for network input.
    pub fn to_nchw(&self) -> ArrayD<f64> {
        let (h, w, _) = self.data.dim();
        let mut out = ArrayD::zeros(IxDyn(&[1, 3, h, w]));
        for c in 0..3 {
            for i in 0..h {
                for j in 0..w {
                    out[[0, c, i, j]] = self.data[[i, j, c]];
                }
            }
        }
        out
    }

    /// Rebuild from a `[1, 3, H, W]` (or `[3, H, W]`) array, clamping explicitly.
    pub fn from_nchw(arr: &ArrayD<f64>) -> Result<Self> {
        let view = if arr.ndim() == 4 {
            if arr.shape()[0] != 1 {
                return Err(Error::shape("from_nchw expects a single sample"));
            }
            arr.index_axis(Axis(0), 0)
        } else {
            arr.view()
        };
        if view.ndim() != 3 || view.shape()[0] != 3 {
            return Err(Error::shape(format!("expected [3, H, W], got {:?}", view.shape())));
        }
        let (h, w) = (view.shape()[1], view.shape()[2]);
        let mut data = Array3::zeros((h, w, 3));
        for c in 0..3 {
            for i in 0..h {
                for j in 0..w {
                    data[[i, j, c]] = view[[c, i, j]];
                }
            }
        }
        ImageTensor::from_clamped(data)
    }

    /// Luminance plane (0.299/0.587/0.114 weights).
    pub fn to_luma(&self) -> Array2<f64> {
        let (h, w, _) = self.data.dim();
        Array2::from_shape_fn((h, w), |(i, j)| {
            0.299 * self.data[[i, j, 0]] + 0.587 * self.data[[i, j, 1]] + 0.114 * self.data[[i, j, 2]]
        })
    }

    pub fn read_png(path: &Path) -> Result<Self> {
        let img = image::open(path)?.to_rgb8();
        let (w, h) = img.dimensions();
        let mut data = Array3::zeros((h as usize, w as usize, 3));
        for (x, y, px) in img.enumerate_pixels() {
            for c in 0..3 {
                data[[y as usize, x as usize, c]] = px.0[c] as f64 / 255.0;
            }
        }
        ImageTensor::new(data)
    }

    pub fn write_png(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir)?;
        }
        let (h, w, _) = self.data.dim();
        let mut buf = Vec::with_capacity(h * w * 3);
        for i in 0..h {
            for j in 0..w {
                for c in 0..3 {
                    buf.push((self.data[[i, j, c]] * 255.0).round().clamp(0.0, 255.0) as u8);
                }
            }
        }
        image::save_buffer(path, &buf, w as u32, h as u32, image::ExtendedColorType::Rgb8)?;
        Ok(())
    }
}

/// An ordered frame sequence with a frame-rate annotation.
#[derive(Debug, Clone)]
pub struct VideoSequence {
    frames: Vec<ImageTensor>,
    frame_rate: f64,
}

impl VideoSequence {
    pub fn new(frames: Vec<ImageTensor>, frame_rate: f64) -> Result<Self> {
        if frames.is_empty() {
            return Err(Error::shape("video must contain at least one frame"));
        }
        if !(frame_rate.is_finite() && frame_rate > 0.0) {
            return Err(Error::parameter(format!("frame rate {frame_rate} must be positive")));
        }
        let (h, w) = (frames[0].height(), frames[0].width());
        for (i, f) in frames.iter().enumerate() {
            if f.height() != h || f.width() != w {
                return Err(Error::shape(format!(
                    "frame {i} is {}x{}, expected {h}x{w}",
                    f.height(),
                    f.width()
                )));
            }
        }
        Ok(VideoSequence { frames, frame_rate })
    }

    pub fn frames(&self) -> &[ImageTensor] {
        &self.frames
    }

    pub fn frame_rate(&self) -> f64 {
        self.frame_rate
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    /// Read a directory of `frame_NNNNNN.png` files plus a `frame_rate.txt` sidecar.
    pub fn read_dir(dir: &Path) -> Result<Self> {
        let mut paths: Vec<_> = std::fs::read_dir(dir)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| {
                p.extension().is_some_and(|e| e == "png")
                    && p.file_stem()
                        .and_then(|s| s.to_str())
                        .is_some_and(|s| s.starts_with("frame_"))
            })
            .collect();
        paths.sort();
        if paths.is_empty() {
            return Err(Error::Corpus(format!("no frame_*.png files in {dir:?}")));
        }
        for (i, p) in paths.iter().enumerate() {
            let stem = p.file_stem().unwrap().to_str().unwrap();
            let expected = format!("frame_{i:06}");
            if stem != expected {
                return Err(Error::Corpus(format!(
                    "frame indices not contiguous: found {stem}, expected {expected}"
                )));
            }
        }
        let rate_path = dir.join("frame_rate.txt");
        let frame_rate: f64 = std::fs::read_to_string(&rate_path)
            .map_err(|_| Error::Corpus(format!("missing sidecar {rate_path:?}")))?
            .trim()
            .parse()
            .map_err(|_| Error::Corpus(format!("unparsable frame rate in {rate_path:?}")))?;
        let frames = paths
            .iter()
            .map(|p| ImageTensor::read_png(p))
            .collect::<Result<Vec<_>>>()?;
        VideoSequence::new(frames, frame_rate)
    }

    pub fn write_dir(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        for (i, frame) in self.frames.iter().enumerate() {
            frame.write_png(&dir.join(format!("frame_{i:06}.png")))?;
        }
        std::fs::write(dir.join("frame_rate.txt"), format!("{}\n", self.frame_rate))?;
        Ok(())
    }
}

/// All full `size`×`size` patches at the given stride, row-major.
pub fn crop_patches(image: &ImageTensor, size: usize, stride: usize) -> Result<Vec<ImageTensor>> {
    let (h, w) = (image.height(), image.width());
    if size > h.min(w) {
        return Err(Error::parameter(format!(
            "patch exceeds image: {size} > {}x{}",
            h, w
        )));
    }
    if stride == 0 {
        return Err(Error::parameter("stride must be >= 1"));
    }
    if size < MIN_DIM {
        return Err(Error::parameter(format!("patch size {size} below minimum {MIN_DIM}")));
    }
    let rows = (h - size) / stride + 1;
    let cols = (w - size) / stride + 1;
    let mut out = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        for c in 0..cols {
            let (i0, j0) = (r * stride, c * stride);
            let patch = image.data().slice(s![i0..i0 + size, j0..j0 + size, ..]).to_owned();
            out.push(ImageTensor::new(patch)?);
        }
    }
    Ok(out)
}

/// Expected patch count for the given geometry.
pub fn patch_count(h: usize, w: usize, size: usize, stride: usize) -> usize {
    ((h - size) / stride + 1) * ((w - size) / stride + 1)
}

/// Bicubic resize by a positive scale; output dims are `round(dim * scale)`.
pub fn resize_bicubic(image: &ImageTensor, scale: f64) -> Result<ImageTensor> {
    if !(scale.is_finite() && scale > 0.0) {
        return Err(Error::parameter(format!("scale {scale} must be positive")));
    }
    let (h, w) = (image.height(), image.width());
    let oh = (h as f64 * scale).round() as usize;
    let ow = (w as f64 * scale).round() as usize;
    resize_bicubic_to(image, oh, ow)
}

/// Bicubic resize to explicit output dims.
pub fn resize_bicubic_to(image: &ImageTensor, oh: usize, ow: usize) -> Result<ImageTensor> {
    let (h, w) = (image.height(), image.width());
    if oh < MIN_DIM || ow < MIN_DIM {
        return Err(Error::shape(format!("output {oh}x{ow} below minimum {MIN_DIM}")));
    }
    if oh == h && ow == w {
        return Ok(image.clone());
    }
    let rh = bicubic_matrix(h, oh);
    let rw = bicubic_matrix(w, ow);
    let mut out = Array3::zeros((oh, ow, 3));
    for c in 0..3 {
        let plane = image.data().index_axis(Axis(2), c).to_owned();
        let tmp = rh.dot(&plane);
        let res = tmp.dot(&rw.t());
        out.index_axis_mut(Axis(2), c).assign(&res);
    }
    ImageTensor::from_clamped(out)
}

/// A normalized 1-D Gaussian kernel truncated at radius `ceil(3*sigma)`.
pub fn gaussian_kernel_1d(sigma: f64) -> Vec<f64> {
    assert!(sigma > 0.0, "sigma must be positive");
    let radius = (3.0 * sigma).ceil() as usize;
    let mut k: Vec<f64> = (0..=2 * radius)
        .map(|i| {
            let x = i as f64 - radius as f64;
            (-x * x / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let sum: f64 = k.iter().sum();
    for v in &mut k {
        *v /= sum;
    }
    k
}

fn reflect(i: isize, len: usize) -> usize {
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

pub(crate) fn blur_plane(plane: &Array2<f64>, kernel: &[f64]) -> Array2<f64> {
    let (h, w) = plane.dim();
    let radius = kernel.len() / 2;
    let mut tmp = Array2::zeros((h, w));
    for i in 0..h {
        for j in 0..w {
            let mut acc = 0.0;
            for (t, &kv) in kernel.iter().enumerate() {
                let jj = reflect(j as isize + t as isize - radius as isize, w);
                acc += plane[[i, jj]] * kv;
            }
            tmp[[i, j]] = acc;
        }
    }
    let mut out = Array2::zeros((h, w));
    for i in 0..h {
        for j in 0..w {
            let mut acc = 0.0;
            for (t, &kv) in kernel.iter().enumerate() {
                let ii = reflect(i as isize + t as isize - radius as isize, h);
                acc += tmp[[ii, j]] * kv;
            }
            out[[i, j]] = acc;
        }
    }
    out
}

/// Gaussian blur with reflective padding (separable, kernel sums to 1).
pub fn gaussian_blur(image: &ImageTensor, sigma: f64) -> Result<ImageTensor> {
    if !(sigma.is_finite() && sigma > 0.0) {
        return Err(Error::parameter(format!("sigma {sigma} must be positive")));
    }
    let kernel = gaussian_kernel_1d(sigma);
    let mut out = Array3::zeros(image.data().dim());
    for c in 0..3 {
        let plane = image.data().index_axis(Axis(2), c).to_owned();
        out.index_axis_mut(Axis(2), c).assign(&blur_plane(&plane, &kernel));
    }
    ImageTensor::from_clamped(out)
}

/// High-frequency residual: `image - gaussian_blur(image, sigma)`, per channel.
///
/// Values live in `[-1, 1]`; the blur it subtracts is exactly the one
/// [`gaussian_blur`] produces, so `highpass + blur == image`.
pub fn highpass(image: &ImageTensor, sigma: f64) -> Result<Array3<f64>> {
    let blurred = gaussian_blur(image, sigma)?;
    Ok(image.data() - blurred.data())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(h: usize, w: usize) -> ImageTensor {
        ImageTensor::new(Array3::from_shape_fn((h, w, 3), |(i, j, _)| {
            (i as f64 / h as f64 + j as f64 / w as f64) / 2.0
        }))
        .unwrap()
    }

    #[test]
    fn invariants_are_enforced() {
        assert!(ImageTensor::new(Array3::from_elem((4, 16, 3), 0.5)).is_err());
        assert!(ImageTensor::new(Array3::from_elem((16, 16, 3), 1.5)).is_err());
        assert!(ImageTensor::new(Array3::from_elem((16, 16, 3), f64::NAN)).is_err());
        let clamped = ImageTensor::from_clamped(Array3::from_elem((16, 16, 3), 1.5)).unwrap();
        assert_eq!(clamped.data()[[0, 0, 0]], 1.0);
    }

    #[test]
    fn crop_patch_counts_match_formula() {
        // 1280x1024, size 320, stride 320 -> 4 across x 3 down = 12
        let img = ImageTensor::constant(1024, 1280, 0.3).unwrap();
        let patches = crop_patches(&img, 320, 320).unwrap();
        assert_eq!(patches.len(), 12);
        assert_eq!(patches.len(), patch_count(1024, 1280, 320, 320));

        let img = ImageTensor::constant(320, 320, 0.3).unwrap();
        let patches = crop_patches(&img, 320, 320).unwrap();
        assert_eq!(patches.len(), 1);
        assert_eq!(patches[0], img);

        assert!(crop_patches(&img, 321, 320).is_err());
    }

    #[test]
    fn patches_are_row_major_and_within_bounds() {
        let img = ramp(16, 24);
        let patches = crop_patches(&img, 8, 8).unwrap();
        assert_eq!(patches.len(), 2 * 3);
        // first patch equals the top-left corner
        assert_eq!(patches[0].data()[[0, 0, 0]], img.data()[[0, 0, 0]]);
        // second patch starts 8 columns in
        assert_eq!(patches[1].data()[[0, 0, 0]], img.data()[[0, 8, 0]]);
    }

    #[test]
    fn resize_constant_and_shapes() {
        let img = ImageTensor::constant(320, 320, 0.5).unwrap();
        let half = resize_bicubic(&img, 0.5).unwrap();
        assert_eq!((half.height(), half.width()), (160, 160));
        for &v in half.data().iter() {
            assert!((v - 0.5).abs() < 1e-12);
        }
        assert!(resize_bicubic(&img, 0.01).is_err());
    }

    #[test]
    fn resize_roundtrip_on_smooth_gradient() {
        let img = ramp(32, 32);
        let up = resize_bicubic(&img, 2.0).unwrap();
        let down = resize_bicubic(&up, 0.5).unwrap();
        let mut max_abs: f64 = 0.0;
        for (a, b) in down.data().iter().zip(img.data().iter()) {
            max_abs = max_abs.max((a - b).abs());
        }
        assert!(max_abs < 0.02, "round trip max abs err {max_abs}");
    }

    #[test]
    fn highpass_of_constant_is_zero() {
        let img = ImageTensor::constant(16, 16, 0.7).unwrap();
        let hp = highpass(&img, 1.0).unwrap();
        for &v in hp.iter() {
            assert!(v.abs() < 1e-12);
        }
    }

    #[test]
    fn highpass_impulse_matches_direct_convolution() {
        let mut data = Array3::from_elem((17, 17, 3), 0.0);
        data[[8, 8, 0]] = 1.0;
        data[[8, 8, 1]] = 1.0;
        data[[8, 8, 2]] = 1.0;
        let img = ImageTensor::new(data).unwrap();
        let sigma = 1.0;
        let hp = highpass(&img, sigma).unwrap();
        let k = gaussian_kernel_1d(sigma);
        let radius = k.len() / 2;
        // interior: residual = impulse - separable kernel value
        for di in 0..k.len() {
            for dj in 0..k.len() {
                let i = 8 + di - radius;
                let j = 8 + dj - radius;
                let expected = if i == 8 && j == 8 { 1.0 - k[di] * k[dj] } else { -k[di] * k[dj] };
                assert!(
                    (hp[[i, j, 0]] - expected).abs() < 1e-12,
                    "at ({i},{j}): {} vs {expected}",
                    hp[[i, j, 0]]
                );
            }
        }
    }

    #[test]
    fn highpass_mean_is_near_zero_on_interior() {
        let img = ramp(33, 41);
        let hp = highpass(&img, 1.5).unwrap();
        // Away from the border the kernel-sum-1 property forces a ~0 mean.
        let inner = hp.slice(s![6..27, 6..35, ..]);
        let mean = inner.sum() / inner.len() as f64;
        assert!(mean.abs() < 1e-6, "interior residual mean {mean}");
    }

    #[test]
    fn highpass_plus_blur_reconstructs() {
        let img = ramp(20, 20);
        let hp = highpass(&img, 2.0).unwrap();
        let blur = gaussian_blur(&img, 2.0).unwrap();
        let rec = &hp + blur.data();
        for (a, b) in rec.iter().zip(img.data().iter()) {
            assert_eq!(a, b);
        }
    }

    #[test]
    fn png_roundtrip_is_exact_at_8bit() {
        let dir = std::env::temp_dir().join(format!("lucid_png_{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let img = ramp(16, 16);
        let path = dir.join("a.png");
        img.write_png(&path).unwrap();
        let back = ImageTensor::read_png(&path).unwrap();
        for (a, b) in back.data().iter().zip(img.data().iter()) {
            assert!((a - b).abs() <= 0.5 / 255.0 + 1e-9);
        }
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn video_dir_roundtrip_and_contiguity() {
        let dir = std::env::temp_dir().join(format!("lucid_vid_{}", std::process::id()));
        std::fs::remove_dir_all(&dir).ok();
        let video = VideoSequence::new(vec![ramp(16, 16), ramp(16, 16)], 30.0).unwrap();
        video.write_dir(&dir).unwrap();
        let back = VideoSequence::read_dir(&dir).unwrap();
        assert_eq!(back.len(), 2);
        assert_eq!(back.frame_rate(), 30.0);
        // break contiguity
        std::fs::rename(dir.join("frame_000001.png"), dir.join("frame_000005.png")).unwrap();
        assert!(VideoSequence::read_dir(&dir).is_err());
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn mixed_frame_sizes_are_rejected() {
        let err = VideoSequence::new(vec![ramp(16, 16), ramp(16, 24)], 30.0);
        assert!(err.is_err());
    }
}
