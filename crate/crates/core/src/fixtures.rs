//! Deterministic synthetic fixtures: structured clean images and drifting
//! clips, used by the test suites and to fit the bundled NIQE model.
//!
//! Content mixes smooth shading, hard-edged ellipses and fine texture so
//! the images carry both low- and high-frequency detail.

use ndarray::Array3;
use rand::Rng;

use crate::degrade::smooth_field;
use crate::imaging::{ImageTensor, VideoSequence};
use crate::rng::rng_for;

/// A clean synthetic image, fully determined by `(h, w, seed)`.
pub fn synth_image(h: usize, w: usize, seed: u64) -> ImageTensor {
    let mut rng = rng_for(seed, "fixture-image");
    let base_r = smooth_field(h, w, 0.25, 0.85, &mut rng);
    let base_g = smooth_field(h, w, 0.15, 0.7, &mut rng);
    let base_b = smooth_field(h, w, 0.1, 0.6, &mut rng);
    let mut data = Array3::from_shape_fn((h, w, 3), |(i, j, c)| match c {
        0 => base_r[[i, j]],
        1 => base_g[[i, j]],
        _ => base_b[[i, j]],
    });

    // hard-edged ellipses
    let n_blobs = 4 + (rng.random::<u32>() % 4) as usize;
    for _ in 0..n_blobs {
        let cy = rng.random_range(0.0..h as f64);
        let cx = rng.random_range(0.0..w as f64);
        let ry = rng.random_range(h as f64 * 0.05..h as f64 * 0.25);
        let rx = rng.random_range(w as f64 * 0.05..w as f64 * 0.25);
        let color = [
            rng.random_range(0.1..0.95),
            rng.random_range(0.05..0.8),
            rng.random_range(0.05..0.7),
        ];
        let blend = rng.random_range(0.5..0.95);
        for i in 0..h {
            for j in 0..w {
                let dy = (i as f64 - cy) / ry;
                let dx = (j as f64 - cx) / rx;
                if dy * dy + dx * dx <= 1.0 {
                    for c in 0..3 {
                        data[[i, j, c]] = (1.0 - blend) * data[[i, j, c]] + blend * color[c];
                    }
                }
            }
        }
    }

    // fine texture
    let fy = rng.random_range(0.25..0.9);
    let fx = rng.random_range(0.25..0.9);
    let amp = rng.random_range(0.02..0.06);
    for i in 0..h {
        for j in 0..w {
            let t = amp * ((i as f64 * fy).sin() * (j as f64 * fx).cos());
            for c in 0..3 {
                data[[i, j, c]] = (data[[i, j, c]] + t).clamp(0.0, 1.0);
            }
        }
    }
    ImageTensor::new(data).expect("synthetic image within range")
}

/// A clean image rich in high-frequency texture: fine gratings layered on
/// the structured base, so resampling losses show up clearly in PSNR.
pub fn synth_textured_image(h: usize, w: usize, seed: u64) -> ImageTensor {
    let base = synth_image(h, w, seed);
    let mut rng = rng_for(seed, "fixture-texture");
    let mut data = base.into_data();
    for layer in 0..3 {
        let fy = rng.random_range(0.8..2.6);
        let fx = rng.random_range(0.8..2.6);
        let phase = rng.random_range(0.0..std::f64::consts::TAU);
        let amp = rng.random_range(0.06..0.12);
        for i in 0..h {
            for j in 0..w {
                let t = amp * (i as f64 * fy + phase).sin() * (j as f64 * fx + phase * 0.7).cos();
                let c = layer % 3;
                data[[i, j, c]] = (data[[i, j, c]] + t).clamp(0.0, 1.0);
            }
        }
    }
    ImageTensor::new(data).expect("textured image within range")
}

/// A piecewise-flat "cartoon" image: overlapping rectangles and ellipses
/// with crisp edges over mild shading. Bicubic resampling smears such
/// content badly, which makes it the natural fixture for super-resolution
/// comparisons.
pub fn synth_blocky_image(h: usize, w: usize, seed: u64) -> ImageTensor {
    let mut rng = rng_for(seed, "fixture-blocky");
    let base = [
        rng.random_range(0.15..0.5),
        rng.random_range(0.1..0.4),
        rng.random_range(0.1..0.35),
    ];
    let mut data = Array3::from_shape_fn((h, w, 3), |(_, _, c)| base[c]);
    let n_shapes = 10 + (rng.random::<u32>() % 6) as usize;
    for shape in 0..n_shapes {
        let color = [
            rng.random_range(0.05..0.95),
            rng.random_range(0.05..0.9),
            rng.random_range(0.05..0.85),
        ];
        if shape % 3 == 0 {
            let cy = rng.random_range(0.0..h as f64);
            let cx = rng.random_range(0.0..w as f64);
            let ry = rng.random_range(h as f64 * 0.06..h as f64 * 0.3);
            let rx = rng.random_range(w as f64 * 0.06..w as f64 * 0.3);
            for i in 0..h {
                for j in 0..w {
                    let dy = (i as f64 - cy) / ry;
                    let dx = (j as f64 - cx) / rx;
                    if dy * dy + dx * dx <= 1.0 {
                        for c in 0..3 {
                            data[[i, j, c]] = color[c];
                        }
                    }
                }
            }
        } else {
            let i0 = rng.random_range(0..h);
            let j0 = rng.random_range(0..w);
            let hh = rng.random_range(h / 8..h / 2);
            let ww = rng.random_range(w / 8..w / 2);
            for i in i0..(i0 + hh).min(h) {
                for j in j0..(j0 + ww).min(w) {
                    for c in 0..3 {
                        data[[i, j, c]] = color[c];
                    }
                }
            }
        }
    }
    // mild smooth shading so the flats are not perfectly constant
    let shade = smooth_field(h, w, 0.9, 1.0, &mut rng);
    for i in 0..h {
        for j in 0..w {
            for c in 0..3 {
                data[[i, j, c]] = (data[[i, j, c]] * shade[[i, j]]).clamp(0.0, 1.0);
            }
        }
    }
    ImageTensor::new(data).expect("blocky image within range")
}

/// A clip whose frames slide a window along a smooth path over one master
/// image while illumination drifts, giving temporally continuous content.
pub fn synth_clip(h: usize, w: usize, frames: usize, seed: u64) -> VideoSequence {
    let master = synth_image(h * 2, w * 2, seed);
    let mut rng = rng_for(seed, "fixture-clip");
    let phase: f64 = rng.random_range(0.0..std::f64::consts::TAU);
    let gain_amp: f64 = rng.random_range(0.05..0.15);
    let max_off_y = (h * 2 - h) as f64;
    let max_off_x = (w * 2 - w) as f64;
    let mut out = Vec::with_capacity(frames);
    for t in 0..frames {
        let u = t as f64 / frames.max(2) as f64;
        let oy = ((0.5 + 0.45 * (std::f64::consts::TAU * u + phase).sin()) * max_off_y) as usize;
        let ox = ((0.5 + 0.45 * (std::f64::consts::TAU * u * 0.7 + phase).cos()) * max_off_x) as usize;
        let gain = 1.0 - gain_amp * (std::f64::consts::TAU * u).sin().abs();
        let crop = master
            .data()
            .slice(ndarray::s![oy..oy + h, ox..ox + w, ..])
            .mapv(|v| (v * gain).clamp(0.0, 1.0));
        out.push(ImageTensor::new(crop).expect("crop in range"));
    }
    VideoSequence::new(out, 30.0).expect("valid clip")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fixtures_are_deterministic() {
        let a = synth_image(32, 32, 5);
        let b = synth_image(32, 32, 5);
        assert_eq!(a.data(), b.data());
        let c = synth_image(32, 32, 6);
        assert_ne!(a.data(), c.data());
    }

    #[test]
    fn clip_frames_share_dims_and_differ() {
        let clip = synth_clip(24, 24, 6, 1);
        assert_eq!(clip.len(), 6);
        assert_ne!(clip.frames()[0].data(), clip.frames()[3].data());
    }
}
