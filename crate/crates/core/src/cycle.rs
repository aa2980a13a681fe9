//! The reverse cycle: physically grounded re-degradation driven by
//! regressed parameters, three patch discriminators (low, high, and
//! high-frequency domains) and the adversarial + cycle loss assemblies.

use ndarray::{Array2, ArrayD, IxDyn};
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, Normal};

use crate::degrade::DegradationKind;
use crate::encoder::DegradationEncoder;
use crate::enhancer::GuidedEnhancer;
use crate::error::{Error, Result};
use crate::imaging;
use crate::nn::{Conv2d, Ctx, Linear, Pad, ParamSet};
use crate::rng::rng_for;
use crate::tensor::{movement, ops, resample, Tensor};
use crate::tensor::conv;

/// Loss-combination weights.
#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub adv: f64,
    pub cyc: f64,
    pub hf: f64,
    pub cd: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { adv: 1.0, cyc: 10.0, hf: 0.5, cd: 1.0 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("adv", self.adv), ("cyc", self.cyc), ("hf", self.hf), ("cd", self.cd)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::parameter(format!("loss weight {name} = {v} must be >= 0")));
            }
        }
        Ok(())
    }
}

/// Which space the representation-cycle term compares in.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CdSpace {
    Vec,
    Map,
}

/// The enhancement generator: encoder + compression + enhancement body.
pub struct Generator<'a> {
    pub encoder: &'a DegradationEncoder,
    pub enhancer: &'a GuidedEnhancer,
}

impl<'a> Generator<'a> {
    /// Pad to the working multiple, enhance, crop to exactly ×s.
    ///
    /// Returns `(x_enh, d_c)`.
    pub fn forward(&self, enc_ctx: &Ctx, enh_ctx: &Ctx, x_l: &Tensor) -> Result<(Tensor, Tensor)> {
        let (h, w) = (x_l.shape()[2], x_l.shape()[3]);
        let s = self.enhancer.cfg.scale;
        let m = self.enhancer.cfg.window.max(4);
        let (ph, pw) = ((m - h % m) % m, (m - w % m) % m);
        let padded = if ph > 0 || pw > 0 {
            movement::pad_reflect_hw(x_l, 0, ph, 0, pw)
        } else {
            x_l.clone()
        };
        let d_map = self.encoder.d_map(enc_ctx, &padded)?;
        let d_c = self.enhancer.compress_t(enh_ctx, &d_map);
        let y = self.enhancer.forward(enh_ctx, &padded, Some(&d_c), None);
        let y = movement::crop_hw(&y, 0, 0, h * s, w * s);
        Ok((y, d_c))
    }

    /// Enhance with an externally supplied gain vector (no encoder pass),
    /// padding and cropping exactly like [`Generator::forward`].
    pub fn enhance_with_gains(&self, enh_ctx: &Ctx, x_l: &Tensor, d_c: &Tensor) -> Result<Tensor> {
        let (h, w) = (x_l.shape()[2], x_l.shape()[3]);
        let s = self.enhancer.cfg.scale;
        let m = self.enhancer.cfg.window.max(4);
        let (ph, pw) = ((m - h % m) % m, (m - w % m) % m);
        let padded = if ph > 0 || pw > 0 {
            movement::pad_reflect_hw(x_l, 0, ph, 0, pw)
        } else {
            x_l.clone()
        };
        let y = self.enhancer.forward(enh_ctx, &padded, Some(d_c), None);
        Ok(movement::crop_hw(&y, 0, 0, h * s, w * s))
    }

    /// The encoder's unit-norm projection for a batch (pads to /4).
    pub fn repr_vec(&self, enc_ctx: &Ctx, x: &Tensor) -> Result<Tensor> {
        let (h, w) = (x.shape()[2], x.shape()[3]);
        let (ph, pw) = ((4 - h % 4) % 4, (4 - w % 4) % 4);
        let padded = if ph > 0 || pw > 0 {
            movement::pad_reflect_hw(x, 0, ph, 0, pw)
        } else {
            x.clone()
        };
        let (_, d_vec) = self.encoder.forward(enc_ctx, &padded)?;
        Ok(d_vec)
    }

    /// The encoder's feature map for a batch (pads to /4).
    pub fn repr_map(&self, enc_ctx: &Ctx, x: &Tensor) -> Result<Tensor> {
        let (h, w) = (x.shape()[2], x.shape()[3]);
        let (ph, pw) = ((4 - h % 4) % 4, (4 - w % 4) % 4);
        let padded = if ph > 0 || pw > 0 {
            movement::pad_reflect_hw(x, 0, ph, 0, pw)
        } else {
            x.clone()
        };
        self.encoder.d_map(enc_ctx, &padded)
    }
}

/// Regressed degradation parameters as graph tensors.
pub struct RegressedParams {
    /// `[N, 1, H, W]` noise std field in [0, 0.5].
    pub noise_std: Option<Tensor>,
    /// `[N, k, k]` kernels, each summing to 1 by softmax construction.
    pub kernel: Option<Tensor>,
    /// `[N, 1, H, W]` illumination field in (0, 1).
    pub illumination: Option<Tensor>,
    /// `[N, 1, H, W]` transmission field in (0, 1).
    pub transmission: Option<Tensor>,
    /// `[N]` airlight in (0, 1).
    pub airlight: Option<Tensor>,
    /// `[N]` each: alpha, beta, gamma (positive).
    pub gains: Option<(Tensor, Tensor, Tensor)>,
}

/// Lightweight heads mapping `d_c` to explicit degradation parameters.
///
/// Every emitted parameter satisfies its container invariant by
/// construction: kernels go through softmax, fields through sigmoid,
/// positive scalars through softplus.
pub struct RegressionHeads {
    pub kind: DegradationKind,
    coarse: usize,
    kernel_size: usize,
    noise: Option<Linear>,
    blur: Option<Linear>,
    light: Option<Linear>,
    trans: Option<Linear>,
    air: Option<Linear>,
    gains: Option<Linear>,
}

impl RegressionHeads {
    /// Heads start at a mild, physically sensible operating point (small
    /// noise, near-identity kernel, bright fields, unit gains) rather than
    /// random junk, so the reverse generator degrades plausibly from the
    /// first step and the cycle losses see matched statistics.
    pub fn build(ps: &mut ParamSet, rng: &mut ChaCha12Rng, d_c_dim: usize, kind: DegradationKind) -> Self {
        let coarse = 8usize;
        let kernel_size = 9usize;
        let field = coarse * coarse;
        let mk = |ps: &mut ParamSet, rng: &mut ChaCha12Rng, name: &str, out: usize| {
            Linear::new(ps, rng, name, d_c_dim, out, true)
        };
        // bias targets: sigma ≈ 0.5·σ(-1.66) ≈ 0.08; fields σ(2.2) ≈ 0.9;
        // kernel softmax sharply centered; softplus(0.5413) ≈ 1.0
        fn set_bias(ps: &mut ParamSet, head: &Linear, f: impl Fn(usize) -> f64) {
            if let Some(b) = head.b {
                let len = ps.value(b).len();
                let v = ndarray::Array1::from_shape_fn(len, f).into_dyn();
                ps.set_value(b, v);
            }
        }
        let mut heads = RegressionHeads {
            kind,
            coarse,
            kernel_size,
            noise: None,
            blur: None,
            light: None,
            trans: None,
            air: None,
            gains: None,
        };
        let center = (kernel_size * kernel_size) / 2;
        match kind {
            DegradationKind::Noise => {
                heads.noise = Some(mk(ps, rng, "head.noise", field));
            }
            DegradationKind::MotionBlur => {
                heads.blur = Some(mk(ps, rng, "head.blur", kernel_size * kernel_size));
            }
            DegradationKind::LowLight => {
                heads.light = Some(mk(ps, rng, "head.light", field));
                heads.noise = Some(mk(ps, rng, "head.noise", field));
            }
            DegradationKind::Smoke => {
                heads.trans = Some(mk(ps, rng, "head.trans", field));
                heads.air = Some(mk(ps, rng, "head.air", 1));
            }
            DegradationKind::SesComposite => {
                heads.noise = Some(mk(ps, rng, "head.noise", field));
                heads.blur = Some(mk(ps, rng, "head.blur", kernel_size * kernel_size));
                heads.trans = Some(mk(ps, rng, "head.trans", field));
                heads.air = Some(mk(ps, rng, "head.air", 1));
                heads.gains = Some(mk(ps, rng, "head.gains", 3));
            }
        }
        if let Some(h) = &heads.noise {
            set_bias(ps, h, |_| -1.66);
        }
        if let Some(h) = &heads.blur {
            set_bias(ps, h, |i| if i == center { 4.0 } else { 0.0 });
        }
        for h in [&heads.light, &heads.trans] {
            if let Some(h) = h {
                set_bias(ps, h, |_| 2.2);
            }
        }
        if let Some(h) = &heads.gains {
            set_bias(ps, h, |_| 0.5413);
        }
        heads
    }

    /// A coarse field head upsampled to `(h, w)` as `[N, 1, h, w]`.
    fn field(&self, ctx: &Ctx, head: &Linear, d_c: &Tensor, h: usize, w: usize) -> Tensor {
        let n = d_c.shape()[0];
        let raw = head.forward(ctx, d_c);
        let grid = movement::reshape(&raw, &[n, 1, self.coarse, self.coarse]);
        let up = resample::resize_bicubic(&grid, h, w);
        ops::sigmoid(&up)
    }

    /// Regress all parameters this kind needs from `d_c` for an `h`×`w`
    /// target image.
    pub fn regress(&self, ctx: &Ctx, d_c: &Tensor, h: usize, w: usize) -> RegressedParams {
        let n = d_c.shape()[0];
        let noise_std = self.noise.as_ref().map(|head| {
            // sigmoid * 0.5 keeps the std within the container's [0, 0.5]
            ops::mul_scalar(&self.field(ctx, head, d_c, h, w), 0.5)
        });
        let kernel = self.blur.as_ref().map(|head| {
            let k = self.kernel_size;
            let logits = head.forward(ctx, d_c);
            let soft = ops::softmax_last(&logits);
            movement::reshape(&soft, &[n, k, k])
        });
        let illumination = self.light.as_ref().map(|head| self.field(ctx, head, d_c, h, w));
        let transmission = self.trans.as_ref().map(|head| self.field(ctx, head, d_c, h, w));
        let airlight = self.air.as_ref().map(|head| {
            movement::reshape(&ops::sigmoid(&head.forward(ctx, d_c)), &[n])
        });
        let gains = self.gains.as_ref().map(|head| {
            let g = ops::softplus(&head.forward(ctx, d_c));
            let g = ops::add_scalar(&g, 1e-4);
            (
                movement::reshape(&movement::narrow(&g, 1, 0, 1), &[n]),
                movement::reshape(&movement::narrow(&g, 1, 1, 1), &[n]),
                movement::reshape(&movement::narrow(&g, 1, 2, 1), &[n]),
            )
        });
        RegressedParams { noise_std, kernel, illumination, transmission, airlight, gains }
    }

    pub fn kernel_size(&self) -> usize {
        self.kernel_size
    }
}

fn seeded_unit_noise(n: usize, h: usize, w: usize, seed: u64) -> ArrayD<f64> {
    let mut rng = rng_for(seed, "reverse-noise");
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    ArrayD::from_shape_fn(IxDyn(&[n, 3, h, w]), |_| normal.sample(&mut rng))
}

fn blur_per_sample(x: &Tensor, kernel: &Tensor) -> Tensor {
    let k = kernel.shape()[1];
    let r = k / 2;
    let padded = movement::pad_reflect_hw(x, r, r, r, r);
    conv::conv2d_per_sample(&padded, kernel)
}

fn haze(x: &Tensor, transmission: &Tensor, airlight: &Tensor) -> Tensor {
    let (n, _, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let direct = ops::scale_spatial(x, transmission);
    let ones = Tensor::constant(ArrayD::from_elem(IxDyn(&[n, 3, h, w]), 1.0));
    let inv = ops::scale_spatial(&ones, &ops::neg(&ops::add_scalar(transmission, -1.0)));
    ops::add(&direct, &ops::mul_per_sample(&inv, airlight))
}

/// The reverse generator G_L: regress explicit parameters from `d_c`, apply
/// the corresponding physical degradation, downscale by `s`, and (for the
/// composite kind) add the seeded noise after downscaling.
///
/// Deterministic given `seed`; gradients flow into both the image and the
/// regression heads.
pub fn degrade_back(
    heads: &RegressionHeads,
    ctx: &Ctx,
    x_enh: &Tensor,
    d_c: &Tensor,
    scale: usize,
    seed: u64,
) -> Result<(Tensor, RegressedParams)> {
    let (n, _, h, w) = (x_enh.shape()[0], x_enh.shape()[1], x_enh.shape()[2], x_enh.shape()[3]);
    if h % scale != 0 || w % scale != 0 {
        return Err(Error::shape(format!("{h}x{w} not divisible by scale {scale}")));
    }
    let p = heads.regress(ctx, d_c, h, w);
    let (lh, lw) = (h / scale, w / scale);
    let down = |t: &Tensor| resample::resize_bicubic(t, lh, lw);

    let out = match heads.kind {
        DegradationKind::Noise => {
            let sigma = p.noise_std.as_ref().expect("noise head");
            let eps = Tensor::constant(seeded_unit_noise(n, h, w, seed));
            let noisy = ops::add(x_enh, &ops::scale_spatial(&eps, sigma));
            down(&noisy)
        }
        DegradationKind::MotionBlur => {
            let kernel = p.kernel.as_ref().expect("blur head");
            down(&blur_per_sample(x_enh, kernel))
        }
        DegradationKind::LowLight => {
            let light = p.illumination.as_ref().expect("light head");
            let sigma = p.noise_std.as_ref().expect("noise head");
            let eps = Tensor::constant(seeded_unit_noise(n, h, w, seed));
            let dark = ops::scale_spatial(x_enh, light);
            down(&ops::add(&dark, &ops::scale_spatial(&eps, sigma)))
        }
        DegradationKind::Smoke => {
            let t = p.transmission.as_ref().expect("trans head");
            let a = p.airlight.as_ref().expect("air head");
            down(&haze(x_enh, t, a))
        }
        DegradationKind::SesComposite => {
            let (alpha, beta, gamma) = p.gains.as_ref().expect("gains head");
            let kernel = p.kernel.as_ref().expect("blur head");
            let t = p.transmission.as_ref().expect("trans head");
            let a = p.airlight.as_ref().expect("air head");
            let sigma = p.noise_std.as_ref().expect("noise head");
            let x = ops::mul_per_sample(x_enh, alpha);
            let x = blur_per_sample(&x, kernel);
            let x = ops::pow_per_sample(&ops::clamp_min(&x, 1e-6), gamma);
            let x = ops::mul_per_sample(&x, beta);
            let x = haze(&x, t, a);
            let x = down(&x);
            // Eq-8 ordering: noise lands after the downscale
            let eps = Tensor::constant(seeded_unit_noise(n, lh, lw, seed));
            let sigma_low = resample::resize_bicubic(sigma, lh, lw);
            ops::add(&x, &ops::scale_spatial(&eps, &sigma_low))
        }
    };
    Ok((ops::clamp(&out, 0.0, 1.0), p))
}

/// A strided convolutional patch classifier emitting per-patch realness
/// in (0, 1).
pub struct PatchDiscriminator {
    convs: Vec<Conv2d>,
    head: Conv2d,
}

impl PatchDiscriminator {
    /// `widths` are the intermediate channel counts; all but the last run
    /// at stride 2, the last and the head at stride 1 (PatchGAN layout).
    pub fn build(ps: &mut ParamSet, rng: &mut ChaCha12Rng, name: &str, widths: &[usize]) -> Self {
        assert!(widths.len() >= 2);
        let mut convs = Vec::new();
        let mut c_in = 3;
        for (i, &w) in widths.iter().enumerate() {
            let stride = if i + 1 == widths.len() { 1 } else { 2 };
            convs.push(Conv2d::new(ps, rng, &format!("{name}.conv{i}"), c_in, w, 4, stride, Pad::Zero(1), true));
            c_in = w;
        }
        let head = Conv2d::new(ps, rng, &format!("{name}.head"), c_in, 1, 4, 1, Pad::Zero(1), true);
        PatchDiscriminator { convs, head }
    }

    pub fn default_widths() -> Vec<usize> {
        vec![64, 128, 256, 512]
    }

    /// Smallest input side the topology accepts.
    pub fn min_input(&self) -> usize {
        // each stride-2 conv halves; the two stride-1 convs each need >= 4
        let halvings = self.convs.len() - 1;
        4 << halvings
    }

    pub fn forward(&self, ctx: &Ctx, x: &Tensor) -> Result<Tensor> {
        let (h, w) = (x.shape()[2], x.shape()[3]);
        if h < self.min_input() || w < self.min_input() {
            return Err(Error::shape(format!(
                "discriminator needs at least {0}x{0} input, got {h}x{w}",
                self.min_input()
            )));
        }
        let mut y = x.clone();
        for conv in &self.convs {
            y = ops::leaky_relu(&conv.forward(ctx, &y), 0.2);
        }
        Ok(ops::sigmoid(&self.head.forward(ctx, &y)))
    }

    pub fn param_count(&self) -> usize {
        self.convs.iter().map(|c| c.param_count()).sum::<usize>() + self.head.param_count()
    }
}

const D_EPS: f64 = 1e-6;

fn validate_d_output(name: &str, t: &Tensor) -> Result<()> {
    for &v in t.value().iter() {
        if !v.is_finite() || !(0.0..=1.0).contains(&v) {
            return Err(Error::Numeric(format!("{name} output {v} outside (0,1)")));
        }
    }
    Ok(())
}

/// The minimax objective value `E[ln D(real)] + E[ln(1 − D(fake))]`,
/// means taken over batch and patch map, outputs clamped into
/// `[1e-6, 1 − 1e-6]` so the value is always finite.
pub fn adversarial_value(d_real: &Tensor, d_fake: &Tensor) -> Result<Tensor> {
    validate_d_output("discriminator(real)", d_real)?;
    validate_d_output("discriminator(fake)", d_fake)?;
    let real = ops::clamp(d_real, D_EPS, 1.0 - D_EPS);
    let fake = ops::clamp(d_fake, D_EPS, 1.0 - D_EPS);
    let term_real = ops::mean_all(&ops::ln(&real));
    let inv = ops::neg(&ops::add_scalar(&fake, -1.0));
    let term_fake = ops::mean_all(&ops::ln(&inv));
    Ok(ops::add(&term_real, &term_fake))
}

/// Discriminator loss to minimize (ascent on the minimax value).
pub fn discriminator_loss(d_real: &Tensor, d_fake: &Tensor) -> Result<Tensor> {
    Ok(ops::neg(&adversarial_value(d_real, d_fake)?))
}

/// Non-saturating generator loss `−E[ln D(fake)]`.
pub fn generator_adv_loss(d_fake: &Tensor) -> Result<Tensor> {
    validate_d_output("discriminator(fake)", d_fake)?;
    let fake = ops::clamp(d_fake, D_EPS, 1.0 - D_EPS);
    Ok(ops::neg(&ops::mean_all(&ops::ln(&fake))))
}

/// Differentiable highpass: `x − gaussian_blur(x, sigma)`, reflect padding,
/// the same kernel the imaging module uses.
pub fn highpass_t(x: &Tensor, sigma: f64) -> Tensor {
    let n = x.shape()[0];
    let k1 = imaging::gaussian_kernel_1d(sigma);
    let k = k1.len();
    let mut k2 = Array2::<f64>::zeros((k, k));
    for i in 0..k {
        for j in 0..k {
            k2[[i, j]] = k1[i] * k1[j];
        }
    }
    let mut tiled = ArrayD::zeros(IxDyn(&[n, k, k]));
    for b in 0..n {
        tiled.index_axis_mut(ndarray::Axis(0), b).assign(&k2);
    }
    let blurred = blur_per_sample(x, &Tensor::constant(tiled));
    ops::sub(x, &blurred)
}

/// The three cycle terms and their weighted total
/// `L_cl + L_ch + λ_cd · L_cd`.
pub struct CycleTerms {
    pub l_cl: Tensor,
    pub l_ch: Tensor,
    pub l_cd: Tensor,
    pub total: Tensor,
}

/// Assemble the cycle losses from already-computed reconstructions and
/// representation pairs (mean absolute differences).
pub fn cycle_terms(
    x_l: &Tensor,
    x_h: &Tensor,
    x_rec_l: &Tensor,
    x_rec_h: &Tensor,
    repr_of_degraded: &Tensor,
    repr_of_xl: &Tensor,
    lambda_cd: f64,
) -> CycleTerms {
    let l_cl = ops::l1_loss(x_rec_l, x_l);
    let l_ch = ops::l1_loss(x_rec_h, x_h);
    let l_cd = ops::l1_loss(repr_of_degraded, repr_of_xl);
    let total = ops::add(&ops::add(&l_cl, &l_ch), &ops::mul_scalar(&l_cd, lambda_cd));
    CycleTerms { l_cl, l_ch, l_cd, total }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_for;
    use ndarray::Array4;
    use rand::Rng;

    fn const_batch(n: usize, h: usize, w: usize, v: f64) -> Tensor {
        Tensor::constant(Array4::from_elem((n, 3, h, w), v).into_dyn())
    }

    #[test]
    fn adversarial_closed_forms() {
        // D == 0.5 everywhere: ln(0.5) + ln(0.5)
        let half = Tensor::constant(ArrayD::from_elem(IxDyn(&[2, 1, 3, 3]), 0.5));
        let v = adversarial_value(&half, &half).unwrap().scalar();
        assert!((v - 2.0 * 0.5f64.ln()).abs() < 1e-9);
        assert!((v + 1.3862943611).abs() < 1e-6);

        // near-optimal discriminator: value ≈ -2ε
        let eps = 1e-3;
        let real = Tensor::constant(ArrayD::from_elem(IxDyn(&[1, 1, 2, 2]), 1.0 - eps));
        let fake = Tensor::constant(ArrayD::from_elem(IxDyn(&[1, 1, 2, 2]), eps));
        let v = adversarial_value(&real, &fake).unwrap().scalar();
        assert!((v + 2.0 * eps).abs() < 2e-6, "value {v}");
    }

    #[test]
    fn adversarial_guard_and_clamp() {
        let bad = Tensor::constant(ArrayD::from_elem(IxDyn(&[1, 1, 2, 2]), 1.5));
        let ok = Tensor::constant(ArrayD::from_elem(IxDyn(&[1, 1, 2, 2]), 0.5));
        assert!(adversarial_value(&bad, &ok).is_err());
        // exact 0/1 outputs are clamped, value stays finite
        let zero = Tensor::constant(ArrayD::from_elem(IxDyn(&[1, 1, 2, 2]), 0.0));
        let one = Tensor::constant(ArrayD::from_elem(IxDyn(&[1, 1, 2, 2]), 1.0));
        let v = adversarial_value(&one, &zero).unwrap().scalar();
        assert!(v.is_finite());
    }

    #[test]
    fn hf_adversarial_on_constants_degenerates() {
        // constant images highpass to zero, so D sees identical inputs
        let a = const_batch(1, 16, 16, 0.3);
        let b = const_batch(1, 16, 16, 0.9);
        let ha = highpass_t(&a, 1.0);
        let hb = highpass_t(&b, 1.0);
        for (x, y) in ha.value().iter().zip(hb.value().iter()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn highpass_t_matches_imaging_highpass() {
        let img = crate::fixtures::synth_image(24, 24, 9);
        let t = Tensor::constant(img.to_nchw());
        let hp_t = highpass_t(&t, 1.0);
        let hp = crate::imaging::highpass(&img, 1.0).unwrap();
        for c in 0..3 {
            for i in 0..24 {
                for j in 0..24 {
                    assert!(
                        (hp_t.value()[[0, c, i, j]] - hp[[i, j, c]]).abs() < 1e-10,
                        "mismatch at {c},{i},{j}"
                    );
                }
            }
        }
    }

    #[test]
    fn cycle_terms_closed_forms() {
        let x_l = const_batch(1, 8, 8, 0.5);
        let x_h = const_batch(1, 16, 16, 0.6);
        // reconstruction off by a constant 0.1
        let rec_l = const_batch(1, 8, 8, 0.6);
        let rec_h = const_batch(1, 16, 16, 0.6);
        let r1 = Tensor::constant(ArrayD::from_elem(IxDyn(&[1, 4]), 0.25));
        let r2 = Tensor::constant(ArrayD::from_elem(IxDyn(&[1, 4]), 0.5));
        let t = cycle_terms(&x_l, &x_h, &rec_l, &rec_h, &r1, &r2, 1.0);
        assert!((t.l_cl.scalar() - 0.1).abs() < 1e-12);
        assert!(t.l_ch.scalar().abs() < 1e-12);
        assert!((t.l_cd.scalar() - 0.25).abs() < 1e-12);
        assert!((t.total.scalar() - 0.35).abs() < 1e-12);

        // removing the representation term changes the total by λ_cd·L_cd
        let t0 = cycle_terms(&x_l, &x_h, &rec_l, &rec_h, &r1, &r2, 0.0);
        assert!((t.total.scalar() - t0.total.scalar() - 0.25).abs() < 1e-12);
    }

    #[test]
    fn perfect_cycle_is_zero() {
        let x_l = const_batch(2, 8, 8, 0.4);
        let x_h = const_batch(2, 16, 16, 0.7);
        let r = Tensor::constant(ArrayD::from_elem(IxDyn(&[2, 4]), 0.1));
        let t = cycle_terms(&x_l, &x_h, &x_l, &x_h, &r, &r, 1.0);
        assert_eq!(t.total.scalar(), 0.0);
    }

    #[test]
    fn regressed_parameters_satisfy_invariants() {
        let mut ps = ParamSet::new("heads");
        let mut rng = rng_for(3, "heads-test");
        let heads = RegressionHeads::build(&mut ps, &mut rng, 16, DegradationKind::SesComposite);
        let ctx = Ctx::new(&ps);
        let mut gen = rng_for(4, "dc");
        for trial in 0..50 {
            let d_c = Tensor::constant(ArrayD::from_shape_fn(IxDyn(&[3, 16]), |_| {
                gen.random_range(-3.0..3.0)
            }));
            let p = heads.regress(&ctx, &d_c, 16, 16);
            let k = p.kernel.as_ref().unwrap();
            for b in 0..3 {
                let sum: f64 = k.value().index_axis(ndarray::Axis(0), b).sum();
                assert!((sum - 1.0).abs() < 1e-6, "trial {trial}: kernel sums to {sum}");
            }
            assert!(p.illumination.is_none(), "composite kind has no illumination head");
            for field in [p.noise_std.as_ref(), p.transmission.as_ref()] {
                let f = field.unwrap();
                for &v in f.value().iter() {
                    assert!(v.is_finite());
                }
            }
            for &v in p.transmission.as_ref().unwrap().value().iter() {
                assert!(v > 0.0 && v <= 1.0);
            }
            for &v in p.noise_std.as_ref().unwrap().value().iter() {
                assert!((0.0..=0.5).contains(&v));
            }
            let (a, b2, g) = p.gains.as_ref().unwrap();
            for t in [a, b2, g] {
                for &v in t.value().iter() {
                    assert!(v > 0.0);
                }
            }
        }
    }

    #[test]
    fn degrade_back_identity_parameterization() {
        // Force heads to emit identity parameters via extreme biases.
        let mut ps = ParamSet::new("heads");
        let mut rng = rng_for(5, "heads-ident");
        let heads = RegressionHeads::build(&mut ps, &mut rng, 8, DegradationKind::SesComposite);
        for id in ps.var_ids().collect::<Vec<_>>() {
            let name = ps.name_of(id).to_string();
            let shape: Vec<usize> = ps.value(id).shape().to_vec();
            let mut v = ArrayD::zeros(IxDyn(&shape));
            if name == "head.noise.bias" {
                v.fill(-80.0); // sigma -> 0
            } else if name == "head.blur.bias" {
                v[[40]] = 80.0; // delta kernel at center of 9x9
            } else if name == "head.trans.bias" {
                v.fill(80.0); // T -> 1
            } else if name == "head.air.bias" {
                v.fill(0.0);
            } else if name == "head.gains.bias" {
                // softplus(x) + 1e-4 = 1  =>  x = ln(e^(1-1e-4) - 1)
                let target = (1.0f64 - 1e-4).exp_m1().ln();
                v.fill(target);
            }
            ps.set_value(id, v);
        }
        let ctx = Ctx::new(&ps);
        let x = Tensor::constant(Array4::from_shape_fn((1, 3, 16, 16), |(_, c, i, j)| {
            0.2 + 0.6 * (((c + i * 3 + j * 5) % 11) as f64 / 10.0)
        }).into_dyn());
        let d_c = Tensor::constant(ArrayD::zeros(IxDyn(&[1, 8])));
        let (out, _) = degrade_back(&heads, &ctx, &x, &d_c, 1, 3).unwrap();
        for (a, b) in out.value().iter().zip(x.value().iter()) {
            assert!((a - b).abs() < 1e-9, "{a} vs {b}");
        }
    }

    #[test]
    fn degrade_back_shape_and_determinism() {
        let mut ps = ParamSet::new("heads");
        let mut rng = rng_for(6, "heads-shape");
        let heads = RegressionHeads::build(&mut ps, &mut rng, 8, DegradationKind::Noise);
        let ctx = Ctx::new(&ps);
        let x = const_batch(2, 16, 16, 0.5);
        let mut gen = rng_for(7, "dc2");
        let d_c = Tensor::constant(ArrayD::from_shape_fn(IxDyn(&[2, 8]), |_| gen.random::<f64>()));
        let (a, _) = degrade_back(&heads, &ctx, &x, &d_c, 2, 11).unwrap();
        assert_eq!(a.shape(), [2, 3, 8, 8]);
        let (b, _) = degrade_back(&heads, &Ctx::new(&ps), &x, &d_c, 2, 11).unwrap();
        assert_eq!(a.value(), b.value());
        let (c, _) = degrade_back(&heads, &Ctx::new(&ps), &x, &d_c, 2, 12).unwrap();
        assert_ne!(a.value(), c.value());
    }

    #[test]
    fn discriminator_output_range_and_params() {
        let mut ps = ParamSet::new("disc");
        let mut rng = rng_for(8, "disc-test");
        let d = PatchDiscriminator::build(&mut ps, &mut rng, "d", &PatchDiscriminator::default_widths());
        // ~2.7M parameters for the default PatchGAN stack
        let p = d.param_count() as f64;
        assert!((p - 2.7e6).abs() / 2.7e6 < 0.05, "{p}");
        let ctx = Ctx::new(&ps);
        let x = const_batch(1, 32, 32, 0.5);
        let y = d.forward(&ctx, &x).unwrap();
        for &v in y.value().iter() {
            assert!(v > 0.0 && v < 1.0);
        }
        let tiny = const_batch(1, 16, 16, 0.5);
        assert!(d.forward(&ctx, &tiny).is_err());
    }

    #[test]
    fn generator_forward_scales_and_pads() {
        let mut enc_ps = ParamSet::new("encoder");
        let mut rng = rng_for(9, "gen-test");
        let enc = crate::encoder::DegradationEncoder::build(
            &mut enc_ps,
            &mut rng,
            &crate::encoder::EncoderConfig { base_width: 4, blocks_per_stage: 1, proj_dim: 8 },
        );
        let mut enh_ps = ParamSet::new("enhancer");
        let mut cfg = crate::enhancer::tests::tiny_cfg();
        cfg.repr_channels = 16;
        let enh = crate::enhancer::GuidedEnhancer::build(&mut enh_ps, &mut rng, &cfg).unwrap();
        let generator = Generator { encoder: &enc, enhancer: &enh };
        let enc_ctx = Ctx::new(&enc_ps);
        let enh_ctx = Ctx::new(&enh_ps);
        // 10x14 forces padding to the window multiple
        let x = Tensor::constant(Array4::from_shape_fn((1, 3, 10, 14), |(_, c, i, j)| {
            ((c + i + 2 * j) % 9) as f64 / 9.0
        }).into_dyn());
        let (y, d_c) = generator.forward(&enc_ctx, &enh_ctx, &x).unwrap();
        assert_eq!(y.shape(), [1, 3, 20, 28]);
        assert_eq!(d_c.shape(), [1, 16]);
    }
}
