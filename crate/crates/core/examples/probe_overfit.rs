use lucid_core::cycle::{Generator, LossWeights};
use lucid_core::degrade::{self, DegradationKind, DegradationLevel};
use lucid_core::encoder::EncoderConfig;
use lucid_core::enhancer::EnhancerConfig;
use lucid_core::fixtures::synth_blocky_image;
use lucid_core::imaging::{resize_bicubic, ImageTensor};
use lucid_core::metrics::psnr;
use lucid_core::nn::{Adam, Ctx};
use lucid_core::propagation::PropagationConfig;
use lucid_core::tensor::Tensor;
use lucid_core::train::{stage2_step, Models, TrainConfig};
use std::time::Instant;

fn main() {
    let arg = |i: usize, d: f64| std::env::args().nth(i).and_then(|s| s.parse().ok()).unwrap_or(d);
    let lr = arg(1, 5e-5);
    let lr_d = arg(2, 2e-4);
    let cyc = arg(3, 10.0);
    let steps = arg(4, 500.0) as usize;
    let adv = arg(5, 1.0);
    let hf = arg(6, 0.5);
    let cfg = TrainConfig {
        seed: 7,
        batch_size: 4,
        lr_generator: lr,
        lr_discriminator: lr_d,
        weights: LossWeights { cyc, adv, hf, ..Default::default() },
        freeze_heads_stage2: std::env::args().nth(7).as_deref() == Some("freeze"),
        reverse_kind: DegradationKind::Noise,
        disc_widths: vec![32, 64, 128],
        encoder_cfg: EncoderConfig { base_width: 16, blocks_per_stage: 2, proj_dim: 64 },
        enhancer_cfg: EnhancerConfig {
            embed_dim: 32, heads: 4, window: 8, blocks: 2, scale: 2,
            repr_channels: 64, compress_mid: 24, shallow_mid: 8,
            recon_expand: 128, mlp_ratio: 2, bicubic_skip: true,
        },
        propagation_cfg: PropagationConfig { d_c_dim: 32, model_dim: 32, layers: 1, heads: 4, ff_ratio: 2, context: 8 },
        ..TrainConfig::default()
    };
    let mut models = Models::build(&cfg).unwrap();
    let hq: Vec<ImageTensor> = (0..4).map(|i| {
        let img = synth_blocky_image(72, 72, 300 + i);
        ImageTensor::new(img.data().slice(ndarray::s![0..48, 0..48, ..]).to_owned()).unwrap()
    }).collect();
    let noise_seeds = [122u64, 112, 178, 8];
    let lq: Vec<ImageTensor> = hq.iter().enumerate().map(|(i, img)| {
        let p = degrade::sample_parameters(DegradationKind::Noise, DegradationLevel::L2, 48, 48, 2, noise_seeds[i]);
        degrade::apply(img, &p, 1000 + i as u64).unwrap()
    }).collect();
    let mut base = 0.0;
    for (h, l) in hq.iter().zip(lq.iter()) {
        base += psnr(&resize_bicubic(l, 2.0).unwrap(), h).unwrap();
    }
    base /= 4.0;
    println!("lr={lr} lr_d={lr_d} cyc={cyc} steps={steps} | bicubic baseline: {base:.2} dB");
    let adam_g = Adam::new(cfg.lr_generator, cfg.beta1, cfg.beta2);
    let adam_d = Adam::new(cfg.lr_discriminator, cfg.beta1, cfg.beta2);
    let t = Instant::now();
    for step in 0..steps {
        let hq_refs: Vec<&ImageTensor> = hq.iter().collect();
        let lq_refs: Vec<&ImageTensor> = lq.iter().collect();
        // fixed (epoch, step) seed basis: one reverse-noise realization for the whole overfit
        let r = stage2_step(&cfg, &mut models, &hq_refs, &lq_refs, 0, 0, &adam_g, &adam_d, true, true).unwrap();
        if (step + 1) % 50 == 0 {
            let mut finish = 0.0;
            for id in models.enh_ps.var_ids() {
                if models.enh_ps.name_of(id).starts_with("recon.finish") {
                    finish += models.enh_ps.value(id).iter().map(|x| x.abs()).sum::<f64>();
                }
            }
            println!("  s{}: advH {:.2} advL {:.2} hf {:.2} cl {:.4} ch {:.4} cd {:.4} | dH {:.2} dL {:.2} | finish {:.3} hash {}",
                step + 1, r.g_adv_h, r.g_adv_l, r.g_adv_hf, r.l_cl, r.l_ch, r.l_cd, r.d_h, r.d_l,
                finish, &models.enh_ps.sha256_hex()[..8]);
        }
        if (step + 1) % 100 == 0 {
            let generator = Generator { encoder: &models.encoder, enhancer: &models.enhancer };
            let mut p = 0.0;
            for (h, l) in hq.iter().zip(lq.iter()) {
                let enc_ctx = Ctx::new(&models.enc_ps);
                let enh_ctx = Ctx::new(&models.enh_ps);
                let (y, _) = generator.forward(&enc_ctx, &enh_ctx, &Tensor::constant(l.to_nchw())).unwrap();
                p += psnr(&ImageTensor::from_nchw(y.value()).unwrap(), h).unwrap();
            }
            println!("step {}: psnr {:.2} dB (gain {:+.2}), {:.0} s", step + 1, p / 4.0, p / 4.0 - base, t.elapsed().as_secs_f64());
        }
    }
}
