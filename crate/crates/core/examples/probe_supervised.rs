use lucid_core::cycle::Generator;
use lucid_core::degrade::{self, DegradationKind, DegradationLevel};
use lucid_core::encoder::EncoderConfig;
use lucid_core::enhancer::EnhancerConfig;
use lucid_core::fixtures::synth_blocky_image;
use lucid_core::imaging::{resize_bicubic, ImageTensor};
use lucid_core::metrics::psnr;
use lucid_core::nn::{Adam, Ctx};
use lucid_core::propagation::PropagationConfig;
use lucid_core::tensor::{ops, Tensor};
use lucid_core::train::{Models, TrainConfig};

fn main() {
    let arg = |i: usize, d: f64| std::env::args().nth(i).and_then(|s| s.parse().ok()).unwrap_or(d);
    let lr = arg(1, 1e-3);
    let steps = arg(2, 300.0) as usize;
    let embed = arg(3, 24.0) as usize;
    let blocks = arg(4, 2.0) as usize;
    let cfg = TrainConfig {
        seed: 7,
        reverse_kind: DegradationKind::Noise,
        disc_widths: vec![32, 64, 128],
        encoder_cfg: EncoderConfig { base_width: 16, blocks_per_stage: 2, proj_dim: 64 },
        enhancer_cfg: EnhancerConfig {
            embed_dim: embed, heads: 4, window: 8, blocks, scale: 2,
            repr_channels: 64, compress_mid: 24, shallow_mid: 8,
            recon_expand: if embed == 32 { 128 } else { 96 }, mlp_ratio: 2, bicubic_skip: true,
        },
        propagation_cfg: PropagationConfig { d_c_dim: embed, model_dim: 32, layers: 1, heads: 4, ff_ratio: 2, context: 8 },
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
    println!("supervised lr={lr} embed={embed} blocks={blocks}: baseline {base:.2} dB");
    let adam = Adam::new(lr, 0.9, 0.999);
    let t0 = std::time::Instant::now();
    for step in 0..steps {
        let x_l = Tensor::constant(lucid_core::encoder::stack_images(&lq));
        let x_h = Tensor::constant(lucid_core::encoder::stack_images(&hq));
        let enc_ctx = Ctx::new(&models.enc_ps);
        let enh_ctx = Ctx::new(&models.enh_ps);
        let generator = Generator { encoder: &models.encoder, enhancer: &models.enhancer };
        let (y, _) = generator.forward(&enc_ctx, &enh_ctx, &x_l).unwrap();
        let loss = ops::l1_loss(&y, &x_h);
        let mut grads = loss.backward();
        let used = enc_ctx.used();
        adam.step(&mut models.enc_ps, &used, &mut grads);
        let used = enh_ctx.used();
        adam.step(&mut models.enh_ps, &used, &mut grads);
        if (step + 1) % 50 == 0 {
            let mut p = 0.0;
            for (h, l) in hq.iter().zip(lq.iter()) {
                let enc_ctx = Ctx::new(&models.enc_ps);
                let enh_ctx = Ctx::new(&models.enh_ps);
                let generator = Generator { encoder: &models.encoder, enhancer: &models.enhancer };
                let (y, _) = generator.forward(&enc_ctx, &enh_ctx, &Tensor::constant(l.to_nchw())).unwrap();
                p += psnr(&ImageTensor::from_nchw(y.value()).unwrap(), h).unwrap();
            }
            println!("  step {}: loss {:.4} psnr {:.2} (gain {:+.2}) {:.0}s", step + 1, loss.scalar(), p / 4.0, p / 4.0 - base, t0.elapsed().as_secs_f64());
        }
    }
}
