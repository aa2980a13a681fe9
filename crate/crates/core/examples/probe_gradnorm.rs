use lucid_core::cycle::{cycle_terms, degrade_back, Generator};
use lucid_core::degrade::{self, DegradationKind, DegradationLevel};
use lucid_core::encoder::{stack_images, EncoderConfig};
use lucid_core::enhancer::EnhancerConfig;
use lucid_core::fixtures::synth_blocky_image;
use lucid_core::imaging::ImageTensor;
use lucid_core::nn::Ctx;
use lucid_core::propagation::PropagationConfig;
use lucid_core::tensor::Tensor;
use lucid_core::train::{Models, TrainConfig};

fn main() {
    let cfg = TrainConfig {
        seed: 7,
        batch_size: 4,
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
    let models = Models::build(&cfg).unwrap();
    let hq: Vec<ImageTensor> = (0..4).map(|i| {
        let img = synth_blocky_image(72, 72, 300 + i);
        ImageTensor::new(img.data().slice(ndarray::s![0..48, 0..48, ..]).to_owned()).unwrap()
    }).collect();
    let noise_seeds = [122u64, 112, 178, 8];
    let lq: Vec<ImageTensor> = hq.iter().enumerate().map(|(i, img)| {
        let p = degrade::sample_parameters(DegradationKind::Noise, DegradationLevel::L2, 48, 48, 2, noise_seeds[i]);
        degrade::apply(img, &p, 1000 + i as u64).unwrap()
    }).collect();
    let x_h = Tensor::constant(stack_images(&hq));
    let x_l = Tensor::constant(stack_images(&lq));

    let enc_ctx = Ctx::new(&models.enc_ps);
    let enh_ctx = Ctx::new(&models.enh_ps);
    let heads_ctx = Ctx::new(&models.heads_ps);
    let generator = Generator { encoder: &models.encoder, enhancer: &models.enhancer };
    let (x_enh, d_c_l) = generator.forward(&enc_ctx, &enh_ctx, &x_l).unwrap();
    let (x_deg, _) = degrade_back(&models.heads, &heads_ctx, &x_h, &d_c_l, 2, 42).unwrap();
    let (x_rec_l, _) = degrade_back(&models.heads, &heads_ctx, &x_enh, &d_c_l, 2, 43).unwrap();
    let (x_rec_h, _) = generator.forward(&enc_ctx, &enh_ctx, &x_deg).unwrap();
    let repr_deg = generator.repr_vec(&enc_ctx, &x_deg).unwrap();
    let repr_l = generator.repr_vec(&enc_ctx, &x_l).unwrap();
    let t = cycle_terms(&x_l, &x_h, &x_rec_l, &x_rec_h, &repr_deg, &repr_l, 1.0);
    println!("l_cl {:.4} l_ch {:.4} l_cd {:.6} total {:.4}", t.l_cl.scalar(), t.l_ch.scalar(), t.l_cd.scalar(), t.total.scalar());
    let grads = t.total.backward();
    for (name_prefix, ctx, ps) in [("enh", &enh_ctx, &models.enh_ps), ("heads", &heads_ctx, &models.heads_ps), ("enc", &enc_ctx, &models.enc_ps)] {
        let mut rows: Vec<(String, f64)> = Vec::new();
        for (id, leaf) in ctx.used() {
            let norm = grads.get(&leaf).map(|g| g.iter().map(|v| v.abs()).sum::<f64>() / g.len() as f64).unwrap_or(-1.0);
            rows.push((format!("{}", ps.name_of(id)), norm));
        }
        rows.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap());
        println!("--- {name_prefix} top grads:");
        for (n, g) in rows.iter().take(5) {
            println!("  {n}: {g:.3e}");
        }
        let zero_count = rows.iter().filter(|(_, g)| *g == 0.0).count();
        println!("  ({} of {} vars have exactly zero grad)", zero_count, rows.len());
    }
}
