use lucid_core::degrade::{self, DegradationKind, DegradationLevel};
use lucid_core::encoder::EncoderConfig;
use lucid_core::enhancer::EnhancerConfig;
use lucid_core::fixtures::synth_image;
use lucid_core::imaging::ImageTensor;
use lucid_core::nn::Adam;
use lucid_core::propagation::PropagationConfig;
use lucid_core::train::{stage2_step, Models, TrainConfig};
use std::time::Instant;

fn desk_config(seed: u64) -> TrainConfig {
    TrainConfig {
        seed,
        batch_size: 2,
        reverse_kind: DegradationKind::Noise,
        disc_widths: vec![32, 64, 128],
        encoder_cfg: EncoderConfig { base_width: 16, blocks_per_stage: 2, proj_dim: 64 },
        enhancer_cfg: EnhancerConfig {
            embed_dim: 24, heads: 4, window: 8, blocks: 2, scale: 2,
            repr_channels: 64, compress_mid: 24, shallow_mid: 8,
            recon_expand: 96, mlp_ratio: 2, bicubic_skip: true,
        },
        propagation_cfg: PropagationConfig { d_c_dim: 24, model_dim: 32, layers: 1, heads: 4, ff_ratio: 2, context: 8 },
        ..TrainConfig::default()
    }
}

fn main() {
    let cfg = desk_config(1);
    let mut models = Models::build(&cfg).unwrap();
    // 4 pairs: HQ 64, LQ 32 (noise L2 + down 2)
    let hq: Vec<ImageTensor> = (0..4).map(|i| {
        let img = synth_image(96, 96, 300 + i);
        ImageTensor::new(img.data().slice(ndarray::s![0..64, 0..64, ..]).to_owned()).unwrap()
    }).collect();
    let lq: Vec<ImageTensor> = hq.iter().enumerate().map(|(i, img)| {
        let p = degrade::sample_parameters(DegradationKind::Noise, DegradationLevel::L2, 64, 64, 2, i as u64);
        degrade::apply(img, &p, 1000 + i as u64).unwrap()
    }).collect();
    let adam_g = Adam::new(cfg.lr_generator, cfg.beta1, cfg.beta2);
    let adam_d = Adam::new(cfg.lr_discriminator, cfg.beta1, cfg.beta2);
    let t = Instant::now();
    for step in 0..10 {
        let hq_refs: Vec<&ImageTensor> = vec![&hq[step % 4], &hq[(step + 1) % 4]];
        let lq_refs: Vec<&ImageTensor> = vec![&lq[step % 4], &lq[(step + 1) % 4]];
        stage2_step(&cfg, &mut models, &hq_refs, &lq_refs, 0, step, &adam_g, &adam_d, true, true).unwrap();
    }
    println!("stage2 step: {:.0} ms", t.elapsed().as_secs_f64() * 100.0);

    // A4-style pretrain timing: one epoch over 16 images batch 8, crop 32
    let corpus: Vec<ImageTensor> = (0..16).map(|i| synth_image(64, 64, 400 + i)).collect();
    let pcfg = lucid_core::encoder::PretrainConfig {
        epochs: 1, batch_size: 8, crop: 32, queue_size: 256, seed: 2,
        ..lucid_core::encoder::PretrainConfig::default()
    };
    let mut ps = lucid_core::nn::ParamSet::new("encoder");
    let mut rng = lucid_core::rng::rng_for(2, "probe");
    let enc = lucid_core::encoder::DegradationEncoder::build(&mut ps, &mut rng, &cfg.encoder_cfg);
    let t = Instant::now();
    lucid_core::encoder::pretrain(&corpus, &pcfg, &mut ps, &enc, |_| {}).unwrap();
    println!("pretrain: {:.0} ms per step (2 steps)", t.elapsed().as_secs_f64() * 500.0);
}
