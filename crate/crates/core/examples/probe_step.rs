use lucid_core::degrade::{self, DegradationKind, DegradationLevel};
use lucid_core::encoder::EncoderConfig;
use lucid_core::enhancer::EnhancerConfig;
use lucid_core::fixtures::synth_blocky_image;
use lucid_core::imaging::ImageTensor;
use lucid_core::nn::Adam;
use lucid_core::propagation::PropagationConfig;
use lucid_core::train::{stage2_step, Models, TrainConfig};

fn main() {
    let cfg = TrainConfig {
        seed: 7,
        batch_size: 4,
        lr_generator: 1e-3,
        lr_discriminator: 2e-5,
        weights: lucid_core::cycle::LossWeights { cyc: 30.0, ..Default::default() },
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
    let lq: Vec<ImageTensor> = hq.iter().enumerate().map(|(i, img)| {
        let p = degrade::sample_parameters(DegradationKind::Noise, DegradationLevel::L2, 48, 48, 2, 122);
        degrade::apply(img, &p, 1000 + i as u64).unwrap()
    }).collect();
    let adam_g = Adam::new(cfg.lr_generator, cfg.beta1, cfg.beta2);
    let adam_d = Adam::new(cfg.lr_discriminator, cfg.beta1, cfg.beta2);
    let finish_norm = |models: &Models| -> (f64, f64) {
        let mut w_norm = 0.0;
        let mut all = 0.0;
        for id in models.enh_ps.var_ids() {
            let v: f64 = models.enh_ps.value(id).iter().map(|x| x.abs()).sum();
            all += v;
            if models.enh_ps.name_of(id).starts_with("recon.finish") {
                w_norm += v;
            }
        }
        (w_norm, all)
    };
    println!("before: finish |w| {:?}", finish_norm(&models));
    for step in 0..5 {
        let hq_refs: Vec<&ImageTensor> = hq.iter().collect();
        let lq_refs: Vec<&ImageTensor> = lq.iter().collect();
        let r = stage2_step(&cfg, &mut models, &hq_refs, &lq_refs, 0, step, &adam_g, &adam_d, true, true).unwrap();
        println!("step {step}: ch {:.4} finish/all {:?}", r.l_ch, finish_norm(&models));
    }
}
