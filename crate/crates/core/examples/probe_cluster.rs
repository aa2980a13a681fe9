use lucid_core::degrade::{self, DegradationKind, DegradationLevel};
use lucid_core::encoder::{self, DegradationEncoder, EncoderConfig, PretrainConfig};
use lucid_core::fixtures::synth_image;
use lucid_core::imaging::ImageTensor;
use lucid_core::metrics::{pca_project, silhouette};
use lucid_core::nn::ParamSet;
use lucid_core::rng::rng_for;
use ndarray::Array2;
use rand::Rng;

fn main() {
    let arg = |i: usize, d: f64| std::env::args().nth(i).and_then(|s| s.parse().ok()).unwrap_or(d);
    let lr = arg(1, 5e-5);
    let batch = arg(2, 8.0) as usize;
    let crop = arg(3, 32.0) as usize;
    let momentum = arg(4, 0.999);
    // 200 images drawn as crops of 8 master scenes: content recurs across
    // the corpus, so instance identity cannot shortcut the contrastive task
    let masters: Vec<ImageTensor> = (0..8).map(|i| synth_image(128, 128, 4000 + i)).collect();
    let mut crop_rng = rng_for(4, "corpus-crops");
    let corpus: Vec<ImageTensor> = (0..200)
        .map(|i| {
            let m = &masters[i % 8];
            let i0 = crop_rng.random_range(0..=128 - 48);
            let j0 = crop_rng.random_range(0..=128 - 48);
            ImageTensor::new(m.data().slice(ndarray::s![i0..i0 + 48, j0..j0 + 48, ..]).to_owned()).unwrap()
        })
        .collect();
    let enc_cfg = EncoderConfig { base_width: 16, blocks_per_stage: 2, proj_dim: 64 };
    let mut ps = ParamSet::new("encoder");
    let mut rng = rng_for(4, "a4-init");
    let enc = DegradationEncoder::build(&mut ps, &mut rng, &enc_cfg);
    let pcfg = PretrainConfig { epochs: 20, batch_size: batch, crop, lr, momentum, queue_size: 256, seed: 4, ..PretrainConfig::default() };
    let mut losses = Vec::new();
    encoder::pretrain(&corpus, &pcfg, &mut ps, &enc, |s| losses.push(s.loss)).unwrap();
    let k = losses.len();
    println!("lr={lr} batch={batch} crop={crop} m={momentum}: {} steps, loss start {:.3} mid {:.3} end {:.3}",
        k, losses[..10.min(k)].iter().sum::<f64>() / 10f64.min(k as f64),
        losses[k / 2], losses[k - 10..].iter().sum::<f64>() / 10.0);

    let kinds = [DegradationKind::Noise, DegradationKind::MotionBlur, DegradationKind::LowLight, DegradationKind::Smoke];
    let mut vectors = Vec::new();
    let mut labels = Vec::new();
    let mut level_of = Vec::new();
    let mut eval_rng = rng_for(44, "a4-eval");
    for kind in kinds {
        for level in DegradationLevel::ALL {
            for s in 0..8u64 {
                // held-out masters for evaluation
                let m = synth_image(128, 128, 5000 + eval_rng.random_range(0..8u64));
                let i0 = eval_rng.random_range(0..=128 - 32);
                let j0 = eval_rng.random_range(0..=128 - 32);
                let img = ImageTensor::new(m.data().slice(ndarray::s![i0..i0 + 32, j0..j0 + 32, ..]).to_owned()).unwrap();
                let seed = 100_000 + s * 17 + level.index() as u64 * 1000;
                let params = degrade::sample_parameters(kind, level, 32, 32, 1, seed);
                let degraded = degrade::apply(&img, &params, seed).unwrap();
                let repr = enc.encode(&ps, &degraded).unwrap();
                // pooled trunk features (the representation itself)
                let c = repr.d_map.shape()[0];
                let area = (repr.d_map.len() / c) as f64;
                let pooled: Vec<f64> = (0..c)
                    .map(|ch| repr.d_map.index_axis(ndarray::Axis(0), ch).sum() / area)
                    .collect();
                vectors.push((ndarray::Array1::from_vec(pooled), repr.d_vec));
                labels.push(kind.name().to_string());
                level_of.push(level);
            }
        }
    }
    let n = vectors.len();
    for (name, pick) in [("pooled d_map", 0usize), ("d_vec", 1)] {
        let d = if pick == 0 { vectors[0].0.len() } else { vectors[0].1.len() };
        let mut mat = Array2::zeros((n, d));
        for (i, v) in vectors.iter().enumerate() {
            let src = if pick == 0 { &v.0 } else { &v.1 };
            for k in 0..d { mat[[i, k]] = src[k]; }
        }
        let proj = pca_project(&mat, &labels).unwrap();
        let sil = silhouette(&proj.coords, &labels).unwrap();
        println!("silhouette by kind ({name}): {sil:.4}");
    }
    let d = vectors[0].0.len();
    let mut mat = Array2::zeros((n, d));
    for (i, v) in vectors.iter().enumerate() { for k in 0..d { mat[[i, k]] = v.0[k]; } }
    let proj = pca_project(&mat, &labels).unwrap();
    for level in DegradationLevel::ALL {
        let (mut cx, mut cy, mut c) = (0.0, 0.0, 0.0);
        for i in 0..n {
            if labels[i] == "noise" && level_of[i] == level {
                cx += proj.coords[[i, 0]]; cy += proj.coords[[i, 1]]; c += 1.0;
            }
        }
        println!("  noise {} centroid: ({:.3}, {:.3})", level.name(), cx / c, cy / c);
    }
}
