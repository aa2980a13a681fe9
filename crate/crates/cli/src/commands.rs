//! Implementations of the CLI workflows.

use std::path::{Path, PathBuf};

use lucid_core::cycle::Generator;
use lucid_core::data::{make_pairs, sample_clip, CorpusManifest, ItemKind, PairConfig, Split};
use lucid_core::degrade;
use lucid_core::error::{Error, Result};
use lucid_core::imaging::{ImageTensor, VideoSequence};
use lucid_core::metrics::{self, MetricReport, MetricRow, NiqeModel};
use lucid_core::nn::Ctx;
use lucid_core::rng::{derive_seed, rng_for};
use lucid_core::tensor::Tensor;
use lucid_core::train::{run_stage1, run_stage2, run_stage3, Models, TrainConfig};
use lucid_core::video::{enhance_video, estimate_avg_flops, write_frame_csv, VideoModel};
use ndarray::Array2;
use rand::Rng;

use crate::config::RunConfig;

pub fn load_or_init_models(cfg: &TrainConfig, weights: Option<&Path>) -> Result<Models> {
    let mut models = Models::build(cfg)?;
    match weights {
        Some(dir) => models.load_all(dir)?,
        None => eprintln!("warning: no --weights given; using freshly initialized models"),
    }
    Ok(models)
}

fn video_view(models: &Models) -> VideoModel<'_> {
    VideoModel {
        enc_ps: &models.enc_ps,
        encoder: &models.encoder,
        enh_ps: &models.enh_ps,
        enhancer: &models.enhancer,
        prop_ps: &models.prop_ps,
        propagator: &models.propagator,
    }
}

fn split_images(manifest: &CorpusManifest, split: Split) -> Result<Vec<ImageTensor>> {
    manifest
        .split_items(split, ItemKind::Image)
        .iter()
        .map(|item| ImageTensor::read_png(&item.path))
        .collect()
}

/// `degrade`: build a manifest, synthesize paired samples with provenance
/// sidecars, and degrade whole clips for the video stages.
#[allow(clippy::too_many_arguments)]
pub fn degrade_cmd(
    cfg: &RunConfig,
    out_dir: &Path,
    corpus: &Path,
    split: Split,
    count: usize,
    clips: usize,
    clip_len: usize,
) -> Result<()> {
    let manifest = CorpusManifest::build(corpus, cfg.data.ratios, cfg.seed)?;
    manifest.save(&out_dir.join("manifest.tsv"))?;

    let pair_cfg = PairConfig {
        kinds: cfg.data.kinds.clone(),
        levels: cfg.data.levels.clone(),
        patch: cfg.data.patch,
        scale: cfg.data.scale,
        count,
        seed: cfg.seed,
    };
    let pair_dir = out_dir.join("pairs").join(split.name());
    std::fs::create_dir_all(&pair_dir)?;
    for (i, sample) in make_pairs(&manifest, split, pair_cfg)?.enumerate() {
        let sample = sample?;
        sample.x_h.write_png(&pair_dir.join(format!("pair_{i:06}_hq.png")))?;
        sample.x_l.write_png(&pair_dir.join(format!("pair_{i:06}_lq.png")))?;
        std::fs::write(pair_dir.join(format!("pair_{i:06}_params.txt")), sample.provenance_kv())?;
    }
    println!("wrote {count} pairs to {}", pair_dir.display());

    if clips > 0 {
        let clip_dir = out_dir.join("clips_lq");
        let mut rng = rng_for(cfg.seed, "degrade/clips");
        for c in 0..clips {
            let clip_seed = derive_seed(cfg.seed, &format!("degrade/clip{c}"));
            let source = sample_clip(&manifest, split, clip_len, clip_seed)?;
            let kind = cfg.data.kinds[c % cfg.data.kinds.len()];
            let level = cfg.data.levels[rng.random_range(0..cfg.data.levels.len())];
            let (h, w) = (source.frames()[0].height(), source.frames()[0].width());
            let params = degrade::sample_parameters(kind, level, h, w, cfg.data.scale, clip_seed);
            let mut frames = Vec::with_capacity(source.len());
            for (t, frame) in source.frames().iter().enumerate() {
                frames.push(degrade::apply(frame, &params, derive_seed(clip_seed, &format!("f{t}")))?);
            }
            let video = VideoSequence::new(frames, source.frame_rate())?;
            let dir = clip_dir.join(format!("clip_{c:03}"));
            video.write_dir(&dir)?;
            std::fs::write(dir.join("params.txt"), params.to_kv_string())?;
        }
        println!("wrote {clips} degraded clips to {}", clip_dir.display());
    }
    Ok(())
}

/// `pretrain-dam`: contrastive pretraining of the degradation encoder.
pub fn pretrain_cmd(cfg: &RunConfig, out_dir: &Path, corpus: &Path) -> Result<()> {
    let manifest = CorpusManifest::build(corpus, cfg.data.ratios, cfg.seed)?;
    manifest.save(&out_dir.join("manifest.tsv"))?;
    let images = split_images(&manifest, Split::Train)?;
    let mut models = Models::build(&cfg.train)?;
    run_stage1(&cfg.train, &images, &mut models, out_dir)?;
    let final_dir = out_dir.join("final");
    models.save_all(&final_dir)?;
    models.write_hash_manifest(&out_dir.join("artifact_hashes.tsv"))?;
    println!("pretraining done; checkpoints in {}", final_dir.display());
    Ok(())
}

/// `train`: stage-2 adversarial training on unpaired pools drawn from the
/// manifest's train split.
pub fn train_cmd(cfg: &RunConfig, out_dir: &Path, corpus: &Path, init_from: Option<&Path>) -> Result<()> {
    let manifest = CorpusManifest::build(corpus, cfg.data.ratios, cfg.seed)?;
    manifest.save(&out_dir.join("manifest.tsv"))?;
    let pair_cfg = PairConfig {
        kinds: cfg.data.kinds.clone(),
        levels: cfg.data.levels.clone(),
        patch: cfg.data.patch,
        scale: cfg.data.scale,
        count: cfg.data.pairs,
        seed: derive_seed(cfg.seed, "train/pools"),
    };
    let mut hq = Vec::new();
    let mut lq = Vec::new();
    for sample in make_pairs(&manifest, Split::Train, pair_cfg)? {
        let s = sample?;
        hq.push(s.x_h);
        lq.push(s.x_l);
    }
    let mut models = load_or_init_models(&cfg.train, init_from)?;
    run_stage2(&cfg.train, &hq, &lq, &mut models, out_dir)?;
    let final_dir = out_dir.join("final");
    models.save_all(&final_dir)?;
    models.write_hash_manifest(&out_dir.join("artifact_hashes.tsv"))?;
    println!("stage-2 training done; checkpoints in {}", final_dir.display());
    Ok(())
}

/// `train-drpm`: stage-3 propagation training on degraded clips.
pub fn train_drpm_cmd(
    cfg: &RunConfig,
    out_dir: &Path,
    corpus: &Path,
    lq_clips: &Path,
    init_from: &Path,
) -> Result<()> {
    if !init_from.join("encoder.ckpt").is_file() {
        return Err(Error::Checkpoint(format!(
            "--init-from {init_from:?} has no pretrained single-frame checkpoints"
        )));
    }
    let manifest = CorpusManifest::build(corpus, cfg.data.ratios, cfg.seed)?;
    let pair_cfg = PairConfig {
        kinds: cfg.data.kinds.clone(),
        levels: cfg.data.levels.clone(),
        patch: cfg.data.patch,
        scale: cfg.data.scale,
        count: cfg.data.pairs.max(8),
        seed: derive_seed(cfg.seed, "train-drpm/hq"),
    };
    let hq: Vec<ImageTensor> = make_pairs(&manifest, Split::Train, pair_cfg)?
        .map(|s| s.map(|s| s.x_h))
        .collect::<Result<_>>()?;
    let mut clip_dirs: Vec<PathBuf> = std::fs::read_dir(lq_clips)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    clip_dirs.sort();
    if clip_dirs.is_empty() {
        return Err(Error::Corpus(format!("no clip directories under {lq_clips:?}")));
    }
    let clips: Vec<VideoSequence> = clip_dirs
        .iter()
        .map(|d| VideoSequence::read_dir(d))
        .collect::<Result<_>>()?;
    let mut models = load_or_init_models(&cfg.train, Some(init_from))?;
    run_stage3(&cfg.train, &clips, &hq, &mut models, out_dir)?;
    let final_dir = out_dir.join("final");
    models.save_all(&final_dir)?;
    models.write_hash_manifest(&out_dir.join("artifact_hashes.tsv"))?;
    println!("stage-3 training done; checkpoints in {}", final_dir.display());
    Ok(())
}

/// `enhance`: single-image enhancement through the full-estimation path.
pub fn enhance_cmd(cfg: &RunConfig, input: &Path, output: &Path, weights: Option<&Path>) -> Result<()> {
    let models = load_or_init_models(&cfg.train, weights)?;
    let image = ImageTensor::read_png(input)?;
    let generator = Generator { encoder: &models.encoder, enhancer: &models.enhancer };
    let enc_ctx = Ctx::new(&models.enc_ps);
    let enh_ctx = Ctx::new(&models.enh_ps);
    let x = Tensor::constant(image.to_nchw());
    let (y, _) = generator.forward(&enc_ctx, &enh_ctx, &x)?;
    let out = ImageTensor::from_nchw(y.value())?;
    out.write_png(output)?;
    println!(
        "enhanced {} ({}x{}) -> {} ({}x{})",
        input.display(),
        image.width(),
        image.height(),
        output.display(),
        out.width(),
        out.height()
    );
    Ok(())
}

/// `enhance-video`: stream a frame directory through the scheduler.
pub fn enhance_video_cmd(
    cfg: &RunConfig,
    input: &Path,
    output: &Path,
    weights: Option<&Path>,
    delta_t: Option<usize>,
) -> Result<()> {
    let models = load_or_init_models(&cfg.train, weights)?;
    let video = VideoSequence::read_dir(input)?;
    let mut scheduler = cfg.scheduler;
    if let Some(dt) = delta_t {
        scheduler.delta_t = dt;
    }
    let records = enhance_video(&video, &video_view(&models), &scheduler)?;
    let out_frames: Vec<ImageTensor> = records.iter().map(|r| r.output.clone()).collect();
    VideoSequence::new(out_frames, video.frame_rate())?.write_dir(output)?;
    write_frame_csv(&records, &output.join("frames.csv"))?;
    let key = records.iter().filter(|r| r.source == lucid_core::enhancer::ReprSource::Dam).count();
    println!(
        "enhanced {} frames ({} key, {} propagated) -> {}",
        records.len(),
        key,
        records.len() - key,
        output.display()
    );
    Ok(())
}

fn pngs_in(path: &Path) -> Result<Vec<PathBuf>> {
    if path.is_file() {
        return Ok(vec![path.to_path_buf()]);
    }
    let mut v: Vec<PathBuf> = std::fs::read_dir(path)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == "png"))
        .collect();
    v.sort();
    if v.is_empty() {
        return Err(Error::Corpus(format!("no .png files at {path:?}")));
    }
    Ok(v)
}

/// `eval`: metric report over enhanced images, full-reference when a
/// reference is given, no-reference always.
pub fn eval_cmd(out_dir: &Path, enhanced: &Path, reference: Option<&Path>) -> Result<()> {
    let enhanced_paths = pngs_in(enhanced)?;
    let reference_paths = reference.map(pngs_in).transpose()?;
    if let Some(refs) = &reference_paths {
        if refs.len() != enhanced_paths.len() {
            return Err(Error::Corpus(format!(
                "{} enhanced images but {} references",
                enhanced_paths.len(),
                refs.len()
            )));
        }
    }
    let niqe_model = NiqeModel::bundled()?;
    let mut report = MetricReport::default();
    for (i, path) in enhanced_paths.iter().enumerate() {
        let img = ImageTensor::read_png(path)?;
        let (psnr, ssim) = match &reference_paths {
            Some(refs) => {
                let r = ImageTensor::read_png(&refs[i])?;
                (Some(metrics::psnr(&img, &r)?), Some(metrics::ssim(&img, &r)?))
            }
            None => (None, None),
        };
        let niqe = if img.height().min(img.width()) >= 96 {
            Some(metrics::niqe(&img, &niqe_model)?)
        } else {
            None
        };
        let piqe = if img.height().min(img.width()) >= 16 {
            Some(metrics::piqe(&img)?)
        } else {
            None
        };
        report.rows.push(MetricRow {
            name: path.file_name().unwrap().to_string_lossy().into_owned(),
            psnr,
            ssim,
            niqe,
            piqe,
        });
    }
    std::fs::create_dir_all(out_dir)?;
    std::fs::write(out_dir.join("metrics.csv"), report.to_csv())?;
    print!("{}", report.summary());
    println!("per-image rows in {}", out_dir.join("metrics.csv").display());
    Ok(())
}

/// `viz-repr`: synthesize kind × level degradations of train images,
/// encode them, project to 2-D and export coordinates.
pub fn viz_repr_cmd(
    cfg: &RunConfig,
    out_dir: &Path,
    corpus: &Path,
    weights: Option<&Path>,
    per_cell: usize,
    patch: usize,
) -> Result<()> {
    if patch % 4 != 0 {
        return Err(Error::Config(format!("patch {patch} must be divisible by 4")));
    }
    let manifest = CorpusManifest::build(corpus, cfg.data.ratios, cfg.seed)?;
    let images = split_images(&manifest, Split::Train)?;
    if images.is_empty() {
        return Err(Error::Corpus("no training images".into()));
    }
    let models = load_or_init_models(&cfg.train, weights)?;
    let mut vectors = Vec::new();
    let mut kind_labels = Vec::new();
    let mut level_labels = Vec::new();
    let mut rng = rng_for(cfg.seed, "viz-repr");
    for kind in &cfg.data.kinds {
        for level in &cfg.data.levels {
            for j in 0..per_cell {
                let img = &images[rng.random_range(0..images.len())];
                if img.height() < patch || img.width() < patch {
                    return Err(Error::Corpus(format!(
                        "image smaller than patch {patch}; choose a smaller --patch"
                    )));
                }
                let i0 = rng.random_range(0..=img.height() - patch);
                let j0 = rng.random_range(0..=img.width() - patch);
                let crop = ImageTensor::new(
                    img.data().slice(ndarray::s![i0..i0 + patch, j0..j0 + patch, ..]).to_owned(),
                )?;
                let seed = derive_seed(cfg.seed, &format!("viz/{}/{}/{j}", kind.name(), level.name()));
                let params = degrade::sample_parameters(*kind, *level, patch, patch, 1, seed);
                let degraded = degrade::apply(&crop, &params, seed)?;
                let repr = models.encoder.encode(&models.enc_ps, &degraded)?;
                vectors.push(repr.d_vec);
                kind_labels.push(kind.name().to_string());
                level_labels.push(level.name().to_string());
            }
        }
    }
    let n = vectors.len();
    let d = vectors[0].len();
    let mut mat = Array2::zeros((n, d));
    for (i, v) in vectors.iter().enumerate() {
        for k in 0..d {
            mat[[i, k]] = v[k];
        }
    }
    let projection = metrics::pca_project(&mat, &kind_labels)?;
    std::fs::create_dir_all(out_dir)?;
    let mut csv = String::from("x,y,kind,level\n");
    for i in 0..n {
        csv.push_str(&format!(
            "{:.8},{:.8},{},{}\n",
            projection.coords[[i, 0]],
            projection.coords[[i, 1]],
            kind_labels[i],
            level_labels[i]
        ));
    }
    std::fs::write(out_dir.join("repr_coords.csv"), csv)?;
    let sil = metrics::silhouette(&projection.coords, &kind_labels)?;
    println!(
        "projected {n} representations; explained variance {:.3}/{:.3}; silhouette by kind {sil:.4}",
        projection.explained[0], projection.explained[1]
    );
    println!("coordinates in {}", out_dir.join("repr_coords.csv").display());
    Ok(())
}

/// `budget`: parameter and FLOPs table for every component.
pub fn budget_cmd(cfg: &RunConfig, height: usize, width: usize) -> Result<()> {
    let models = Models::build(&cfg.train)?;
    let enc_params = models.encoder.trunk_param_count();
    let enc_flops = models.encoder.trunk_flops(height, width);
    let (enh_params, enh_flops) = models.enhancer.count_params_flops(height, width);
    println!("input: {height}x{width} low-quality frames");
    println!("{:<44} {:>10} {:>10}", "component", "params(M)", "GFLOPs");
    let row = |name: &str, p: usize, f: u64| {
        println!("{:<44} {:>10.3} {:>10.3}", name, p as f64 / 1e6, f as f64 / 1e9);
    };
    row("DAM (degradation encoder)", enc_params, enc_flops);
    row("DGEM (guided enhancer)", enh_params, enh_flops);
    for r in models.enhancer.budget(height, width) {
        row(&format!("  {}", r.name), r.params, r.flops);
    }
    let prop_params = models.propagator.param_count();
    let prop_flops = models.propagator.flops(models.propagator.cfg.context);
    row("DRPM (temporal propagator)", prop_params, prop_flops);
    println!();
    println!("average FLOPs/frame by propagation interval:");
    for dt in [1usize, 3, 5, 10, 15, 20, 30] {
        let f = estimate_avg_flops(dt, enc_flops as f64, enh_flops as f64, prop_flops as f64);
        println!("  delta_t {dt:>3}: {:>8.3} GFLOPs", f / 1e9);
    }
    Ok(())
}
