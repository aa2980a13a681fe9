//! Three-stage training orchestration with seeded determinism and
//! resumable checkpoints.
//!
//! Stage 1 pretrains the degradation encoder contrastively on synthetic
//! pairs. Stage 2 trains the enhancement generator and the parameter
//! regression heads against three discriminators with cycle consistency on
//! unpaired stills. Stage 3 freezes the single-frame model (by default)
//! and trains the temporal propagator on clips, with the encoder supplying
//! representations only on key frames.
//!
//! Every random draw derives from `(seed, stage, epoch, step)`, so resuming
//! from an epoch checkpoint replays the identical step sequence.

use std::path::{Path, PathBuf};

use ndarray::{Array1, ArrayD, IxDyn};
use rand::seq::SliceRandom;
use rand::Rng;

use crate::cycle::{
    cycle_terms, degrade_back, discriminator_loss, generator_adv_loss, highpass_t, CdSpace,
    Generator, LossWeights, PatchDiscriminator, RegressionHeads,
};
use crate::degrade::{DegradationKind, DegradationLevel};
use crate::encoder::{self, DegradationEncoder, EncoderConfig, MomentumQueue, PretrainConfig};
use crate::enhancer::{EnhancerConfig, GuidedEnhancer, ReprSource};
use crate::error::{Error, Result};
use crate::imaging::{ImageTensor, VideoSequence};
use crate::nn::{Adam, Ctx, ParamSet};
use crate::propagation::{PropagationConfig, PropagationState, ReprPropagator};
use crate::rng::{derive_seed, rng_for};
use crate::tensor::{ops, Tensor};

/// Everything the three stages need to know.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    /// Contrastive pretraining epochs (N_d). Zero skips the stage with a
    /// warning (the "no pretraining" ablation).
    pub epochs_pretrain: usize,
    /// Single-frame adversarial epochs (N_s).
    pub epochs_single: usize,
    /// Video / propagation epochs (N − N_d − N_s).
    pub epochs_video: usize,
    pub batch_size: usize,
    pub steps_per_epoch: usize,
    pub clips_per_epoch: usize,
    pub clip_len: usize,
    pub lr_encoder: f64,
    pub lr_generator: f64,
    pub lr_discriminator: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub delta_t: usize,
    pub seed: u64,
    pub weights: LossWeights,
    pub cd_space: CdSpace,
    /// Which physical model the reverse generator applies.
    pub reverse_kind: DegradationKind,
    pub pretrain_crop: usize,
    pub tau: f64,
    pub queue_size: usize,
    pub key_momentum: f64,
    pub freeze_encoder_stage2: bool,
    /// Freeze the parameter-regression heads in stage 2 (ablation knob;
    /// keeps the reverse generator at its initialization).
    pub freeze_heads_stage2: bool,
    pub freeze_single_frame_stage3: bool,
    /// Weight of the stage-3 distillation term pulling propagated vectors
    /// toward encoder-derived ones (0 disables).
    pub distill_weight: f64,
    pub disc_widths: Vec<usize>,
    pub encoder_cfg: EncoderConfig,
    pub enhancer_cfg: EnhancerConfig,
    pub propagation_cfg: PropagationConfig,
    pub pretrain_kinds: Vec<DegradationKind>,
    pub pretrain_levels: Vec<DegradationLevel>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs_pretrain: 20,
            epochs_single: 60,
            epochs_video: 20,
            batch_size: 4,
            steps_per_epoch: 16,
            clips_per_epoch: 2,
            clip_len: 120,
            lr_encoder: 5e-5,
            lr_generator: 5e-5,
            lr_discriminator: 2e-4,
            beta1: 0.9,
            beta2: 0.999,
            delta_t: 15,
            seed: 0,
            weights: LossWeights::default(),
            cd_space: CdSpace::Vec,
            reverse_kind: DegradationKind::SesComposite,
            pretrain_crop: 160,
            tau: 0.07,
            queue_size: 1024,
            key_momentum: 0.999,
            freeze_encoder_stage2: false,
            freeze_heads_stage2: false,
            freeze_single_frame_stage3: true,
            distill_weight: 0.1,
            disc_widths: PatchDiscriminator::default_widths(),
            encoder_cfg: EncoderConfig::default(),
            enhancer_cfg: EnhancerConfig::default(),
            propagation_cfg: PropagationConfig::default(),
            pretrain_kinds: vec![
                DegradationKind::Noise,
                DegradationKind::MotionBlur,
                DegradationKind::LowLight,
                DegradationKind::Smoke,
            ],
            pretrain_levels: DegradationLevel::ALL.to_vec(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lr_encoder", self.lr_encoder),
            ("lr_generator", self.lr_generator),
            ("lr_discriminator", self.lr_discriminator),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        if self.batch_size == 0 || self.delta_t == 0 {
            return Err(Error::Config("batch_size and delta_t must be >= 1".into()));
        }
        self.weights.validate()?;
        self.enhancer_cfg.validate()?;
        if self.propagation_cfg.d_c_dim != self.enhancer_cfg.embed_dim {
            return Err(Error::Config(format!(
                "propagation d_c dim {} must equal enhancer embed dim {}",
                self.propagation_cfg.d_c_dim, self.enhancer_cfg.embed_dim
            )));
        }
        if self.encoder_cfg.repr_channels() != self.enhancer_cfg.repr_channels {
            return Err(Error::Config(format!(
                "encoder repr channels {} must equal enhancer repr channels {}",
                self.encoder_cfg.repr_channels(),
                self.enhancer_cfg.repr_channels
            )));
        }
        Ok(())
    }

    fn pretrain_cfg(&self) -> PretrainConfig {
        PretrainConfig {
            epochs: self.epochs_pretrain,
            batch_size: self.batch_size,
            crop: self.pretrain_crop,
            lr: self.lr_encoder,
            beta1: self.beta1,
            beta2: self.beta2,
            tau: self.tau,
            queue_size: self.queue_size,
            momentum: self.key_momentum,
            kinds: self.pretrain_kinds.clone(),
            levels: self.pretrain_levels.clone(),
            seed: self.seed,
        }
    }
}

/// All trainable components with their parameter sets.
pub struct Models {
    pub enc_ps: ParamSet,
    pub encoder: DegradationEncoder,
    pub enh_ps: ParamSet,
    pub enhancer: GuidedEnhancer,
    pub heads_ps: ParamSet,
    pub heads: RegressionHeads,
    pub d_h_ps: ParamSet,
    pub d_h: PatchDiscriminator,
    pub d_l_ps: ParamSet,
    pub d_l: PatchDiscriminator,
    pub d_hf_ps: ParamSet,
    pub d_hf: PatchDiscriminator,
    pub prop_ps: ParamSet,
    pub propagator: ReprPropagator,
}

const CKPT_NAMES: [&str; 7] = [
    "encoder.ckpt",
    "enhancer.ckpt",
    "heads.ckpt",
    "disc_h.ckpt",
    "disc_l.ckpt",
    "disc_hf.ckpt",
    "propagator.ckpt",
];

impl Models {
    pub fn build(cfg: &TrainConfig) -> Result<Models> {
        cfg.validate()?;
        let mut enc_ps = ParamSet::new("encoder");
        let mut rng = rng_for(cfg.seed, "init/encoder");
        let encoder = DegradationEncoder::build(&mut enc_ps, &mut rng, &cfg.encoder_cfg);
        let mut enh_ps = ParamSet::new("enhancer");
        let mut rng = rng_for(cfg.seed, "init/enhancer");
        let enhancer = GuidedEnhancer::build(&mut enh_ps, &mut rng, &cfg.enhancer_cfg)?;
        let mut heads_ps = ParamSet::new("heads");
        let mut rng = rng_for(cfg.seed, "init/heads");
        let heads = RegressionHeads::build(&mut heads_ps, &mut rng, cfg.enhancer_cfg.embed_dim, cfg.reverse_kind);
        let mut d_h_ps = ParamSet::new("disc_h");
        let mut rng = rng_for(cfg.seed, "init/disc_h");
        let d_h = PatchDiscriminator::build(&mut d_h_ps, &mut rng, "d_h", &cfg.disc_widths);
        let mut d_l_ps = ParamSet::new("disc_l");
        let mut rng = rng_for(cfg.seed, "init/disc_l");
        let d_l = PatchDiscriminator::build(&mut d_l_ps, &mut rng, "d_l", &cfg.disc_widths);
        let mut d_hf_ps = ParamSet::new("disc_hf");
        let mut rng = rng_for(cfg.seed, "init/disc_hf");
        let d_hf = PatchDiscriminator::build(&mut d_hf_ps, &mut rng, "d_hf", &cfg.disc_widths);
        let mut prop_ps = ParamSet::new("propagator");
        let mut rng = rng_for(cfg.seed, "init/propagator");
        let propagator = ReprPropagator::build(&mut prop_ps, &mut rng, &cfg.propagation_cfg);
        Ok(Models {
            enc_ps,
            encoder,
            enh_ps,
            enhancer,
            heads_ps,
            heads,
            d_h_ps,
            d_h,
            d_l_ps,
            d_l,
            d_hf_ps,
            d_hf,
            prop_ps,
            propagator,
        })
    }

    pub fn save_all(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        self.enc_ps.save(&dir.join("encoder.ckpt"))?;
        self.enh_ps.save(&dir.join("enhancer.ckpt"))?;
        self.heads_ps.save(&dir.join("heads.ckpt"))?;
        self.d_h_ps.save(&dir.join("disc_h.ckpt"))?;
        self.d_l_ps.save(&dir.join("disc_l.ckpt"))?;
        self.d_hf_ps.save(&dir.join("disc_hf.ckpt"))?;
        self.prop_ps.save(&dir.join("propagator.ckpt"))?;
        Ok(())
    }

    pub fn load_all(&mut self, dir: &Path) -> Result<()> {
        self.enc_ps.load_matching(&dir.join("encoder.ckpt"))?;
        self.enh_ps.load_matching(&dir.join("enhancer.ckpt"))?;
        self.heads_ps.load_matching(&dir.join("heads.ckpt"))?;
        self.d_h_ps.load_matching(&dir.join("disc_h.ckpt"))?;
        self.d_l_ps.load_matching(&dir.join("disc_l.ckpt"))?;
        self.d_hf_ps.load_matching(&dir.join("disc_hf.ckpt"))?;
        self.prop_ps.load_matching(&dir.join("propagator.ckpt"))?;
        Ok(())
    }

    fn checkpoint_complete(dir: &Path) -> bool {
        CKPT_NAMES.iter().all(|n| dir.join(n).is_file())
    }

    /// Write a manifest of artifact hashes.
    pub fn write_hash_manifest(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        for (name, ps) in [
            ("encoder", &self.enc_ps),
            ("enhancer", &self.enh_ps),
            ("heads", &self.heads_ps),
            ("disc_h", &self.d_h_ps),
            ("disc_l", &self.d_l_ps),
            ("disc_hf", &self.d_hf_ps),
            ("propagator", &self.prop_ps),
        ] {
            out.push_str(&format!("{name}\t{}\n", ps.sha256_hex()));
        }
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir)?;
        }
        std::fs::write(path, out)?;
        Ok(())
    }
}

fn epoch_dir(run_dir: &Path, stage: &str, epoch: usize) -> PathBuf {
    run_dir.join(stage).join(format!("epoch_{epoch:03}"))
}

fn last_complete_epoch(run_dir: &Path, stage: &str, total: usize) -> Option<usize> {
    (0..total)
        .rev()
        .find(|&e| Models::checkpoint_complete(&epoch_dir(run_dir, stage, e)))
}

fn write_log(run_dir: &Path, stage: &str, epoch: usize, header: &str, rows: &[String]) -> Result<()> {
    let dir = run_dir.join(stage);
    std::fs::create_dir_all(&dir)?;
    let mut text = String::from(header);
    text.push('\n');
    for r in rows {
        text.push_str(r);
        text.push('\n');
    }
    std::fs::write(dir.join(format!("log_epoch_{epoch:03}.csv")), text)?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Stage 1
// ---------------------------------------------------------------------------

/// Contrastive pretraining of the degradation encoder (Stage 1).
///
/// With `epochs_pretrain == 0` this is a no-op that leaves the randomly
/// initialized weights in place (the "without pretraining" ablation) and
/// prints a warning.
pub fn run_stage1(cfg: &TrainConfig, corpus: &[ImageTensor], models: &mut Models, run_dir: &Path) -> Result<()> {
    cfg.validate()?;
    if cfg.epochs_pretrain == 0 {
        eprintln!("warning: pretraining disabled (0 epochs); encoder keeps its random initialization");
        return Ok(());
    }
    let pcfg = cfg.pretrain_cfg();
    let mut key_ps = models.enc_ps.clone_set();
    let mut queue = MomentumQueue::new(pcfg.queue_size, models.encoder.cfg.proj_dim);

    let start = match last_complete_epoch(run_dir, "stage1", cfg.epochs_pretrain) {
        Some(done) => {
            let dir = epoch_dir(run_dir, "stage1", done);
            models.enc_ps.load_matching(&dir.join("encoder.ckpt"))?;
            key_ps.load_matching(&dir.join("encoder_key.ckpt"))?;
            queue = MomentumQueue::load(&dir.join("queue.bin"))?;
            done + 1
        }
        None => 0,
    };

    for epoch in start..cfg.epochs_pretrain {
        let mut rows = Vec::new();
        encoder::pretrain_epoch(
            corpus,
            &pcfg,
            epoch,
            &mut models.enc_ps,
            &mut key_ps,
            &mut queue,
            &models.encoder,
            |s| rows.push(format!("{},{},{:.10}", s.epoch, s.step, s.loss)),
        )?;
        write_log(run_dir, "stage1", epoch, "epoch,step,loss", &rows)?;
        let dir = epoch_dir(run_dir, "stage1", epoch);
        models.save_all(&dir)?;
        key_ps.save(&dir.join("encoder_key.ckpt"))?;
        queue.save(&dir.join("queue.bin"))?;
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Stage 2
// ---------------------------------------------------------------------------

/// Per-step scalar record of the adversarial stage.
#[derive(Debug, Clone)]
pub struct Stage2Step {
    pub epoch: usize,
    pub step: usize,
    pub g_adv_h: f64,
    pub g_adv_l: f64,
    pub g_adv_hf: f64,
    pub l_cl: f64,
    pub l_ch: f64,
    pub l_cd: f64,
    pub d_h: f64,
    pub d_l: f64,
    pub d_hf: f64,
}

impl Stage2Step {
    const HEADER: &'static str = "epoch,step,g_adv_h,g_adv_l,g_adv_hf,l_cl,l_ch,l_cd,d_h,d_l,d_hf";

    fn csv_row(&self) -> String {
        format!(
            "{},{},{:.10},{:.10},{:.10},{:.10},{:.10},{:.10},{:.10},{:.10},{:.10}",
            self.epoch,
            self.step,
            self.g_adv_h,
            self.g_adv_l,
            self.g_adv_hf,
            self.l_cl,
            self.l_ch,
            self.l_cd,
            self.d_h,
            self.d_l,
            self.d_hf
        )
    }

    fn all_finite(&self) -> bool {
        [
            self.g_adv_h, self.g_adv_l, self.g_adv_hf, self.l_cl, self.l_ch, self.l_cd, self.d_h,
            self.d_l, self.d_hf,
        ]
        .iter()
        .all(|v| v.is_finite())
    }
}

fn dump_batch(run_dir: &Path, tag: &str, xs: &[&ImageTensor]) -> Result<PathBuf> {
    let dir = run_dir.join("nan_dump").join(tag);
    std::fs::create_dir_all(&dir)?;
    for (i, x) in xs.iter().enumerate() {
        x.write_png(&dir.join(format!("item_{i:02}.png")))?;
    }
    Ok(dir)
}

fn batch_tensor(images: &[&ImageTensor]) -> Tensor {
    let owned: Vec<ImageTensor> = images.iter().map(|&i| i.clone()).collect();
    Tensor::constant(encoder::stack_images(&owned))
}

/// One combined generator + discriminator alternation on explicit batches.
///
/// Returns the logged scalars. Generator and discriminators own disjoint
/// parameter sets; each update leaves the other side bit-identical.
#[allow(clippy::too_many_arguments)]
pub fn stage2_step(
    cfg: &TrainConfig,
    models: &mut Models,
    x_h_batch: &[&ImageTensor],
    x_l_batch: &[&ImageTensor],
    epoch: usize,
    step: usize,
    adam_g: &Adam,
    adam_d: &Adam,
    train_generator: bool,
    train_discriminators: bool,
) -> Result<Stage2Step> {
    let scale = models.enhancer.cfg.scale;
    let x_h = batch_tensor(x_h_batch);
    let x_l = batch_tensor(x_l_batch);
    let step_seed = derive_seed(cfg.seed, &format!("stage2/e{epoch}/s{step}/noise"));

    // ---- generator pass --------------------------------------------------
    let enc_ctx = Ctx::new(&models.enc_ps);
    let enh_ctx = Ctx::new(&models.enh_ps);
    let heads_ctx = Ctx::new(&models.heads_ps);
    let dh_ctx = Ctx::new(&models.d_h_ps);
    let dl_ctx = Ctx::new(&models.d_l_ps);
    let dhf_ctx = Ctx::new(&models.d_hf_ps);

    let generator = Generator { encoder: &models.encoder, enhancer: &models.enhancer };
    let (x_enh, d_c_l) = generator.forward(&enc_ctx, &enh_ctx, &x_l)?;
    let d_fake_h = models.d_h.forward(&dh_ctx, &x_enh)?;
    let g_adv_h = generator_adv_loss(&d_fake_h)?;
    let hf_fake = models.d_hf.forward(&dhf_ctx, &highpass_t(&x_enh, 1.0))?;
    let g_adv_hf = generator_adv_loss(&hf_fake)?;

    // G_L(x_h) driven by the d_c regressed from the paired x_l batch item
    let (x_deg, _) = degrade_back(&models.heads, &heads_ctx, &x_h, &d_c_l, scale, step_seed)?;
    let d_fake_l = models.d_l.forward(&dl_ctx, &x_deg)?;
    let g_adv_l = generator_adv_loss(&d_fake_l)?;

    let (x_rec_l, _) = degrade_back(
        &models.heads,
        &heads_ctx,
        &x_enh,
        &d_c_l,
        scale,
        derive_seed(step_seed, "rec"),
    )?;
    let (x_rec_h, _) = generator.forward(&enc_ctx, &enh_ctx, &x_deg)?;
    let (repr_deg, repr_l) = match cfg.cd_space {
        CdSpace::Vec => (
            generator.repr_vec(&enc_ctx, &x_deg)?,
            generator.repr_vec(&enc_ctx, &x_l)?,
        ),
        CdSpace::Map => (
            generator.repr_map(&enc_ctx, &x_deg)?,
            generator.repr_map(&enc_ctx, &x_l)?,
        ),
    };
    let cyc = cycle_terms(&x_l, &x_h, &x_rec_l, &x_rec_h, &repr_deg, &repr_l, cfg.weights.cd);
    let w = &cfg.weights;
    let g_loss = ops::add(
        &ops::add(
            &ops::mul_scalar(&ops::add(&g_adv_h, &g_adv_l), w.adv),
            &ops::mul_scalar(&g_adv_hf, w.hf),
        ),
        &ops::mul_scalar(&cyc.total, w.cyc),
    );

    let record_g = (
        g_adv_h.scalar(),
        g_adv_l.scalar(),
        g_adv_hf.scalar(),
        cyc.l_cl.scalar(),
        cyc.l_ch.scalar(),
        cyc.l_cd.scalar(),
    );

    if train_generator {
        let mut grads = g_loss.backward();
        if !cfg.freeze_encoder_stage2 {
            let used = enc_ctx.used();
            adam_g.step(&mut models.enc_ps, &used, &mut grads);
        }
        let used = enh_ctx.used();
        adam_g.step(&mut models.enh_ps, &used, &mut grads);
        if !cfg.freeze_heads_stage2 {
            let used = heads_ctx.used();
            adam_g.step(&mut models.heads_ps, &used, &mut grads);
        }
    }

    // ---- discriminator pass ----------------------------------------------
    let x_enh_detached = x_enh.detach();
    let x_deg_detached = x_deg.detach();
    let dh_ctx = Ctx::new(&models.d_h_ps);
    let dl_ctx = Ctx::new(&models.d_l_ps);
    let dhf_ctx = Ctx::new(&models.d_hf_ps);
    let d_h_loss = discriminator_loss(
        &models.d_h.forward(&dh_ctx, &x_h)?,
        &models.d_h.forward(&dh_ctx, &x_enh_detached)?,
    )?;
    let d_l_loss = discriminator_loss(
        &models.d_l.forward(&dl_ctx, &x_l)?,
        &models.d_l.forward(&dl_ctx, &x_deg_detached)?,
    )?;
    let d_hf_loss = discriminator_loss(
        &models.d_hf.forward(&dhf_ctx, &highpass_t(&x_h, 1.0))?,
        &models.d_hf.forward(&dhf_ctx, &highpass_t(&x_enh_detached, 1.0))?,
    )?;
    let record_d = (d_h_loss.scalar(), d_l_loss.scalar(), d_hf_loss.scalar());

    if train_discriminators {
        let d_total = ops::add(&ops::add(&d_h_loss, &d_l_loss), &d_hf_loss);
        let mut grads = d_total.backward();
        let used = dh_ctx.used();
        adam_d.step(&mut models.d_h_ps, &used, &mut grads);
        let used = dl_ctx.used();
        adam_d.step(&mut models.d_l_ps, &used, &mut grads);
        let used = dhf_ctx.used();
        adam_d.step(&mut models.d_hf_ps, &used, &mut grads);
    }

    Ok(Stage2Step {
        epoch,
        step,
        g_adv_h: record_g.0,
        g_adv_l: record_g.1,
        g_adv_hf: record_g.2,
        l_cl: record_g.3,
        l_ch: record_g.4,
        l_cd: record_g.5,
        d_h: record_d.0,
        d_l: record_d.1,
        d_hf: record_d.2,
    })
}

/// Adversarial single-frame training (Stage 2) on unpaired image pools.
///
/// `hq_pool` are clean patches, `lq_pool` degraded ones (dimensions 1/s of
/// the clean patches). Batches draw from independent per-epoch shuffles.
pub fn run_stage2(
    cfg: &TrainConfig,
    hq_pool: &[ImageTensor],
    lq_pool: &[ImageTensor],
    models: &mut Models,
    run_dir: &Path,
) -> Result<Vec<Stage2Step>> {
    cfg.validate()?;
    if hq_pool.is_empty() || lq_pool.is_empty() {
        return Err(Error::Corpus("stage 2 needs non-empty HQ and LQ pools".into()));
    }
    let adam_g = Adam::new(cfg.lr_generator, cfg.beta1, cfg.beta2);
    let adam_d = Adam::new(cfg.lr_discriminator, cfg.beta1, cfg.beta2);

    let start = match last_complete_epoch(run_dir, "stage2", cfg.epochs_single) {
        Some(done) => {
            models.load_all(&epoch_dir(run_dir, "stage2", done))?;
            done + 1
        }
        None => 0,
    };

    let mut all = Vec::new();
    for epoch in start..cfg.epochs_single {
        let mut hq_order: Vec<usize> = (0..hq_pool.len()).collect();
        let mut lq_order: Vec<usize> = (0..lq_pool.len()).collect();
        hq_order.shuffle(&mut rng_for(cfg.seed, &format!("stage2/e{epoch}/hq")));
        lq_order.shuffle(&mut rng_for(cfg.seed, &format!("stage2/e{epoch}/lq")));
        let mut rows = Vec::new();
        for step in 0..cfg.steps_per_epoch {
            let pick = |order: &[usize], pool_len: usize, k: usize| -> usize {
                order[(step * cfg.batch_size + k) % pool_len]
            };
            let x_h_batch: Vec<&ImageTensor> = (0..cfg.batch_size)
                .map(|k| &hq_pool[pick(&hq_order, hq_pool.len(), k)])
                .collect();
            let x_l_batch: Vec<&ImageTensor> = (0..cfg.batch_size)
                .map(|k| &lq_pool[pick(&lq_order, lq_pool.len(), k)])
                .collect();
            let record = stage2_step(
                cfg, models, &x_h_batch, &x_l_batch, epoch, step, &adam_g, &adam_d, true, true,
            )?;
            if !record.all_finite() {
                let mut dump: Vec<&ImageTensor> = x_h_batch.clone();
                dump.extend(x_l_batch.iter());
                let where_ = dump_batch(run_dir, &format!("stage2_e{epoch}_s{step}"), &dump)?;
                return Err(Error::Numeric(format!(
                    "non-finite loss at stage 2 epoch {epoch} step {step}; offending batch dumped to {where_:?}"
                )));
            }
            rows.push(record.csv_row());
            all.push(record);
        }
        write_log(run_dir, "stage2", epoch, Stage2Step::HEADER, &rows)?;
        models.save_all(&epoch_dir(run_dir, "stage2", epoch))?;
    }
    Ok(all)
}

// ---------------------------------------------------------------------------
// Stage 3
// ---------------------------------------------------------------------------

/// Per-frame record of the propagation stage.
#[derive(Debug, Clone)]
pub struct Stage3Frame {
    pub epoch: usize,
    pub clip: usize,
    pub frame: usize,
    pub source: ReprSource,
    pub loss: f64,
}

/// Propagation training (Stage 3): key frames refresh the state through
/// the (frozen) encoder; on propagated frames the predicted vector drives
/// enhancement, the cycle losses, and the optional distillation pull
/// toward the encoder-derived vector. Discriminators keep their
/// adversarial updates.
pub fn run_stage3(
    cfg: &TrainConfig,
    clips: &[VideoSequence],
    hq_pool: &[ImageTensor],
    models: &mut Models,
    run_dir: &Path,
) -> Result<Vec<Stage3Frame>> {
    cfg.validate()?;
    if clips.is_empty() {
        return Err(Error::Corpus("stage 3 needs at least one clip".into()));
    }
    if hq_pool.is_empty() {
        return Err(Error::Corpus("stage 3 needs a HQ pool for the backward cycle".into()));
    }
    if cfg.delta_t == 1 {
        eprintln!("warning: delta_t = 1 leaves no propagated frames; the propagator receives no training");
    }
    let adam_g = Adam::new(cfg.lr_generator, cfg.beta1, cfg.beta2);
    let adam_d = Adam::new(cfg.lr_discriminator, cfg.beta1, cfg.beta2);
    let scale = models.enhancer.cfg.scale;
    let d_dim = models.enhancer.cfg.embed_dim;

    let start = match last_complete_epoch(run_dir, "stage3", cfg.epochs_video) {
        Some(done) => {
            models.load_all(&epoch_dir(run_dir, "stage3", done))?;
            done + 1
        }
        None => 0,
    };

    let mut all = Vec::new();
    for epoch in start..cfg.epochs_video {
        let mut rows = Vec::new();
        let mut clip_rng = rng_for(cfg.seed, &format!("stage3/e{epoch}/clips"));
        for clip_idx in 0..cfg.clips_per_epoch {
            let clip = &clips[clip_rng.random_range(0..clips.len())];
            let frames = clip.frames().len().min(cfg.clip_len);
            let mut state = PropagationState::new(cfg.propagation_cfg.context);
            let mut hq_rng = rng_for(cfg.seed, &format!("stage3/e{epoch}/c{clip_idx}/hq"));
            for t in 0..frames {
                let frame = &clip.frames()[t];
                let frame_t = Tensor::constant(frame.to_nchw());
                if t % cfg.delta_t == 0 {
                    // key frame: full estimation, no propagator gradient
                    let d = models.encoder.encode(&models.enc_ps, frame)?;
                    let comp = models.enhancer.compress(&models.enh_ps, &d.d_map);
                    state.update(t, comp.d_c, ReprSource::Dam)?;
                    rows.push(format!("{epoch},{clip_idx},{t},DAM,"));
                    all.push(Stage3Frame { epoch, clip: clip_idx, frame: t, source: ReprSource::Dam, loss: 0.0 });
                    continue;
                }
                // propagated frame
                let len = state.len();
                let mut hist = ArrayD::zeros(IxDyn(&[1, len, d_dim]));
                for (i, e) in state.entries().enumerate() {
                    for k in 0..d_dim {
                        hist[[0, i, k]] = e.d_c[k];
                    }
                }
                let prop_ctx = Ctx::new(&models.prop_ps);
                let d_c_pred = models.propagator.propagate_t(&prop_ctx, &Tensor::constant(hist))?;

                let enc_ctx = Ctx::new(&models.enc_ps);
                let enh_ctx = Ctx::new(&models.enh_ps);
                let heads_ctx = Ctx::new(&models.heads_ps);
                let dh_ctx = Ctx::new(&models.d_h_ps);
                let dl_ctx = Ctx::new(&models.d_l_ps);
                let dhf_ctx = Ctx::new(&models.d_hf_ps);
                let generator = Generator { encoder: &models.encoder, enhancer: &models.enhancer };

                let x_enh = generator.enhance_with_gains(&enh_ctx, &frame_t, &d_c_pred)?;
                let g_adv_h = generator_adv_loss(&models.d_h.forward(&dh_ctx, &x_enh)?)?;
                let g_adv_hf =
                    generator_adv_loss(&models.d_hf.forward(&dhf_ctx, &highpass_t(&x_enh, 1.0))?)?;
                let hq = &hq_pool[hq_rng.random_range(0..hq_pool.len())];
                let x_h = Tensor::constant(hq.to_nchw());
                let seed_t = derive_seed(cfg.seed, &format!("stage3/e{epoch}/c{clip_idx}/t{t}"));
                let (x_deg, _) = degrade_back(&models.heads, &heads_ctx, &x_h, &d_c_pred, scale, seed_t)?;
                let g_adv_l = generator_adv_loss(&models.d_l.forward(&dl_ctx, &x_deg)?)?;
                let (x_rec_l, _) = degrade_back(
                    &models.heads,
                    &heads_ctx,
                    &x_enh,
                    &d_c_pred,
                    scale,
                    derive_seed(seed_t, "rec"),
                )?;
                let (x_rec_h, _) = generator.forward(&enc_ctx, &enh_ctx, &x_deg)?;
                let (repr_deg, repr_l) = match cfg.cd_space {
                    CdSpace::Vec => (
                        generator.repr_vec(&enc_ctx, &x_deg)?,
                        generator.repr_vec(&enc_ctx, &frame_t)?,
                    ),
                    CdSpace::Map => (
                        generator.repr_map(&enc_ctx, &x_deg)?,
                        generator.repr_map(&enc_ctx, &frame_t)?,
                    ),
                };
                let cyc = cycle_terms(&frame_t, &x_h, &x_rec_l, &x_rec_h, &repr_deg, &repr_l, cfg.weights.cd);
                let w = &cfg.weights;
                let mut g_loss = ops::add(
                    &ops::add(
                        &ops::mul_scalar(&ops::add(&g_adv_h, &g_adv_l), w.adv),
                        &ops::mul_scalar(&g_adv_hf, w.hf),
                    ),
                    &ops::mul_scalar(&cyc.total, w.cyc),
                );
                if cfg.distill_weight > 0.0 {
                    // pull the propagated vector toward the encoder-derived one
                    let d = models.encoder.encode(&models.enc_ps, frame)?;
                    let comp = models.enhancer.compress(&models.enh_ps, &d.d_map);
                    let target = Tensor::constant(
                        Array1::from_iter(comp.d_c.iter().cloned())
                            .into_shape_with_order(IxDyn(&[1, d_dim]))
                            .expect("vector"),
                    );
                    let distill = ops::mse_loss(&d_c_pred, &target);
                    g_loss = ops::add(&g_loss, &ops::mul_scalar(&distill, cfg.distill_weight));
                }
                let loss_value = g_loss.scalar();
                if !loss_value.is_finite() {
                    let where_ = dump_batch(run_dir, &format!("stage3_e{epoch}_c{clip_idx}_t{t}"), &[frame, hq])?;
                    return Err(Error::Numeric(format!(
                        "non-finite loss at stage 3 epoch {epoch} clip {clip_idx} frame {t}; batch dumped to {where_:?}"
                    )));
                }
                let mut grads = g_loss.backward();
                let used = prop_ctx.used();
                adam_g.step(&mut models.prop_ps, &used, &mut grads);
                if !cfg.freeze_single_frame_stage3 {
                    let used = enh_ctx.used();
                    adam_g.step(&mut models.enh_ps, &used, &mut grads);
                }

                // discriminators keep their adversarial updates
                let x_enh_detached = x_enh.detach();
                let x_deg_detached = x_deg.detach();
                let dh_ctx = Ctx::new(&models.d_h_ps);
                let dl_ctx = Ctx::new(&models.d_l_ps);
                let dhf_ctx = Ctx::new(&models.d_hf_ps);
                let d_h_loss = discriminator_loss(
                    &models.d_h.forward(&dh_ctx, &x_h)?,
                    &models.d_h.forward(&dh_ctx, &x_enh_detached)?,
                )?;
                let d_l_loss = discriminator_loss(
                    &models.d_l.forward(&dl_ctx, &frame_t)?,
                    &models.d_l.forward(&dl_ctx, &x_deg_detached)?,
                )?;
                let d_hf_loss = discriminator_loss(
                    &models.d_hf.forward(&dhf_ctx, &highpass_t(&x_h, 1.0))?,
                    &models.d_hf.forward(&dhf_ctx, &highpass_t(&x_enh_detached, 1.0))?,
                )?;
                let d_total = ops::add(&ops::add(&d_h_loss, &d_l_loss), &d_hf_loss);
                let mut grads = d_total.backward();
                let used = dh_ctx.used();
                adam_d.step(&mut models.d_h_ps, &used, &mut grads);
                let used = dl_ctx.used();
                adam_d.step(&mut models.d_l_ps, &used, &mut grads);
                let used = dhf_ctx.used();
                adam_d.step(&mut models.d_hf_ps, &used, &mut grads);

                // the state records the vector actually used for this frame
                let used_vec = Array1::from_iter(d_c_pred.value().iter().cloned());
                state.update(t, used_vec, ReprSource::Drpm)?;
                rows.push(format!("{epoch},{clip_idx},{t},DRPM,{loss_value:.10}"));
                all.push(Stage3Frame { epoch, clip: clip_idx, frame: t, source: ReprSource::Drpm, loss: loss_value });
            }
        }
        write_log(run_dir, "stage3", epoch, "epoch,clip,frame,source,loss", &rows)?;
        models.save_all(&epoch_dir(run_dir, "stage3", epoch))?;
    }
    Ok(all)
}
