//! The degradation-aware encoder: a residual trunk that maps an image to an
//! implicit degradation representation, pretrained with momentum-contrast
//! InfoNCE so that two crops of one degraded image embed together while
//! differently degraded images embed apart.

use ndarray::{Array1, Array2, ArrayD, Axis, IxDyn};
use rand::seq::SliceRandom;
use rand::Rng;

use crate::degrade::{self, DegradationKind, DegradationLevel};
use crate::error::{Error, Result};
use crate::imaging::ImageTensor;
use crate::nn::{Adam, Conv2d, Ctx, Linear, Pad, ParamSet};
use crate::rng::{derive_seed, rng_for};
use crate::tensor::{movement, ops, Tensor};

/// Sizing knobs for the encoder trunk.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct EncoderConfig {
    /// Stem width; stages run at `[w, 2w, 4w]` channels.
    pub base_width: usize,
    /// Residual blocks per stage (three stages).
    pub blocks_per_stage: usize,
    /// Projection dimension of the contrastive head.
    pub proj_dim: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        // Sized so the trunk lands near 4.33M parameters.
        EncoderConfig { base_width: 64, blocks_per_stage: 2, proj_dim: 256 }
    }
}

impl EncoderConfig {
    /// Channel count of the degradation feature map.
    pub fn repr_channels(&self) -> usize {
        self.base_width * 4
    }
}

struct ResBlock {
    conv1: Conv2d,
    conv2: Conv2d,
}

impl ResBlock {
    fn new(ps: &mut ParamSet, rng: &mut rand_chacha::ChaCha12Rng, name: &str, ch: usize) -> Self {
        ResBlock {
            conv1: Conv2d::new(ps, rng, &format!("{name}.conv1"), ch, ch, 3, 1, Pad::Reflect(1), true),
            conv2: Conv2d::new(ps, rng, &format!("{name}.conv2"), ch, ch, 3, 1, Pad::Reflect(1), true),
        }
    }

    fn forward(&self, ctx: &Ctx, x: &Tensor) -> Tensor {
        let y = ops::relu(&self.conv1.forward(ctx, x));
        let y = self.conv2.forward(ctx, &y);
        ops::add(x, &y)
    }

    fn param_count(&self) -> usize {
        self.conv1.param_count() + self.conv2.param_count()
    }

    fn flops(&self, h: usize, w: usize) -> u64 {
        self.conv1.flops(h, w) + self.conv2.flops(h, w)
    }
}

/// Encoder trunk plus contrastive projection head.
pub struct DegradationEncoder {
    pub cfg: EncoderConfig,
    stem: Conv2d,
    stage1: Vec<ResBlock>,
    down1: Conv2d,
    stage2: Vec<ResBlock>,
    down2: Conv2d,
    stage3: Vec<ResBlock>,
    fuse: Conv2d,
    head1: Linear,
    head2: Linear,
}

/// An implicit degradation estimate: the spatial feature map `d_map`
/// (`[C, H/4, W/4]`) and a unit-norm projection vector `d_vec`.
#[derive(Debug, Clone)]
pub struct DegradationRepresentation {
    pub d_map: ArrayD<f64>,
    pub d_vec: Array1<f64>,
}

impl DegradationEncoder {
    pub fn build(ps: &mut ParamSet, rng: &mut rand_chacha::ChaCha12Rng, cfg: &EncoderConfig) -> Self {
        let (w1, w2, w3) = (cfg.base_width, cfg.base_width * 2, cfg.base_width * 4);
        let stem = Conv2d::new(ps, rng, "stem", 3, w1, 3, 1, Pad::Reflect(1), true);
        let stage1 = (0..cfg.blocks_per_stage)
            .map(|i| ResBlock::new(ps, rng, &format!("stage1.{i}"), w1))
            .collect();
        let down1 = Conv2d::new(ps, rng, "down1", w1, w2, 3, 2, Pad::Reflect(1), true);
        let stage2 = (0..cfg.blocks_per_stage)
            .map(|i| ResBlock::new(ps, rng, &format!("stage2.{i}"), w2))
            .collect();
        let down2 = Conv2d::new(ps, rng, "down2", w2, w3, 3, 2, Pad::Reflect(1), true);
        let stage3 = (0..cfg.blocks_per_stage)
            .map(|i| ResBlock::new(ps, rng, &format!("stage3.{i}"), w3))
            .collect();
        let fuse = Conv2d::new(ps, rng, "fuse", w3, w3, 3, 1, Pad::Reflect(1), true);
        let head1 = Linear::new(ps, rng, "head.fc1", w3, cfg.proj_dim, true);
        let head2 = Linear::new(ps, rng, "head.fc2", cfg.proj_dim, cfg.proj_dim, true);
        DegradationEncoder { cfg: cfg.clone(), stem, stage1, down1, stage2, down2, stage3, fuse, head1, head2 }
    }

    /// Trunk forward: `[N, 3, H, W] -> [N, C, H/4, W/4]`.
    pub fn d_map(&self, ctx: &Ctx, x: &Tensor) -> Result<Tensor> {
        let (h, w) = (x.shape()[2], x.shape()[3]);
        if h % 4 != 0 || w % 4 != 0 {
            return Err(Error::shape(format!("encoder input {h}x{w} must be divisible by 4")));
        }
        let mut y = ops::relu(&self.stem.forward(ctx, x));
        for b in &self.stage1 {
            y = b.forward(ctx, &y);
        }
        y = ops::relu(&self.down1.forward(ctx, &y));
        for b in &self.stage2 {
            y = b.forward(ctx, &y);
        }
        y = ops::relu(&self.down2.forward(ctx, &y));
        for b in &self.stage3 {
            y = b.forward(ctx, &y);
        }
        Ok(ops::relu(&self.fuse.forward(ctx, &y)))
    }

    /// Unit-norm projection of the globally pooled map.
    pub fn d_vec(&self, ctx: &Ctx, d_map: &Tensor) -> Tensor {
        let pooled = ops::global_avg_pool(d_map);
        let z = ops::relu(&self.head1.forward(ctx, &pooled));
        let z = self.head2.forward(ctx, &z);
        ops::l2_normalize_last(&z, 1e-12)
    }

    /// Full forward returning `(d_map, d_vec)` tensors.
    pub fn forward(&self, ctx: &Ctx, x: &Tensor) -> Result<(Tensor, Tensor)> {
        let d_map = self.d_map(ctx, x)?;
        let d_vec = self.d_vec(ctx, &d_map);
        Ok((d_map, d_vec))
    }

    /// No-gradient convenience for a single image.
    pub fn encode(&self, ps: &ParamSet, image: &ImageTensor) -> Result<DegradationRepresentation> {
        let ctx = Ctx::new(ps);
        let x = Tensor::constant(image.to_nchw());
        let (d_map, d_vec) = self.forward(&ctx, &x)?;
        let map = d_map.value().index_axis(Axis(0), 0).to_owned();
        let vec = d_vec.value().index_axis(Axis(0), 0).to_owned();
        Ok(DegradationRepresentation {
            d_map: map.into_dyn(),
            d_vec: Array1::from_iter(vec.iter().cloned()),
        })
    }

    /// Exact parameter count of the trunk (the head is excluded: it exists
    /// only for contrastive pretraining and representation-cycle losses).
    pub fn trunk_param_count(&self) -> usize {
        let mut n = self.stem.param_count() + self.down1.param_count() + self.down2.param_count() + self.fuse.param_count();
        for b in self.stage1.iter().chain(&self.stage2).chain(&self.stage3) {
            n += b.param_count();
        }
        n
    }

    /// Analytic trunk FLOPs for an `h`×`w` input (2 per multiply-accumulate).
    pub fn trunk_flops(&self, h: usize, w: usize) -> u64 {
        let mut f = self.stem.flops(h, w);
        for b in &self.stage1 {
            f += b.flops(h, w);
        }
        let (h2, w2) = (h / 2, w / 2);
        f += self.down1.flops(h2, w2);
        for b in &self.stage2 {
            f += b.flops(h2, w2);
        }
        let (h4, w4) = (h / 4, w / 4);
        f += self.down2.flops(h4, w4);
        for b in &self.stage3 {
            f += b.flops(h4, w4);
        }
        f + self.fuse.flops(h4, w4)
    }
}

/// Fixed-capacity ring buffer of unit-norm negative keys.
#[derive(Debug, Clone)]
pub struct MomentumQueue {
    entries: Array2<f64>,
    len: usize,
    write_head: usize,
}

impl MomentumQueue {
    pub fn new(capacity: usize, dim: usize) -> Self {
        MomentumQueue { entries: Array2::zeros((capacity, dim)), len: 0, write_head: 0 }
    }

    pub fn capacity(&self) -> usize {
        self.entries.nrows()
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// Append a `[B, D]` batch of keys, evicting the oldest beyond capacity.
    pub fn enqueue(&mut self, keys: &Array2<f64>) {
        for row in keys.rows() {
            debug_assert!((row.iter().map(|v| v * v).sum::<f64>().sqrt() - 1.0).abs() < 1e-5);
            let cap = self.capacity();
            if cap == 0 {
                return;
            }
            self.entries.row_mut(self.write_head).assign(&row);
            self.write_head = (self.write_head + 1) % cap;
            self.len = (self.len + 1).min(cap);
        }
    }

    /// Current contents, oldest-first ordering not guaranteed (the loss is
    /// invariant to negative order).
    pub fn negatives(&self) -> Array2<f64> {
        self.entries.slice(ndarray::s![..self.len, ..]).to_owned()
    }

    /// Binary serialization (capacity, len, head, dim, entries).
    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir)?;
        }
        let mut out = Vec::new();
        out.extend_from_slice(b"LQUE");
        for v in [self.capacity() as u64, self.len as u64, self.write_head as u64, self.entries.ncols() as u64] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for &x in self.entries.iter() {
            out.extend_from_slice(&x.to_le_bytes());
        }
        std::fs::write(path, out)?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        if bytes.len() < 36 || &bytes[..4] != b"LQUE" {
            return Err(Error::Checkpoint(format!("{path:?}: not a queue file")));
        }
        let word = |i: usize| u64::from_le_bytes(bytes[4 + i * 8..12 + i * 8].try_into().unwrap()) as usize;
        let (capacity, len, write_head, dim) = (word(0), word(1), word(2), word(3));
        let expected = 36 + capacity * dim * 8;
        if bytes.len() != expected {
            return Err(Error::Checkpoint(format!("{path:?}: truncated queue file")));
        }
        let data: Vec<f64> = bytes[36..]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let entries = Array2::from_shape_vec((capacity, dim), data)
            .map_err(|e| Error::Checkpoint(format!("queue shape: {e}")))?;
        Ok(MomentumQueue { entries, len, write_head })
    }
}

/// InfoNCE over explicit negatives: positives are rowwise `q·k` pairs,
/// negatives are the queue contents shared by every row.
///
/// With an empty queue the loss degenerates to a single-logit softmax (0).
pub fn info_nce_loss(q: &Tensor, k_pos: &Tensor, negatives: &Array2<f64>, tau: f64) -> Result<Tensor> {
    if tau <= 0.0 {
        return Err(Error::parameter(format!("tau must be positive, got {tau}")));
    }
    let (b, d) = (q.shape()[0], q.shape()[1]);
    if k_pos.shape() != [b, d] {
        return Err(Error::shape("info_nce: q and k_pos shapes differ"));
    }
    // positive logit per row via [B,1,D] x [B,D,1]
    let q3 = movement::reshape(q, &[b, 1, d]);
    let k3 = movement::reshape(k_pos, &[b, d, 1]);
    let pos = movement::reshape(&crate::tensor::matmul::bmm(&q3, &k3), &[b, 1]);
    let logits = if negatives.nrows() > 0 {
        let negs_t = Tensor::constant(negatives.t().as_standard_layout().to_owned().into_dyn());
        let neg = crate::tensor::matmul::matmul(q, &negs_t);
        movement::concat(&[pos, neg], 1)
    } else {
        pos
    };
    let logits = ops::mul_scalar(&logits, 1.0 / tau);
    let probs = ops::softmax_last(&logits);
    let p_pos = movement::narrow(&probs, 1, 0, 1);
    let nll = ops::neg(&ops::ln(&ops::clamp_min(&p_pos, 1e-300)));
    Ok(ops::mean_all(&nll))
}

/// In-batch InfoNCE (queue size 0 mode): logits are `q · k_posᵀ / τ` and the
/// diagonal entries are the positives.
pub fn info_nce_in_batch(q: &Tensor, k_pos: &Tensor, tau: f64) -> Result<Tensor> {
    if tau <= 0.0 {
        return Err(Error::parameter(format!("tau must be positive, got {tau}")));
    }
    let b = q.shape()[0];
    let logits = ops::mul_scalar(
        &crate::tensor::matmul::matmul(q, &movement::transpose_last2(k_pos)),
        1.0 / tau,
    );
    let probs = ops::softmax_last(&logits);
    let flat = movement::reshape(&probs, &[b * b, 1]);
    let diag_idx: Vec<usize> = (0..b).map(|i| i * b + i).collect();
    let diag = movement::index_select0(&flat, &diag_idx);
    let nll = ops::neg(&ops::ln(&ops::clamp_min(&diag, 1e-300)));
    Ok(ops::mean_all(&nll))
}

/// Elementwise `key <- m*key + (1-m)*query` (delegates to the parameter sets).
pub fn momentum_update(query: &ParamSet, key: &mut ParamSet, m: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&m) {
        return Err(Error::parameter(format!("momentum {m} outside [0,1]")));
    }
    key.momentum_update_from(query, m)
}

/// Contrastive pretraining settings.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub crop: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub tau: f64,
    pub queue_size: usize,
    pub momentum: f64,
    pub kinds: Vec<DegradationKind>,
    pub levels: Vec<DegradationLevel>,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            epochs: 20,
            batch_size: 8,
            crop: 160,
            lr: 5e-5,
            beta1: 0.9,
            beta2: 0.999,
            tau: 0.07,
            queue_size: 1024,
            momentum: 0.999,
            kinds: vec![
                DegradationKind::Noise,
                DegradationKind::MotionBlur,
                DegradationKind::LowLight,
                DegradationKind::Smoke,
            ],
            levels: DegradationLevel::ALL.to_vec(),
            seed: 0,
        }
    }
}

/// One step record of the pretraining loop.
#[derive(Debug, Clone)]
pub struct PretrainStep {
    pub epoch: usize,
    pub step: usize,
    pub loss: f64,
}

/// Pretrain the encoder contrastively on synthetic degradations of a clean
/// corpus. Returns the query parameters and the per-step loss log.
///
/// Each step degrades whole images with per-image sampled parameters, takes
/// two crops of each degraded image as the positive pair, and treats the
/// momentum queue (or, with `queue_size == 0`, the other in-batch keys) as
/// negatives.
pub fn pretrain(
    corpus: &[ImageTensor],
    cfg: &PretrainConfig,
    query_ps: &mut ParamSet,
    encoder: &DegradationEncoder,
    mut on_step: impl FnMut(&PretrainStep),
) -> Result<Vec<PretrainStep>> {
    let mut key_ps = query_ps.clone_set();
    let mut queue = MomentumQueue::new(cfg.queue_size, encoder.cfg.proj_dim);
    let mut log = Vec::new();
    for epoch in 0..cfg.epochs {
        let steps = pretrain_epoch(corpus, cfg, epoch, query_ps, &mut key_ps, &mut queue, encoder, &mut on_step)?;
        log.extend(steps);
    }
    Ok(log)
}

/// One epoch of contrastive pretraining; all randomness derives from
/// `(cfg.seed, epoch)`, so epochs can be replayed individually for resume.
#[allow(clippy::too_many_arguments)]
pub fn pretrain_epoch(
    corpus: &[ImageTensor],
    cfg: &PretrainConfig,
    epoch: usize,
    query_ps: &mut ParamSet,
    key_ps: &mut ParamSet,
    queue: &mut MomentumQueue,
    encoder: &DegradationEncoder,
    mut on_step: impl FnMut(&PretrainStep),
) -> Result<Vec<PretrainStep>> {
    if corpus.is_empty() {
        return Err(Error::Corpus("pretraining corpus is empty".into()));
    }
    if cfg.crop % 4 != 0 {
        return Err(Error::parameter(format!("crop {} must be divisible by 4", cfg.crop)));
    }
    for (i, img) in corpus.iter().enumerate() {
        if img.height() < cfg.crop || img.width() < cfg.crop {
            return Err(Error::Corpus(format!(
                "corpus image {i} is {}x{}, smaller than crop {}",
                img.height(),
                img.width(),
                cfg.crop
            )));
        }
    }
    let adam = Adam::new(cfg.lr, cfg.beta1, cfg.beta2);
    let mut log = Vec::new();

    let mut order: Vec<usize> = (0..corpus.len()).collect();
    let mut shuffle_rng = rng_for(cfg.seed, &format!("pretrain/epoch{epoch}/shuffle"));
    order.shuffle(&mut shuffle_rng);
    let steps = corpus.len() / cfg.batch_size;
    for step in 0..steps {
        let mut step_rng = rng_for(cfg.seed, &format!("pretrain/epoch{epoch}/step{step}"));
        let mut q_crops = Vec::with_capacity(cfg.batch_size);
        let mut k_crops = Vec::with_capacity(cfg.batch_size);
        for b in 0..cfg.batch_size {
            let img = &corpus[order[step * cfg.batch_size + b]];
            let kind = cfg.kinds[step_rng.random_range(0..cfg.kinds.len())];
            let level = cfg.levels[step_rng.random_range(0..cfg.levels.len())];
            let param_seed = step_rng.random::<u64>();
            let params = degrade::sample_parameters(kind, level, img.height(), img.width(), 1, param_seed);
            let degraded = degrade::apply(img, &params, derive_seed(param_seed, "realize"))?;
            let max_i = degraded.height() - cfg.crop;
            let max_j = degraded.width() - cfg.crop;
            let take_crop = |rng: &mut rand_chacha::ChaCha12Rng| {
                let i0 = if max_i == 0 { 0 } else { rng.random_range(0..=max_i) };
                let j0 = if max_j == 0 { 0 } else { rng.random_range(0..=max_j) };
                degraded
                    .data()
                    .slice(ndarray::s![i0..i0 + cfg.crop, j0..j0 + cfg.crop, ..])
                    .to_owned()
            };
            q_crops.push(ImageTensor::new(take_crop(&mut step_rng))?);
            k_crops.push(ImageTensor::new(take_crop(&mut step_rng))?);
        }
        let q_batch = stack_images(&q_crops);
        let k_batch = stack_images(&k_crops);

        // keys come from the momentum encoder, no gradient
        let key_ctx = Ctx::new(key_ps);
        let (_, k_vec) = encoder.forward(&key_ctx, &Tensor::constant(k_batch))?;
        let k_vec = k_vec.detach();

        let query_ctx = Ctx::new(query_ps);
        let (_, q_vec) = encoder.forward(&query_ctx, &Tensor::constant(q_batch))?;
        let loss = if cfg.queue_size == 0 {
            info_nce_in_batch(&q_vec, &k_vec, cfg.tau)?
        } else {
            info_nce_loss(&q_vec, &k_vec, &queue.negatives(), cfg.tau)?
        };
        let loss_value = loss.scalar();
        if !loss_value.is_finite() {
            return Err(Error::Numeric(format!(
                "contrastive loss became {loss_value} at epoch {epoch} step {step}"
            )));
        }
        let mut grads = loss.backward();
        let used = query_ctx.used();
        adam.step(query_ps, &used, &mut grads);
        momentum_update(query_ps, key_ps, cfg.momentum)?;
        let k_arr = k_vec
            .value()
            .to_owned()
            .into_dimensionality::<ndarray::Ix2>()
            .expect("k_vec is [B, D]");
        queue.enqueue(&k_arr);

        let record = PretrainStep { epoch, step, loss: loss_value };
        on_step(&record);
        log.push(record);
    }
    Ok(log)
}

/// Stack `[H, W, 3]` images into one `[N, 3, H, W]` array.
pub fn stack_images(images: &[ImageTensor]) -> ArrayD<f64> {
    let n = images.len();
    let (h, w) = (images[0].height(), images[0].width());
    let mut out = ArrayD::zeros(IxDyn(&[n, 3, h, w]));
    for (b, img) in images.iter().enumerate() {
        for c in 0..3 {
            for i in 0..h {
                for j in 0..w {
                    out[[b, c, i, j]] = img.data()[[i, j, c]];
                }
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_for;
    use ndarray::arr2;

    fn tiny_encoder() -> (ParamSet, DegradationEncoder) {
        let mut ps = ParamSet::new("encoder");
        let mut rng = rng_for(1, "enc-test");
        let cfg = EncoderConfig { base_width: 8, blocks_per_stage: 1, proj_dim: 16 };
        let enc = DegradationEncoder::build(&mut ps, &mut rng, &cfg);
        (ps, enc)
    }

    #[test]
    fn encode_shapes_and_determinism() {
        let (ps, enc) = tiny_encoder();
        let img = crate::fixtures::synth_image(32, 32, 3);
        let a = enc.encode(&ps, &img).unwrap();
        let b = enc.encode(&ps, &img).unwrap();
        assert_eq!(a.d_map.shape(), &[32, 8, 8]);
        assert_eq!(a.d_vec.len(), 16);
        assert_eq!(a.d_map, b.d_map);
        assert_eq!(a.d_vec, b.d_vec);
        let norm: f64 = a.d_vec.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!((norm - 1.0).abs() < 1e-5);
    }

    #[test]
    fn encode_rejects_non_divisible_dims() {
        let (ps, enc) = tiny_encoder();
        let img = crate::fixtures::synth_image(30, 32, 3);
        assert!(enc.encode(&ps, &img).is_err());
    }

    #[test]
    fn default_encoder_matches_parameter_budget() {
        let mut ps = ParamSet::new("encoder");
        let mut rng = rng_for(0, "enc-budget");
        let enc = DegradationEncoder::build(&mut ps, &mut rng, &EncoderConfig::default());
        let params = enc.trunk_param_count() as f64;
        let target = 4.33e6;
        assert!(
            (params - target).abs() / target <= 0.10,
            "trunk has {params} params, wanted within 10% of {target}"
        );
        // the declared count matches the stored arrays (head included on top)
        assert!(ps.total_params() > enc.trunk_param_count());
    }

    #[test]
    fn info_nce_closed_forms() {
        // batch 1, empty queue, q = k: single logit, loss = 0
        let q = Tensor::constant(arr2(&[[1.0, 0.0]]).into_dyn());
        let empty = Array2::<f64>::zeros((0, 2));
        let loss = info_nce_loss(&q, &q, &empty, 0.07).unwrap();
        assert!(loss.scalar().abs() < 1e-9);

        // q·k+ = 1, one negative with q·n = 0, tau = 1: -ln(e/(e+1))
        let negs = arr2(&[[0.0, 1.0]]);
        let loss = info_nce_loss(&q, &q, &negs, 1.0).unwrap();
        let expected = -(1f64.exp() / (1f64.exp() + 1.0)).ln();
        assert!((loss.scalar() - expected).abs() < 1e-9, "{} vs {expected}", loss.scalar());
        assert!((loss.scalar() - 0.3132616875).abs() < 1e-6);

        // all vectors identical, 3 negatives: uniform over 4 logits = ln 4
        let negs = arr2(&[[1.0, 0.0], [1.0, 0.0], [1.0, 0.0]]);
        for tau in [0.07, 0.5, 1.0, 3.0] {
            let loss = info_nce_loss(&q, &q, &negs, tau).unwrap();
            assert!((loss.scalar() - 4f64.ln()).abs() < 1e-9, "tau {tau}");
        }
    }

    #[test]
    fn info_nce_rejects_bad_tau() {
        let q = Tensor::constant(arr2(&[[1.0, 0.0]]).into_dyn());
        let empty = Array2::<f64>::zeros((0, 2));
        assert!(info_nce_loss(&q, &q, &empty, 0.0).is_err());
        assert!(info_nce_loss(&q, &q, &empty, -1.0).is_err());
    }

    #[test]
    fn info_nce_monotone_in_positive_logit() {
        // increasing the positive similarity with fixed negatives lowers the loss
        let negs = arr2(&[[0.5, 0.5], [0.3, -0.2]]);
        let mut last = f64::INFINITY;
        for pos in [0.0f64, 0.3, 0.6, 0.9] {
            let q = Tensor::constant(arr2(&[[1.0, 0.0]]).into_dyn());
            let k = Tensor::constant(arr2(&[[pos, (1.0 - pos * pos).sqrt()]]).into_dyn());
            let loss = info_nce_loss(&q, &k, &negs, 0.5).unwrap().scalar();
            assert!(loss < last, "loss {loss} not below {last} at pos {pos}");
            last = loss;
        }
    }

    #[test]
    fn info_nce_invariant_to_negative_order() {
        let q = Tensor::constant(arr2(&[[0.8, 0.6]]).into_dyn());
        let k = Tensor::constant(arr2(&[[0.6, 0.8]]).into_dyn());
        let negs = arr2(&[[1.0, 0.0], [0.0, 1.0], [-0.6, 0.8]]);
        let negs_rev = arr2(&[[-0.6, 0.8], [0.0, 1.0], [1.0, 0.0]]);
        let a = info_nce_loss(&q, &k, &negs, 0.2).unwrap().scalar();
        let b = info_nce_loss(&q, &k, &negs_rev, 0.2).unwrap().scalar();
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn queue_ring_buffer_contract() {
        let mut q = MomentumQueue::new(4, 2);
        let b1 = arr2(&[[1.0, 0.0], [0.0, 1.0]]);
        q.enqueue(&b1);
        assert_eq!(q.len(), 2);
        q.enqueue(&b1);
        assert_eq!(q.len(), 4);
        // one more batch evicts the oldest two
        let b2 = arr2(&[[-1.0, 0.0], [0.0, -1.0]]);
        q.enqueue(&b2);
        assert_eq!(q.len(), 4);
        let negs = q.negatives();
        assert_eq!(negs.nrows(), 4);
        // the new entries are present
        let mut found = 0;
        for row in negs.rows() {
            if row[0] == -1.0 || row[1] == -1.0 {
                found += 1;
            }
        }
        assert_eq!(found, 2);
    }

    #[test]
    fn momentum_update_bounds() {
        let (ps, _) = tiny_encoder();
        let mut key = ps.clone_set();
        assert!(momentum_update(&ps, &mut key, 1.5).is_err());
        momentum_update(&ps, &mut key, 0.5).unwrap();
    }

    #[test]
    fn pretrain_step_count_and_determinism() {
        let corpus: Vec<ImageTensor> = (0..8).map(|i| crate::fixtures::synth_image(24, 24, 100 + i)).collect();
        let cfg = PretrainConfig {
            epochs: 1,
            batch_size: 4,
            crop: 16,
            queue_size: 32,
            seed: 5,
            ..PretrainConfig::default()
        };
        let run = || {
            let mut ps = ParamSet::new("encoder");
            let mut rng = rng_for(2, "enc-pretrain-test");
            let enc = DegradationEncoder::build(
                &mut ps,
                &mut rng,
                &EncoderConfig { base_width: 4, blocks_per_stage: 1, proj_dim: 8 },
            );
            let log = pretrain(&corpus, &cfg, &mut ps, &enc, |_| {}).unwrap();
            (ps.sha256_hex(), log)
        };
        let (h1, log1) = run();
        let (h2, log2) = run();
        // 1 epoch over 8 images at batch 4 = exactly 2 steps
        assert_eq!(log1.len(), 2);
        assert_eq!(h1, h2, "same seed must reproduce identical weights");
        assert_eq!(log1[0].loss, log2[0].loss);

        // loss at step 0 is inside the sanity band [0, ln(queue+1) + 5]
        assert!(log1[0].loss >= 0.0 && log1[0].loss <= (33f64).ln() + 5.0);
    }

    #[test]
    fn pretrain_rejects_empty_corpus() {
        let (mut ps, enc) = tiny_encoder();
        let cfg = PretrainConfig::default();
        assert!(pretrain(&[], &cfg, &mut ps, &enc, |_| {}).is_err());
    }
}
