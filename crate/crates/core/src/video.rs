//! Inference-time key-frame scheduling: frames whose index is a multiple
//! of `delta_t` get a full degradation estimation; every other frame
//! reuses the propagated compressed representation. Frames are processed
//! strictly in order with no lookahead.

use std::path::Path;
use std::time::Instant;

use ndarray::{Array1, IxDyn};

use crate::enhancer::{GuidedEnhancer, ReprSource};
use crate::encoder::DegradationEncoder;
use crate::error::{Error, Result};
use crate::imaging::{ImageTensor, VideoSequence};
use crate::nn::{Ctx, ParamSet};
use crate::propagation::{PropagationState, ReprPropagator};
use crate::tensor::{movement, Tensor};

/// Key-frame scheduling knobs.
#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct SchedulerConfig {
    /// Interval between full degradation estimations (>= 1).
    pub delta_t: usize,
    /// Force frame 0 to be a key frame (it always is under the modulo
    /// rule; the flag guards externally offset streams).
    pub warm_start: bool,
}

impl Default for SchedulerConfig {
    fn default() -> Self {
        SchedulerConfig { delta_t: 15, warm_start: true }
    }
}

impl SchedulerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.delta_t == 0 {
            return Err(Error::Config("delta_t must be >= 1".into()));
        }
        Ok(())
    }

    pub fn is_key_frame(&self, index: usize) -> bool {
        index % self.delta_t == 0 || (self.warm_start && index == 0)
    }
}

/// Everything the streaming loop needs, borrowed from the owner.
pub struct VideoModel<'a> {
    pub enc_ps: &'a ParamSet,
    pub encoder: &'a DegradationEncoder,
    pub enh_ps: &'a ParamSet,
    pub enhancer: &'a GuidedEnhancer,
    pub prop_ps: &'a ParamSet,
    pub propagator: &'a ReprPropagator,
}

/// One processed frame.
#[derive(Debug, Clone)]
pub struct FrameRecord {
    pub index: usize,
    pub input: ImageTensor,
    pub output: ImageTensor,
    pub source: ReprSource,
    pub wall_ms: f64,
    pub est_flops: u64,
}

fn enhance_padded(model: &VideoModel, frame: &ImageTensor, d_c: &Array1<f64>) -> Result<ImageTensor> {
    let (h, w) = (frame.height(), frame.width());
    let s = model.enhancer.cfg.scale;
    let m = model.enhancer.cfg.window.max(4);
    let (ph, pw) = ((m - h % m) % m, (m - w % m) % m);
    let ctx = Ctx::new(model.enh_ps);
    let x = Tensor::constant(frame.to_nchw());
    let x = if ph > 0 || pw > 0 {
        movement::pad_reflect_hw(&x, 0, ph, 0, pw)
    } else {
        x
    };
    let gains = Tensor::constant(
        Array1::from_iter(d_c.iter().cloned())
            .into_shape_with_order(IxDyn(&[1, model.enhancer.cfg.embed_dim]))
            .expect("gain vector"),
    );
    let y = model.enhancer.forward(&ctx, &x, Some(&gains), None);
    let y = movement::crop_hw(&y, 0, 0, h * s, w * s);
    ImageTensor::from_nchw(y.value())
}

fn padded_dims(frame: &ImageTensor, multiple: usize) -> (usize, usize) {
    let r = |v: usize| v.div_ceil(multiple) * multiple;
    (r(frame.height()), r(frame.width()))
}

/// Enhance a frame sequence with the key-frame/propagated-frame schedule.
///
/// The propagation state always stores the representation actually used
/// for each frame, tagged by its source; key frames therefore re-anchor
/// the history at the encoder-derived vector.
pub fn enhance_video(
    frames: &VideoSequence,
    model: &VideoModel,
    cfg: &SchedulerConfig,
) -> Result<Vec<FrameRecord>> {
    cfg.validate()?;
    if frames.is_empty() {
        return Err(Error::Corpus("video has no frames".into()));
    }
    let (h0, w0) = (frames.frames()[0].height(), frames.frames()[0].width());
    let mut state = PropagationState::new(model.propagator.cfg.context);
    let mut records = Vec::with_capacity(frames.len());
    for (i, frame) in frames.frames().iter().enumerate() {
        if frame.height() != h0 || frame.width() != w0 {
            return Err(Error::shape(format!(
                "frame {i} changed dimensions mid-stream ({}x{} vs {h0}x{w0})",
                frame.height(),
                frame.width()
            )));
        }
        let started = Instant::now();
        let (comp, source) = if cfg.is_key_frame(i) {
            let (ph, pw) = padded_dims(frame, model.enhancer.cfg.window.max(4));
            // encode on the padded frame so any dims work
            let padded = {
                let x = Tensor::constant(frame.to_nchw());
                if ph != frame.height() || pw != frame.width() {
                    movement::pad_reflect_hw(&x, 0, ph - frame.height(), 0, pw - frame.width())
                } else {
                    x
                }
            };
            let ctx = Ctx::new(model.enc_ps);
            let d_map = model.encoder.d_map(&ctx, &padded)?;
            let map = d_map.value().index_axis(ndarray::Axis(0), 0).to_owned().into_dyn();
            let comp = model.enhancer.compress(model.enh_ps, &map);
            (comp.d_c, ReprSource::Dam)
        } else {
            let pred = model.propagator.propagate(model.prop_ps, &state)?;
            (pred.d_c, ReprSource::Drpm)
        };
        let output = enhance_padded(model, frame, &comp)?;
        state.update(i, comp, source)?;
        let wall_ms = started.elapsed().as_secs_f64() * 1e3;

        let (ph, pw) = padded_dims(frame, model.enhancer.cfg.window.max(4));
        let (_, enh_flops) = model.enhancer.count_params_flops(ph, pw);
        let est_flops = enh_flops
            + match source {
                ReprSource::Dam => model.encoder.trunk_flops(ph, pw),
                ReprSource::Drpm => model.propagator.flops(state.len().max(1)),
            };
        records.push(FrameRecord {
            index: i,
            input: frame.clone(),
            output,
            source,
            wall_ms,
            est_flops,
        });
    }
    Ok(records)
}

/// Analytic FLOPs/frame of the schedule:
/// `F_enhancer + F_encoder/Δ_T + F_propagator·(1 − 1/Δ_T)`.
pub fn estimate_avg_flops(delta_t: usize, f_encoder: f64, f_enhancer: f64, f_propagator: f64) -> f64 {
    assert!(delta_t >= 1);
    f_enhancer + f_encoder / delta_t as f64 + f_propagator * (1.0 - 1.0 / delta_t as f64)
}

/// Per-frame CSV: `index,source,ms,flops`.
pub fn write_frame_csv(records: &[FrameRecord], path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let mut out = String::from("index,source,ms,flops\n");
    for r in records {
        out.push_str(&format!("{},{},{:.4},{}\n", r.index, r.source.name(), r.wall_ms, r.est_flops));
    }
    std::fs::write(path, out)?;
    Ok(())
}
