//! Parameter storage, layers, the Adam optimizer and checkpoint i/o.
//!
//! A [`ParamSet`] owns every learnable array of one module (values plus
//! Adam moments). During a forward pass a [`Ctx`] hands out graph leaves
//! for parameters on demand and memoizes them, so a parameter used twice
//! in one step accumulates both gradient contributions.

use std::cell::RefCell;
use std::io::{Read, Write};
use std::path::Path;

use ndarray::{ArrayD, IxDyn};
use rand::Rng;
use rand_chacha::ChaCha12Rng;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::{ops, Gradients, Tensor};

const CKPT_MAGIC: &[u8; 4] = b"LCKP";
const CKPT_VERSION: u32 = 1;

/// Handle to one parameter inside a [`ParamSet`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct VarId(usize);

struct Var {
    name: String,
    value: ArrayD<f64>,
    m: ArrayD<f64>,
    v: ArrayD<f64>,
}

/// A named collection of parameters with optimizer state.
pub struct ParamSet {
    module: String,
    vars: Vec<Var>,
    /// Number of optimizer steps taken (Adam bias correction).
    pub opt_step: u64,
}

impl ParamSet {
    pub fn new(module: impl Into<String>) -> Self {
        ParamSet { module: module.into(), vars: Vec::new(), opt_step: 0 }
    }

    pub fn module(&self) -> &str {
        &self.module
    }

    pub fn add(&mut self, name: impl Into<String>, value: ArrayD<f64>) -> VarId {
        let m = ArrayD::zeros(value.raw_dim());
        let v = ArrayD::zeros(value.raw_dim());
        self.vars.push(Var { name: name.into(), value, m, v });
        VarId(self.vars.len() - 1)
    }

    pub fn value(&self, id: VarId) -> &ArrayD<f64> {
        &self.vars[id.0].value
    }

    pub fn set_value(&mut self, id: VarId, value: ArrayD<f64>) {
        assert_eq!(self.vars[id.0].value.shape(), value.shape());
        self.vars[id.0].value = value;
    }

    pub fn len(&self) -> usize {
        self.vars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vars.is_empty()
    }

    pub fn var_ids(&self) -> impl Iterator<Item = VarId> {
        (0..self.vars.len()).map(VarId)
    }

    pub fn name_of(&self, id: VarId) -> &str {
        &self.vars[id.0].name
    }

    /// Total number of scalar parameters.
    pub fn total_params(&self) -> usize {
        self.vars.iter().map(|v| v.value.len()).sum()
    }

    /// Elementwise `key <- m*key + (1-m)*query` across two shape-compatible sets.
    pub fn momentum_update_from(&mut self, query: &ParamSet, momentum: f64) -> Result<()> {
        if self.vars.len() != query.vars.len() {
            return Err(Error::shape(format!(
                "momentum update: {} vs {} parameters",
                self.vars.len(),
                query.vars.len()
            )));
        }
        for (k, q) in self.vars.iter_mut().zip(query.vars.iter()) {
            if k.value.shape() != q.value.shape() {
                return Err(Error::shape(format!(
                    "momentum update: shape mismatch on {} ({:?} vs {:?})",
                    k.name,
                    k.value.shape(),
                    q.value.shape()
                )));
            }
            k.value.zip_mut_with(&q.value, |kv, &qv| {
                *kv = momentum * *kv + (1.0 - momentum) * qv;
            });
        }
        Ok(())
    }

    /// Deep copy including optimizer state.
    pub fn clone_set(&self) -> ParamSet {
        ParamSet {
            module: self.module.clone(),
            vars: self
                .vars
                .iter()
                .map(|v| Var {
                    name: v.name.clone(),
                    value: v.value.clone(),
                    m: v.m.clone(),
                    v: v.v.clone(),
                })
                .collect(),
            opt_step: self.opt_step,
        }
    }

    fn serialize(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CKPT_MAGIC);
        out.extend_from_slice(&CKPT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.module.len() as u32).to_le_bytes());
        out.extend_from_slice(self.module.as_bytes());
        out.extend_from_slice(&self.opt_step.to_le_bytes());
        out.extend_from_slice(&(self.vars.len() as u32).to_le_bytes());
        for var in &self.vars {
            out.extend_from_slice(&(var.name.len() as u32).to_le_bytes());
            out.extend_from_slice(var.name.as_bytes());
            out.extend_from_slice(&(var.value.ndim() as u32).to_le_bytes());
            for &d in var.value.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for arr in [&var.value, &var.m, &var.v] {
                for &x in arr.as_slice().expect("standard layout") {
                    out.extend_from_slice(&x.to_le_bytes());
                }
            }
        }
        out
    }

    /// Write a versioned checkpoint (header + shape manifest + data).
    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir)?;
        }
        let mut f = std::fs::File::create(path)?;
        f.write_all(&self.serialize())?;
        Ok(())
    }

    /// Hex SHA-256 of the serialized checkpoint bytes.
    pub fn sha256_hex(&self) -> String {
        let mut hasher = Sha256::new();
        hasher.update(self.serialize());
        let d = hasher.finalize();
        d.iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Read a checkpoint, validating magic, version and expected module name.
    pub fn load(path: &Path, expected_module: &str) -> Result<ParamSet> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        let mut pos = 0usize;
        let take = |pos: &mut usize, n: usize| -> Result<&[u8]> {
            if *pos + n > bytes.len() {
                return Err(Error::Checkpoint(format!("truncated checkpoint {path:?}")));
            }
            let s = &bytes[*pos..*pos + n];
            *pos += n;
            Ok(s)
        };
        if take(&mut pos, 4)? != CKPT_MAGIC {
            return Err(Error::Checkpoint(format!("{path:?}: bad magic")));
        }
        let version = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap());
        if version != CKPT_VERSION {
            return Err(Error::Checkpoint(format!("{path:?}: unsupported version {version}")));
        }
        let name_len = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
        let module = String::from_utf8(take(&mut pos, name_len)?.to_vec())
            .map_err(|_| Error::Checkpoint("module name is not utf-8".into()))?;
        if module != expected_module {
            return Err(Error::Checkpoint(format!(
                "{path:?}: module '{module}', expected '{expected_module}'"
            )));
        }
        let opt_step = u64::from_le_bytes(take(&mut pos, 8)?.try_into().unwrap());
        let var_count = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
        let mut vars = Vec::with_capacity(var_count);
        for _ in 0..var_count {
            let nl = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
            let name = String::from_utf8(take(&mut pos, nl)?.to_vec())
                .map_err(|_| Error::Checkpoint("var name is not utf-8".into()))?;
            let ndim = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
            let mut dims = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                dims.push(u64::from_le_bytes(take(&mut pos, 8)?.try_into().unwrap()) as usize);
            }
            let len: usize = dims.iter().product();
            let read_arr = |pos: &mut usize| -> Result<ArrayD<f64>> {
                let raw = take(pos, len * 8)?;
                let data: Vec<f64> = raw
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                    .collect();
                ArrayD::from_shape_vec(IxDyn(&dims), data)
                    .map_err(|e| Error::Checkpoint(format!("bad shape for {name}: {e}")))
            };
            let value = read_arr(&mut pos)?;
            let m = read_arr(&mut pos)?;
            let v = read_arr(&mut pos)?;
            vars.push(Var { name, value, m, v });
        }
        Ok(ParamSet { module, vars, opt_step })
    }

    /// Load values from `path` into this set, requiring an identical shape manifest.
    pub fn load_matching(&mut self, path: &Path) -> Result<()> {
        let loaded = ParamSet::load(path, &self.module)?;
        if loaded.vars.len() != self.vars.len() {
            return Err(Error::Checkpoint(format!(
                "{path:?}: {} parameters, expected {}",
                loaded.vars.len(),
                self.vars.len()
            )));
        }
        for (mine, theirs) in self.vars.iter().zip(loaded.vars.iter()) {
            if mine.name != theirs.name || mine.value.shape() != theirs.value.shape() {
                return Err(Error::Checkpoint(format!(
                    "{path:?}: manifest mismatch at '{}' {:?} (file has '{}' {:?})",
                    mine.name,
                    mine.value.shape(),
                    theirs.name,
                    theirs.value.shape()
                )));
            }
        }
        *self = loaded;
        Ok(())
    }
}

/// Per-step leaf cache for one [`ParamSet`].
pub struct Ctx<'a> {
    ps: &'a ParamSet,
    leaves: RefCell<Vec<Option<Tensor>>>,
}

impl<'a> Ctx<'a> {
    pub fn new(ps: &'a ParamSet) -> Self {
        Ctx { ps, leaves: RefCell::new(vec![None; ps.vars.len()]) }
    }

    /// The graph leaf for a parameter (memoized within this context).
    pub fn leaf(&self, id: VarId) -> Tensor {
        let mut leaves = self.leaves.borrow_mut();
        if let Some(t) = &leaves[id.0] {
            return t.clone();
        }
        let t = Tensor::leaf(self.ps.vars[id.0].value.clone());
        leaves[id.0] = Some(t.clone());
        t
    }

    /// Constant (no-gradient) view of a parameter, for frozen modules.
    pub fn frozen(&self, id: VarId) -> Tensor {
        let mut leaves = self.leaves.borrow_mut();
        if let Some(t) = &leaves[id.0] {
            return t.clone();
        }
        let t = Tensor::constant(self.ps.vars[id.0].value.clone());
        leaves[id.0] = Some(t.clone());
        t
    }

    /// (parameter, leaf) pairs that were touched this step.
    pub fn used(&self) -> Vec<(VarId, Tensor)> {
        self.leaves
            .borrow()
            .iter()
            .enumerate()
            .filter_map(|(i, t)| t.as_ref().map(|t| (VarId(i), t.clone())))
            .collect()
    }
}

/// Adam with the usual bias correction.
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Adam {
    pub fn new(lr: f64, beta1: f64, beta2: f64) -> Self {
        Adam { lr, beta1, beta2, eps: 1e-8 }
    }

    /// Apply one update from the gradients of `used` leaves.
    pub fn step(&self, ps: &mut ParamSet, used: &[(VarId, Tensor)], grads: &mut Gradients) {
        ps.opt_step += 1;
        let t = ps.opt_step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for (id, leaf) in used {
            let Some(g) = grads.take(leaf) else { continue };
            let var = &mut ps.vars[id.0];
            ndarray::Zip::from(&mut var.value)
                .and(&mut var.m)
                .and(&mut var.v)
                .and(&g)
                .for_each(|w, m, v, &gv| {
                    *m = self.beta1 * *m + (1.0 - self.beta1) * gv;
                    *v = self.beta2 * *v + (1.0 - self.beta2) * gv * gv;
                    let mhat = *m / bc1;
                    let vhat = *v / bc2;
                    *w -= self.lr * mhat / (vhat.sqrt() + self.eps);
                });
        }
    }
}

/// Uniform init in `±1/sqrt(fan_in)`.
pub fn uniform_init(rng: &mut ChaCha12Rng, shape: &[usize], fan_in: usize) -> ArrayD<f64> {
    let bound = 1.0 / (fan_in as f64).sqrt();
    let len: usize = shape.iter().product();
    let data: Vec<f64> = (0..len).map(|_| rng.random_range(-bound..bound)).collect();
    ArrayD::from_shape_vec(IxDyn(shape), data).expect("shape/data agree")
}

/// Boundary handling for convolution layers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Pad {
    Valid,
    Zero(usize),
    Reflect(usize),
}

/// A 2-D convolution layer (weights `[C_out, C_in, k, k]`).
pub struct Conv2d {
    pub w: VarId,
    pub b: Option<VarId>,
    pub stride: usize,
    pub pad: Pad,
    pub c_in: usize,
    pub c_out: usize,
    pub k: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        ps: &mut ParamSet,
        rng: &mut ChaCha12Rng,
        name: &str,
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        pad: Pad,
        bias: bool,
    ) -> Self {
        let fan_in = c_in * k * k;
        let w = ps.add(format!("{name}.weight"), uniform_init(rng, &[c_out, c_in, k, k], fan_in));
        let b = bias.then(|| ps.add(format!("{name}.bias"), uniform_init(rng, &[c_out], fan_in)));
        Conv2d { w, b, stride, pad, c_in, c_out, k }
    }

    pub fn forward(&self, ctx: &Ctx, x: &Tensor) -> Tensor {
        let x = match self.pad {
            Pad::Valid => x.clone(),
            Pad::Zero(p) => crate::tensor::movement::pad_zero_hw(x, p, p, p, p),
            Pad::Reflect(p) => crate::tensor::movement::pad_reflect_hw(x, p, p, p, p),
        };
        let y = crate::tensor::conv::conv2d(&x, &ctx.leaf(self.w), self.stride);
        match self.b {
            Some(b) => ops::add_bias_channel(&y, &ctx.leaf(b)),
            None => y,
        }
    }

    pub fn param_count(&self) -> usize {
        self.c_out * self.c_in * self.k * self.k + if self.b.is_some() { self.c_out } else { 0 }
    }

    /// FLOPs = 2 · out_elems · (C_in·k² + bias), i.e. two per multiply-accumulate.
    pub fn flops(&self, out_h: usize, out_w: usize) -> u64 {
        let macs_per_out = self.c_in * self.k * self.k + usize::from(self.b.is_some());
        2 * (out_h * out_w * self.c_out * macs_per_out) as u64
    }

    /// Output spatial dims for a given input (after padding).
    pub fn out_dims(&self, h: usize, w: usize) -> (usize, usize) {
        let p = match self.pad {
            Pad::Valid => 0,
            Pad::Zero(p) | Pad::Reflect(p) => p,
        };
        (
            (h + 2 * p - self.k) / self.stride + 1,
            (w + 2 * p - self.k) / self.stride + 1,
        )
    }
}

/// A dense layer on the last axis (weights `[in, out]`).
pub struct Linear {
    pub w: VarId,
    pub b: Option<VarId>,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    pub fn new(
        ps: &mut ParamSet,
        rng: &mut ChaCha12Rng,
        name: &str,
        d_in: usize,
        d_out: usize,
        bias: bool,
    ) -> Self {
        let w = ps.add(format!("{name}.weight"), uniform_init(rng, &[d_in, d_out], d_in));
        let b = bias.then(|| ps.add(format!("{name}.bias"), uniform_init(rng, &[d_out], d_in)));
        Linear { w, b, d_in, d_out }
    }

    /// Zero-initialized variant (residual prediction heads).
    pub fn new_zeroed(ps: &mut ParamSet, name: &str, d_in: usize, d_out: usize, bias: bool) -> Self {
        let w = ps.add(format!("{name}.weight"), ArrayD::zeros(IxDyn(&[d_in, d_out])));
        let b = bias.then(|| ps.add(format!("{name}.bias"), ArrayD::zeros(IxDyn(&[d_out]))));
        Linear { w, b, d_in, d_out }
    }

    pub fn forward(&self, ctx: &Ctx, x: &Tensor) -> Tensor {
        let shape: Vec<usize> = x.shape().to_vec();
        let d = *shape.last().expect("non-scalar input");
        assert_eq!(d, self.d_in, "linear: input dim {d} != {}", self.d_in);
        let rows: usize = shape[..shape.len() - 1].iter().product();
        let flat = crate::tensor::movement::reshape(x, &[rows, d]);
        let y = crate::tensor::matmul::matmul(&flat, &ctx.leaf(self.w));
        let y = match self.b {
            Some(b) => ops::add_bias_last(&y, &ctx.leaf(b)),
            None => y,
        };
        let mut out_shape = shape;
        *out_shape.last_mut().unwrap() = self.d_out;
        crate::tensor::movement::reshape(&y, &out_shape)
    }

    pub fn param_count(&self) -> usize {
        self.d_in * self.d_out + if self.b.is_some() { self.d_out } else { 0 }
    }

    pub fn flops(&self, rows: usize) -> u64 {
        2 * (rows * self.d_out * (self.d_in + usize::from(self.b.is_some()))) as u64
    }
}

/// LayerNorm over the last axis.
pub struct LayerNorm {
    pub g: VarId,
    pub b: VarId,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new(ps: &mut ParamSet, name: &str, d: usize) -> Self {
        let g = ps.add(format!("{name}.gamma"), ArrayD::from_elem(IxDyn(&[d]), 1.0));
        let b = ps.add(format!("{name}.beta"), ArrayD::zeros(IxDyn(&[d])));
        LayerNorm { g, b, eps: 1e-5 }
    }

    pub fn forward(&self, ctx: &Ctx, x: &Tensor) -> Tensor {
        ops::layer_norm(x, &ctx.leaf(self.g), &ctx.leaf(self.b), self.eps)
    }
}

/// Central finite difference of `f` w.r.t. one parameter entry.
///
/// Temporarily perturbs the stored value; the set is restored before return.
pub fn finite_diff_param(
    ps: &mut ParamSet,
    id: VarId,
    index: &[usize],
    h: f64,
    mut f: impl FnMut(&ParamSet) -> f64,
) -> f64 {
    let original = ps.vars[id.0].value[index];
    ps.vars[id.0].value[index] = original + h;
    let plus = f(ps);
    ps.vars[id.0].value[index] = original - h;
    let minus = f(ps);
    ps.vars[id.0].value[index] = original;
    (plus - minus) / (2.0 * h)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_for;
    use ndarray::arr1;

    #[test]
    fn ctx_memoizes_leaves_for_gradient_accumulation() {
        let mut ps = ParamSet::new("t");
        let id = ps.add("x", arr1(&[2.0]).into_dyn());
        let ctx = Ctx::new(&ps);
        let a = ctx.leaf(id);
        let b = ctx.leaf(id);
        assert_eq!(a.id(), b.id());
        // y = x*x uses the same leaf twice: dy/dx = 2x = 4
        let y = ops::mul(&a, &b);
        let grads = y.backward();
        assert_eq!(grads.get(&a).unwrap()[[0]], 4.0);
    }

    #[test]
    fn adam_moves_against_gradient() {
        let mut ps = ParamSet::new("t");
        let id = ps.add("x", arr1(&[1.0]).into_dyn());
        for _ in 0..50 {
            let ctx = Ctx::new(&ps);
            let x = ctx.leaf(id);
            let loss = ops::mul(&x, &x);
            let mut grads = loss.backward();
            let used = ctx.used();
            Adam::new(0.1, 0.9, 0.999).step(&mut ps, &used, &mut grads);
        }
        assert!(ps.value(id)[[0]].abs() < 0.5);
    }

    #[test]
    fn checkpoint_roundtrip_and_validation() {
        let dir = std::env::temp_dir().join(format!("lucid_ckpt_test_{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let mut rng = rng_for(1, "ckpt");
        let mut ps = ParamSet::new("unit");
        ps.add("a", uniform_init(&mut rng, &[3, 4], 12));
        ps.add("b", uniform_init(&mut rng, &[5], 5));
        ps.opt_step = 7;
        let path = dir.join("unit.ckpt");
        ps.save(&path).unwrap();

        let loaded = ParamSet::load(&path, "unit").unwrap();
        assert_eq!(loaded.opt_step, 7);
        assert_eq!(loaded.total_params(), ps.total_params());
        assert_eq!(loaded.sha256_hex(), ps.sha256_hex());

        assert!(ParamSet::load(&path, "other").is_err());

        let mut mismatched = ParamSet::new("unit");
        mismatched.add("a", ArrayD::zeros(IxDyn(&[3, 5])));
        mismatched.add("b", ArrayD::zeros(IxDyn(&[5])));
        assert!(mismatched.load_matching(&path).is_err());
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn momentum_update_is_convex_combination() {
        let mut q = ParamSet::new("q");
        q.add("w", arr1(&[1.0, 2.0]).into_dyn());
        let mut k = ParamSet::new("k");
        k.add("w", arr1(&[0.0, 0.0]).into_dyn());
        k.momentum_update_from(&q, 0.999).unwrap();
        assert!((k.value(VarId(0))[[0]] - 0.001).abs() < 1e-12);
        assert!((k.value(VarId(0))[[1]] - 0.002).abs() < 1e-12);

        // m=1 leaves key unchanged; m=0 copies the query.
        let mut k1 = ParamSet::new("k");
        k1.add("w", arr1(&[0.5, 0.5]).into_dyn());
        k1.momentum_update_from(&q, 1.0).unwrap();
        assert_eq!(k1.value(VarId(0))[[0]], 0.5);
        k1.momentum_update_from(&q, 0.0).unwrap();
        assert_eq!(k1.value(VarId(0))[[0]], 1.0);
    }
}
