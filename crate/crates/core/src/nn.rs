//! Named parameters, initializers and the layer helpers shared by every
//! network module.

use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Trainable parameters plus non-trainable buffers (running statistics),
/// both keyed by dotted path names. Ordered maps keep iteration deterministic.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: BTreeMap<String, Tensor>,
    buffers: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert_param(&mut self, name: impl Into<String>, value: Tensor) {
        self.params.insert(name.into(), value);
    }

    pub fn insert_buffer(&mut self, name: impl Into<String>, value: Tensor) {
        self.buffers.insert(name.into(), value);
    }

    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name)
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.params.get_mut(name)
    }

    pub fn buffer(&self, name: &str) -> Option<&Tensor> {
        self.buffers.get(name)
    }

    pub fn buffer_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.buffers.get_mut(name)
    }

    pub fn params(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.params.iter()
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.params.iter_mut()
    }

    pub fn buffers(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.buffers.iter()
    }

    /// Number of trainable scalars.
    pub fn num_params(&self) -> usize {
        self.params.values().map(Tensor::numel).sum()
    }

    /// Trainable scalars whose name starts with `prefix`.
    pub fn num_params_under(&self, prefix: &str) -> usize {
        self.params
            .iter()
            .filter(|(k, _)| k.starts_with(prefix))
            .map(|(_, v)| v.numel())
            .sum()
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name) || self.buffers.contains_key(name)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Normalization uses batch statistics and reports running-stat updates.
    Train,
    /// Normalization uses stored running statistics.
    Eval,
}

/// Batch statistics observed by one normalization layer during a training pass.
#[derive(Clone, Debug, PartialEq)]
pub struct NormUpdate {
    pub name: String,
    pub mean: Vec<f64>,
    /// Unbiased variance estimate.
    pub var: Vec<f64>,
}

/// Forward-pass context: the tape being recorded, the parameters it reads,
/// and the parameter leaves bound so far.
pub struct Ctx<'a> {
    pub tape: &'a mut Tape,
    params: &'a ParamStore,
    mode: Mode,
    track_grads: bool,
    bound: BTreeMap<String, Var>,
    norm_updates: Vec<NormUpdate>,
}

impl<'a> Ctx<'a> {
    pub fn new(tape: &'a mut Tape, params: &'a ParamStore, mode: Mode, track_grads: bool) -> Self {
        Self {
            tape,
            params,
            mode,
            track_grads,
            bound: BTreeMap::new(),
            norm_updates: Vec::new(),
        }
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn store(&self) -> &ParamStore {
        self.params
    }

    /// The parameter `name` as a tape leaf, bound once per pass.
    pub fn param(&mut self, name: &str) -> Result<Var> {
        if let Some(&v) = self.bound.get(name) {
            return Ok(v);
        }
        let value = self
            .params
            .param(name)
            .ok_or_else(|| Error::Config(format!("missing parameter `{}`", name)))?
            .clone();
        let v = self.tape.leaf(value, self.track_grads);
        self.bound.insert(name.to_string(), v);
        Ok(v)
    }

    pub fn has_param(&self, name: &str) -> bool {
        self.params.param(name).is_some()
    }

    pub fn buffer(&self, name: &str) -> Result<&Tensor> {
        self.params
            .buffer(name)
            .ok_or_else(|| Error::Config(format!("missing buffer `{}`", name)))
    }

    /// Parameter leaves bound during this pass.
    pub fn bound(&self) -> &BTreeMap<String, Var> {
        &self.bound
    }

    pub fn into_parts(self) -> (BTreeMap<String, Var>, Vec<NormUpdate>) {
        (self.bound, self.norm_updates)
    }
}

/// Seeded parameter initialization.
pub struct Init<'r> {
    pub rng: &'r mut ChaCha8Rng,
}

impl Init<'_> {
    fn normal(&mut self, shape: Vec<usize>, std: f64) -> Tensor {
        let dist = Normal::new(0.0, std).expect("finite std");
        Tensor::from_fn(shape, |_| dist.sample(self.rng))
    }

    /// `[in, out]` weight (Xavier-uniform) and optional zero bias.
    pub fn linear(&mut self, store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize, bias: bool) {
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let rng = &mut *self.rng;
        let w = Tensor::from_fn(vec![fan_in, fan_out], |_| rng.random_range(-bound..bound));
        store.insert_param(format!("{name}.weight"), w);
        if bias {
            store.insert_param(format!("{name}.bias"), Tensor::zeros(vec![fan_out]));
        }
    }

    /// `[cout, cin, k, k]` kernel (He-normal) with a zero bias.
    pub fn conv(&mut self, store: &mut ParamStore, name: &str, cin: usize, cout: usize, k: usize) {
        let std = (2.0 / (cin * k * k) as f64).sqrt();
        store.insert_param(format!("{name}.weight"), self.normal(vec![cout, cin, k, k], std));
        store.insert_param(format!("{name}.bias"), Tensor::zeros(vec![cout]));
    }

    pub fn batch_norm(&mut self, store: &mut ParamStore, name: &str, c: usize) {
        store.insert_param(format!("{name}.gamma"), Tensor::ones(vec![c]));
        store.insert_param(format!("{name}.beta"), Tensor::zeros(vec![c]));
        store.insert_buffer(format!("{name}.running_mean"), Tensor::zeros(vec![c]));
        store.insert_buffer(format!("{name}.running_var"), Tensor::ones(vec![c]));
    }

    pub fn layer_norm(&mut self, store: &mut ParamStore, name: &str, n: usize) {
        store.insert_param(format!("{name}.gamma"), Tensor::ones(vec![n]));
        store.insert_param(format!("{name}.beta"), Tensor::zeros(vec![n]));
    }

    pub fn embedding(&mut self, store: &mut ParamStore, name: &str, rows: usize, cols: usize, std: f64) {
        store.insert_param(name, self.normal(vec![rows, cols], std));
    }
}

/// `x · W + b` for `x: [m, in]`.
pub fn linear(ctx: &mut Ctx, name: &str, x: Var) -> Result<Var> {
    let w = ctx.param(&format!("{name}.weight"))?;
    let y = ctx.tape.matmul(x, w)?;
    let bias = format!("{name}.bias");
    if ctx.has_param(&bias) {
        let b = ctx.param(&bias)?;
        ctx.tape.add(y, b)
    } else {
        Ok(y)
    }
}

pub fn conv2d(ctx: &mut Ctx, name: &str, x: Var, stride: usize, padding: usize) -> Result<Var> {
    let w = ctx.param(&format!("{name}.weight"))?;
    let bias = format!("{name}.bias");
    let b = if ctx.has_param(&bias) {
        Some(ctx.param(&bias)?)
    } else {
        None
    };
    ctx.tape.conv2d(x, w, b, stride, padding)
}

/// Batch normalization over a batch of same-shaped `[C, ...]` maps.
///
/// In training mode statistics are pooled over every image and spatial
/// position of the batch and flow through the graph; in evaluation mode the
/// stored running statistics are used as constants.
pub fn batch_norm(ctx: &mut Ctx, name: &str, xs: &[Var], eps: f64) -> Result<Vec<Var>> {
    let gamma = ctx.param(&format!("{name}.gamma"))?;
    let beta = ctx.param(&format!("{name}.beta"))?;
    let (mean, var) = match ctx.mode {
        Mode::Eval => {
            let m = ctx.buffer(&format!("{name}.running_mean"))?.clone();
            let v = ctx.buffer(&format!("{name}.running_var"))?.clone();
            (ctx.tape.constant(m), ctx.tape.constant(v))
        }
        Mode::Train => {
            let inv_b = 1.0 / xs.len() as f64;
            let mut sum = None;
            for &x in xs {
                let m = ctx.tape.channel_mean(x)?;
                sum = Some(match sum {
                    None => m,
                    Some(s) => ctx.tape.add(s, m)?,
                });
            }
            let mean = ctx.tape.scale(sum.expect("nonempty batch"), inv_b);
            let mut vsum = None;
            for &x in xs {
                let d = ctx.tape.sub(x, mean)?;
                let sq = ctx.tape.mul(d, d)?;
                let v = ctx.tape.channel_mean(sq)?;
                vsum = Some(match vsum {
                    None => v,
                    Some(s) => ctx.tape.add(s, v)?,
                });
            }
            let var = ctx.tape.scale(vsum.expect("nonempty batch"), inv_b);
            let count = xs.len() * ctx.tape.value(xs[0]).numel() / ctx.tape.shape(xs[0])[0].max(1);
            let correction = if count > 1 {
                count as f64 / (count - 1) as f64
            } else {
                1.0
            };
            ctx.norm_updates.push(NormUpdate {
                name: name.to_string(),
                mean: ctx.tape.value(mean).data().to_vec(),
                var: ctx.tape.value(var).data().iter().map(|v| v * correction).collect(),
            });
            (mean, var)
        }
    };
    xs.iter()
        .map(|&x| ctx.tape.normalize_affine(x, mean, var, gamma, beta, eps))
        .collect()
}

pub fn layer_norm(ctx: &mut Ctx, name: &str, x: Var, eps: f64) -> Result<Var> {
    let gamma = ctx.param(&format!("{name}.gamma"))?;
    let beta = ctx.param(&format!("{name}.beta"))?;
    ctx.tape.layer_norm_rows(x, gamma, beta, eps)
}

/// Blends observed batch statistics into the stored running statistics.
pub fn apply_norm_updates(store: &mut ParamStore, updates: &[NormUpdate], momentum: f64) {
    for u in updates {
        for (key, fresh) in [("running_mean", &u.mean), ("running_var", &u.var)] {
            if let Some(buf) = store.buffer_mut(&format!("{}.{}", u.name, key)) {
                for (r, f) in buf.data_mut().iter_mut().zip(fresh.iter()) {
                    *r = (1.0 - momentum) * *r + momentum * f;
                }
            }
        }
    }
}
