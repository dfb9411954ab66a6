//! Full network: backbone → fusion → decoder → head.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::autograd::{Tape, Var};
use crate::backbone::{self, BackboneFeatures};
use crate::config::ModelConfig;
use crate::decoder::{self, DecoderOutput};
use crate::error::{Error, Result};
use crate::head::{self, SegmentPrediction};
use crate::nn::{Ctx, Init, Mode, NormUpdate, ParamStore};
use crate::tensor::Tensor;

/// Input images hold values in `[0, 1]`; the network sees them centred and scaled.
const PIXEL_MEAN: f64 = 0.5;
const PIXEL_STD: f64 = 0.25;

pub fn normalize_image(image: &Tensor) -> Tensor {
    image.map(|v| (v - PIXEL_MEAN) / PIXEL_STD)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    config: ModelConfig,
    params: ParamStore,
}

/// Everything recorded by one batched forward pass.
pub struct ForwardPass {
    pub features: Vec<BackboneFeatures>,
    /// Fused 1/8 feature per image.
    pub fused: Vec<Var>,
    pub outputs: Vec<DecoderOutput>,
    /// Parameter leaves, by name.
    pub bound: BTreeMap<String, Var>,
    pub norm_updates: Vec<NormUpdate>,
}

pub fn init_params(config: &ModelConfig, seed: u64) -> ParamStore {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut init = Init { rng: &mut rng };
    let mut store = ParamStore::new();
    backbone::init_params(config, &mut store, &mut init);
    head::init_params(config, &mut store, &mut init);
    decoder::init_params(config, &mut store, &mut init);
    store
}

impl Model {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let params = init_params(&config, seed);
        Ok(Self { config, params })
    }

    /// Wraps existing parameters, checking names and shapes against `config`.
    pub fn from_parts(config: ModelConfig, params: ParamStore) -> Result<Self> {
        config.validate()?;
        let reference = init_params(&config, 0);
        let expected: Vec<(&String, &[usize])> = reference
            .params()
            .chain(reference.buffers())
            .map(|(k, v)| (k, v.shape()))
            .collect();
        let actual: Vec<(&String, &[usize])> = params
            .params()
            .chain(params.buffers())
            .map(|(k, v)| (k, v.shape()))
            .collect();
        if expected != actual {
            let missing = expected.iter().find(|e| !actual.contains(e));
            let extra = actual.iter().find(|a| !expected.contains(a));
            return Err(Error::Config(format!(
                "parameters do not match the configuration (expected {:?}, unexpected {:?})",
                missing, extra
            )));
        }
        Ok(Self { config, params })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn into_parts(self) -> (ModelConfig, ParamStore) {
        (self.config, self.params)
    }

    /// Records a forward pass over a batch of same-sized `[3, H, W]` images
    /// (H and W multiples of 32, values in `[0, 1]`).
    pub fn forward(&self, tape: &mut Tape, images: &[Tensor], mode: Mode, track_grads: bool) -> Result<ForwardPass> {
        let cfg = &self.config;
        let mut ctx = Ctx::new(tape, &self.params, mode, track_grads);
        let inputs: Vec<Var> = images
            .iter()
            .map(|im| ctx.tape.constant(normalize_image(im)))
            .collect();
        let features = backbone::forward(&mut ctx, cfg, &inputs)?;
        let sp: Vec<Var> = features.iter().map(|f| f.f_sp).collect();
        let cp3: Vec<Var> = features.iter().map(|f| f.f_cp3).collect();
        let fused = head::ffm(&mut ctx, cfg, &sp, &cp3)?;
        let outputs = features
            .iter()
            .zip(&fused)
            .map(|(f, &fh)| decoder::run_decoder(&mut ctx, cfg, f, fh))
            .collect::<Result<Vec<_>>>()?;
        let (bound, norm_updates) = ctx.into_parts();
        Ok(ForwardPass {
            features,
            fused,
            outputs,
            bound,
            norm_updates,
        })
    }

    /// Inference on one image whose sides are multiples of 32.
    pub fn predict(&self, image: &Tensor) -> Result<SegmentPrediction> {
        let mut tape = Tape::new();
        let pass = self.forward(&mut tape, std::slice::from_ref(image), Mode::Eval, false)?;
        let last = pass.outputs[0].blocks.last().expect("at least one block");
        let (h, w) = last.mask_hw;
        SegmentPrediction::from_logits(tape.value(last.class_logits), tape.value(last.mask_logits), h, w)
    }

    /// Independent inference over many images, spread over the thread pool.
    pub fn predict_many(&self, images: &[Tensor]) -> Result<Vec<SegmentPrediction>> {
        images.par_iter().map(|im| self.predict(im)).collect()
    }
}

/// Mirror index for reflect padding; handles pads wider than the source.
fn reflect(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let m = i.rem_euclid(period);
    (if m < n as isize { m } else { period - m }) as usize
}

/// Reflect-pads a `[C, H, W]` tensor on the bottom/right to multiples of `multiple`.
pub fn pad_to_multiple(image: &Tensor, multiple: usize) -> Result<Tensor> {
    let (c, h, w) = image.dims3()?;
    if h == 0 || w == 0 {
        return Err(Error::Precondition("cannot pad an empty image".into()));
    }
    let ph = h.div_ceil(multiple) * multiple;
    let pw = w.div_ceil(multiple) * multiple;
    if (ph, pw) == (h, w) {
        return Ok(image.clone());
    }
    let src = image.data();
    Ok(Tensor::from_fn(vec![c, ph, pw], |i| {
        let (ch, y, x) = (i / (ph * pw), (i / pw) % ph, i % pw);
        src[(ch * h + reflect(y as isize, h)) * w + reflect(x as isize, w)]
    }))
}

/// Top-left `h x w` window of a `[C, H, W]` tensor.
pub fn crop(t: &Tensor, h: usize, w: usize) -> Result<Tensor> {
    let (c, th, tw) = t.dims3()?;
    if h > th || w > tw {
        return Err(Error::Precondition(format!("crop {h}x{w} exceeds {th}x{tw}")));
    }
    let src = t.data();
    Ok(Tensor::from_fn(vec![c, h, w], |i| {
        let (ch, y, x) = (i / (h * w), (i / w) % h, i % w);
        src[(ch * th + y) * tw + x]
    }))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reflect_indices() {
        let idx: Vec<usize> = (0..9).map(|i| reflect(i, 4)).collect();
        assert_eq!(idx, vec![0, 1, 2, 3, 2, 1, 0, 1, 2]);
        assert_eq!(reflect(5, 1), 0);
    }

    #[test]
    fn pad_then_crop_recovers_image() {
        let img = Tensor::from_fn(vec![3, 5, 7], |i| i as f64);
        let padded = pad_to_multiple(&img, 32).unwrap();
        assert_eq!(padded.shape(), &[3, 32, 32]);
        assert_eq!(crop(&padded, 5, 7).unwrap(), img);
    }

    #[test]
    fn from_parts_rejects_foreign_params() {
        let cfg = ModelConfig::tiny(3);
        let other = ModelConfig {
            num_queries: 5,
            ..cfg.clone()
        };
        let params = init_params(&other, 1);
        assert!(Model::from_parts(cfg.clone(), params).is_err());
        assert!(Model::from_parts(cfg.clone(), init_params(&cfg, 9)).is_ok());
    }
}
