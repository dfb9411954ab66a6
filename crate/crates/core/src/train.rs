//! Toy training loop: AdamW over the matched set loss with deep supervision.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::Tape;
use crate::dataset::{Dataset, CELL};
use crate::error::{Error, Result};
use crate::eval::{evaluate, Evaluation};
use crate::loss::{total_loss, GroundTruthSegment, LossWeights};
use crate::model::Model;
use crate::nn::{apply_norm_updates, Mode};
use crate::postprocess::PostprocessConfig;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub steps: usize,
    /// Images per step; the whole dataset when larger than it.
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    /// Learning-rate factor for backbone parameters.
    pub backbone_lr_mult: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub bn_momentum: f64,
    /// Seeds batch order.
    pub seed: u64,
    pub loss: LossWeights,
    /// Evaluate on the training set every this many steps (0 = never).
    pub eval_every: usize,
    /// Stop once training-set PQ and mIoU both reach these values.
    pub target_pq: Option<f64>,
    pub target_miou: Option<f64>,
    pub log_every: usize,
    pub postprocess: PostprocessConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 5000,
            batch_size: 8,
            lr: 3e-4,
            weight_decay: 0.05,
            backbone_lr_mult: 0.1,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            bn_momentum: 0.1,
            seed: 0,
            loss: LossWeights::default(),
            eval_every: 0,
            target_pq: None,
            target_miou: None,
            log_every: 50,
            postprocess: PostprocessConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.batch_size > 0
            && self.lr.is_finite()
            && self.lr >= 0.0
            && self.weight_decay >= 0.0
            && self.backbone_lr_mult >= 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.adam_eps > 0.0
            && (0.0..=1.0).contains(&self.bn_momentum);
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid training settings: {self:?}")))
        }
    }
}

/// Whether a parameter is excluded from weight decay: biases, norm affine
/// terms and query embeddings.
pub fn is_decay_exempt(name: &str) -> bool {
    name.ends_with(".bias")
        || name.ends_with(".gamma")
        || name.ends_with(".beta")
        || name.ends_with("query_feat")
        || name.ends_with("query_pos")
}

/// Decoupled-weight-decay Adam.
#[derive(Clone, Debug, Default)]
pub struct AdamW {
    moments: BTreeMap<String, (Tensor, Tensor)>,
    step: u64,
}

impl AdamW {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Applies one update with the given per-parameter gradients.
    pub fn update(&mut self, model: &mut Model, grads: &BTreeMap<String, Tensor>, cfg: &TrainConfig) {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - cfg.beta1.powi(t);
        let bc2 = 1.0 - cfg.beta2.powi(t);
        for (name, p) in model.params_mut().params_mut() {
            let Some(g) = grads.get(name) else { continue };
            let (m, v) = self
                .moments
                .entry(name.clone())
                .or_insert_with(|| (Tensor::zeros(p.shape().to_vec()), Tensor::zeros(p.shape().to_vec())));
            let lr = if name.starts_with("backbone.") {
                cfg.lr * cfg.backbone_lr_mult
            } else {
                cfg.lr
            };
            let wd = if is_decay_exempt(name) { 0.0 } else { cfg.weight_decay };
            let (md, vd) = (m.data_mut(), v.data_mut());
            for (i, (w, &gi)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                md[i] = cfg.beta1 * md[i] + (1.0 - cfg.beta1) * gi;
                vd[i] = cfg.beta2 * vd[i] + (1.0 - cfg.beta2) * gi * gi;
                let mhat = md[i] / bc1;
                let vhat = vd[i] / bc2;
                *w -= lr * (mhat / (vhat.sqrt() + cfg.adam_eps) + wd * *w);
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalPoint {
    pub step: usize,
    pub pq: f64,
    pub miou: f64,
}

#[derive(Clone, Debug)]
pub struct TrainResult {
    pub model: Model,
    /// Batch loss before each update.
    pub loss_curve: Vec<f64>,
    pub evals: Vec<EvalPoint>,
    pub stopped_early: bool,
}

impl TrainResult {
    pub fn steps_run(&self) -> usize {
        self.loss_curve.len()
    }
}

/// One forward/backward pass; returns the mean loss over the batch and
/// the parameter gradients.
pub fn loss_and_grads(
    model: &Model,
    images: &[Tensor],
    targets: &[&[GroundTruthSegment]],
    weights: &LossWeights,
) -> Result<(f64, BTreeMap<String, Tensor>, Vec<crate::nn::NormUpdate>)> {
    let mut tape = Tape::new();
    let pass = model.forward(&mut tape, images, Mode::Train, true)?;
    let mut total = None;
    for (out, gts) in pass.outputs.iter().zip(targets) {
        let (l, _) = total_loss(&mut tape, &out.blocks, gts, weights)?;
        total = Some(match total {
            None => l,
            Some(acc) => tape.add(acc, l)?,
        });
    }
    let total = total.ok_or_else(|| Error::Usage("empty batch".into()))?;
    let loss = tape.scale(total, 1.0 / images.len() as f64);
    let value = tape.value(loss).item();
    if !value.is_finite() {
        return Err(Error::Diverged(format!("loss is {value}")));
    }
    tape.backward(loss)?;
    let mut grads = BTreeMap::new();
    for (name, &var) in &pass.bound {
        if let Some(g) = tape.grad(var) {
            if !g.is_finite() {
                return Err(Error::Diverged(format!("non-finite gradient for {name} (loss {value})")));
            }
            grads.insert(name.clone(), g.clone());
        }
    }
    Ok((value, grads, pass.norm_updates))
}

/// Trains `model` on `dataset`. Deterministic for a fixed model, dataset
/// and configuration.
pub fn train_toy(mut model: Model, dataset: &Dataset, cfg: &TrainConfig) -> Result<TrainResult> {
    cfg.validate()?;
    if dataset.records.is_empty() {
        return Err(Error::Data("training dataset is empty".into()));
    }
    if dataset.table.num_classes() != model.config().num_classes {
        return Err(Error::Config(format!(
            "dataset has {} classes, model expects {}",
            dataset.table.num_classes(),
            model.config().num_classes
        )));
    }
    let targets: Vec<Vec<GroundTruthSegment>> = dataset
        .records
        .iter()
        .map(|r| r.segments(&dataset.table, CELL))
        .collect::<Result<_>>()?;
    for (i, t) in targets.iter().enumerate() {
        if t.len() > model.config().num_queries {
            return Err(Error::Data(format!(
                "record {i} has {} segments but the model has {} queries",
                t.len(),
                model.config().num_queries
            )));
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..dataset.records.len()).collect();
    let batch = cfg.batch_size.min(order.len());
    let mut cursor = order.len();
    let mut opt = AdamW::new();
    let mut loss_curve = Vec::with_capacity(cfg.steps);
    let mut evals = Vec::new();
    let mut stopped_early = false;

    for step in 0..cfg.steps {
        if cursor + batch > order.len() {
            order.shuffle(&mut rng);
            cursor = 0;
        }
        let idx = &order[cursor..cursor + batch];
        cursor += batch;
        let images: Vec<Tensor> = idx.iter().map(|&i| dataset.records[i].image.clone()).collect();
        let tg: Vec<&[GroundTruthSegment]> = idx.iter().map(|&i| targets[i].as_slice()).collect();
        let (loss, grads, norms) = loss_and_grads(&model, &images, &tg, &cfg.loss)
            .map_err(|e| match e {
                Error::Diverged(msg) => Error::Diverged(format!("step {step}: {msg}; records {idx:?}")),
                other => other,
            })?;
        loss_curve.push(loss);
        opt.update(&mut model, &grads, cfg);
        apply_norm_updates(model.params_mut(), &norms, cfg.bn_momentum);
        if cfg.log_every > 0 && (step % cfg.log_every == 0 || step + 1 == cfg.steps) {
            log::info!("step {step} loss {loss:.5}");
        }
        if cfg.eval_every > 0 && (step + 1) % cfg.eval_every == 0 {
            let ev = evaluate(&model, dataset, &cfg.postprocess)?;
            log::info!(
                "step {} train PQ {:.4} mIoU {:.4}",
                step + 1,
                ev.panoptic.pq,
                ev.semantic.miou
            );
            evals.push(EvalPoint {
                step: step + 1,
                pq: ev.panoptic.pq,
                miou: ev.semantic.miou,
            });
            if targets_met(&ev, cfg) {
                stopped_early = step + 1 < cfg.steps;
                break;
            }
        }
    }
    Ok(TrainResult {
        model,
        loss_curve,
        evals,
        stopped_early,
    })
}

fn targets_met(ev: &Evaluation, cfg: &TrainConfig) -> bool {
    if cfg.target_pq.is_none() && cfg.target_miou.is_none() {
        return false;
    }
    cfg.target_pq.is_none_or(|t| ev.panoptic.pq >= t) && cfg.target_miou.is_none_or(|t| ev.semantic.miou >= t)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn decay_exemptions() {
        assert!(is_decay_exempt("backbone.sp.0.conv.bias"));
        assert!(is_decay_exempt("head.ffm.bn.gamma"));
        assert!(is_decay_exempt("decoder.query_feat"));
        assert!(!is_decay_exempt("decoder.0.ca.q.weight"));
    }

    #[test]
    fn adamw_first_step_moves_by_lr() {
        let mut model = Model::new(crate::config::ModelConfig::tiny(2), 0).unwrap();
        let name = "head.cls.bias".to_string();
        let before = model.params().param(&name).unwrap().clone();
        let mut grads = BTreeMap::new();
        grads.insert(name.clone(), Tensor::full(before.shape().to_vec(), 0.5));
        let cfg = TrainConfig::default();
        AdamW::new().update(&mut model, &grads, &cfg);
        let after = model.params().param(&name).unwrap();
        for (a, b) in after.data().iter().zip(before.data()) {
            assert!((b - a - cfg.lr).abs() < 1e-10);
        }
    }
}
