//! Segmentation head: spatial/context fusion, per-query classification and
//! mask prediction.

use crate::autograd::Var;
use crate::config::ModelConfig;
use crate::error::{shape_err, Result};
use crate::nn::{self, Ctx, Init, ParamStore};
use crate::tensor::{self, Tensor};

pub const PREFIX: &str = "head";

/// N soft binary masks, each with a distribution over K real classes plus
/// the trailing no-object class.
#[derive(Clone, Debug, PartialEq)]
pub struct SegmentPrediction {
    /// `[N, h, w]`, values in (0, 1).
    pub masks: Tensor,
    /// `[N, K+1]`, rows sum to one.
    pub class_dists: Tensor,
}

impl SegmentPrediction {
    pub fn from_logits(class_logits: &Tensor, mask_logits: &Tensor, h: usize, w: usize) -> Result<Self> {
        let (n, _) = class_logits.dims2()?;
        let (mn, s) = mask_logits.dims2()?;
        if mn != n || s != h * w {
            return Err(shape_err!(
                "mask logits {:?} do not match {} queries at {}x{}",
                mask_logits.shape(),
                n,
                h,
                w
            ));
        }
        Ok(Self {
            // Large logits round to exactly 0 or 1 in f64; keep the open interval.
            masks: tensor::sigmoid(mask_logits)
                .map(|p| p.clamp(f64::EPSILON, 1.0 - f64::EPSILON))
                .into_reshaped(vec![n, h, w])?,
            class_dists: tensor::softmax(class_logits, 1)?,
        })
    }

    pub fn num_queries(&self) -> usize {
        self.class_dists.shape()[0]
    }

    /// K, excluding the no-object column.
    pub fn num_classes(&self) -> usize {
        self.class_dists.shape()[1] - 1
    }

    pub fn mask_size(&self) -> (usize, usize) {
        (self.masks.shape()[1], self.masks.shape()[2])
    }

    /// Reorders queries: row `i` of the result is row `order[i]` of `self`.
    pub fn permuted(&self, order: &[usize]) -> Self {
        let n = self.num_queries();
        let k1 = self.class_dists.shape()[1];
        let px = self.masks.numel() / n.max(1);
        let mut masks = Vec::with_capacity(self.masks.numel());
        let mut dists = Vec::with_capacity(self.class_dists.numel());
        for &q in order {
            masks.extend_from_slice(&self.masks.data()[q * px..(q + 1) * px]);
            dists.extend_from_slice(&self.class_dists.data()[q * k1..(q + 1) * k1]);
        }
        Self {
            masks: Tensor::new(self.masks.shape().to_vec(), masks).expect("same size"),
            class_dists: Tensor::new(self.class_dists.shape().to_vec(), dists).expect("same size"),
        }
    }
}

/// Class and mask logits recorded for one decoder block.
#[derive(Clone, Copy, Debug)]
pub struct BlockPrediction {
    /// `[N, K+1]`
    pub class_logits: Var,
    /// `[N, h*w]` at 1/8 input resolution.
    pub mask_logits: Var,
    pub mask_hw: (usize, usize),
}

pub fn init_params(cfg: &ModelConfig, store: &mut ParamStore, init: &mut Init) {
    let (c, d) = (cfg.spatial_channels, cfg.hidden_dim);
    init.conv(store, &format!("{PREFIX}.ffm.conv"), c + cfg.cp_proj_dim, c, 3);
    init.batch_norm(store, &format!("{PREFIX}.ffm.bn"), c);
    init.linear(store, &format!("{PREFIX}.ffm.fc1"), c, cfg.fusion_hidden(), true);
    init.linear(store, &format!("{PREFIX}.ffm.fc2"), cfg.fusion_hidden(), c, true);
    init.layer_norm(store, &format!("{PREFIX}.query_norm"), d);
    init.linear(store, &format!("{PREFIX}.cls"), d, cfg.num_classes + 1, cfg.classifier_bias);
    init.linear(store, &format!("{PREFIX}.mask_embed.0"), d, d, true);
    init.linear(store, &format!("{PREFIX}.mask_embed.1"), d, d, true);
    init.linear(store, &format!("{PREFIX}.mask_embed.2"), d, c, true);
}

/// Feature fusion over a batch:
///
/// ```text
/// F'  = BN(relu(conv3x3(concat(F_sp, F_cp3))))
/// a   = sigmoid(fc2(relu(fc1(GAP(F')))))
/// out = F' * a + F'
/// ```
pub fn ffm(ctx: &mut Ctx, cfg: &ModelConfig, f_sp: &[Var], f_cp3: &[Var]) -> Result<Vec<Var>> {
    let mut convs = Vec::with_capacity(f_sp.len());
    for (&sp, &cp) in f_sp.iter().zip(f_cp3) {
        let cat = ctx.tape.concat(&[sp, cp], 0)?;
        let conv = nn::conv2d(ctx, &format!("{PREFIX}.ffm.conv"), cat, 1, 1)?;
        convs.push(ctx.tape.relu(conv));
    }
    let fused = nn::batch_norm(ctx, &format!("{PREFIX}.ffm.bn"), &convs, cfg.norm_eps)?;
    let c = cfg.spatial_channels;
    fused
        .into_iter()
        .map(|f| {
            let gap = ctx.tape.global_avg_pool(f)?;
            let row = ctx.tape.reshape(gap, &[1, c])?;
            let h = nn::linear(ctx, &format!("{PREFIX}.ffm.fc1"), row)?;
            let h = ctx.tape.relu(h);
            let h = nn::linear(ctx, &format!("{PREFIX}.ffm.fc2"), h)?;
            let gate = ctx.tape.sigmoid(h);
            let gate = ctx.tape.reshape(gate, &[c, 1, 1])?;
            let weighted = ctx.tape.mul(f, gate)?;
            ctx.tape.add(weighted, f)
        })
        .collect()
}

pub fn query_norm(ctx: &mut Ctx, cfg: &ModelConfig, q: Var) -> Result<Var> {
    nn::layer_norm(ctx, &format!("{PREFIX}.query_norm"), q, cfg.layer_norm_eps)
}

/// `[N, D]` → `[N, K+1]` logits.
pub fn class_logits(ctx: &mut Ctx, q: Var) -> Result<Var> {
    nn::linear(ctx, &format!("{PREFIX}.cls"), q)
}

/// Row-wise class distributions.
pub fn classify(ctx: &mut Ctx, q: Var) -> Result<Var> {
    let logits = class_logits(ctx, q)?;
    ctx.tape.softmax(logits, 1)
}

/// Three-layer MLP `[N, D]` → `[N, C]`.
pub fn mask_embed(ctx: &mut Ctx, q: Var) -> Result<Var> {
    let h = nn::linear(ctx, &format!("{PREFIX}.mask_embed.0"), q)?;
    let h = ctx.tape.relu(h);
    let h = nn::linear(ctx, &format!("{PREFIX}.mask_embed.1"), h)?;
    let h = ctx.tape.relu(h);
    nn::linear(ctx, &format!("{PREFIX}.mask_embed.2"), h)
}

/// Per-pixel dot products `m_hat · f_hat[:, y, x]` as `[N, h*w]` logits.
pub fn mask_logits(ctx: &mut Ctx, m_hat: Var, f_hat: Var) -> Result<Var> {
    let (c, h, w) = ctx.tape.value(f_hat).dims3()?;
    let flat = ctx.tape.reshape(f_hat, &[c, h * w])?;
    ctx.tape.matmul(m_hat, flat)
}

/// Sigmoid masks `[N, h, w]`.
pub fn predict_masks(ctx: &mut Ctx, m_hat: Var, f_hat: Var) -> Result<Var> {
    let (_, h, w) = ctx.tape.value(f_hat).dims3()?;
    let n = ctx.tape.shape(m_hat)[0];
    let logits = mask_logits(ctx, m_hat, f_hat)?;
    let probs = ctx.tape.sigmoid(logits);
    ctx.tape.reshape(probs, &[n, h, w])
}

/// Class and mask logits for a set of (un-normalized) queries.
pub fn predict(ctx: &mut Ctx, cfg: &ModelConfig, q: Var, f_hat: Var) -> Result<BlockPrediction> {
    let (_, h, w) = ctx.tape.value(f_hat).dims3()?;
    let qn = query_norm(ctx, cfg, q)?;
    let class_logits = class_logits(ctx, qn)?;
    let m_hat = mask_embed(ctx, qn)?;
    let mask_logits = mask_logits(ctx, m_hat, f_hat)?;
    Ok(BlockPrediction {
        class_logits,
        mask_logits,
        mask_hw: (h, w),
    })
}
