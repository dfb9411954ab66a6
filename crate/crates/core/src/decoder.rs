//! Query decoder: a stack of pre-norm blocks, each running masked
//! cross-attention over one context feature, self-attention among the
//! queries, and a feed-forward layer, every sublayer with a residual.
//!
//! Each block's cross-attention is restricted to the foreground of the mask
//! predicted from the previous block's queries (the first block uses the
//! prediction from the learnable initial queries).

use std::f64::consts::PI;

use crate::autograd::Var;
use crate::backbone::BackboneFeatures;
use crate::config::{FeatureLevel, ModelConfig};
use crate::error::{shape_err, Result};
use crate::head::{self, BlockPrediction};
use crate::nn::{self, Ctx, Init, ParamStore};
use crate::tensor::{self, Interpolation, Tensor};

pub const PREFIX: &str = "decoder";

/// Which key positions each query may attend to, row-major `[N, S]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AttentionMask {
    rows: usize,
    cols: usize,
    allowed: Vec<bool>,
    /// Rows that had no allowed position and were opened to every position.
    fallback_rows: Vec<usize>,
}

impl AttentionMask {
    pub fn all_allowed(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            allowed: vec![true; rows * cols],
            fallback_rows: Vec::new(),
        }
    }

    /// Builds a mask, opening every row that allows nothing.
    pub fn new(rows: usize, cols: usize, mut allowed: Vec<bool>) -> Result<Self> {
        if allowed.len() != rows * cols {
            return Err(shape_err!("attention mask holds {} entries for {}x{}", allowed.len(), rows, cols));
        }
        let mut fallback_rows = Vec::new();
        if cols > 0 {
            for (r, row) in allowed.chunks_mut(cols).enumerate() {
                if !row.iter().any(|&a| a) {
                    row.fill(true);
                    fallback_rows.push(r);
                }
            }
        }
        Ok(Self {
            rows,
            cols,
            allowed,
            fallback_rows,
        })
    }

    /// Binarizes mask logits (`sigmoid >= 0.5`, i.e. logit >= 0) and brings
    /// them from `src_hw` to `dst_hw`. Nearest mode resizes the binary mask;
    /// bilinear mode resizes the logits and thresholds afterwards.
    pub fn from_mask_logits(
        logits: &Tensor,
        src_hw: (usize, usize),
        dst_hw: (usize, usize),
        mode: Interpolation,
    ) -> Result<Self> {
        let (n, s) = logits.dims2()?;
        if s != src_hw.0 * src_hw.1 {
            return Err(shape_err!("mask logits {:?} vs map {:?}", logits.shape(), src_hw));
        }
        let grid = logits.reshape(vec![n, src_hw.0, src_hw.1])?;
        let resized = match mode {
            Interpolation::Nearest => {
                let binary = grid.map(|v| if v >= 0.0 { 1.0 } else { 0.0 });
                tensor::resize(&binary, dst_hw.0, dst_hw.1, mode)?.map(|v| v - 0.5)
            }
            Interpolation::Bilinear => tensor::resize(&grid, dst_hw.0, dst_hw.1, mode)?,
        };
        let allowed = resized.data().iter().map(|&v| v >= 0.0).collect();
        Self::new(n, dst_hw.0 * dst_hw.1, allowed)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn allowed(&self) -> &[bool] {
        &self.allowed
    }

    pub fn is_allowed(&self, row: usize, col: usize) -> bool {
        self.allowed[row * self.cols + col]
    }

    pub fn fallback_rows(&self) -> &[usize] {
        &self.fallback_rows
    }
}

/// Fixed 2-D sinusoidal encoding, `[h*w, channels]`. The first half of the
/// channels encode the row, the second half the column.
pub fn sine_position_encoding(channels: usize, h: usize, w: usize) -> Tensor {
    let half_y = channels / 2;
    let half_x = channels - half_y;
    let enc = |coord: f64, extent: usize, j: usize, len: usize| {
        let pos = (coord + 1.0) / extent as f64 * 2.0 * PI;
        let freq = 10000f64.powf(2.0 * (j / 2) as f64 / len.max(1) as f64);
        if j % 2 == 0 {
            (pos / freq).sin()
        } else {
            (pos / freq).cos()
        }
    };
    Tensor::from_fn(vec![h * w, channels], |i| {
        let (p, c) = (i / channels, i % channels);
        let (y, x) = (p / w, p % w);
        if c < half_y {
            enc(y as f64, h, c, half_y)
        } else {
            enc(x as f64, w, c - half_y, half_x)
        }
    })
}

pub fn init_params(cfg: &ModelConfig, store: &mut ParamStore, init: &mut Init) {
    let (n, d, p) = (cfg.num_queries, cfg.hidden_dim, cfg.cp_proj_dim);
    init.embedding(store, &format!("{PREFIX}.query_feat"), n, d, cfg.query_init_std);
    init.embedding(store, &format!("{PREFIX}.query_pos"), n, d, cfg.query_init_std);
    for b in 0..cfg.num_blocks() {
        let name = format!("{PREFIX}.{b}");
        init.layer_norm(store, &format!("{name}.ca_norm"), d);
        init.linear(store, &format!("{name}.ca.q"), d, d, true);
        init.linear(store, &format!("{name}.ca.k"), p, d, true);
        init.linear(store, &format!("{name}.ca.v"), p, d, true);
        init.linear(store, &format!("{name}.ca.o"), d, d, true);
        init.layer_norm(store, &format!("{name}.sa_norm"), d);
        for proj in ["q", "k", "v", "o"] {
            init.linear(store, &format!("{name}.sa.{proj}"), d, d, true);
        }
        init.layer_norm(store, &format!("{name}.ffn_norm"), d);
        init.linear(store, &format!("{name}.ffn.0"), d, d * cfg.ffn_expansion, true);
        init.linear(store, &format!("{name}.ffn.1"), d * cfg.ffn_expansion, d, true);
    }
}

/// Multi-head attention of projected queries `[N, D]` over projected keys and
/// values `[S, D]`. Returns the concatenated head outputs and per-head weights.
pub fn multi_head_attention(
    ctx: &mut Ctx,
    num_heads: usize,
    q: Var,
    k: Var,
    v: Var,
    mask: Option<&AttentionMask>,
) -> Result<(Var, Vec<Var>)> {
    let d = ctx.tape.shape(q)[1];
    let dh = d / num_heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut heads = Vec::with_capacity(num_heads);
    let mut weights = Vec::with_capacity(num_heads);
    for h in 0..num_heads {
        let qh = ctx.tape.slice(q, 1, h * dh, dh)?;
        let kh = ctx.tape.slice(k, 1, h * dh, dh)?;
        let vh = ctx.tape.slice(v, 1, h * dh, dh)?;
        let logits = ctx.tape.matmul_t(qh, false, kh, true)?;
        let logits = ctx.tape.scale(logits, scale);
        let att = match mask {
            Some(m) => ctx.tape.masked_softmax_rows(logits, m.allowed())?,
            None => ctx.tape.softmax(logits, 1)?,
        };
        heads.push(ctx.tape.matmul(att, vh)?);
        weights.push(att);
    }
    Ok((ctx.tape.concat(&heads, 1)?, weights))
}

/// Flattens `[P, h, w]` into `[h*w, P]` tokens.
fn tokens(ctx: &mut Ctx, feature: Var) -> Result<Var> {
    let (p, h, w) = ctx.tape.value(feature).dims3()?;
    let flat = ctx.tape.reshape(feature, &[p, h * w])?;
    ctx.tape.transpose(flat)
}

/// `q + W_o · MHA(LN(q) + pos, feature + pe, feature)` restricted by `mask`.
pub fn masked_cross_attention(
    ctx: &mut Ctx,
    cfg: &ModelConfig,
    name: &str,
    q: Var,
    query_pos: Var,
    feature: Var,
    mask: &AttentionMask,
) -> Result<(Var, Vec<Var>)> {
    let (p, h, w) = ctx.tape.value(feature).dims3()?;
    let n = ctx.tape.shape(q)[0];
    if mask.rows() != n || mask.cols() != h * w {
        return Err(shape_err!(
            "attention mask {}x{} for {} queries over {} positions",
            mask.rows(),
            mask.cols(),
            n,
            h * w
        ));
    }
    let qn = nn::layer_norm(ctx, &format!("{name}.ca_norm"), q, cfg.layer_norm_eps)?;
    let qin = ctx.tape.add(qn, query_pos)?;
    let qp = nn::linear(ctx, &format!("{name}.ca.q"), qin)?;
    let toks = tokens(ctx, feature)?;
    let pe = ctx.tape.constant(sine_position_encoding(p, h, w));
    let kin = ctx.tape.add(toks, pe)?;
    let kp = nn::linear(ctx, &format!("{name}.ca.k"), kin)?;
    let vp = nn::linear(ctx, &format!("{name}.ca.v"), toks)?;
    let (att, weights) = multi_head_attention(ctx, cfg.num_heads, qp, kp, vp, Some(mask))?;
    let out = nn::linear(ctx, &format!("{name}.ca.o"), att)?;
    Ok((ctx.tape.add(out, q)?, weights))
}

/// `q + W_o · MHA(LN(q), LN(q), LN(q))`.
pub fn self_attention(ctx: &mut Ctx, cfg: &ModelConfig, name: &str, q: Var) -> Result<Var> {
    let qn = nn::layer_norm(ctx, &format!("{name}.sa_norm"), q, cfg.layer_norm_eps)?;
    let qp = nn::linear(ctx, &format!("{name}.sa.q"), qn)?;
    let kp = nn::linear(ctx, &format!("{name}.sa.k"), qn)?;
    let vp = nn::linear(ctx, &format!("{name}.sa.v"), qn)?;
    let (att, _) = multi_head_attention(ctx, cfg.num_heads, qp, kp, vp, None)?;
    let out = nn::linear(ctx, &format!("{name}.sa.o"), att)?;
    ctx.tape.add(out, q)
}

/// `q + fc1(relu(fc0(LN(q))))`.
pub fn ffn(ctx: &mut Ctx, cfg: &ModelConfig, name: &str, q: Var) -> Result<Var> {
    let qn = nn::layer_norm(ctx, &format!("{name}.ffn_norm"), q, cfg.layer_norm_eps)?;
    let h = nn::linear(ctx, &format!("{name}.ffn.0"), qn)?;
    let h = ctx.tape.relu(h);
    let out = nn::linear(ctx, &format!("{name}.ffn.1"), h)?;
    ctx.tape.add(out, q)
}

/// Attention mask for a block, derived from the previous prediction.
pub fn predict_intermediate_mask(
    ctx: &Ctx,
    cfg: &ModelConfig,
    prev: &BlockPrediction,
    target_hw: (usize, usize),
) -> Result<AttentionMask> {
    AttentionMask::from_mask_logits(
        ctx.tape.value(prev.mask_logits),
        prev.mask_hw,
        target_hw,
        cfg.attn_mask_resize,
    )
}

/// Decoder results for one image.
#[derive(Clone, Debug)]
pub struct DecoderOutput {
    /// Refined queries after the last block, `[N, D]`.
    pub queries: Var,
    /// Prediction after every block; the last entry is the final prediction.
    pub blocks: Vec<BlockPrediction>,
    /// Attention mask used by every block.
    pub masks: Vec<AttentionMask>,
}

fn level_feature(features: &BackboneFeatures, level: FeatureLevel) -> Var {
    match level {
        FeatureLevel::F1 => features.f_cp1,
        FeatureLevel::F2 => features.f_cp2,
        FeatureLevel::F3 => features.f_cp3,
    }
}

pub fn run_decoder(
    ctx: &mut Ctx,
    cfg: &ModelConfig,
    features: &BackboneFeatures,
    f_hat: Var,
) -> Result<DecoderOutput> {
    let q0 = ctx.param(&format!("{PREFIX}.query_feat"))?;
    let query_pos = ctx.param(&format!("{PREFIX}.query_pos"))?;
    let mut prev = head::predict(ctx, cfg, q0, f_hat)?;
    let mut q = q0;
    let schedule = cfg.block_schedule();
    let mut blocks = Vec::with_capacity(schedule.len());
    let mut masks = Vec::with_capacity(schedule.len());
    for (b, &level) in schedule.iter().enumerate() {
        let name = format!("{PREFIX}.{b}");
        let feature = level_feature(features, level);
        let (_, h, w) = ctx.tape.value(feature).dims3()?;
        let mask = predict_intermediate_mask(ctx, cfg, &prev, (h, w))?;
        let (q1, _) = masked_cross_attention(ctx, cfg, &name, q, query_pos, feature, &mask)?;
        let q2 = self_attention(ctx, cfg, &name, q1)?;
        q = ffn(ctx, cfg, &name, q2)?;
        prev = head::predict(ctx, cfg, q, f_hat)?;
        blocks.push(prev);
        masks.push(mask);
    }
    Ok(DecoderOutput {
        queries: q,
        blocks,
        masks,
    })
}
