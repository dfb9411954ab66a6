//! Two-stream feature extractor.
//!
//! The spatial path is three stride-2 conv-norm-relu blocks taking the image
//! to 1/8 resolution. The context path continues from the spatial-path
//! output with two more stride-2 blocks (1/16 and 1/32) and recombines them:
//!
//! ```text
//! cp1 = proj1(ARM(F1) + GAP(F1))      1/32
//! cp2 = proj2(ARM(F2)) + Up(cp1)      1/16
//! cp3 = Up(cp2)                       1/8
//! ```
//!
//! ARM runs at the native block width; the 1x1 projections bring each level
//! to `cp_proj_dim` so the sums and the final upsample happen in one space.

use crate::autograd::Var;
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::nn::{self, Ctx, Init, ParamStore};

pub const PREFIX: &str = "backbone";

/// Per-image backbone outputs.
#[derive(Clone, Copy, Debug)]
pub struct BackboneFeatures {
    /// `[C, H/8, W/8]`
    pub f_sp: Var,
    /// `[P, H/32, W/32]`
    pub f_cp1: Var,
    /// `[P, H/16, W/16]`
    pub f_cp2: Var,
    /// `[P, H/8, W/8]`
    pub f_cp3: Var,
}

pub fn init_params(cfg: &ModelConfig, store: &mut ParamStore, init: &mut Init) {
    let w = &cfg.backbone_widths;
    let mut cin = 3;
    for (i, &cout) in w[..3].iter().enumerate() {
        init.conv(store, &format!("{PREFIX}.sp.{i}.conv"), cin, cout, 3);
        init.batch_norm(store, &format!("{PREFIX}.sp.{i}.bn"), cout);
        cin = cout;
    }
    for (i, &cout) in w[3..].iter().enumerate() {
        init.conv(store, &format!("{PREFIX}.cp.{i}.conv"), cin, cout, 3);
        init.batch_norm(store, &format!("{PREFIX}.cp.{i}.bn"), cout);
        cin = cout;
    }
    let (w16, w32) = (w[3], w[4]);
    for (arm, c) in [("arm1", w32), ("arm2", w16)] {
        init.conv(store, &format!("{PREFIX}.{arm}.conv"), c, c, 1);
        init.batch_norm(store, &format!("{PREFIX}.{arm}.bn"), c);
    }
    init.conv(store, &format!("{PREFIX}.proj1"), w32, cfg.cp_proj_dim, 1);
    init.conv(store, &format!("{PREFIX}.proj2"), w16, cfg.cp_proj_dim, 1);
}

/// Stride-2 3x3 conv, batch norm, relu, applied to each image of the batch.
fn down_block(ctx: &mut Ctx, name: &str, xs: &[Var], eps: f64) -> Result<Vec<Var>> {
    let convs = xs
        .iter()
        .map(|&x| nn::conv2d(ctx, &format!("{name}.conv"), x, 2, 1))
        .collect::<Result<Vec<_>>>()?;
    let normed = nn::batch_norm(ctx, &format!("{name}.bn"), &convs, eps)?;
    Ok(normed.into_iter().map(|v| ctx.tape.relu(v)).collect())
}

fn check_input(ctx: &Ctx, x: Var) -> Result<()> {
    let (c, h, w) = ctx.tape.value(x).dims3()?;
    if c != 3 {
        return Err(Error::Precondition(format!("expected a 3-channel image, got {c}")));
    }
    if h == 0 || w == 0 || h % 32 != 0 || w % 32 != 0 {
        return Err(Error::Precondition(format!(
            "image size {h}x{w} is not a positive multiple of 32; pad it first"
        )));
    }
    Ok(())
}

/// Image batch `[3, H, W]` → `[C, H/8, W/8]` each.
pub fn spatial_path(ctx: &mut Ctx, cfg: &ModelConfig, images: &[Var]) -> Result<Vec<Var>> {
    if images.is_empty() {
        return Err(Error::Precondition("empty image batch".into()));
    }
    let shape0 = ctx.tape.shape(images[0]).to_vec();
    for &x in images {
        check_input(ctx, x)?;
        if ctx.tape.shape(x) != shape0 {
            return Err(Error::Precondition("images in a batch must share one size".into()));
        }
    }
    let mut xs = images.to_vec();
    for i in 0..3 {
        xs = down_block(ctx, &format!("{PREFIX}.sp.{i}"), &xs, cfg.norm_eps)?;
    }
    Ok(xs)
}

/// Attention refinement: `x * sigmoid(norm(conv1x1(GAP(x))))` per channel.
pub fn arm(ctx: &mut Ctx, cfg: &ModelConfig, name: &str, xs: &[Var]) -> Result<Vec<Var>> {
    let mut gates = Vec::with_capacity(xs.len());
    for &x in xs {
        let g = ctx.tape.global_avg_pool(x)?;
        gates.push(nn::conv2d(ctx, &format!("{name}.conv"), g, 1, 0)?);
    }
    let gates = nn::batch_norm(ctx, &format!("{name}.bn"), &gates, cfg.norm_eps)?;
    xs.iter()
        .zip(gates)
        .map(|(&x, g)| {
            let s = ctx.tape.sigmoid(g);
            ctx.tape.mul(x, s)
        })
        .collect()
}

/// Context features at 1/32, 1/16 and 1/8 for each spatial-path output.
pub fn context_path(ctx: &mut Ctx, cfg: &ModelConfig, f_sp: &[Var]) -> Result<Vec<[Var; 3]>> {
    let f2 = down_block(ctx, &format!("{PREFIX}.cp.0"), f_sp, cfg.norm_eps)?;
    let f1 = down_block(ctx, &format!("{PREFIX}.cp.1"), &f2, cfg.norm_eps)?;
    let arm1 = arm(ctx, cfg, &format!("{PREFIX}.arm1"), &f1)?;
    let arm2 = arm(ctx, cfg, &format!("{PREFIX}.arm2"), &f2)?;
    let mut out = Vec::with_capacity(f_sp.len());
    for i in 0..f_sp.len() {
        let gap = ctx.tape.global_avg_pool(f1[i])?;
        let sum1 = ctx.tape.add(arm1[i], gap)?;
        let cp1 = nn::conv2d(ctx, &format!("{PREFIX}.proj1"), sum1, 1, 0)?;

        let (_, h16, w16) = ctx.tape.value(f2[i]).dims3()?;
        let lat2 = nn::conv2d(ctx, &format!("{PREFIX}.proj2"), arm2[i], 1, 0)?;
        let up1 = ctx.tape.upsample(cp1, h16, w16, cfg.upsample)?;
        let cp2 = ctx.tape.add(lat2, up1)?;

        let (_, h8, w8) = ctx.tape.value(f_sp[i]).dims3()?;
        let cp3 = ctx.tape.upsample(cp2, h8, w8, cfg.upsample)?;
        out.push([cp1, cp2, cp3]);
    }
    Ok(out)
}

pub fn forward(ctx: &mut Ctx, cfg: &ModelConfig, images: &[Var]) -> Result<Vec<BackboneFeatures>> {
    let sp = spatial_path(ctx, cfg, images)?;
    let cp = context_path(ctx, cfg, &sp)?;
    Ok(sp
        .into_iter()
        .zip(cp)
        .map(|(f_sp, [f_cp1, f_cp2, f_cp3])| BackboneFeatures {
            f_sp,
            f_cp1,
            f_cp2,
            f_cp3,
        })
        .collect())
}
