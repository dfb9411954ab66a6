//! Analytic parameter and FLOP counts.
//!
//! FLOP convention: one multiply-accumulate is 2 FLOPs, so a convolution
//! costs `2·Cout·Cin·kh·kw·H'·W'` and a matmul `2·m·k·n`. Bias additions,
//! residual sums, gating products and activations cost 1 per element,
//! sigmoid 4, batch norm 2 (inference-time scale and shift), layer norm 5,
//! softmax 5, bilinear resampling 7 per output element and global pooling
//! 1 per input element. Attention masks, argmax and thresholding are free.
//!
//! Parameter counts per module, with `k` the kernel size and `r` the
//! fusion squeeze ratio:
//!
//! ```text
//! conv(ci, co, k)   = co·ci·k² + co
//! linear(i, o)      = i·o + o
//! batch/layer norm  = 2·c
//! decoder block     = 3·2D + 6·(D²+D) + 2·(P·D+D) + 2·e·D² + e·D + D
//! decoder           = 2·N·D + blocks · block
//! ```

use std::collections::BTreeMap;

use serde::Serialize;

use crate::config::ModelConfig;
use crate::error::{Error, Result};

pub const MODULES: [&str; 4] = ["backbone", "fusion", "decoder", "head"];

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize)]
pub struct CostProfile {
    pub total_flops: u64,
    pub per_module_flops: BTreeMap<String, u64>,
    pub total_params: u64,
    pub per_module_params: BTreeMap<String, u64>,
    /// Decoder FLOPs that do not depend on the number of attended positions.
    pub decoder_fixed_flops: u64,
    /// Decoder FLOPs proportional to attended positions (key/value
    /// projections, position encodings, attention products, softmax).
    pub decoder_spatial_flops: u64,
}

fn conv_params(ci: usize, co: usize, k: usize) -> u64 {
    (co * ci * k * k + co) as u64
}

fn linear_params(i: usize, o: usize, bias: bool) -> u64 {
    (i * o + if bias { o } else { 0 }) as u64
}

fn norm_params(c: usize) -> u64 {
    2 * c as u64
}

pub fn module_params(cfg: &ModelConfig) -> BTreeMap<String, u64> {
    let w = &cfg.backbone_widths;
    let (n, d, p, c, e) = (
        cfg.num_queries,
        cfg.hidden_dim,
        cfg.cp_proj_dim,
        cfg.spatial_channels,
        cfg.ffn_expansion,
    );
    let mut backbone = 0;
    let mut cin = 3;
    for &co in w {
        backbone += conv_params(cin, co, 3) + norm_params(co);
        cin = co;
    }
    for &ch in &[w[4], w[3]] {
        backbone += conv_params(ch, ch, 1) + norm_params(ch);
    }
    backbone += conv_params(w[4], p, 1) + conv_params(w[3], p, 1);

    let r = cfg.fusion_hidden();
    let fusion = conv_params(c + p, c, 3) + norm_params(c) + linear_params(c, r, true) + linear_params(r, c, true);

    let block = 3 * norm_params(d)
        + 6 * linear_params(d, d, true)
        + 2 * linear_params(p, d, true)
        + linear_params(d, e * d, true)
        + linear_params(e * d, d, true);
    let decoder = 2 * (n * d) as u64 + cfg.num_blocks() as u64 * block;

    let head = norm_params(d)
        + linear_params(d, cfg.num_classes + 1, cfg.classifier_bias)
        + 2 * linear_params(d, d, true)
        + linear_params(d, c, true);

    [("backbone", backbone), ("fusion", fusion), ("decoder", decoder), ("head", head)]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect()
}

pub fn count_params(cfg: &ModelConfig) -> u64 {
    module_params(cfg).values().sum()
}

/// Parameter-store prefixes belonging to each module.
pub fn module_prefixes(module: &str) -> &'static [&'static str] {
    match module {
        "backbone" => &["backbone."],
        "fusion" => &["head.ffm."],
        "decoder" => &["decoder."],
        "head" => &["head.query_norm.", "head.cls.", "head.mask_embed."],
        _ => &[],
    }
}

#[derive(Default)]
struct Flops {
    total: u64,
}

impl Flops {
    fn add(&mut self, v: usize) {
        self.total += v as u64;
    }

    fn conv(&mut self, ci: usize, co: usize, k: usize, out_px: usize) {
        self.add(2 * co * ci * k * k * out_px + co * out_px);
    }

    fn linear(&mut self, m: usize, i: usize, o: usize, bias: bool) {
        self.add(2 * m * i * o + if bias { m * o } else { 0 });
    }
}

/// FLOPs of a single `Cout x Cin x k x k` convolution producing `out_px`
/// pixels, without bias.
pub fn conv_flops(ci: usize, co: usize, k: usize, out_px: usize) -> u64 {
    (2 * co * ci * k * k * out_px) as u64
}

pub fn count_flops(cfg: &ModelConfig, height: usize, width: usize) -> Result<CostProfile> {
    cfg.validate()?;
    if height == 0 || width == 0 || height % 32 != 0 || width % 32 != 0 {
        return Err(Error::Precondition(format!(
            "resolution {height}x{width} must be a positive multiple of 32"
        )));
    }
    let w = &cfg.backbone_widths;
    let (n, d, p, c, e) = (
        cfg.num_queries,
        cfg.hidden_dim,
        cfg.cp_proj_dim,
        cfg.spatial_channels,
        cfg.ffn_expansion,
    );
    let px = |s: usize| (height / s) * (width / s);

    // Backbone: five conv-BN-relu blocks, ARMs, projections, upsampling.
    let mut bb = Flops::default();
    let mut cin = 3;
    for (i, &co) in w.iter().enumerate() {
        let out = px(2usize << i);
        bb.conv(cin, co, 3, out);
        bb.add(3 * co * out);
        cin = co;
    }
    for (ch, s) in [(w[4], 32), (w[3], 16)] {
        bb.add(ch * px(s)); // pool
        bb.conv(ch, ch, 1, 1);
        bb.add(2 * ch + 4 * ch); // norm + sigmoid
        bb.add(ch * px(s)); // gate
    }
    bb.add(w[4] * px(32) + w[4] * px(32)); // pool and sum
    bb.conv(w[4], p, 1, px(32));
    bb.conv(w[3], p, 1, px(16));
    bb.add(7 * p * px(16) + p * px(16) + 7 * p * px(8));

    let mut fusion = Flops::default();
    let r = cfg.fusion_hidden();
    fusion.conv(c + p, c, 3, px(8));
    fusion.add(3 * c * px(8) + c * px(8));
    fusion.linear(1, c, r, true);
    fusion.add(r + 4 * c);
    fusion.linear(1, r, c, true);
    fusion.add(2 * c * px(8));

    // Decoder blocks.
    let mut fixed = Flops::default();
    let mut spatial = Flops::default();
    for level in cfg.block_schedule() {
        let s = match level {
            crate::config::FeatureLevel::F1 => px(32),
            crate::config::FeatureLevel::F2 => px(16),
            crate::config::FeatureLevel::F3 => px(8),
        };
        // masked cross-attention
        fixed.add(5 * n * d + n * d);
        fixed.linear(n, d, d, true);
        spatial.add(s * p);
        spatial.linear(s, p, d, true);
        spatial.linear(s, p, d, true);
        spatial.add(2 * n * s * d + 5 * cfg.num_heads * n * s + 2 * n * s * d + cfg.num_heads * n * s);
        fixed.linear(n, d, d, true);
        fixed.add(n * d);
        // self-attention
        fixed.add(5 * n * d);
        fixed.linear(n, d, 3 * d, true);
        fixed.add(2 * n * n * d + 6 * cfg.num_heads * n * n + 2 * n * n * d);
        fixed.linear(n, d, d, true);
        fixed.add(n * d);
        // feed-forward
        fixed.add(5 * n * d);
        fixed.linear(n, d, e * d, true);
        fixed.add(n * e * d);
        fixed.linear(n, e * d, d, true);
        fixed.add(n * d);
    }

    // Head, evaluated on the initial queries and after every block.
    let mut head = Flops::default();
    for _ in 0..=cfg.num_blocks() {
        head.add(5 * n * d);
        head.linear(n, d, cfg.num_classes + 1, cfg.classifier_bias);
        head.linear(n, d, d, true);
        head.add(n * d);
        head.linear(n, d, d, true);
        head.add(n * d);
        head.linear(n, d, c, true);
        head.add(2 * n * c * px(8));
    }

    let mut per_module_flops = BTreeMap::new();
    per_module_flops.insert("backbone".to_string(), bb.total);
    per_module_flops.insert("fusion".to_string(), fusion.total);
    per_module_flops.insert("decoder".to_string(), fixed.total + spatial.total);
    per_module_flops.insert("head".to_string(), head.total);
    let per_module_params = module_params(cfg);
    Ok(CostProfile {
        total_flops: per_module_flops.values().sum(),
        per_module_flops,
        total_params: per_module_params.values().sum(),
        per_module_params,
        decoder_fixed_flops: fixed.total,
        decoder_spatial_flops: spatial.total,
    })
}

/// `1.23G`, `456.7M`, `8.9K` style.
pub fn human(v: u64) -> String {
    let v = v as f64;
    if v >= 1e9 {
        format!("{:.2}G", v / 1e9)
    } else if v >= 1e6 {
        format!("{:.2}M", v / 1e6)
    } else if v >= 1e3 {
        format!("{:.2}K", v / 1e3)
    } else {
        format!("{v}")
    }
}

impl CostProfile {
    pub fn to_table(&self) -> String {
        let mut s = format!("{:<10} {:>12} {:>12}\n", "module", "FLOPs", "params");
        for m in MODULES {
            s.push_str(&format!(
                "{:<10} {:>12} {:>12}\n",
                m,
                human(self.per_module_flops.get(m).copied().unwrap_or(0)),
                human(self.per_module_params.get(m).copied().unwrap_or(0))
            ));
        }
        s.push_str(&format!(
            "{:<10} {:>12} {:>12}\n",
            "total",
            human(self.total_flops),
            human(self.total_params)
        ));
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::init_params;

    #[test]
    fn conv_example() {
        assert_eq!(conv_flops(1, 1, 3, 64), 1152);
        assert_eq!(conv_flops(4, 8, 3, 4 * 64), 4 * conv_flops(4, 8, 3, 64));
    }

    #[test]
    fn classifier_params() {
        assert_eq!(linear_params(256, 20, true), 5140);
    }

    #[test]
    fn analytic_params_match_instantiation() {
        for cfg in [ModelConfig::tiny(3), ModelConfig::default()] {
            let store = init_params(&cfg, 0);
            let counts = module_params(&cfg);
            assert_eq!(count_params(&cfg), store.num_params() as u64);
            for m in MODULES {
                let inst: usize = module_prefixes(m).iter().map(|p| store.num_params_under(p)).sum();
                assert_eq!(counts[m], inst as u64, "{m}");
            }
        }
    }

    #[test]
    fn decoder_fixed_part_ignores_resolution() {
        let cfg = ModelConfig::default();
        let a = count_flops(&cfg, 512, 512).unwrap();
        let b = count_flops(&cfg, 640, 640).unwrap();
        assert_eq!(a.decoder_fixed_flops, b.decoder_fixed_flops);
        assert!(b.decoder_spatial_flops > a.decoder_spatial_flops);
        assert_eq!(a.per_module_flops["decoder"], a.decoder_fixed_flops + a.decoder_spatial_flops);
        assert!(b.total_flops > a.total_flops);
        assert_eq!(a.total_flops, a.per_module_flops.values().sum::<u64>());
        assert!(count_flops(&cfg, 100, 96).is_err());
    }
}
