use serde::{Deserialize, Serialize};

use super::{Ctx, ForwardOutput, SpecBuilder};
use crate::backbones::graph::Var;
use crate::backbones::params::Init;
use crate::error::{Error, Result};

/// Single-head pre-norm transformer over non-overlapping square patches,
/// mean-pooled into a two-logit head.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionConfig {
    pub input_size: usize,
    pub patch: usize,
    pub dim: usize,
    pub depth: usize,
    pub mlp_ratio: usize,
}

impl Default for AttentionConfig {
    fn default() -> Self {
        AttentionConfig {
            input_size: 64,
            patch: 16,
            dim: 64,
            depth: 2,
            mlp_ratio: 2,
        }
    }
}

impl AttentionConfig {
    pub fn with_input(input_size: usize) -> Self {
        AttentionConfig {
            input_size,
            ..Self::default()
        }
    }

    pub(crate) fn validate(&self) -> Result<()> {
        if self.patch == 0 || self.input_size % self.patch != 0 || self.dim == 0 || self.mlp_ratio == 0 {
            return Err(Error::invalid_config(format!(
                "patch size {} must divide input size {}",
                self.patch, self.input_size
            )));
        }
        Ok(())
    }

    pub fn tokens(&self) -> usize {
        let g = self.input_size / self.patch;
        g * g
    }
}

pub(crate) fn declare(cfg: &AttentionConfig, p: &mut SpecBuilder) {
    let d = cfg.dim;
    p.conv("patch", cfg.patch, 3, d);
    p.tensor("pos", vec![cfg.tokens() * d], Init::FanIn(d));
    for i in 0..cfg.depth {
        p.norm(&format!("block{i}.ln1"), d);
        for proj in ["q", "k", "v", "o"] {
            p.linear(&format!("block{i}.{proj}"), d, d);
        }
        p.norm(&format!("block{i}.ln2"), d);
        p.linear(&format!("block{i}.fc1"), d, d * cfg.mlp_ratio);
        p.linear(&format!("block{i}.fc2"), d * cfg.mlp_ratio, d);
    }
    p.norm("final_ln", d);
    p.linear("head", d, 2);
}

pub(crate) fn forward(cfg: &AttentionConfig, ctx: &mut Ctx<'_>, x: Var) -> ForwardOutput {
    let n = ctx.g.value(x).shape()[0];
    let (t, d) = (cfg.tokens(), cfg.dim);
    let patches = ctx.conv("patch", x, cfg.patch, 0);
    let flat = ctx.g.reshape(patches, &[n, t * d]);
    let pos = ctx.p("pos");
    let flat = ctx.g.add_bias(flat, pos);
    let mut h = ctx.g.reshape(flat, &[n, t, d]);

    for i in 0..cfg.depth {
        let y = ctx.norm(&format!("block{i}.ln1"), h);
        let q = ctx.linear(&format!("block{i}.q"), y);
        let k = ctx.linear(&format!("block{i}.k"), y);
        let v = ctx.linear(&format!("block{i}.v"), y);
        let a = super::blocks::attention_graph(ctx.g, q, k, v, d);
        let a = ctx.linear(&format!("block{i}.o"), a);
        h = ctx.g.add(h, a);

        let y = ctx.norm(&format!("block{i}.ln2"), h);
        let y = ctx.linear(&format!("block{i}.fc1"), y);
        let y = ctx.g.gelu(y);
        let y = ctx.linear(&format!("block{i}.fc2"), y);
        h = ctx.g.add(h, y);
    }
    let h = ctx.norm("final_ln", h);
    let embedding = ctx.g.mean_axis(h, 1);
    let logits = ctx.linear("head", embedding);
    ForwardOutput { embedding, logits }
}
