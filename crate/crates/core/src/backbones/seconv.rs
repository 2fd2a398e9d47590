use serde::{Deserialize, Serialize};

use super::{Ctx, ForwardOutput, SpecBuilder};
use crate::backbones::graph::Var;
use crate::error::{Error, Result};

/// Strided 3×3 convolutions with swish activations, each stage after the
/// stem gated by squeeze-excitation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeConvConfig {
    pub input_size: usize,
    pub stem_channels: usize,
    /// `(output channels, stride)` per stage.
    pub stages: Vec<(usize, usize)>,
    pub se_reduction: usize,
}

impl Default for SeConvConfig {
    fn default() -> Self {
        SeConvConfig {
            input_size: 64,
            stem_channels: 16,
            stages: vec![(32, 2), (64, 2), (64, 1)],
            se_reduction: 4,
        }
    }
}

impl SeConvConfig {
    pub fn with_input(input_size: usize) -> Self {
        SeConvConfig {
            input_size,
            ..Self::default()
        }
    }

    /// Two narrow stages; fast enough for desk-scale experiments.
    pub fn compact(input_size: usize) -> Self {
        SeConvConfig {
            input_size,
            stem_channels: 8,
            stages: vec![(16, 2), (16, 2)],
            se_reduction: 4,
        }
    }

    pub(crate) fn validate(&self) -> Result<()> {
        if self.input_size < 8 || self.stages.is_empty() || self.se_reduction == 0 {
            return Err(Error::invalid_config("se-conv needs input >= 8, one stage and a reduction"));
        }
        for (c, s) in &self.stages {
            if c % self.se_reduction != 0 || *s == 0 {
                return Err(Error::invalid_config(format!(
                    "se reduction {} must divide stage width {c}",
                    self.se_reduction
                )));
            }
        }
        Ok(())
    }

    pub fn embedding_dim(&self) -> usize {
        self.stages.last().map_or(self.stem_channels, |s| s.0)
    }
}

pub(crate) fn declare(cfg: &SeConvConfig, p: &mut SpecBuilder) {
    p.conv("stem", 3, 3, cfg.stem_channels);
    let mut cin = cfg.stem_channels;
    for (i, (cout, _)) in cfg.stages.iter().enumerate() {
        p.conv(&format!("stage{i}.conv"), 3, cin, *cout);
        let r = cout / cfg.se_reduction;
        p.linear(&format!("stage{i}.se1"), *cout, r);
        p.linear(&format!("stage{i}.se2"), r, *cout);
        cin = *cout;
    }
    p.linear("head", cin, 1);
}

pub(crate) fn forward(cfg: &SeConvConfig, ctx: &mut Ctx<'_>, x: Var) -> ForwardOutput {
    let h = ctx.conv("stem", x, 2, 1);
    let mut h = ctx.g.swish(h);
    for (i, (_, stride)) in cfg.stages.iter().enumerate() {
        let c = ctx.conv(&format!("stage{i}.conv"), h, *stride, 1);
        let c = ctx.g.swish(c);
        let z = ctx.g.spatial_mean(c);
        let w1 = ctx.p(&format!("stage{i}.se1.w"));
        let b1 = ctx.p(&format!("stage{i}.se1.b"));
        let w2 = ctx.p(&format!("stage{i}.se2.w"));
        let b2 = ctx.p(&format!("stage{i}.se2.b"));
        let gates = super::blocks::excite_graph(ctx.g, z, w1, b1, w2, b2);
        h = ctx.g.channel_scale(c, gates);
    }
    let embedding = ctx.g.spatial_mean(h);
    let logits = ctx.linear("head", embedding);
    ForwardOutput { embedding, logits }
}
