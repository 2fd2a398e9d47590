use serde::{Deserialize, Serialize};

use super::{Ctx, ForwardOutput, SpecBuilder};
use crate::backbones::graph::{conv_out, ConvGeom, Var};
use crate::error::{Error, Result};

/// Patchify stem, then stages of residual blocks
/// `x + pw2(gelu(pw1(LN(dw7(x)))))` separated by LN + stride-2 downsampling.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WaveNextConfig {
    pub input_size: usize,
    pub stem_patch: usize,
    pub dims: Vec<usize>,
    pub depths: Vec<usize>,
    pub expansion: usize,
}

impl Default for WaveNextConfig {
    fn default() -> Self {
        WaveNextConfig {
            input_size: 64,
            stem_patch: 4,
            dims: vec![32, 64],
            depths: vec![2, 1],
            expansion: 4,
        }
    }
}

const DW_KERNEL: usize = 7;

impl WaveNextConfig {
    pub fn with_input(input_size: usize) -> Self {
        WaveNextConfig {
            input_size,
            ..Self::default()
        }
    }

    pub(crate) fn validate(&self) -> Result<()> {
        if self.dims.is_empty() || self.dims.len() != self.depths.len() || self.stem_patch == 0 {
            return Err(Error::invalid_config("wavenext dims and depths must be non-empty and aligned"));
        }
        let mut side = self.input_size / self.stem_patch;
        for _ in 1..self.dims.len() {
            side /= 2;
        }
        if side == 0 {
            return Err(Error::invalid_config("input too small for the wavenext stages"));
        }
        Ok(())
    }

    /// Spatial size `(h, w)` of the stem output.
    pub fn stem_shape(&self) -> (usize, usize) {
        let g = ConvGeom {
            kernel: self.stem_patch,
            stride: self.stem_patch,
            pad: 0,
        };
        conv_out(self.input_size, self.input_size, g)
    }
}

pub(crate) fn declare(cfg: &WaveNextConfig, p: &mut SpecBuilder) {
    p.conv("stem", cfg.stem_patch, 3, cfg.dims[0]);
    p.norm("stem_ln", cfg.dims[0]);
    for (s, (&dim, &depth)) in cfg.dims.iter().zip(&cfg.depths).enumerate() {
        if s > 0 {
            p.norm(&format!("down{s}.ln"), cfg.dims[s - 1]);
            p.conv(&format!("down{s}.conv"), 2, cfg.dims[s - 1], dim);
        }
        for b in 0..depth {
            let name = format!("stage{s}.block{b}");
            p.depthwise(&format!("{name}.dw"), DW_KERNEL, dim);
            p.norm(&format!("{name}.ln"), dim);
            p.linear(&format!("{name}.pw1"), dim, dim * cfg.expansion);
            p.linear(&format!("{name}.pw2"), dim * cfg.expansion, dim);
        }
    }
    let last = *cfg.dims.last().unwrap();
    p.norm("final_ln", last);
    p.linear("head", last, 1);
}

pub(crate) fn stem(cfg: &WaveNextConfig, ctx: &mut Ctx<'_>, x: Var) -> Var {
    let h = ctx.conv("stem", x, cfg.stem_patch, 0);
    ctx.norm("stem_ln", h)
}

pub(crate) fn forward(cfg: &WaveNextConfig, ctx: &mut Ctx<'_>, x: Var) -> ForwardOutput {
    let mut h = stem(cfg, ctx, x);
    for (s, &depth) in cfg.depths.iter().enumerate() {
        if s > 0 {
            let y = ctx.norm(&format!("down{s}.ln"), h);
            h = ctx.conv(&format!("down{s}.conv"), y, 2, 0);
        }
        for b in 0..depth {
            let name = format!("stage{s}.block{b}");
            let y = ctx.depthwise(&format!("{name}.dw"), h, DW_KERNEL / 2);
            let y = ctx.norm(&format!("{name}.ln"), y);
            let y = ctx.linear(&format!("{name}.pw1"), y);
            let y = ctx.g.gelu(y);
            let y = ctx.linear(&format!("{name}.pw2"), y);
            h = ctx.g.add(h, y);
        }
    }
    let pooled = ctx.g.spatial_mean(h);
    let embedding = ctx.norm("final_ln", pooled);
    let logits = ctx.linear("head", embedding);
    ForwardOutput { embedding, logits }
}
