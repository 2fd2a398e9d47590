use serde::{Deserialize, Serialize};

use super::{Ctx, ForwardOutput, SpecBuilder};
use crate::backbones::graph::Var;
use crate::error::{Error, Result};

/// `sigmoid(wᵀ x + b)` over the flattened input.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogisticConfig {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
}

impl LogisticConfig {
    pub(crate) fn validate(&self) -> Result<()> {
        if self.height * self.width * self.channels == 0 {
            return Err(Error::invalid_config("logistic input must be non-empty"));
        }
        Ok(())
    }

    fn features(&self) -> usize {
        self.height * self.width * self.channels
    }
}

pub(crate) fn declare(cfg: &LogisticConfig, p: &mut SpecBuilder) {
    p.linear("head", cfg.features(), 1);
}

pub(crate) fn forward(cfg: &LogisticConfig, ctx: &mut Ctx<'_>, x: Var) -> ForwardOutput {
    let n = ctx.g.value(x).shape()[0];
    let embedding = ctx.g.reshape(x, &[n, cfg.features()]);
    let logits = ctx.linear("head", embedding);
    ForwardOutput { embedding, logits }
}
