use std::rc::Rc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::layers::{canonical_groups, tile_index, uniform_segments, Attention, FeedForward, LayerNorm};
use super::{ModelError, Result};
use crate::params::{Binder, Group, ParamId, ParamStore};
use crate::tensor::{AttentionLayout, Float, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct QFormerConfig {
    pub queries: usize,
    pub layers: usize,
    pub heads: usize,
    pub d: usize,
    pub ffn_mult: usize,
}

impl QFormerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.queries == 0 || self.layers == 0 || self.heads == 0 || self.d == 0 || self.ffn_mult == 0 {
            return Err(ModelError::Config("query former sizes must be positive".into()));
        }
        if self.d % self.heads != 0 {
            return Err(ModelError::Config(format!("d = {} is not divisible by {} heads", self.d, self.heads)));
        }
        Ok(())
    }

    /// Closed-form parameter count.
    pub fn parameter_count(&self) -> usize {
        let (d, f) = (self.d, self.d * self.ffn_mult);
        let attention = 4 * (d * d + d);
        let per_layer = 2 * attention + (d * f + f) + (f * d + d) + 3 * 2 * d;
        self.layers * per_layer + self.queries * d + 2 * 2 * d
    }
}

#[derive(Clone, Debug, PartialEq)]
struct Block {
    ln_self: LayerNorm,
    self_attn: Attention,
    ln_cross: LayerNorm,
    cross_attn: Attention,
    ln_ffn: LayerNorm,
    ffn: FeedForward,
}

/// Learned queries that attend to a variable-size set of input rows and
/// return a fixed number of tokens per set.
#[derive(Clone, Debug, PartialEq)]
pub struct QFormer {
    pub config: QFormerConfig,
    pub queries: ParamId,
    ln_inputs: LayerNorm,
    blocks: Vec<Block>,
    ln_out: LayerNorm,
}

impl QFormer {
    pub fn new<F: Float, R: Rng + ?Sized>(s: &mut ParamStore<F>, name: &str, group: Group, config: QFormerConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let d = config.d;
        let queries = s.add(
            format!("{name}.queries"),
            group,
            Tensor::randn([config.queries, d], 1.0, rng),
        );
        let ln_inputs = LayerNorm::new(s, &format!("{name}.ln_inputs"), group, d);
        let blocks = (0..config.layers)
            .map(|l| {
                let p = format!("{name}.layers.{l}");
                Block {
                    ln_self: LayerNorm::new(s, &format!("{p}.ln_self"), group, d),
                    self_attn: Attention::new(s, &format!("{p}.self_attn"), group, d, rng),
                    ln_cross: LayerNorm::new(s, &format!("{p}.ln_cross"), group, d),
                    cross_attn: Attention::new(s, &format!("{p}.cross_attn"), group, d, rng),
                    ln_ffn: LayerNorm::new(s, &format!("{p}.ln_ffn"), group, d),
                    ffn: FeedForward::new(s, &format!("{p}.ffn"), group, d, d * config.ffn_mult, rng),
                }
            })
            .collect();
        let ln_out = LayerNorm::new(s, &format!("{name}.ln_out"), group, d);
        Ok(Self {
            config,
            queries,
            ln_inputs,
            blocks,
            ln_out,
        })
    }

    /// Encodes each group of rows of `inputs` into `queries` tokens;
    /// returns `[groups · queries × d]`. Rows outside every group play no
    /// part, which is how padding is masked.
    pub fn forward<F: Float>(&self, b: &Binder<'_, F>, inputs: Var, groups: &[Vec<usize>]) -> Result<Var> {
        if groups.is_empty() {
            return Err(ModelError::Empty("no input sets"));
        }
        if groups.iter().any(Vec::is_empty) {
            return Err(ModelError::Empty("input set with every row masked"));
        }
        let g = b.graph();
        let k = self.config.queries;
        let (order, ranges) = canonical_groups(g, inputs, groups);
        let kv = self.ln_inputs.forward(b, g.gather_rows(inputs, &order)?)?;
        let self_layout = Rc::new(AttentionLayout::blocks(k, &uniform_segments(groups.len(), k), self.config.heads));
        let cross_layout = Rc::new(AttentionLayout::blocks(k, &ranges, self.config.heads));

        let mut x = g.gather_rows(b.var(self.queries), &tile_index(k, 1).repeat(groups.len()))?;
        for blk in &self.blocks {
            let n = blk.ln_self.forward(b, x)?;
            x = g.add(x, blk.self_attn.forward(b, n, n, &self_layout)?)?;
            let n = blk.ln_cross.forward(b, x)?;
            x = g.add(x, blk.cross_attn.forward(b, n, kv, &cross_layout)?)?;
            let n = blk.ln_ffn.forward(b, x)?;
            x = g.add(x, blk.ffn.forward(b, n)?)?;
        }
        Ok(self.ln_out.forward(b, x)?)
    }
}
