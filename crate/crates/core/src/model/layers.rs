use std::rc::Rc;

use rand::Rng;

use crate::params::{Binder, Group, ParamId, ParamStore};
use crate::tensor::{cmp_rows, AttentionLayout, Float, Graph, Result, Tensor, Var};

/// Initial weight scale of maps that write into a residual stream.
pub const RESIDUAL_INIT_STD: f64 = 0.02;

#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new<F: Float, R: Rng + ?Sized>(s: &mut ParamStore<F>, name: &str, group: Group, inp: usize, out: usize, rng: &mut R) -> Self {
        Self {
            weight: s.add_weight(&format!("{name}.weight"), group, inp, out, rng),
            bias: s.add_zeros(&format!("{name}.bias"), group, &[out]),
        }
    }

    pub fn with_std<F: Float, R: Rng + ?Sized>(s: &mut ParamStore<F>, name: &str, group: Group, inp: usize, out: usize, std: f64, rng: &mut R) -> Self {
        Self {
            weight: s.add(format!("{name}.weight"), group, Tensor::randn([inp, out], std, rng)),
            bias: s.add_zeros(&format!("{name}.bias"), group, &[out]),
        }
    }

    pub fn forward<F: Float>(&self, b: &Binder<'_, F>, x: Var) -> Result<Var> {
        let g = b.graph();
        g.add_row(g.matmul(x, b.var(self.weight))?, b.var(self.bias))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new<F: Float>(s: &mut ParamStore<F>, name: &str, group: Group, d: usize) -> Self {
        Self {
            gamma: s.add_ones(&format!("{name}.gamma"), group, &[d]),
            beta: s.add_zeros(&format!("{name}.beta"), group, &[d]),
        }
    }

    pub fn forward<F: Float>(&self, b: &Binder<'_, F>, x: Var) -> Result<Var> {
        b.graph().layer_norm(x, b.var(self.gamma), b.var(self.beta))
    }
}

/// Multi-head attention with biased query, key, value and output maps.
#[derive(Clone, Debug, PartialEq)]
pub struct Attention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub out: Linear,
}

impl Attention {
    pub fn new<F: Float, R: Rng + ?Sized>(s: &mut ParamStore<F>, name: &str, group: Group, d: usize, rng: &mut R) -> Self {
        Self {
            q: Linear::new(s, &format!("{name}.q"), group, d, d, rng),
            k: Linear::new(s, &format!("{name}.k"), group, d, d, rng),
            v: Linear::new(s, &format!("{name}.v"), group, d, d, rng),
            out: Linear::with_std(s, &format!("{name}.out"), group, d, d, RESIDUAL_INIT_STD, rng),
        }
    }

    pub fn forward<F: Float>(&self, b: &Binder<'_, F>, queries: Var, keys: Var, layout: &Rc<AttentionLayout>) -> Result<Var> {
        let q = self.q.forward(b, queries)?;
        let k = self.k.forward(b, keys)?;
        let v = self.v.forward(b, keys)?;
        let o = b.graph().attention(q, k, v, layout)?;
        self.out.forward(b, o)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FeedForward {
    pub up: Linear,
    pub down: Linear,
}

impl FeedForward {
    pub fn new<F: Float, R: Rng + ?Sized>(s: &mut ParamStore<F>, name: &str, group: Group, d: usize, hidden: usize, rng: &mut R) -> Self {
        Self {
            up: Linear::new(s, &format!("{name}.up"), group, d, hidden, rng),
            down: Linear::with_std(s, &format!("{name}.down"), group, hidden, d, RESIDUAL_INIT_STD, rng),
        }
    }

    pub fn forward<F: Float>(&self, b: &Binder<'_, F>, x: Var) -> Result<Var> {
        let h = b.graph().gelu(self.up.forward(b, x)?)?;
        self.down.forward(b, h)
    }
}

/// Pre-norm self-attention followed by a pre-norm feed-forward block, both
/// residual.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderLayer {
    pub ln_attn: LayerNorm,
    pub attn: Attention,
    pub ln_ffn: LayerNorm,
    pub ffn: FeedForward,
}

impl EncoderLayer {
    pub fn new<F: Float, R: Rng + ?Sized>(s: &mut ParamStore<F>, name: &str, group: Group, d: usize, hidden: usize, rng: &mut R) -> Self {
        Self {
            ln_attn: LayerNorm::new(s, &format!("{name}.ln_attn"), group, d),
            attn: Attention::new(s, &format!("{name}.attn"), group, d, rng),
            ln_ffn: LayerNorm::new(s, &format!("{name}.ln_ffn"), group, d),
            ffn: FeedForward::new(s, &format!("{name}.ffn"), group, d, hidden, rng),
        }
    }

    pub fn forward<F: Float>(&self, b: &Binder<'_, F>, x: Var, layout: &Rc<AttentionLayout>) -> Result<Var> {
        let g = b.graph();
        let n = self.ln_attn.forward(b, x)?;
        let x = g.add(x, self.attn.forward(b, n, n, layout)?)?;
        let n = self.ln_ffn.forward(b, x)?;
        g.add(x, self.ffn.forward(b, n)?)
    }
}

/// Sorts each group's row indices by the current row values of `x` and
/// lays the groups out back to back. Pooling or attending over the result
/// is then independent of the order rows were supplied in, bit for bit.
pub fn canonical_groups<F: Float>(g: &Graph<F>, x: Var, groups: &[Vec<usize>]) -> (Vec<usize>, Vec<(usize, usize)>) {
    let value = g.value(x);
    let mut flat = Vec::with_capacity(groups.iter().map(Vec::len).sum());
    let mut ranges = Vec::with_capacity(groups.len());
    for grp in groups {
        let mut idx = grp.clone();
        idx.sort_by(|&a, &b| cmp_rows(value.row(a), value.row(b)));
        ranges.push((flat.len(), idx.len()));
        flat.extend(idx);
    }
    (flat, ranges)
}

/// Row indices repeating each of `n` rows `times` times in place.
pub fn tile_index(n: usize, times: usize) -> Vec<usize> {
    (0..n).flat_map(|i| std::iter::repeat_n(i, times)).collect()
}

/// Consecutive equal-length segments.
pub fn uniform_segments(n: usize, len: usize) -> Vec<(usize, usize)> {
    (0..n).map(|i| (i * len, len)).collect()
}

/// `cols` sinusoidal position features for integer `pos`.
pub fn sinusoid(pos: usize, cols: usize) -> Vec<f64> {
    (0..cols)
        .map(|c| {
            let rate = 1.0 / 10_000f64.powf((2 * (c / 2)) as f64 / cols as f64);
            let a = pos as f64 * rate;
            if c % 2 == 0 {
                a.sin()
            } else {
                a.cos()
            }
        })
        .collect()
}
