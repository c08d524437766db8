//! Schema-aware item encoder, interaction assembly, user encoder, reader
//! and the attribute reconstruction head, plus the ablation variants.

mod layers;
mod qformer;

use std::collections::HashMap;
use std::rc::Rc;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use layers::{canonical_groups, sinusoid, EncoderLayer, FeedForward, LayerNorm, Linear};
pub use qformer::{QFormer, QFormerConfig};

use crate::data::Sample;
use crate::features::FeatureStore;
use crate::modality::Modality;
use crate::numeric::{GEO_FEATURES, TIME_FEATURES};
use crate::params::{Binder, Group, ParamId, ParamStore};
use crate::tensor::{AttentionLayout, Float, Segment, Tensor, TensorError, Var};
use layers::{tile_index, uniform_segments};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("model config: {0}")]
    Config(String),
    #[error("empty input: {0}")]
    Empty(&'static str),
    #[error("item {0} is not part of the encoded batch")]
    MissingItem(usize),
    #[error("feature width {got} does not match model width {want}")]
    Width { got: usize, want: usize },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T, E = ModelError> = std::result::Result<T, E>;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SchemaMode {
    /// Attribute embedding = name + type + value.
    #[default]
    Triplet,
    /// Attribute embedding = value only.
    ValueOnly,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionMode {
    #[default]
    Qformer,
    /// Fixed slot order, zero-filled, concatenated into a perceptron.
    Mlp,
    /// One self-attention layer over the attributes, mean-pooled.
    SelfAttention,
    /// Query former over text attributes only, without names or types.
    PureText,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UserMode {
    #[default]
    UserQformer,
    /// Mean of per-interaction mean tokens instead of user queries.
    MeanItems,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReaderMode {
    #[default]
    Transformer,
    /// Mean of the projected user tokens.
    Identity,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Ablation {
    pub schema_mode: SchemaMode,
    pub fusion_mode: FusionMode,
    pub user_mode: UserMode,
    pub reader_mode: ReaderMode,
}

impl Ablation {
    pub fn validate(&self) -> Result<()> {
        if self.fusion_mode == FusionMode::PureText && self.schema_mode == SchemaMode::Triplet {
            return Err(ModelError::Config(
                "`ablation.fusion_mode = \"pure_text\"` requires `ablation.schema_mode = \"value_only\"`".into(),
            ));
        }
        Ok(())
    }

    pub fn label(&self) -> String {
        format!(
            "{}/{}/{}/{}",
            snake(&self.schema_mode),
            snake(&self.fusion_mode),
            snake(&self.user_mode),
            snake(&self.reader_mode)
        )
    }
}

/// The serialized name of a unit enum variant.
pub fn snake<T: Serialize>(v: &T) -> String {
    serde_json::to_value(v)
        .ok()
        .and_then(|v| v.as_str().map(str::to_string))
        .unwrap_or_default()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub d: usize,
    pub k_item: usize,
    pub k_user: usize,
    pub layers: usize,
    pub heads: usize,
    pub ffn_mult: usize,
    pub reader_layers: usize,
    /// Add sinusoidal step indices to interaction tokens.
    pub step_positions: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d: 32,
            k_item: 4,
            k_user: 4,
            layers: 2,
            heads: 4,
            ffn_mult: 4,
            reader_layers: 2,
            step_positions: false,
        }
    }
}

impl ModelConfig {
    pub fn item_qformer(&self) -> QFormerConfig {
        QFormerConfig {
            queries: self.k_item,
            layers: self.layers,
            heads: self.heads,
            d: self.d,
            ffn_mult: self.ffn_mult,
        }
    }

    pub fn user_qformer(&self) -> QFormerConfig {
        QFormerConfig {
            queries: self.k_user,
            ..self.item_qformer()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.item_qformer().validate()?;
        self.user_qformer().validate()
    }
}

#[derive(Clone, Debug, PartialEq)]
enum ItemFusion {
    Qformer(QFormer),
    Mlp { hidden: Linear, out: Linear },
    SelfAttention { layer: EncoderLayer, ln_out: LayerNorm },
}

#[derive(Clone, Debug, PartialEq)]
struct Reader {
    soft_prompt: Linear,
    layers: Vec<EncoderLayer>,
    ln_out: Option<LayerNorm>,
}

#[derive(Clone, Debug, PartialEq)]
struct ReconHead {
    query: Linear,
    hidden: Linear,
    out: Linear,
}

/// Parameter handles of the whole model; values live in a [`ParamStore`].
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub ablation: Ablation,
    pub n_slots: usize,
    type_table: ParamId,
    /// `[time features ‖ 1] → d`, shared by timestamp attributes and
    /// interaction times.
    time_proj: ParamId,
    geo_proj: ParamId,
    fusion: ItemFusion,
    /// `[review ‖ has review ‖ no review] → d`.
    review_proj: ParamId,
    user: Option<QFormer>,
    reader: Reader,
    recon: ReconHead,
}

/// Layout of the attribute rows of an encoded item batch.
#[derive(Clone, Debug, PartialEq)]
pub struct AttributeRows {
    /// `(start, len)` of each item's rows.
    pub ranges: Vec<(usize, usize)>,
    pub slots: Vec<usize>,
    pub modalities: Vec<Modality>,
    /// Value embeddings (frozen part plus the current learned time/geo
    /// projections) as reconstruction targets, row-major `[rows × d]`.
    pub targets: Vec<f64>,
}

/// Encoded items: `tokens` is `[n · k_item × d]`, `pooled` is `[n × d]`.
pub struct ItemBatch {
    pub items: Vec<usize>,
    pub position: HashMap<usize, usize>,
    pub tokens: Var,
    pub pooled: Var,
    pub rows: Option<AttributeRows>,
}

impl ItemBatch {
    /// Wraps token values computed earlier (e.g. the full corpus at
    /// evaluation time) as constants on a fresh graph.
    pub fn from_tokens<F: Float>(b: &Binder<'_, F>, items: Vec<usize>, tokens: Tensor<F>, k: usize) -> Result<Self> {
        let g = b.graph();
        let tokens = g.constant(tokens);
        let pooled = g.segment_mean(tokens, &uniform_segments(items.len(), k))?;
        Ok(Self {
            position: items.iter().enumerate().map(|(p, &i)| (i, p)).collect(),
            items,
            tokens,
            pooled,
            rows: None,
        })
    }
}

fn design_rows<const W: usize>(feats: impl Iterator<Item = Option<[f64; W]>>) -> (Vec<f64>, bool) {
    let mut out = Vec::new();
    let mut any = false;
    for f in feats {
        match f {
            Some(x) => {
                out.extend_from_slice(&x);
                out.push(1.0);
                any = true;
            }
            None => out.extend(std::iter::repeat_n(0.0, W + 1)),
        }
    }
    (out, any)
}

fn constant<F: Float>(b: &Binder<'_, F>, rows: usize, cols: usize, data: &[f64]) -> Result<Var> {
    Ok(b.graph().constant(Tensor::from_f64([rows, cols], data)?))
}

impl Model {
    pub fn init<F: Float, R: Rng + ?Sized>(
        store: &mut ParamStore<F>,
        config: &ModelConfig,
        ablation: &Ablation,
        n_slots: usize,
        rng: &mut R,
    ) -> Result<Self> {
        config.validate()?;
        ablation.validate()?;
        if n_slots == 0 {
            return Err(ModelError::Config("schema has no item attributes".into()));
        }
        let d = config.d;
        let (it, us, rd, rc) = (Group::ItemEncoder, Group::UserEncoder, Group::Reader, Group::ReconHead);
        let type_table = store.add("item.type_table", it, Tensor::randn([Modality::COUNT, d], 0.02, rng));
        let time_proj = store.add_weight("item.time_proj", it, TIME_FEATURES + 1, d, rng);
        let geo_proj = store.add_weight("item.geo_proj", it, GEO_FEATURES + 1, d, rng);
        let fusion = match ablation.fusion_mode {
            FusionMode::Qformer | FusionMode::PureText => {
                ItemFusion::Qformer(QFormer::new(store, "item.qformer", it, config.item_qformer(), rng)?)
            }
            FusionMode::Mlp => ItemFusion::Mlp {
                hidden: Linear::new(store, "item.mlp.hidden", it, n_slots * d, d, rng),
                out: Linear::new(store, "item.mlp.out", it, d, d, rng),
            },
            FusionMode::SelfAttention => ItemFusion::SelfAttention {
                layer: EncoderLayer::new(store, "item.self_attention", it, d, d * config.ffn_mult, rng),
                ln_out: LayerNorm::new(store, "item.self_attention.ln_out", it, d),
            },
        };
        let review_proj = store.add_weight("user.review_proj", us, 3 * d + 2, d, rng);
        let user = match ablation.user_mode {
            UserMode::UserQformer => Some(QFormer::new(store, "user.qformer", us, config.user_qformer(), rng)?),
            UserMode::MeanItems => None,
        };
        let soft_prompt = Linear::new(store, "reader.soft_prompt", rd, d, d, rng);
        let reader = match ablation.reader_mode {
            ReaderMode::Transformer => Reader {
                soft_prompt,
                layers: (0..config.reader_layers)
                    .map(|l| EncoderLayer::new(store, &format!("reader.layers.{l}"), rd, d, d * config.ffn_mult, rng))
                    .collect(),
                ln_out: Some(LayerNorm::new(store, "reader.ln_out", rd, d)),
            },
            ReaderMode::Identity => Reader {
                soft_prompt,
                layers: Vec::new(),
                ln_out: None,
            },
        };
        let recon = ReconHead {
            query: Linear::new(store, "recon.query", rc, d, d, rng),
            hidden: Linear::new(store, "recon.hidden", rc, d, d, rng),
            out: Linear::new(store, "recon.out", rc, d, d, rng),
        };
        Ok(Self {
            config: *config,
            ablation: *ablation,
            n_slots,
            type_table,
            time_proj,
            geo_proj,
            fusion,
            review_proj,
            user,
            reader,
            recon,
        })
    }

    pub fn soft_prompt(&self) -> &Linear {
        &self.reader.soft_prompt
    }

    fn check_width(&self, fs: &FeatureStore) -> Result<()> {
        if fs.d != self.config.d {
            return Err(ModelError::Width {
                got: fs.d,
                want: self.config.d,
            });
        }
        Ok(())
    }

    /// Attribute embeddings of the given items. Returns the matrix of all
    /// rows, item groups, and the row layout.
    fn attribute_matrix<F: Float>(&self, b: &Binder<'_, F>, fs: &FeatureStore, items: &[usize]) -> Result<(Var, Vec<Vec<usize>>, AttributeRows)> {
        let g = b.graph();
        let d = self.config.d;
        let triplet = self.ablation.schema_mode == SchemaMode::Triplet;
        let mut fixed = Vec::new();
        let mut rows = AttributeRows {
            ranges: Vec::with_capacity(items.len()),
            slots: Vec::new(),
            modalities: Vec::new(),
            targets: Vec::new(),
        };
        let mut groups = Vec::with_capacity(items.len());
        for &i in items {
            let attrs = &fs.items[i];
            if attrs.is_empty() {
                return Err(ModelError::Empty("item without attributes"));
            }
            let start = rows.slots.len();
            for a in attrs {
                rows.slots.push(a.slot);
                rows.modalities.push(a.modality);
                rows.targets.extend(&a.value);
                if triplet {
                    fixed.extend(a.value.iter().zip(&fs.name_embeddings[a.slot]).map(|(v, n)| v + n));
                } else {
                    fixed.extend(&a.value);
                }
            }
            rows.ranges.push((start, attrs.len()));
            let all: Vec<usize> = (start..start + attrs.len()).collect();
            let group = if self.ablation.fusion_mode == FusionMode::PureText {
                let text: Vec<usize> = all.iter().copied().filter(|&r| rows.modalities[r] == Modality::Text).collect();
                if text.is_empty() {
                    all
                } else {
                    text
                }
            } else {
                all
            };
            groups.push(group);
        }
        let n = rows.slots.len();
        let attrs_of = || items.iter().flat_map(|&i| fs.items[i].iter());
        let (time_design, any_time) = design_rows(attrs_of().map(|a| a.time));
        let (geo_design, any_geo) = design_rows(attrs_of().map(|a| a.geo));

        let mut h = constant(b, n, d, &fixed)?;
        let mut learned: Option<Var> = None;
        if any_time {
            let t = g.matmul(constant(b, n, TIME_FEATURES + 1, &time_design)?, b.var(self.time_proj))?;
            learned = Some(t);
        }
        if any_geo {
            let q = g.matmul(constant(b, n, GEO_FEATURES + 1, &geo_design)?, b.var(self.geo_proj))?;
            learned = Some(match learned {
                Some(t) => g.add(t, q)?,
                None => q,
            });
        }
        if let Some(l) = learned {
            h = g.add(h, l)?;
            for (t, x) in rows.targets.iter_mut().zip(g.value(l).data()) {
                *t += x.as_f64();
            }
        }
        if triplet {
            let types: Vec<usize> = rows.modalities.iter().map(|m| m.index()).collect();
            h = g.add(h, g.gather_rows(b.var(self.type_table), &types)?)?;
        }
        Ok((h, groups, rows))
    }

    /// Encodes each item into `k_item` tokens.
    pub fn encode_items<F: Float>(&self, b: &Binder<'_, F>, fs: &FeatureStore, items: &[usize]) -> Result<ItemBatch> {
        self.check_width(fs)?;
        if items.is_empty() {
            return Err(ModelError::Empty("no items to encode"));
        }
        let g = b.graph();
        let (d, k) = (self.config.d, self.config.k_item);
        let (h, groups, rows) = self.attribute_matrix(b, fs, items)?;
        let tokens = match &self.fusion {
            ItemFusion::Qformer(qf) => qf.forward(b, h, &groups)?,
            ItemFusion::Mlp { hidden, out } => {
                let zero_row = rows.slots.len();
                let padded = g.concat(&[h, g.constant(Tensor::zeros([1, d]))], 0)?;
                let mut index = vec![zero_row; items.len() * self.n_slots];
                for (p, &(start, len)) in rows.ranges.iter().enumerate() {
                    for r in start..start + len {
                        index[p * self.n_slots + rows.slots[r]] = r;
                    }
                }
                let x = g.reshape(g.gather_rows(padded, &index)?, &[items.len(), self.n_slots * d])?;
                let z = out.forward(b, g.gelu(hidden.forward(b, x)?)?)?;
                g.gather_rows(z, &tile_index(items.len(), k))?
            }
            ItemFusion::SelfAttention { layer, ln_out } => {
                let (order, ranges) = canonical_groups(g, h, &groups);
                let x = g.gather_rows(h, &order)?;
                let segments = ranges
                    .iter()
                    .map(|&(s, l)| Segment {
                        q_start: s,
                        q_len: l,
                        k_start: s,
                        k_len: l,
                    })
                    .collect();
                let layout = Rc::new(AttentionLayout::new(segments, self.config.heads));
                let y = ln_out.forward(b, layer.forward(b, x, &layout)?)?;
                let z = g.segment_mean(y, &ranges)?;
                g.gather_rows(z, &tile_index(items.len(), k))?
            }
        };
        let pooled = g.segment_mean(tokens, &uniform_segments(items.len(), k))?;
        Ok(ItemBatch {
            position: items.iter().enumerate().map(|(p, &i)| (i, p)).collect(),
            items: items.to_vec(),
            tokens,
            pooled,
            rows: Some(rows),
        })
    }

    /// Interaction tokens for every history event of every sample. Event
    /// `e` owns rows `e·k .. e·k + k` (item tokens) and row `E·k + e`
    /// (review context), all shifted by its time embedding.
    fn interaction_tokens<F: Float>(&self, b: &Binder<'_, F>, fs: &FeatureStore, samples: &[Sample], items: &ItemBatch) -> Result<(Var, Vec<(usize, usize)>)> {
        let g = b.graph();
        let (d, k) = (self.config.d, self.config.k_item);
        let mut token_index = Vec::new();
        let mut time_design = Vec::new();
        let mut review_design = Vec::new();
        let mut positions = Vec::new();
        let mut spans = Vec::with_capacity(samples.len());
        for s in samples {
            if s.history_len() == 0 {
                return Err(ModelError::Empty("sample with empty history"));
            }
            spans.push((time_design.len() / (TIME_FEATURES + 1), s.history_len()));
            for t in s.start..s.target {
                let ev = &fs.events[s.user][t];
                let p = *items.position.get(&ev.item).ok_or(ModelError::MissingItem(ev.item))?;
                token_index.extend(p * k..p * k + k);
                time_design.extend_from_slice(&ev.time);
                time_design.push(1.0);
                match &ev.review {
                    Some(r) => {
                        review_design.extend_from_slice(r);
                        review_design.extend([1.0, 0.0]);
                    }
                    None => {
                        review_design.extend(std::iter::repeat_n(0.0, 3 * d));
                        review_design.extend([0.0, 1.0]);
                    }
                }
                positions.push(s.target - 1 - t);
            }
        }
        let e = positions.len();
        let mut time = g.matmul(constant(b, e, TIME_FEATURES + 1, &time_design)?, b.var(self.time_proj))?;
        if self.config.step_positions {
            let steps: Vec<f64> = positions.iter().flat_map(|&p| sinusoid(p, d)).collect();
            time = g.add(time, constant(b, e, d, &steps)?)?;
        }
        let review = g.matmul(constant(b, e, 3 * d + 2, &review_design)?, b.var(self.review_proj))?;
        let item_part = g.add(g.gather_rows(items.tokens, &token_index)?, g.gather_rows(time, &tile_index(e, k))?)?;
        let context = g.add(review, time)?;
        Ok((g.concat(&[item_part, context], 0)?, spans))
    }

    /// User tokens `[samples · k_user × d]`.
    pub fn encode_users<F: Float>(&self, b: &Binder<'_, F>, fs: &FeatureStore, samples: &[Sample], items: &ItemBatch) -> Result<Var> {
        self.check_width(fs)?;
        if samples.is_empty() {
            return Err(ModelError::Empty("no samples"));
        }
        let g = b.graph();
        let k = self.config.k_item;
        let (x, spans) = self.interaction_tokens(b, fs, samples, items)?;
        let e_total: usize = spans.iter().map(|s| s.1).sum();
        let event_rows = |e: usize| (e * k..e * k + k).chain(std::iter::once(e_total * k + e));
        match &self.user {
            Some(qf) => {
                let groups: Vec<Vec<usize>> = spans
                    .iter()
                    .map(|&(start, len)| (start..start + len).flat_map(event_rows).collect())
                    .collect();
                qf.forward(b, x, &groups)
            }
            None => {
                let per_event: Vec<Vec<usize>> = (0..e_total).map(|e| event_rows(e).collect()).collect();
                let (order, ranges) = canonical_groups(g, x, &per_event);
                let pooled = g.segment_mean(g.gather_rows(x, &order)?, &ranges)?;
                let per_sample: Vec<Vec<usize>> = spans.iter().map(|&(s, l)| (s..s + l).collect()).collect();
                let (order, ranges) = canonical_groups(g, pooled, &per_sample);
                let user = g.segment_mean(g.gather_rows(pooled, &order)?, &ranges)?;
                Ok(g.gather_rows(user, &tile_index(samples.len(), self.config.k_user))?)
            }
        }
    }

    /// Soft-prompt projection, reader layers and mean pooling → `[n × d]`.
    pub fn read<F: Float>(&self, b: &Binder<'_, F>, user_tokens: Var) -> Result<Var> {
        let g = b.graph();
        let ku = self.config.k_user;
        let n = g.shape(user_tokens)[0] / ku;
        let mut y = self.reader.soft_prompt.forward(b, user_tokens)?;
        if !self.reader.layers.is_empty() {
            let layout = Rc::new(AttentionLayout::blocks(ku, &uniform_segments(n, ku), self.config.heads));
            for l in &self.reader.layers {
                y = l.forward(b, y, &layout)?;
            }
        }
        if let Some(ln) = &self.reader.ln_out {
            y = ln.forward(b, y)?;
        }
        Ok(g.segment_mean(y, &uniform_segments(n, ku))?)
    }

    /// User vectors `[samples × d]`.
    pub fn user_vectors<F: Float>(&self, b: &Binder<'_, F>, fs: &FeatureStore, samples: &[Sample], items: &ItemBatch) -> Result<Var> {
        let u = self.encode_users(b, fs, samples, items)?;
        self.read(b, u)
    }

    /// Per-attribute predictions of the value embeddings, read out of the
    /// item tokens with a name-and-type conditioned query → `[rows × d]`.
    pub fn reconstruct<F: Float>(&self, b: &Binder<'_, F>, fs: &FeatureStore, items: &ItemBatch) -> Result<Var> {
        let g = b.graph();
        let (d, k) = (self.config.d, self.config.k_item);
        let rows = items.rows.as_ref().ok_or(ModelError::Empty("item batch without attribute rows"))?;
        let n = rows.slots.len();
        let names: Vec<f64> = rows.slots.iter().flat_map(|&s| fs.name_embeddings[s].iter().copied()).collect();
        let types: Vec<usize> = rows.modalities.iter().map(|m| m.index()).collect();
        let keys = g.add(constant(b, n, d, &names)?, g.gather_rows(b.var(self.type_table), &types)?)?;
        let q = self.recon.query.forward(b, keys)?;
        let segments = rows
            .ranges
            .iter()
            .enumerate()
            .map(|(p, &(s, l))| Segment {
                q_start: s,
                q_len: l,
                k_start: p * k,
                k_len: k,
            })
            .collect();
        let layout = Rc::new(AttentionLayout::new(segments, 1));
        let read = g.attention(q, items.tokens, items.tokens, &layout)?;
        Ok(self.recon.out.forward(b, g.gelu(self.recon.hidden.forward(b, read)?)?)?)
    }

    /// Mean squared error between reconstructions and the detached value
    /// embeddings.
    pub fn reconstruction_loss<F: Float>(&self, b: &Binder<'_, F>, fs: &FeatureStore, items: &ItemBatch) -> Result<Var> {
        let rows = items.rows.as_ref().ok_or(ModelError::Empty("item batch without attribute rows"))?;
        self.reconstruction_error(b, fs, items, &rows.targets)
    }

    /// Mean squared error against explicit targets laid out like
    /// [`AttributeRows::targets`].
    pub fn reconstruction_error<F: Float>(&self, b: &Binder<'_, F>, fs: &FeatureStore, items: &ItemBatch, targets: &[f64]) -> Result<Var> {
        let g = b.graph();
        let pred = self.reconstruct(b, fs, items)?;
        let rows = items.rows.as_ref().expect("checked by reconstruct");
        let target = constant(b, rows.slots.len(), self.config.d, targets)?;
        let diff = g.sub(pred, target)?;
        Ok(g.mean(g.mul(diff, diff)?)?)
    }
}
