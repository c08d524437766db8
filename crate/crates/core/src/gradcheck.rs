//! Finite-difference checks of every graph operation and of the whole
//! model's training loss.

use std::rc::Rc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::synthetic::{generate, SyntheticSpec};
use crate::data::Sample;
use crate::experiments::{ExperimentError, Result};
use crate::features::{FeatureConfig, FeatureStore, NormStats};
use crate::model::{Ablation, Model, ModelConfig};
use crate::numeric::{NumericConfig, NumericEncoder};
use crate::params::{Binder, ParamStore};
use crate::tensor::{check_gradients, AttentionLayout, GradCheckReport, Graph, Result as TResult, Tensor, TensorError, Var};
use crate::train::{finetune_loss, pair_items, pretrain_loss_with, ItemPair, TrainConfig};

/// Tolerance for ops that are linear in their inputs.
pub const LINEAR_TOLERANCE: f64 = 1e-5;
/// Tolerance for nonlinear ops and the whole model.
pub const MODEL_TOLERANCE: f64 = 1e-4;
pub const STEP: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct OpCheck {
    pub op: &'static str,
    pub linear: bool,
    pub report: GradCheckReport,
}

impl OpCheck {
    pub fn tolerance(&self) -> f64 {
        if self.linear {
            LINEAR_TOLERANCE
        } else {
            MODEL_TOLERANCE
        }
    }

    pub fn passes(&self) -> bool {
        self.report.passes(self.tolerance())
    }
}

type OpFn = fn(&Graph<f64>, &[Var]) -> TResult<Var>;

/// Reduces any output to a scalar with fixed pseudo-random weights so
/// every output element contributes a distinct gradient.
fn weighted_sum(g: &Graph<f64>, x: Var) -> TResult<Var> {
    let shape = g.shape(x);
    let n: usize = shape.iter().product();
    let w: Vec<f64> = (0..n).map(|i| ((i * 7919) % 23) as f64 / 11.0 - 1.0).collect();
    let w = g.constant(Tensor::from_f64(shape, &w)?);
    g.sum(g.mul(x, w)?)
}

fn layout() -> Rc<AttentionLayout> {
    Rc::new(AttentionLayout::blocks(2, &[(0, 3), (3, 2)], 2))
}

/// `(name, linear, input shapes, op)` for every differentiable op.
fn cases() -> Vec<(&'static str, bool, Vec<Vec<usize>>, OpFn)> {
    vec![
        ("matmul", true, vec![vec![3, 4], vec![4, 2]], |g, v| weighted_sum(g, g.matmul(v[0], v[1])?)),
        ("transpose", true, vec![vec![3, 4]], |g, v| weighted_sum(g, g.transpose(v[0])?)),
        ("add", true, vec![vec![3, 4], vec![3, 4]], |g, v| weighted_sum(g, g.add(v[0], v[1])?)),
        ("sub", true, vec![vec![3, 4], vec![3, 4]], |g, v| weighted_sum(g, g.sub(v[0], v[1])?)),
        ("mul", true, vec![vec![3, 4], vec![3, 4]], |g, v| weighted_sum(g, g.mul(v[0], v[1])?)),
        ("add_row", true, vec![vec![3, 4], vec![4]], |g, v| weighted_sum(g, g.add_row(v[0], v[1])?)),
        ("scale", true, vec![vec![3, 4]], |g, v| weighted_sum(g, g.scale(v[0], 1.7)?)),
        ("concat", true, vec![vec![2, 4], vec![3, 4]], |g, v| weighted_sum(g, g.concat(&[v[0], v[1]], 0)?)),
        ("slice", true, vec![vec![3, 5]], |g, v| weighted_sum(g, g.slice(v[0], 1, 1, 3)?)),
        ("gather_rows", true, vec![vec![4, 3]], |g, v| weighted_sum(g, g.gather_rows(v[0], &[2, 0, 2, 3])?)),
        ("reshape", true, vec![vec![3, 4]], |g, v| weighted_sum(g, g.reshape(v[0], &[2, 6])?)),
        ("sum", true, vec![vec![3, 4]], |g, v| g.sum(v[0])),
        ("mean", true, vec![vec![3, 4]], |g, v| g.mean(v[0])),
        ("mean_axis", true, vec![vec![3, 4]], |g, v| weighted_sum(g, g.mean_axis(v[0], 0)?)),
        ("segment_mean", true, vec![vec![5, 3]], |g, v| weighted_sum(g, g.segment_mean(v[0], &[(0, 2), (2, 3)])?)),
        ("gelu", false, vec![vec![3, 4]], |g, v| weighted_sum(g, g.gelu(v[0])?)),
        ("relu", false, vec![vec![3, 4]], |g, v| weighted_sum(g, g.relu(v[0])?)),
        ("layer_norm", false, vec![vec![3, 4], vec![4], vec![4]], |g, v| weighted_sum(g, g.layer_norm(v[0], v[1], v[2])?)),
        ("l2_normalize", false, vec![vec![3, 4]], |g, v| weighted_sum(g, g.l2_normalize(v[0])?)),
        ("row_norm", false, vec![vec![3, 4]], |g, v| weighted_sum(g, g.row_norm(v[0])?)),
        ("softmax", false, vec![vec![3, 4]], |g, v| weighted_sum(g, g.softmax(v[0], 1)?)),
        ("cross_entropy", false, vec![vec![3, 4]], |g, v| g.cross_entropy(v[0], &[1, 0, 3])),
        ("attention", false, vec![vec![4, 4], vec![5, 4], vec![5, 4]], |g, v| {
            weighted_sum(g, g.attention(v[0], v[1], v[2], &layout())?)
        }),
    ]
}

/// Checks each op on seeded random inputs.
pub fn op_suite(seed: u64) -> TResult<Vec<OpCheck>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    cases()
        .into_iter()
        .map(|(op, linear, shapes, f)| {
            let inputs: Vec<Tensor<f64>> = shapes.into_iter().map(|s| Tensor::randn(s, 1.0, &mut rng)).collect();
            let report = check_gradients(&inputs, STEP, f)?;
            Ok(OpCheck { op, linear, report })
        })
        .collect()
}

/// Toy setting of the whole-model check.
pub struct ToyModel {
    pub features: FeatureStore,
    pub store: ParamStore<f64>,
    pub model: Model,
    pub samples: Vec<Sample>,
    pub pairs: Vec<ItemPair>,
}

/// d = 8, two item and two user tokens, two samples with two-event
/// histories.
pub fn toy_model(seed: u64) -> Result<ToyModel> {
    let d = 8;
    let syn = generate(&SyntheticSpec {
        n_users: 8,
        n_items: 24,
        min_history: 4,
        max_history: 5,
        image_width: 6,
        seed,
        ..SyntheticSpec::default()
    })?;
    let ds = syn.dataset()?;
    let mut numeric_store = ParamStore::<f64>::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let numeric = NumericEncoder::init(&mut numeric_store, NumericConfig::for_width(d), &mut rng)?;
    let norms = NormStats::fit(&ds, numeric.config.scale_bound)?;
    let features = FeatureStore::build(&ds, &syn.sidecar, &FeatureConfig::default(), norms, &numeric, &numeric_store)?;
    let cfg = ModelConfig {
        d,
        k_item: 2,
        k_user: 2,
        layers: 1,
        heads: 2,
        ffn_mult: 2,
        reader_layers: 1,
        step_positions: false,
    };
    let mut store = ParamStore::new();
    let model = Model::init(&mut store, &cfg, &Ablation::default(), features.n_slots(), &mut rng)?;
    let target = |s: &Sample| features.events[s.user][s.target].item;
    let mut samples: Vec<Sample> = Vec::new();
    for u in 0..features.events.len() {
        let s = Sample { user: u, start: 0, target: 2 };
        if samples.iter().all(|o| target(o) != target(&s)) {
            samples.push(s);
        }
        if samples.len() == 2 {
            break;
        }
    }
    let mut pairs: Vec<ItemPair> = Vec::new();
    for evs in &features.events {
        let p = ItemPair {
            anchor: evs[0].item,
            positive: evs[1].item,
        };
        let used: Vec<usize> = pairs.iter().flat_map(|q| [q.anchor, q.positive]).collect();
        if p.anchor != p.positive && !used.contains(&p.anchor) && !used.contains(&p.positive) {
            pairs.push(p);
        }
        if pairs.len() == 2 {
            break;
        }
    }
    if samples.len() < 2 || pairs.len() < 2 {
        return Err(crate::data::DataError::Empty("toy batch selection").into());
    }
    Ok(ToyModel {
        features,
        store,
        model,
        samples,
        pairs,
    })
}

/// Fine-tuning loss plus pretraining loss (contrastive and
/// reconstruction), differentiated with respect to every model parameter.
/// The reconstruction targets are detached in training, so they stay at
/// their unperturbed values here.
pub fn whole_model(seed: u64) -> Result<GradCheckReport> {
    let toy = toy_model(seed)?;
    let cfg = TrainConfig::default();
    let targets = {
        let g = Graph::new();
        let b = Binder::new(&g, &toy.store, &[]);
        let batch = toy.model.encode_items(&b, &toy.features, &pair_items(&toy.pairs))?;
        batch.rows.expect("encoded from attributes").targets
    };
    let inputs: Vec<Tensor<f64>> = toy.store.iter().map(|(_, p)| p.value.clone()).collect();
    let lift = |e: crate::train::TrainError| TensorError::Invalid {
        op: "model",
        reason: e.to_string(),
    };
    let report = check_gradients(&inputs, STEP, |g, vars| {
        let b = Binder::from_vars(g, &toy.store, vars);
        let fine = finetune_loss(&b, &toy.model, &toy.features, &toy.samples, &cfg).map_err(lift)?;
        let pre = pretrain_loss_with(&b, &toy.model, &toy.features, &toy.pairs, &cfg, Some(&targets)).map_err(lift)?;
        g.add(fine, pre.total)
    })
    .map_err(|e| ExperimentError::Model(e.into()))?;
    Ok(report)
}
