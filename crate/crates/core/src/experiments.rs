//! End-to-end runs: data preparation, the two training stages,
//! evaluation, the ablation grid and the token-count sweep.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::checkpoint::{Checkpoint, CheckpointError, Header};
use crate::config::{ConfigError, RunConfig};
use crate::data::synthetic::generate;
use crate::data::{k_core, DataError, Dataset, LoadOptions, LoadReport, SchemaRegistry, Sidecar, Split};
use crate::eval::{build_candidates, evaluate, model_scorer, Candidates, EvalError, EvalReport, OracleScorer, RandomScorer, ScorerKind};
use crate::features::{FeatureError, FeatureStore, NormStats};
use crate::model::{Ablation, FusionMode, Model, ModelError, SchemaMode, UserMode};
use crate::numeric::{fit_numeric, LossTrace, NumericEncoder, NumericError};
use crate::optim::AdamW;
use crate::params::ParamStore;
use crate::tensor::TensorError;
use crate::train::{finetune, pretrain, EpochHook, Stage, TrainError, TrainLog};

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Features(#[from] FeatureError),
    #[error(transparent)]
    Numeric(#[from] NumericError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
}

/// Failure classes for process exit codes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FailureClass {
    Config = 1,
    Data = 2,
    Numeric = 3,
}

fn tensor_class(e: &TensorError) -> FailureClass {
    match e {
        TensorError::NonFinite { .. } => FailureClass::Numeric,
        _ => FailureClass::Config,
    }
}

impl ExperimentError {
    pub fn class(&self) -> FailureClass {
        use ExperimentError as E;
        match self {
            E::Config(_) | E::Checkpoint(CheckpointError::Mismatch { .. }) => FailureClass::Config,
            E::Data(_) | E::Features(_) | E::Checkpoint(_) => FailureClass::Data,
            E::Eval(EvalError::Config(_)) => FailureClass::Config,
            E::Eval(EvalError::InsufficientNegatives { .. } | EvalError::Empty) => FailureClass::Data,
            E::Numeric(NumericError::Config(_)) | E::Model(ModelError::Config(_)) => FailureClass::Config,
            E::Train(TrainError::Config(_)) => FailureClass::Config,
            E::Train(TrainError::NoExamples(_)) | E::Model(ModelError::Empty(_) | ModelError::MissingItem(_)) => FailureClass::Data,
            E::Model(ModelError::Tensor(t)) | E::Train(TrainError::Tensor(t)) => tensor_class(t),
            E::Train(TrainError::Model(ModelError::Tensor(t))) => tensor_class(t),
            _ => FailureClass::Numeric,
        }
    }
}

pub type Result<T, E = ExperimentError> = std::result::Result<T, E>;

/// Filtered dataset with its sidecar and splits.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub dataset: Dataset,
    pub sidecar: Sidecar,
    pub split: Split,
    pub load_report: Option<LoadReport>,
    /// `(users, items, interactions)` before and after k-core filtering.
    pub counts: [(usize, usize, usize); 2],
}

fn counts(ds: &Dataset) -> (usize, usize, usize) {
    (ds.users.len(), ds.items.len(), ds.n_interactions())
}

pub fn prepare(cfg: &RunConfig) -> Result<Prepared> {
    cfg.validate()?;
    let data = &cfg.data;
    let (raw, sidecar, load_report) = match &data.synthetic {
        Some(spec) => {
            let syn = generate(spec)?;
            (syn.dataset()?, syn.sidecar, None)
        }
        None => {
            let (path, reg) = (data.path.as_ref().expect("validated"), data.registry.as_ref().expect("validated"));
            let registry = SchemaRegistry::load(reg)?;
            let (ds, report) = Dataset::load(path, &registry, LoadOptions { strict: data.strict })?;
            let sidecar = match &data.sidecar {
                Some(p) => Sidecar::load(p)?,
                None => Sidecar::new(),
            };
            (ds, sidecar, Some(report))
        }
    };
    let before = counts(&raw);
    let dataset = if data.min_degree > 1 { k_core(&raw, data.min_degree)? } else { raw };
    let split = Split::build(&dataset);
    if split.test.is_empty() {
        return Err(DataError::Empty("windowing").into());
    }
    Ok(Prepared {
        counts: [before, counts(&dataset)],
        dataset,
        sidecar,
        split,
        load_report,
    })
}

fn rng_for(seed: u64, purpose: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x2545_f491_4f6c_dd1d) ^ purpose)
}

/// A model with its parameters and frozen features.
pub struct Session {
    pub config: RunConfig,
    pub store: ParamStore<f32>,
    pub numeric: NumericEncoder,
    pub features: FeatureStore,
    pub model: Model,
    pub numeric_trace: LossTrace,
    pub stage: Option<Stage>,
    pub optimizer_step: u64,
}

impl Session {
    /// Fits the scalar encoder, freezes the features and initializes the
    /// model.
    pub fn new(config: &RunConfig, prepared: &Prepared) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let ncfg = config.numeric.encoder_config(config.model.d);
        let numeric = NumericEncoder::init(&mut store, ncfg, &mut rng_for(config.seed, 1))?;
        let numeric_trace = fit_numeric(&mut store, &numeric, &config.numeric.train, &mut rng_for(config.seed, 2))?;
        let norms = NormStats::fit(&prepared.dataset, ncfg.scale_bound)?;
        let features = FeatureStore::build(&prepared.dataset, &prepared.sidecar, &config.features, norms, &numeric, &store)?;
        let model = Model::init(&mut store, &config.model, &config.ablation, features.n_slots(), &mut rng_for(config.seed, 3))?;
        Ok(Self {
            config: config.clone(),
            store,
            numeric,
            features,
            model,
            numeric_trace,
            stage: None,
            optimizer_step: 0,
        })
    }

    /// Rebuilds a session from a checkpoint made under a compatible
    /// config, reusing its normalization statistics and every saved
    /// parameter.
    pub fn from_checkpoint(ck: &Checkpoint, config: &RunConfig, prepared: &Prepared) -> Result<Self> {
        config.validate()?;
        ck.check_compatible(config, &prepared.dataset.registry.hash())?;
        let config = config.clone();
        let mut store = ParamStore::new();
        let ncfg = config.numeric.encoder_config(config.model.d);
        let numeric = NumericEncoder::init(&mut store, ncfg, &mut rng_for(config.seed, 1))?;
        let model = Model::init(&mut store, &config.model, &config.ablation, ck.header.n_slots, &mut rng_for(config.seed, 3))?;
        ck.restore(&mut store)?;
        let features = FeatureStore::build(&prepared.dataset, &prepared.sidecar, &config.features, ck.header.norms.clone(), &numeric, &store)?;
        Ok(Self {
            config,
            store,
            numeric,
            features,
            model,
            numeric_trace: Vec::new(),
            stage: ck.header.stage,
            optimizer_step: ck.header.optimizer_step,
        })
    }

    pub fn checkpoint(&self, opt: Option<&AdamW<f32>>, schema_hash: &str) -> Checkpoint {
        let header = Header {
            config: self.config.clone(),
            n_slots: self.model.n_slots,
            schema_hash: schema_hash.to_string(),
            norms: self.features.norms.clone(),
            stage: self.stage,
            optimizer_step: opt.map_or(self.optimizer_step, AdamW::steps_taken),
        };
        Checkpoint::capture(header, &self.store, opt)
    }

    pub fn pretrain(&mut self, hook: Option<&mut EpochHook<'_, f32>>) -> Result<(TrainLog, AdamW<f32>)> {
        let out = pretrain(&mut self.store, &self.model, &self.features, &self.config.pretrain, self.config.seed, hook)?;
        self.stage = Some(Stage::Pretrain);
        self.optimizer_step = out.1.steps_taken();
        Ok(out)
    }

    pub fn finetune(&mut self, prepared: &Prepared, hook: Option<&mut EpochHook<'_, f32>>) -> Result<(TrainLog, AdamW<f32>)> {
        let out = finetune(
            &mut self.store,
            &self.model,
            &self.features,
            &prepared.split.train,
            &self.config.finetune,
            self.config.seed,
            hook,
        )?;
        self.stage = Some(Stage::Finetune);
        self.optimizer_step = out.1.steps_taken();
        Ok(out)
    }

    /// Metrics of the configured scorer and the random baseline on the
    /// same candidates.
    pub fn evaluate(&self, candidates: &[Candidates]) -> Result<(EvalReport, EvalReport)> {
        let eval = &self.config.eval;
        let model = match eval.scorer {
            ScorerKind::Model => evaluate(candidates, &model_scorer(&self.model, &self.store, &self.features, candidates, eval)?, eval)?,
            ScorerKind::Oracle => evaluate(candidates, &OracleScorer::for_candidates(candidates), eval)?,
            ScorerKind::Random => evaluate(candidates, &RandomScorer { seed: eval.seed }, eval)?,
        };
        let random = evaluate(candidates, &RandomScorer { seed: eval.seed }, eval)?;
        Ok((model, random))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mrr: f64,
    pub hit10: f64,
    pub ndcg10: f64,
}

impl From<&EvalReport> for Summary {
    fn from(r: &EvalReport) -> Self {
        Self {
            mrr: r.mrr,
            hit10: r.hit_at(10).unwrap_or(f64::NAN),
            ndcg10: r.ndcg_at(10).unwrap_or(f64::NAN),
        }
    }
}

pub struct RunOutcome {
    pub session: Session,
    pub pretrain: TrainLog,
    pub finetune: TrainLog,
    pub test: EvalReport,
    pub random: EvalReport,
}

/// Numeric fit, pretraining, fine-tuning and test evaluation.
pub fn run_full(cfg: &RunConfig, prepared: &Prepared) -> Result<RunOutcome> {
    let mut session = Session::new(cfg, prepared)?;
    let (pre, _) = session.pretrain(None)?;
    let (fine, _) = session.finetune(prepared, None)?;
    let cands = build_candidates(&prepared.dataset, &prepared.split.test, &cfg.eval)?;
    let (test, random) = session.evaluate(&cands)?;
    Ok(RunOutcome {
        session,
        pretrain: pre,
        finetune: fine,
        test,
        random,
    })
}

/// Which part of the grid a variant belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Grid {
    /// Schema triplet and user tokens switched on and off.
    Components,
    /// Item fusion strategies.
    Fusion,
}

pub fn variants(grid: Grid) -> Vec<(&'static str, Ablation)> {
    let a = |schema_mode, fusion_mode, user_mode| Ablation {
        schema_mode,
        fusion_mode,
        user_mode,
        ..Ablation::default()
    };
    use FusionMode as Fu;
    use SchemaMode as S;
    use UserMode as U;
    match grid {
        Grid::Components => vec![
            ("full", a(S::Triplet, Fu::Qformer, U::UserQformer)),
            ("without_triplet", a(S::ValueOnly, Fu::Qformer, U::UserQformer)),
            ("without_user_tokens", a(S::Triplet, Fu::Qformer, U::MeanItems)),
            ("without_both", a(S::ValueOnly, Fu::Qformer, U::MeanItems)),
        ],
        Grid::Fusion => vec![
            ("pure_text", a(S::ValueOnly, Fu::PureText, U::UserQformer)),
            ("mlp_concat", a(S::Triplet, Fu::Mlp, U::UserQformer)),
            ("self_attention", a(S::Triplet, Fu::SelfAttention, U::UserQformer)),
            ("qformer", a(S::Triplet, Fu::Qformer, U::UserQformer)),
        ],
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub grid: Grid,
    pub variant: String,
    pub seed: u64,
    pub ablation: Ablation,
    pub model: Summary,
    pub random: Summary,
    pub config_hash: String,
}

/// Runs each variant of each grid for each seed. Data is regenerated per
/// seed when synthetic; identical (ablation, seed) runs are shared.
pub fn ablate(base: &RunConfig, grids: &[Grid], seeds: &[u64], mut progress: impl FnMut(&AblationRow)) -> Result<Vec<AblationRow>> {
    let mut rows: Vec<AblationRow> = Vec::new();
    for &seed in seeds {
        let cfg_seed = base.clone().with_seed(seed);
        let prepared = prepare(&cfg_seed)?;
        for &grid in grids {
            for (name, ablation) in variants(grid) {
                let cfg = RunConfig { ablation, ..cfg_seed.clone() };
                let hash = cfg.hash();
                let row = match rows.iter().find(|r| r.config_hash == hash) {
                    Some(r) => AblationRow {
                        grid,
                        variant: name.to_string(),
                        ..r.clone()
                    },
                    None => {
                        let out = run_full(&cfg, &prepared)?;
                        AblationRow {
                            grid,
                            variant: name.to_string(),
                            seed,
                            ablation,
                            model: (&out.test).into(),
                            random: (&out.random).into(),
                            config_hash: hash,
                        }
                    }
                };
                progress(&row);
                rows.push(row);
            }
        }
    }
    Ok(rows)
}

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut out = String::from("grid,variant,seed,mrr,hit@10,ndcg@10,random_hit@10,config_hash\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{:.6},{:.6},{:.6},{:.6},{}\n",
            crate::model::snake(&r.grid),
            r.variant,
            r.seed,
            r.model.mrr,
            r.model.hit10,
            r.model.ndcg10,
            r.random.hit10,
            r.config_hash
        ));
    }
    out
}

/// Mean metrics per (grid, variant) across seeds, as a text table.
pub fn ablation_table(rows: &[AblationRow]) -> String {
    let mut keys: Vec<(Grid, String)> = Vec::new();
    for r in rows {
        if !keys.iter().any(|(g, v)| *g == r.grid && *v == r.variant) {
            keys.push((r.grid, r.variant.clone()));
        }
    }
    let mut out = format!("{:<12}  {:<20}  {:>5}  {:>8}  {:>8}  {:>8}\n", "grid", "variant", "seeds", "MRR", "Hit@10", "NDCG@10");
    for (g, v) in keys {
        let sel: Vec<&AblationRow> = rows.iter().filter(|r| r.grid == g && r.variant == v).collect();
        let mean = |f: fn(&Summary) -> f64| sel.iter().map(|r| f(&r.model)).sum::<f64>() / sel.len() as f64;
        out.push_str(&format!(
            "{:<12}  {:<20}  {:>5}  {:>8.4}  {:>8.4}  {:>8.4}\n",
            crate::model::snake(&g),
            v,
            sel.len(),
            mean(|s| s.mrr),
            mean(|s| s.hit10),
            mean(|s| s.ndcg10)
        ));
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Level {
    Item,
    User,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub level: Level,
    pub k: usize,
    pub model: Summary,
    pub config_hash: String,
}

pub const SWEEP_TOKENS: [usize; 5] = [1, 2, 4, 8, 16];

/// Varies the item or user token count with the other held at its
/// configured value.
pub fn sweep_tokens(base: &RunConfig, ks: &[usize], mut progress: impl FnMut(&SweepRow)) -> Result<Vec<SweepRow>> {
    let prepared = prepare(base)?;
    let mut rows = Vec::new();
    for level in [Level::Item, Level::User] {
        for &k in ks {
            let mut cfg = base.clone();
            match level {
                Level::Item => cfg.model.k_item = k,
                Level::User => cfg.model.k_user = k,
            }
            let out = run_full(&cfg, &prepared)?;
            let row = SweepRow {
                level,
                k,
                model: (&out.test).into(),
                config_hash: cfg.hash(),
            };
            progress(&row);
            rows.push(row);
        }
    }
    Ok(rows)
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut out = String::from("level,k,mrr,hit@10,ndcg@10,config_hash\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{:.6},{:.6},{:.6},{}\n",
            crate::model::snake(&r.level),
            r.k,
            r.model.mrr,
            r.model.hit10,
            r.model.ndcg10,
            r.config_hash
        ));
    }
    out
}
