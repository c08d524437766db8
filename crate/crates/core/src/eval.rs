//! Leave-one-out ranking of the held-out item against sampled negatives.

use std::collections::HashSet;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::data::{Dataset, Sample};
use crate::features::FeatureStore;
use crate::model::{ItemBatch, Model, ModelError};
use crate::params::{Binder, ParamStore};
use crate::tensor::{Float, Graph, Tensor};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("eval config: {0}")]
    Config(String),
    #[error("user `{user}`: only {eligible} eligible negatives, need {need}")]
    InsufficientNegatives { user: String, eligible: usize, need: usize },
    #[error("nothing to evaluate")]
    Empty,
    #[error("score vector of length {got} for {want} candidates")]
    Width { got: usize, want: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
}

pub type Result<T, E = EvalError> = std::result::Result<T, E>;

/// What ranks the candidates.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScorerKind {
    #[default]
    Model,
    /// Scores the held-out item 1 and everything else 0.
    Oracle,
    Random,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub scorer: ScorerKind,
    pub n_negatives: usize,
    pub ks: Vec<usize>,
    pub seed: u64,
    /// Worker threads for per-user ranking; 1 runs inline.
    pub threads: usize,
    /// Samples per forward pass when computing user vectors.
    pub batch: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            scorer: ScorerKind::Model,
            n_negatives: 99,
            ks: vec![10],
            seed: 0,
            threads: 1,
            batch: 64,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_negatives == 0 {
            return Err(EvalError::Config("n_negatives must be at least 1".into()));
        }
        if self.ks.is_empty() || self.ks.contains(&0) {
            return Err(EvalError::Config("ks must be a non-empty list of positive cutoffs".into()));
        }
        if self.threads == 0 || self.batch == 0 {
            return Err(EvalError::Config("threads and batch must be positive".into()));
        }
        Ok(())
    }
}

fn keyed_rng(seed: u64, key: &str) -> ChaCha8Rng {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(key.as_bytes());
    let digest = h.finalize();
    let mut bytes = [0u8; 32];
    bytes.copy_from_slice(&digest);
    ChaCha8Rng::from_seed(bytes)
}

/// `n` distinct items drawn uniformly from `0..n_items` minus `exclude`,
/// seeded by `(seed, user)`.
pub fn sample_negatives(n_items: usize, exclude: &HashSet<usize>, n: usize, seed: u64, user: &str) -> Result<Vec<usize>> {
    let eligible: Vec<usize> = (0..n_items).filter(|i| !exclude.contains(i)).collect();
    if eligible.len() < n {
        return Err(EvalError::InsufficientNegatives {
            user: user.to_string(),
            eligible: eligible.len(),
            need: n,
        });
    }
    let mut rng = keyed_rng(seed, user);
    Ok(index::sample(&mut rng, eligible.len(), n).into_iter().map(|j| eligible[j]).collect())
}

/// 1-based rank of `items[truth]` when sorting by descending score, ties
/// going to the lower item id.
pub fn rank_of(scores: &[f64], items: &[usize], truth: usize) -> usize {
    let (s, id) = (scores[truth], items[truth]);
    1 + scores
        .iter()
        .zip(items)
        .filter(|&(&x, &j)| x > s || (x == s && j < id))
        .count()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankMetrics {
    pub rr: f64,
    pub hit: f64,
    pub ndcg: f64,
}

pub fn metrics_from_rank(rank: usize, k: usize) -> RankMetrics {
    assert!(rank >= 1, "ranks are 1-based");
    let inside = rank <= k;
    RankMetrics {
        rr: 1.0 / rank as f64,
        hit: if inside { 1.0 } else { 0.0 },
        ndcg: if inside { 1.0 / (rank as f64 + 1.0).log2() } else { 0.0 },
    }
}

/// Sum rounded once from the exact value, via non-overlapping partials.
pub fn exact_sum(xs: impl IntoIterator<Item = f64>) -> f64 {
    let mut partials: Vec<f64> = Vec::new();
    for mut x in xs {
        let mut kept = 0;
        for j in 0..partials.len() {
            let mut y = partials[j];
            if x.abs() < y.abs() {
                std::mem::swap(&mut x, &mut y);
            }
            let hi = x + y;
            let lo = y - (hi - x);
            if lo != 0.0 {
                partials[kept] = lo;
                kept += 1;
            }
            x = hi;
        }
        partials.truncate(kept);
        partials.push(x);
    }
    let Some(mut hi) = partials.pop() else {
        return 0.0;
    };
    let mut lo = 0.0;
    while let Some(y) = partials.pop() {
        let x = hi;
        hi = x + y;
        lo = y - (hi - x);
        if lo != 0.0 {
            break;
        }
    }
    // Half-way cases round by the sign of what lies below.
    if let Some(&next) = partials.last() {
        if (lo < 0.0 && next < 0.0) || (lo > 0.0 && next > 0.0) {
            let y = lo * 2.0;
            let x = hi + y;
            if y == x - hi {
                hi = x;
            }
        }
    }
    hi
}

/// Exactly rounded sum divided by the count.
pub fn exact_mean(xs: impl IntoIterator<Item = f64>) -> f64 {
    let xs: Vec<f64> = xs.into_iter().collect();
    if xs.is_empty() {
        f64::NAN
    } else {
        exact_sum(xs.iter().copied()) / xs.len() as f64
    }
}

/// The candidate list of one evaluation sample: the truth first, then the
/// negatives.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Candidates {
    pub sample: Sample,
    pub user: String,
    pub items: Vec<usize>,
}

/// Negatives exclude every item the user ever interacted with.
pub fn build_candidates(ds: &Dataset, samples: &[Sample], cfg: &EvalConfig) -> Result<Vec<Candidates>> {
    cfg.validate()?;
    samples
        .iter()
        .map(|s| {
            let user = &ds.users[s.user];
            let truth = user.events[s.target].item;
            let seen: HashSet<usize> = user.events.iter().map(|e| e.item).collect();
            let mut items = vec![truth];
            items.extend(sample_negatives(ds.items.len(), &seen, cfg.n_negatives, cfg.seed, &user.id)?);
            Ok(Candidates {
                sample: *s,
                user: user.id.clone(),
                items,
            })
        })
        .collect()
}

/// Scores the candidates of evaluation query `q`.
pub trait Scorer: Sync {
    fn score(&self, q: usize, items: &[usize]) -> Vec<f64>;
}

/// Dot product of a user vector with pooled item vectors.
#[derive(Clone, Debug, PartialEq)]
pub struct DotScorer {
    pub users: Vec<Vec<f64>>,
    pub items: Vec<Vec<f64>>,
}

impl Scorer for DotScorer {
    fn score(&self, q: usize, items: &[usize]) -> Vec<f64> {
        let u = &self.users[q];
        items
            .iter()
            .map(|&i| u.iter().zip(&self.items[i]).map(|(a, b)| a * b).sum())
            .collect()
    }
}

/// Independent uniform scores per query.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RandomScorer {
    pub seed: u64,
}

impl Scorer for RandomScorer {
    fn score(&self, q: usize, items: &[usize]) -> Vec<f64> {
        let mut rng = keyed_rng(self.seed, &format!("random-scorer/{q}"));
        items.iter().map(|_| rng.random::<f64>()).collect()
    }
}

/// 1 for the known truth, 0 otherwise.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct OracleScorer {
    pub truths: Vec<usize>,
}

impl OracleScorer {
    pub fn for_candidates(cands: &[Candidates]) -> Self {
        Self {
            truths: cands.iter().map(|c| c.items[0]).collect(),
        }
    }
}

impl Scorer for OracleScorer {
    fn score(&self, q: usize, items: &[usize]) -> Vec<f64> {
        items.iter().map(|&i| f64::from(i == self.truths[q])).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankingResult {
    pub user: String,
    pub rank: usize,
    pub scores: Vec<f64>,
    pub rr: f64,
    /// Per cutoff in `EvalConfig::ks`.
    pub hit: Vec<f64>,
    pub ndcg: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub n: usize,
    pub ks: Vec<usize>,
    pub mrr: f64,
    pub hit: Vec<f64>,
    pub ndcg: Vec<f64>,
    pub per_user: Vec<RankingResult>,
}

impl EvalReport {
    pub fn hit_at(&self, k: usize) -> Option<f64> {
        self.ks.iter().position(|&x| x == k).map(|p| self.hit[p])
    }

    pub fn ndcg_at(&self, k: usize) -> Option<f64> {
        self.ks.iter().position(|&x| x == k).map(|p| self.ndcg[p])
    }
}

fn rank_one(q: usize, c: &Candidates, scorer: &dyn Scorer, ks: &[usize]) -> Result<RankingResult> {
    let scores = scorer.score(q, &c.items);
    if scores.len() != c.items.len() {
        return Err(EvalError::Width {
            got: scores.len(),
            want: c.items.len(),
        });
    }
    let rank = rank_of(&scores, &c.items, 0);
    let per_k: Vec<RankMetrics> = ks.iter().map(|&k| metrics_from_rank(rank, k)).collect();
    Ok(RankingResult {
        user: c.user.clone(),
        rank,
        scores,
        rr: 1.0 / rank as f64,
        hit: per_k.iter().map(|m| m.hit).collect(),
        ndcg: per_k.iter().map(|m| m.ndcg).collect(),
    })
}

/// Ranks every query's truth and averages the metrics. Results do not
/// depend on the thread count.
pub fn evaluate(cands: &[Candidates], scorer: &dyn Scorer, cfg: &EvalConfig) -> Result<EvalReport> {
    cfg.validate()?;
    if cands.is_empty() {
        return Err(EvalError::Empty);
    }
    let per_user: Vec<RankingResult> = if cfg.threads > 1 {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(cfg.threads)
            .build()
            .map_err(|e| EvalError::Config(e.to_string()))?;
        pool.install(|| {
            cands
                .par_iter()
                .enumerate()
                .map(|(q, c)| rank_one(q, c, scorer, &cfg.ks))
                .collect::<Result<_>>()
        })?
    } else {
        cands
            .iter()
            .enumerate()
            .map(|(q, c)| rank_one(q, c, scorer, &cfg.ks))
            .collect::<Result<_>>()?
    };
    let col = |f: &dyn Fn(&RankingResult) -> f64| exact_mean(per_user.iter().map(f));
    Ok(EvalReport {
        n: per_user.len(),
        ks: cfg.ks.clone(),
        mrr: col(&|r| r.rr),
        hit: (0..cfg.ks.len()).map(|p| col(&|r| r.hit[p])).collect(),
        ndcg: (0..cfg.ks.len()).map(|p| col(&|r| r.ndcg[p])).collect(),
        per_user,
    })
}

/// Token blocks and pooled vectors of every item, `chunk` items per pass.
pub fn encode_corpus<F: Float>(model: &Model, store: &ParamStore<F>, fs: &FeatureStore, chunk: usize) -> Result<(Tensor<F>, Vec<Vec<f64>>)> {
    let n = fs.items.len();
    let (k, d) = (model.config.k_item, model.config.d);
    let mut tokens = Vec::with_capacity(n * k * d);
    let mut pooled = Vec::with_capacity(n);
    let all: Vec<usize> = (0..n).collect();
    for part in all.chunks(chunk.max(1)) {
        let g = Graph::new();
        let b = Binder::new(&g, store, &[]);
        let batch = model.encode_items(&b, fs, part)?;
        tokens.extend_from_slice(g.value(batch.tokens).data());
        pooled.extend(g.value(batch.pooled).rows().map(|r| r.iter().map(|x| x.as_f64()).collect::<Vec<_>>()));
    }
    let tokens = Tensor::new([n * k, d], tokens).map_err(ModelError::from)?;
    Ok((tokens, pooled))
}

/// Reader outputs for `samples`, reusing precomputed corpus tokens.
pub fn user_vectors<F: Float>(
    model: &Model,
    store: &ParamStore<F>,
    fs: &FeatureStore,
    samples: &[Sample],
    corpus: &Tensor<F>,
    chunk: usize,
) -> Result<Vec<Vec<f64>>> {
    let all: Vec<usize> = (0..fs.items.len()).collect();
    let mut out = Vec::with_capacity(samples.len());
    for part in samples.chunks(chunk.max(1)) {
        let g = Graph::new();
        let b = Binder::new(&g, store, &[]);
        let items = ItemBatch::from_tokens(&b, all.clone(), corpus.clone(), model.config.k_item)?;
        let u = model.user_vectors(&b, fs, part, &items)?;
        out.extend(g.value(u).rows().map(|r| r.iter().map(|x| x.as_f64()).collect::<Vec<_>>()));
    }
    Ok(out)
}

/// Scores `u · z̄_i` for the given candidate lists.
pub fn model_scorer<F: Float>(model: &Model, store: &ParamStore<F>, fs: &FeatureStore, cands: &[Candidates], cfg: &EvalConfig) -> Result<DotScorer> {
    let (corpus, items) = encode_corpus(model, store, fs, cfg.batch)?;
    let samples: Vec<Sample> = cands.iter().map(|c| c.sample).collect();
    let users = user_vectors(model, store, fs, &samples, &corpus, cfg.batch)?;
    Ok(DotScorer { users, items })
}

/// Plain-text metrics table, one row per run, headed by the config hash.
pub fn format_table(config_hash: &str, rows: &[(String, &EvalReport)]) -> String {
    let mut out = format!("# config {config_hash}\n");
    let Some((_, first)) = rows.first() else {
        return out;
    };
    let width = rows.iter().map(|(n, _)| n.len()).max().unwrap_or(3).max(3);
    out.push_str(&format!("{:<width$}  {:>6}  {:>8}", "run", "users", "MRR"));
    for k in &first.ks {
        out.push_str(&format!("  {:>8}  {:>8}", format!("Hit@{k}"), format!("NDCG@{k}")));
    }
    out.push('\n');
    for (name, r) in rows {
        out.push_str(&format!("{name:<width$}  {:>6}  {:>8.4}", r.n, r.mrr));
        for (h, n) in r.hit.iter().zip(&r.ndcg) {
            out.push_str(&format!("  {h:>8.4}  {n:>8.4}"));
        }
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn cands(n_items: usize, truths: &[usize], cfg: &EvalConfig) -> Vec<Candidates> {
        truths
            .iter()
            .enumerate()
            .map(|(q, &t)| {
                let user = format!("u{q}");
                let mut items = vec![t];
                items.extend(sample_negatives(n_items, &HashSet::from([t]), cfg.n_negatives, cfg.seed, &user).unwrap());
                Candidates {
                    sample: Sample { user: q, start: 0, target: 1 },
                    user,
                    items,
                }
            })
            .collect()
    }

    #[test]
    fn negatives_avoid_history_and_truth() {
        let exclude: HashSet<usize> = (0..10).collect();
        let negs = sample_negatives(150, &exclude, 99, 7, "u1").unwrap();
        assert_eq!(negs.len(), 99);
        assert!(negs.iter().all(|i| *i >= 10 && *i < 150));
        assert_eq!(negs.iter().collect::<HashSet<_>>().len(), 99);
        assert_eq!(negs, sample_negatives(150, &exclude, 99, 7, "u1").unwrap());
        assert_ne!(negs, sample_negatives(150, &exclude, 99, 8, "u1").unwrap());
    }

    #[test]
    fn small_corpus_reports_counts() {
        let err = sample_negatives(50, &HashSet::from([0]), 99, 0, "u").unwrap_err();
        assert!(matches!(err, EvalError::InsufficientNegatives { eligible: 49, need: 99, .. }));
    }

    #[test]
    fn dot_scores_rank_by_first_component() {
        let scorer = DotScorer {
            users: vec![vec![1.0, 0.0]],
            items: vec![vec![3.0, 9.0], vec![1.0, -4.0], vec![2.0, 0.0]],
        };
        let s = scorer.score(0, &[0, 1, 2]);
        let ids = [0, 1, 2];
        let ranks: Vec<usize> = (0..3).map(|t| rank_of(&s, &ids, t)).collect();
        assert_eq!(ranks, vec![1, 3, 2]);
    }

    #[test]
    fn ties_go_to_the_lower_id() {
        let s = [0.5, 0.5, 0.5];
        assert_eq!(rank_of(&s, &[7, 3, 9], 0), 2);
        assert_eq!(rank_of(&s, &[7, 3, 9], 1), 1);
        assert_eq!(rank_of(&s, &[7, 3, 9], 2), 3);
    }

    #[test]
    fn metric_closed_forms() {
        assert_eq!(metrics_from_rank(1, 10), RankMetrics { rr: 1.0, hit: 1.0, ndcg: 1.0 });
        assert_eq!(metrics_from_rank(3, 10).ndcg, 0.5);
        assert_eq!(metrics_from_rank(15, 10), RankMetrics { rr: 1.0 / 15.0, hit: 0.0, ndcg: 0.0 });
    }

    #[test]
    fn oracle_scorer_is_perfect() {
        let cfg = EvalConfig::default();
        let truths: Vec<usize> = (0..20).map(|i| i * 3).collect();
        let c = cands(200, &truths, &cfg);
        let r = evaluate(&c, &OracleScorer { truths }, &cfg).unwrap();
        assert_eq!((r.mrr, r.hit_at(10), r.ndcg_at(10)), (1.0, Some(1.0), Some(1.0)));
    }

    #[test]
    fn thread_count_does_not_change_results() {
        let cfg = EvalConfig::default();
        let c = cands(300, &(0..64).collect::<Vec<_>>(), &cfg);
        let one = evaluate(&c, &RandomScorer { seed: 3 }, &cfg).unwrap();
        let four = evaluate(&c, &RandomScorer { seed: 3 }, &EvalConfig { threads: 4, ..cfg }).unwrap();
        assert_eq!(one, four);
    }

    #[test]
    fn exact_mean_recovers_small_terms() {
        let xs = std::iter::once(1e16).chain(std::iter::repeat_n(1.0, 1000)).chain(std::iter::once(-1e16));
        assert_eq!(exact_mean(xs), 1000.0 / 1002.0);
        assert_eq!(exact_sum([1.0, 1e100, 1.0, -1e100]), 2.0);
        assert_eq!(exact_sum([0.1; 10]), 1.0);
        assert_eq!(exact_sum([1.0, 2f64.powi(-53), 2f64.powi(-106)]), 1.0 + f64::EPSILON);
    }

    #[test]
    fn table_lists_every_run() {
        let cfg = EvalConfig::default();
        let c = cands(200, &[1, 2, 3], &cfg);
        let r = evaluate(&c, &RandomScorer { seed: 0 }, &cfg).unwrap();
        let t = format_table("abc", &[("full".into(), &r), ("random".into(), &r)]);
        assert!(t.starts_with("# config abc\n"));
        assert!(t.contains("Hit@10") && t.contains("NDCG@10"));
        assert_eq!(t.lines().count(), 4);
    }

    proptest! {
        #[test]
        fn metrics_are_consistent_and_monotone(rank in 1usize..101, k in 1usize..20) {
            let m = metrics_from_rank(rank, k);
            prop_assert!(m.ndcg <= m.hit && m.rr <= 1.0);
            prop_assert!(m.hit == 0.0 || m.hit == 1.0);
            if rank > 1 {
                let better = metrics_from_rank(rank - 1, k);
                prop_assert!(better.rr >= m.rr && better.hit >= m.hit && better.ndcg >= m.ndcg);
            }
        }

        #[test]
        fn positive_scaling_keeps_the_rank(scores in proptest::collection::vec(-5.0f64..5.0, 2..30), a in 0.01f64..100.0) {
            let ids: Vec<usize> = (0..scores.len()).collect();
            let scaled: Vec<f64> = scores.iter().map(|s| s * a).collect();
            for t in 0..scores.len() {
                prop_assert_eq!(rank_of(&scores, &ids, t), rank_of(&scaled, &ids, t));
            }
        }
    }
}
