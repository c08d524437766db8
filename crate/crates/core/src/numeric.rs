//! Scalar, timestamp and geographic feature maps, and the learned scalar
//! encoder trained for additivity, invertibility and distance preservation.

use std::f64::consts::TAU;

use chrono::{DateTime, Datelike};
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::optim::{clip_global_norm, AdamConfig, AdamW, Schedule};
use crate::params::{Binder, Group, ParamId, ParamStore};
use crate::tensor::{Float, Graph, Tensor, TensorError, Var};

pub const TIME_FEATURES: usize = 9;
pub const GEO_FEATURES: usize = 3;
/// Exclusive upper bound of accepted timestamps (2100-01-01T00:00:00Z).
pub const MAX_TIMESTAMP: i64 = 4_102_444_800;

const DAY: i64 = 86_400;
const WEEK: i64 = 7 * DAY;
/// Mean Gregorian year, 365.2425 days.
const YEAR: i64 = 31_556_952;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NumericError {
    #[error("non-finite scalar {0}")]
    NonFinite(f64),
    #[error("timestamp {0} outside [1970, 2100)")]
    TimestampRange(i64),
    #[error("coordinates ({lat}, {lon}) out of range")]
    GeoRange { lat: f64, lon: f64 },
    #[error("invalid numeric encoder config: {0}")]
    Config(String),
    #[error("need at least {need} values, got {got}")]
    BatchTooSmall { need: usize, got: usize },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T, E = NumericError> = std::result::Result<T, E>;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NumericConfig {
    pub n_freq: usize,
    pub f_min: f64,
    pub f_max: f64,
    pub d_out: usize,
    pub scale_bound: f64,
}

impl NumericConfig {
    /// Default frequency band for width `d`: 32 bands when they fit,
    /// otherwise as many as `2·n_freq + 2 ≤ d` allows.
    pub fn for_width(d: usize) -> Self {
        Self {
            n_freq: 32.min(d.saturating_sub(2) / 2),
            f_min: 1e-4,
            f_max: 1e2,
            d_out: d,
            scale_bound: 10.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.f_min > 0.0 && self.f_max > self.f_min) {
            return Err(NumericError::Config(format!(
                "frequency range [{}, {}] must satisfy 0 < f_min < f_max",
                self.f_min, self.f_max
            )));
        }
        if self.n_freq < 2 {
            return Err(NumericError::Config(format!("n_freq = {} < 2", self.n_freq)));
        }
        if 2 * self.n_freq + 2 > self.d_out {
            return Err(NumericError::Config(format!(
                "2·n_freq + 2 = {} exceeds d_out = {}",
                2 * self.n_freq + 2,
                self.d_out
            )));
        }
        if self.scale_bound < 1.0 {
            return Err(NumericError::Config(format!("scale_bound {} < 1", self.scale_bound)));
        }
        Ok(())
    }

    pub fn feature_width(&self) -> usize {
        2 * self.n_freq + 2
    }

    pub fn frequencies(&self) -> Vec<f64> {
        let ratio = self.f_max / self.f_min;
        let last = (self.n_freq - 1) as f64;
        (0..self.n_freq)
            .map(|k| self.f_min * ratio.powf(k as f64 / last))
            .collect()
    }
}

fn finite(x: f64) -> Result<f64> {
    if x.is_finite() {
        Ok(x)
    } else {
        Err(NumericError::NonFinite(x))
    }
}

/// `[sin(f_0 x) … sin(f_{n-1} x), cos(f_0 x) … cos(f_{n-1} x)]`
pub fn fourier_features(x: f64, freqs: &[f64]) -> Result<Vec<f64>> {
    let x = finite(x)?;
    let mut out = Vec::with_capacity(2 * freqs.len());
    out.extend(freqs.iter().map(|f| (f * x).sin()));
    out.extend(freqs.iter().map(|f| (f * x).cos()));
    Ok(out)
}

/// Signed log magnitude scaled by the bound, and the sign.
pub fn raw_value_features(x: f64, scale_bound: f64) -> [f64; 2] {
    if x == 0.0 {
        return [0.0, 0.0];
    }
    let s = x.signum();
    [s * x.abs().ln_1p() / scale_bound, s]
}

pub fn scalar_features(x: f64, cfg: &NumericConfig, freqs: &[f64]) -> Result<Vec<f64>> {
    let mut out = fourier_features(x, freqs)?;
    out.extend(raw_value_features(x, cfg.scale_bound));
    Ok(out)
}

fn check_timestamp(t: i64) -> Result<()> {
    if (0..MAX_TIMESTAMP).contains(&t) {
        Ok(())
    } else {
        Err(NumericError::TimestampRange(t))
    }
}

fn angle_pair(phase: f64) -> [f64; 2] {
    let a = TAU * phase;
    [a.sin(), a.cos()]
}

/// sin/cos of hour-of-day, day-of-week (Monday = 0), year phase and
/// month-of-year, in that order. Each pair depends on `t` only through an
/// integer remainder or the calendar month, so shifting by a whole period
/// reproduces it bit for bit.
pub fn cyclic_features(t: i64) -> Result<[f64; 8]> {
    check_timestamp(t)?;
    let sec_of_day = t.rem_euclid(DAY);
    let day = angle_pair(sec_of_day as f64 / DAY as f64);
    let week = angle_pair((t + 3 * DAY).rem_euclid(WEEK) as f64 / WEEK as f64);
    let year = angle_pair(t.rem_euclid(YEAR) as f64 / YEAR as f64);
    let dt = DateTime::from_timestamp(t, 0).ok_or(NumericError::TimestampRange(t))?;
    let month = angle_pair(dt.month0() as f64 / 12.0);
    Ok([day[0], day[1], week[0], week[1], year[0], year[1], month[0], month[1]])
}

/// Secular position within a reference span plus the eight cyclic channels.
pub fn time_features(t: i64, span: TimeSpan) -> Result<[f64; TIME_FEATURES]> {
    let cyc = cyclic_features(t)?;
    let mut out = [0.0; TIME_FEATURES];
    out[0] = span.secular(t);
    out[1..].copy_from_slice(&cyc);
    Ok(out)
}

/// Point on the unit sphere.
pub fn geo_features(lat: f64, lon: f64) -> Result<[f64; GEO_FEATURES]> {
    if !(-90.0..=90.0).contains(&lat) || !(-180.0..=180.0).contains(&lon) {
        return Err(NumericError::GeoRange { lat, lon });
    }
    let (la, lo) = (lat.to_radians(), lon.to_radians());
    Ok([la.cos() * lo.cos(), la.cos() * lo.sin(), la.sin()])
}

/// Great-circle central angle in radians (haversine).
pub fn central_angle(a: (f64, f64), b: (f64, f64)) -> f64 {
    let (la1, lo1) = (a.0.to_radians(), a.1.to_radians());
    let (la2, lo2) = (b.0.to_radians(), b.1.to_radians());
    let h = ((la2 - la1) / 2.0).sin().powi(2) + la1.cos() * la2.cos() * ((lo2 - lo1) / 2.0).sin().powi(2);
    2.0 * h.sqrt().min(1.0).asin()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimeSpan {
    pub min: i64,
    pub max: i64,
}

impl TimeSpan {
    pub fn fit(ts: impl IntoIterator<Item = i64>) -> Option<Self> {
        let mut it = ts.into_iter();
        let first = it.next()?;
        let (min, max) = it.fold((first, first), |(lo, hi), t| (lo.min(t), hi.max(t)));
        Some(Self { min, max })
    }

    pub fn secular(&self, t: i64) -> f64 {
        if self.max == self.min {
            0.0
        } else {
            (t - self.min) as f64 / (self.max - self.min) as f64
        }
    }
}

/// Affine map of a field's observed range onto roughly [-5, 5], with the
/// scale clamped to `[1/bound, bound]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FieldNorm {
    pub min: f64,
    pub max: f64,
    pub center: f64,
    pub scale: f64,
}

impl FieldNorm {
    pub const TARGET_HALF_RANGE: f64 = 5.0;

    pub fn fit(values: impl IntoIterator<Item = f64>, bound: f64) -> Option<Self> {
        let mut it = values.into_iter().filter(|x| x.is_finite());
        let first = it.next()?;
        let (min, max) = it.fold((first, first), |(lo, hi), x| (lo.min(x), hi.max(x)));
        let half = (max - min) / 2.0;
        let scale = if half > 0.0 {
            (Self::TARGET_HALF_RANGE / half).clamp(1.0 / bound, bound)
        } else {
            1.0
        };
        Some(Self {
            min,
            max,
            center: (min + max) / 2.0,
            scale,
        })
    }

    pub fn apply(&self, x: f64) -> f64 {
        (x - self.center) * self.scale
    }
}

/// Parameter handles of the scalar encoder inside a [`ParamStore`].
#[derive(Clone, Debug, PartialEq)]
pub struct NumericEncoder {
    pub config: NumericConfig,
    freqs: Vec<f64>,
    proj_w: ParamId,
    proj_b: ParamId,
    hidden_w: ParamId,
    hidden_b: ParamId,
    out_w: ParamId,
    dec_w1: ParamId,
    dec_b1: ParamId,
    dec_w2: ParamId,
    dec_b2: ParamId,
}

impl NumericEncoder {
    pub fn init<F: Float, R: Rng + ?Sized>(store: &mut ParamStore<F>, config: NumericConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let (p, d) = (config.feature_width(), config.d_out);
        let g = Group::Numeric;
        Ok(Self {
            config,
            freqs: config.frequencies(),
            proj_w: store.add_weight("numeric.proj.weight", g, p, d, rng),
            proj_b: store.add_zeros("numeric.proj.bias", g, &[d]),
            hidden_w: store.add_weight("numeric.hidden.weight", g, p, d, rng),
            hidden_b: store.add_zeros("numeric.hidden.bias", g, &[d]),
            out_w: store.add_weight("numeric.out.weight", g, d, d, rng),
            dec_w1: store.add_weight("numeric.decoder.0.weight", g, d, d, rng),
            dec_b1: store.add_zeros("numeric.decoder.0.bias", g, &[d]),
            dec_w2: store.add_weight("numeric.decoder.1.weight", g, d, 1, rng),
            dec_b2: store.add_zeros("numeric.decoder.1.bias", g, &[1]),
        })
    }

    /// Re-attaches to parameters already present in `store` (e.g. loaded
    /// from a checkpoint).
    pub fn attach<F: Float>(store: &ParamStore<F>, config: NumericConfig) -> Option<Self> {
        let id = |n: &str| store.id(n);
        Some(Self {
            config,
            freqs: config.frequencies(),
            proj_w: id("numeric.proj.weight")?,
            proj_b: id("numeric.proj.bias")?,
            hidden_w: id("numeric.hidden.weight")?,
            hidden_b: id("numeric.hidden.bias")?,
            out_w: id("numeric.out.weight")?,
            dec_w1: id("numeric.decoder.0.weight")?,
            dec_b1: id("numeric.decoder.0.bias")?,
            dec_w2: id("numeric.decoder.1.weight")?,
            dec_b2: id("numeric.decoder.1.bias")?,
        })
    }

    pub fn features<F: Float>(&self, xs: &[f64]) -> Result<Tensor<F>> {
        let mut data = Vec::with_capacity(xs.len() * self.config.feature_width());
        for &x in xs {
            data.extend(scalar_features(x, &self.config, &self.freqs)?.into_iter().map(F::of));
        }
        Ok(Tensor::new([xs.len(), self.config.feature_width()], data)?)
    }

    /// `φW + b + gelu(φW₁ + b₁)W₂` for every scalar → [n × d].
    pub fn encode<F: Float>(&self, b: &Binder<'_, F>, xs: &[f64]) -> Result<Var> {
        let g = b.graph();
        let phi = g.constant(self.features(xs)?);
        let linear = g.add_row(g.matmul(phi, b.var(self.proj_w))?, b.var(self.proj_b))?;
        let hidden = g.gelu(g.add_row(g.matmul(phi, b.var(self.hidden_w))?, b.var(self.hidden_b))?)?;
        Ok(g.add(linear, g.matmul(hidden, b.var(self.out_w))?)?)
    }

    /// Two-layer perceptron from embeddings back to scalars → [n × 1].
    pub fn decode<F: Float>(&self, b: &Binder<'_, F>, e: Var) -> Result<Var> {
        let g = b.graph();
        let h = g.gelu(g.add_row(g.matmul(e, b.var(self.dec_w1))?, b.var(self.dec_b1))?)?;
        Ok(g.add_row(g.matmul(h, b.var(self.dec_w2))?, b.var(self.dec_b2))?)
    }

    /// Encodes without recording gradients.
    pub fn encode_values<F: Float>(&self, store: &ParamStore<F>, xs: &[f64]) -> Result<Tensor<F>> {
        let g = Graph::new();
        let b = Binder::new(&g, store, &[]);
        let e = self.encode(&b, xs)?;
        Ok((*g.value(e)).clone())
    }

    pub fn decode_values<F: Float>(&self, store: &ParamStore<F>, xs: &[f64]) -> Result<Vec<f64>> {
        let g = Graph::new();
        let b = Binder::new(&g, store, &[]);
        let e = self.encode(&b, xs)?;
        let y = self.decode(&b, e)?;
        Ok(g.value(y).to_f64_vec())
    }

    /// The three objectives on one sampled batch; see [`NumericBatch`].
    pub fn losses<F: Float>(&self, b: &Binder<'_, F>, batch: &NumericBatch, margin: f64) -> Result<NumericLosses> {
        let g = b.graph();
        let n = batch.a.len();

        let mut stacked = batch.a.clone();
        stacked.extend(&batch.b);
        stacked.extend(batch.a.iter().zip(&batch.b).map(|(x, y)| x + y));
        let e = self.encode(b, &stacked)?;
        let (ea, eb, esum) = (g.slice(e, 0, 0, n)?, g.slice(e, 0, n, n)?, g.slice(e, 0, 2 * n, n)?);
        let viol = g.sub(g.sub(esum, ea)?, eb)?;
        let add = g.scale(g.sum(g.mul(viol, viol)?)?, F::of(1.0 / n as f64))?;

        let ex = self.encode(b, &batch.x)?;
        let rec = self.decode(b, ex)?;
        let target = g.constant(Tensor::new([batch.x.len(), 1], batch.x.iter().map(|&v| F::of(v)).collect())?);
        let err = g.sub(rec, target)?;
        let inv = g.mean(g.mul(err, err)?)?;

        let dist = if batch.triplets.is_empty() {
            g.constant(Tensor::scalar(F::zero()))
        } else {
            let pick = |sel: fn(&(usize, usize, usize)) -> usize| -> Vec<usize> { batch.triplets.iter().map(sel).collect() };
            let anchor = g.gather_rows(ex, &pick(|t| t.0))?;
            let pos = g.gather_rows(ex, &pick(|t| t.1))?;
            let neg = g.gather_rows(ex, &pick(|t| t.2))?;
            let dp = g.row_norm(g.sub(anchor, pos)?)?;
            let dn = g.row_norm(g.sub(anchor, neg)?)?;
            let m = g.constant(Tensor::full([batch.triplets.len()], F::of(margin)));
            let hinge = g.relu(g.add(g.sub(dp, dn)?, m)?)?;
            g.mean(hinge)?
        };
        Ok(NumericLosses { add, inv, dist })
    }
}

pub struct NumericLosses {
    pub add: Var,
    pub inv: Var,
    pub dist: Var,
}

/// Scalars for one step: additivity pairs `(a, b)`, reconstruction and
/// triplet values `x`, and `(anchor, positive, negative)` rows into `x`
/// where the positive is strictly closer to the anchor than the negative.
#[derive(Clone, Debug, PartialEq)]
pub struct NumericBatch {
    pub a: Vec<f64>,
    pub b: Vec<f64>,
    pub x: Vec<f64>,
    pub triplets: Vec<(usize, usize, usize)>,
}

impl NumericBatch {
    pub fn from_values<R: Rng + ?Sized>(x: Vec<f64>, a: Vec<f64>, b: Vec<f64>, rng: &mut R) -> Result<Self> {
        let n = x.len();
        if n < 3 {
            return Err(NumericError::BatchTooSmall { need: 3, got: n });
        }
        let mut triplets = Vec::new();
        for i in 0..n {
            let j = (i + rng.random_range(1..n)) % n;
            let mut k = (i + rng.random_range(1..n)) % n;
            if k == j {
                k = (k + 1) % n;
                if k == i {
                    k = (k + 1) % n;
                }
            }
            let (dj, dk) = ((x[i] - x[j]).abs(), (x[i] - x[k]).abs());
            if dj < dk {
                triplets.push((i, j, k));
            } else if dk < dj {
                triplets.push((i, k, j));
            }
        }
        Ok(Self { a, b, x, triplets })
    }

    /// `x` uniform on `[-range, range]`; additivity operands on half the
    /// range so their sums stay inside it.
    pub fn sample<R: Rng + ?Sized>(n: usize, range: f64, rng: &mut R) -> Result<Self> {
        let x = (0..n).map(|_| rng.random_range(-range..=range)).collect();
        let a = (0..n).map(|_| rng.random_range(-range / 2.0..=range / 2.0)).collect();
        let b = (0..n).map(|_| rng.random_range(-range / 2.0..=range / 2.0)).collect();
        Self::from_values(x, a, b, rng)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NumericTrainConfig {
    pub steps: u64,
    pub batch: usize,
    pub lr: f64,
    pub warmup_steps: u64,
    pub range: f64,
    pub margin: f64,
    pub w_add: f64,
    pub w_inv: f64,
    pub w_dist: f64,
    pub grad_clip: f64,
}

impl Default for NumericTrainConfig {
    fn default() -> Self {
        Self {
            steps: 500,
            batch: 128,
            lr: 3e-3,
            warmup_steps: 20,
            range: 10.0,
            margin: 0.1,
            w_add: 1.0,
            w_inv: 1.0,
            w_dist: 1.0,
            grad_clip: 1.0,
        }
    }
}

/// Per-step `[L_add, L_inv, L_dist]`.
pub type LossTrace = Vec<[f64; 3]>;

/// Fits the scalar encoder and decoder in place.
pub fn fit_numeric<F: Float, R: Rng + ?Sized>(
    store: &mut ParamStore<F>,
    enc: &NumericEncoder,
    cfg: &NumericTrainConfig,
    rng: &mut R,
) -> Result<LossTrace> {
    let adam = AdamConfig {
        weight_decay: 0.0,
        ..AdamConfig::default()
    };
    let mut opt = AdamW::new(adam, store.len(), &[Group::Numeric]);
    let schedule = Schedule {
        peak: cfg.lr,
        warmup_steps: cfg.warmup_steps,
        total_steps: cfg.steps,
    };
    let mut trace = Vec::with_capacity(cfg.steps as usize);
    for step in 1..=cfg.steps {
        let batch = NumericBatch::sample(cfg.batch, cfg.range, rng)?;
        let g = Graph::new();
        let b = Binder::new(&g, store, &[Group::Numeric]);
        let l = enc.losses(&b, &batch, cfg.margin)?;
        let total = g.add(
            g.add(g.scale(l.add, F::of(cfg.w_add))?, g.scale(l.inv, F::of(cfg.w_inv))?)?,
            g.scale(l.dist, F::of(cfg.w_dist))?,
        )?;
        let losses = [l.add, l.inv, l.dist].map(|v| g.value(v).item().as_f64());
        if let Some(&bad) = losses.iter().find(|v| !v.is_finite()) {
            return Err(NumericError::NonFinite(bad));
        }
        trace.push(losses);
        let mut grads = g.backward(total)?;
        let mut grads = b.collect(&mut grads);
        drop(b);
        clip_global_norm(&mut grads, cfg.grad_clip);
        opt.step(store, &grads, schedule.lr_at(step))
            .expect("numeric group is trainable");
    }
    Ok(trace)
}

/// Mean ‖E(a+b) − E(a) − E(b)‖² over the given pairs.
pub fn additivity_violation<F: Float>(store: &ParamStore<F>, enc: &NumericEncoder, a: &[f64], b: &[f64]) -> Result<f64> {
    let sums: Vec<f64> = a.iter().zip(b).map(|(x, y)| x + y).collect();
    let (ea, eb, es) = (
        enc.encode_values(store, a)?,
        enc.encode_values(store, b)?,
        enc.encode_values(store, &sums)?,
    );
    let n = a.len();
    let d = enc.config.d_out;
    let mut total = 0.0;
    for i in 0..n {
        for j in 0..d {
            let v = es.at(i, j).as_f64() - ea.at(i, j).as_f64() - eb.at(i, j).as_f64();
            total += v * v;
        }
    }
    Ok(total / n as f64)
}

/// Spearman rank correlation with average ranks for ties.
pub fn spearman(x: &[f64], y: &[f64]) -> f64 {
    fn ranks(v: &[f64]) -> Vec<f64> {
        let mut idx: Vec<usize> = (0..v.len()).collect();
        idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
        let mut r = vec![0.0; v.len()];
        let mut i = 0;
        while i < idx.len() {
            let mut j = i;
            while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
                j += 1;
            }
            let avg = (i + j) as f64 / 2.0 + 1.0;
            for &k in &idx[i..=j] {
                r[k] = avg;
            }
            i = j + 1;
        }
        r
    }
    let (rx, ry) = (ranks(x), ranks(y));
    let n = x.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in rx.iter().zip(&ry) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    sxy / (sxx * syy).sqrt()
}
