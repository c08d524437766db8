//! Planted-structure generator used by tests, the acceptance suite and the
//! `synth-data` command.
//!
//! Items live around cluster centres in a small latent space and every
//! attribute is a noisy function of the item latent. Users pick unseen
//! items by Gumbel-max over affinity to a preference point that may drift
//! from one cluster to another, so recent history is more informative than
//! old history. With schema confusion on, items also carry a hidden sign
//! that users care about; it is visible only through which of two
//! mirror-image numeric attributes holds the larger value.

use std::collections::BTreeMap;
use std::path::Path;

use chrono::DateTime;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gumbel, StandardNormal};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::load::{write_records, Dataset, LoadOptions};
use super::records::{InteractionRecord, ItemRecord, Record, Review};
use super::registry::{AttributeSpec, Level, ParseRule, SchemaRegistry};
use super::sidecar::{review_entity_id, Sidecar, REVIEW_IMAGE_ATTRIBUTE};
use super::{io_err, DataError, Result};
use crate::modality::Modality;

const BASE_TIME: i64 = 1_546_300_800;
const DAY: i64 = 86_400;
const BIN_LETTERS: [char; 4] = ['a', 'b', 'c', 'd'];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub n_users: usize,
    pub n_items: usize,
    pub latent_dim: usize,
    pub n_clusters: usize,
    /// Scale of the cluster centres.
    pub separation: f64,
    /// Per-dimension spread of items around their centre.
    pub spread: f64,
    /// Gumbel scale for item choice and the strength of attribute noise.
    pub noise: f64,
    pub min_history: usize,
    pub max_history: usize,
    /// Probability that a user drifts to a second cluster.
    pub drift_prob: f64,
    pub schema_confusion: bool,
    /// Affinity bonus for items whose hidden sign matches the user's.
    pub confusion_strength: f64,
    pub review_rate: f64,
    pub review_image_rate: f64,
    pub image_width: usize,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            n_users: 2000,
            n_items: 500,
            latent_dim: 4,
            n_clusters: 8,
            separation: 3.0,
            spread: 0.5,
            noise: 0.3,
            min_history: 8,
            max_history: 30,
            drift_prob: 0.5,
            schema_confusion: false,
            confusion_strength: 3.0,
            review_rate: 0.6,
            review_image_rate: 0.3,
            image_width: 24,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(DataError::Spec(m.to_string()));
        if self.n_users == 0 || self.n_items == 0 || self.latent_dim == 0 || self.n_clusters == 0 {
            return fail("users, items, latent_dim and n_clusters must be positive");
        }
        if self.image_width == 0 {
            return fail("image_width must be positive");
        }
        if self.min_history < 2 || self.min_history > self.max_history {
            return fail("need 2 <= min_history <= max_history");
        }
        if self.max_history > self.n_items {
            return fail("max_history exceeds the number of items a user can pick without repeats");
        }
        let finite_nonneg = [self.separation, self.spread, self.noise, self.confusion_strength];
        if finite_nonneg.iter().any(|x| !x.is_finite() || *x < 0.0) {
            return fail("separation, spread, noise and confusion_strength must be finite and >= 0");
        }
        let probs = [self.drift_prob, self.review_rate, self.review_image_rate];
        if probs.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return fail("rates must lie in [0, 1]");
        }
        Ok(())
    }

    pub fn registry(&self) -> SchemaRegistry {
        let attr = |name: &str, modality, level, parse| AttributeSpec {
            name: name.into(),
            modality,
            level,
            parse,
            source: Vec::new(),
        };
        let mut attributes = vec![
            attr("title", Modality::Text, Level::Item, ParseRule::Plain),
            attr("category", Modality::Categorical, Level::Item, ParseRule::MultiLabel),
            attr("price", Modality::Number, Level::Item, ParseRule::Currency),
            attr("released", Modality::Timestamp, Level::Item, ParseRule::IsoDate),
            AttributeSpec {
                source: vec!["latitude".into(), "longitude".into()],
                ..attr("location", Modality::Geopoint, Level::Item, ParseRule::Plain)
            },
            attr("image", Modality::Image, Level::Item, ParseRule::Plain),
        ];
        if self.schema_confusion {
            attributes.push(attr("upvotes", Modality::Number, Level::Item, ParseRule::Plain));
            attributes.push(attr("downvotes", Modality::Number, Level::Item, ParseRule::Plain));
        }
        for (name, m) in [
            ("timestamp", Modality::Timestamp),
            ("rating", Modality::Number),
            ("title", Modality::Text),
            ("text", Modality::Text),
            (REVIEW_IMAGE_ATTRIBUTE, Modality::Image),
        ] {
            attributes.push(attr(name, m, Level::Interaction, ParseRule::Plain));
        }
        SchemaRegistry {
            name: "synthetic".into(),
            attributes,
        }
    }
}

/// Hidden generating factors, for oracles.
#[derive(Clone, Debug, PartialEq)]
pub struct Truth {
    pub item_cluster: Vec<usize>,
    pub item_latent: Vec<Vec<f64>>,
    pub item_sign: Vec<f64>,
    pub user_cluster: Vec<usize>,
    pub user_sign: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Synthetic {
    pub registry: SchemaRegistry,
    pub records: Vec<Record>,
    pub sidecar: Sidecar,
    pub truth: Truth,
}

pub const DATA_FILE: &str = "data.jsonl";
pub const REGISTRY_FILE: &str = "registry.toml";
pub const SIDECAR_FILE: &str = "sidecar.jsonl";

impl Synthetic {
    pub fn dataset(&self) -> Result<Dataset> {
        let recs = self.records.iter().cloned().enumerate().map(|(i, r)| (i + 1, r));
        Ok(Dataset::from_records(recs, &self.registry, LoadOptions { strict: true })?.0)
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(io_err(dir))?;
        write_records(&dir.join(DATA_FILE), &self.records)?;
        let reg = dir.join(REGISTRY_FILE);
        std::fs::write(&reg, self.registry.to_toml()).map_err(io_err(&reg))?;
        self.sidecar.write(&dir.join(SIDECAR_FILE))
    }
}

fn gaussian(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            z * scale
        })
        .collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn sign(rng: &mut ChaCha8Rng) -> f64 {
    if rng.random::<bool>() {
        1.0
    } else {
        -1.0
    }
}

fn round_to(x: f64, digits: i32) -> f64 {
    let s = 10f64.powi(digits);
    (x * s).round() / s
}

struct World {
    spec: SyntheticSpec,
    centers: Vec<Vec<f64>>,
    /// Rows: price, release, latitude, longitude, vote level.
    numeric_proj: Vec<Vec<f64>>,
    image_proj: Vec<Vec<f64>>,
}

impl World {
    fn new(spec: &SyntheticSpec, rng: &mut ChaCha8Rng) -> Self {
        let l = spec.latent_dim;
        let unit = 1.0 / (l as f64).sqrt();
        Self {
            spec: spec.clone(),
            centers: (0..spec.n_clusters).map(|_| gaussian(rng, l, spec.separation)).collect(),
            numeric_proj: (0..5).map(|_| gaussian(rng, l, unit)).collect(),
            image_proj: (0..spec.image_width).map(|_| gaussian(rng, l, unit)).collect(),
        }
    }

    fn word_for(&self, k: usize, z: f64) -> String {
        let bin = ((z / self.spec.separation.max(1e-9) + 1.0) * 2.0).floor().clamp(0.0, 3.0) as usize;
        format!("w{k}{}", BIN_LETTERS[bin])
    }

    fn vocabulary_word(&self, rng: &mut ChaCha8Rng) -> String {
        let k = rng.random_range(0..self.spec.latent_dim);
        format!("w{k}{}", BIN_LETTERS[rng.random_range(0..4)])
    }

    fn image_vector(&self, z: &[f64], rng: &mut ChaCha8Rng) -> Vec<f64> {
        self.image_proj
            .iter()
            .map(|row| {
                let e: f64 = StandardNormal.sample(rng);
                dot(row, z) + self.spec.noise * 0.3 * e
            })
            .collect()
    }

    fn item(&self, idx: usize, cluster: usize, z: &[f64], sign: f64, rng: &mut ChaCha8Rng, sidecar: &mut Sidecar) -> ItemRecord {
        let spec = &self.spec;
        let id = item_id(idx);
        let mut words = vec![format!("topic{cluster}")];
        for (k, &zk) in z.iter().enumerate() {
            words.push(self.word_for(k, zk));
        }
        for w in words.iter_mut().skip(1) {
            if rng.random::<f64>() < spec.noise * 0.3 {
                *w = self.vocabulary_word(rng);
            }
        }
        words.push("item".into());

        let argmax = z
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |best, (k, &v)| if v > best.1 { (k, v) } else { best })
            .0;
        let mut noisy = |scale: f64| {
            let e: f64 = StandardNormal.sample(rng);
            spec.noise * scale * e
        };
        let p = &self.numeric_proj;
        let price = 20.0 * (0.5 * dot(&p[0], z) + noisy(0.1)).exp();
        let release = BASE_TIME - 4 * 365 * DAY + ((dot(&p[1], z) + noisy(0.1)) * 180.0 * DAY as f64) as i64;
        let release = DateTime::from_timestamp(release.max(0), 0)
            .expect("release date in range")
            .format("%Y-%m-%d")
            .to_string();
        let lat = round_to(40.0 + 2.0 * dot(&p[2], z) + noisy(0.05), 6).clamp(-89.0, 89.0);
        let lon = round_to(-100.0 + 2.0 * dot(&p[3], z) + noisy(0.05), 6).clamp(-179.0, 179.0);
        let votes = 50.0 + 10.0 * dot(&p[4], z) + noisy(1.0);
        let spread: f64 = StandardNormal.sample(rng);
        let delta = 5.0 + 3.0 * spread.abs();

        let mut attributes: BTreeMap<String, Value> = BTreeMap::new();
        attributes.insert("title".into(), json!(words.join(" ")));
        attributes.insert("category".into(), json!(format!("group {argmax}, family {cluster}")));
        attributes.insert("price".into(), json!(format!("${price:.2}")));
        attributes.insert("released".into(), json!(release));
        attributes.insert("latitude".into(), json!(lat));
        attributes.insert("longitude".into(), json!(lon));
        attributes.insert("image".into(), json!([format!("img/{id}.jpg")]));
        if spec.schema_confusion {
            attributes.insert("upvotes".into(), json!(round_to(votes + sign * delta, 3)));
            attributes.insert("downvotes".into(), json!(round_to(votes - sign * delta, 3)));
        }
        sidecar.insert(id.clone(), "image", self.image_vector(z, rng));
        ItemRecord { item_id: id, attributes }
    }
}

fn item_id(i: usize) -> String {
    format!("i{i:05}")
}

fn user_id(u: usize) -> String {
    format!("u{u:05}")
}

pub fn generate(spec: &SyntheticSpec) -> Result<Synthetic> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let world = World::new(spec, &mut rng);
    let l = spec.latent_dim;
    let mut sidecar = Sidecar::new();

    let item_cluster: Vec<usize> = (0..spec.n_items).map(|i| i % spec.n_clusters).collect();
    let item_latent: Vec<Vec<f64>> = item_cluster
        .iter()
        .map(|&c| {
            let off = gaussian(&mut rng, l, spec.spread);
            world.centers[c].iter().zip(off).map(|(a, b)| a + b).collect()
        })
        .collect();
    let item_sign: Vec<f64> = (0..spec.n_items)
        .map(|_| if spec.schema_confusion { sign(&mut rng) } else { 0.0 })
        .collect();
    let mut records: Vec<Record> = (0..spec.n_items)
        .map(|i| {
            Record::Item(world.item(i, item_cluster[i], &item_latent[i], item_sign[i], &mut rng, &mut sidecar))
        })
        .collect();

    let gumbel = Gumbel::new(0.0, 1.0).expect("valid gumbel");
    let mut user_cluster = Vec::with_capacity(spec.n_users);
    let mut user_sign = Vec::with_capacity(spec.n_users);
    for u in 0..spec.n_users {
        let c0 = rng.random_range(0..spec.n_clusters);
        let c1 = if spec.n_clusters > 1 && rng.random::<f64>() < spec.drift_prob {
            (c0 + rng.random_range(1..spec.n_clusters)) % spec.n_clusters
        } else {
            c0
        };
        let offset = gaussian(&mut rng, l, spec.spread * 0.5);
        let s_u = if spec.schema_confusion { sign(&mut rng) } else { 0.0 };
        user_cluster.push(c0);
        user_sign.push(s_u);
        let len = rng.random_range(spec.min_history..=spec.max_history);
        let mut seen = vec![false; spec.n_items];
        let mut t = BASE_TIME + rng.random_range(0..365 * DAY);
        for step in 0..len {
            let w = if c1 != c0 {
                let x = step as f64 / (len - 1) as f64 - 0.5;
                1.0 / (1.0 + (-8.0 * x).exp())
            } else {
                0.0
            };
            let pref: Vec<f64> = (0..l)
                .map(|k| (1.0 - w) * world.centers[c0][k] + w * world.centers[c1][k] + offset[k])
                .collect();
            let mut best = (usize::MAX, f64::NEG_INFINITY);
            for i in 0..spec.n_items {
                if seen[i] {
                    continue;
                }
                let mut score = -sq_dist(&item_latent[i], &pref) + spec.confusion_strength * s_u * item_sign[i];
                if spec.noise > 0.0 {
                    let g: f64 = gumbel.sample(&mut rng);
                    score += spec.noise * g;
                }
                if score > best.1 {
                    best = (i, score);
                }
            }
            let i = best.0;
            seen[i] = true;
            t += rng.random_range(3600..5 * DAY);
            let review = (rng.random::<f64>() < spec.review_rate).then(|| {
                let fit = sq_dist(&item_latent[i], &pref) / (l as f64 * spec.spread * spec.spread).max(1e-9);
                let rating = (5.0 - fit).round().clamp(1.0, 5.0);
                let tone = ["poor", "poor", "fine", "good", "great"][rating as usize - 1];
                let mut review = Review {
                    title: Some(format!("{tone} topic{}", item_cluster[i])),
                    text: Some(format!("{tone} {} item", world.word_for(0, item_latent[i][0]))),
                    rating: Some(rating),
                    image_refs: Vec::new(),
                };
                if rng.random::<f64>() < spec.review_image_rate {
                    review.image_refs.push(format!("rev/{}/{t}.jpg", user_id(u)));
                    let v = world.image_vector(&item_latent[i], &mut rng);
                    sidecar.insert(review_entity_id(&user_id(u), &item_id(i), t), REVIEW_IMAGE_ATTRIBUTE, v);
                }
                review
            });
            records.push(Record::Interaction(InteractionRecord {
                user_id: user_id(u),
                item_id: item_id(i),
                timestamp: t,
                location: None,
                review,
            }));
        }
    }

    Ok(Synthetic {
        registry: spec.registry(),
        records,
        sidecar,
        truth: Truth {
            item_cluster,
            item_latent,
            item_sign,
            user_cluster,
            user_sign,
        },
    })
}
