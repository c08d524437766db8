//! Frozen per-attribute and per-interaction features, computed once per
//! dataset before training.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{review_entity_id, AttrValue, Dataset, Level, Sidecar, REVIEW_IMAGE_ATTRIBUTE};
use crate::embed::{EmbedError, ImageEmbedder, TextEmbedder, DEFAULT_TEXT_WIDTH};
use crate::modality::Modality;
use crate::numeric::{geo_features, time_features, FieldNorm, NumericEncoder, NumericError, TimeSpan, GEO_FEATURES, TIME_FEATURES};
use crate::params::ParamStore;
use crate::tensor::Float;

#[derive(Debug, Error)]
pub enum FeatureError {
    #[error("item `{item}`, attribute `{attribute}`: {source}")]
    Embed {
        item: String,
        attribute: String,
        #[source]
        source: EmbedError,
    },
    #[error("no sidecar vector for `{entity}` / `{attribute}` (strict features)")]
    Missing { entity: String, attribute: String },
    #[error("no normalization statistics for `{0}`")]
    MissingNorm(String),
    #[error("no interactions to fit normalization statistics on")]
    NoEvents,
    #[error(transparent)]
    Numeric(#[from] NumericError),
}

pub type Result<T, E = FeatureError> = std::result::Result<T, E>;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FeatureConfig {
    pub text_native: usize,
    /// Seed of the frozen hashing projections.
    pub seed: u64,
    /// Fail instead of falling back when a sidecar vector is missing.
    pub strict: bool,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        Self {
            text_native: DEFAULT_TEXT_WIDTH,
            seed: 0x5eed,
            strict: false,
        }
    }
}

/// Field statistics fitted on training interactions (ratings, interaction
/// times) and on the item table (item attributes).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub numbers: BTreeMap<String, FieldNorm>,
    pub times: BTreeMap<String, TimeSpan>,
    pub rating: Option<FieldNorm>,
    pub interaction_time: TimeSpan,
}

impl NormStats {
    /// Interactions other than each user's last two count as training data.
    pub fn fit(ds: &Dataset, scale_bound: f64) -> Result<Self> {
        let mut numbers: BTreeMap<String, Vec<f64>> = BTreeMap::new();
        let mut times: BTreeMap<String, Vec<i64>> = BTreeMap::new();
        for item in &ds.items {
            for (slot, v) in &item.attrs {
                let name = &ds.registry.item_attribute(*slot).name;
                match v {
                    AttrValue::Number(x) => numbers.entry(name.clone()).or_default().push(*x),
                    AttrValue::Timestamp(t) => times.entry(name.clone()).or_default().push(*t),
                    _ => {}
                }
            }
        }
        let train_events = || {
            ds.users
                .iter()
                .flat_map(|u| u.events[..u.events.len().saturating_sub(2)].iter())
        };
        let all_events = || ds.users.iter().flat_map(|u| u.events.iter());
        let span = TimeSpan::fit(train_events().map(|e| e.timestamp))
            .or_else(|| TimeSpan::fit(all_events().map(|e| e.timestamp)))
            .ok_or(FeatureError::NoEvents)?;
        let ratings = |it: &mut dyn Iterator<Item = &crate::data::Event>| -> Vec<f64> {
            it.filter_map(|e| e.review.as_ref()?.rating).collect()
        };
        let mut train_ratings = ratings(&mut train_events());
        if train_ratings.is_empty() {
            train_ratings = ratings(&mut all_events());
        }
        Ok(Self {
            numbers: numbers
                .into_iter()
                .filter_map(|(k, v)| Some((k, FieldNorm::fit(v, scale_bound)?)))
                .collect(),
            times: times
                .into_iter()
                .filter_map(|(k, v)| Some((k, TimeSpan::fit(v)?)))
                .collect(),
            rating: FieldNorm::fit(train_ratings, scale_bound),
            interaction_time: span,
        })
    }
}

/// One present attribute of an item.
#[derive(Clone, Debug, PartialEq)]
pub struct AttrRow {
    pub slot: usize,
    pub modality: Modality,
    /// Frozen value embedding; zero for timestamps and geopoints, whose
    /// projections are learned.
    pub value: Vec<f64>,
    pub time: Option<[f64; TIME_FEATURES]>,
    pub geo: Option<[f64; GEO_FEATURES]>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EventFeatures {
    pub item: usize,
    /// `[review text ‖ rating encoding ‖ review image]`, each of width d,
    /// with zeros for absent parts; `None` without a review.
    pub review: Option<Vec<f64>>,
    pub time: [f64; TIME_FEATURES],
}

#[derive(Clone, Debug, PartialEq)]
pub struct FeatureStore {
    pub d: usize,
    pub slot_names: Vec<String>,
    pub slot_modality: Vec<Modality>,
    /// Frozen text embedding of each attribute name.
    pub name_embeddings: Vec<Vec<f64>>,
    pub items: Vec<Vec<AttrRow>>,
    /// Indexed like `Dataset::users[u].events`.
    pub events: Vec<Vec<EventFeatures>>,
    pub norms: NormStats,
}

struct Embedders<'a> {
    text: TextEmbedder,
    image: ImageEmbedder,
    sidecar: &'a Sidecar,
    strict: bool,
}

impl Embedders<'_> {
    fn images(&self, entity: &str, attribute: &str, refs: &[String]) -> Result<Vec<f64>, FeatureError> {
        let wrap = |source| FeatureError::Embed {
            item: entity.to_string(),
            attribute: attribute.to_string(),
            source,
        };
        if let Some(v) = self.sidecar.get(entity, attribute) {
            return self.image.embed_vector(v).map_err(wrap);
        }
        if self.strict {
            return Err(FeatureError::Missing {
                entity: entity.to_string(),
                attribute: attribute.to_string(),
            });
        }
        let d = self.image.width();
        let mut acc = vec![0.0; d];
        for r in refs {
            let v = match self.sidecar.get(r, attribute) {
                Some(v) => self.image.embed_vector(v).map_err(wrap)?,
                None => self.image.embed_fallback(r),
            };
            acc.iter_mut().zip(&v).for_each(|(a, x)| *a += x);
        }
        let n = refs.len().max(1) as f64;
        acc.iter_mut().for_each(|a| *a /= n);
        Ok(acc)
    }

    /// Text-like values may also come precomputed from the sidecar.
    fn text_like(&self, entity: &str, attribute: &str, v: &AttrValue) -> Result<Vec<f64>> {
        let wrap = |source| FeatureError::Embed {
            item: entity.to_string(),
            attribute: attribute.to_string(),
            source,
        };
        if let Some(native) = self.sidecar.get(entity, attribute) {
            return self.image.embed_vector(native).map_err(wrap);
        }
        match v {
            AttrValue::Text(s) => self.text.embed(s).map_err(wrap),
            AttrValue::Categorical(ls) => self.text.embed_categorical(ls).map_err(wrap),
            _ => unreachable!("not a text-like value"),
        }
    }
}

fn encode_scalars<F: Float>(enc: &NumericEncoder, store: &ParamStore<F>, xs: &[f64]) -> Result<Vec<Vec<f64>>> {
    if xs.is_empty() {
        return Ok(Vec::new());
    }
    let t = enc.encode_values(store, xs)?;
    Ok(t.rows().map(|r| r.iter().map(|x| x.as_f64()).collect()).collect())
}

impl FeatureStore {
    pub fn build<F: Float>(
        ds: &Dataset,
        sidecar: &Sidecar,
        cfg: &FeatureConfig,
        norms: NormStats,
        numeric: &NumericEncoder,
        store: &ParamStore<F>,
    ) -> Result<Self> {
        let d = numeric.config.d_out;
        let emb = Embedders {
            text: TextEmbedder::new(cfg.text_native, d, cfg.seed),
            image: ImageEmbedder::new(d, cfg.seed, sidecar.widths()),
            sidecar,
            strict: cfg.strict,
        };
        let specs: Vec<_> = ds.registry.item_attributes().map(|(_, a)| a).collect();
        let wants_review_image = ds
            .registry
            .attributes
            .iter()
            .any(|a| a.level == Level::Interaction && a.name == REVIEW_IMAGE_ATTRIBUTE);

        let mut items = Vec::with_capacity(ds.items.len());
        let mut pending: Vec<(usize, usize, f64)> = Vec::new();
        for (i, item) in ds.items.iter().enumerate() {
            let mut rows = Vec::with_capacity(item.attrs.len());
            for (slot, v) in &item.attrs {
                let spec = specs[*slot];
                let mut row = AttrRow {
                    slot: *slot,
                    modality: v.modality(),
                    value: vec![0.0; d],
                    time: None,
                    geo: None,
                };
                match v {
                    AttrValue::Text(_) | AttrValue::Categorical(_) => row.value = emb.text_like(&item.id, &spec.name, v)?,
                    AttrValue::Images(refs) => row.value = emb.images(&item.id, &spec.name, refs)?,
                    AttrValue::Number(x) => {
                        let norm = norms
                            .numbers
                            .get(&spec.name)
                            .ok_or_else(|| FeatureError::MissingNorm(spec.name.clone()))?;
                        pending.push((i, rows.len(), norm.apply(*x)));
                    }
                    AttrValue::Timestamp(t) => {
                        let span = norms
                            .times
                            .get(&spec.name)
                            .ok_or_else(|| FeatureError::MissingNorm(spec.name.clone()))?;
                        row.time = Some(time_features(*t, *span)?);
                    }
                    AttrValue::Geo { lat, lon } => row.geo = Some(geo_features(*lat, *lon)?),
                }
                rows.push(row);
            }
            items.push(rows);
        }
        let xs: Vec<f64> = pending.iter().map(|p| p.2).collect();
        for ((i, r, _), e) in pending.iter().zip(encode_scalars(numeric, store, &xs)?) {
            items[*i][*r].value = e;
        }

        let mut ratings = Vec::new();
        let mut events = Vec::with_capacity(ds.users.len());
        for (u, user) in ds.users.iter().enumerate() {
            let mut evs = Vec::with_capacity(user.events.len());
            for (k, e) in user.events.iter().enumerate() {
                let review = match &e.review {
                    Some(r) => {
                        let mut v = vec![0.0; 3 * d];
                        if let Some(text) = r.full_text().filter(|t| crate::embed::tokenize(t).next().is_some()) {
                            v[..d].copy_from_slice(&emb.text.embed(&text).expect("text has tokens"));
                        }
                        if let Some(x) = r.rating {
                            let norm = norms.rating.ok_or_else(|| FeatureError::MissingNorm("rating".into()))?;
                            ratings.push((u, k, norm.apply(x)));
                        }
                        let entity = review_entity_id(&user.id, &ds.items[e.item].id, e.timestamp);
                        let has_image = !r.image_refs.is_empty() || sidecar.get(&entity, REVIEW_IMAGE_ATTRIBUTE).is_some();
                        if wants_review_image && has_image {
                            let img = emb.images(&entity, REVIEW_IMAGE_ATTRIBUTE, &r.image_refs)?;
                            v[2 * d..].copy_from_slice(&img);
                        }
                        Some(v)
                    }
                    None => None,
                };
                evs.push(EventFeatures {
                    item: e.item,
                    review,
                    time: time_features(e.timestamp, norms.interaction_time)?,
                });
            }
            events.push(evs);
        }
        let xs: Vec<f64> = ratings.iter().map(|r| r.2).collect();
        for ((u, k, _), e) in ratings.iter().zip(encode_scalars(numeric, store, &xs)?) {
            let v = events[*u][*k].review.as_mut().expect("rated review");
            v[d..2 * d].copy_from_slice(&e);
        }

        Ok(Self {
            d,
            slot_names: specs.iter().map(|a| a.name.clone()).collect(),
            slot_modality: specs.iter().map(|a| a.modality).collect(),
            name_embeddings: specs
                .iter()
                .map(|a| emb.text.embed(&a.name).unwrap_or_else(|_| emb.image.embed_fallback(&a.name)))
                .collect(),
            items,
            events,
            norms,
        })
    }

    pub fn n_slots(&self) -> usize {
        self.slot_names.len()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synthetic::{generate, SyntheticSpec};
    use crate::numeric::NumericConfig;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn build(strict: bool, sidecar: Option<Sidecar>) -> Result<(Dataset, FeatureStore)> {
        let syn = generate(&SyntheticSpec {
            n_users: 20,
            n_items: 40,
            schema_confusion: true,
            seed: 3,
            ..SyntheticSpec::default()
        })
        .unwrap();
        let ds = syn.dataset().unwrap();
        let mut store = ParamStore::<f64>::new();
        let enc = NumericEncoder::init(&mut store, NumericConfig::for_width(16), &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let norms = NormStats::fit(&ds, 10.0)?;
        let cfg = FeatureConfig {
            strict,
            ..FeatureConfig::default()
        };
        let fs = FeatureStore::build(&ds, &sidecar.unwrap_or(syn.sidecar), &cfg, norms, &enc, &store)?;
        Ok((ds, fs))
    }

    #[test]
    fn one_row_per_present_attribute_with_width_d() {
        let (ds, fs) = build(false, None).unwrap();
        assert_eq!(fs.n_slots(), 8);
        for (item, rows) in ds.items.iter().zip(&fs.items) {
            assert_eq!(rows.len(), item.attrs.len());
            for r in rows {
                assert_eq!(r.value.len(), 16);
                assert!(r.value.iter().all(|x| x.is_finite()));
                assert_eq!(r.time.is_some(), r.modality == Modality::Timestamp);
                assert_eq!(r.geo.is_some(), r.modality == Modality::Geopoint);
            }
        }
        let with_review = fs.events.iter().flatten().filter(|e| e.review.is_some()).count();
        assert!(with_review > 0);
        assert!(fs.events.iter().flatten().all(|e| e.review.as_ref().is_none_or(|r| r.len() == 48)));
    }

    #[test]
    fn strict_features_require_sidecar_vectors() {
        assert!(matches!(build(true, Some(Sidecar::new())), Err(FeatureError::Missing { .. })));
        assert!(build(false, Some(Sidecar::new())).is_ok());
    }

    #[test]
    fn norms_fit_every_numeric_field() {
        let (_, fs) = build(false, None).unwrap();
        let names: Vec<&str> = fs.norms.numbers.keys().map(String::as_str).collect();
        assert_eq!(names, vec!["downvotes", "price", "upvotes"]);
        assert!(fs.norms.times.contains_key("released"));
        assert!(fs.norms.rating.is_some());
    }
}
