//! Frozen value embedders for text, categorical and image attributes.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use thiserror::Error;

pub const DEFAULT_TEXT_WIDTH: usize = 256;
const CATEGORY_PREFIX: &str = "category: ";
const IMAGE_SALT: u64 = 0x1a6e_5eed_0000_0000;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EmbedError {
    #[error("text has no alphanumeric tokens")]
    EmptyText,
    #[error("no labels")]
    NoLabels,
    #[error("no image projection prepared for native width {0}")]
    UnknownWidth(usize),
    #[error("zero or non-finite image vector")]
    DegenerateVector,
}

pub type Result<T, E = EmbedError> = std::result::Result<T, E>;

pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Lowercased alphanumeric runs.
pub fn tokenize(s: &str) -> impl Iterator<Item = String> + '_ {
    s.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
}

fn l2_normalize(v: &mut [f64]) -> bool {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n == 0.0 || !n.is_finite() {
        return false;
    }
    v.iter_mut().for_each(|x| *x /= n);
    true
}

/// Row-major [rows × cols] matrix with entries N(0, 1/cols).
fn gaussian_projection(rows: usize, cols: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let std = 1.0 / (cols as f64).sqrt();
    (0..rows * cols)
        .map(|_| {
            let z: f64 = StandardNormal.sample(&mut rng);
            z * std
        })
        .collect()
}

fn project(x: &[f64], proj: &[f64], d: usize) -> Vec<f64> {
    let mut out = vec![0.0; d];
    for (i, &xi) in x.iter().enumerate() {
        if xi != 0.0 {
            for (o, &p) in out.iter_mut().zip(&proj[i * d..(i + 1) * d]) {
                *o += xi * p;
            }
        }
    }
    out
}

/// Signed feature hashing of a bag of words followed by a fixed random
/// projection to width `d`.
#[derive(Clone, Debug, PartialEq)]
pub struct TextEmbedder {
    native: usize,
    d: usize,
    proj: Vec<f64>,
}

impl TextEmbedder {
    pub fn new(native: usize, d: usize, seed: u64) -> Self {
        Self {
            native,
            d,
            proj: gaussian_projection(native, d, seed),
        }
    }

    pub fn width(&self) -> usize {
        self.d
    }

    /// Unit-norm hashed bag of words.
    pub fn native(&self, s: &str) -> Result<Vec<f64>> {
        let mut v = vec![0.0; self.native];
        let mut any = false;
        for tok in tokenize(s) {
            let h = fnv1a(tok.as_bytes());
            let sign = if (h >> 63) & 1 == 1 { -1.0 } else { 1.0 };
            v[(h % self.native as u64) as usize] += sign;
            any = true;
        }
        if !any || !l2_normalize(&mut v) {
            return Err(EmbedError::EmptyText);
        }
        Ok(v)
    }

    pub fn project(&self, native: &[f64]) -> Vec<f64> {
        project(native, &self.proj, self.d)
    }

    pub fn embed(&self, s: &str) -> Result<Vec<f64>> {
        Ok(self.project(&self.native(s)?))
    }

    pub fn categorical_native(&self, labels: &[String]) -> Result<Vec<f64>> {
        if labels.is_empty() {
            return Err(EmbedError::NoLabels);
        }
        let mut acc = vec![0.0; self.native];
        for l in labels {
            let v = self.native(&format!("{CATEGORY_PREFIX}{l}"))?;
            acc.iter_mut().zip(&v).for_each(|(a, x)| *a += x);
        }
        acc.iter_mut().for_each(|a| *a /= labels.len() as f64);
        if !l2_normalize(&mut acc) {
            return Err(EmbedError::EmptyText);
        }
        Ok(acc)
    }

    /// Category-prefixed text embedding; several labels are averaged and
    /// renormalized before projection.
    pub fn embed_categorical(&self, labels: &[String]) -> Result<Vec<f64>> {
        Ok(self.project(&self.categorical_native(labels)?))
    }
}

/// Projects precomputed image vectors of any prepared width to `d`, or falls
/// back to a unit-norm pseudo-embedding seeded by the reference id.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageEmbedder {
    d: usize,
    seed: u64,
    projections: BTreeMap<usize, Vec<f64>>,
}

impl ImageEmbedder {
    pub fn new(d: usize, seed: u64, widths: impl IntoIterator<Item = usize>) -> Self {
        let projections = widths
            .into_iter()
            .map(|w| (w, gaussian_projection(w, d, seed ^ IMAGE_SALT ^ w as u64)))
            .collect();
        Self { d, seed, projections }
    }

    pub fn width(&self) -> usize {
        self.d
    }

    pub fn embed_vector(&self, v: &[f64]) -> Result<Vec<f64>> {
        let proj = self.projections.get(&v.len()).ok_or(EmbedError::UnknownWidth(v.len()))?;
        let mut x = v.to_vec();
        if !l2_normalize(&mut x) {
            return Err(EmbedError::DegenerateVector);
        }
        Ok(project(&x, proj, self.d))
    }

    pub fn embed_fallback(&self, reference: &str) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ fnv1a(reference.as_bytes()));
        let mut v: Vec<f64> = (0..self.d).map(|_| StandardNormal.sample(&mut rng)).collect();
        l2_normalize(&mut v);
        v
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cos(a: &[f64], b: &[f64]) -> f64 {
        let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
        let n = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
        dot / (n(a) * n(b))
    }

    fn text() -> TextEmbedder {
        TextEmbedder::new(DEFAULT_TEXT_WIDTH, 32, 7)
    }

    #[test]
    fn bag_of_words_ignores_order_case_and_spacing() {
        let t = text();
        assert_eq!(t.embed("a b").unwrap(), t.embed("b  A").unwrap());
        assert!(t.embed("  ,; ").is_err());
    }

    #[test]
    fn shared_tokens_are_closer_at_native_stage() {
        let t = text();
        let base = t.native("red lipstick").unwrap();
        let near = t.native("red lipstick gloss").unwrap();
        let far = t.native("stroller wheel").unwrap();
        assert!(cos(&base, &near) > cos(&base, &far));
        let norm = base.iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!((norm - 1.0).abs() < 1e-6);
    }

    #[test]
    fn categorical_prefix_and_multi_label_mean() {
        let t = text();
        let label = vec!["Beauty".to_string()];
        assert_ne!(t.embed_categorical(&label).unwrap(), t.embed("Beauty").unwrap());
        assert_eq!(t.embed_categorical(&label).unwrap(), t.embed_categorical(&label).unwrap());

        let labels = vec!["Mexican".to_string(), "Burgers".to_string()];
        let a = t.native("category: Mexican").unwrap();
        let b = t.native("category: Burgers").unwrap();
        let mut mean: Vec<f64> = a.iter().zip(&b).map(|(x, y)| (x + y) / 2.0).collect();
        let n = mean.iter().map(|x| x * x).sum::<f64>().sqrt();
        mean.iter_mut().for_each(|x| *x /= n);
        let direct = t.project(&mean);
        let got = t.embed_categorical(&labels).unwrap();
        assert!(got.iter().zip(&direct).all(|(x, y)| (x - y).abs() < 1e-12));
    }

    #[test]
    fn image_vectors_of_any_prepared_width_project_to_d() {
        let img = ImageEmbedder::new(16, 3, [768, 24]);
        let v: Vec<f64> = (0..768).map(|i| (i as f64).sin()).collect();
        assert_eq!(img.embed_vector(&v).unwrap().len(), 16);
        assert!(matches!(img.embed_vector(&[1.0; 5]), Err(EmbedError::UnknownWidth(5))));
        assert!(img.embed_vector(&[0.0; 24]).is_err());
    }

    #[test]
    fn image_fallback_is_deterministic_unit_norm() {
        let img = ImageEmbedder::new(16, 3, []);
        let a = img.embed_fallback("img_0042.jpg");
        assert_eq!(a, img.embed_fallback("img_0042.jpg"));
        assert_ne!(a, img.embed_fallback("img_0043.jpg"));
        assert!((a.iter().map(|x| x * x).sum::<f64>() - 1.0).abs() < 1e-12);
    }
}
