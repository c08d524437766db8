use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{io_err, DataError, Result};

/// Attribute name under which review images are stored.
pub const REVIEW_IMAGE_ATTRIBUTE: &str = "review_image";

/// Entity id for the review attached to one interaction.
pub fn review_entity_id(user: &str, item: &str, timestamp: i64) -> String {
    format!("{user}:{item}:{timestamp}")
}

/// One line of a feature sidecar.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SidecarRecord {
    pub entity_id: String,
    pub attribute: String,
    pub vector: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub width: Option<usize>,
}

/// Precomputed native vectors keyed by (entity id, attribute).
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Sidecar {
    vectors: BTreeMap<(String, String), Vec<f64>>,
}

impl Sidecar {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, entity_id: impl Into<String>, attribute: impl Into<String>, vector: Vec<f64>) {
        self.vectors.insert((entity_id.into(), attribute.into()), vector);
    }

    pub fn get(&self, entity_id: &str, attribute: &str) -> Option<&[f64]> {
        self.vectors
            .get(&(entity_id.to_string(), attribute.to_string()))
            .map(Vec::as_slice)
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    /// Distinct vector widths, so image projections can be prepared.
    pub fn widths(&self) -> Vec<usize> {
        let mut w: Vec<usize> = self.vectors.values().map(Vec::len).collect();
        w.sort_unstable();
        w.dedup();
        w
    }

    pub fn parse(reader: impl BufRead) -> Result<Self> {
        let mut out = Self::new();
        for (i, line) in reader.lines().enumerate() {
            let line_no = i + 1;
            let bad = |msg: String| DataError::Sidecar { line: line_no, msg };
            let line = line.map_err(|e| bad(e.to_string()))?;
            if line.trim().is_empty() {
                continue;
            }
            let r: SidecarRecord = serde_json::from_str(&line).map_err(|e| bad(e.to_string()))?;
            if r.vector.is_empty() || r.vector.iter().any(|x| !x.is_finite()) {
                return Err(bad("vector must be non-empty and finite".into()));
            }
            if let Some(w) = r.width {
                if w != r.vector.len() {
                    return Err(bad(format!("width {w} but vector has {} entries", r.vector.len())));
                }
            }
            let key = (r.entity_id, r.attribute);
            if out.vectors.contains_key(&key) {
                return Err(bad(format!("duplicate entry for ({}, {})", key.0, key.1)));
            }
            out.vectors.insert(key, r.vector);
        }
        Ok(out)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(io_err(path))?;
        Self::parse(BufReader::new(file))
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(io_err(path))?;
        let mut w = BufWriter::new(file);
        for ((entity_id, attribute), vector) in &self.vectors {
            let r = SidecarRecord {
                entity_id: entity_id.clone(),
                attribute: attribute.clone(),
                vector: vector.clone(),
                width: Some(vector.len()),
            };
            serde_json::to_writer(&mut w, &r).expect("sidecar serializes");
            w.write_all(b"\n").map_err(io_err(path))?;
        }
        w.flush().map_err(io_err(path))
    }
}
