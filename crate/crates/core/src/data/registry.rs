use std::collections::BTreeSet;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{io_err, DataError, Result};
use crate::modality::Modality;
use crate::params::hex;

/// Interaction-level names a registry may declare; they map onto fixed
/// fields of the interaction record.
pub const INTERACTION_FIELDS: [&str; 6] = ["timestamp", "location", "rating", "title", "text", "review_image"];

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Level {
    Item,
    Interaction,
}

/// How a raw JSON value becomes a typed attribute value.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParseRule {
    #[default]
    Plain,
    /// Number with currency symbols and thousands separators, e.g. "$1,299.00".
    Currency,
    /// "12.5%" → 0.125
    Percent,
    /// Calendar date or RFC 3339 timestamp → unix seconds.
    IsoDate,
    /// Integer milliseconds → unix seconds.
    UnixMs,
    /// Array of strings joined with spaces.
    Join,
    /// Object flattened to "key: value; …" with keys sorted.
    Flatten,
    /// Comma-separated labels.
    MultiLabel,
}

impl ParseRule {
    fn allowed(self, m: Modality) -> bool {
        use Modality::*;
        use ParseRule::*;
        match self {
            Plain => true,
            Currency | Percent => m == Number,
            IsoDate | UnixMs => m == Timestamp,
            Join | Flatten => m == Text,
            MultiLabel => m == Categorical,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttributeSpec {
    pub name: String,
    pub modality: Modality,
    pub level: Level,
    #[serde(default)]
    pub parse: ParseRule,
    /// For geopoints stored as two numeric fields: `[latitude, longitude]`.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub source: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SchemaRegistry {
    #[serde(default)]
    pub name: String,
    pub attributes: Vec<AttributeSpec>,
}

impl SchemaRegistry {
    pub fn from_toml(text: &str) -> Result<Self> {
        let reg: Self = toml::from_str(text).map_err(|e| DataError::Registry(e.to_string()))?;
        reg.validate()?;
        Ok(reg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(io_err(path))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("registry serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let mut names = BTreeSet::new();
        let mut sources = BTreeSet::new();
        for a in &self.attributes {
            let err = |msg: String| Err(DataError::Registry(format!("`{}`: {msg}", a.name)));
            if a.name.trim().is_empty() {
                return Err(DataError::Registry("attribute with empty name".into()));
            }
            if !names.insert((a.level, a.name.as_str())) {
                return err(format!("declared twice at {:?} level", a.level));
            }
            if !a.parse.allowed(a.modality) {
                return err(format!("parse rule {:?} does not apply to {}", a.parse, a.modality));
            }
            if !a.source.is_empty() && (a.modality != Modality::Geopoint || a.source.len() != 2) {
                return err("`source` must name exactly [latitude, longitude] of a geopoint".into());
            }
            if a.level == Level::Interaction && !INTERACTION_FIELDS.contains(&a.name.as_str()) {
                return err(format!("interaction-level attributes must be one of {INTERACTION_FIELDS:?}"));
            }
            sources.extend(a.source.iter().map(String::as_str));
        }
        if self.item_attributes().next().is_none() {
            return Err(DataError::Registry("no item-level attributes".into()));
        }
        if let Some(clash) = names.iter().map(|(_, n)| *n).find(|n| sources.contains(n)) {
            return Err(DataError::Registry(format!("`{clash}` is both an attribute and a geopoint source")));
        }
        Ok(())
    }

    /// Item-level attributes in declaration order with their slot index.
    pub fn item_attributes(&self) -> impl Iterator<Item = (usize, &AttributeSpec)> {
        self.attributes
            .iter()
            .filter(|a| a.level == Level::Item)
            .enumerate()
    }

    pub fn n_item_attributes(&self) -> usize {
        self.item_attributes().count()
    }

    pub fn item_attribute(&self, slot: usize) -> &AttributeSpec {
        self.item_attributes().nth(slot).expect("slot in range").1
    }

    /// SHA-256 of the canonical serialization.
    pub fn hash(&self) -> String {
        hex(&Sha256::digest(serde_json::to_vec(self).expect("registry serializes")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const REG: &str = r#"
name = "toy"

[[attributes]]
name = "title"
modality = "text"
level = "item"

[[attributes]]
name = "price"
modality = "number"
level = "item"
parse = "currency"

[[attributes]]
name = "location"
modality = "geopoint"
level = "item"
source = ["latitude", "longitude"]

[[attributes]]
name = "rating"
modality = "number"
level = "interaction"
"#;

    #[test]
    fn parses_and_orders_item_slots() {
        let r = SchemaRegistry::from_toml(REG).unwrap();
        let names: Vec<_> = r.item_attributes().map(|(i, a)| (i, a.name.as_str())).collect();
        assert_eq!(names, vec![(0, "title"), (1, "price"), (2, "location")]);
        assert_eq!(SchemaRegistry::from_toml(&r.to_toml()).unwrap(), r);
        assert_eq!(r.hash().len(), 64);
    }

    #[test]
    fn rejects_unknown_modality_and_bad_rules() {
        let unknown = REG.replace("modality = \"text\"", "modality = \"audio\"");
        assert!(SchemaRegistry::from_toml(&unknown).is_err());
        let bad_rule = REG.replace("parse = \"currency\"", "parse = \"iso_date\"");
        assert!(SchemaRegistry::from_toml(&bad_rule).is_err());
        let bad_level = REG.replace("name = \"rating\"", "name = \"mood\"");
        assert!(SchemaRegistry::from_toml(&bad_level).is_err());
        let dup = format!("{REG}\n[[attributes]]\nname = \"title\"\nmodality = \"text\"\nlevel = \"item\"\n");
        assert!(SchemaRegistry::from_toml(&dup).is_err());
        let review_title = format!("{REG}\n[[attributes]]\nname = \"title\"\nmodality = \"text\"\nlevel = \"interaction\"\n");
        assert!(SchemaRegistry::from_toml(&review_title).is_ok());
    }
}
