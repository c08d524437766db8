use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

/// The six value types an attribute can carry.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Text,
    Categorical,
    Image,
    Number,
    Timestamp,
    Geopoint,
}

impl Modality {
    pub const ALL: [Modality; 6] = [
        Modality::Text,
        Modality::Categorical,
        Modality::Image,
        Modality::Number,
        Modality::Timestamp,
        Modality::Geopoint,
    ];

    pub const COUNT: usize = 6;

    /// Row of the type-embedding table.
    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Modality::Text => "text",
            Modality::Categorical => "categorical",
            Modality::Image => "image",
            Modality::Number => "number",
            Modality::Timestamp => "timestamp",
            Modality::Geopoint => "geopoint",
        }
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("unknown modality tag `{0}`")]
pub struct UnknownModality(pub String);

impl FromStr for Modality {
    type Err = UnknownModality;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Modality::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| UnknownModality(s.to_string()))
    }
}
