//! Unified multimodal item and user encoder for sequential recommendation.
//!
//! Items are described by typed attribute sets. Every attribute becomes the
//! sum of a name, type and value embedding; a query-based transformer
//! compresses each item into a fixed number of tokens, and a second one
//! summarizes a user's interaction history.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod embed;
pub mod eval;
pub mod experiments;
pub mod features;
pub mod gradcheck;
pub mod loss;
pub mod modality;
pub mod model;
pub mod numeric;
pub mod optim;
pub mod params;
pub mod tensor;
pub mod train;
