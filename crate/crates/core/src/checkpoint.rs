//! Binary checkpoints: config snapshot, normalization statistics, named
//! f32 parameters with optimizer moments, and a trailing SHA-256.
//!
//! Layout (little-endian): `UNIRECKP`, u32 version, u64 header length,
//! JSON header, u32 parameter count, then per parameter a u32-prefixed
//! name, u8 group, u32 rank, u64 dims, f32 values, u8 moment flag and the
//! two moment arrays when set; finally the digest of everything before it.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::config::RunConfig;
use crate::features::NormStats;
use crate::optim::AdamW;
use crate::params::{hex, Group, ParamStore};
use crate::tensor::{Float, Tensor};
use crate::train::Stage;

pub const MAGIC: &[u8; 8] = b"UNIRECKP";
pub const VERSION: u32 = 1;
const DIGEST_LEN: usize = 32;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("not a checkpoint (bad magic bytes)")]
    Magic,
    #[error("checkpoint version {found} is not supported (expected {expected})")]
    Version { found: u32, expected: u32 },
    #[error("checksum mismatch: file is corrupt or truncated")]
    Checksum,
    #[error("malformed checkpoint: {0}")]
    Format(String),
    #[error("checkpoint/config mismatch on `{field}`: checkpoint has {checkpoint}, config has {config}")]
    Mismatch { field: &'static str, checkpoint: String, config: String },
    #[error("parameter `{name}` has shape {found:?} in the checkpoint, model expects {expected:?}")]
    Shape { name: String, found: Vec<usize>, expected: Vec<usize> },
    #[error("checkpoint lacks parameter `{0}`")]
    MissingParam(String),
    #[error("checkpoint has unknown parameter `{0}`")]
    UnexpectedParam(String),
}

pub type Result<T, E = CheckpointError> = std::result::Result<T, E>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub config: RunConfig,
    pub n_slots: usize,
    pub schema_hash: String,
    pub norms: NormStats,
    /// Last completed stage, if any.
    pub stage: Option<Stage>,
    pub optimizer_step: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct NamedParam {
    pub name: String,
    pub group: Group,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
    pub moments: Option<(Vec<f32>, Vec<f32>)>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub header: Header,
    pub params: Vec<NamedParam>,
}

fn to_f32<F: Float>(t: &Tensor<F>) -> Vec<f32> {
    t.data().iter().map(|x| x.as_f64() as f32).collect()
}

fn group_code(g: Group) -> u8 {
    Group::ALL.iter().position(|x| *x == g).expect("group listed in ALL") as u8
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or_else(|| CheckpointError::Format("unexpected end of data".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn len(&mut self) -> Result<usize> {
        usize::try_from(self.u64()?).map_err(|_| CheckpointError::Format("length overflow".into()))
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let bytes = self.take(n.checked_mul(4).ok_or_else(|| CheckpointError::Format("length overflow".into()))?)?;
        Ok(bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect())
    }
}

impl Checkpoint {
    /// Snapshot of every parameter in `store`, with moments when an
    /// optimizer is given.
    pub fn capture<F: Float>(header: Header, store: &ParamStore<F>, opt: Option<&AdamW<F>>) -> Self {
        let params = store
            .iter()
            .map(|(id, p)| NamedParam {
                name: p.name.clone(),
                group: p.group,
                shape: p.value.shape().to_vec(),
                data: to_f32(&p.value),
                moments: opt.and_then(|o| o.moments(id)).map(|(m, v)| (to_f32(m), to_f32(v))),
            })
            .collect();
        Self { header, params }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        let header = serde_json::to_vec(&self.header).expect("header serializes");
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        let put = |out: &mut Vec<u8>, xs: &[f32]| xs.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes()));
        for p in &self.params {
            out.extend_from_slice(&(p.name.len() as u32).to_le_bytes());
            out.extend_from_slice(p.name.as_bytes());
            out.push(group_code(p.group));
            out.extend_from_slice(&(p.shape.len() as u32).to_le_bytes());
            for &s in &p.shape {
                out.extend_from_slice(&(s as u64).to_le_bytes());
            }
            put(&mut out, &p.data);
            match &p.moments {
                Some((m, v)) => {
                    out.push(1);
                    put(&mut out, m);
                    put(&mut out, v);
                }
                None => out.push(0),
            }
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
            return Err(CheckpointError::Magic);
        }
        if bytes.len() < MAGIC.len() + 4 + DIGEST_LEN {
            return Err(CheckpointError::Checksum);
        }
        let (body, digest) = bytes.split_at(bytes.len() - DIGEST_LEN);
        if Sha256::digest(body).as_slice() != digest {
            return Err(CheckpointError::Checksum);
        }
        let mut r = Reader { buf: body, pos: MAGIC.len() };
        let version = r.u32()?;
        if version != VERSION {
            return Err(CheckpointError::Version {
                found: version,
                expected: VERSION,
            });
        }
        let hlen = r.len()?;
        let header: Header = serde_json::from_slice(r.take(hlen)?).map_err(|e| CheckpointError::Format(format!("header: {e}")))?;
        let n = r.u32()? as usize;
        let mut params = Vec::with_capacity(n.min(1 << 16));
        for _ in 0..n {
            let nlen = r.u32()? as usize;
            let name = String::from_utf8(r.take(nlen)?.to_vec()).map_err(|_| CheckpointError::Format("parameter name is not UTF-8".into()))?;
            let group = *Group::ALL
                .get(r.u8()? as usize)
                .ok_or_else(|| CheckpointError::Format(format!("`{name}`: unknown group code")))?;
            let rank = r.u32()? as usize;
            let shape = (0..rank).map(|_| r.len()).collect::<Result<Vec<_>>>()?;
            let numel = shape.iter().try_fold(1usize, |a, &s| a.checked_mul(s)).ok_or_else(|| CheckpointError::Format("shape overflow".into()))?;
            let data = r.f32s(numel)?;
            let moments = match r.u8()? {
                0 => None,
                1 => Some((r.f32s(numel)?, r.f32s(numel)?)),
                x => return Err(CheckpointError::Format(format!("`{name}`: bad moment flag {x}"))),
            };
            params.push(NamedParam {
                name,
                group,
                shape,
                data,
                moments,
            });
        }
        if r.pos != body.len() {
            return Err(CheckpointError::Format("trailing bytes".into()));
        }
        Ok(Self { header, params })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|source| CheckpointError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|source| CheckpointError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_bytes(&bytes)
    }

    /// Refuses configs whose shapes or schema differ from the checkpoint.
    pub fn check_compatible(&self, config: &RunConfig, schema_hash: &str) -> Result<()> {
        let (a, b) = (&self.header.config.model, &config.model);
        let fields: [(&'static str, usize, usize); 6] = [
            ("d", a.d, b.d),
            ("k_item", a.k_item, b.k_item),
            ("k_user", a.k_user, b.k_user),
            ("layers", a.layers, b.layers),
            ("heads", a.heads, b.heads),
            ("reader_layers", a.reader_layers, b.reader_layers),
        ];
        for (field, c, r) in fields {
            if c != r {
                return Err(CheckpointError::Mismatch {
                    field,
                    checkpoint: c.to_string(),
                    config: r.to_string(),
                });
            }
        }
        if self.header.config.ablation != config.ablation {
            return Err(CheckpointError::Mismatch {
                field: "ablation",
                checkpoint: self.header.config.ablation.label(),
                config: config.ablation.label(),
            });
        }
        if self.header.schema_hash != schema_hash {
            return Err(CheckpointError::Mismatch {
                field: "schema",
                checkpoint: self.header.schema_hash.clone(),
                config: schema_hash.to_string(),
            });
        }
        Ok(())
    }

    /// Overwrites every parameter of `store` by name. Both sides must hold
    /// exactly the same names and shapes.
    pub fn restore<F: Float>(&self, store: &mut ParamStore<F>) -> Result<()> {
        let by_name: std::collections::HashMap<&str, &NamedParam> = self.params.iter().map(|p| (p.name.as_str(), p)).collect();
        let ids: Vec<_> = store.iter().map(|(id, p)| (id, p.name.clone())).collect();
        for (id, name) in &ids {
            let p = by_name.get(name.as_str()).ok_or_else(|| CheckpointError::MissingParam(name.clone()))?;
            let t = store.value_mut(*id);
            if t.shape() != p.shape.as_slice() {
                return Err(CheckpointError::Shape {
                    name: name.clone(),
                    found: p.shape.clone(),
                    expected: t.shape().to_vec(),
                });
            }
            t.data_mut().iter_mut().zip(&p.data).for_each(|(x, &v)| *x = F::of(f64::from(v)));
        }
        if let Some(extra) = self.params.iter().find(|p| store.id(&p.name).is_none()) {
            return Err(CheckpointError::UnexpectedParam(extra.name.clone()));
        }
        Ok(())
    }

    /// Reloads saved moments into an optimizer over the same store.
    pub fn restore_optimizer<F: Float>(&self, store: &ParamStore<F>, opt: &mut AdamW<F>) {
        opt.set_step(self.header.optimizer_step);
        for p in &self.params {
            if let (Some((m, v)), Some(id)) = (&p.moments, store.id(&p.name)) {
                let conv = |xs: &[f32]| Tensor::new(p.shape.clone(), xs.iter().map(|&x| F::of(f64::from(x))).collect()).expect("shape checked on load");
                opt.restore(self.header.optimizer_step, id, conv(m), conv(v));
            }
        }
    }

    /// Digest of all parameter values, for equality checks.
    pub fn parameter_hash(&self) -> String {
        let mut h = Sha256::new();
        for p in &self.params {
            h.update(p.name.as_bytes());
            p.data.iter().for_each(|x| h.update(x.to_le_bytes()));
        }
        hex(&h.finalize())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::TimeSpan;
    use crate::optim::AdamConfig;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::collections::BTreeMap;

    fn header(d: usize) -> Header {
        let mut config = RunConfig::default();
        config.model.d = d;
        Header {
            config,
            n_slots: 3,
            schema_hash: "abc".into(),
            norms: NormStats {
                numbers: BTreeMap::new(),
                times: BTreeMap::new(),
                rating: None,
                interaction_time: TimeSpan { min: 0, max: 10 },
            },
            stage: Some(Stage::Pretrain),
            optimizer_step: 4,
        }
    }

    fn store(seed: u64) -> ParamStore<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut s = ParamStore::new();
        s.add_weight("a.weight", Group::ItemEncoder, 3, 4, &mut rng);
        s.add_weight("b.weight", Group::Reader, 2, 2, &mut rng);
        s.add_zeros("b.bias", Group::Reader, &[2]);
        s
    }

    fn with_moments(s: &mut ParamStore<f32>) -> AdamW<f32> {
        let mut opt = AdamW::new(AdamConfig::default(), s.len(), &[Group::ItemEncoder, Group::Reader]);
        let grads: Vec<_> = s.iter().map(|(id, p)| (id, p.value.map(|x| x + 0.5))).collect();
        opt.step(s, &grads, 0.01).unwrap();
        opt
    }

    #[test]
    fn round_trip_is_bit_identical() {
        let mut s = store(1);
        let opt = with_moments(&mut s);
        let ck = Checkpoint::capture(header(32), &s, Some(&opt));
        let back = Checkpoint::from_bytes(&ck.to_bytes()).unwrap();
        assert_eq!(back, ck);
        let mut fresh = store(2);
        back.restore(&mut fresh).unwrap();
        assert_eq!(fresh.fingerprint(&Group::ALL), s.fingerprint(&Group::ALL));
        for ((_, a), (_, b)) in fresh.iter().zip(s.iter()) {
            assert_eq!(a.value.data(), b.value.data());
        }
        let mut opt2 = AdamW::new(AdamConfig::default(), fresh.len(), &[Group::ItemEncoder, Group::Reader]);
        back.restore_optimizer(&fresh, &mut opt2);
        let id = fresh.id("a.weight").unwrap();
        assert_eq!(opt2.moments(id), opt.moments(id));
    }

    #[test]
    fn truncation_and_corruption_are_checksum_errors() {
        let bytes = Checkpoint::capture(header(32), &store(1), None).to_bytes();
        for cut in [12, bytes.len() / 2, bytes.len() - 1] {
            assert!(matches!(Checkpoint::from_bytes(&bytes[..cut]), Err(CheckpointError::Checksum)));
        }
        let mut flipped = bytes.clone();
        flipped[40] ^= 1;
        assert!(matches!(Checkpoint::from_bytes(&flipped), Err(CheckpointError::Checksum)));
        assert!(matches!(Checkpoint::from_bytes(b"garbage"), Err(CheckpointError::Magic)));
    }

    #[test]
    fn other_versions_are_refused() {
        let mut bytes = Checkpoint::capture(header(32), &store(1), None).to_bytes();
        bytes.truncate(bytes.len() - DIGEST_LEN);
        bytes[8..12].copy_from_slice(&7u32.to_le_bytes());
        let digest = Sha256::digest(&bytes);
        bytes.extend_from_slice(&digest);
        assert!(matches!(Checkpoint::from_bytes(&bytes), Err(CheckpointError::Version { found: 7, .. })));
    }

    #[test]
    fn width_mismatch_names_d() {
        let ck = Checkpoint::capture(header(64), &store(1), None);
        let mut cfg = RunConfig::default();
        cfg.model.d = 32;
        let err = ck.check_compatible(&cfg, "abc").unwrap_err();
        assert!(matches!(err, CheckpointError::Mismatch { field: "d", .. }));
        assert!(err.to_string().contains("`d`"));
        cfg.model.d = 64;
        assert!(ck.check_compatible(&cfg, "abc").is_ok());
        assert!(matches!(ck.check_compatible(&cfg, "xyz"), Err(CheckpointError::Mismatch { field: "schema", .. })));
    }

    #[test]
    fn restore_rejects_missing_extra_and_reshaped_params() {
        let ck = Checkpoint::capture(header(32), &store(1), None);
        let mut bigger = store(1);
        bigger.add_zeros("c", Group::Reader, &[1]);
        assert!(matches!(ck.restore(&mut bigger), Err(CheckpointError::MissingParam(n)) if n == "c"));
        let mut smaller = ParamStore::<f32>::new();
        smaller.add_zeros("b.bias", Group::Reader, &[2]);
        assert!(matches!(ck.restore(&mut smaller), Err(CheckpointError::UnexpectedParam(_))));
        let mut reshaped = ParamStore::<f32>::new();
        reshaped.add_zeros("a.weight", Group::ItemEncoder, &[4, 3]);
        assert!(matches!(ck.restore(&mut reshaped), Err(CheckpointError::Shape { .. })));
    }
}
