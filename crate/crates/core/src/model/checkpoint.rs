//! Versioned binary checkpoint container.
//!
//! Layout (little-endian): magic, `u32` version, `u64` config hash, `u64`
//! epoch, `u64` best-loss bits, `u64` optimizer step, a length-prefixed JSON
//! meta block, then named sections of named tensors. Every value is stored
//! as raw `f64` bits, so a round trip is exact.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::{ModelConfig, SystemKind};
use super::network::{build_model, Model};
use super::optim::Adam;
use super::ModelError;
use crate::autodiff::Tensor;

pub const MAGIC: &[u8; 8] = b"AFBNNCKP";
pub const VERSION: u32 = 1;

const DETERMINISTIC: &str = "deterministic";
const BAYES: &str = "bayes";
const ADAM_M: &str = "adam_m";
const ADAM_V: &str = "adam_v";
const TUNING: &str = "tuning";

/// Full training state: weights, optimizer moments and progress.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: Model,
    pub adam: Adam,
    /// Completed epochs.
    pub epoch: usize,
    /// Lowest epoch-mean training loss so far.
    pub best_loss: f64,
}

#[derive(Serialize, Deserialize)]
struct Meta {
    kind: SystemKind,
    config: ModelConfig,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Header {
    pub version: u32,
    pub config_hash: u64,
}

type Section = Vec<(String, Tensor)>;

impl Checkpoint {
    pub fn config_hash(&self) -> u64 {
        self.model.config.hash()
    }

    /// Named sections present in the encoding.
    pub fn section_names(&self) -> Vec<&'static str> {
        self.sections().into_iter().map(|(n, _)| n).collect()
    }

    fn sections(&self) -> Vec<(&'static str, Section)> {
        let store = &self.model.store;
        let named = |pick_bayes: bool| -> Section {
            store
                .iter()
                .filter(|(n, _)| self.model.is_bayes_param(n) == pick_bayes)
                .map(|(n, t)| (n.to_string(), t.clone()))
                .collect()
        };
        let moments = |ts: &[Tensor]| -> Section {
            store
                .iter()
                .zip(ts)
                .map(|((n, _), t)| (n.to_string(), t.clone()))
                .collect()
        };
        let mut out = vec![(DETERMINISTIC, named(false))];
        if self.model.kind.is_bayesian() {
            out.push((BAYES, named(true)));
        }
        out.push((ADAM_M, moments(&self.adam.m)));
        out.push((ADAM_V, moments(&self.adam.v)));
        if let Some(beta) = self.model.tuning_beta {
            out.push((TUNING, vec![("beta".to_string(), Tensor::scalar(beta))]));
        }
        out
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Vec::new();
        w.extend_from_slice(MAGIC);
        w.extend_from_slice(&VERSION.to_le_bytes());
        w.extend_from_slice(&self.config_hash().to_le_bytes());
        w.extend_from_slice(&(self.epoch as u64).to_le_bytes());
        w.extend_from_slice(&self.best_loss.to_bits().to_le_bytes());
        w.extend_from_slice(&self.adam.t.to_le_bytes());
        let meta = serde_json::to_vec(&Meta {
            kind: self.model.kind,
            config: self.model.config.clone(),
        })
        .expect("meta serializes");
        put_bytes(&mut w, &meta);
        let sections = self.sections();
        w.extend_from_slice(&(sections.len() as u32).to_le_bytes());
        for (name, tensors) in sections {
            put_bytes(&mut w, name.as_bytes());
            w.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
            for (tname, t) in tensors {
                put_bytes(&mut w, tname.as_bytes());
                w.extend_from_slice(&(t.ndim() as u32).to_le_bytes());
                for &d in t.shape() {
                    w.extend_from_slice(&(d as u64).to_le_bytes());
                }
                for v in t.data() {
                    w.extend_from_slice(&v.to_bits().to_le_bytes());
                }
            }
        }
        w
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, ModelError> {
        let mut r = Reader { bytes, pos: 0 };
        let header = read_header(&mut r)?;
        let epoch = r.u64()? as usize;
        let best_loss = f64::from_bits(r.u64()?);
        let t = r.u64()?;
        let meta: Meta = serde_json::from_slice(r.bytes()?).map_err(|e| corrupt(format!("meta block: {e}")))?;
        let mut model = build_model(&meta.config, meta.kind)?;
        if model.config.hash() != header.config_hash {
            return Err(corrupt("header hash does not match the stored configuration".into()));
        }

        let n_sections = r.u32()?;
        let mut sections: Vec<(String, Section)> = Vec::new();
        for _ in 0..n_sections {
            let name = r.string()?;
            let count = r.u32()?;
            let mut tensors = Vec::with_capacity(count as usize);
            for _ in 0..count {
                let tname = r.string()?;
                let ndim = r.u32()? as usize;
                let shape = (0..ndim).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>, _>>()?;
                let len: usize = shape.iter().product();
                let data = (0..len).map(|_| r.u64().map(f64::from_bits)).collect::<Result<Vec<_>, _>>()?;
                let tensor = Tensor::new(shape, data).map_err(|e| corrupt(format!("tensor {tname}: {e}")))?;
                tensors.push((tname, tensor));
            }
            sections.push((name, tensors));
        }
        if r.pos != bytes.len() {
            return Err(corrupt("trailing bytes after the last section".into()));
        }
        let take = |name: &str| sections.iter().find(|(n, _)| n == name).map(|(_, s)| s.clone());

        let mut weights = take(DETERMINISTIC).ok_or_else(|| corrupt("missing deterministic section".into()))?;
        match (meta.kind.is_bayesian(), take(BAYES)) {
            (true, Some(b)) => weights.extend(b),
            (true, None) => return Err(corrupt("missing bayes section".into())),
            (false, Some(_)) => return Err(corrupt("unexpected bayes section".into())),
            (false, None) => {}
        }
        if weights.len() != model.store.len() {
            return Err(corrupt(format!(
                "expected {} parameter tensors, found {}",
                model.store.len(),
                weights.len()
            )));
        }
        for (name, tensor) in weights {
            let id = model
                .store
                .find(&name)
                .ok_or_else(|| corrupt(format!("unknown parameter {name}")))?;
            if model.store.get(id).shape() != tensor.shape() {
                return Err(corrupt(format!("parameter {name} has shape {:?}", tensor.shape())));
            }
            *model.store.get_mut(id) = tensor;
        }

        let moments = |name: &str| -> Result<Vec<Tensor>, ModelError> {
            let section = take(name).ok_or_else(|| corrupt(format!("missing {name} section")))?;
            if section.len() != model.store.len() {
                return Err(corrupt(format!("{name} has {} tensors", section.len())));
            }
            section
                .into_iter()
                .zip(model.store.iter())
                .map(|((n, t), (pn, pt))| {
                    if n != pn || t.shape() != pt.shape() {
                        Err(corrupt(format!("{name} entry {n} does not match parameter {pn}")))
                    } else {
                        Ok(t)
                    }
                })
                .collect()
        };
        let adam = Adam {
            learning_rate: model.config.learning_rate,
            t,
            m: moments(ADAM_M)?,
            v: moments(ADAM_V)?,
        };
        model.tuning_beta = take(TUNING)
            .and_then(|s| s.into_iter().find(|(n, _)| n == "beta"))
            .and_then(|(_, t)| t.item());
        Ok(Checkpoint {
            model,
            adam,
            epoch,
            best_loss,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), ModelError> {
        fs::write(path, self.to_bytes()).map_err(|e| ModelError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self, ModelError> {
        let bytes = fs::read(path).map_err(|e| ModelError::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

/// Reads only the fixed header of an encoded checkpoint.
pub fn peek_header(bytes: &[u8]) -> Result<Header, ModelError> {
    read_header(&mut Reader { bytes, pos: 0 })
}

fn read_header(r: &mut Reader<'_>) -> Result<Header, ModelError> {
    if r.take(MAGIC.len())? != MAGIC {
        return Err(ModelError::Checkpoint("not a checkpoint file (bad magic)".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(ModelError::Checkpoint(format!("unsupported checkpoint version {version}")));
    }
    Ok(Header {
        version,
        config_hash: r.u64()?,
    })
}

fn corrupt(detail: String) -> ModelError {
    ModelError::Checkpoint(detail)
}

fn put_bytes(w: &mut Vec<u8>, b: &[u8]) {
    w.extend_from_slice(&(b.len() as u32).to_le_bytes());
    w.extend_from_slice(b);
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], ModelError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| corrupt(format!("truncated at byte {}", self.pos)))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32, ModelError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64, ModelError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn bytes(&mut self) -> Result<&'a [u8], ModelError> {
        let n = self.u32()? as usize;
        self.take(n)
    }

    fn string(&mut self) -> Result<String, ModelError> {
        String::from_utf8(self.bytes()?.to_vec()).map_err(|_| corrupt("invalid UTF-8 name".into()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::config::ConvSpec;

    fn small(kind: SystemKind) -> Checkpoint {
        let config = ModelConfig {
            conv: vec![
                ConvSpec { kernel: 3, channels: 2, pool: 10 },
                ConvSpec { kernel: 3, channels: 2, pool: 8 },
                ConvSpec { kernel: 3, channels: 2, pool: 8 },
            ],
            lstm_hidden: 3,
            head_hidden: vec![2],
            ..ModelConfig::default()
        };
        let model = build_model(&config, kind).unwrap();
        let mut adam = Adam::new(&model.store, model.config.learning_rate);
        adam.t = 17;
        adam.m[0].data_mut()[0] = 0.1 + 0.2;
        Checkpoint {
            model,
            adam,
            epoch: 4,
            best_loss: 0.123_456_789_012_345_6,
        }
    }

    #[test]
    fn round_trip_is_exact() {
        for kind in SystemKind::ALL {
            let mut ck = small(kind);
            if kind == SystemKind::MtlPu {
                ck.model.tuning_beta = Some(-0.3);
            }
            let back = Checkpoint::from_bytes(&ck.to_bytes()).unwrap();
            assert_eq!(back, ck);
        }
    }

    #[test]
    fn baselines_have_no_bayes_section() {
        assert!(!small(SystemKind::Stl).section_names().contains(&"bayes"));
        assert!(small(SystemKind::Lu).section_names().contains(&"bayes"));
    }

    #[test]
    fn header_and_corruption() {
        let ck = small(SystemKind::Mu);
        let bytes = ck.to_bytes();
        assert_eq!(peek_header(&bytes).unwrap().config_hash, ck.config_hash());
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(Checkpoint::from_bytes(&bad), Err(ModelError::Checkpoint(m)) if m.contains("magic")));
        let mut future = bytes;
        future[8] = 9;
        assert!(Checkpoint::from_bytes(&future).is_err());
    }
}
