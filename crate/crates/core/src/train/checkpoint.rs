//! Binary checkpoint: 8-byte magic, 4-byte little-endian manifest length, JSON
//! manifest, then raw little-endian tensor payloads in manifest order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::nn::{Dtype, Model, ParamGroup, Real, Tensor, TransformerConfig};
use crate::prompts::PromptVocab;

use super::config::RunConfig;
use super::optim::Adam;
use super::TrainError;

pub const MAGIC: &[u8; 8] = b"PLM4JOB1";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainState {
    pub stage0_done: bool,
    /// Completed warmup plus interleaved epochs.
    pub epoch: usize,
    /// Run seed every per-step seed is derived from.
    pub seed: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TensorRole {
    Param,
    AdamM,
    AdamV,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub role: TensorRole,
    pub shape: Vec<usize>,
    pub dtype: Dtype,
    pub group: ParamGroup,
    pub frozen: bool,
    /// Adam step count of this tensor (optimizer roles only).
    #[serde(default)]
    pub steps: u64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub config_hash: String,
    pub config: RunConfig,
    pub model: TransformerConfig,
    pub vocab: PromptVocab,
    pub state: TrainState,
    pub adam: Option<super::optim::AdamConfig>,
    pub tensors: Vec<TensorEntry>,
}

#[derive(Clone, Debug)]
pub struct Checkpoint<T: Real> {
    pub model: Model<T>,
    pub vocab: PromptVocab,
    pub config: RunConfig,
    pub state: TrainState,
    pub optimizer: Option<Adam<T>>,
}

impl<T: Real> Checkpoint<T> {
    pub fn to_bytes(&self) -> Result<Vec<u8>, TrainError> {
        let mut entries = Vec::new();
        let mut payload = Vec::new();
        let mut push = |name: &str, role, p: &crate::nn::Param<T>, t: &Tensor<T>, steps| {
            entries.push(TensorEntry {
                name: name.to_string(),
                role,
                shape: t.shape().to_vec(),
                dtype: T::DTYPE,
                group: p.group,
                frozen: p.frozen,
                steps,
            });
            for &x in t.data() {
                x.write_le(&mut payload);
            }
        };
        for (_, p) in self.model.store.iter() {
            push(&p.name, TensorRole::Param, p, &p.value, 0);
        }
        if let Some(opt) = &self.optimizer {
            for (id, p) in self.model.store.iter() {
                if let (Some(m), Some(v)) = (&opt.m[id.0], &opt.v[id.0]) {
                    push(&p.name, TensorRole::AdamM, p, m, opt.steps[id.0]);
                    push(&p.name, TensorRole::AdamV, p, v, opt.steps[id.0]);
                }
            }
        }
        let manifest = Manifest {
            version: FORMAT_VERSION,
            config_hash: self.config.hash(),
            config: self.config.clone(),
            model: self.model.config.clone(),
            vocab: self.vocab.clone(),
            state: self.state.clone(),
            adam: self.optimizer.as_ref().map(|o| o.config),
            tensors: entries,
        };
        let header = serde_json::to_vec(&manifest)?;
        let mut out = Vec::with_capacity(12 + header.len() + payload.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&payload);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, TrainError> {
        if bytes.len() < 12 || &bytes[..8] != MAGIC {
            return Err(TrainError::Checkpoint("missing checkpoint magic".into()));
        }
        let hlen = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
        if bytes.len() < 12 + hlen {
            return Err(TrainError::Truncated {
                expected: 12 + hlen,
                actual: bytes.len(),
            });
        }
        let value: serde_json::Value = serde_json::from_slice(&bytes[12..12 + hlen])?;
        let version = value.get("version").and_then(|v| v.as_u64()).unwrap_or(0) as u32;
        if version != FORMAT_VERSION {
            return Err(TrainError::Version(version));
        }
        let manifest: Manifest = serde_json::from_value(value)?;
        if manifest.config.hash() != manifest.config_hash {
            return Err(TrainError::Checkpoint("config hash does not match the stored config".into()));
        }
        let expected = 12
            + hlen
            + manifest
                .tensors
                .iter()
                .map(|e| e.shape.iter().product::<usize>() * e.dtype.size())
                .sum::<usize>();
        if bytes.len() != expected {
            return Err(TrainError::Truncated {
                expected,
                actual: bytes.len(),
            });
        }
        let mut model = Model::<T>::new(manifest.model.clone(), 0)?;
        let mut optimizer = manifest.adam.map(|c| Adam::new(c, &model.store));
        let mut offset = 12 + hlen;
        for e in &manifest.tensors {
            if e.dtype != T::DTYPE {
                return Err(TrainError::Checkpoint(format!(
                    "tensor {} is {:?}, expected {:?}",
                    e.name,
                    e.dtype,
                    T::DTYPE
                )));
            }
            let id = model
                .store
                .find(&e.name)
                .ok_or_else(|| TrainError::Checkpoint(format!("unknown tensor {}", e.name)))?;
            let want = model.store.value(id).shape().to_vec();
            if want != e.shape {
                return Err(TrainError::Checkpoint(format!(
                    "tensor {} has shape {:?}, model expects {:?}",
                    e.name, e.shape, want
                )));
            }
            let n: usize = e.shape.iter().product();
            let size = e.dtype.size();
            let data: Vec<T> = bytes[offset..offset + n * size]
                .chunks_exact(size)
                .map(T::read_le)
                .collect();
            offset += n * size;
            let t = Tensor::from_vec(&e.shape, data)?;
            match e.role {
                TensorRole::Param => {
                    let p = model.store.get_mut(id);
                    p.value = t;
                    p.frozen = e.frozen;
                }
                TensorRole::AdamM | TensorRole::AdamV => {
                    let opt = optimizer
                        .as_mut()
                        .ok_or_else(|| TrainError::Checkpoint("optimizer moments without a config".into()))?;
                    opt.steps[id.0] = e.steps;
                    if e.role == TensorRole::AdamM {
                        opt.m[id.0] = Some(t);
                    } else {
                        opt.v[id.0] = Some(t);
                    }
                }
            }
        }
        Ok(Checkpoint {
            model,
            vocab: manifest.vocab,
            config: manifest.config,
            state: manifest.state,
            optimizer,
        })
    }
}

pub fn save_checkpoint<T: Real>(ck: &Checkpoint<T>, path: &Path) -> Result<(), TrainError> {
    fs::write(path, ck.to_bytes()?)?;
    Ok(())
}

pub fn load_checkpoint<T: Real>(path: &Path) -> Result<Checkpoint<T>, TrainError> {
    Checkpoint::from_bytes(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hetgraph::GraphBuilder;
    use crate::nn::TransformerConfig;

    fn sample() -> Checkpoint<f32> {
        let g = GraphBuilder::new(3, 2).build().unwrap();
        let vocab = PromptVocab::new(&g, &[], &[]);
        let mut cfg = TransformerConfig::tiny(vocab.layout.text_size, 3, 2);
        cfg.node_tasks.clear();
        let model = Model::new(cfg, 7).unwrap();
        let mut opt = Adam::new(Default::default(), &model.store);
        opt.m[0] = Some(Tensor::filled(model.store.value(crate::nn::ParamId(0)).shape(), 0.5));
        opt.v[0] = opt.m[0].clone();
        opt.steps[0] = 3;
        Checkpoint {
            model,
            vocab,
            config: RunConfig::default(),
            state: TrainState {
                stage0_done: true,
                epoch: 4,
                seed: 9,
            },
            optimizer: Some(opt),
        }
    }

    #[test]
    fn round_trip_is_bit_identical() {
        let ck = sample();
        let bytes = ck.to_bytes().unwrap();
        let back = Checkpoint::<f32>::from_bytes(&bytes).unwrap();
        for ((_, a), (_, b)) in ck.model.store.iter().zip(back.model.store.iter()) {
            assert_eq!(a.name, b.name);
            assert_eq!(a.frozen, b.frozen);
            let (x, y): (Vec<u32>, Vec<u32>) = (
                a.value.data().iter().map(|v| v.to_bits()).collect(),
                b.value.data().iter().map(|v| v.to_bits()).collect(),
            );
            assert_eq!(x, y);
        }
        assert_eq!(back.state, ck.state);
        assert_eq!(back.optimizer.as_ref().unwrap().steps[0], 3);
        assert_eq!(back.to_bytes().unwrap(), bytes);
    }

    #[test]
    fn truncation_and_version_are_refused() {
        let bytes = sample().to_bytes().unwrap();
        let cut = &bytes[..bytes.len() - 3];
        assert!(matches!(Checkpoint::<f32>::from_bytes(cut), Err(TrainError::Truncated { .. })));

        let hlen = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let header = std::str::from_utf8(&bytes[12..12 + hlen]).unwrap();
        let bumped = header.replacen("\"version\":1", "\"version\":7", 1);
        let mut forged = bytes[..8].to_vec();
        forged.extend_from_slice(&(bumped.len() as u32).to_le_bytes());
        forged.extend_from_slice(bumped.as_bytes());
        forged.extend_from_slice(&bytes[12 + hlen..]);
        assert!(matches!(Checkpoint::<f32>::from_bytes(&forged), Err(TrainError::Version(7))));
        assert!(Checkpoint::<f32>::from_bytes(b"nonsense").is_err());
        assert!(Checkpoint::<f64>::from_bytes(&bytes).is_err());
    }
}
