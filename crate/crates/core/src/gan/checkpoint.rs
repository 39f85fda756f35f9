//! Single-file checkpoint: magic, JSON header, little-endian `f64` blob.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::arch::{Discriminator, DiscriminatorSpec, Generator, GeneratorSpec};
use super::train::{GanModel, GanTrainConfig};
use crate::dataset::Label;
use crate::error::{Error, Result};
use crate::imaging;
use crate::nn::{ParamStore, Tensor};

const MAGIC: &[u8; 8] = b"CGCKPT01";

/// Everything needed to continue the seeded schedule. All randomness is
/// drawn from streams keyed by `seed` and the step counters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    pub seed: u64,
    pub epochs_done: usize,
    pub global_step: u64,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub model: GanModel,
    pub disease: Label,
    pub config: GanTrainConfig,
    pub state: TrainState,
    /// Healthy to disease.
    pub generator: Generator,
    /// Disease to healthy, CycleGAN only.
    pub inverse: Option<Generator>,
    pub discriminators: Vec<Discriminator>,
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "net", content = "spec", rename_all = "snake_case")]
enum NetSpec {
    Generator(GeneratorSpec),
    Discriminator(DiscriminatorSpec),
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct NetEntry {
    role: String,
    spec: NetSpec,
    tensors: Vec<TensorEntry>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    model: GanModel,
    disease: Label,
    config: GanTrainConfig,
    state: TrainState,
    networks: Vec<NetEntry>,
}

fn entry(role: &str, spec: NetSpec, store: &ParamStore) -> NetEntry {
    NetEntry {
        role: role.into(),
        spec,
        tensors: store
            .names()
            .iter()
            .zip(store.values())
            .map(|(n, t)| TensorEntry {
                name: n.clone(),
                shape: t.shape().to_vec(),
            })
            .collect(),
    }
}

impl Checkpoint {
    fn stores(&self) -> Vec<(&str, NetSpec, &ParamStore)> {
        let mut v = vec![("G", NetSpec::Generator(self.generator.spec.clone()), &self.generator.store)];
        if let Some(f) = &self.inverse {
            v.push(("F", NetSpec::Generator(f.spec.clone()), &f.store));
        }
        for (i, d) in self.discriminators.iter().enumerate() {
            v.push((["D0", "D1"].get(i).copied().unwrap_or("D"), NetSpec::Discriminator(d.spec.clone()), &d.store));
        }
        v
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let stores = self.stores();
        let mut blob = Vec::new();
        let mut networks = Vec::new();
        for (role, spec, store) in stores {
            for t in store.values() {
                for v in t.data() {
                    blob.extend_from_slice(&v.to_le_bytes());
                }
            }
            networks.push(entry(role, spec, store));
        }
        let header = Header {
            model: self.model,
            disease: self.disease,
            config: self.config.clone(),
            state: self.state.clone(),
            networks,
        };
        let json = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(16 + json.len() + blob.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&blob);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(Error::invalid("not a checkpoint file (bad magic)"));
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let body = &bytes[16..];
        if body.len() < hlen {
            return Err(Error::invalid("checkpoint header is truncated"));
        }
        let header: Header = serde_json::from_slice(&body[..hlen])?;
        let mut blob = &body[hlen..];
        let mut generators = Vec::new();
        let mut discriminators = Vec::new();
        for net in header.networks {
            let mut names = Vec::new();
            let mut values = Vec::new();
            for t in net.tensors {
                let n: usize = t.shape.iter().product();
                if blob.len() < n * 8 {
                    return Err(Error::invalid(format!("checkpoint data for `{}` is truncated", t.name)));
                }
                let data = blob[..n * 8]
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                    .collect();
                blob = &blob[n * 8..];
                names.push(t.name);
                values.push(Tensor::from_vec(&t.shape, data)?);
            }
            match net.spec {
                NetSpec::Generator(s) => generators.push(Generator::from_parts(s, &names, values)?),
                NetSpec::Discriminator(s) => discriminators.push(Discriminator::from_parts(s, &names, values)?),
            }
        }
        if !blob.is_empty() {
            return Err(Error::invalid("checkpoint has trailing data"));
        }
        let mut generators = generators.into_iter();
        let generator = generators
            .next()
            .ok_or_else(|| Error::invalid("checkpoint holds no generator"))?;
        Ok(Checkpoint {
            model: header.model,
            disease: header.disease,
            config: header.config,
            state: header.state,
            generator,
            inverse: generators.next(),
            discriminators,
        })
    }

    /// Atomic write.
    pub fn save(&self, path: &Path) -> Result<()> {
        imaging::write_atomic(path, &self.to_bytes()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path).map_err(|e| Error::io(path, e))?)
    }
}
