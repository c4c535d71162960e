//! Versioned binary container: a length-prefixed JSON header (format
//! version, kind, metadata, tensor directory with name/shape/offset)
//! followed by raw little-endian f32 tensor payloads. Checkpoints and
//! embedding dumps share the format. Round-trips are byte-exact: the header
//! is rebuilt from the same structures with deterministic serialization
//! (struct field order, sorted JSON maps).

use std::io::{Read, Write};
use std::path::Path;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{ParamStore, Tensor};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset into the payload.
    pub offset: u64,
    /// Element count.
    pub len: u64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ContainerHeader {
    pub format_version: u32,
    pub kind: String,
    pub meta: serde_json::Value,
    pub tensors: Vec<TensorEntry>,
}

#[derive(Clone, Debug)]
pub struct Container {
    pub header: ContainerHeader,
    payload: Vec<u8>,
}

impl Container {
    pub fn new(kind: &str, meta: serde_json::Value) -> Self {
        Container {
            header: ContainerHeader {
                format_version: FORMAT_VERSION,
                kind: kind.to_string(),
                meta,
                tensors: Vec::new(),
            },
            payload: Vec::new(),
        }
    }

    pub fn add_tensor(&mut self, name: impl Into<String>, t: &Tensor<f32>) {
        let offset = self.payload.len() as u64;
        for v in t.data() {
            self.payload.extend_from_slice(&v.to_le_bytes());
        }
        self.header.tensors.push(TensorEntry {
            name: name.into(),
            shape: t.shape().to_vec(),
            offset,
            len: t.numel() as u64,
        });
    }

    pub fn tensor(&self, name: &str) -> Result<Tensor<f32>> {
        let e = self
            .header
            .tensors
            .iter()
            .find(|e| e.name == name)
            .ok_or_else(|| Error::Container(format!("missing tensor {name}")))?;
        let start = e.offset as usize;
        let end = start + e.len as usize * 4;
        if end > self.payload.len() {
            return Err(Error::Container(format!("tensor {name} payload out of range")));
        }
        let data: Vec<f32> = self.payload[start..end]
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        Tensor::new(e.shape.clone(), data)
    }

    pub fn tensor_names(&self) -> impl Iterator<Item = &str> {
        self.header.tensors.iter().map(|e| e.name.as_str())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = serde_json::to_vec(&self.header)
            .map_err(|e| Error::Container(format!("header encode: {e}")))?;
        let mut out = Vec::with_capacity(8 + header.len() + self.payload.len());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&self.payload);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 8 {
            return Err(Error::Container("truncated file".into()));
        }
        let hlen = u64::from_le_bytes(bytes[..8].try_into().expect("8 bytes")) as usize;
        if bytes.len() < 8 + hlen {
            return Err(Error::Container("truncated header".into()));
        }
        let header: ContainerHeader = serde_json::from_slice(&bytes[8..8 + hlen])
            .map_err(|e| Error::Container(format!("header decode: {e}")))?;
        if header.format_version != FORMAT_VERSION {
            return Err(Error::Container(format!(
                "unsupported format version {}",
                header.format_version
            )));
        }
        Ok(Container {
            header,
            payload: bytes[8 + hlen..].to_vec(),
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            if !dir.as_os_str().is_empty() {
                std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            }
        }
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&self.to_bytes()?).map_err(|e| Error::io(path, e))?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let mut f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut bytes = Vec::new();
        f.read_to_end(&mut bytes).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

/// ChaCha8 rng state in a serializable form.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq, Eq)]
pub struct RngState {
    pub seed: String,
    pub stream: u64,
    pub word_pos: String,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        let seed = rng.get_seed();
        let mut hex = String::with_capacity(64);
        for b in seed {
            hex.push_str(&format!("{b:02x}"));
        }
        RngState {
            seed: hex,
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos().to_string(),
        }
    }

    pub fn restore(&self) -> Result<ChaCha8Rng> {
        if self.seed.len() != 64 {
            return Err(Error::Container("rng seed must be 32 hex bytes".into()));
        }
        let mut seed = [0u8; 32];
        for (i, chunk) in self.seed.as_bytes().chunks_exact(2).enumerate() {
            let s = std::str::from_utf8(chunk).map_err(|_| Error::Container("rng seed hex".into()))?;
            seed[i] = u8::from_str_radix(s, 16).map_err(|_| Error::Container("rng seed hex".into()))?;
        }
        let mut rng = <ChaCha8Rng as rand::SeedableRng>::from_seed(seed);
        rng.set_stream(self.stream);
        let pos: u128 = self
            .word_pos
            .parse()
            .map_err(|_| Error::Container("rng word_pos".into()))?;
        rng.set_word_pos(pos);
        Ok(rng)
    }
}

pub fn store_params(c: &mut Container, prefix: &str, store: &ParamStore) {
    for p in store.iter() {
        c.add_tensor(format!("{prefix}/{}", p.name), &p.value);
    }
}

pub fn load_params(c: &Container, prefix: &str, into: &mut ParamStore) -> Result<()> {
    for p in into.iter_mut() {
        let t = c.tensor(&format!("{prefix}/{}", p.name))?;
        if t.shape() != p.value.shape() {
            return Err(Error::Container(format!(
                "tensor {prefix}/{} shape {:?} vs expected {:?}",
                p.name,
                t.shape(),
                p.value.shape()
            )));
        }
        p.value = t;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    #[test]
    fn container_round_trip_byte_exact() {
        let mut c = Container::new("embeddings", serde_json::json!({"groups": 3, "views": 2}));
        let t = Tensor::new(vec![2, 3], vec![1.0, -2.5, 3.25, 0.0, f32::MIN_POSITIVE, 1e30]).unwrap();
        c.add_tensor("embeddings", &t);
        let bytes = c.to_bytes().unwrap();
        let c2 = Container::from_bytes(&bytes).unwrap();
        assert_eq!(c2.to_bytes().unwrap(), bytes);
        assert_eq!(c2.tensor("embeddings").unwrap().data(), t.data());
    }

    #[test]
    fn missing_tensor_is_an_error() {
        let c = Container::new("checkpoint", serde_json::Value::Null);
        assert!(c.tensor("nope").is_err());
    }

    #[test]
    fn rng_state_round_trip_continues_stream() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let _: u64 = rng.gen();
        let _: f64 = rng.gen();
        let state = RngState::capture(&rng);
        let mut restored = state.restore().unwrap();
        for _ in 0..16 {
            assert_eq!(rng.gen::<u64>(), restored.gen::<u64>());
        }
    }
}
