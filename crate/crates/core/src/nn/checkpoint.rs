//! Binary checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic    8 bytes   "MNPCKPT\0"
//! version  u32       currently 1
//! hlen     u64       length of the JSON header in bytes
//! header   hlen      UTF-8 JSON: { spec, seed, step, tensors: [{ layer, role, shape }] }
//! payload  f64 * N   every tensor listed in the header, row-major, in header order
//! ```

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::network::{Network, NetworkSpec, ParamSet};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

pub const MAGIC: &[u8; 8] = b"MNPCKPT\0";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
struct TensorEntry {
    layer: String,
    role: String,
    shape: Vec<usize>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Header {
    spec: NetworkSpec,
    seed: u64,
    step: u64,
    tensors: Vec<TensorEntry>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint<T: Scalar = f32> {
    pub network: Network<T>,
    pub seed: u64,
    pub step: u64,
}

impl<T: Scalar> Checkpoint<T> {
    pub fn to_bytes(&self) -> Vec<u8> {
        let spec = self.network.spec();
        let mut tensors = Vec::new();
        for (layer, p) in spec.layers.iter().zip(&self.network.params().layers) {
            if let Some(p) = p {
                for (role, t) in [("weights", &p.weights), ("bias", &p.bias)] {
                    tensors.push(TensorEntry {
                        layer: layer.name.clone(),
                        role: role.to_owned(),
                        shape: t.shape().to_vec(),
                    });
                }
            }
        }
        let header = Header {
            spec: spec.clone(),
            seed: self.seed,
            step: self.step,
            tensors,
        };
        let json = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::with_capacity(20 + json.len() + 8 * self.network.params().count());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for slice in self.network.params().slices() {
            for &v in slice {
                out.extend_from_slice(&v.as_f64().to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = bytes;
        let mut magic = [0u8; 8];
        read_exact(&mut r, &mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Checkpoint("bad magic".into()));
        }
        let mut word = [0u8; 4];
        read_exact(&mut r, &mut word)?;
        let version = u32::from_le_bytes(word);
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let mut len = [0u8; 8];
        read_exact(&mut r, &mut len)?;
        let hlen = u64::from_le_bytes(len) as usize;
        if r.len() < hlen {
            return Err(Error::Checkpoint("truncated header".into()));
        }
        let header: Header = serde_json::from_slice(&r[..hlen])?;
        r = &r[hlen..];

        let mut params = ParamSet::<T> {
            layers: vec![None; header.spec.layers.len()],
        };
        let mut entries = header.tensors.iter();
        for (i, layer) in header.spec.layers.iter().enumerate() {
            if !layer.kind.is_learnable() {
                continue;
            }
            let mut take = |role: &str| -> Result<Tensor<T>> {
                let e = entries
                    .next()
                    .filter(|e| e.layer == layer.name && e.role == role)
                    .ok_or_else(|| Error::Checkpoint(format!("missing {role} for `{}`", layer.name)))?;
                let n: usize = e.shape.iter().product();
                if r.len() < 8 * n {
                    return Err(Error::Checkpoint("truncated payload".into()));
                }
                let data = r[..8 * n]
                    .chunks_exact(8)
                    .map(|c| T::from_f64(f64::from_le_bytes(c.try_into().expect("8 bytes"))))
                    .collect();
                r = &r[8 * n..];
                Tensor::from_vec(&e.shape, data)
            };
            let weights = take("weights")?;
            let bias = take("bias")?;
            params.layers[i] = Some(super::network::LayerParams { weights, bias });
        }
        if !r.is_empty() {
            return Err(Error::Checkpoint(format!("{} trailing bytes", r.len())));
        }
        Ok(Checkpoint {
            network: Network::from_params(header.spec, params)?,
            seed: header.seed,
            step: header.step,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes();
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&bytes).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

fn read_exact(r: &mut &[u8], buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf)
        .map_err(|_| Error::Checkpoint("unexpected end of file".into()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_exact() {
        let net: Network<f32> = Network::new(NetworkSpec::damage_embedding(16, 4), 9).unwrap();
        let ck = Checkpoint {
            network: net,
            seed: 9,
            step: 42,
        };
        let back = Checkpoint::<f32>::from_bytes(&ck.to_bytes()).unwrap();
        assert_eq!(back, ck);
    }

    #[test]
    fn rejects_corruption() {
        let net: Network<f64> = Network::new(NetworkSpec::damage_embedding(8, 2), 1).unwrap();
        let bytes = Checkpoint {
            network: net,
            seed: 1,
            step: 0,
        }
        .to_bytes();
        assert!(Checkpoint::<f64>::from_bytes(&bytes[..bytes.len() - 3]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(Checkpoint::<f64>::from_bytes(&bad).is_err());
        let mut bad = bytes;
        bad[8] = 7;
        assert!(Checkpoint::<f64>::from_bytes(&bad).is_err());
    }
}
