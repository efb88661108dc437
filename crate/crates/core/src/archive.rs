//! `X0TA` array files: magic, `u16` version, `u32`-prefixed JSON header,
//! then row-major little-endian `f32` data.

use std::io::{Read, Write};
use std::path::Path;

use ndarray::{ArrayD, IxDyn};
use serde::{Deserialize, Serialize};

use crate::latent::Latent;
use crate::schedule::Timestep;
use crate::{Error, Result};

pub const MAGIC: &[u8; 4] = b"X0TA";
pub const VERSION: u16 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchiveHeader {
    pub shape: Vec<usize>,
    pub dtype: String,
    pub role: String,
    pub timestep: Option<i32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ArrayArchive {
    pub role: String,
    pub timestep: Option<Timestep>,
    pub data: ArrayD<f32>,
}

impl ArrayArchive {
    pub fn new(role: impl Into<String>, timestep: Option<Timestep>, data: ArrayD<f32>) -> Self {
        Self {
            role: role.into(),
            timestep,
            data,
        }
    }

    pub fn from_latent(role: impl Into<String>, x: &Latent) -> Self {
        Self::new(role, x.step, x.data.clone().into_dyn())
    }

    pub fn into_latent(self) -> Result<Latent> {
        let step = self.timestep;
        let data = self
            .data
            .into_dimensionality::<ndarray::Ix3>()
            .map_err(|e| Error::Archive(format!("expected a 3-d array: {e}")))?;
        let x = Latent::new(data);
        Ok(match step {
            Some(t) => x.with_step(t),
            None => x,
        })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = ArchiveHeader {
            shape: self.data.shape().to_vec(),
            dtype: "f32".into(),
            role: self.role.clone(),
            timestep: self.timestep.map(|t| t.0),
        };
        let json = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::with_capacity(10 + json.len() + 4 * self.data.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        for v in self.data.iter() {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = bytes;
        let mut magic = [0u8; 4];
        read_exact(&mut r, &mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Archive("bad magic".into()));
        }
        let mut v = [0u8; 2];
        read_exact(&mut r, &mut v)?;
        let version = u16::from_le_bytes(v);
        if version != VERSION {
            return Err(Error::Archive(format!("unsupported version {version}")));
        }
        let mut n = [0u8; 4];
        read_exact(&mut r, &mut n)?;
        let len = u32::from_le_bytes(n) as usize;
        if r.len() < len {
            return Err(Error::Archive("truncated header".into()));
        }
        let header: ArchiveHeader = serde_json::from_slice(&r[..len])
            .map_err(|e| Error::Archive(format!("bad header: {e}")))?;
        r = &r[len..];
        if header.dtype != "f32" {
            return Err(Error::Archive(format!("unsupported dtype {}", header.dtype)));
        }
        let count: usize = header.shape.iter().product();
        if r.len() != 4 * count {
            return Err(Error::Archive(format!(
                "expected {} data bytes, found {}",
                4 * count,
                r.len()
            )));
        }
        let values = r
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        let data = ArrayD::from_shape_vec(IxDyn(&header.shape), values)
            .map_err(|e| Error::Archive(e.to_string()))?;
        Ok(Self {
            role: header.role,
            timestep: header.timestep.map(Timestep),
            data,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

fn read_exact(r: &mut &[u8], buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf).map_err(|_| Error::Archive("truncated archive".into()))
}

/// Writes a latent as an archive.
pub fn save_latent(path: &Path, role: &str, x: &Latent) -> Result<()> {
    ArrayArchive::from_latent(role, x).save(path)
}

pub fn load_latent(path: &Path) -> Result<Latent> {
    ArrayArchive::load(path)?.into_latent()
}
