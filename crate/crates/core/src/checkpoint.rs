//! Versioned checkpoint archive.
//!
//! Layout (little endian):
//!
//! ```text
//! "COSER1" | u32 version | u32 len, config text
//! u32 count | per tensor, sorted by name:
//!     u32 len, name | u8 trainable | u8 dtype | u32 rank | u64 dims.. | u64 len, raw data
//! ```

use std::collections::BTreeMap;
use std::path::Path;

use candle_core::{DType, Device, Tensor};

use crate::error::{Error, Result};
use crate::params::ParamStore;

pub const MAGIC: &[u8; 6] = b"COSER1";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct ArchivedTensor {
    pub trainable: bool,
    pub dtype: DType,
    pub dims: Vec<usize>,
    pub data: Vec<u8>,
}

impl ArchivedTensor {
    pub fn from_tensor(t: &Tensor, trainable: bool) -> Result<Self> {
        let dtype = t.dtype();
        let flat = t.flatten_all()?;
        let data = match dtype {
            DType::F32 => flat
                .to_vec1::<f32>()?
                .iter()
                .flat_map(|v| v.to_le_bytes())
                .collect(),
            DType::F64 => flat
                .to_vec1::<f64>()?
                .iter()
                .flat_map(|v| v.to_le_bytes())
                .collect(),
            other => return Err(Error::Archive(format!("unsupported dtype {other:?}"))),
        };
        Ok(Self {
            trainable,
            dtype,
            dims: t.dims().to_vec(),
            data,
        })
    }

    pub fn to_tensor(&self) -> Result<Tensor> {
        let dev = Device::Cpu;
        let t = match self.dtype {
            DType::F32 => {
                let v: Vec<f32> = self
                    .data
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                    .collect();
                Tensor::from_vec(v, self.dims.as_slice(), &dev)?
            }
            _ => {
                let v: Vec<f64> = self
                    .data
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                    .collect();
                Tensor::from_vec(v, self.dims.as_slice(), &dev)?
            }
        };
        Ok(t)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CheckpointArchive {
    pub version: u32,
    pub config: String,
    pub tensors: BTreeMap<String, ArchivedTensor>,
}

fn dtype_tag(d: DType) -> u8 {
    match d {
        DType::F32 => 0,
        _ => 1,
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Archive("truncated archive".into()));
        }
        let out = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec())
            .map_err(|_| Error::Archive("string is not UTF-8".into()))
    }
}

impl CheckpointArchive {
    pub fn new(config: String) -> Self {
        Self {
            version: FORMAT_VERSION,
            config,
            tensors: BTreeMap::new(),
        }
    }

    /// Snapshot every parameter whose name starts with one of `prefixes`.
    pub fn from_store(store: &ParamStore, prefixes: &[&str], config: String) -> Result<Self> {
        let mut archive = Self::new(config);
        for name in store.names() {
            if !prefixes.iter().any(|p| name.starts_with(p)) {
                continue;
            }
            let p = store.get_param(&name).expect("listed name exists");
            archive.tensors.insert(
                name,
                ArchivedTensor::from_tensor(p.var.as_tensor(), p.trainable)?,
            );
        }
        Ok(archive)
    }

    /// Register every archived tensor in `store`, keeping its trainable flag.
    pub fn load_into(&self, store: &ParamStore) -> Result<()> {
        for (name, t) in &self.tensors {
            store.insert(name, &t.to_tensor()?, t.trainable)?;
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&self.version.to_le_bytes());
        out.extend_from_slice(&(self.config.len() as u32).to_le_bytes());
        out.extend_from_slice(self.config.as_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(u8::from(t.trainable));
            out.push(dtype_tag(t.dtype));
            out.extend_from_slice(&(t.dims.len() as u32).to_le_bytes());
            for &d in &t.dims {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            out.extend_from_slice(&(t.data.len() as u64).to_le_bytes());
            out.extend_from_slice(&t.data);
        }
        out
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut r = Reader { buf, pos: 0 };
        if r.take(MAGIC.len()).ok() != Some(MAGIC.as_slice()) {
            return Err(Error::Archive("missing COSER1 header".into()));
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(Error::Archive(format!(
                "archive version {version}, this build reads {FORMAT_VERSION}"
            )));
        }
        let config = r.string()?;
        let count = r.u32()? as usize;
        let mut tensors = BTreeMap::new();
        for _ in 0..count {
            let name = r.string()?;
            let trainable = match r.u8()? {
                0 => false,
                1 => true,
                v => return Err(Error::Archive(format!("bad trainable flag {v}"))),
            };
            let (dtype, width) = match r.u8()? {
                0 => (DType::F32, 4),
                1 => (DType::F64, 8),
                v => return Err(Error::Archive(format!("bad dtype tag {v}"))),
            };
            let rank = r.u32()? as usize;
            let dims = (0..rank)
                .map(|_| r.u64().map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let len = r.u64()? as usize;
            if len != dims.iter().product::<usize>() * width {
                return Err(Error::Archive(format!("tensor {name}: size mismatch")));
            }
            let data = r.take(len)?.to_vec();
            tensors.insert(
                name,
                ArchivedTensor {
                    trainable,
                    dtype,
                    dims,
                    data,
                },
            );
        }
        if r.pos != buf.len() {
            return Err(Error::Archive("trailing bytes after archive".into()));
        }
        Ok(Self {
            version,
            config,
            tensors,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let buf = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&buf)
    }

    /// Names under `prefix` together with their trainable flags.
    pub fn flags(&self, prefix: &str) -> Vec<(&str, bool)> {
        self.tensors
            .iter()
            .filter(|(n, _)| n.starts_with(prefix))
            .map(|(n, t)| (n.as_str(), t.trainable))
            .collect()
    }
}
