//! Checkpoint file format (all integers little-endian):
//!
//! ```text
//! magic      8 bytes  "XNETCKPT"
//! version    u32      1
//! meta_len   u32      length of the JSON metadata that follows
//! meta       bytes    UTF-8 JSON (model config and free-form run info)
//! count      u32      number of tensors
//! per tensor:
//!   name_len u32, name (UTF-8)
//!   dtype    u8       0 = f32
//!   ndim     u32, dims u32 * ndim
//!   data     f32 * product(dims)
//! ```

use std::io::{Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use crate::error::{Error, Result};
use crate::net::model::{ModelConfig, XNetModel};
use crate::net::Tensor;

pub const MAGIC: &[u8; 8] = b"XNETCKPT";
pub const VERSION: u32 = 1;
const DTYPE_F32: u8 = 0;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub meta: serde_json::Value,
    pub tensors: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn from_model(model: &XNetModel, extra: serde_json::Value) -> Result<Self> {
        let meta = serde_json::json!({ "model": model.config(), "run": extra });
        let tensors = model.params().iter().map(|p| (p.name.clone(), p.value.clone())).collect();
        Ok(Self { meta, tensors })
    }

    /// Rebuilds the model described by the metadata and loads the weights.
    pub fn into_model(self) -> Result<XNetModel> {
        let cfg: ModelConfig = serde_json::from_value(
            self.meta.get("model").cloned().ok_or_else(|| Error::Checkpoint("metadata lacks `model`".into()))?,
        )?;
        let mut model = XNetModel::new(cfg, 0)?;
        model.load_params(self.tensors)?;
        Ok(model)
    }

    pub fn write_to(&self, mut w: impl Write) -> Result<()> {
        w.write_all(MAGIC)?;
        w.write_u32::<LittleEndian>(VERSION)?;
        let meta = serde_json::to_vec(&self.meta)?;
        w.write_u32::<LittleEndian>(meta.len() as u32)?;
        w.write_all(&meta)?;
        w.write_u32::<LittleEndian>(self.tensors.len() as u32)?;
        for (name, t) in &self.tensors {
            w.write_u32::<LittleEndian>(name.len() as u32)?;
            w.write_all(name.as_bytes())?;
            w.write_u8(DTYPE_F32)?;
            w.write_u32::<LittleEndian>(4)?;
            for d in t.shape() {
                w.write_u32::<LittleEndian>(d as u32)?;
            }
            for &v in t.data() {
                w.write_f32::<LittleEndian>(v as f32)?;
            }
        }
        Ok(())
    }

    pub fn read_from(mut r: impl Read) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Checkpoint("bad magic, not an xnet checkpoint".into()));
        }
        let version = r.read_u32::<LittleEndian>()?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported checkpoint version {version}")));
        }
        let meta_len = r.read_u32::<LittleEndian>()? as usize;
        let mut meta = vec![0u8; meta_len];
        r.read_exact(&mut meta)?;
        let meta = serde_json::from_slice(&meta)?;
        let count = r.read_u32::<LittleEndian>()?;
        let mut tensors = Vec::with_capacity(count as usize);
        for _ in 0..count {
            let len = r.read_u32::<LittleEndian>()? as usize;
            let mut name = vec![0u8; len];
            r.read_exact(&mut name)?;
            let name = String::from_utf8(name).map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?;
            let dtype = r.read_u8()?;
            if dtype != DTYPE_F32 {
                return Err(Error::Checkpoint(format!("tensor `{name}` has unsupported dtype {dtype}")));
            }
            let ndim = r.read_u32::<LittleEndian>()? as usize;
            if ndim == 0 || ndim > 4 {
                return Err(Error::Checkpoint(format!("tensor `{name}` has rank {ndim}")));
            }
            let mut shape = [1usize; 4];
            for d in shape.iter_mut().skip(4 - ndim) {
                *d = r.read_u32::<LittleEndian>()? as usize;
            }
            let n: usize = shape.iter().product();
            let mut data = Vec::with_capacity(n);
            for _ in 0..n {
                data.push(r.read_f32::<LittleEndian>()? as f64);
            }
            tensors.push((name, Tensor::from_vec(shape, data)?));
        }
        Ok(Self { meta, tensors })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let f = std::fs::File::create(path)?;
        self.write_to(std::io::BufWriter::new(f))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let f = std::fs::File::open(path)?;
        Self::read_from(std::io::BufReader::new(f))
    }
}
