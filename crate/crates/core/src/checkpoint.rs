//! Single-file model checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic        8 bytes  "CPGM0001"
//! kind         u8       0 cpgm_vae, 1 cpgm_aae, 2 variant1, 3 variant2, 4 cnn
//! config       u32 length + UTF-8 JSON (every default materialized)
//! parameters   u32 count, then per parameter in name order:
//!                u32 name length + name, u32 rank, rank × u32 dims,
//!                prod(dims) × f64 values
//! bn stats     u32 count, then per layer in name order:
//!                u32 name length + name, u32 channels,
//!                channels × f64 running mean, channels × f64 running var
//! ```
//!
//! Loading rebuilds the architecture from the config and requires every
//! parameter and statistic to match it by name and shape.

use std::io::{Cursor, Read};
use std::path::Path;

use byteorder::{LittleEndian as LE, ReadBytesExt, WriteBytesExt};

use crate::aae::{AaeConfig, AaeVariant, CpgmAae};
use crate::autodiff::ParameterSet;
use crate::cnn::Cnn;
use crate::error::{Error, Result};
use crate::model::{ModelKind, OpenSetModel};
use crate::nn::RunningStats;
use crate::vae::{CpgmVae, VaeConfig};

pub const MAGIC: &[u8; 8] = b"CPGM0001";

/// Any trained model, as stored in a checkpoint.
pub enum AnyModel {
    Vae(CpgmVae),
    Aae(CpgmAae),
    Cnn(Cnn),
}

impl AnyModel {
    pub fn as_model(&self) -> &dyn OpenSetModel {
        match self {
            AnyModel::Vae(m) => m,
            AnyModel::Aae(m) => m,
            AnyModel::Cnn(m) => m,
        }
    }

    pub fn kind(&self) -> ModelKind {
        self.as_model().kind()
    }

    fn parts(&self) -> (&ParameterSet, &RunningStats) {
        match self {
            AnyModel::Vae(m) => (&m.params, &m.running),
            AnyModel::Aae(m) => (&m.params, &m.running),
            AnyModel::Cnn(m) => (&m.params, &m.running),
        }
    }

    fn parts_mut(&mut self) -> (&mut ParameterSet, &mut RunningStats) {
        match self {
            AnyModel::Vae(m) => (&mut m.params, &mut m.running),
            AnyModel::Aae(m) => (&mut m.params, &mut m.running),
            AnyModel::Cnn(m) => (&mut m.params, &mut m.running),
        }
    }

    fn config_json(&self) -> Result<String> {
        Ok(match self {
            AnyModel::Vae(m) => serde_json::to_string(&m.config)?,
            AnyModel::Aae(m) => serde_json::to_string(&m.config)?,
            AnyModel::Cnn(m) => serde_json::to_string(&m.config)?,
        })
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.write_u8(kind_tag(self.kind()))?;
        write_str(&mut out, &self.config_json()?)?;
        let (params, running) = self.parts();
        out.write_u32::<LE>(params.len() as u32)?;
        for (name, t) in params.iter() {
            write_str(&mut out, name)?;
            out.write_u32::<LE>(t.shape().len() as u32)?;
            for &d in t.shape() {
                out.write_u32::<LE>(d as u32)?;
            }
            for &v in t.data() {
                out.write_f64::<LE>(v)?;
            }
        }
        out.write_u32::<LE>(running.len() as u32)?;
        for (name, mean, var) in running.iter() {
            write_str(&mut out, name)?;
            out.write_u32::<LE>(mean.len() as u32)?;
            for &v in mean.iter().chain(var) {
                out.write_f64::<LE>(v)?;
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<AnyModel> {
        let mut r = Cursor::new(bytes);
        let mut magic = [0u8; 8];
        read_exact(&mut r, &mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Format { offset: 0, message: "not a CPGM0001 checkpoint".into() });
        }
        let tag_at = r.position();
        let kind = tag_kind(r.read_u8().map_err(|_| truncated(&r))?)
            .ok_or_else(|| Error::Format { offset: tag_at, message: "unknown model-kind tag".into() })?;
        let config = read_str(&mut r)?;
        let mut model = match kind {
            ModelKind::CpgmVae => AnyModel::Vae(CpgmVae::new(serde_json::from_str::<VaeConfig>(&config)?)?),
            ModelKind::Cnn => AnyModel::Cnn(Cnn::new(serde_json::from_str::<VaeConfig>(&config)?)?),
            k => {
                let c: AaeConfig = serde_json::from_str(&config)?;
                if aae_kind(c.variant) != k {
                    return Err(Error::Format { offset: tag_at, message: format!("tag {} disagrees with config variant", k.name()) });
                }
                AnyModel::Aae(CpgmAae::new(c)?)
            }
        };
        let (params, running) = model.parts_mut();
        let n = read_u32(&mut r)? as usize;
        if n != params.len() {
            return Err(Error::Format { offset: r.position(), message: format!("{n} parameters stored, architecture has {}", params.len()) });
        }
        for _ in 0..n {
            let at = r.position();
            let name = read_str(&mut r)?;
            let rank = read_u32(&mut r)? as usize;
            let shape = (0..rank).map(|_| read_u32(&mut r).map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let slot = params.get_mut(&name).map_err(|_| Error::Format { offset: at, message: format!("unexpected parameter {name}") })?;
            if slot.shape() != shape.as_slice() {
                return Err(Error::Format { offset: at, message: format!("{name}: stored shape {shape:?}, expected {:?}", slot.shape()) });
            }
            let vals = read_f64s(&mut r, slot.numel())?;
            slot.data_mut().copy_from_slice(&vals);
        }
        let n = read_u32(&mut r)? as usize;
        if n != running.len() {
            return Err(Error::Format { offset: r.position(), message: format!("{n} batch-norm layers stored, architecture has {}", running.len()) });
        }
        for _ in 0..n {
            let at = r.position();
            let name = read_str(&mut r)?;
            let c = read_u32(&mut r)? as usize;
            match running.get(&name) {
                Some((m, _)) if m.len() == c => {}
                _ => return Err(Error::Format { offset: at, message: format!("unexpected batch-norm statistics {name}") }),
            }
            let mean = read_f64s(&mut r, c)?;
            let var = read_f64s(&mut r, c)?;
            running.insert(name, mean, var);
        }
        if (r.position() as usize) != bytes.len() {
            return Err(Error::Format { offset: r.position(), message: "trailing bytes".into() });
        }
        Ok(model)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<AnyModel> {
        AnyModel::from_bytes(&std::fs::read(path)?)
    }
}

pub fn aae_kind(v: AaeVariant) -> ModelKind {
    match v {
        AaeVariant::Cpgm => ModelKind::CpgmAae,
        AaeVariant::Variant1 => ModelKind::Variant1,
        AaeVariant::Variant2 => ModelKind::Variant2,
    }
}

fn kind_tag(k: ModelKind) -> u8 {
    match k {
        ModelKind::CpgmVae => 0,
        ModelKind::CpgmAae => 1,
        ModelKind::Variant1 => 2,
        ModelKind::Variant2 => 3,
        ModelKind::Cnn => 4,
    }
}

fn tag_kind(t: u8) -> Option<ModelKind> {
    [ModelKind::CpgmVae, ModelKind::CpgmAae, ModelKind::Variant1, ModelKind::Variant2, ModelKind::Cnn].get(t as usize).copied()
}

fn truncated(r: &Cursor<&[u8]>) -> Error {
    Error::Length(format!("checkpoint truncated at byte {}", r.position()))
}

fn read_exact(r: &mut Cursor<&[u8]>, buf: &mut [u8]) -> Result<()> {
    let at = r.position();
    r.read_exact(buf).map_err(|_| Error::Length(format!("checkpoint truncated at byte {at}")))
}

fn read_u32(r: &mut Cursor<&[u8]>) -> Result<u32> {
    r.read_u32::<LE>().map_err(|_| truncated(r))
}

fn read_f64s(r: &mut Cursor<&[u8]>, n: usize) -> Result<Vec<f64>> {
    if (r.get_ref().len() as u64).saturating_sub(r.position()) < 8 * n as u64 {
        return Err(truncated(r));
    }
    (0..n).map(|_| r.read_f64::<LE>().map_err(|_| truncated(r))).collect()
}

fn read_str(r: &mut Cursor<&[u8]>) -> Result<String> {
    let n = read_u32(r)? as usize;
    if (r.get_ref().len() as u64).saturating_sub(r.position()) < n as u64 {
        return Err(truncated(r));
    }
    let at = r.position();
    let mut buf = vec![0u8; n];
    read_exact(r, &mut buf)?;
    String::from_utf8(buf).map_err(|_| Error::Format { offset: at, message: "string is not UTF-8".into() })
}

fn write_str(out: &mut Vec<u8>, s: &str) -> Result<()> {
    out.write_u32::<LE>(s.len() as u32)?;
    out.extend_from_slice(s.as_bytes());
    Ok(())
}
