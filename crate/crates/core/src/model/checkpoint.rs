//! Binary checkpoint.
//!
//! ```text
//!   "SDMB"  u32 version
//!   u32 len, config as key=value text
//!   u32 count, then per blob:
//!     u32 len, name   u32 rank, u32 extents…   f32 payload (LE)
//! ```
//!
//! Trainable parameters come first in visit order, then the batchnorm
//! running statistics.

use std::path::Path;

use indexmap::IndexMap;

use super::config::SdmambaConfig;
use super::net::SdmambaModel;
use crate::binio::{put_f32s, put_len, put_str, put_u32, Reader};
use crate::error::{Error, Result};
use crate::params::Parameterized;
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"SDMB";
pub const CHECKPOINT_VERSION: u32 = 1;

pub fn write_checkpoint(model: &SdmambaModel) -> Vec<u8> {
    let mut count = 0;
    model.visit("", &mut |_, _| count += 1);
    model.visit_buffers(&mut |_, _| count += 1);

    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    put_u32(&mut out, CHECKPOINT_VERSION);
    put_str(&mut out, &model.config.to_kv());
    put_len(&mut out, count);
    let mut blob = |name: String, t: &Tensor| {
        put_str(&mut out, &name);
        put_len(&mut out, t.shape().len());
        for &d in t.shape() {
            put_len(&mut out, d);
        }
        put_f32s(&mut out, t.data());
    };
    model.visit("", &mut blob);
    model.visit_buffers(&mut blob);
    out
}

pub fn read_checkpoint(bytes: &[u8]) -> Result<SdmambaModel> {
    let mut r = Reader::new(bytes);
    r.expect_magic(MAGIC)?;
    let version = r.u32("version")?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::format(4, format!("unsupported checkpoint version {version}")));
    }
    let config_at = r.offset();
    let config = SdmambaConfig::from_kv(&r.string("config record")?)
        .map_err(|e| Error::format(config_at, e.to_string()))?;

    let count = r.len("blob count")?;
    let mut blobs = IndexMap::new();
    for _ in 0..count {
        let at = r.offset();
        let name = r.string("blob name")?;
        let rank = r.len("rank")?;
        if rank == 0 || rank > 8 {
            return Err(r.fail(format!("blob `{name}` has implausible rank {rank}")));
        }
        let shape = (0..rank).map(|_| r.len("extent")).collect::<Result<Vec<_>>>()?;
        let numel = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .filter(|&n| n > 0)
            .ok_or_else(|| r.fail(format!("blob `{name}` has bad shape {shape:?}")))?;
        let data = r.f32s(numel, "blob payload")?;
        let tensor = Tensor::new(&shape, data)?;
        if blobs.insert(name.clone(), (at, tensor)).is_some() {
            return Err(Error::format(at, format!("duplicate blob `{name}`")));
        }
    }
    r.finish()?;

    let end = r.offset();
    let mut model = SdmambaModel::new(config)?;
    let mut fill = |name: String, slot: &mut Tensor| -> Result<()> {
        let (at, t) = blobs
            .shift_remove(&name)
            .ok_or_else(|| Error::format(end, format!("missing blob `{name}`")))?;
        if t.shape() != slot.shape() {
            return Err(Error::format(
                at,
                format!("blob `{name}` has shape {:?}, config implies {:?}", t.shape(), slot.shape()),
            ));
        }
        *slot = t;
        Ok(())
    };
    let mut status = Ok(());
    let mut visit = |name: String, slot: &mut Tensor| {
        if status.is_ok() {
            status = fill(name, slot);
        }
    };
    model.visit_mut("", &mut visit);
    model.visit_buffers_mut(&mut visit);
    status?;
    if let Some((name, (at, _))) = blobs.first() {
        return Err(Error::format(*at, format!("unexpected blob `{name}`")));
    }
    Ok(model)
}

pub fn save_checkpoint(model: &SdmambaModel, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, write_checkpoint(model))?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<SdmambaModel> {
    read_checkpoint(&std::fs::read(path)?)
}
