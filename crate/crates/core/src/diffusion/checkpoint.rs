use std::fs;
use std::io::{Cursor, Read};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use serde::{Deserialize, Serialize};

use super::model::ScoreModel;
use super::schedule::NoiseSchedule;
use crate::numkit::{MlpSpec, ParamVector};
use crate::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"SMACDM01";

#[derive(Serialize, Deserialize)]
struct Meta {
    state_dim: usize,
    action_dim: usize,
    embed_dim: usize,
    network: MlpSpec,
}

/// Layout: magic, u32 K, K × f64 ᾱ, u32 meta length, JSON meta, u64 param
/// count, params. All integers and floats little-endian.
pub fn save_score_model(model: &ScoreModel, path: &Path) -> Result<()> {
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    let ab = model.schedule.alpha_bars();
    out.write_u32::<LittleEndian>(ab.len() as u32)?;
    for v in ab {
        out.write_f64::<LittleEndian>(*v)?;
    }
    let meta = serde_json::to_vec(&Meta {
        state_dim: model.state_dim,
        action_dim: model.action_dim,
        embed_dim: model.embed_dim,
        network: model.params.spec().clone(),
    })?;
    out.write_u32::<LittleEndian>(meta.len() as u32)?;
    out.extend_from_slice(&meta);
    out.write_u64::<LittleEndian>(model.params.len() as u64)?;
    for v in model.params.values() {
        out.write_f64::<LittleEndian>(*v)?;
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn load_score_model(path: &Path) -> Result<ScoreModel> {
    let bytes = fs::read(path)?;
    let fail = |message: String| Error::Format {
        path: path.into(),
        message,
    };
    let truncated = |e: std::io::Error, at: u64| fail(format!("truncated at byte offset {at}: {e}"));
    let mut cur = Cursor::new(bytes.as_slice());
    let mut magic = [0u8; 8];
    cur.read_exact(&mut magic).map_err(|e| truncated(e, 0))?;
    if &magic != CHECKPOINT_MAGIC {
        if magic[..6] == CHECKPOINT_MAGIC[..6] {
            let found = std::str::from_utf8(&magic[6..]).ok().and_then(|v| v.parse().ok()).unwrap_or(0);
            return Err(Error::VersionMismatch {
                path: path.into(),
                found,
                expected: 1,
            });
        }
        return Err(fail("not a diffusion checkpoint (bad magic bytes)".into()));
    }
    let k = cur.read_u32::<LittleEndian>().map_err(|e| truncated(e, cur.position()))? as usize;
    let mut ab = Vec::with_capacity(k.min(1 << 16));
    for _ in 0..k {
        ab.push(cur.read_f64::<LittleEndian>().map_err(|e| truncated(e, cur.position()))?);
    }
    let schedule = NoiseSchedule::from_alpha_bar(ab)?;
    let meta_len = cur.read_u32::<LittleEndian>().map_err(|e| truncated(e, cur.position()))? as usize;
    let mut meta = vec![0u8; meta_len.min(bytes.len())];
    cur.read_exact(&mut meta).map_err(|e| truncated(e, cur.position()))?;
    let meta: Meta = serde_json::from_slice(&meta).map_err(|e| fail(format!("bad metadata: {e}")))?;
    let count = cur.read_u64::<LittleEndian>().map_err(|e| truncated(e, cur.position()))? as usize;
    if count != meta.network.param_count() {
        return Err(fail(format!(
            "parameter count {count} does not match network ({})",
            meta.network.param_count()
        )));
    }
    let mut values = Vec::with_capacity(count);
    for _ in 0..count {
        values.push(cur.read_f64::<LittleEndian>().map_err(|e| truncated(e, cur.position()))?);
    }
    if (cur.position() as usize) != bytes.len() {
        return Err(fail(format!("{} trailing bytes", bytes.len() - cur.position() as usize)));
    }
    let params = ParamVector::new(meta.network, values)?;
    ScoreModel::from_parts(params, schedule, meta.state_dim, meta.action_dim, meta.embed_dim)
}
