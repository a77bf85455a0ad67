//! FLG1 raw container.
//!
//! ```text
//! "FLG1"  u8 rank  u8 components  rank × u32 LE extents  f32 LE values
//! ```
//!
//! Values are component-major, then row-major over the spatial extents
//! (slowest axis first). A single component denotes a scalar grid; a
//! component count equal to the rank denotes a flow grid.

use std::fs;
use std::path::Path;

use super::{FlowGrid, Grid};
use crate::error::{Error, Result};

pub const RAW_MAGIC: &[u8; 4] = b"FLG1";

#[derive(Debug, Clone, PartialEq)]
pub enum RawField {
    Grid(Grid),
    Flow(FlowGrid),
}

impl From<Grid> for RawField {
    fn from(g: Grid) -> Self {
        RawField::Grid(g)
    }
}

impl From<FlowGrid> for RawField {
    fn from(f: FlowGrid) -> Self {
        RawField::Flow(f)
    }
}

pub fn encode_raw(field: &RawField) -> Vec<u8> {
    let (dims, comps): (&[usize], Vec<&[f64]>) = match field {
        RawField::Grid(g) => (g.dims(), vec![g.values()]),
        RawField::Flow(f) => (f.dims(), f.components().iter().map(|c| c.as_slice()).collect()),
    };
    let n: usize = dims.iter().product();
    let mut out = Vec::with_capacity(6 + 4 * dims.len() + 4 * n * comps.len());
    out.extend_from_slice(RAW_MAGIC);
    out.push(dims.len() as u8);
    out.push(comps.len() as u8);
    for &d in dims {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for c in comps {
        for &v in c {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    out
}

pub fn decode_raw(bytes: &[u8]) -> Result<RawField> {
    if bytes.len() < 6 || &bytes[..4] != RAW_MAGIC {
        return Err(Error::Format("bad magic (expected FLG1)".into()));
    }
    let rank = bytes[4] as usize;
    let ncomp = bytes[5] as usize;
    if !(2..=3).contains(&rank) {
        return Err(Error::Format(format!("unsupported rank {rank}")));
    }
    if ncomp != 1 && ncomp != rank {
        return Err(Error::Format(format!(
            "component count {ncomp} is neither 1 nor the rank {rank}"
        )));
    }
    let header = 6 + 4 * rank;
    if bytes.len() < header {
        return Err(Error::Format("truncated header".into()));
    }
    let mut dims = Vec::with_capacity(rank);
    for a in 0..rank {
        let off = 6 + 4 * a;
        let d = u32::from_le_bytes(bytes[off..off + 4].try_into().expect("4 bytes")) as usize;
        dims.push(d);
    }
    let n = dims
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .and_then(|n| n.checked_mul(ncomp))
        .and_then(|n| n.checked_mul(4))
        .ok_or_else(|| Error::Format("extent overflow".into()))?;
    let payload = &bytes[header..];
    if payload.len() != n {
        return Err(Error::Format(format!(
            "truncated payload: expected {} bytes, found {}",
            n,
            payload.len()
        )));
    }
    let vals: Vec<f64> = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
        .collect();
    let cells = vals.len() / ncomp;
    if ncomp == 1 {
        Ok(RawField::Grid(Grid::new(dims, vals)?))
    } else {
        let comps = vals.chunks(cells).map(|c| c.to_vec()).collect();
        Ok(RawField::Flow(FlowGrid::new(dims, comps)?))
    }
}

pub fn write_raw(field: &RawField, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, encode_raw(field))?;
    Ok(())
}

pub fn read_raw(path: impl AsRef<Path>) -> Result<RawField> {
    decode_raw(&fs::read(path)?)
}
