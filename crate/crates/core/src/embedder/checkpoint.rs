//! Binary checkpoint format (little endian):
//!
//! ```text
//! magic      8 bytes  "ODDCKPT\0"
//! version    u32
//! mode       u8       0 = U, 1 = C, 2 = CPH
//! d, N, A    u64 x 3
//! alpha1..3  f64 x 3
//! ids        N stimulus ids then A annotator ids, each u32 length + UTF-8
//! W          N*d f64, row-major
//! Phi        A*d f64, row-major
//! ```

use std::path::Path;

use ndarray::Array2;

use super::params::{Mode, ModelParams, PenaltyWeights};
use crate::{Error, Result};

pub const MAGIC: &[u8; 8] = b"ODDCKPT\0";
pub const VERSION: u32 = 1;

pub fn encode(params: &ModelParams) -> Vec<u8> {
    let d = params.dims();
    let mut out = Vec::with_capacity(64 + 8 * (params.w.len() + params.phi.len()));
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.push(params.mode.code());
    for v in [d, params.stimulus_ids().len(), params.annotator_ids().len()] {
        out.extend_from_slice(&(v as u64).to_le_bytes());
    }
    let p = params.penalties;
    for a in [p.alpha1, p.alpha2, p.alpha3] {
        out.extend_from_slice(&a.to_le_bytes());
    }
    for id in params.stimulus_ids().iter().chain(params.annotator_ids()) {
        out.extend_from_slice(&(id.len() as u32).to_le_bytes());
        out.extend_from_slice(id.as_bytes());
    }
    for &v in params.w.iter().chain(params.phi.iter()) {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Checkpoint(format!("truncated at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|e| Error::Checkpoint(e.to_string()))
    }
}

pub fn decode(buf: &[u8]) -> Result<ModelParams> {
    let mut r = Reader { buf, pos: 0 };
    let magic = r.take(8).map_err(|_| Error::CheckpointVersion("file too short for header".into()))?;
    if magic != MAGIC {
        return Err(Error::CheckpointVersion("bad magic bytes".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::CheckpointVersion(format!("found version {version}, expected {VERSION}")));
    }
    let code = r.take(1)?[0];
    let mode = Mode::from_code(code).ok_or_else(|| Error::Checkpoint(format!("unknown mode code {code}")))?;
    let d = r.u64()? as usize;
    let n = r.u64()? as usize;
    let a = r.u64()? as usize;
    let penalties = PenaltyWeights {
        alpha1: r.f64()?,
        alpha2: r.f64()?,
        alpha3: r.f64()?,
    };
    // cheap sanity bound before allocating
    if n.saturating_add(a).saturating_mul(d).saturating_mul(8) > buf.len() {
        return Err(Error::Checkpoint("declared sizes exceed file length".into()));
    }
    let stimuli = (0..n).map(|_| r.string()).collect::<Result<Vec<_>>>()?;
    let annotators = (0..a).map(|_| r.string()).collect::<Result<Vec<_>>>()?;
    let w = (0..n * d).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
    let phi = (0..a * d).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
    if r.pos != buf.len() {
        return Err(Error::Checkpoint(format!("{} trailing bytes", buf.len() - r.pos)));
    }
    let w = Array2::from_shape_vec((n, d), w).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let phi = Array2::from_shape_vec((a, d), phi).map_err(|e| Error::Checkpoint(e.to_string()))?;
    ModelParams::new(mode, stimuli, annotators, w, phi, penalties)
}

pub fn save_checkpoint(params: &ModelParams, path: &Path) -> Result<()> {
    std::fs::write(path, encode(params)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<ModelParams> {
    let buf = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&buf)
}
