//! Binary checkpoint format.
//!
//! ```text
//! "ERKG" | version u32 LE | kind u8 | n_entities u64 | n_relations u64 | dim u64
//! entity block | tail entity block (CP only) | relation block      (f64 LE)
//! n_epsilon u64 (0 or n_relations) | epsilon values (f64 LE, NaN = unset)
//! ```

use std::path::Path;

use crate::data::write_file;
use crate::error::{KgError, Result};
use crate::model::{ModelKind, ModelParams};
use crate::regularizer::EpsilonState;

pub const MAGIC: &[u8; 4] = b"ERKG";
pub const VERSION: u32 = 1;
const HEADER_LEN: usize = 4 + 4 + 1 + 3 * 8;

pub fn encode(params: &ModelParams, eps: Option<&EpsilonState>) -> Vec<u8> {
    let blocks = params.blocks();
    let payload: usize = blocks.iter().map(|&b| params.block(b).len()).sum();
    let n_eps = eps.map_or(0, |e| e.len());
    let mut out = Vec::with_capacity(HEADER_LEN + 8 * (payload + 1 + n_eps));
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.push(params.kind().code());
    for n in [params.n_entities(), params.n_relations(), params.dim()] {
        out.extend_from_slice(&(n as u64).to_le_bytes());
    }
    for b in blocks {
        for v in params.block(b) {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out.extend_from_slice(&(n_eps as u64).to_le_bytes());
    if let Some(e) = eps {
        for v in e.values() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            KgError::Checkpoint(format!("truncated at byte {} (need {n} more)", self.pos))
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64s(&mut self, out: &mut [f64]) -> Result<()> {
        let raw = self.take(out.len().checked_mul(8).ok_or_else(|| KgError::Checkpoint("size overflow".into()))?)?;
        for (o, c) in out.iter_mut().zip(raw.chunks_exact(8)) {
            *o = f64::from_le_bytes(c.try_into().unwrap());
        }
        Ok(())
    }
}

pub fn decode(bytes: &[u8]) -> Result<(ModelParams, Option<EpsilonState>)> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4).ok() != Some(MAGIC.as_slice()) {
        return Err(KgError::Checkpoint("bad magic".into()));
    }
    let version = u32::from_le_bytes(r.take(4)?.try_into().unwrap());
    if version != VERSION {
        return Err(KgError::Checkpoint(format!("unsupported version {version}")));
    }
    let code = r.take(1)?[0];
    let kind = ModelKind::from_code(code).ok_or_else(|| KgError::Checkpoint(format!("unknown model kind {code}")))?;
    let dims = [r.u64()?, r.u64()?, r.u64()?];
    let [ne, nr, dim] = dims.map(|v| usize::try_from(v).unwrap_or(usize::MAX));
    // reject dimensions the remaining bytes cannot hold before allocating
    let remaining = (bytes.len() - r.pos) / 8;
    let rel_width = if kind == ModelKind::Rescal { dim.saturating_mul(dim) } else { dim };
    let needed = ne
        .saturating_mul(dim)
        .saturating_add(nr.saturating_mul(rel_width));
    if needed > remaining {
        return Err(KgError::Checkpoint(format!(
            "truncated: header declares {needed} values, file holds at most {remaining}"
        )));
    }
    let mut params = ModelParams::zeros(kind, ne, nr, dim).map_err(|e| KgError::Checkpoint(e.to_string()))?;
    for b in params.blocks() {
        r.f64s(params.block_mut(b))?;
    }
    let n_eps = r.u64()? as usize;
    let eps = match n_eps {
        0 => None,
        n if n == nr => {
            let mut v = vec![0.0; n];
            r.f64s(&mut v)?;
            Some(EpsilonState::from_values(v))
        }
        n => {
            return Err(KgError::Checkpoint(format!(
                "epsilon count {n} does not match {nr} relations"
            )))
        }
    };
    if r.pos != bytes.len() {
        return Err(KgError::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    Ok((params, eps))
}

pub fn save_checkpoint(params: &ModelParams, eps: Option<&EpsilonState>, path: &Path) -> Result<()> {
    write_file(path, &encode(params, eps))
}

pub fn load_checkpoint(path: &Path) -> Result<(ModelParams, Option<EpsilonState>)> {
    let bytes = std::fs::read(path).map_err(|e| KgError::io(path, e))?;
    decode(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bits(p: &ModelParams) -> Vec<u64> {
        p.blocks().iter().flat_map(|&b| p.block(b).iter().map(|v| v.to_bits()).collect::<Vec<_>>()).collect()
    }

    #[test]
    fn round_trip_every_kind() {
        for kind in ModelKind::ALL {
            let p = ModelParams::init(kind, 5, 3, 4, 11).unwrap();
            let mut eps = EpsilonState::new(3);
            eps.set(1, 0.25);
            let (q, e) = decode(&encode(&p, Some(&eps))).unwrap();
            assert_eq!(q.kind(), kind);
            assert_eq!(bits(&p), bits(&q));
            let e = e.unwrap();
            assert_eq!(e.get(1), Some(0.25));
            assert_eq!(e.get(0), None);
        }
    }

    #[test]
    fn rescal_size() {
        let p = ModelParams::zeros(ModelKind::Rescal, 10, 4, 8).unwrap();
        let bytes = encode(&p, None);
        assert_eq!(bytes.len(), HEADER_LEN + 8 * (10 * 8 + 4 * 8 * 8) + 8);
    }

    #[test]
    fn rejects_corruption() {
        let p = ModelParams::init(ModelKind::DistMult, 3, 2, 2, 0).unwrap();
        let mut bytes = encode(&p, None);
        assert!(decode(&bytes[..bytes.len() - 3]).is_err());
        let mut long = bytes.clone();
        long.push(0);
        assert!(decode(&long).is_err());
        bytes[0] = b'X';
        assert!(matches!(decode(&bytes), Err(KgError::Checkpoint(_))));
        let mut v = encode(&p, None);
        v[4] = 9;
        assert!(decode(&v).is_err());
    }
}
