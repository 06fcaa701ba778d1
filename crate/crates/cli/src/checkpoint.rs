//! Binary model checkpoints.
//!
//! Layout: magic `FLATFEDW`, format version (u32 LE), round (u64 LE), model
//! spec as JSON (u64 LE length + bytes), parameter count (u64 LE) and the
//! parameters as little-endian f64.

use std::path::Path;

use flatfed_core::model::{ModelSpec, ParamVector};

use crate::CliError;

pub const MAGIC: &[u8; 8] = b"FLATFEDW";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub round: usize,
    pub spec: ModelSpec,
    pub params: ParamVector,
}

pub fn encode(round: usize, spec: &ModelSpec, params: &[f64]) -> Vec<u8> {
    let spec_json = serde_json::to_vec(spec).expect("spec serializes");
    let mut out = Vec::with_capacity(36 + spec_json.len() + 8 * params.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(round as u64).to_le_bytes());
    out.extend_from_slice(&(spec_json.len() as u64).to_le_bytes());
    out.extend_from_slice(&spec_json);
    out.extend_from_slice(&(params.len() as u64).to_le_bytes());
    for p in params {
        out.extend_from_slice(&p.to_le_bytes());
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8], CliError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            CliError::Format(format!("truncated checkpoint while reading {what}"))
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u64(&mut self, what: &str) -> Result<u64, CliError> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}

pub fn decode(bytes: &[u8]) -> Result<Checkpoint, CliError> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(8, "magic")? != MAGIC {
        return Err(CliError::Format("not a checkpoint file".into()));
    }
    let version = u32::from_le_bytes(r.take(4, "version")?.try_into().unwrap());
    if version != VERSION {
        return Err(CliError::Format(format!("unsupported checkpoint version {version}")));
    }
    let round = r.u64("round")? as usize;
    let spec_len = r.u64("spec length")? as usize;
    let spec: ModelSpec = serde_json::from_slice(r.take(spec_len, "model spec")?)
        .map_err(|e| CliError::Format(format!("bad model spec: {e}")))?;
    let d = r.u64("parameter count")? as usize;
    let raw = r.take(d.saturating_mul(8), "parameters")?;
    if r.pos != bytes.len() {
        return Err(CliError::Format("trailing bytes after parameters".into()));
    }
    let values: Vec<f64> = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
    let params = ParamVector::from_values(&spec, values).map_err(|e| CliError::Format(e.to_string()))?;
    Ok(Checkpoint { round, spec, params })
}

pub fn save(path: &Path, round: usize, spec: &ModelSpec, params: &[f64]) -> Result<(), CliError> {
    std::fs::write(path, encode(round, spec, params)).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))
}

pub fn load(path: &Path) -> Result<Checkpoint, CliError> {
    let bytes = std::fs::read(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
    decode(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use flatfed_core::model::build;
    use flatfed_core::rng::Rng;

    #[test]
    fn round_trip_is_bitwise() {
        let spec = ModelSpec::mlp(&[4, 5, 3]);
        let p = build(&spec, &mut Rng::new(3)).unwrap();
        let ck = decode(&encode(7, &spec, &p.values)).unwrap();
        assert_eq!(ck.round, 7);
        assert_eq!(ck.spec, spec);
        let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&ck.params.values), bits(&p.values));
    }

    #[test]
    fn truncation_and_version_errors() {
        let spec = ModelSpec::mlp(&[2, 2]);
        let bytes = encode(0, &spec, &[0.5; 6]);
        for cut in [0, 5, 12, 30, bytes.len() - 1] {
            assert!(matches!(decode(&bytes[..cut]), Err(CliError::Format(_))), "cut {cut}");
        }
        let mut v2 = bytes.clone();
        v2[8] = 2;
        assert!(matches!(decode(&v2), Err(CliError::Format(m)) if m.contains("version")));
    }
}
