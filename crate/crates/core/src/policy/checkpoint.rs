//! Binary checkpoints: a magic tag, a format version, the model config as
//! JSON, then the weights as little-endian `f32`. Optimizer state goes to a
//! separate sidecar with `f64` moments so resumed runs continue bit-exactly.

use super::optim::{AdamW, OptimConfig};
use super::{ModelConfig, Params, PolicyError};
use sha2::{Digest, Sha256};
use std::fs;
use std::path::Path;

const PARAMS_MAGIC: &[u8; 4] = b"VPCK";
const OPTIM_MAGIC: &[u8; 4] = b"VPOS";
pub const CHECKPOINT_VERSION: u32 = 1;

fn bad(msg: impl Into<String>) -> PolicyError {
    PolicyError::Checkpoint(msg.into())
}

struct Cursor<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], PolicyError> {
        let end = self.at.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| bad("truncated"))?;
        let out = &self.bytes[self.at..end];
        self.at = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32, PolicyError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64, PolicyError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn header(&mut self, magic: &[u8; 4]) -> Result<(), PolicyError> {
        if self.take(4)? != magic {
            return Err(bad("wrong magic"));
        }
        let version = self.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(bad(format!("unsupported version {version}")));
        }
        Ok(())
    }

    fn json<T: serde::de::DeserializeOwned>(&mut self) -> Result<T, PolicyError> {
        let n = self.u32()? as usize;
        serde_json::from_slice(self.take(n)?).map_err(|e| bad(e.to_string()))
    }

    fn finish(&self) -> Result<(), PolicyError> {
        if self.at == self.bytes.len() {
            Ok(())
        } else {
            Err(bad("trailing bytes"))
        }
    }
}

fn put_json<T: serde::Serialize>(out: &mut Vec<u8>, v: &T) {
    let json = serde_json::to_vec(v).expect("config serializes");
    out.extend((json.len() as u32).to_le_bytes());
    out.extend(json);
}

pub fn params_to_bytes(p: &Params) -> Vec<u8> {
    let mut out = Vec::with_capacity(64 + 4 * p.len());
    out.extend(PARAMS_MAGIC);
    out.extend(CHECKPOINT_VERSION.to_le_bytes());
    put_json(&mut out, &p.config);
    out.extend((p.len() as u64).to_le_bytes());
    for &x in &p.data {
        out.extend((x as f32).to_le_bytes());
    }
    out
}

pub fn params_from_bytes(bytes: &[u8]) -> Result<Params, PolicyError> {
    let mut c = Cursor { bytes, at: 0 };
    c.header(PARAMS_MAGIC)?;
    let config: ModelConfig = c.json()?;
    config.validate().map_err(bad)?;
    let n = c.u64()? as usize;
    let raw = c.take(n.checked_mul(4).ok_or_else(|| bad("size overflow"))?)?;
    c.finish()?;
    let data = raw
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")) as f64)
        .collect();
    Params::from_data(config, data)
}

pub fn params_digest(p: &Params) -> String {
    hex::encode(Sha256::digest(params_to_bytes(p)))
}

pub fn save_params(p: &Params, path: &Path) -> Result<String, PolicyError> {
    let bytes = params_to_bytes(p);
    fs::write(path, &bytes)?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

pub fn load_params(path: &Path) -> Result<Params, PolicyError> {
    params_from_bytes(&fs::read(path)?)
}

pub fn optimizer_to_bytes(o: &AdamW) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend(OPTIM_MAGIC);
    out.extend(CHECKPOINT_VERSION.to_le_bytes());
    put_json(&mut out, &o.config);
    out.extend(o.t.to_le_bytes());
    out.extend((o.m.len() as u64).to_le_bytes());
    for x in o.m.iter().chain(&o.v) {
        out.extend(x.to_le_bytes());
    }
    out
}

pub fn optimizer_from_bytes(bytes: &[u8], params: &Params) -> Result<AdamW, PolicyError> {
    let mut c = Cursor { bytes, at: 0 };
    c.header(OPTIM_MAGIC)?;
    let config: OptimConfig = c.json()?;
    let t = c.u64()?;
    let n = c.u64()? as usize;
    let read = |c: &mut Cursor| -> Result<Vec<f64>, PolicyError> {
        Ok(c.take(n.checked_mul(8).ok_or_else(|| bad("size overflow"))?)?
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
            .collect())
    };
    let m = read(&mut c)?;
    let v = read(&mut c)?;
    c.finish()?;
    AdamW::with_state(config, params, m, v, t).ok_or_else(|| bad("optimizer state does not match the model"))
}

pub fn save_optimizer(o: &AdamW, path: &Path) -> Result<(), PolicyError> {
    fs::write(path, optimizer_to_bytes(o))?;
    Ok(())
}

pub fn load_optimizer(path: &Path, params: &Params) -> Result<AdamW, PolicyError> {
    optimizer_from_bytes(&fs::read(path)?, params)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn params_roundtrip_exact() {
        let mut p = Params::init(ModelConfig {
            seed: 3,
            ..ModelConfig::default()
        });
        p.randomize_output(1, 0.1);
        p.quantize();
        let back = params_from_bytes(&params_to_bytes(&p)).unwrap();
        assert_eq!(back, p);
        assert_eq!(params_digest(&back), params_digest(&p));
    }

    #[test]
    fn rejects_corruption() {
        let p = Params::init(ModelConfig::default());
        let bytes = params_to_bytes(&p);
        assert!(params_from_bytes(&bytes[..bytes.len() - 1]).is_err());
        let mut wrong = bytes.clone();
        wrong[0] = b'X';
        assert!(params_from_bytes(&wrong).is_err());
        let mut extra = bytes;
        extra.push(0);
        assert!(params_from_bytes(&extra).is_err());
    }

    #[test]
    fn optimizer_roundtrip() {
        let mut p = Params::init(ModelConfig::default());
        let mut o = AdamW::new(OptimConfig::default(), &p);
        let g: Vec<f64> = (0..p.len()).map(|i| ((i % 7) as f64 - 3.0) * 1e-3).collect();
        o.step(&mut p, &g);
        let back = optimizer_from_bytes(&optimizer_to_bytes(&o), &p).unwrap();
        assert_eq!(back, o);
    }
}
