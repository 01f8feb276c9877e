//! MANTA1 checkpoints.
//!
//! Layout, little-endian: `"MANTA1"`, u16 version, u32 entry count, then per
//! entry u16 name length, name bytes, u8 rank, rank x u32 extents and the f64
//! payload. A trailer holds the run configuration as u32 length plus
//! `key = value` text.

use std::path::Path;

use crate::binio::{put_f64s, Reader};
use crate::config::RunConfig;
use crate::error::{invalid, MantaError, Result};
use crate::model::MantaParams;
use crate::params::Parameterized;
use crate::tensor::Tensor;
use crate::train::init_params;

pub const MAGIC: &[u8; 6] = b"MANTA1";
pub const VERSION: u16 = 1;
const RUNNING_MEAN: &str = "conv.running_mean";
const RUNNING_VAR: &str = "conv.running_var";

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub version: u16,
    pub config: RunConfig,
    pub entries: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn new(config: &RunConfig, params: &MantaParams) -> Self {
        let mut entries = params.named_params();
        entries.push((RUNNING_MEAN.into(), Tensor::scalar(params.block.conv.running_mean)));
        entries.push((RUNNING_VAR.into(), Tensor::scalar(params.block.conv.running_var)));
        Self {
            version: VERSION,
            config: config.clone(),
            entries,
        }
    }

    fn entry(&self, name: &str) -> Result<&Tensor> {
        self.entries
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| MantaError::Invalid(format!("checkpoint has no entry {name:?}")))
    }

    /// Parameters shaped by `cfg` and filled from the entries.
    pub fn params(&self, cfg: &RunConfig) -> Result<MantaParams> {
        let mut p = init_params(cfg)?;
        let expected = p.named_params().len() + 2;
        if self.entries.len() != expected {
            return invalid(format!(
                "checkpoint has {} entries, config expects {expected}",
                self.entries.len()
            ));
        }
        let mut err = None;
        p.visit_mut("", &mut |name, t| {
            if err.is_some() {
                return;
            }
            match self.entry(&name) {
                Ok(src) if src.shape() == t.shape() => *t = src.clone(),
                Ok(src) => {
                    err = Some(MantaError::Invalid(format!(
                        "{name}: checkpoint shape {:?}, config expects {:?}",
                        src.shape(),
                        t.shape()
                    )))
                }
                Err(e) => err = Some(e),
            }
        });
        if let Some(e) = err {
            return Err(e);
        }
        p.block.conv.running_mean = self.entry(RUNNING_MEAN)?.data()[0];
        p.block.conv.running_var = self.entry(RUNNING_VAR)?.data()[0];
        Ok(p)
    }
}

pub fn encode(ck: &Checkpoint) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&ck.version.to_le_bytes());
    out.extend_from_slice(&(ck.entries.len() as u32).to_le_bytes());
    for (name, t) in &ck.entries {
        let len = u16::try_from(name.len()).map_err(|_| MantaError::Invalid(format!("name too long: {name}")))?;
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(t.shape().len() as u8);
        for &e in t.shape() {
            let e = u32::try_from(e).map_err(|_| MantaError::Invalid(format!("{name}: extent {e} too large")))?;
            out.extend_from_slice(&e.to_le_bytes());
        }
        put_f64s(&mut out, t.data());
    }
    let text = ck.config.to_text();
    out.extend_from_slice(&(text.len() as u32).to_le_bytes());
    out.extend_from_slice(text.as_bytes());
    Ok(out)
}

pub fn decode(buf: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader::new(buf, "checkpoint");
    let magic = r.bytes(MAGIC.len())?;
    if magic != MAGIC {
        return Err(r.format_at(0, format!("magic {:?} is not MANTA1", String::from_utf8_lossy(magic))));
    }
    let version = r.u16()?;
    if version != VERSION {
        return Err(r.format_at(6, format!("unsupported version {version}")));
    }
    let count = r.u32()? as usize;
    let mut entries = Vec::new();
    for _ in 0..count {
        let at = r.pos();
        let len = r.u16()? as usize;
        let name = std::str::from_utf8(r.bytes(len)?)
            .map_err(|_| r.format_at(at + 2, "entry name is not UTF-8"))?
            .to_string();
        let rank = r.u8()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32()? as usize);
        }
        let n = shape
            .iter()
            .try_fold(1usize, |a, &e| a.checked_mul(e))
            .ok_or_else(|| r.format(format!("{name}: element count overflows")))?;
        let data = r.f64s(n)?;
        let t = Tensor::new(&shape, data).map_err(|e| r.format_at(at, format!("{name}: {e}")))?;
        entries.push((name, t));
    }
    let len = r.u32()? as usize;
    let at = r.pos();
    let text = std::str::from_utf8(r.bytes(len)?).map_err(|_| r.format_at(at, "config text is not UTF-8"))?;
    let config = RunConfig::from_text(text).map_err(|e| r.format_at(at, e.to_string()))?;
    if r.remaining() != 0 {
        return Err(r.format(format!("{} trailing bytes", r.remaining())));
    }
    Ok(Checkpoint {
        version,
        config,
        entries,
    })
}

pub fn save_checkpoint(path: &Path, ck: &Checkpoint) -> Result<()> {
    std::fs::write(path, encode(ck)?)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    decode(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> RunConfig {
        RunConfig::from_text("n_way = 3\nframes = 8\nfeat_dim = 4\nmotif_len = 2\nn_state = 4\nepisodes = 2").unwrap()
    }

    fn sample() -> (RunConfig, Checkpoint) {
        let cfg = small();
        let mut p = init_params(&cfg).unwrap();
        p.block.conv.running_mean = 0.25;
        (cfg.clone(), Checkpoint::new(&cfg, &p))
    }

    #[test]
    fn round_trip_is_bit_identical() {
        let (cfg, ck) = sample();
        let bytes = encode(&ck).unwrap();
        let back = decode(&bytes).unwrap();
        assert_eq!(back, ck);
        assert_eq!(encode(&back).unwrap(), bytes);
        let p = back.params(&cfg).unwrap();
        let orig = ck.params(&cfg).unwrap();
        assert_eq!(p, orig);
        assert_eq!(p.block.conv.running_mean, 0.25);
        let bits = |p: &MantaParams| -> Vec<u64> {
            p.named_params().iter().flat_map(|(_, t)| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()).collect()
        };
        assert_eq!(bits(&p), bits(&init_params(&cfg).unwrap()));
    }

    #[test]
    fn truncation_names_lengths() {
        let (_, ck) = sample();
        let bytes = encode(&ck).unwrap();
        for cut in [3, 7, 20, bytes.len() / 2, bytes.len() - 1] {
            let e = decode(&bytes[..cut]).unwrap_err();
            match e {
                MantaError::Truncated { expected, actual, .. } => assert!(actual < expected),
                other => panic!("cut {cut}: {other}"),
            }
        }
    }

    #[test]
    fn wrong_magic_and_version() {
        let (_, ck) = sample();
        let mut bytes = encode(&ck).unwrap();
        bytes[5] = b'2';
        let e = decode(&bytes).unwrap_err().to_string();
        assert!(e.contains("byte 0") && e.contains("magic"), "{e}");
        // a bad magic in front of an absurd entry count fails on the magic
        let mut junk = b"NOTMAN".to_vec();
        junk.extend_from_slice(&[1, 0, 255, 255, 255, 255]);
        assert!(decode(&junk).unwrap_err().to_string().contains("magic"));

        let mut bytes = encode(&ck).unwrap();
        bytes[6] = 7;
        assert!(decode(&bytes).unwrap_err().to_string().contains("version 7"));
    }

    #[test]
    fn huge_extent_fails_on_length() {
        let mut b = MAGIC.to_vec();
        b.extend_from_slice(&VERSION.to_le_bytes());
        b.extend_from_slice(&1u32.to_le_bytes());
        b.extend_from_slice(&1u16.to_le_bytes());
        b.push(b'w');
        b.push(2);
        b.extend_from_slice(&u32::MAX.to_le_bytes());
        b.extend_from_slice(&u32::MAX.to_le_bytes());
        assert!(decode(&b).is_err());
    }

    #[test]
    fn dimension_mismatch_names_both_shapes() {
        let (_, ck) = sample();
        let mut other = small();
        other.feat_dim = 8;
        other.validate().unwrap();
        let e = ck.params(&other).unwrap_err().to_string();
        assert!(e.contains("4]") && e.contains("8]") && e.contains("checkpoint shape"), "{e}");
    }
}
