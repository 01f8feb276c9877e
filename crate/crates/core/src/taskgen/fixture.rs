//! MEPB episode fixtures.
//!
//! Layout, all little-endian: `"MEPB"`, u16 version, u32 n_way, k_shot,
//! q_per_class, frames, feat_dim, motif_len, f64 noise_std, jitter low,
//! jitter high, u64 seed, then the support and query samples as row-major
//! f64 arrays and the support and query labels as u32.

use std::path::Path;

use super::{EpisodeBatch, EpisodeSpec};
use crate::binio::{put_f64s, Reader};
use crate::error::Result;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"MEPB";
pub const VERSION: u16 = 1;

/// The parts of an episode a fixture carries.
#[derive(Debug, Clone, PartialEq)]
pub struct Fixture {
    pub spec: EpisodeSpec,
    pub support: Vec<Tensor>,
    pub query: Vec<Tensor>,
    pub support_labels: Vec<usize>,
    pub query_labels: Vec<usize>,
}

impl From<&EpisodeBatch> for Fixture {
    fn from(b: &EpisodeBatch) -> Self {
        Self {
            spec: b.spec,
            support: b.support.clone(),
            query: b.query.clone(),
            support_labels: b.support_labels.clone(),
            query_labels: b.query_labels.clone(),
        }
    }
}

fn dim_u32(v: usize) -> u32 {
    u32::try_from(v).expect("episode dimension fits in u32")
}

pub fn encode(fx: &Fixture) -> Vec<u8> {
    let s = &fx.spec;
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    for v in [s.n_way, s.k_shot, s.q_per_class, s.frames, s.feat_dim, s.motif_len] {
        out.extend_from_slice(&dim_u32(v).to_le_bytes());
    }
    put_f64s(&mut out, &[s.noise_std, s.jitter.0, s.jitter.1]);
    out.extend_from_slice(&s.seed.to_le_bytes());
    for t in fx.support.iter().chain(&fx.query) {
        put_f64s(&mut out, t.data());
    }
    for &l in fx.support_labels.iter().chain(&fx.query_labels) {
        out.extend_from_slice(&dim_u32(l).to_le_bytes());
    }
    out
}

pub fn decode(buf: &[u8]) -> Result<Fixture> {
    let mut r = Reader::new(buf, "episode fixture");
    if r.bytes(4)? != MAGIC {
        return Err(r.format_at(0, "magic is not MEPB"));
    }
    let version = r.u16()?;
    if version != VERSION {
        return Err(r.format_at(4, format!("unsupported version {version}")));
    }
    let mut dims = [0usize; 6];
    for d in &mut dims {
        *d = r.u32()? as usize;
    }
    let [n_way, k_shot, q_per_class, frames, feat_dim, motif_len] = dims;
    let spec = EpisodeSpec {
        n_way,
        k_shot,
        q_per_class,
        frames,
        feat_dim,
        motif_len,
        noise_std: r.f64()?,
        jitter: (r.f64()?, r.f64()?),
        seed: r.u64()?,
        fixed_offset: None,
    };
    let header_end = r.pos();
    spec.validate().map_err(|e| r.format_at(6, e.to_string()))?;
    let n_support = n_way * k_shot;
    let n_query = n_way * q_per_class;
    let sample = frames.checked_mul(feat_dim).ok_or_else(|| r.format("sample size overflows"))?;
    let expected = (n_support + n_query)
        .checked_mul(sample.checked_mul(8).and_then(|b| b.checked_add(4)).unwrap_or(usize::MAX))
        .ok_or_else(|| r.format("payload size overflows"))?;
    r.require(expected)?;
    let mut read_samples = |n: usize| -> Result<Vec<Tensor>> {
        (0..n).map(|_| Tensor::new(&[frames, feat_dim], r.f64s(sample)?)).collect()
    };
    let support = read_samples(n_support)?;
    let query = read_samples(n_query)?;
    let mut labels = Vec::with_capacity(n_support + n_query);
    for _ in 0..n_support + n_query {
        let at = r.pos();
        let l = r.u32()? as usize;
        if l >= n_way {
            return Err(r.format_at(at, format!("label {l} out of range for {n_way} classes")));
        }
        labels.push(l);
    }
    if r.remaining() != 0 {
        return Err(r.format(format!("{} trailing bytes after a header ending at {header_end}", r.remaining())));
    }
    let query_labels = labels.split_off(n_support);
    Ok(Fixture {
        spec,
        support,
        query,
        support_labels: labels,
        query_labels,
    })
}

pub fn write_fixture(path: &Path, fx: &Fixture) -> Result<()> {
    std::fs::write(path, encode(fx))?;
    Ok(())
}

pub fn read_fixture(path: &Path) -> Result<Fixture> {
    decode(&std::fs::read(path)?)
}
