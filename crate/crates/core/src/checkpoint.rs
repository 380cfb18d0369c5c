//! Binary checkpoint format.
//!
//! Layout (all multi-byte values little-endian):
//!
//! ```text
//! magic   8  b"UATTNCKP"
//! version u32 (currently 1)
//! step    u64
//! optg_step u64
//! optd_step u64
//! config  u32 length + canonical key=value text
//! count   u32 number of tensor records
//! record: name(u16 len + utf8), dtype u8, rank u8, extents u32 x rank,
//!         payload (raw LE values), fnv1a-64 checksum of the payload
//! ```
//!
//! Record names are prefixed: `gen.`, `disc.`, `optg.m.`, `optg.v.`,
//! `optd.m.`, `optd.v.`, `sn.u.`. Encoding is a pure function of the state,
//! so save -> load -> save reproduces identical bytes.

use crate::adam::AdamState;
use crate::config::TrainConfig;
use crate::losses::{build_discriminator, Discriminator, SpectralStates};
use crate::model::{build_model, ModelWeights};
use crate::rng::fnv1a;
use crate::scalar::{Dtype, Scalar};
use crate::spectral::SpectralState;
use crate::tensor::Tensor;
use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;
use thiserror::Error;

pub const CKPT_MAGIC: &[u8; 8] = b"UATTNCKP";
pub const CKPT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("bad magic (not a checkpoint)")]
    BadMagic,
    #[error("unsupported version {0} (expected {CKPT_VERSION})")]
    BadVersion(u32),
    #[error("truncated checkpoint while reading {0}")]
    Truncated(&'static str),
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
    #[error("checksum mismatch for tensor {0}")]
    Checksum(String),
    #[error("tensor {name} has shape {got:?}, config implies {expected:?}")]
    ShapeDisagreement { name: String, got: Vec<usize>, expected: Vec<usize> },
    #[error("config block: {0}")]
    Config(String),
}

/// Complete training state.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub step: u64,
    pub gen: ModelWeights<f32>,
    pub disc: Discriminator<f32>,
    pub opt_g: AdamState<f32>,
    pub opt_d: AdamState<f32>,
    pub spectral: SpectralStates<f32>,
}

struct Record<'a> {
    name: String,
    shape: Vec<usize>,
    data: &'a [f32],
}

fn push_u16(buf: &mut Vec<u8>, v: u16) {
    buf.extend_from_slice(&v.to_le_bytes());
}
fn push_u32(buf: &mut Vec<u8>, v: u32) {
    buf.extend_from_slice(&v.to_le_bytes());
}
fn push_u64(buf: &mut Vec<u8>, v: u64) {
    buf.extend_from_slice(&v.to_le_bytes());
}

pub fn encode_checkpoint(ckpt: &Checkpoint) -> Vec<u8> {
    let mut records: Vec<Record> = Vec::new();
    for (n, t) in &ckpt.gen.params {
        records.push(Record { name: format!("gen.{n}"), shape: t.shape().to_vec(), data: t.data() });
    }
    for (n, t) in &ckpt.disc.params {
        records.push(Record { name: n.clone(), shape: t.shape().to_vec(), data: t.data() });
    }
    for (prefix, state) in [("optg", &ckpt.opt_g), ("optd", &ckpt.opt_d)] {
        for (kind, map) in [("m", &state.m), ("v", &state.v)] {
            for (n, buf) in map {
                records.push(Record { name: format!("{prefix}.{kind}.{n}"), shape: vec![buf.len()], data: buf });
            }
        }
    }
    for (n, st) in &ckpt.spectral.states {
        records.push(Record { name: format!("sn.u.{n}"), shape: vec![st.u.len()], data: &st.u });
    }

    let config_text = ckpt.config.to_text();
    let mut out = Vec::new();
    out.extend_from_slice(CKPT_MAGIC);
    push_u32(&mut out, CKPT_VERSION);
    push_u64(&mut out, ckpt.step);
    push_u64(&mut out, ckpt.opt_g.step);
    push_u64(&mut out, ckpt.opt_d.step);
    push_u32(&mut out, config_text.len() as u32);
    out.extend_from_slice(config_text.as_bytes());
    push_u32(&mut out, records.len() as u32);
    for r in &records {
        push_u16(&mut out, r.name.len() as u16);
        out.extend_from_slice(r.name.as_bytes());
        out.push(Dtype::F32.tag());
        out.push(r.shape.len() as u8);
        for &e in &r.shape {
            push_u32(&mut out, e as u32);
        }
        let payload_start = out.len();
        for v in r.data {
            v.encode_le(&mut out);
        }
        let checksum = fnv1a(&out[payload_start..]);
        push_u64(&mut out, checksum);
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8], CheckpointError> {
        if self.pos + n > self.bytes.len() {
            return Err(CheckpointError::Truncated(what));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u16(&mut self, what: &'static str) -> Result<u16, CheckpointError> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }
    fn u32(&mut self, what: &'static str) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
    fn u64(&mut self, what: &'static str) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint, CheckpointError> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(8, "magic")? != CKPT_MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let version = r.u32("version")?;
    if version != CKPT_VERSION {
        return Err(CheckpointError::BadVersion(version));
    }
    let step = r.u64("step")?;
    let optg_step = r.u64("optg step")?;
    let optd_step = r.u64("optd step")?;
    let cfg_len = r.u32("config length")? as usize;
    let cfg_text = std::str::from_utf8(r.take(cfg_len, "config")?)
        .map_err(|_| CheckpointError::Corrupt("config is not utf-8".into()))?;
    let config = TrainConfig::parse(cfg_text).map_err(CheckpointError::Config)?;
    let count = r.u32("tensor count")? as usize;

    let mut tensors: BTreeMap<String, Tensor<f32>> = BTreeMap::new();
    for _ in 0..count {
        let name_len = r.u16("name length")? as usize;
        let name = std::str::from_utf8(r.take(name_len, "name")?)
            .map_err(|_| CheckpointError::Corrupt("name is not utf-8".into()))?
            .to_string();
        let dtype = Dtype::from_tag(r.take(1, "dtype")?[0])
            .ok_or_else(|| CheckpointError::Corrupt(format!("unknown dtype for {name}")))?;
        if dtype != Dtype::F32 {
            return Err(CheckpointError::Corrupt(format!("tensor {name} is not f32")));
        }
        let rank = r.take(1, "rank")?[0] as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32("extent")? as usize);
        }
        let n: usize = shape.iter().product();
        let payload = r.take(n * 4, "payload")?;
        let checksum = r.u64("checksum")?;
        if fnv1a(payload) != checksum {
            return Err(CheckpointError::Checksum(name));
        }
        let data: Vec<f32> = payload.chunks_exact(4).map(f32::decode_le).collect();
        let t = Tensor::new(shape, data).map_err(|e| CheckpointError::Corrupt(e.to_string()))?;
        if tensors.insert(name.clone(), t).is_some() {
            return Err(CheckpointError::Corrupt(format!("duplicate tensor {name}")));
        }
    }
    if r.pos != bytes.len() {
        return Err(CheckpointError::Corrupt(format!("{} trailing bytes", bytes.len() - r.pos)));
    }

    // Reassemble the sections and validate shapes against the config.
    let expected_gen =
        build_model::<f32>(config.variant, config.input_hw, 0).map_err(|e| CheckpointError::Config(e.to_string()))?;
    let mut gen_params = crate::adam::ParamMap::new();
    for (name, expect) in &expected_gen.params {
        let t = tensors
            .remove(&format!("gen.{name}"))
            .ok_or_else(|| CheckpointError::Corrupt(format!("missing tensor gen.{name}")))?;
        if t.shape() != expect.shape() {
            return Err(CheckpointError::ShapeDisagreement {
                name: format!("gen.{name}"),
                got: t.shape().to_vec(),
                expected: expect.shape().to_vec(),
            });
        }
        gen_params.insert(name.clone(), t);
    }
    let expected_disc = build_discriminator::<f32>(0);
    let mut disc_params = crate::adam::ParamMap::new();
    for (name, expect) in &expected_disc.params {
        let t = tensors
            .remove(name)
            .ok_or_else(|| CheckpointError::Corrupt(format!("missing tensor {name}")))?;
        if t.shape() != expect.shape() {
            return Err(CheckpointError::ShapeDisagreement {
                name: name.clone(),
                got: t.shape().to_vec(),
                expected: expect.shape().to_vec(),
            });
        }
        disc_params.insert(name.clone(), t);
    }
    let mut opt_g = AdamState { step: optg_step, m: BTreeMap::new(), v: BTreeMap::new() };
    let mut opt_d = AdamState { step: optd_step, m: BTreeMap::new(), v: BTreeMap::new() };
    let mut spectral_states = BTreeMap::new();
    for (name, t) in tensors {
        if let Some(rest) = name.strip_prefix("optg.m.") {
            opt_g.m.insert(rest.to_string(), t.into_data());
        } else if let Some(rest) = name.strip_prefix("optg.v.") {
            opt_g.v.insert(rest.to_string(), t.into_data());
        } else if let Some(rest) = name.strip_prefix("optd.m.") {
            opt_d.m.insert(rest.to_string(), t.into_data());
        } else if let Some(rest) = name.strip_prefix("optd.v.") {
            opt_d.v.insert(rest.to_string(), t.into_data());
        } else if let Some(rest) = name.strip_prefix("sn.u.") {
            spectral_states.insert(rest.to_string(), SpectralState { u: t.into_data() });
        } else {
            return Err(CheckpointError::Corrupt(format!("unexpected tensor {name}")));
        }
    }

    Ok(Checkpoint {
        config,
        step,
        gen: ModelWeights { variant: expected_gen.variant, params: gen_params },
        disc: Discriminator { params: disc_params },
        opt_g,
        opt_d,
        spectral: SpectralStates { states: spectral_states },
    })
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<(), CheckpointError> {
    let bytes = encode_checkpoint(ckpt);
    let mut f =
        std::fs::File::create(path).map_err(|e| CheckpointError::Io { path: path.display().to_string(), source: e })?;
    f.write_all(&bytes).map_err(|e| CheckpointError::Io { path: path.display().to_string(), source: e })
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, CheckpointError> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| CheckpointError::Io { path: path.display().to_string(), source: e })?;
    decode_checkpoint(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ArchVariant;

    fn small_checkpoint() -> Checkpoint {
        let mut config = TrainConfig::default();
        config.input_hw = 32;
        config.batch_size = 2;
        let gen = build_model::<f32>(ArchVariant::UAttention, 32, config.seed_model).unwrap();
        let disc = build_discriminator::<f32>(config.seed_model ^ 0xD15C);
        let spectral = SpectralStates::new(&disc, config.seed_model ^ 0x5EED);
        Checkpoint {
            config,
            step: 3,
            gen,
            disc,
            opt_g: AdamState::new(),
            opt_d: AdamState::new(),
            spectral,
        }
    }

    #[test]
    fn round_trip_is_byte_identical() {
        let ckpt = small_checkpoint();
        let bytes = encode_checkpoint(&ckpt);
        let decoded = decode_checkpoint(&bytes).unwrap();
        let again = encode_checkpoint(&decoded);
        assert_eq!(bytes, again);
        assert_eq!(decoded.step, 3);
        assert_eq!(decoded.gen, ckpt.gen);
        assert_eq!(decoded.disc, ckpt.disc);
    }

    #[test]
    fn flipping_any_payload_byte_is_rejected() {
        let ckpt = small_checkpoint();
        let bytes = encode_checkpoint(&ckpt);
        // Flip a byte near the middle (inside some tensor payload).
        let mut corrupted = bytes.clone();
        let mid = bytes.len() / 2;
        corrupted[mid] ^= 0x40;
        let err = decode_checkpoint(&corrupted);
        assert!(err.is_err(), "corruption at byte {mid} was accepted");
    }

    #[test]
    fn bad_magic_version_and_truncation() {
        let ckpt = small_checkpoint();
        let bytes = encode_checkpoint(&ckpt);
        let mut bad_magic = bytes.clone();
        bad_magic[0] = b'X';
        assert!(matches!(decode_checkpoint(&bad_magic), Err(CheckpointError::BadMagic)));

        let mut bad_version = bytes.clone();
        bad_version[8] = 9;
        assert!(matches!(decode_checkpoint(&bad_version), Err(CheckpointError::BadVersion(_))));

        assert!(matches!(
            decode_checkpoint(&bytes[..bytes.len() - 10]),
            Err(CheckpointError::Truncated(_) | CheckpointError::Corrupt(_))
        ));
    }

    #[test]
    fn shape_disagreement_with_config_is_rejected() {
        let mut ckpt = small_checkpoint();
        // Claim a different architecture in the config: tensor shapes for
        // the 5-block network no longer match the 3-block expectation.
        ckpt.config.variant = ArchVariant::BaselineCascade3;
        let bytes = encode_checkpoint(&ckpt);
        assert!(decode_checkpoint(&bytes).is_err());
    }
}
