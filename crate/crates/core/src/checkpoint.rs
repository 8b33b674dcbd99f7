//! Binary checkpoints: an 8-byte magic, a little-endian `u64` header length,
//! a JSON header, then the encoder and decoder parameters as little-endian
//! `f64`.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::encoder::{EncoderConfig, EncoderParams, FlatParams};
use crate::error::{Error, Result};
use crate::io::write_atomic;
use crate::metalearn::{DecoderConfig, DecoderParams};

const MAGIC: &[u8; 8] = b"DMCKPT01";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub version: u32,
    pub method: String,
    pub seed: u64,
    pub meta_steps: usize,
    pub encoder: EncoderConfig,
    pub decoder: Option<DecoderConfig>,
    pub n_encoder: usize,
    pub n_decoder: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub encoder: EncoderParams<f64>,
    pub decoder: Option<DecoderParams<f64>>,
}

impl Checkpoint {
    pub fn new(
        method: &str,
        seed: u64,
        meta_steps: usize,
        encoder: EncoderParams<f64>,
        decoder: Option<DecoderParams<f64>>,
    ) -> Self {
        let header = CheckpointHeader {
            version: CHECKPOINT_VERSION,
            method: method.to_string(),
            seed,
            meta_steps,
            encoder: encoder.config().clone(),
            decoder: decoder.as_ref().map(|d| d.config().clone()),
            n_encoder: encoder.n_params(),
            n_decoder: decoder.as_ref().map_or(0, |d| d.flat().len()),
        };
        Self {
            header,
            encoder,
            decoder,
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = serde_json::to_vec(&self.header).expect("header serializes");
        let mut out = Vec::with_capacity(
            16 + header.len() + 8 * (self.header.n_encoder + self.header.n_decoder),
        );
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        let dec = self.decoder.as_ref().map_or(&[][..], |d| d.flat());
        for v in self.encoder.flat().iter().chain(dec) {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Checkpoint(m.to_string());
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(bad("not a checkpoint file"));
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let body = bytes
            .get(16..16 + hlen)
            .ok_or_else(|| bad("truncated header"))?;
        let header: CheckpointHeader =
            serde_json::from_slice(body).map_err(|e| bad(&format!("header: {e}")))?;
        if header.version != CHECKPOINT_VERSION {
            return Err(bad(&format!("unsupported version {}", header.version)));
        }
        let data = &bytes[16 + hlen..];
        if data.len() != 8 * (header.n_encoder + header.n_decoder) {
            return Err(bad("parameter payload length does not match the header"));
        }
        let mut vals = data
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")));
        let enc: Vec<f64> = vals.by_ref().take(header.n_encoder).collect();
        let dec: Vec<f64> = vals.collect();
        let encoder = EncoderParams::from_flat(&header.encoder, enc)?;
        let decoder = match &header.decoder {
            Some(cfg) => Some(DecoderParams::from_flat(cfg, dec)?),
            None if dec.is_empty() => None,
            None => return Err(bad("decoder values without a decoder config")),
        };
        Ok(Self {
            header,
            encoder,
            decoder,
        })
    }
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    write_atomic(path, &ckpt.to_bytes())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::from_bytes(&bytes)
}
