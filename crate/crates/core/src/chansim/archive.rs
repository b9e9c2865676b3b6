//! Sector archive: one compact JSON header line, then little-endian f32 rows
//! for reader 1 and reader 2, then one int8 row of center-track bits.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ChannelParams, ReaderGeometry, SectorSamples, N_TRACKS};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SectorHeader {
    pub seed: u64,
    pub n_bits: usize,
    pub params: ChannelParams,
    pub geometry: ReaderGeometry,
    pub iti_weights: [[f64; N_TRACKS]; 2],
    pub norm_mean: [f64; 2],
    pub norm_std: [f64; 2],
    pub raw_ber: [f64; 2],
}

pub fn write_sector(path: &Path, header: &SectorHeader, samples: &SectorSamples) -> Result<()> {
    if samples.len() != header.n_bits {
        return Err(Error::LengthMismatch("header n_bits differs from sample count".into()));
    }
    let mut buf = serde_json::to_vec(header)?;
    buf.push(b'\n');
    buf.reserve(9 * header.n_bits);
    for reader in &samples.readers {
        for &x in reader {
            buf.extend_from_slice(&(x as f32).to_le_bytes());
        }
    }
    buf.extend(samples.bits.iter().map(|&b| b as u8));
    let mut file = fs::File::create(path)?;
    file.write_all(&buf)?;
    Ok(())
}

pub fn read_sector(path: &Path) -> Result<(SectorHeader, SectorSamples)> {
    let bytes = fs::read(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::MissingData(path.to_path_buf()),
        _ => Error::Io(e),
    })?;
    let bad = |reason: &str| Error::Archive { path: path.to_path_buf(), reason: reason.into() };
    let split = bytes.iter().position(|&b| b == b'\n').ok_or_else(|| bad("no header line"))?;
    let header: SectorHeader = serde_json::from_slice(&bytes[..split])?;
    let body = &bytes[split + 1..];
    let n = header.n_bits;
    if body.len() != 9 * n {
        return Err(bad("payload length does not match n_bits"));
    }
    let row = |offset: usize| -> Vec<f64> {
        body[offset..offset + 4 * n]
            .chunks_exact(4)
            .map(|c| f64::from(f32::from_le_bytes([c[0], c[1], c[2], c[3]])))
            .collect()
    };
    let readers = [row(0), row(4 * n)];
    let bits: Vec<i8> = body[8 * n..].iter().map(|&b| b as i8).collect();
    if bits.iter().any(|&b| b != 1 && b != -1) {
        return Err(bad("bit row holds values other than ±1"));
    }
    Ok((header, SectorSamples { readers, bits }))
}
