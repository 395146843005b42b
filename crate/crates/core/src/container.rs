//! Shared on-disk container: a magic line, a single-line JSON header, then a
//! little-endian f64 payload. The header always carries the payload length
//! (in values) and its SHA-256.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

#[derive(Debug, Serialize, Deserialize)]
struct Envelope<H> {
    version: u32,
    payload_len: u64,
    sha256: String,
    #[serde(flatten)]
    header: H,
}

pub(crate) fn payload_bytes(payload: &[f64]) -> Vec<u8> {
    let mut bytes = Vec::with_capacity(payload.len() * 8);
    for v in payload {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    bytes
}

pub(crate) fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub(crate) fn write<H: Serialize>(
    path: &Path,
    magic: &str,
    version: u32,
    header: &H,
    payload: &[f64],
) -> Result<()> {
    let bytes = payload_bytes(payload);
    let env = Envelope {
        version,
        payload_len: payload.len() as u64,
        sha256: sha256_hex(&bytes),
        header,
    };
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "{magic}")?;
    serde_json::to_writer(&mut w, &env)?;
    writeln!(w)?;
    w.write_all(&bytes)?;
    w.flush()?;
    Ok(())
}

fn open_header<H: DeserializeOwned>(
    path: &Path,
    magic: &str,
    version: u32,
) -> Result<(Envelope<H>, BufReader<File>)> {
    let mut r = BufReader::new(File::open(path)?);
    let mut line = String::new();
    r.read_line(&mut line)?;
    if line.trim_end() != magic {
        return Err(Error::Format(format!("expected magic {magic:?}, found {:?}", line.trim_end())));
    }
    line.clear();
    r.read_line(&mut line)?;
    let raw: serde_json::Value =
        serde_json::from_str(&line).map_err(|e| Error::Format(format!("header: {e}")))?;
    let found = raw.get("version").and_then(|v| v.as_u64()).unwrap_or(0) as u32;
    if found != version {
        return Err(Error::Version { found, expected: version });
    }
    let env: Envelope<H> =
        serde_json::from_value(raw).map_err(|e| Error::Format(format!("header: {e}")))?;
    Ok((env, r))
}

/// Header only; the payload is not touched.
pub(crate) fn read_header<H: DeserializeOwned>(path: &Path, magic: &str, version: u32) -> Result<H> {
    Ok(open_header(path, magic, version)?.0.header)
}

pub(crate) fn read<H: DeserializeOwned>(
    path: &Path,
    magic: &str,
    version: u32,
) -> Result<(H, Vec<f64>)> {
    let (env, mut r) = open_header::<H>(path, magic, version)?;
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    let expected_len = env.payload_len as usize * 8;
    if bytes.len() != expected_len {
        return Err(Error::Format(format!(
            "payload has {} bytes, header declares {expected_len}",
            bytes.len()
        )));
    }
    let actual = sha256_hex(&bytes);
    if actual != env.sha256 {
        return Err(Error::Checksum { expected: env.sha256, actual });
    }
    let payload = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
        .collect();
    Ok((env.header, payload))
}
