//! Checkpoint file format.
//!
//! Layout: an 8-byte magic (`MCTCKPT1`), a length-prefixed JSON header
//! carrying the format version, the model configuration and the vocabulary,
//! then a parameter blob per address in sorted order: address string, shape,
//! and the raw little-endian 32-bit floats, row-major. Trainability is
//! derived from the configuration's address layout on load. Round-trips are
//! bit-exact for f32 parameters.

use crate::data::Vocabulary;
use crate::error::{Error, Result};
use crate::model::{ModelConfig, ParamBank};
use crate::tensor::{Scalar, Tensor};
use std::io::{Read, Write};
use std::path::Path;

const MAGIC: &[u8; 8] = b"MCTCKPT1";
const FORMAT_VERSION: u32 = 1;

#[derive(serde::Serialize, serde::Deserialize)]
struct Header {
    format_version: u32,
    config: ModelConfig,
    vocab: Vec<String>,
}

/// Serialize a model checkpoint. Parameters of any scalar type are stored as
/// f32; saving an f32 bank is lossless.
pub fn save<F: Scalar>(
    path: &Path,
    config: &ModelConfig,
    vocab: &Vocabulary,
    bank: &ParamBank<F>,
) -> Result<()> {
    let header = Header {
        format_version: FORMAT_VERSION,
        config: config.clone(),
        vocab: vocab.tokens().to_vec(),
    };
    let header_bytes = serde_json::to_vec(&header)
        .map_err(|e| Error::Checkpoint(format!("header serialization: {e}")))?;
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    out.write_all(MAGIC)?;
    out.write_all(&(header_bytes.len() as u32).to_le_bytes())?;
    out.write_all(&header_bytes)?;
    out.write_all(&(bank.len() as u32).to_le_bytes())?;
    for (addr, param) in bank.iter() {
        let addr_bytes = addr.as_bytes();
        out.write_all(&(addr_bytes.len() as u32).to_le_bytes())?;
        out.write_all(addr_bytes)?;
        let shape = param.tensor.shape();
        out.write_all(&(shape.len() as u32).to_le_bytes())?;
        for &dim in shape {
            out.write_all(&(dim as u64).to_le_bytes())?;
        }
        for v in param.tensor.data() {
            out.write_all(&(v.to_f64().unwrap() as f32).to_le_bytes())?;
        }
    }
    Ok(())
}

fn read_exact(r: &mut impl Read, buf: &mut [u8], what: &str) -> Result<()> {
    r.read_exact(buf).map_err(|_| Error::Checkpoint(format!("truncated file while reading {what}")))
}

fn read_u32(r: &mut impl Read, what: &str) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b, what)?;
    Ok(u32::from_le_bytes(b))
}

/// Deserialize a checkpoint into the requested scalar type.
pub fn load<F: Scalar>(path: &Path) -> Result<(ModelConfig, Vocabulary, ParamBank<F>)> {
    let mut file = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut magic = [0u8; 8];
    read_exact(&mut file, &mut magic, "magic")?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint("not a checkpoint file (bad magic)".into()));
    }
    let header_len = read_u32(&mut file, "header length")? as usize;
    let mut header_bytes = vec![0u8; header_len];
    read_exact(&mut file, &mut header_bytes, "header")?;
    let header: Header = serde_json::from_slice(&header_bytes)
        .map_err(|e| Error::Checkpoint(format!("header parse: {e}")))?;
    if header.format_version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported format version {}",
            header.format_version
        )));
    }
    let vocab = Vocabulary::from_tokens(header.vocab)?;
    let trainability: std::collections::HashMap<String, bool> =
        crate::model::address_layout(&header.config)
            .into_iter()
            .map(|(addr, _, kind)| (addr, kind.trainable()))
            .collect();
    let n_blobs = read_u32(&mut file, "blob count")? as usize;
    let mut bank = ParamBank::new();
    for _ in 0..n_blobs {
        let addr_len = read_u32(&mut file, "address length")? as usize;
        let mut addr_bytes = vec![0u8; addr_len];
        read_exact(&mut file, &mut addr_bytes, "address")?;
        let addr = String::from_utf8(addr_bytes)
            .map_err(|_| Error::Checkpoint("non-utf8 parameter address".into()))?;
        let trainable = *trainability
            .get(&addr)
            .ok_or_else(|| Error::Checkpoint(format!("unexpected parameter {addr:?}")))?;
        let ndim = read_u32(&mut file, "rank")? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            let mut b = [0u8; 8];
            read_exact(&mut file, &mut b, "dimension")?;
            shape.push(u64::from_le_bytes(b) as usize);
        }
        let numel: usize = shape.iter().product();
        let mut data_bytes = vec![0u8; numel * 4];
        read_exact(&mut file, &mut data_bytes, &format!("data of {addr}"))?;
        let data: Vec<F> = data_bytes
            .chunks_exact(4)
            .map(|c| {
                crate::tensor::cast::<F>(
                    f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64
                )
            })
            .collect();
        bank.insert(addr, Tensor::new(shape, data)?, trainable);
    }
    Ok((header.config, vocab, bank))
}
