//! Versioned binary checkpoint format.
//!
//! Layout (all integers little-endian):
//! ```text
//! magic "CHRF" | u32 version | u64 config_len | config JSON |
//! u64 tensor_count | { u64 name_len | name | u64 rows | u64 cols |
//! rows*cols f64 } ... | u32 crc32
//! ```
//! The CRC32 (IEEE) trailer covers every preceding byte. Loading a file
//! with a different version or a failed checksum is an explicit error, and
//! `load(save(x))` is bit-identical.

use super::{ModelConfig, ModelParams};
use crate::error::{Error, Result};
use crate::numeric::Tensor;
use std::io::{Read, Write};
use std::path::Path;

pub const CHECKPOINT_VERSION: u32 = 1;
const MAGIC: &[u8; 4] = b"CHRF";

fn crc32(bytes: &[u8]) -> u32 {
    // IEEE 802.3 polynomial, table-driven
    let mut table = [0u32; 256];
    for (i, entry) in table.iter_mut().enumerate() {
        let mut c = i as u32;
        for _ in 0..8 {
            c = if c & 1 != 0 { 0xedb8_8320 ^ (c >> 1) } else { c >> 1 };
        }
        *entry = c;
    }
    let mut crc = 0xffff_ffffu32;
    for &b in bytes {
        crc = table[((crc ^ b as u32) & 0xff) as usize] ^ (crc >> 8);
    }
    crc ^ 0xffff_ffff
}

pub fn save_checkpoint(
    path: impl AsRef<Path>,
    config: &ModelConfig,
    params: &ModelParams,
) -> Result<()> {
    let mut buf: Vec<u8> = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    let config_json = serde_json::to_vec(config)?;
    buf.extend_from_slice(&(config_json.len() as u64).to_le_bytes());
    buf.extend_from_slice(&config_json);
    buf.extend_from_slice(&(params.set.len() as u64).to_le_bytes());
    for (name, tensor) in params.set.iter() {
        buf.extend_from_slice(&(name.len() as u64).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.extend_from_slice(&(tensor.rows as u64).to_le_bytes());
        buf.extend_from_slice(&(tensor.cols as u64).to_le_bytes());
        for &v in &tensor.data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let crc = crc32(&buf);
    buf.extend_from_slice(&crc.to_le_bytes());
    let mut file = std::fs::File::create(path)?;
    file.write_all(&buf)?;
    Ok(())
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Checkpoint("truncated checkpoint file".into()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<(ModelConfig, ModelParams)> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    if bytes.len() < 4 + 4 + 4 {
        return Err(Error::Checkpoint("file too short".into()));
    }
    let (body, trailer) = bytes.split_at(bytes.len() - 4);
    let stored_crc = u32::from_le_bytes(trailer.try_into().unwrap());
    let actual_crc = crc32(body);
    if stored_crc != actual_crc {
        return Err(Error::Checkpoint(format!(
            "checksum mismatch: stored {stored_crc:#010x}, computed {actual_crc:#010x}"
        )));
    }

    let mut cur = Cursor { bytes: body, pos: 0 };
    if cur.take(4)? != MAGIC {
        return Err(Error::Checkpoint("bad magic, not a checkpoint file".into()));
    }
    let version = cur.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!(
            "version mismatch: file has {version}, this build reads {CHECKPOINT_VERSION}"
        )));
    }
    let config_len = cur.u64()? as usize;
    let config: ModelConfig = serde_json::from_slice(cur.take(config_len)?)?;
    config.validate()?;

    let mut params = ModelParams::init(&config)?;
    let count = cur.u64()? as usize;
    if count != params.set.len() {
        return Err(Error::Checkpoint(format!(
            "tensor count mismatch: file has {count}, config implies {}",
            params.set.len()
        )));
    }
    for _ in 0..count {
        let name_len = cur.u64()? as usize;
        let name = String::from_utf8(cur.take(name_len)?.to_vec())
            .map_err(|_| Error::Checkpoint("non-utf8 tensor name".into()))?;
        let rows = cur.u64()? as usize;
        let cols = cur.u64()? as usize;
        let slot = params
            .set
            .slot_of(&name)
            .ok_or_else(|| Error::Checkpoint(format!("unknown tensor '{name}'")))?;
        let expect = params.set.get(slot);
        if (expect.rows, expect.cols) != (rows, cols) {
            return Err(Error::Checkpoint(format!(
                "tensor '{name}' has shape {rows}x{cols}, config implies {}x{}",
                expect.rows, expect.cols
            )));
        }
        let raw = cur.take(rows * cols * 8)?;
        let data: Vec<f64> = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        *params.set.get_mut(slot) = Tensor::from_vec(rows, cols, data);
    }
    if cur.pos != body.len() {
        return Err(Error::Checkpoint("trailing bytes after tensors".into()));
    }
    Ok((config, params))
}

#[cfg(test)]
mod tests {
    use super::super::tests::{toy_config, toy_sequence};
    use super::super::{forward, ModelParams};
    use super::*;
    use crate::attention::TraceMode;
    use crate::numeric::{ParamBinding, Tape};

    #[test]
    fn roundtrip_is_bit_identical() {
        let config = toy_config(6);
        let params = ModelParams::init(&config).unwrap();
        let f = tempfile::NamedTempFile::new().unwrap();
        save_checkpoint(f.path(), &config, &params).unwrap();
        let (config2, params2) = load_checkpoint(f.path()).unwrap();
        assert_eq!(config, config2);
        assert_eq!(params.set, params2.set);

        // save again: files byte-identical
        let f2 = tempfile::NamedTempFile::new().unwrap();
        save_checkpoint(f2.path(), &config2, &params2).unwrap();
        assert_eq!(
            std::fs::read(f.path()).unwrap(),
            std::fs::read(f2.path()).unwrap()
        );
    }

    #[test]
    fn forward_identical_before_and_after_roundtrip() {
        let config = toy_config(6);
        let params = ModelParams::init(&config).unwrap();
        let feats = toy_sequence(&[(1.0, 2), (5.0, 3), (30.0, 4)]);
        let run = |p: &ModelParams| {
            let mut tape = Tape::new();
            let mut binding = ParamBinding::for_params(&p.set);
            let out = forward(&mut tape, &mut binding, p, &config, &feats, None, TraceMode::Off)
                .unwrap();
            tape.values(out.sequence_vector).to_vec()
        };
        let before = run(&params);
        let f = tempfile::NamedTempFile::new().unwrap();
        save_checkpoint(f.path(), &config, &params).unwrap();
        let (_, params2) = load_checkpoint(f.path()).unwrap();
        assert_eq!(before, run(&params2));
    }

    #[test]
    fn corrupt_byte_fails_checksum() {
        let config = toy_config(6);
        let params = ModelParams::init(&config).unwrap();
        let f = tempfile::NamedTempFile::new().unwrap();
        save_checkpoint(f.path(), &config, &params).unwrap();
        let mut bytes = std::fs::read(f.path()).unwrap();
        let mid = bytes.len() / 2;
        bytes[mid] ^= 0xff;
        std::fs::write(f.path(), &bytes).unwrap();
        match load_checkpoint(f.path()) {
            Err(Error::Checkpoint(msg)) => assert!(msg.contains("checksum"), "{msg}"),
            other => panic!("expected checksum error, got {other:?}"),
        }
    }

    #[test]
    fn version_mismatch_is_named() {
        let config = toy_config(6);
        let params = ModelParams::init(&config).unwrap();
        let f = tempfile::NamedTempFile::new().unwrap();
        save_checkpoint(f.path(), &config, &params).unwrap();
        let mut bytes = std::fs::read(f.path()).unwrap();
        bytes[4..8].copy_from_slice(&99u32.to_le_bytes());
        // refresh the checksum so only the version differs
        let body_len = bytes.len() - 4;
        let crc = super::crc32(&bytes[..body_len]);
        bytes[body_len..].copy_from_slice(&crc.to_le_bytes());
        std::fs::write(f.path(), &bytes).unwrap();
        match load_checkpoint(f.path()) {
            Err(Error::Checkpoint(msg)) => assert!(msg.contains("version"), "{msg}"),
            other => panic!("expected version error, got {other:?}"),
        }
    }

    #[test]
    fn vocab_size_mismatch_is_named() {
        let config = toy_config(6);
        let mut vocab = crate::events::Vocabulary::new();
        vocab.intern("ONLY"); // size 3, config says 6
        match super::super::validate_vocab(&config, &vocab) {
            Err(Error::Checkpoint(msg)) => assert!(msg.contains("vocabulary size"), "{msg}"),
            other => panic!("expected vocab mismatch, got {other:?}"),
        }
    }
}
