//! Versioned model file.
//!
//! Layout, little-endian throughout:
//!
//! | bytes | field                                             |
//! |-------|---------------------------------------------------|
//! | 4     | magic `BNET`                                      |
//! | 4     | format version (`u32`)                            |
//! | 4     | length of the network text (`u32`)                |
//! | n     | network sections of the config format (UTF-8)    |
//! | 8     | payload length in bytes (`u64`)                   |
//! | 4·P   | parameters as `f32`, in store declaration order   |
//! | 4     | CRC-32 of the payload                             |

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::config::{network_to_text, parse_network};
use crate::error::{Error, ModelFileError, Result};
use crate::graph::Network;
use crate::params::{ParameterStore, Precision};
use crate::tensor::Tensor;

pub const MAGIC: [u8; 4] = *b"BNET";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone)]
pub struct LoadedModel {
    pub network: Network,
    pub params: ParameterStore,
    /// `false` when the stored checksum does not match the payload read.
    pub checksum_ok: bool,
}

pub fn encode_model(net: &Network, params: &ParameterStore) -> Result<Vec<u8>> {
    net.check_params(params)?;
    let text = network_to_text(net.spec());
    let mut payload = Vec::with_capacity(params.numel() * 4);
    for p in params.iter() {
        for &v in p.value.data() {
            payload.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    let mut out = Vec::with_capacity(payload.len() + text.len() + 32);
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(text.len() as u32).to_le_bytes());
    out.extend_from_slice(text.as_bytes());
    out.extend_from_slice(&(payload.len() as u64).to_le_bytes());
    out.extend_from_slice(&payload);
    out.extend_from_slice(&crc32fast::hash(&payload).to_le_bytes());
    Ok(out)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8], ModelFileError> {
        if self.bytes.len() - self.pos < n {
            return Err(ModelFileError::Truncated(what));
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u32(&mut self, what: &'static str) -> Result<u32, ModelFileError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &'static str) -> Result<u64, ModelFileError> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }
}

pub fn decode_model(bytes: &[u8]) -> Result<LoadedModel> {
    let mut c = Cursor { bytes, pos: 0 };
    let magic: [u8; 4] = c.take(4, "magic")?.try_into().expect("4 bytes");
    if magic != MAGIC {
        return Err(ModelFileError::BadMagic(magic).into());
    }
    let version = c.u32("version")?;
    if version != FORMAT_VERSION {
        return Err(ModelFileError::UnsupportedVersion {
            found: version,
            supported: FORMAT_VERSION,
        }
        .into());
    }
    let text_len = c.u32("network length")? as usize;
    let text = std::str::from_utf8(c.take(text_len, "network description")?)
        .map_err(|e| ModelFileError::Spec(e.to_string()))?;
    let spec = parse_network(text).map_err(|e| ModelFileError::Spec(e.to_string()))?;
    let network = Network::new(spec).map_err(|e| ModelFileError::Spec(e.to_string()))?;

    let expected: u64 = network
        .param_decls()
        .iter()
        .map(|d| d.dims.iter().product::<usize>() as u64 * 4)
        .sum();
    let payload_len = c.u64("payload length")?;
    if payload_len != expected {
        return Err(ModelFileError::PayloadLength {
            expected,
            found: payload_len,
        }
        .into());
    }
    let payload = c.take(payload_len as usize, "payload")?;
    let stored = c.u32("checksum")?;
    let checksum_ok = stored == crc32fast::hash(payload);

    let mut params = ParameterStore::new(Precision::Single);
    let mut floats = payload
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")) as f64);
    for d in network.param_decls() {
        let n: usize = d.dims.iter().product();
        let data: Vec<f64> = floats.by_ref().take(n).collect();
        params.add(d.name.clone(), Tensor::new(d.dims.clone(), data)?)?;
    }
    Ok(LoadedModel {
        network,
        params,
        checksum_ok,
    })
}

/// Writes the model next to `path` and renames it into place, so a failed
/// save never leaves a partial file behind.
pub fn save_model(path: &Path, net: &Network, params: &ParameterStore) -> Result<()> {
    let bytes = encode_model(net, params)?;
    write_atomic(path, &bytes)
}

pub fn load_model(path: &Path) -> Result<LoadedModel> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_model(&bytes)
}

/// Write-then-rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp_name = path.file_name().unwrap_or_default().to_os_string();
    tmp_name.push(".partial");
    let tmp = path.with_file_name(tmp_name);
    let result = (|| {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    })();
    if let Err(e) = result {
        let _ = fs::remove_file(&tmp);
        return Err(Error::io(path, e));
    }
    Ok(())
}
