//! Binary checkpoint files.
//!
//! Layout, all integers and floats little-endian:
//!
//! ```text
//! "GTCKPT01"                       8-byte magic, last two bytes are the version
//! u64 length + UTF-8               architecture text (ArchitectureSpec::to_text)
//! f64 × count_params               per convolution: weights, then bias if any
//! f64 × count_gains                per gain-tunable convolution, in layer order
//! u64 length + UTF-8               metadata, one `key=value` per line
//! ```

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::models::{ArchitectureSpec, GainSet, Network, ParamSet};

pub const MAGIC_PREFIX: &[u8; 6] = b"GTCKPT";
pub const VERSION: &[u8; 2] = b"01";

/// Ordered `key=value` provenance entries.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Metadata {
    entries: Vec<(String, String)>,
}

impl Metadata {
    pub fn new() -> Self {
        Self::default()
    }

    /// Sets `key`, replacing an existing value in place.
    pub fn set(&mut self, key: &str, value: impl ToString) {
        let value = value.to_string();
        debug_assert!(!key.contains(['=', '\n']) && !value.contains('\n'));
        match self.entries.iter_mut().find(|(k, _)| k == key) {
            Some(e) => e.1 = value,
            None => self.entries.push((key.to_string(), value)),
        }
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }

    pub fn entries(&self) -> &[(String, String)] {
        &self.entries
    }

    fn to_text(&self) -> String {
        self.entries
            .iter()
            .map(|(k, v)| format!("{k}={v}\n"))
            .collect()
    }

    fn from_text(text: &str) -> Result<Self> {
        let mut entries = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let (k, v) = line.split_once('=').ok_or_else(|| Error::Config {
                line: i + 1,
                reason: format!("metadata line without '=': {line:?}"),
            })?;
            entries.push((k.to_string(), v.to_string()));
        }
        Ok(Metadata { entries })
    }
}

/// A serialized network plus provenance.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub network: Network<f64>,
    pub metadata: Metadata,
}

impl Checkpoint {
    pub fn new(network: Network<f64>, metadata: Metadata) -> Self {
        Checkpoint { network, metadata }
    }

    pub fn spec(&self) -> &ArchitectureSpec {
        &self.network.spec
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC_PREFIX);
        out.extend_from_slice(VERSION);
        write_block(&mut out, self.network.spec.to_text().as_bytes());
        write_params(&mut out, &self.network.params);
        write_gains(&mut out, &self.network.gains);
        write_block(&mut out, self.metadata.to_text().as_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let mut r = Reader {
            bytes,
            at: 0,
            path,
        };
        let magic = r.take(8, "magic")?;
        if &magic[..6] != MAGIC_PREFIX {
            return Err(Error::BadMagic(path.to_path_buf()));
        }
        if &magic[6..] != VERSION {
            return Err(Error::VersionMismatch {
                found: String::from_utf8_lossy(&magic[6..]).into_owned(),
                expected: String::from_utf8_lossy(VERSION).into_owned(),
            });
        }
        let arch_text = r.block("architecture")?;
        let spec = ArchitectureSpec::from_text(&arch_text)?;
        let (mut params, mut gains) = crate::models::build::<f64>(&spec, &mut crate::rng::RngStream::new(0))?;
        let pv = r.f64s(params.len(), "parameters")?;
        params.assign(&pv)?;
        let gv = r.f64s(gains.len(), "gains")?;
        gains.assign(&gv)?;
        let meta_text = r.block("metadata")?;
        let metadata = Metadata::from_text(&meta_text)?;
        if r.at != bytes.len() {
            return Err(Error::MalformedHeader {
                path: path.to_path_buf(),
                reason: format!("{} trailing bytes", bytes.len() - r.at),
            });
        }
        Ok(Checkpoint {
            network: Network::new(spec, params, gains)?,
            metadata,
        })
    }

    /// Byte range of the parameter section in [`Self::to_bytes`] output.
    pub fn param_section(bytes: &[u8]) -> Option<&[u8]> {
        let arch_len = u64::from_le_bytes(bytes.get(8..16)?.try_into().ok()?) as usize;
        let start = 16 + arch_len;
        let spec = ArchitectureSpec::from_text(std::str::from_utf8(bytes.get(16..start)?).ok()?).ok()?;
        bytes.get(start..start + 8 * spec.count_params())
    }
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, ckpt.to_bytes()).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::from_bytes(&bytes, path)
}

fn write_block(out: &mut Vec<u8>, block: &[u8]) {
    out.extend_from_slice(&(block.len() as u64).to_le_bytes());
    out.extend_from_slice(block);
}

fn write_params(out: &mut Vec<u8>, params: &ParamSet<f64>) {
    for v in params.flatten() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

fn write_gains(out: &mut Vec<u8>, gains: &GainSet<f64>) {
    for v in gains.flatten() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.at.checked_add(n).filter(|&e| e <= self.bytes.len());
        let Some(end) = end else {
            return Err(Error::Truncated {
                path: self.path.to_path_buf(),
                what: format!("{what}: need {n} bytes at offset {}", self.at),
            });
        };
        let s = &self.bytes[self.at..end];
        self.at = end;
        Ok(s)
    }

    fn block(&mut self, what: &str) -> Result<String> {
        let len = u64::from_le_bytes(self.take(8, what)?.try_into().unwrap());
        let raw = self.take(len as usize, what)?;
        String::from_utf8(raw.to_vec()).map_err(|_| Error::MalformedHeader {
            path: self.path.to_path_buf(),
            reason: format!("{what} block is not UTF-8"),
        })
    }

    fn f64s(&mut self, n: usize, what: &str) -> Result<Vec<f64>> {
        let raw = self.take(n * 8, what)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::preset;
    use crate::rng::RngStream;

    fn sample() -> Checkpoint {
        let mut net = Network::init(preset("dncnn-s", 4, 8).unwrap(), &mut RngStream::new(3)).unwrap();
        net.gains.layers[1].as_mut().unwrap().data_mut()[2] = 1.25;
        let mut meta = Metadata::new();
        meta.set("seed", 3);
        meta.set("sigma255_range", "0..30");
        Checkpoint::new(net, meta)
    }

    #[test]
    fn bytes_round_trip_exactly() {
        let ck = sample();
        let bytes = ck.to_bytes();
        let back = Checkpoint::from_bytes(&bytes, Path::new("mem")).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.to_bytes(), bytes);
    }

    #[test]
    fn distinct_errors() {
        let bytes = sample().to_bytes();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(
            Checkpoint::from_bytes(&bad, Path::new("m")),
            Err(Error::BadMagic(_))
        ));
        let mut v2 = bytes.clone();
        v2[7] = b'2';
        assert!(matches!(
            Checkpoint::from_bytes(&v2, Path::new("m")),
            Err(Error::VersionMismatch { .. })
        ));
        assert!(matches!(
            Checkpoint::from_bytes(&bytes[..bytes.len() - 5], Path::new("m")),
            Err(Error::Truncated { .. })
        ));
        assert!(matches!(
            Checkpoint::from_bytes(&bytes[..100], Path::new("m")),
            Err(Error::Truncated { .. })
        ));
    }

    #[test]
    fn param_section_has_param_bytes() {
        let ck = sample();
        let bytes = ck.to_bytes();
        let sec = Checkpoint::param_section(&bytes).unwrap();
        assert_eq!(sec.len(), 8 * ck.spec().count_params());
        assert_eq!(&sec[..8], &ck.network.params.convs[0].weights.data()[0].to_le_bytes());
    }
}
