//! Binary checkpoint: header, tab-separated manifest, raw payload, CRC.
//!
//! ```text
//! "UCKP" | version u32 | manifest length u64 | manifest | payload | crc32(payload) u32
//! ```
//! Manifest lines are `name\tf32\trank\textents...\toffset` with offsets
//! relative to the payload start, plus metadata lines beginning with `@`.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::grad::Tensor;
use crate::params::ParamStore;

pub const MAGIC: &[u8; 4] = b"UCKP";
pub const VERSION: u32 = 1;
const HEADER: usize = 16;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: ParamStore,
    pub step: u64,
    /// Run configuration as ordered `(key, value)` pairs.
    pub config: Vec<(String, String)>,
    /// Seed that continues the training stream.
    pub rng_state: u64,
}

/// Where a tensor's payload lives, as listed in the manifest.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: u64,
}

fn fmt_err(offset: usize, msg: impl Into<String>) -> Error {
    Error::Format {
        what: "checkpoint",
        offset: offset as u64,
        msg: msg.into(),
    }
}

impl Checkpoint {
    /// Manifest entries in payload order.
    pub fn layout(&self) -> Vec<TensorEntry> {
        let mut offset = 0u64;
        self.params
            .iter()
            .map(|(name, t)| {
                let e = TensorEntry {
                    name: name.to_string(),
                    shape: t.shape().to_vec(),
                    offset,
                };
                offset += 4 * t.numel() as u64;
                e
            })
            .collect()
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut manifest = String::new();
        manifest.push_str(&format!("@step\t{}\n@rng\t{}\n", self.step, self.rng_state));
        for (k, v) in &self.config {
            if k.contains(['\t', '\n', '=']) || v.contains(['\t', '\n']) {
                return Err(Error::invalid(format!("config entry {k:?} cannot be stored")));
            }
            manifest.push_str(&format!("@config\t{k}={v}\n"));
        }
        for e in self.layout() {
            if e.name.contains(['\t', '\n']) || e.name.starts_with('@') {
                return Err(Error::invalid(format!("tensor name {:?} cannot be stored", e.name)));
            }
            manifest.push_str(&e.name);
            manifest.push_str(&format!("\tf32\t{}", e.shape.len()));
            for d in &e.shape {
                manifest.push_str(&format!("\t{d}"));
            }
            manifest.push_str(&format!("\t{}\n", e.offset));
        }
        let mut payload = Vec::with_capacity(4 * self.params.numel());
        for (_, t) in self.params.iter() {
            for v in t.data() {
                payload.extend_from_slice(&v.to_le_bytes());
            }
        }
        let mut out = Vec::with_capacity(HEADER + manifest.len() + payload.len() + 4);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(manifest.len() as u64).to_le_bytes());
        out.extend_from_slice(manifest.as_bytes());
        out.extend_from_slice(&payload);
        out.extend_from_slice(&crc32fast::hash(&payload).to_le_bytes());
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < HEADER {
            return Err(fmt_err(bytes.len(), "truncated header"));
        }
        if &bytes[0..4] != MAGIC {
            return Err(fmt_err(0, "bad magic"));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(fmt_err(4, format!("unsupported version {version}")));
        }
        let mlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let pstart = HEADER
            .checked_add(mlen)
            .filter(|&p| p <= bytes.len())
            .ok_or_else(|| fmt_err(8, "manifest length runs past end of file"))?;
        let manifest =
            std::str::from_utf8(&bytes[HEADER..pstart]).map_err(|e| fmt_err(HEADER + e.valid_up_to(), "manifest is not UTF-8"))?;
        if bytes.len() < pstart + 4 {
            return Err(fmt_err(bytes.len(), "truncated payload"));
        }
        let payload = &bytes[pstart..bytes.len() - 4];
        let stored = u32::from_le_bytes(bytes[bytes.len() - 4..].try_into().expect("4 bytes"));
        let crc = crc32fast::hash(payload);
        if crc != stored {
            return Err(fmt_err(bytes.len() - 4, format!("payload crc {crc:08x} != stored {stored:08x}")));
        }

        let mut ckpt = Checkpoint {
            params: ParamStore::new(),
            step: 0,
            config: Vec::new(),
            rng_state: 0,
        };
        let mut line_at = HEADER;
        let mut expected = 0u64;
        for line in manifest.split_terminator('\n') {
            let bad = |m: &str| fmt_err(line_at, format!("{m}: {line:?}"));
            let f: Vec<&str> = line.split('\t').collect();
            match f[0] {
                "@step" if f.len() == 2 => ckpt.step = f[1].parse().map_err(|_| bad("bad step"))?,
                "@rng" if f.len() == 2 => ckpt.rng_state = f[1].parse().map_err(|_| bad("bad rng state"))?,
                "@config" if f.len() == 2 => {
                    let (k, v) = f[1].split_once('=').ok_or_else(|| bad("bad config entry"))?;
                    ckpt.config.push((k.to_string(), v.to_string()));
                }
                name if !name.starts_with('@') && f.len() >= 4 => {
                    if f[1] != "f32" {
                        return Err(bad("unsupported dtype"));
                    }
                    let rank: usize = f[2].parse().map_err(|_| bad("bad rank"))?;
                    if f.len() != rank + 4 {
                        return Err(bad("field count disagrees with rank"));
                    }
                    let shape: Vec<usize> = f[3..3 + rank]
                        .iter()
                        .map(|d| d.parse().map_err(|_| bad("bad extent")))
                        .collect::<Result<_>>()?;
                    let offset: u64 = f[3 + rank].parse().map_err(|_| bad("bad offset"))?;
                    if offset != expected {
                        return Err(bad("offset breaks contiguous layout"));
                    }
                    let n: usize = shape.iter().product();
                    let start = offset as usize;
                    let chunk = payload
                        .get(start..start + 4 * n)
                        .ok_or_else(|| fmt_err(pstart + start, format!("payload of {name} truncated")))?;
                    let data = chunk
                        .chunks_exact(4)
                        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                        .collect();
                    ckpt.params.insert(name, Tensor::new(shape, data)?);
                    expected += 4 * n as u64;
                }
                _ => return Err(bad("unrecognised manifest line")),
            }
            line_at += line.len() + 1;
        }
        if expected as usize != payload.len() {
            return Err(fmt_err(pstart + expected as usize, "payload longer than manifest describes"));
        }
        Ok(ckpt)
    }

    pub fn config_text(&self) -> String {
        self.config.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    fs::write(path, ckpt.to_bytes()?).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::from_bytes(&bytes)
}
