//! Dataset record files and the manifest that indexes them.

use std::fs;
use std::path::{Path, PathBuf};

use super::{generate_sample, sample_seed, ConditionConfig};
use crate::error::{Error, Result};
use crate::grad::Tensor;
use crate::tasks::TaskSpec;

pub const RECORD_MAGIC: &[u8; 4] = b"UCDS";
pub const RECORD_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.tsv";

#[derive(Debug, Clone, PartialEq)]
pub struct Record {
    pub prompt: String,
    pub task: String,
    pub image: Tensor,
    pub cond: Tensor,
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    put_u32(out, s.len() as u32);
    out.extend_from_slice(s.as_bytes());
}

fn put_tensor(out: &mut Vec<u8>, t: &Tensor) {
    put_u32(out, t.shape().len() as u32);
    for &e in t.shape() {
        put_u32(out, e as u32);
    }
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

impl Record {
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(32 + 4 * (self.image.numel() + self.cond.numel()));
        out.extend_from_slice(RECORD_MAGIC);
        put_u32(&mut out, RECORD_VERSION);
        put_str(&mut out, &self.prompt);
        put_str(&mut out, &self.task);
        put_tensor(&mut out, &self.image);
        put_tensor(&mut out, &self.cond);
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != RECORD_MAGIC {
            return Err(r.err(0, "bad magic"));
        }
        let version = r.u32()?;
        if version != RECORD_VERSION {
            return Err(r.err(4, &format!("unsupported version {version}")));
        }
        let prompt = r.string()?;
        let task = r.string()?;
        let image = r.tensor()?;
        let cond = r.tensor()?;
        if r.pos != bytes.len() {
            return Err(r.err(r.pos, "trailing bytes"));
        }
        Ok(Self {
            prompt,
            task,
            image,
            cond,
        })
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn err(&self, offset: usize, msg: &str) -> Error {
        Error::Format {
            what: "dataset record",
            offset: offset as u64,
            msg: msg.to_string(),
        }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let s = self
            .bytes
            .get(self.pos..self.pos + n)
            .ok_or_else(|| self.err(self.pos, "truncated"))?;
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        let at = self.pos;
        let b = self.take(n)?;
        String::from_utf8(b.to_vec()).map_err(|_| self.err(at, "string is not UTF-8"))
    }

    fn tensor(&mut self) -> Result<Tensor> {
        let at = self.pos;
        let rank = self.u32()? as usize;
        if rank > 8 {
            return Err(self.err(at, &format!("implausible rank {rank}")));
        }
        let shape: Vec<usize> = (0..rank).map(|_| self.u32().map(|v| v as usize)).collect::<Result<_>>()?;
        let n: usize = shape.iter().product();
        let data = self
            .take(4 * n)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        Tensor::new(shape, data)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    pub index: usize,
    pub file: String,
    pub task: String,
    pub seed: u64,
    pub crc32: u32,
}

impl ManifestEntry {
    pub fn line(&self) -> String {
        format!("{}\t{}\t{}\t{}\t{:08x}", self.index, self.file, self.task, self.seed, self.crc32)
    }

    pub fn parse(line: &str) -> Result<Self> {
        let bad = || Error::invalid(format!("malformed manifest line {line:?}"));
        let f: Vec<&str> = line.split('\t').collect();
        let [index, file, task, seed, crc] = f.as_slice() else {
            return Err(bad());
        };
        Ok(Self {
            index: index.parse().map_err(|_| bad())?,
            file: file.to_string(),
            task: task.to_string(),
            seed: seed.parse().map_err(|_| bad())?,
            crc32: u32::from_str_radix(crc, 16).map_err(|_| bad())?,
        })
    }
}

fn thread_count() -> Option<usize> {
    std::env::var("UNICONTROL_THREADS")
        .ok()
        .and_then(|v| v.parse().ok())
        .filter(|&n: &usize| n > 0)
}

fn build_records(
    count: usize,
    seed: u64,
    task_list: &[TaskSpec],
    size: usize,
    cfg: &ConditionConfig,
) -> Result<Vec<Vec<(ManifestEntry, Vec<u8>)>>> {
    let one = |i: usize| -> Result<Vec<(ManifestEntry, Vec<u8>)>> {
        let s = sample_seed(seed, i);
        let sample = generate_sample(s, size, task_list, cfg)?;
        Ok(task_list
            .iter()
            .map(|t| {
                let bytes = Record {
                    prompt: sample.prompt.clone(),
                    task: t.key.to_string(),
                    image: sample.image.clone(),
                    cond: sample.conditions[t.key].clone(),
                }
                .encode();
                let entry = ManifestEntry {
                    index: i,
                    file: format!("{i:06}_{}.ucds", t.key),
                    task: t.key.to_string(),
                    seed: s,
                    crc32: crc32fast::hash(&bytes),
                };
                (entry, bytes)
            })
            .collect())
    };
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        let run = || (0..count).into_par_iter().map(one).collect::<Result<Vec<_>>>();
        match thread_count() {
            Some(n) => rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build()
                .map_err(|e| Error::Config(format!("thread pool: {e}")))?
                .install(run),
            None => run(),
        }
    }
    #[cfg(not(feature = "parallel"))]
    {
        let _ = thread_count();
        (0..count).map(one).collect()
    }
}

/// Write one record per `(sample, task)` plus `manifest.tsv` into
/// `out_dir`, creating it if needed.
pub fn write_dataset(
    out_dir: &Path,
    count: usize,
    seed: u64,
    task_list: &[TaskSpec],
    size: usize,
    cfg: &ConditionConfig,
) -> Result<Vec<ManifestEntry>> {
    cfg.canny.validate()?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut manifest = Vec::with_capacity(count * task_list.len());
    let mut text = String::new();
    for (entry, bytes) in build_records(count, seed, task_list, size, cfg)?.into_iter().flatten() {
        let path = out_dir.join(&entry.file);
        fs::write(&path, &bytes).map_err(|e| Error::io(&path, e))?;
        text.push_str(&entry.line());
        text.push('\n');
        manifest.push(entry);
    }
    let path = out_dir.join(MANIFEST_FILE);
    fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

/// Records of a dataset directory in manifest order.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub dir: PathBuf,
    pub entries: Vec<ManifestEntry>,
    pub records: Vec<Record>,
}

impl Dataset {
    /// Indices of the records for `task`.
    pub fn partition(&self, task: &str) -> Vec<usize> {
        self.records
            .iter()
            .enumerate()
            .filter(|(_, r)| r.task == task)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn image_size(&self) -> Option<usize> {
        self.records.first().map(|r| r.image.shape()[1])
    }
}

/// Load every record listed in the manifest, verifying checksums.
pub fn read_dataset(dir: &Path) -> Result<Dataset> {
    let mpath = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
    let mut entries = Vec::new();
    let mut records = Vec::new();
    for line in text.lines().filter(|l| !l.is_empty()) {
        let entry = ManifestEntry::parse(line)?;
        let path = dir.join(&entry.file);
        let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        let crc = crc32fast::hash(&bytes);
        if crc != entry.crc32 {
            return Err(Error::invalid(format!(
                "{}: checksum {crc:08x} does not match manifest {:08x}",
                path.display(),
                entry.crc32
            )));
        }
        let record = Record::decode(&bytes)?;
        if record.task != entry.task {
            return Err(Error::invalid(format!("{}: task disagrees with manifest", path.display())));
        }
        records.push(record);
        entries.push(entry);
    }
    Ok(Dataset {
        dir: dir.to_path_buf(),
        entries,
        records,
    })
}
