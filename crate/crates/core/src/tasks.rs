//! The task registry, the hashed bag-of-tokens text encoder, zero-shot
//! task weighting and hybrid-task composition.

use std::hash::Hasher;
use std::io::{Read, Write};

use fnv::FnvHasher;
use rand_core::{RngCore, SeedableRng};
use rand_xoshiro::SplitMix64;

use crate::error::{Error, Result};
use crate::grad::Tensor;
use crate::rng::box_muller;

pub const EMBED_DIM: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct TaskSpec {
    pub key: &'static str,
    pub instruction: &'static str,
    /// Condition image channels; every condition is rendered as RGB.
    pub cond_channels: usize,
    pub adapter_index: usize,
}

const fn spec(key: &'static str, instruction: &'static str, adapter_index: usize) -> TaskSpec {
    TaskSpec {
        key,
        instruction,
        cond_channels: 3,
        adapter_index,
    }
}

pub const REGISTRY: [TaskSpec; 9] = [
    spec("hed", "hed edge to image", 0),
    spec("canny", "canny edge to image", 1),
    spec("seg", "segmentation map to image", 2),
    spec("depth", "depth map to image", 3),
    spec("normal", "normal surface map to image", 4),
    spec("pose", "human pose skeleton to image", 5),
    spec("hedsketch", "sketch to image", 6),
    spec("bbox", "bounding box to image", 7),
    spec("outpainting", "image outpainting", 8),
];

pub fn registry() -> &'static [TaskSpec] {
    &REGISTRY
}

pub fn task(key: &str) -> Result<&'static TaskSpec> {
    REGISTRY
        .iter()
        .find(|t| t.key == key)
        .ok_or_else(|| Error::UnknownTask(key.to_string()))
}

pub fn instruction_for(key: &str) -> Result<&'static str> {
    Ok(task(key)?.instruction)
}

/// Parse a comma-separated task list, rejecting unknown and repeated keys.
pub fn parse_task_list(s: &str) -> Result<Vec<&'static TaskSpec>> {
    let mut out: Vec<&'static TaskSpec> = Vec::new();
    for key in s.split(',').map(str::trim).filter(|k| !k.is_empty()) {
        let t = task(key)?;
        if out.iter().any(|o| o.key == t.key) {
            return Err(Error::Config(format!("task {key} listed twice")));
        }
        out.push(t);
    }
    if out.is_empty() {
        return Err(Error::Config("empty task list".into()));
    }
    Ok(out)
}

/// One `key<TAB>instruction<TAB>channels<TAB>adapter` line per task.
pub fn registry_to_tsv(tasks: &[TaskSpec]) -> String {
    tasks
        .iter()
        .map(|t| format!("{}\t{}\t{}\t{}\n", t.key, t.instruction, t.cond_channels, t.adapter_index))
        .collect()
}

/// Inverse of [`registry_to_tsv`]; every line must match a registered task.
pub fn registry_from_tsv(s: &str) -> Result<Vec<TaskSpec>> {
    s.lines()
        .filter(|l| !l.is_empty())
        .map(|line| {
            let f: Vec<&str> = line.split('\t').collect();
            let [key, instr, ch, idx] = f.as_slice() else {
                return Err(Error::invalid(format!("registry line has {} fields: {line:?}", f.len())));
            };
            let t = *task(key)?;
            if t.instruction != *instr || t.cond_channels.to_string() != *ch || t.adapter_index.to_string() != *idx {
                return Err(Error::invalid(format!("registry line disagrees with task {key}: {line:?}")));
            }
            Ok(t)
        })
        .collect()
}

/// Deterministic unit-norm embedding; strings without tokens map to the
/// all-zero null embedding.
pub fn encode_text(s: &str) -> Vec<f32> {
    let lower = s.to_lowercase();
    let mut acc = [0f64; EMBED_DIM];
    let mut count = 0usize;
    for tok in lower.split_whitespace() {
        count += 1;
        let v = token_vector(tok);
        for (a, x) in acc.iter_mut().zip(v) {
            *a += x;
        }
    }
    if count == 0 {
        return vec![0.0; EMBED_DIM];
    }
    for a in &mut acc {
        *a /= count as f64;
    }
    normalize(&mut acc);
    acc.iter().map(|&x| x as f32).collect()
}

fn token_vector(tok: &str) -> [f64; EMBED_DIM] {
    let mut h = FnvHasher::default();
    h.write(tok.as_bytes());
    let mut stream = SplitMix64::seed_from_u64(h.finish());
    let mut v = [0f64; EMBED_DIM];
    for pair in v.chunks_mut(2) {
        let (a, b) = box_muller(stream.next_u64(), stream.next_u64());
        pair[0] = a;
        pair[1] = b;
    }
    normalize(&mut v);
    v
}

fn normalize(v: &mut [f64]) {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 {
        for x in v {
            *x /= n;
        }
    }
}

pub fn embedding_tensor(v: &[f32]) -> Tensor {
    Tensor::new(vec![v.len()], v.to_vec()).expect("1-d")
}

pub fn cosine(a: &[f32], b: &[f32]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(&x, &y)| x as f64 * y as f64).sum();
    let na = a.iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt();
    let nb = b.iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

/// How zero-shot task weights are chosen.
#[derive(Debug, Clone, PartialEq)]
pub enum WeightMode {
    /// Explicit per-task weights, one per task of the target list.
    Manual(Vec<f64>),
    /// Instruction-embedding similarity.
    Similarity,
}

impl WeightMode {
    pub fn parse(mode: &str, manual: Option<Vec<f64>>) -> Result<Self> {
        match (mode, manual) {
            ("manual", Some(w)) => Ok(Self::Manual(w)),
            ("manual", None) => Err(Error::invalid("manual mode needs weights")),
            ("similarity", _) => Ok(Self::Similarity),
            (other, _) => Err(Error::invalid(format!("unknown weighting mode {other:?}"))),
        }
    }
}

/// Nonnegative weights over `tasks` summing to 1. Manual weights are kept
/// as given when they already sum to 1 within 1e-6, otherwise rescaled.
/// Similarity weights are cosines to each task's instruction with
/// negatives clamped to zero, then rescaled.
pub fn estimate_task_weights(new_instruction: &str, mode: &WeightMode, tasks: &[TaskSpec]) -> Result<Vec<f64>> {
    let raw = match mode {
        WeightMode::Manual(w) => {
            if w.len() != tasks.len() {
                return Err(Error::invalid(format!(
                    "expected {} manual weights, got {}",
                    tasks.len(),
                    w.len()
                )));
            }
            if w.iter().any(|x| !x.is_finite() || *x < 0.0) {
                return Err(Error::invalid(format!("manual weights must be nonnegative: {w:?}")));
            }
            w.clone()
        }
        WeightMode::Similarity => {
            let e = encode_text(new_instruction);
            tasks
                .iter()
                .map(|t| cosine(&e, &encode_text(t.instruction)).max(0.0))
                .collect()
        }
    };
    let s: f64 = raw.iter().sum();
    if s <= 0.0 {
        return Err(Error::invalid("task weights are all zero"));
    }
    if (s - 1.0).abs() <= 1e-6 {
        return Ok(raw);
    }
    Ok(raw.into_iter().map(|x| x / s).collect())
}

/// Parse `key=value,...` into weights aligned with `tasks`; absent keys get 0.
pub fn parse_weight_spec(s: &str, tasks: &[TaskSpec]) -> Result<Vec<f64>> {
    let mut w = vec![0.0; tasks.len()];
    for item in s.split(',').map(str::trim).filter(|i| !i.is_empty()) {
        let (k, v) = item
            .split_once('=')
            .ok_or_else(|| Error::invalid(format!("weight entry {item:?} is not key=value")))?;
        task(k)?;
        let i = tasks
            .iter()
            .position(|t| t.key == k)
            .ok_or_else(|| Error::invalid(format!("task {k} has no adapter in this model")))?;
        w[i] = v
            .parse()
            .map_err(|_| Error::invalid(format!("weight for {k} is not a number: {v:?}")))?;
    }
    Ok(w)
}

/// Noun phrase a task contributes to a combined instruction.
pub fn hybrid_phrase(key: &str) -> Result<&'static str> {
    let t = task(key)?;
    Ok(match key {
        "pose" => "human skeleton",
        _ => t.instruction.strip_suffix(" to image").unwrap_or(t.instruction),
    })
}

/// Model inputs for simultaneous conditioning on two tasks.
#[derive(Debug, Clone, PartialEq)]
pub struct HybridInputs {
    pub instruction: String,
    pub prompt: String,
    /// `(task key, weight, condition)` per adapter branch.
    pub branches: Vec<(&'static str, f64, Tensor)>,
}

pub fn compose_hybrid(task_a: &str, cond_a: &Tensor, task_b: &str, cond_b: &Tensor, prompt: &str) -> Result<HybridInputs> {
    let (a, b) = (task(task_a)?, task(task_b)?);
    if cond_a.shape() != cond_b.shape() {
        return Err(Error::Shape {
            op: "compose_hybrid",
            lhs: cond_a.shape().to_vec(),
            rhs: cond_b.shape().to_vec(),
        });
    }
    Ok(HybridInputs {
        instruction: format!("{} and {} to image", hybrid_phrase(a.key)?, hybrid_phrase(b.key)?),
        prompt: format!("{prompt} background foreground"),
        branches: vec![(a.key, 0.5, cond_a.clone()), (b.key, 0.5, cond_b.clone())],
    })
}

/// Write `(key length u32, key, EMBED_DIM f32)` records, little endian.
pub fn write_embedding_table(w: &mut impl Write, tasks: &[TaskSpec]) -> std::io::Result<()> {
    for t in tasks {
        w.write_all(&(t.key.len() as u32).to_le_bytes())?;
        w.write_all(t.key.as_bytes())?;
        for x in encode_text(t.instruction) {
            w.write_all(&x.to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn read_embedding_table(r: &mut impl Read) -> Result<Vec<(String, Vec<f32>)>> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)
        .map_err(|e| Error::invalid(format!("reading embedding table: {e}")))?;
    let mut out = Vec::new();
    let mut pos = 0usize;
    let err = |pos: usize, msg: &str| Error::Format {
        what: "embedding table",
        offset: pos as u64,
        msg: msg.to_string(),
    };
    while pos < bytes.len() {
        let len_bytes = bytes.get(pos..pos + 4).ok_or_else(|| err(pos, "truncated key length"))?;
        let len = u32::from_le_bytes(len_bytes.try_into().expect("4 bytes")) as usize;
        pos += 4;
        let key = bytes.get(pos..pos + len).ok_or_else(|| err(pos, "truncated key"))?;
        let key = String::from_utf8(key.to_vec()).map_err(|_| err(pos, "key is not UTF-8"))?;
        pos += len;
        let body = bytes
            .get(pos..pos + 4 * EMBED_DIM)
            .ok_or_else(|| err(pos, "truncated embedding"))?;
        let v = body
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        pos += 4 * EMBED_DIM;
        out.push((key, v));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn null_embedding() {
        assert!(encode_text("").iter().all(|&x| x == 0.0));
        assert!(encode_text("   ").iter().all(|&x| x == 0.0));
    }

    #[test]
    fn case_insensitive() {
        assert_eq!(encode_text("Canny Edge"), encode_text("canny  edge"));
    }

    #[test]
    fn hybrid_phrases() {
        assert_eq!(hybrid_phrase("seg").unwrap(), "segmentation map");
        assert_eq!(hybrid_phrase("outpainting").unwrap(), "image outpainting");
    }
}
