//! Condition fidelity: re-derive the condition from a generated image and
//! compare it with the condition that drove the sampler.

use std::fmt;

use crate::config::Config;
use crate::control::{ControlInput, UniControl};
use crate::datagen::filters::{canny, label_boundaries, luma};
use crate::datagen::{boxes_outline, scene::boxes_of_labels, Dataset, PALETTE, SEG_COLORS};
use crate::diffusion::ddim_sample;
use crate::error::{Error, Result};
use crate::grad::Tensor;
use crate::rng::derive_seed;
use crate::tasks::{self, embedding_tensor, encode_text};

/// Fixed thresholds used when re-deriving edges from samples.
pub const EVAL_CANNY: (f64, f64) = (0.125, 0.35);

const SAMPLE_CHUNK: usize = 16;

fn nearest(colors: &[[f32; 3]], px: [f32; 3]) -> u8 {
    let d = |c: &[f32; 3]| (0..3).map(|k| (c[k] - px[k]).powi(2)).sum::<f32>();
    let mut best = 0;
    for (i, c) in colors.iter().enumerate() {
        if d(c) < d(&colors[best]) {
            best = i;
        }
    }
    best as u8
}

fn pixels(t: &Tensor) -> impl Iterator<Item = [f32; 3]> + '_ {
    let n = t.shape()[1] * t.shape()[2];
    let d = t.data();
    (0..n).map(move |i| [d[i], d[n + i], d[2 * n + i]])
}

/// Nearest palette color per pixel.
pub fn quantize(image: &Tensor) -> Vec<u8> {
    let pal: Vec<[f32; 3]> = PALETTE.iter().map(|p| p.1).collect();
    pixels(image).map(|p| nearest(&pal, p)).collect()
}

fn binary(cond: &Tensor) -> Vec<u8> {
    let n = cond.shape()[1] * cond.shape()[2];
    (0..n).map(|i| u8::from(cond.data()[i] > 0.0)).collect()
}

fn dilate(m: &[u8], size: usize) -> Vec<u8> {
    let s = size as isize;
    let mut out = vec![0u8; m.len()];
    for y in 0..s {
        for x in 0..s {
            if m[(y * s + x) as usize] == 0 {
                continue;
            }
            for dy in -1..=1 {
                for dx in -1..=1 {
                    let (xx, yy) = (x + dx, y + dy);
                    if (0..s).contains(&xx) && (0..s).contains(&yy) {
                        out[(yy * s + xx) as usize] = 1;
                    }
                }
            }
        }
    }
    out
}

/// IoU of two binary maps where a pixel counts as matched if the other map
/// has a set pixel within one step (8-neighbourhood). Two empty maps score 1.
pub fn edge_iou(a: &[u8], b: &[u8], size: usize) -> f64 {
    let na = a.iter().filter(|&&v| v != 0).count();
    let nb = b.iter().filter(|&&v| v != 0).count();
    if na + nb == 0 {
        return 1.0;
    }
    let (da, db) = (dilate(a, size), dilate(b, size));
    let hit = |m: &[u8], d: &[u8]| m.iter().zip(d).filter(|(&x, &y)| x != 0 && y != 0).count();
    let matched = hit(a, &db).min(hit(b, &da));
    matched as f64 / (na + nb - matched) as f64
}

/// Agreement in `[0, 1]` between `cond` and the same condition re-derived
/// from `image`. Both are `[3, S, S]`.
pub fn score_condition(task: &str, cond: &Tensor, image: &Tensor) -> Result<f64> {
    let spec = tasks::task(task)?;
    if cond.shape() != image.shape() || cond.shape().len() != 3 || cond.shape()[0] != 3 {
        return Err(Error::Shape {
            op: "score_condition",
            lhs: cond.shape().to_vec(),
            rhs: image.shape().to_vec(),
        });
    }
    let size = cond.shape()[1];
    let labels = quantize(image);
    let color_edges = || label_boundaries(&labels, size);
    Ok(match spec.key {
        "canny" => {
            let e = canny(&luma(image.data(), size), size, EVAL_CANNY.0, EVAL_CANNY.1);
            edge_iou(&e, &binary(cond), size)
        }
        "hed" | "hedsketch" | "pose" => edge_iou(&color_edges(), &binary(cond), size),
        "seg" => {
            let seg: Vec<u8> = pixels(cond).map(|p| nearest(&SEG_COLORS, p)).collect();
            edge_iou(&color_edges(), &label_boundaries(&seg, size), size)
        }
        "depth" | "normal" => {
            let keys: Vec<[u32; 3]> = pixels(cond).map(|p| p.map(f32::to_bits)).collect();
            edge_iou(&color_edges(), &label_boundaries(&keys, size), size)
        }
        "bbox" => {
            let bg = labels[0];
            // Relabel colors as 1.. so each color class gets one box.
            let mut map = [0u8; 8];
            let mut next = 0u8;
            let relabeled: Vec<u8> = labels
                .iter()
                .map(|&c| {
                    if c == bg {
                        return 0;
                    }
                    if map[c as usize] == 0 {
                        next += 1;
                        map[c as usize] = next;
                    }
                    map[c as usize]
                })
                .collect();
            let boxes = boxes_of_labels(&relabeled, size, next as usize);
            edge_iou(&boxes_outline(&boxes, size), &binary(cond), size)
        }
        "outpainting" => {
            let cq = quantize(cond);
            let keep: Vec<usize> = pixels(cond)
                .enumerate()
                .filter(|(_, p)| p.iter().any(|&v| v != 0.0))
                .map(|(i, _)| i)
                .collect();
            if keep.is_empty() {
                1.0
            } else {
                keep.iter().filter(|&&i| cq[i] == labels[i]).count() as f64 / keep.len() as f64
            }
        }
        other => unreachable!("registered task {other} without a score"),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct FidelityReport {
    pub task: String,
    pub samples: usize,
    pub conditional: f64,
    pub unconditional: f64,
}

impl fmt::Display for FidelityReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "task\tsamples\tconditional\tunconditional")?;
        writeln!(
            f,
            "{}\t{}\t{:.4}\t{:.4}",
            self.task, self.samples, self.conditional, self.unconditional
        )
    }
}

/// Mean scores of already generated samples.
pub fn fidelity_report(task: &str, conds: &[Tensor], cond_samples: &[Tensor], uncond_samples: &[Tensor]) -> Result<FidelityReport> {
    if conds.is_empty() || conds.len() != cond_samples.len() || conds.len() != uncond_samples.len() {
        return Err(Error::invalid("fidelity needs one conditional and one unconditional sample per condition"));
    }
    let mean = |samples: &[Tensor]| -> Result<f64> {
        let mut s = 0.0;
        for (c, x) in conds.iter().zip(samples) {
            s += score_condition(task, c, x)?;
        }
        Ok(s / conds.len() as f64)
    };
    Ok(FidelityReport {
        task: task.to_string(),
        samples: conds.len(),
        conditional: mean(cond_samples)?,
        unconditional: mean(uncond_samples)?,
    })
}

/// Sample `n` images conditioned on held-out records of `task` and the
/// same number from the base alone with the same prompts and noise, then
/// score both against the conditions.
pub fn eval_condition_fidelity(
    model: &UniControl,
    cfg: &Config,
    held_out: &Dataset,
    task: &str,
    n: usize,
    seed: u64,
) -> Result<FidelityReport> {
    let k = cfg.task_index(task)?;
    let part = held_out.partition(task);
    if part.is_empty() || n == 0 {
        return Err(Error::invalid(format!("no held-out records for task {task}")));
    }
    let schedule = cfg.schedule()?;
    let guidance = cfg.guidance();
    let instruction = embedding_tensor(&encode_text(tasks::instruction_for(task)?));
    let idx: Vec<usize> = (0..n).map(|i| part[i % part.len()]).collect();
    let mut conds = Vec::new();
    let mut with = Vec::new();
    let mut without = Vec::new();
    for (c, chunk) in idx.chunks(SAMPLE_CHUNK).enumerate() {
        let recs: Vec<_> = chunk.iter().map(|&i| &held_out.records[i]).collect();
        let cond = Tensor::stack(&recs.iter().map(|r| r.cond.clone()).collect::<Vec<_>>())?;
        let text: Vec<f32> = recs.iter().flat_map(|r| encode_text(&r.prompt)).collect();
        let text = Tensor::new(vec![recs.len(), tasks::EMBED_DIM], text)?;
        let shape = cond.shape().to_vec();
        let input = ControlInput::single(k, cond.clone(), instruction.clone());
        let s = derive_seed(seed, c as u64);
        with.extend(ddim_sample(model, &input, &text, &shape, &schedule, &guidance, s)?.unstack());
        without.extend(ddim_sample(&model.base_only(), &(), &text, &shape, &schedule, &guidance, s)?.unstack());
        conds.extend(cond.unstack());
    }
    fidelity_report(task, &conds, &with, &without)
}
