//! Image and tensor files: binary P6 pixmaps for viewing and a raw
//! little-endian tensor format for exact comparisons.

use std::fs;
use std::path::Path;

use anyhow::{bail, ensure, Context, Result};
use unicontrol::datagen::record::{Record, RECORD_MAGIC};
use unicontrol::grad::Tensor;

pub const TENSOR_MAGIC: &[u8; 4] = b"UCTN";

fn to_byte(v: f32) -> u8 {
    (((v.clamp(-1.0, 1.0) + 1.0) * 0.5) * 255.0).round() as u8
}

/// Tile `[3, S, S]` images into a near-square grid, row major.
pub fn ppm_grid(images: &[Tensor]) -> Result<Vec<u8>> {
    ensure!(!images.is_empty(), "no images to write");
    let s = images[0].shape()[1];
    for im in images {
        ensure!(im.shape() == [3, s, s], "grid tiles must be [3, {s}, {s}], got {:?}", im.shape());
    }
    let cols = (images.len() as f64).sqrt().ceil() as usize;
    let rows = images.len().div_ceil(cols);
    let (w, h) = (cols * s, rows * s);
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    let header = out.len();
    out.resize(header + 3 * w * h, 0);
    for (i, im) in images.iter().enumerate() {
        let (r0, c0) = ((i / cols) * s, (i % cols) * s);
        let d = im.data();
        for y in 0..s {
            for x in 0..s {
                let px = header + 3 * ((r0 + y) * w + c0 + x);
                for c in 0..3 {
                    out[px + c] = to_byte(d[c * s * s + y * s + x]);
                }
            }
        }
    }
    Ok(out)
}

/// Parse a binary P6 pixmap into `[3, H, W]` with values in `[-1, 1]`.
pub fn read_ppm(bytes: &[u8]) -> Result<Tensor> {
    let mut fields = Vec::new();
    let mut pos = 2;
    ensure!(bytes.starts_with(b"P6"), "not a P6 pixmap");
    while fields.len() < 3 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if bytes.get(pos) == Some(&b'#') {
            while pos < bytes.len() && bytes[pos] != b'\n' {
                pos += 1;
            }
            continue;
        }
        let start = pos;
        while pos < bytes.len() && bytes[pos].is_ascii_digit() {
            pos += 1;
        }
        ensure!(pos > start, "malformed pixmap header");
        fields.push(std::str::from_utf8(&bytes[start..pos])?.parse::<usize>()?);
    }
    pos += 1;
    let [w, h, max] = [fields[0], fields[1], fields[2]];
    ensure!(max == 255, "only 8-bit pixmaps are supported");
    let body = bytes.get(pos..pos + 3 * w * h).context("pixmap body is truncated")?;
    let mut data = vec![0f32; 3 * w * h];
    for (i, px) in body.chunks_exact(3).enumerate() {
        for c in 0..3 {
            data[c * w * h + i] = px[c] as f32 / 127.5 - 1.0;
        }
    }
    Ok(Tensor::new(vec![3, h, w], data)?)
}

pub fn tensor_bytes(t: &Tensor) -> Vec<u8> {
    let mut out = TENSOR_MAGIC.to_vec();
    out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
    for &e in t.shape() {
        out.extend_from_slice(&(e as u32).to_le_bytes());
    }
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn parse_tensor(bytes: &[u8]) -> Result<Tensor> {
    ensure!(bytes.starts_with(TENSOR_MAGIC), "not a raw tensor file");
    let word = |i: usize| -> Result<u32> {
        let b = bytes.get(4 + 4 * i..8 + 4 * i).context("tensor header is truncated")?;
        Ok(u32::from_le_bytes(b.try_into()?))
    };
    let rank = word(0)? as usize;
    let shape = (0..rank).map(|i| Ok(word(1 + i)? as usize)).collect::<Result<Vec<_>>>()?;
    let start = 8 + 4 * rank;
    let numel: usize = shape.iter().product();
    let body = bytes.get(start..).unwrap_or_default();
    ensure!(body.len() == 4 * numel, "tensor body has {} bytes, expected {}", body.len(), 4 * numel);
    let data = body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    Ok(Tensor::new(shape, data)?)
}

/// Load a condition image of side `size` from a pixmap, a raw tensor
/// (`[3, S, S]` or `[1, 3, S, S]`) or a dataset record.
pub fn read_condition(path: &Path, size: usize) -> Result<Tensor> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    let t = if bytes.starts_with(b"P6") {
        read_ppm(&bytes)?
    } else if bytes.starts_with(TENSOR_MAGIC) {
        let t = parse_tensor(&bytes)?;
        match t.shape() {
            [1, rest @ ..] => {
                let rest = rest.to_vec();
                t.reshape(rest)?
            }
            _ => t,
        }
    } else if bytes.starts_with(RECORD_MAGIC) {
        Record::decode(&bytes)?.cond
    } else {
        bail!("{}: unrecognized condition file", path.display());
    };
    ensure!(
        t.shape() == [3, size, size],
        "{}: condition has shape {:?}, the model expects [3, {size}, {size}]",
        path.display(),
        t.shape()
    );
    Ok(t)
}

/// Write `prefix.ppm` (grid of `tiles`) and `prefix.tensor` (`samples`).
pub fn write_outputs(prefix: &Path, tiles: &[Tensor], samples: &Tensor) -> Result<()> {
    if let Some(dir) = prefix.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    let ppm = prefix.with_extension("ppm");
    fs::write(&ppm, ppm_grid(tiles)?).with_context(|| format!("writing {}", ppm.display()))?;
    let raw = prefix.with_extension("tensor");
    fs::write(&raw, tensor_bytes(samples)).with_context(|| format!("writing {}", raw.display()))?;
    Ok(())
}
