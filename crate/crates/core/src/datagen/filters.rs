//! Image filters behind the edge, sketch, normal and mask conditions. Maps
//! are single-channel, row-major `S x S` arrays.

use crate::error::{Error, Result};
use crate::rng::Rng;

/// Rec. 601 luma in `[0, 1]` of a `[3, S, S]` image in `[-1, 1]`.
pub fn luma(image: &[f32], size: usize) -> Vec<f64> {
    let n = size * size;
    (0..n)
        .map(|i| {
            let c = |k: usize| (image[k * n + i] as f64 + 1.0) / 2.0;
            0.299 * c(0) + 0.587 * c(1) + 0.114 * c(2)
        })
        .collect()
}

fn at(m: &[f64], size: usize, x: isize, y: isize) -> f64 {
    let c = |v: isize| v.clamp(0, size as isize - 1) as usize;
    m[c(y) * size + c(x)]
}

/// Sobel gradients with replicated borders.
pub fn sobel(m: &[f64], size: usize) -> (Vec<f64>, Vec<f64>) {
    let mut gx = vec![0.0; size * size];
    let mut gy = vec![0.0; size * size];
    for y in 0..size as isize {
        for x in 0..size as isize {
            let p = |dx: isize, dy: isize| at(m, size, x + dx, y + dy);
            let i = y as usize * size + x as usize;
            gx[i] = (p(1, -1) + 2.0 * p(1, 0) + p(1, 1)) - (p(-1, -1) + 2.0 * p(-1, 0) + p(-1, 1));
            gy[i] = (p(-1, 1) + 2.0 * p(0, 1) + p(1, 1)) - (p(-1, -1) + 2.0 * p(0, -1) + p(1, -1));
        }
    }
    (gx, gy)
}

/// Edge detector: Sobel magnitude, non-maximum suppression along the
/// quantised gradient direction, then hysteresis. Thresholds are fractions
/// of the largest magnitude. Returns 0/1.
pub fn canny(m: &[f64], size: usize, low: f64, high: f64) -> Vec<u8> {
    let (gx, gy) = sobel(m, size);
    let mag: Vec<f64> = gx.iter().zip(&gy).map(|(a, b)| a.hypot(*b)).collect();
    let max = mag.iter().cloned().fold(0.0, f64::max);
    let mut out = vec![0u8; size * size];
    if max <= 1e-12 {
        return out;
    }
    let s = size as isize;
    let mut thin = vec![0.0; size * size];
    for y in 0..s {
        for x in 0..s {
            let i = (y * s + x) as usize;
            if mag[i] == 0.0 {
                continue;
            }
            let angle = gy[i].atan2(gx[i]).to_degrees().rem_euclid(180.0);
            let (dx, dy) = if !(22.5..157.5).contains(&angle) {
                (1, 0)
            } else if angle < 67.5 {
                (1, 1)
            } else if angle < 112.5 {
                (0, 1)
            } else {
                (-1, 1)
            };
            let nb = |k: isize| {
                let (xx, yy) = (x + k * dx, y + k * dy);
                if (0..s).contains(&xx) && (0..s).contains(&yy) {
                    mag[(yy * s + xx) as usize]
                } else {
                    0.0
                }
            };
            // Ties go to the pixel on the lower side so a step edge stays
            // one pixel wide.
            if mag[i] >= nb(-1) && mag[i] > nb(1) {
                thin[i] = mag[i] / max;
            }
        }
    }
    let mut stack: Vec<usize> = Vec::new();
    for (i, &v) in thin.iter().enumerate() {
        if v >= high {
            out[i] = 1;
            stack.push(i);
        }
    }
    while let Some(i) = stack.pop() {
        let (x, y) = ((i % size) as isize, (i / size) as isize);
        for dy in -1..=1 {
            for dx in -1..=1 {
                let (xx, yy) = (x + dx, y + dy);
                if (0..s).contains(&xx) && (0..s).contains(&yy) {
                    let j = (yy * s + xx) as usize;
                    if out[j] == 0 && thin[j] >= low {
                        out[j] = 1;
                        stack.push(j);
                    }
                }
            }
        }
    }
    out
}

/// Inclusive threshold ranges for the randomised edge detector.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CannyRanges {
    pub low: (f64, f64),
    pub high: (f64, f64),
}

impl Default for CannyRanges {
    fn default() -> Self {
        Self {
            low: (0.05, 0.2),
            high: (0.2, 0.5),
        }
    }
}

impl CannyRanges {
    pub fn validate(&self) -> Result<()> {
        let ok = |(a, b): (f64, f64)| 0.0 < a && a <= b && b < 1.0;
        if !ok(self.low) || !ok(self.high) || self.low.0 >= self.high.1 {
            return Err(Error::Config(format!("invalid canny threshold ranges {self:?}")));
        }
        Ok(())
    }

    /// `(low, high)` with `low < high`, redrawn until that holds.
    pub fn draw(&self, rng: &mut Rng) -> (f64, f64) {
        loop {
            let low = rng.range(self.low.0, self.low.1);
            let high = rng.range(self.high.0, self.high.1);
            if low < high {
                return (low, high);
            }
        }
    }
}

/// Normalised 1-D Gaussian taps, truncated at `ceil(3 sigma)`. `sigma = 0`
/// gives the identity kernel.
pub fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    if sigma == 0.0 {
        return vec![1.0];
    }
    let r = (3.0 * sigma).ceil() as isize;
    let mut k: Vec<f64> = (-r..=r).map(|d| (-(d * d) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = k.iter().sum();
    for v in &mut k {
        *v /= s;
    }
    k
}

/// Separable Gaussian blur with zero padding.
pub fn blur(m: &[f64], size: usize, sigma: f64) -> Vec<f64> {
    let k = gaussian_kernel(sigma);
    let r = (k.len() / 2) as isize;
    let s = size as isize;
    let pass = |src: &[f64], horizontal: bool| -> Vec<f64> {
        let mut out = vec![0.0; size * size];
        for y in 0..s {
            for x in 0..s {
                let mut acc = 0.0;
                for (t, &w) in k.iter().enumerate() {
                    let d = t as isize - r;
                    let (xx, yy) = if horizontal { (x + d, y) } else { (x, y + d) };
                    if (0..s).contains(&xx) && (0..s).contains(&yy) {
                        acc += w * src[(yy * s + xx) as usize];
                    }
                }
                out[(y * s + x) as usize] = acc;
            }
        }
        out
    };
    let h = pass(m, true);
    pass(&h, false)
}

/// Blur then binarise: 1 where the blurred value exceeds `threshold`.
pub fn make_sketch(edges: &[f64], size: usize, sigma: f64, threshold: f64) -> Result<Vec<u8>> {
    if !(sigma >= 0.0 && sigma.is_finite()) {
        return Err(Error::invalid(format!("sketch sigma must be >= 0, got {sigma}")));
    }
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::invalid(format!("sketch threshold must lie in (0, 1), got {threshold}")));
    }
    if edges.len() != size * size {
        return Err(Error::invalid("sketch input does not match the canvas size"));
    }
    Ok(blur(edges, size, sigma)
        .into_iter()
        .map(|v| u8::from(v > threshold))
        .collect())
}

/// Unit normals `normalize(-k dz/dx, -k dz/dy, 1)` from clamped central
/// differences of `depth`.
pub fn normals_from_depth(depth: &[f64], size: usize, k: f64) -> Vec<[f64; 3]> {
    let s = size as isize;
    let mut out = Vec::with_capacity(size * size);
    for y in 0..s {
        for x in 0..s {
            let dx = (at(depth, size, x + 1, y) - at(depth, size, x - 1, y)) / 2.0;
            let dy = (at(depth, size, x, y + 1) - at(depth, size, x, y - 1)) / 2.0;
            let v = [-k * dx, -k * dy, 1.0];
            let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
            out.push([v[0] / n, v[1] / n, v[2] / n]);
        }
    }
    out
}

/// Pixels whose 4-neighbourhood holds a different label.
pub fn label_boundaries<L: PartialEq + Copy>(labels: &[L], size: usize) -> Vec<u8> {
    let s = size as isize;
    let mut out = vec![0u8; size * size];
    for y in 0..s {
        for x in 0..s {
            let l = labels[(y * s + x) as usize];
            let differs = [(1, 0), (-1, 0), (0, 1), (0, -1)].iter().any(|&(dx, dy)| {
                let (xx, yy) = (x + dx, y + dy);
                (0..s).contains(&xx) && (0..s).contains(&yy) && labels[(yy * s + xx) as usize] != l
            });
            out[(y * s + x) as usize] = u8::from(differs);
        }
    }
    out
}

/// Border mask leaving a centred unmasked `w x h` window. `true` marks
/// masked pixels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OutpaintMask {
    pub size: usize,
    pub window: (usize, usize, usize, usize),
    pub masked: Vec<bool>,
}

impl OutpaintMask {
    pub fn masked_fraction(&self) -> f64 {
        self.masked.iter().filter(|&&m| m).count() as f64 / self.masked.len() as f64
    }
}

pub const OUTPAINT_RANGE: (f64, f64) = (0.20, 0.80);

/// Mask hiding `fraction` of the canvas (within 2%, never outside the
/// allowed range) as a border band. The window aspect ratio is drawn from
/// `seed` among the sizes that meet the tolerance.
pub fn make_outpaint_mask(size: usize, seed: u64, fraction: f64) -> Result<OutpaintMask> {
    if !(OUTPAINT_RANGE.0..=OUTPAINT_RANGE.1).contains(&fraction) {
        return Err(Error::invalid(format!(
            "outpaint fraction {fraction} outside [{}, {}]",
            OUTPAINT_RANGE.0, OUTPAINT_RANGE.1
        )));
    }
    let total = (size * size) as f64;
    let masked_frac = |w: usize, h: usize| (total - (w * h) as f64) / total;
    let err = |w: usize, h: usize| (masked_frac(w, h) - fraction).abs();
    let in_range = |w: usize, h: usize| (OUTPAINT_RANGE.0..=OUTPAINT_RANGE.1).contains(&masked_frac(w, h));
    let mut fits = Vec::new();
    let mut best = (f64::INFINITY, (size, size));
    for w in 1..=size {
        for h in 1..=size {
            if !in_range(w, h) {
                continue;
            }
            let e = err(w, h);
            if e < best.0 {
                best = (e, (w, h));
            }
            if e <= 0.02 && 2 * w >= h && 2 * h >= w {
                fits.push((w, h));
            }
        }
    }
    let (w, h) = if fits.is_empty() {
        best.1
    } else {
        fits[Rng::new(seed).below(fits.len() as u64) as usize]
    };
    let x0 = (size - w) / 2;
    let y0 = (size - h) / 2;
    let masked = (0..size * size)
        .map(|i| {
            let (x, y) = (i % size, i / size);
            !((x0..x0 + w).contains(&x) && (y0..y0 + h).contains(&y))
        })
        .collect();
    Ok(OutpaintMask {
        size,
        window: (x0, y0, w, h),
        masked,
    })
}

/// Copy of a `[3, S, S]` image with masked pixels set to 0.
pub fn apply_mask(image: &[f32], mask: &OutpaintMask) -> Vec<f32> {
    let n = mask.size * mask.size;
    image
        .iter()
        .enumerate()
        .map(|(i, &v)| if mask.masked[i % n] { 0.0 } else { v })
        .collect()
}
