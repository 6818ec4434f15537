//! Procedural scenes of flat-colored primitives on integer pixel geometry.

use crate::grad::Tensor;
use crate::rng::Rng;

/// Color words and their RGB values in `[-1, 1]`.
pub const PALETTE: [(&str, [f32; 3]); 8] = [
    ("red", [1.0, -1.0, -1.0]),
    ("green", [-1.0, 1.0, -1.0]),
    ("blue", [-1.0, -1.0, 1.0]),
    ("yellow", [1.0, 1.0, -1.0]),
    ("cyan", [-1.0, 1.0, 1.0]),
    ("magenta", [1.0, -1.0, 1.0]),
    ("white", [1.0, 1.0, 1.0]),
    ("black", [-1.0, -1.0, -1.0]),
];

pub const MAX_PRIMITIVES: usize = 4;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Figure {
    pub head: (i32, i32),
    pub head_radius: i32,
    pub neck: (i32, i32),
    pub hip: (i32, i32),
    pub hands: [(i32, i32); 2],
    pub feet: [(i32, i32); 2],
}

impl Figure {
    pub fn joints(&self) -> [(i32, i32); 7] {
        [
            self.head,
            self.neck,
            self.hip,
            self.hands[0],
            self.hands[1],
            self.feet[0],
            self.feet[1],
        ]
    }

    pub fn limbs(&self) -> [((i32, i32), (i32, i32)); 6] {
        [
            (self.head, self.neck),
            (self.neck, self.hip),
            (self.neck, self.hands[0]),
            (self.neck, self.hands[1]),
            (self.hip, self.feet[0]),
            (self.hip, self.feet[1]),
        ]
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Shape {
    Circle { cx: i32, cy: i32, r: i32 },
    /// Inclusive corners.
    Rect { x0: i32, y0: i32, x1: i32, y1: i32 },
    Triangle { pts: [(i32, i32); 3] },
    Figure(Figure),
}

impl Shape {
    pub fn word(&self) -> &'static str {
        match self {
            Shape::Circle { .. } => "circle",
            Shape::Rect { .. } => "rectangle",
            Shape::Triangle { .. } => "triangle",
            Shape::Figure(_) => "figure",
        }
    }

    pub fn covers(&self, x: i32, y: i32) -> bool {
        match self {
            Shape::Circle { cx, cy, r } => (x - cx).pow(2) + (y - cy).pow(2) <= r * r,
            Shape::Rect { x0, y0, x1, y1 } => (*x0..=*x1).contains(&x) && (*y0..=*y1).contains(&y),
            Shape::Triangle { pts } => {
                let edge = |a: (i32, i32), b: (i32, i32)| (b.0 - a.0) * (y - a.1) - (b.1 - a.1) * (x - a.0);
                let d = [edge(pts[0], pts[1]), edge(pts[1], pts[2]), edge(pts[2], pts[0])];
                d.iter().all(|&v| v >= 0) || d.iter().all(|&v| v <= 0)
            }
            Shape::Figure(f) => {
                let (hx, hy) = f.head;
                (x - hx).pow(2) + (y - hy).pow(2) <= f.head_radius.pow(2)
                    || f.limbs().iter().any(|&(a, b)| line_pixels(a, b).contains(&(x, y)))
            }
        }
    }
}

/// Bresenham segment including both endpoints.
pub fn line_pixels(a: (i32, i32), b: (i32, i32)) -> Vec<(i32, i32)> {
    let (mut x, mut y) = a;
    let dx = (b.0 - a.0).abs();
    let dy = -(b.1 - a.1).abs();
    let sx = if a.0 < b.0 { 1 } else { -1 };
    let sy = if a.1 < b.1 { 1 } else { -1 };
    let mut err = dx + dy;
    let mut out = vec![(x, y)];
    while (x, y) != b {
        let e2 = 2 * err;
        if e2 >= dy {
            err += dy;
            x += sx;
        }
        if e2 <= dx {
            err += dx;
            y += sy;
        }
        out.push((x, y));
    }
    out
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Primitive {
    pub shape: Shape,
    /// Index into [`PALETTE`].
    pub color: usize,
    /// Drawing order; larger is nearer.
    pub z: usize,
}

/// Primitives are kept sorted by `z`, and a one-pixel border is always
/// background.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Scene {
    pub size: usize,
    pub background: usize,
    pub primitives: Vec<Primitive>,
}

impl Scene {
    /// Per-pixel label, row-major: 0 for background, `i + 1` for the `i`-th
    /// primitive in drawing order.
    pub fn labels(&self) -> Vec<u8> {
        let s = self.size as i32;
        let mut out = vec![0u8; self.size * self.size];
        for (i, p) in self.primitives.iter().enumerate() {
            for y in 0..s {
                for x in 0..s {
                    if p.shape.covers(x, y) {
                        out[(y * s + x) as usize] = i as u8 + 1;
                    }
                }
            }
        }
        out
    }

    pub fn label_color(&self, label: u8) -> usize {
        if label == 0 {
            self.background
        } else {
            self.primitives[label as usize - 1].color
        }
    }

    /// `[3, S, S]` image in `[-1, 1]`.
    pub fn render(&self) -> Tensor {
        let labels = self.labels();
        let n = self.size * self.size;
        let mut data = vec![0f32; 3 * n];
        for (i, &l) in labels.iter().enumerate() {
            let rgb = PALETTE[self.label_color(l)].1;
            for c in 0..3 {
                data[c * n + i] = rgb[c];
            }
        }
        Tensor::new(vec![3, self.size, self.size], data).expect("image shape")
    }

    /// Primitives from bottom to top, e.g. "a red circle and a blue
    /// triangle on black".
    pub fn prompt(&self) -> String {
        let items: Vec<String> = self
            .primitives
            .iter()
            .map(|p| format!("a {} {}", PALETTE[p.color].0, p.shape.word()))
            .collect();
        let body = match items.as_slice() {
            [] => "an empty canvas".to_string(),
            [one] => one.clone(),
            [rest @ .., last] => format!("{} and {}", rest.join(", "), last),
        };
        format!("{body} on {}", PALETTE[self.background].0)
    }

    /// Inclusive bounding box `(x0, y0, x1, y1)` of the pixels each primitive
    /// shows, in drawing order.
    pub fn visible_boxes(&self) -> Vec<(usize, usize, usize, usize)> {
        boxes_of_labels(&self.labels(), self.size, self.primitives.len())
    }
}

pub(crate) fn boxes_of_labels(labels: &[u8], size: usize, count: usize) -> Vec<(usize, usize, usize, usize)> {
    let mut boxes = vec![(usize::MAX, usize::MAX, 0, 0); count];
    for (i, &l) in labels.iter().enumerate() {
        if l == 0 {
            continue;
        }
        let (x, y) = (i % size, i / size);
        let b = &mut boxes[l as usize - 1];
        b.0 = b.0.min(x);
        b.1 = b.1.min(y);
        b.2 = b.2.max(x);
        b.3 = b.3.max(y);
    }
    boxes
}

fn random_shape(rng: &mut Rng, s: i32) -> Shape {
    let lo = 1;
    let hi = s - 2;
    let mut int = |a: i32, b: i32| a + rng.below((b - a + 1) as u64) as i32;
    match int(0, 3) {
        0 => {
            let r = int(2, (s / 5).max(2));
            Shape::Circle {
                cx: int(lo + r, hi - r),
                cy: int(lo + r, hi - r),
                r,
            }
        }
        1 => {
            let w = int(3, s / 2);
            let h = int(3, s / 2);
            let x0 = int(lo, hi - w);
            let y0 = int(lo, hi - h);
            Shape::Rect {
                x0,
                y0,
                x1: x0 + w,
                y1: y0 + h,
            }
        }
        2 => loop {
            let pts = [(int(lo, hi), int(lo, hi)), (int(lo, hi), int(lo, hi)), (int(lo, hi), int(lo, hi))];
            let area2 = ((pts[1].0 - pts[0].0) * (pts[2].1 - pts[0].1) - (pts[2].0 - pts[0].0) * (pts[1].1 - pts[0].1)).abs();
            if area2 >= (s * 4).min((hi - lo) * (hi - lo) / 2) {
                break Shape::Triangle { pts };
            }
        },
        _ => {
            let h = int((s / 3).max(8), (s * 2 / 3).max(8)).min(hi - lo);
            let half = (h / 4).max(2);
            let cx = int(lo + half, hi - half);
            let y0 = int(lo, hi - h);
            let hr = (h / 8).max(1);
            let head = (cx, y0 + hr);
            let neck = (cx, y0 + 2 * hr + 1);
            let hip = (cx, y0 + h * 3 / 5);
            let arm_y = neck.1 + h / 6;
            Shape::Figure(Figure {
                head,
                head_radius: hr,
                neck,
                hip,
                hands: [(cx - half, arm_y), (cx + half, arm_y)],
                feet: [(cx - half, y0 + h), (cx + half, y0 + h)],
            })
        }
    }
}

/// 1 to 4 primitives with distinct colors, none fully hidden.
pub fn random_scene(rng: &mut Rng, size: usize) -> Scene {
    let s = size as i32;
    let count = 1 + rng.below(MAX_PRIMITIVES as u64) as usize;
    let mut colors: Vec<usize> = (0..PALETTE.len()).collect();
    for i in (1..colors.len()).rev() {
        let j = rng.below(i as u64 + 1) as usize;
        colors.swap(i, j);
    }
    let background = colors[0];
    let mut z: Vec<usize> = (0..count).collect();
    for i in (1..count).rev() {
        let j = rng.below(i as u64 + 1) as usize;
        z.swap(i, j);
    }
    let mut primitives: Vec<Primitive> = (0..count)
        .map(|i| Primitive {
            shape: random_shape(rng, s),
            color: colors[i + 1],
            z: z[i],
        })
        .collect();
    primitives.sort_by_key(|p| p.z);
    let mut scene = Scene {
        size,
        background,
        primitives,
    };
    // Drop primitives covered entirely by later ones, then renumber z.
    loop {
        let labels = scene.labels();
        let hidden = (0..scene.primitives.len()).find(|&i| !labels.contains(&(i as u8 + 1)));
        match hidden {
            Some(i) => {
                scene.primitives.remove(i);
            }
            None => break,
        }
    }
    for (i, p) in scene.primitives.iter_mut().enumerate() {
        p.z = i;
    }
    scene
}
