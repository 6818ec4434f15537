//! Procedural training triplets: scenes, the nine condition maps derived
//! from scene geometry, and the on-disk dataset.

pub mod filters;
pub mod record;
pub mod scene;

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::grad::Tensor;
use crate::rng::{derive_seed, Rng};
use crate::tasks::{self, TaskSpec};

pub use filters::{make_outpaint_mask, make_sketch, CannyRanges, OutpaintMask};
pub use record::{read_dataset, write_dataset, Dataset, ManifestEntry, Record};
pub use scene::{Scene, PALETTE};

/// Seg-map color per label (background first).
pub const SEG_COLORS: [[f32; 3]; 5] = [
    [-1.0, -1.0, -1.0],
    [1.0, 0.0, 0.0],
    [0.0, 1.0, 0.0],
    [0.0, 0.0, 1.0],
    [1.0, 1.0, 0.0],
];

/// Joint marker color on pose maps; limbs are white.
pub const JOINT_COLOR: [f32; 3] = [1.0, -1.0, -1.0];

/// Random ranges for the condition post-processing.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConditionConfig {
    pub canny: CannyRanges,
    pub sketch_sigma: (f64, f64),
    pub sketch_threshold: (f64, f64),
    pub outpaint: (f64, f64),
    /// Gain applied to depth differences before normalising normals.
    pub normal_gain: f64,
}

impl Default for ConditionConfig {
    fn default() -> Self {
        Self {
            canny: CannyRanges::default(),
            sketch_sigma: (0.5, 1.2),
            sketch_threshold: (0.15, 0.35),
            outpaint: filters::OUTPAINT_RANGE,
            normal_gain: 4.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneSample {
    pub seed: u64,
    pub scene: Scene,
    pub image: Tensor,
    pub prompt: String,
    pub conditions: BTreeMap<&'static str, Tensor>,
}

pub fn synth_scene(seed: u64, size: usize) -> SceneSample {
    let mut rng = Rng::new(seed);
    let scene = scene::random_scene(&mut rng, size);
    SceneSample {
        seed,
        image: scene.render(),
        prompt: scene.prompt(),
        scene,
        conditions: BTreeMap::new(),
    }
}

fn binary_map(m: &[u8], size: usize) -> Tensor {
    let n = size * size;
    let data = (0..3 * n).map(|i| if m[i % n] != 0 { 1.0 } else { -1.0 }).collect();
    Tensor::new(vec![3, size, size], data).expect("map shape")
}

fn rgb_map(size: usize, f: impl Fn(usize) -> [f32; 3]) -> Tensor {
    let n = size * size;
    let mut data = vec![0f32; 3 * n];
    for i in 0..n {
        let c = f(i);
        for k in 0..3 {
            data[k * n + i] = c[k];
        }
    }
    Tensor::new(vec![3, size, size], data).expect("map shape")
}

/// Depth in `[0, 1]`: `(i + 1) / P` for the `i`-th primitive in drawing
/// order, 0 for background.
pub fn depth_map(scene: &Scene) -> Vec<f64> {
    let p = scene.primitives.len().max(1) as f64;
    scene.labels().iter().map(|&l| l as f64 / p).collect()
}

pub fn hed_map(scene: &Scene) -> Vec<u8> {
    filters::label_boundaries(&scene.labels(), scene.size)
}

/// Limbs and joints of every figure, 0 elsewhere; 1 marks limbs, 2 joints.
pub fn pose_map(scene: &Scene) -> Vec<u8> {
    let s = scene.size as i32;
    let mut m = vec![0u8; scene.size * scene.size];
    for p in &scene.primitives {
        if let scene::Shape::Figure(f) = &p.shape {
            for (a, b) in f.limbs() {
                for (x, y) in scene::line_pixels(a, b) {
                    if (0..s).contains(&x) && (0..s).contains(&y) {
                        m[(y * s + x) as usize] = m[(y * s + x) as usize].max(1);
                    }
                }
            }
            for (x, y) in f.joints() {
                m[(y * s + x) as usize] = 2;
            }
        }
    }
    m
}

/// Outline (1) of every primitive's visible bounding box.
pub fn bbox_map(scene: &Scene) -> Vec<u8> {
    boxes_outline(&scene.visible_boxes(), scene.size)
}

pub(crate) fn boxes_outline(boxes: &[(usize, usize, usize, usize)], size: usize) -> Vec<u8> {
    let mut m = vec![0u8; size * size];
    for &(x0, y0, x1, y1) in boxes.iter().filter(|b| b.0 <= b.2) {
        for x in x0..=x1 {
            m[y0 * size + x] = 1;
            m[y1 * size + x] = 1;
        }
        for y in y0..=y1 {
            m[y * size + x0] = 1;
            m[y * size + x1] = 1;
        }
    }
    m
}

/// Condition map `[3, S, S]` in `[-1, 1]` for `task`. Randomised
/// post-processing (edge thresholds, sketch blur, mask size) draws from
/// `rng`.
pub fn derive_condition(scene: &Scene, image: &Tensor, task: &str, rng: &mut Rng, cfg: &ConditionConfig) -> Result<Tensor> {
    let size = scene.size;
    let spec = tasks::task(task)?;
    if image.shape() != [3, size, size] {
        return Err(Error::Shape {
            op: "derive_condition",
            lhs: image.shape().to_vec(),
            rhs: vec![3, size, size],
        });
    }
    Ok(match spec.key {
        "canny" => {
            let (low, high) = cfg.canny.draw(rng);
            binary_map(&filters::canny(&filters::luma(image.data(), size), size, low, high), size)
        }
        "hed" => binary_map(&hed_map(scene), size),
        "hedsketch" => {
            let sigma = rng.range(cfg.sketch_sigma.0, cfg.sketch_sigma.1);
            let thr = rng.range(cfg.sketch_threshold.0, cfg.sketch_threshold.1);
            let hed: Vec<f64> = hed_map(scene).iter().map(|&v| v as f64).collect();
            binary_map(&make_sketch(&hed, size, sigma, thr)?, size)
        }
        "depth" => {
            let d = depth_map(scene);
            rgb_map(size, |i| [(2.0 * d[i] - 1.0) as f32; 3])
        }
        "normal" => {
            let n = filters::normals_from_depth(&depth_map(scene), size, cfg.normal_gain);
            rgb_map(size, |i| n[i].map(|v| v as f32))
        }
        "seg" => {
            let labels = scene.labels();
            rgb_map(size, |i| SEG_COLORS[labels[i] as usize % SEG_COLORS.len()])
        }
        "bbox" => binary_map(&bbox_map(scene), size),
        "pose" => {
            let m = pose_map(scene);
            rgb_map(size, |i| match m[i] {
                0 => [-1.0; 3],
                1 => [1.0; 3],
                _ => JOINT_COLOR,
            })
        }
        "outpainting" => {
            let fraction = rng.range(cfg.outpaint.0, cfg.outpaint.1);
            let mask = make_outpaint_mask(size, rng.next_u64(), fraction)?;
            Tensor::new(vec![3, size, size], filters::apply_mask(image.data(), &mask))?
        }
        other => unreachable!("registered task {other} without a condition"),
    })
}

/// Scene seed of sample `index`.
pub fn sample_seed(seed: u64, index: usize) -> u64 {
    derive_seed(seed, index as u64)
}

/// Scene plus the requested conditions, each drawn from its own stream.
pub fn generate_sample(seed: u64, size: usize, task_list: &[TaskSpec], cfg: &ConditionConfig) -> Result<SceneSample> {
    let mut s = synth_scene(seed, size);
    for t in task_list {
        let mut rng = Rng::new(derive_seed(seed, t.adapter_index as u64 + 1));
        let c = derive_condition(&s.scene, &s.image, t.key, &mut rng, cfg)?;
        s.conditions.insert(t.key, c);
    }
    Ok(s)
}
