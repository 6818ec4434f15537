use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use proptest::prelude::*;
use unicontrol::datagen::filters::*;
use unicontrol::datagen::scene::{Primitive, Shape};
use unicontrol::datagen::*;
use unicontrol::grad::Tensor;
use unicontrol::rng::{splitmix64, Rng};
use unicontrol::tasks::{self, parse_task_list};

fn crc32_oracle(bytes: &[u8]) -> u32 {
    let mut crc = 0xffff_ffffu32;
    for &b in bytes {
        crc ^= b as u32;
        for _ in 0..8 {
            crc = if crc & 1 != 0 { (crc >> 1) ^ 0xedb8_8320 } else { crc >> 1 };
        }
    }
    !crc
}

fn one_shape(shape: Shape, size: usize) -> Scene {
    Scene {
        size,
        background: 7,
        primitives: vec![Primitive { shape, color: 0, z: 0 }],
    }
}

#[test]
fn scenes_are_deterministic() {
    for seed in [0, 1, u64::MAX, 0xdead_beef] {
        let a = synth_scene(seed, 32);
        let b = synth_scene(seed, 32);
        assert!(a.image.bit_eq(&b.image));
        assert_eq!(a.prompt, b.prompt);
    }
}

#[test]
fn scene_invariants() {
    for seed in 0..300 {
        let s = synth_scene(seed, 32);
        let p = s.scene.primitives.len();
        assert!((1..=4).contains(&p), "seed {seed}: {p} primitives");
        let zs: BTreeSet<usize> = s.scene.primitives.iter().map(|p| p.z).collect();
        assert_eq!(zs, (0..p).collect());
        for prim in &s.scene.primitives {
            for y in -6..38 {
                for x in -6..38 {
                    if prim.shape.covers(x, y) {
                        assert!((0..32).contains(&x) && (0..32).contains(&y), "seed {seed}");
                    }
                }
            }
            let words = format!("a {} {}", PALETTE[prim.color].0, prim.shape.word());
            assert!(s.prompt.contains(&words), "{} lacks {words}", s.prompt);
        }
        // labels form the contiguous range 0..=P (every primitive visible)
        let labels: BTreeSet<u8> = s.scene.labels().into_iter().collect();
        let want: BTreeSet<u8> = (0..=p as u8).collect();
        assert!(labels.is_subset(&want));
        assert!((1..=p as u8).all(|l| labels.contains(&l)), "seed {seed}");
        assert!(s.image.data().iter().all(|v| (-1.0..=1.0).contains(v)));
    }
}

#[test]
fn single_circle_prompt_mentions_it_once() {
    let seed = (0..10_000)
        .find(|&s| {
            let sc = synth_scene(s, 32).scene;
            sc.primitives.len() == 1 && matches!(sc.primitives[0].shape, Shape::Circle { .. })
        })
        .expect("some seed draws a lone circle");
    let prompt = synth_scene(seed, 32).prompt;
    assert_eq!(prompt.matches("circle").count(), 1, "{prompt}");
}

#[test]
fn every_palette_color_appears_across_scenes() {
    let mut counts = [0usize; 8];
    for seed in 0..1000 {
        let img = synth_scene(seed, 32).image;
        let n = 32 * 32;
        for i in 0..n {
            let px = [img.data()[i], img.data()[n + i], img.data()[2 * n + i]];
            let c = PALETTE.iter().position(|p| p.1 == px).expect("pixel is a palette color");
            counts[c] += 1;
        }
    }
    assert_eq!(counts.iter().sum::<usize>(), 1000 * 1024);
    assert!(counts.iter().all(|&c| c > 0), "{counts:?}");
}

#[test]
fn flat_scene_has_no_edges_and_flat_geometry() {
    let flat = Scene {
        size: 16,
        background: 2,
        primitives: vec![],
    };
    let img = flat.render();
    let mut rng = Rng::new(1);
    let cfg = ConditionConfig::default();
    let canny = derive_condition(&flat, &img, "canny", &mut rng, &cfg).unwrap();
    assert!(canny.data().iter().all(|&v| v == -1.0));
    let depth = depth_map(&flat);
    assert!(depth.iter().all(|&d| d == depth[0]));
    for n in normals_from_depth(&depth, 16, 4.0) {
        assert_eq!(n, [0.0, 0.0, 1.0]);
    }
    assert!(derive_condition(&flat, &img, "nope", &mut rng, &cfg).is_err());
}

#[test]
fn ramp_normals_match_finite_differences() {
    let s = 12usize;
    let k = 3.0;
    let depth: Vec<f64> = (0..s * s).map(|i| 0.05 * (i % s) as f64 + 0.02 * (i / s) as f64).collect();
    let got = normals_from_depth(&depth, s, k);
    for y in 0..s {
        for x in 0..s {
            let d = |xx: usize, yy: usize| depth[yy * s + xx];
            let (xl, xr) = (x.saturating_sub(1), (x + 1).min(s - 1));
            let (yu, yd) = (y.saturating_sub(1), (y + 1).min(s - 1));
            // clamped neighbours, still divided by the nominal spacing of 2
            let gx = (d(xr, y) - d(xl, y)) / 2.0;
            let gy = (d(x, yd) - d(x, yu)) / 2.0;
            let v = [-k * gx, -k * gy, 1.0];
            let len = (v[0] * v[0] + v[1] * v[1] + 1.0).sqrt();
            let n = got[y * s + x];
            for c in 0..3 {
                assert!((n[c] - v[c] / len).abs() < 1e-4);
            }
            if (1..s - 1).contains(&x) && (1..s - 1).contains(&y) {
                assert!((n[0] - (-k * 0.05) / (1.0 + k * k * (0.0025 + 0.0004)).sqrt()).abs() < 1e-9);
            }
        }
    }
}

#[test]
fn centered_circle_bbox_corners() {
    let (cx, cy, r) = (16, 16, 5);
    let scene = one_shape(Shape::Circle { cx, cy, r }, 32);
    let m = bbox_map(&scene);
    let on = |x: i32, y: i32| m[(y * 32 + x) as usize] == 1;
    assert!(on(cx - r, cy - r) && on(cx + r, cy + r) && on(cx - r, cy + r) && on(cx + r, cy - r));
    assert!(!on(cx - r - 1, cy - r) && !on(cx + r + 1, cy + r) && !on(cx, cy));
    assert_eq!(m.iter().filter(|&&v| v == 1).count(), 4 * 2 * r as usize);
}

#[test]
fn pose_map_is_empty_without_figures() {
    let scene = one_shape(Shape::Rect { x0: 2, y0: 2, x1: 9, y1: 9 }, 16);
    assert!(pose_map(&scene).iter().all(|&v| v == 0));
}

#[test]
fn conditions_have_image_shape_and_range() {
    let all = parse_task_list(
        &tasks::registry().iter().map(|t| t.key).collect::<Vec<_>>().join(","),
    )
    .unwrap();
    let all: Vec<_> = all.into_iter().cloned().collect();
    for seed in 0..40 {
        let s = generate_sample(seed, 32, &all, &ConditionConfig::default()).unwrap();
        assert_eq!(s.conditions.len(), 9);
        for (task, c) in &s.conditions {
            assert_eq!(c.shape(), [3, 32, 32], "{task}");
            assert!(c.data().iter().all(|v| v.is_finite() && (-1.0..=1.0).contains(v)), "{task}");
        }
        let normal = &s.conditions["normal"];
        for i in 0..1024 {
            let n: f64 = (0..3).map(|c| (normal.data()[c * 1024 + i] as f64).powi(2)).sum();
            assert!((n.sqrt() - 1.0).abs() < 1e-4);
        }
        let depth = depth_map(&s.scene);
        assert!(depth.iter().all(|d| (0.0..=1.0).contains(d)));
    }
}

#[test]
fn sketch_identity_and_kernel_normalisation() {
    let mut rng = Rng::new(3);
    let m: Vec<f64> = (0..64).map(|_| if rng.bernoulli(0.3) { 1.0 } else { 0.0 }).collect();
    let out = make_sketch(&m, 8, 0.0, 0.5).unwrap();
    assert!(out.iter().zip(&m).all(|(&o, &i)| o as f64 == i));
    for sigma in [0.0, 0.3, 0.5, 1.0, 1.7, 3.2] {
        let s: f64 = gaussian_kernel(sigma).iter().sum();
        assert!((s - 1.0).abs() < 1e-6);
    }
    assert!(make_sketch(&m, 8, -0.1, 0.5).is_err());
    assert!(make_sketch(&m, 8, 1.0, 0.0).is_err());
    assert!(make_sketch(&m, 8, 1.0, 1.0).is_err());
}

#[test]
fn single_pixel_sketch_blob_matches_2d_gaussian() {
    let s = 15usize;
    let mut m = vec![0.0; s * s];
    m[7 * s + 7] = 1.0;
    let got = make_sketch(&m, s, 1.0, 0.1).unwrap();
    let z: f64 = (-3i32..=3).map(|d| (-(d * d) as f64 / 2.0).exp()).sum::<f64>().powi(2);
    let mut want = 0;
    for dy in -3i32..=3 {
        for dx in -3i32..=3 {
            if (-((dx * dx + dy * dy) as f64) / 2.0).exp() / z > 0.1 {
                want += 1;
            }
        }
    }
    assert_eq!(got.iter().filter(|&&v| v == 1).count(), want);
    assert_eq!(want, 1);
}

#[test]
fn outpaint_mask_fraction_bounds() {
    assert!(make_outpaint_mask(32, 1, 0.9).is_err());
    assert!(make_outpaint_mask(32, 1, 0.1).is_err());
    let m = make_outpaint_mask(32, 7, 0.2).unwrap();
    let masked = m.masked.iter().filter(|&&b| b).count() as f64 / 1024.0;
    assert!((0.18..=0.22).contains(&masked), "{masked}");
}

proptest! {
    #[test]
    fn outpaint_masks_respect_range(seed in any::<u64>(), frac in 0.2f64..=0.8) {
        let m = make_outpaint_mask(32, seed, frac).unwrap();
        let masked = m.masked.iter().filter(|&&b| b).count() as f64 / 1024.0;
        prop_assert!((masked - frac).abs() <= 0.02 + 1e-12, "{} vs {}", masked, frac);
        prop_assert!((0.2..=0.8).contains(&masked), "{}", masked);
        prop_assert!(!m.masked[16 * 32 + 16] && !m.masked[15 * 32 + 15]);
    }

    #[test]
    fn canny_draws_stay_in_range(seed in any::<u64>()) {
        let r = CannyRanges::default();
        let mut rng = Rng::new(seed);
        for _ in 0..20 {
            let (lo, hi) = r.draw(&mut rng);
            prop_assert!(lo < hi);
            prop_assert!((r.low.0..=r.low.1).contains(&lo));
            prop_assert!((r.high.0..=r.high.1).contains(&hi));
        }
    }

    #[test]
    fn records_round_trip(seed in any::<u64>(), task in 0usize..9) {
        let spec = &tasks::registry()[task];
        let s = generate_sample(seed, 8, std::slice::from_ref(spec), &ConditionConfig::default()).unwrap();
        let r = Record {
            prompt: s.prompt.clone(),
            task: spec.key.to_string(),
            image: s.image.clone(),
            cond: s.conditions[spec.key].clone(),
        };
        let bytes = r.encode();
        prop_assert_eq!(&bytes[..4], b"UCDS");
        let back = Record::decode(&bytes).unwrap();
        prop_assert!(back.image.bit_eq(&r.image) && back.cond.bit_eq(&r.cond));
        prop_assert_eq!(&back.prompt, &r.prompt);
        prop_assert!(Record::decode(&bytes[..bytes.len() - 1]).is_err());
    }
}

#[test]
fn corrupted_record_is_rejected() {
    let r = Record {
        prompt: "a red circle on black".into(),
        task: "seg".into(),
        image: Tensor::zeros([3, 4, 4]),
        cond: Tensor::zeros([3, 4, 4]),
    };
    let mut bytes = r.encode();
    bytes[0] = b'X';
    assert!(Record::decode(&bytes).is_err());
}

fn tree(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (e.file_name().to_string_lossy().into_owned(), fs::read(e.path()).unwrap())
        })
        .collect();
    files.sort();
    files
}

#[test]
fn dataset_arity_determinism_and_checksums() {
    let tasks: Vec<_> = parse_task_list("canny,seg,outpainting").unwrap().into_iter().cloned().collect();
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let cfg = ConditionConfig::default();
    let manifest = write_dataset(a.path(), 10, 5, &tasks, 16, &cfg).unwrap();
    write_dataset(b.path(), 10, 5, &tasks, 16, &cfg).unwrap();
    let ta = tree(a.path());
    assert_eq!(ta.len(), 31);
    assert_eq!(manifest.len(), 30);
    assert_eq!(ta, tree(b.path()));

    let text = fs::read_to_string(a.path().join("manifest.tsv")).unwrap();
    assert_eq!(text.lines().count(), 30);
    for line in text.lines() {
        let f: Vec<&str> = line.split('\t').collect();
        let bytes = fs::read(a.path().join(f[1])).unwrap();
        assert_eq!(f[4], format!("{:08x}", crc32_oracle(&bytes)));
        let index: u64 = f[0].parse().unwrap();
        assert_eq!(f[3], splitmix64(5 ^ index).to_string());
    }

    let ds = read_dataset(a.path()).unwrap();
    assert_eq!(ds.records.len(), 30);
    assert_eq!(ds.partition("seg").len(), 10);
    assert_eq!(ds.image_size(), Some(16));
}

#[test]
fn parallel_output_equals_sequential_generation() {
    let tasks: Vec<_> = parse_task_list("hed,depth,bbox,pose").unwrap().into_iter().cloned().collect();
    let dir = tempfile::tempdir().unwrap();
    let cfg = ConditionConfig::default();
    write_dataset(dir.path(), 12, 77, &tasks, 16, &cfg).unwrap();
    for i in 0..12usize {
        let s = generate_sample(splitmix64(77 ^ i as u64), 16, &tasks, &cfg).unwrap();
        for t in &tasks {
            let bytes = Record {
                prompt: s.prompt.clone(),
                task: t.key.to_string(),
                image: s.image.clone(),
                cond: s.conditions[t.key].clone(),
            }
            .encode();
            let on_disk = fs::read(dir.path().join(format!("{i:06}_{}.ucds", t.key))).unwrap();
            assert_eq!(on_disk, bytes);
        }
    }
}

#[test]
fn tampered_dataset_fails_checksum() {
    let tasks: Vec<_> = parse_task_list("seg").unwrap().into_iter().cloned().collect();
    let dir = tempfile::tempdir().unwrap();
    write_dataset(dir.path(), 2, 1, &tasks, 8, &ConditionConfig::default()).unwrap();
    let p = dir.path().join("000001_seg.ucds");
    let mut bytes = fs::read(&p).unwrap();
    let last = bytes.len() - 1;
    bytes[last] ^= 1;
    fs::write(&p, bytes).unwrap();
    assert!(read_dataset(dir.path()).is_err());
}
