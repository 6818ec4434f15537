use std::collections::BTreeMap;

use unicontrol::config::Config;
use unicontrol::control::{is_control_param, is_hypernet_param, COPY_PREFIX};
use unicontrol::datagen::{read_dataset, write_dataset, Dataset};
use unicontrol::grad::Tensor;
use unicontrol::params::ParamStore;
use unicontrol::rng::Rng;
use unicontrol::trainer::*;

fn tiny_config(extra: &str) -> Config {
    Config::parse(&format!(
        "image_size = 8\nbase_channels = 4\nchannel_mults = 1,2\ntime_embed_dim = 8\n\
         tasks = canny,seg,bbox\nsteps = 4\nbatch_size = 2\nseed = 3\n{extra}"
    ))
    .unwrap()
}

fn dataset(cfg: &Config) -> (tempfile::TempDir, Dataset) {
    let dir = tempfile::tempdir().unwrap();
    write_dataset(dir.path(), 6, 21, &cfg.tasks, cfg.image_size, &cfg.conditions()).unwrap();
    let ds = read_dataset(dir.path()).unwrap();
    (dir, ds)
}

fn same(a: &ParamStore, b: &ParamStore, filter: impl Fn(&str) -> bool) -> bool {
    a.iter()
        .filter(|(n, _)| filter(n))
        .all(|(n, t)| t.data() == b.get(n).unwrap().data())
}

#[test]
fn task_sampling() {
    let mut rng = Rng::new(0);
    assert!(sample_task(&mut rng, 0).is_err());
    assert!((0..50).all(|_| sample_task(&mut rng, 1).unwrap() == 0));
    let mut counts = [0usize; 9];
    let mut rng = Rng::new(12345);
    let draws: Vec<usize> = (0..9000).map(|_| sample_task(&mut rng, 9).unwrap()).collect();
    for &k in &draws {
        counts[k] += 1;
    }
    assert!(counts.iter().all(|c| (900..=1100).contains(c)), "{counts:?}");
    let mut rng = Rng::new(12345);
    assert!(draws.iter().all(|&k| k == sample_task(&mut rng, 9).unwrap()));
}

#[test]
fn adamw_matches_hand_computation() {
    let (lr, wd, b1, b2, eps) = (0.01, 0.1, 0.9, 0.999, 1e-8);
    let p0 = [0.5f32, -0.25, 0.75];
    let c = [0.1f64, 0.2, -0.3];
    let mut store = ParamStore::new();
    store.insert("p", Tensor::new(vec![3], p0.to_vec()).unwrap().with_grad(true));
    let mut opt = AdamW::new(lr, wd);

    let mut p: Vec<f64> = p0.iter().map(|&v| v as f64).collect();
    let (mut m, mut v) = (vec![0.0; 3], vec![0.0; 3]);
    for step in 1..=3 {
        // loss = 0.5 * |p - c|^2
        let cur: Vec<f64> = store.get("p").unwrap().data().iter().map(|&x| x as f64).collect();
        let g: Vec<f64> = cur.iter().zip(&c).map(|(p, c)| p - c).collect();
        let grads = BTreeMap::from([("p".to_string(), g.iter().map(|&x| x as f32).collect())]);
        opt.step(&mut store, &grads).unwrap();
        for i in 0..3 {
            let gi = g[i] as f32 as f64;
            m[i] = b1 * m[i] + (1.0 - b1) * gi;
            v[i] = b2 * v[i] + (1.0 - b2) * gi * gi;
            let mh = m[i] / (1.0 - f64::powi(b1, step));
            let vh = v[i] / (1.0 - f64::powi(b2, step));
            p[i] = cur[i] - lr * wd * cur[i] - lr * mh / (vh.sqrt() + eps);
        }
        for (got, want) in store.get("p").unwrap().data().iter().zip(&p) {
            assert!((*got as f64 - want).abs() < 1e-7, "step {step}: {got} vs {want}");
        }
    }

    let mut frozen = ParamStore::new();
    frozen.insert("q", Tensor::full([2], 1.0f32));
    let grads = BTreeMap::from([("q".to_string(), vec![1.0f32, 1.0])]);
    assert!(opt.step(&mut frozen, &grads).is_err());
}

#[test]
fn zero_steps_checkpoint_is_the_initialization() {
    let cfg = tiny_config("steps = 0");
    let (_d, ds) = dataset(&cfg);
    let ckpt = train(&cfg, &ds, |_| panic!("no steps")).unwrap();
    let init = initial_model(&cfg, &TrainingSet::new(&cfg, &ds).unwrap()).unwrap();
    assert_eq!(ckpt.step, 0);
    assert_eq!(ckpt.params.len(), init.params.len());
    assert!(same(&ckpt.params, &init.params, |_| true));
}

#[test]
fn gating_sequence_in_real_training() {
    let cfg = tiny_config("");
    let (_d, ds) = dataset(&cfg);
    let mut tr = Trainer::new(&cfg, &ds).unwrap();
    let zero = |g: &BTreeMap<String, Vec<f32>>, f: &dyn Fn(&str) -> bool| {
        g.iter().filter(|(n, _)| f(n)).all(|(_, v)| v.iter().all(|&x| x == 0.0))
    };
    let g0 = tr.peek_gradients().unwrap();
    assert!(zero(&g0.grads, &is_hypernet_param));
    assert!(zero(&g0.grads, &|n| n.starts_with(COPY_PREFIX)));
    assert!(zero(&g0.grads, &|n| n.starts_with("control.adapter.")));
    assert!(!zero(&g0.grads, &|n| n.starts_with("control.zero_out.")));
    let s0 = tr.step().unwrap();
    assert_eq!(s0.loss, g0.loss);
    let g1 = tr.peek_gradients().unwrap();
    assert!(!zero(&g1.grads, &is_hypernet_param));
    assert!(!zero(&g1.grads, &|n| n.starts_with(COPY_PREFIX)));
}

#[test]
fn freeze_contract_and_frozen_base() {
    let cfg = tiny_config("steps = 6\nfreeze_frac = 0.5");
    assert_eq!(cfg.freeze_step(), 3);
    let (_d, ds) = dataset(&cfg);
    let mut tr = Trainer::new(&cfg, &ds).unwrap();
    let init = tr.model.params.clone();
    let mut snaps = vec![tr.checkpoint()];
    for _ in 0..6 {
        tr.step().unwrap();
        snaps.push(tr.checkpoint());
    }
    // hypernet moves before the freeze step and never after it
    assert!(!same(&snaps[1].params, &snaps[3].params, is_hypernet_param));
    for w in snaps[3..].windows(2) {
        assert!(same(&w[0].params, &w[1].params, is_hypernet_param));
        assert!(!same(&w[0].params, &w[1].params, |n| n.starts_with("control.zero_out.")));
    }
    for s in &snaps {
        assert!(same(&s.params, &init, |n| !is_control_param(n)));
    }
}

#[test]
fn full_run_is_byte_reproducible() {
    let cfg = tiny_config("");
    let (_d, ds) = dataset(&cfg);
    let mut log_a = Vec::new();
    let a = train(&cfg, &ds, |o| log_a.push(o.log_line(cfg.tasks[o.task].key))).unwrap();
    let mut log_b = Vec::new();
    let b = train(&cfg, &ds, |o| log_b.push(o.log_line(cfg.tasks[o.task].key))).unwrap();
    assert_eq!(a.to_bytes().unwrap(), b.to_bytes().unwrap());
    assert_eq!(log_a, log_b);
    assert_eq!(log_a.len(), 4);
    let f: Vec<&str> = log_a[0].split('\t').collect();
    assert_eq!(f.len(), 3);
    assert!(f[2].parse::<f64>().unwrap() > 0.0);
}

#[test]
fn checkpoint_round_trip_and_layout() {
    let cfg = tiny_config("steps = 2");
    let (_d, ds) = dataset(&cfg);
    let ckpt = train(&cfg, &ds, |_| {}).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.ckpt");
    save_checkpoint(&path, &ckpt).unwrap();
    let back = load_checkpoint(&path).unwrap();
    assert_eq!(back.step, 2);
    assert_eq!(back.config, ckpt.config);
    assert_eq!(back.rng_state, ckpt.rng_state);
    assert!(ckpt
        .params
        .iter()
        .all(|(n, t)| back.params.get(n).unwrap().data().iter().zip(t.data()).all(|(a, b)| a.to_bits() == b.to_bits())));
    let bytes = std::fs::read(&path).unwrap();
    assert_eq!(back.to_bytes().unwrap(), bytes);

    // layout oracle: parse the manifest independently and recompute offsets
    assert_eq!(&bytes[..4], b"UCKP");
    assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
    let mlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let manifest = std::str::from_utf8(&bytes[16..16 + mlen]).unwrap();
    let mut offset = 0u64;
    let mut names = Vec::new();
    for line in manifest.lines().filter(|l| !l.starts_with('@')) {
        let f: Vec<&str> = line.split('\t').collect();
        assert_eq!(f[1], "f32");
        let rank: usize = f[2].parse().unwrap();
        let numel: u64 = f[3..3 + rank].iter().map(|d| d.parse::<u64>().unwrap()).product();
        assert_eq!(f[3 + rank].parse::<u64>().unwrap(), offset, "{}", f[0]);
        let t = ckpt.params.get(f[0]).unwrap();
        assert_eq!(numel as usize, t.numel());
        let at = 16 + mlen + offset as usize;
        let first = f32::from_le_bytes(bytes[at..at + 4].try_into().unwrap());
        assert_eq!(first.to_bits(), t.data()[0].to_bits());
        offset += 4 * numel;
        names.push(f[0]);
    }
    assert_eq!(names.len(), ckpt.params.len());
    assert_eq!(bytes.len() as u64, 16 + mlen as u64 + offset + 4);

    let mut bad = bytes.clone();
    bad[1] = b'X';
    assert!(Checkpoint::from_bytes(&bad).is_err());
    let err = Checkpoint::from_bytes(&bytes[..bytes.len() - 9]).unwrap_err().to_string();
    assert!(err.contains("offset"), "{err}");
    let mut flipped = bytes.clone();
    flipped[16 + mlen + 5] ^= 0x40;
    assert!(Checkpoint::from_bytes(&flipped).is_err());

    let (cfg2, model) = model_from_checkpoint(&back).unwrap();
    assert_eq!(cfg2, cfg);
    assert!(model.params.iter().all(|(n, t)| t.requires_grad == is_control_param(n)));
}

#[test]
fn accounting_matches_shape_product_oracle() {
    let cfg = Config::parse("base_channels = 16").unwrap();
    let set_free = {
        let base = unicontrol::denoiser::init_base(&cfg.unet(), 0).unwrap();
        unicontrol::control::assemble(&cfg.unet(), &cfg.control(), &base, 0).unwrap()
    };
    let table = count_params(&set_free, 9);
    let mut by_group: BTreeMap<&str, usize> = BTreeMap::new();
    for (name, t) in set_free.iter() {
        let n: usize = t.shape().iter().product();
        let group = if name.starts_with("control.copy.") {
            "copy"
        } else if name.starts_with("control.zero_") {
            "zero"
        } else if name.starts_with("control.adapter.") {
            "adapter"
        } else if name.starts_with("control.hyper.") {
            "hyper"
        } else {
            "base"
        };
        *by_group.entry(group).or_default() += n;
    }
    assert_eq!(table.base, by_group["base"]);
    assert_eq!(table.control_copy, by_group["copy"]);
    assert_eq!(table.zero_convs, by_group["zero"]);
    assert_eq!(table.adapters_total(), by_group["adapter"]);
    assert_eq!(table.hypernet, by_group["hyper"]);
    assert_eq!(table.unified_total(), by_group.values().sum::<usize>());
    assert_eq!(table.stacked_total(), by_group["base"] + 9 * (by_group["copy"] + by_group["zero"] + by_group["adapter"] / 9));
    assert!(table.unified_total() < table.stacked_total());
    assert!(table.adapters_total() + table.hypernet < table.control_branch());
    assert!(table.to_string().contains("1.44B vs 4.32B"));
}

#[test]
fn stub_model_scores_perfect_fidelity_on_exact_maps() {
    let cfg = Config::parse("tasks = seg,bbox,pose,hed").unwrap();
    let dir = tempfile::tempdir().unwrap();
    write_dataset(dir.path(), 20, 4, &cfg.tasks, 32, &cfg.conditions()).unwrap();
    let ds = read_dataset(dir.path()).unwrap();
    for task in ["seg", "bbox"] {
        let idx = ds.partition(task);
        let conds: Vec<Tensor> = idx.iter().map(|&i| ds.records[i].cond.clone()).collect();
        let images: Vec<Tensor> = idx.iter().map(|&i| ds.records[i].image.clone()).collect();
        let rep = fidelity_report(task, &conds, &images, &images).unwrap();
        assert_eq!(rep.conditional, 1.0, "{task}");
        assert_eq!(rep.samples, 20);
    }
    assert!(score_condition("watercolor", &Tensor::zeros([3, 4, 4]), &Tensor::zeros([3, 4, 4])).is_err());
}

#[test]
fn edge_iou_properties() {
    let a = [0u8, 1, 0, 0, 1, 0, 0, 0, 0];
    assert_eq!(edge_iou(&a, &a, 3), 1.0);
    assert_eq!(edge_iou(&[0; 9], &[0; 9], 3), 1.0);
    let far_a = [1u8, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0];
    let far_b = [0u8, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 1];
    assert_eq!(edge_iou(&far_a, &far_b, 4), 0.0);
}

#[test]
fn training_requires_every_task_partition() {
    let cfg = tiny_config("");
    let other = tiny_config("tasks = canny,seg,depth");
    let (_d, ds) = dataset(&cfg);
    assert!(Trainer::new(&other, &ds).is_err());
}
