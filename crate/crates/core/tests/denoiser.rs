use unicontrol::denoiser::*;
use unicontrol::grad::{gradcheck, Graph, Tensor};
use unicontrol::gradsuite;
use unicontrol::rng::Rng;
use unicontrol::trainer::AdamW;

fn randn(shape: &[usize], seed: u64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), Rng::new(seed).normal_vec(n)).unwrap()
}

fn forward(cfg: &UNetConfig, params: &unicontrol::params::ParamStore, x: &Tensor, t: &[usize], text: &Tensor) -> (Tensor, Vec<Tensor>) {
    let mut g = Graph::new();
    let b = params.bind(&mut g);
    let net = UNet { cfg, params: &b };
    let (xv, tv) = (g.constant(x.clone()), g.constant(text.clone()));
    let (eps, feats) = net.base_forward(&mut g, xv, t, tv, 200).unwrap();
    let feats = feats.iter().map(|&f| g.value(f).clone()).collect();
    (g.take(eps), feats)
}

#[test]
fn output_shape_and_injection_points() {
    for cfg in [UNetConfig::tiny(), UNetConfig::default()] {
        let p = init_base(&cfg, 1).unwrap();
        let s = cfg.image_size;
        let x = randn(&[2, 3, s, s], 2);
        let text = randn(&[2, cfg.text_embed_dim], 3);
        let (eps, feats) = forward(&cfg, &p, &x, &[1, 200], &text);
        assert_eq!(eps.shape(), x.shape());
        assert_eq!(feats.len(), cfg.injection_count());
        let chans: Vec<usize> = feats.iter().map(|f| f.shape()[1]).collect();
        assert_eq!(chans, cfg.injection_channels());
    }
    assert_eq!(UNetConfig::default().injection_count(), 7);
}

#[test]
fn forward_is_deterministic() {
    let cfg = UNetConfig::tiny();
    let p = init_base(&cfg, 4).unwrap();
    let x = randn(&[1, 3, 8, 8], 5);
    let text = randn(&[1, 6], 6);
    let (a, _) = forward(&cfg, &p, &x, &[99], &text);
    let (b, _) = forward(&cfg, &p, &x, &[99], &text);
    assert!(a.bit_eq(&b));
    assert!(init_base(&cfg, 4).unwrap().iter().zip(p.iter()).all(|(a, b)| a.0 == b.0 && a.1.bit_eq(b.1)));
}

#[test]
fn small_perturbations_stay_finite_and_bounded() {
    let cfg = UNetConfig::tiny();
    let p = init_base(&cfg, 7).unwrap();
    let x = randn(&[1, 3, 8, 8], 8);
    let text = randn(&[1, 6], 9);
    let (a, _) = forward(&cfg, &p, &x, &[10], &text);
    let mut rng = Rng::new(10);
    let d: Vec<f32> = x.data().iter().map(|v| v + rng.range(-1e-3, 1e-3) as f32).collect();
    let (b, _) = forward(&cfg, &p, &Tensor::new(x.shape().to_vec(), d).unwrap(), &[10], &text);
    assert!(a.all_finite() && b.all_finite());
    assert!(a.max_abs_diff(&b) < 0.1);
}

#[test]
fn bad_inputs_are_rejected() {
    let cfg = UNetConfig::tiny();
    let p = init_base(&cfg, 1).unwrap();
    let mut g = Graph::new();
    let b = p.bind(&mut g);
    let net = UNet { cfg: &cfg, params: &b };
    let x = g.constant(Tensor::zeros([1, 3, 8, 8]));
    let text = g.constant(Tensor::zeros([1, 6]));
    assert!(net.base_forward(&mut g, x, &[0], text, 200).is_err());
    assert!(net.base_forward(&mut g, x, &[201], text, 200).is_err());
    let wrong = g.constant(Tensor::zeros([1, 3, 6, 6]));
    assert!(net.base_forward(&mut g, wrong, &[5], text, 200).is_err());
    let mut bad = cfg.clone();
    bad.image_size = 7;
    assert!(init_base(&bad, 0).is_err());
}

#[test]
fn tiny_base_passes_gradcheck() {
    let report = gradcheck(gradsuite::base_forward_case, 1).unwrap();
    assert_eq!(report.entries.len(), init_base(&UNetConfig::tiny(), 0).unwrap().len());
    assert!(report.passes(1e-4), "{report}");
}

#[test]
fn copy_contract() {
    let cfg = UNetConfig::default();
    let mut base = init_base(&cfg, 2).unwrap();
    base.set_trainable(|_| true, false);
    let copy = clone_trainable_copy(&base);
    let expected: Vec<&str> = base.names().filter(|n| n.starts_with("enc.") || n.starts_with("mid.")).collect();
    assert_eq!(copy.names().collect::<Vec<_>>(), expected);
    for (n, t) in copy.iter() {
        assert!(t.requires_grad);
        assert!(t.bit_eq(base.get(n).unwrap()));
    }
    assert!(copy.numel() < base.numel());

    // one optimizer step on the copy moves it and leaves the base alone
    let before = base.clone();
    let mut copy = copy;
    let grads = copy.iter().map(|(n, t)| (n.to_string(), vec![0.5f32; t.numel()])).collect();
    AdamW::new(1e-3, 0.0).step(&mut copy, &grads).unwrap();
    assert!(copy.iter().any(|(n, t)| !t.bit_eq(base.get(n).unwrap())));
    assert!(base.iter().zip(before.iter()).all(|(a, b)| a.1.bit_eq(b.1)));
}

#[test]
fn timestep_features_are_sinusoids() {
    let f: Tensor<f64> = timestep_features(&[3, 100], 8);
    assert_eq!(f.shape(), [2, 8]);
    for (row, &t) in [3.0f64, 100.0].iter().enumerate() {
        for v in f.data()[row * 8..row * 8 + 8].iter() {
            assert!(v.abs() <= 1.0);
        }
        // first sine entry uses frequency 1
        let s = f.data()[row * 8];
        let c = f.data()[row * 8 + 4];
        assert!((s * s + c * c - 1.0).abs() < 1e-12, "t={t}");
    }
}
