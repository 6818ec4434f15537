use unicontrol::grad::{gradcheck, GradCase, Graph, Tensor, Var};
use unicontrol::gradsuite;
use unicontrol::rng::Rng;
use unicontrol::Error;

fn rand_tensor(rng: &mut Rng, shape: &[usize], grad: bool) -> Tensor<f64> {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.range(-1.0, 1.0)).collect();
    Tensor::new(shape.to_vec(), data).unwrap().with_grad(grad)
}

/// Direct sliding-window convolution, single sample, single output channel.
fn sliding_window(x: &[f64], h: usize, w: usize, k: &[f64], kk: usize, pad: usize, stride: usize) -> Vec<f64> {
    let ho = (h + 2 * pad - kk) / stride + 1;
    let wo = (w + 2 * pad - kk) / stride + 1;
    let mut out = vec![0.0; ho * wo];
    for oy in 0..ho {
        for ox in 0..wo {
            let mut s = 0.0;
            for i in 0..kk {
                for j in 0..kk {
                    let iy = (oy * stride + i) as isize - pad as isize;
                    let ix = (ox * stride + j) as isize - pad as isize;
                    if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                        s += x[iy as usize * w + ix as usize] * k[i * kk + j];
                    }
                }
            }
            out[oy * wo + ox] = s;
        }
    }
    out
}

#[test]
fn conv_identity_kernel_is_exact() {
    let mut rng = Rng::new(1);
    let mut g = Graph::<f32>::new();
    let x = rand_tensor(&mut rng, &[2, 3, 5, 5], false).cast::<f32>();
    let mut w = Tensor::<f32>::zeros([3, 3, 1, 1]);
    for c in 0..3 {
        w.data_mut()[c * 3 + c] = 1.0;
    }
    let xv = g.constant(x.clone());
    let wv = g.constant(w);
    let b = g.constant(Tensor::zeros([3]));
    let y = g.conv2d(xv, wv, Some(b), 1, 0).unwrap();
    assert!(g.value(y).bit_eq(&x));
}

#[test]
fn silu_zero_and_mul_by_ones() {
    let mut g = Graph::<f32>::new();
    let z = g.constant(Tensor::zeros([4]));
    let s = g.silu(z).unwrap();
    assert!(g.value(s).data().iter().all(|&v| v == 0.0));
    let x = g.constant(Tensor::from_f64([3], &[0.5, -2.0, 7.25]).unwrap());
    let ones = g.constant(Tensor::full([3], 1.0));
    let y = g.mul(x, ones).unwrap();
    assert_eq!(g.value(y).data(), g.value(x).data());
}

#[test]
fn conv3x3_matches_sliding_window_oracle() {
    let x: Vec<f64> = (0..16).map(|v| (v as f64) * 0.25 - 1.5).collect();
    let k = [0.5, -1.0, 0.25, 2.0, 0.0, -0.75, 1.0, 0.125, -0.5];
    for (pad, stride) in [(0, 1), (1, 1), (1, 2)] {
        let want = sliding_window(&x, 4, 4, &k, 3, pad, stride);
        let mut g = Graph::<f64>::new();
        let xv = g.constant(Tensor::new([1, 1, 4, 4], x.clone()).unwrap());
        let kv = g.constant(Tensor::new([1, 1, 3, 3], k.to_vec()).unwrap());
        let y = g.conv2d(xv, kv, None, stride, pad).unwrap();
        let got = g.value(y).data();
        assert_eq!(got.len(), want.len());
        let diff = got.iter().zip(&want).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert_eq!(diff, 0.0, "pad={pad} stride={stride}");
    }
}

#[test]
fn shape_mismatch_names_primitive() {
    let mut g = Graph::<f32>::new();
    let a = g.constant(Tensor::zeros([2, 3]));
    let b = g.constant(Tensor::zeros([3, 2]));
    let err = g.add(a, b).unwrap_err();
    let msg = err.to_string();
    assert!(msg.contains("add") && msg.contains("[2, 3]") && msg.contains("[3, 2]"), "{msg}");
    let x = g.constant(Tensor::zeros([1, 2, 4, 4]));
    let w = g.constant(Tensor::zeros([1, 3, 3, 3]));
    assert!(matches!(g.conv2d(x, w, None, 1, 1), Err(Error::Shape { op: "conv2d", .. })));
}

#[test]
fn sum_of_squares_gradient() {
    let mut g = Graph::<f64>::new();
    let x = g.leaf(Tensor::from_f64([2], &[1.0, 2.0]).unwrap().with_grad(true));
    let sq = g.mul(x, x).unwrap();
    let s = g.sum(sq).unwrap();
    g.backward(s).unwrap();
    assert_eq!(g.grad(x).unwrap(), &[2.0, 4.0]);
}

#[test]
fn unreachable_parameter_has_zero_grad() {
    let mut g = Graph::<f64>::new();
    let x = g.leaf(Tensor::from_f64([2], &[1.0, 2.0]).unwrap().with_grad(true));
    let unused = g.leaf(Tensor::from_f64([3], &[1.0, 2.0, 3.0]).unwrap().with_grad(true));
    let s = g.sum(x).unwrap();
    g.backward(s).unwrap();
    assert_eq!(g.grad(unused).unwrap(), &[0.0, 0.0, 0.0]);
}

#[test]
fn backward_errors() {
    let mut g = Graph::<f64>::new();
    let x = g.leaf(Tensor::from_f64([2], &[1.0, 2.0]).unwrap().with_grad(true));
    assert!(matches!(g.backward(x), Err(Error::NotScalar(_))));
    let s = g.sum(x).unwrap();
    g.backward(s).unwrap();
    assert!(matches!(g.backward(s), Err(Error::BackwardTwice)));
    g.reset_grads();
    g.backward(s).unwrap();
}

#[test]
fn non_finite_is_an_error() {
    let mut g = Graph::<f32>::new();
    let x = g.constant(Tensor::from_f64([1], &[f64::MAX]).unwrap());
    assert!(matches!(g.scale(x, 10.0), Err(Error::NonFinite { .. })));
}

fn two_layer_conv(seed: u64) -> unicontrol::Result<GradCase> {
    let mut rng = Rng::new(seed);
    let params = vec![
        ("x".to_string(), rand_tensor(&mut rng, &[2, 2, 6, 6], false)),
        ("target".to_string(), rand_tensor(&mut rng, &[2, 3, 3, 3], false)),
        ("conv1.w".to_string(), rand_tensor(&mut rng, &[4, 2, 3, 3], true)),
        ("conv1.b".to_string(), rand_tensor(&mut rng, &[4], true)),
        ("conv2.w".to_string(), rand_tensor(&mut rng, &[3, 4, 3, 3], true)),
        ("conv2.b".to_string(), rand_tensor(&mut rng, &[3], true)),
    ];
    Ok(GradCase {
        params,
        loss: Box::new(|g: &mut Graph<f64>, v: &[Var]| {
            let h = g.conv2d(v[0], v[2], Some(v[3]), 1, 1)?;
            let h = g.silu(h)?;
            let y = g.conv2d(h, v[4], Some(v[5]), 2, 1)?;
            g.mse(y, v[1])
        }),
    })
}

#[test]
fn two_layer_conv_net_passes_gradcheck() {
    let report = gradcheck(two_layer_conv, 11).unwrap();
    assert_eq!(report.entries.len(), 4);
    assert!(report.passes(1e-4), "{report}");
}

fn linear_case(seed: u64) -> unicontrol::Result<GradCase> {
    let mut rng = Rng::new(seed);
    let params = vec![
        ("x".to_string(), rand_tensor(&mut rng, &[3, 5], false)),
        ("w".to_string(), rand_tensor(&mut rng, &[4, 5], true)),
        ("b".to_string(), rand_tensor(&mut rng, &[4], true)),
        ("frozen".to_string(), rand_tensor(&mut rng, &[5], false)),
        ("t".to_string(), rand_tensor(&mut rng, &[3, 4], false)),
    ];
    Ok(GradCase {
        params,
        loss: Box::new(|g: &mut Graph<f64>, v: &[Var]| {
            let y = g.linear(v[0], v[1], Some(v[2]))?;
            let f = g.reshape(v[3], &[1, 5])?;
            let f = g.linear(f, v[1], None)?;
            let s = g.sum(f)?;
            let l = g.mse(y, v[4])?;
            g.add(l, s)
        }),
    })
}

#[test]
fn linear_gradcheck_and_frozen_absent() {
    let report = gradcheck(linear_case, 5).unwrap();
    let names: Vec<_> = report.entries.iter().map(|e| e.name.as_str()).collect();
    assert_eq!(names, ["w", "b"]);
    assert!(report.passes(1e-4), "{report}");
}

#[test]
fn gradcheck_report_is_deterministic() {
    let a = gradcheck(linear_case, 9).unwrap().to_string();
    let b = gradcheck(linear_case, 9).unwrap().to_string();
    assert_eq!(a.as_bytes(), b.as_bytes());
}

#[test]
fn every_primitive_passes_gradcheck() {
    for which in gradsuite::PRIMITIVES {
        let report = gradcheck(gradsuite::primitive_case(which), 3).unwrap();
        assert!(report.passes(1e-4), "{which}:\n{report}");
    }
}

#[test]
fn linear_layer_mse_gradcheck() {
    let case = |seed| {
        let mut rng = Rng::new(seed);
        Ok(GradCase {
            params: vec![
                ("x".into(), rand_tensor(&mut rng, &[4, 6], true)),
                ("w".into(), rand_tensor(&mut rng, &[3, 6], true)),
                ("b".into(), rand_tensor(&mut rng, &[3], true)),
                ("y".into(), rand_tensor(&mut rng, &[4, 3], true)),
            ],
            loss: Box::new(|g: &mut Graph<f64>, v: &[Var]| {
                let h = g.linear(v[0], v[1], Some(v[2]))?;
                g.mse(h, v[3])
            }),
        })
    };
    let report = gradcheck(case, 21).unwrap();
    assert!(report.passes(1e-4), "{report}");
}

#[test]
fn reverse_accumulation_is_linear() {
    let mut rng = Rng::new(17);
    let xt = rand_tensor(&mut rng, &[1, 2, 4, 4], true);
    let wt = rand_tensor(&mut rng, &[2, 2, 3, 3], true);
    let (a, b) = (0.7, -1.3);

    let grads = |mode: u8| -> Vec<f64> {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(xt.clone());
        let w = g.leaf(wt.clone());
        let y = g.conv2d(x, w, None, 1, 1).unwrap();
        let s = g.silu(y).unwrap();
        let f = g.sum(s).unwrap();
        let sq = g.mul(y, y).unwrap();
        let h = g.sum(sq).unwrap();
        let loss = match mode {
            0 => f,
            1 => h,
            _ => {
                let fa = g.scale(f, a).unwrap();
                let hb = g.scale(h, b).unwrap();
                g.add(fa, hb).unwrap()
            }
        };
        g.backward(loss).unwrap();
        let mut out = g.grad(x).unwrap().to_vec();
        out.extend_from_slice(g.grad(w).unwrap());
        out
    };
    let (gf, gh, gc) = (grads(0), grads(1), grads(2));
    for i in 0..gc.len() {
        assert!((gc[i] - (a * gf[i] + b * gh[i])).abs() < 1e-6);
    }
}

#[test]
fn forward_is_bit_deterministic() {
    let mut rng = Rng::new(4);
    let x = rand_tensor(&mut rng, &[2, 3, 8, 8], false).cast::<f32>();
    let w = rand_tensor(&mut rng, &[5, 3, 3, 3], false).cast::<f32>();
    let run = || {
        let mut g = Graph::<f32>::new();
        let xv = g.constant(x.clone());
        let wv = g.constant(w.clone());
        let y = g.conv2d(xv, wv, None, 1, 1).unwrap();
        let y = g.silu(y).unwrap();
        g.take(y)
    };
    assert!(run().bit_eq(&run()));
}
