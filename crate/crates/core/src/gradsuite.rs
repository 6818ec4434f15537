//! Finite-difference checks of every primitive and of the tiny-config
//! denoisers, shared by the test suites and the `gradcheck` command.

use crate::control::{assemble, is_control_param, AdapterBranch, Control, ControlConfig, ControlInput};
use crate::denoiser::{init_base, UNet, UNetConfig};
use crate::error::Result;
use crate::grad::{gradcheck, GradCase, GradReport, Graph, Tensor, Var};
use crate::params::{Bindings, ParamStore};
use crate::rng::Rng;

pub const PRIMITIVES: [&str; 15] = [
    "conv2d",
    "conv2d_stride",
    "linear",
    "silu",
    "channel_norm",
    "add",
    "sub",
    "mul",
    "scale",
    "add_channel_bias",
    "scale_in_channels",
    "concat",
    "upsample",
    "avgpool",
    "reshape",
];

/// Acceptance threshold on the relative error.
pub const TOLERANCE: f64 = 1e-4;

fn uniform(rng: &mut Rng, shape: &[usize], grad: bool) -> Tensor<f64> {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.range(-1.0, 1.0)).collect();
    Tensor::new(shape.to_vec(), data)
        .expect("length matches shape")
        .with_grad(grad)
}

/// One primitive under a fixed nonlinear readout `sum(y*y) + sum(y)`.
pub fn primitive_case(which: &'static str) -> impl Fn(u64) -> Result<GradCase> {
    move |seed| {
        let mut rng = Rng::new(seed);
        let params = vec![
            ("a".to_string(), uniform(&mut rng, &[2, 3, 4, 4], true)),
            ("b".to_string(), uniform(&mut rng, &[2, 3, 4, 4], true)),
            ("gamma".to_string(), uniform(&mut rng, &[3], true)),
            ("beta".to_string(), uniform(&mut rng, &[3], true)),
            ("bias".to_string(), uniform(&mut rng, &[2, 3], true)),
            ("m".to_string(), uniform(&mut rng, &[3], true)),
            ("w".to_string(), uniform(&mut rng, &[2, 3, 3, 3], true)),
            ("lw".to_string(), uniform(&mut rng, &[5, 16], true)),
            ("lb".to_string(), uniform(&mut rng, &[5], true)),
            ("cb".to_string(), uniform(&mut rng, &[2], true)),
        ];
        Ok(GradCase {
            params,
            loss: Box::new(move |g: &mut Graph<f64>, v: &[Var]| {
                let (a, b) = (v[0], v[1]);
                let y = match which {
                    "conv2d" => g.conv2d(a, v[6], None, 1, 1)?,
                    "conv2d_stride" => g.conv2d(a, v[6], Some(v[9]), 2, 1)?,
                    "linear" => {
                        let x = g.reshape(a, &[6, 16])?;
                        g.linear(x, v[7], Some(v[8]))?
                    }
                    "silu" => g.silu(a)?,
                    "channel_norm" => g.channel_norm(a, v[2], v[3])?,
                    "add" => g.add(a, b)?,
                    "sub" => g.sub(a, b)?,
                    "mul" => g.mul(a, b)?,
                    "scale" => g.scale(a, -1.7)?,
                    "add_channel_bias" => g.add_channel_bias(a, v[4])?,
                    "scale_in_channels" => {
                        let k = g.scale_in_channels(v[6], v[5])?;
                        g.conv2d(a, k, None, 1, 1)?
                    }
                    "concat" => g.concat(a, b)?,
                    "upsample" => g.upsample_nearest2x(a)?,
                    "avgpool" => g.avgpool2x(a)?,
                    "reshape" => g.reshape(a, &[6, 16])?,
                    other => panic!("no gradcheck case for primitive {other}"),
                };
                let sq = g.mul(y, y)?;
                let s1 = g.sum(sq)?;
                let s2 = g.sum(y)?;
                g.add(s1, s2)
            }),
        })
    }
}

fn bind(names: &[String], vars: &[Var]) -> Bindings {
    Bindings::from_vars(names.iter().cloned().zip(vars.iter().copied()))
}

fn store_params(store: &ParamStore<f64>) -> (Vec<String>, Vec<(String, Tensor<f64>)>) {
    let params: Vec<_> = store.iter().map(|(n, t)| (n.to_string(), t.clone())).collect();
    (params.iter().map(|p| p.0.clone()).collect(), params)
}

/// Tiny base with weights redrawn at unit-variance fan-in scale, so that
/// features are O(1) and the finite differences are well conditioned.
pub fn generic_tiny_base(seed: u64) -> Result<ParamStore> {
    let cfg = UNetConfig::tiny();
    let mut store = init_base(&cfg, seed)?;
    let mut rng = Rng::new(seed ^ 0x9e37);
    for (name, t) in store.iter_mut() {
        let shape = t.shape().to_vec();
        let bound = if shape.len() >= 2 {
            (3.0 / shape[1..].iter().product::<usize>() as f64).sqrt()
        } else {
            0.1
        };
        let offset = if name.ends_with(".g") { 1.0 } else { 0.0 };
        for v in t.data_mut() {
            *v = (offset + bound * rng.range(-1.0, 1.0)) as f32;
        }
    }
    Ok(store)
}

/// `mse(base_forward(x, t, text), target)` on the tiny config, every base
/// tensor checked.
pub fn base_forward_case(seed: u64) -> Result<GradCase> {
    let cfg = UNetConfig::tiny();
    let store = generic_tiny_base(seed)?.cast::<f64>();
    let mut rng = Rng::new(seed ^ 0xba5e);
    let s = cfg.image_size;
    let x = uniform(&mut rng, &[2, 3, s, s], false);
    let text = uniform(&mut rng, &[2, cfg.text_embed_dim], false);
    let target = uniform(&mut rng, &[2, 3, s, s], false);
    let (names, params) = store_params(&store);
    Ok(GradCase {
        params,
        loss: Box::new(move |g, v| {
            let b = bind(&names, v);
            let net = UNet { cfg: &cfg, params: &b };
            let (xv, tv, yv) = (g.constant(x.clone()), g.constant(text.clone()), g.constant(target.clone()));
            let (eps, _) = net.base_forward(g, xv, &[37, 150], tv, 200)?;
            g.mse(eps, yv)
        }),
    })
}

/// Tiny unified model with every control tensor, including the zero
/// bridges, moved off its initial value so that all paths carry gradient.
pub fn perturbed_tiny_model(seed: u64, tasks: usize) -> Result<(UNetConfig, ControlConfig, ParamStore<f64>)> {
    let unet = UNetConfig::tiny();
    let ctrl = ControlConfig {
        num_tasks: tasks,
        adapter_hidden: 4,
        adapter_depth: 2,
    };
    let base = generic_tiny_base(seed)?;
    let mut store = assemble(&unet, &ctrl, &base, seed ^ 1)?.cast::<f64>();
    let mut rng = Rng::new(seed ^ 0xc0de);
    for (name, t) in store.iter_mut() {
        if !is_control_param(name) {
            continue;
        }
        let scale = if name.starts_with("control.zero_") { 0.3 } else { 0.1 };
        for v in t.data_mut() {
            *v += scale * rng.range(-1.0, 1.0);
        }
    }
    Ok((unet, ctrl, store))
}

/// `mse(controlled_denoise(..), target)` on the tiny config with two
/// blended adapter branches. Base tensors are frozen; every control tensor
/// (copy, adapters, bridges, hypernet) is checked.
pub fn controlled_denoise_case(seed: u64) -> Result<GradCase> {
    let (unet, ctrl, store) = perturbed_tiny_model(seed, 2)?;
    let mut rng = Rng::new(seed ^ 0xc0);
    let s = unet.image_size;
    let x = uniform(&mut rng, &[2, 3, s, s], false);
    let text = uniform(&mut rng, &[2, unet.text_embed_dim], false);
    let target = uniform(&mut rng, &[2, 3, s, s], false);
    let input = ControlInput {
        branches: vec![
            AdapterBranch {
                task: 0,
                weight: 0.5,
                cond: uniform(&mut rng, &[2, 3, s, s], false),
            },
            AdapterBranch {
                task: 1,
                weight: 0.5,
                cond: uniform(&mut rng, &[2, 3, s, s], false),
            },
        ],
        instruction: uniform(&mut rng, &[unet.text_embed_dim], false),
    };
    let (names, params) = store_params(&store);
    Ok(GradCase {
        params,
        loss: Box::new(move |g, v| {
            let b = bind(&names, v);
            let c = Control {
                unet: &unet,
                ctrl: &ctrl,
                params: &b,
            };
            let (xv, tv, yv) = (g.constant(x.clone()), g.constant(text.clone()), g.constant(target.clone()));
            let eps = c.controlled_denoise(g, xv, &[20, 180], tv, &input, 200)?;
            g.mse(eps, yv)
        }),
    })
}

/// Every case with its report, in a fixed order.
pub fn run_all(seed: u64) -> Result<Vec<(String, GradReport)>> {
    let mut out = Vec::new();
    for p in PRIMITIVES {
        out.push((format!("primitive {p}"), gradcheck(primitive_case(p), seed)?));
    }
    out.push(("base_forward".to_string(), gradcheck(base_forward_case, seed)?));
    out.push(("controlled_denoise".to_string(), gradcheck(controlled_denoise_case, seed)?));
    Ok(out)
}
