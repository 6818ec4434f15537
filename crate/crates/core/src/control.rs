//! Task-routed condition adapters, the instruction hypernet and the
//! modulated zero-convolution bridges around a trainable encoder copy.
//!
//! Parameter names, all under `control.`:
//! `adapter.{k}.conv{j}` per task, `zero_in` for the input bridge,
//! `zero_out.{i}` per injection point, `hyper.{i}` and `hyper.in` for the
//! modulation heads, and `copy.*` for the encoder copy.

use crate::denoiser::{clone_trainable_copy, UNet, UNetConfig, INIT_STD};
use crate::diffusion::NoisePredictor;
use crate::error::{Error, Result};
use crate::grad::{Graph, Real, Tensor, Var};
use crate::params::{trunc_normal, zeros, Bindings, ParamStore};
use crate::rng::Rng;

pub const COPY_PREFIX: &str = "control.copy.";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ControlConfig {
    pub num_tasks: usize,
    pub adapter_hidden: usize,
    /// Convolutions per adapter module, 2 or 3.
    pub adapter_depth: usize,
}

impl ControlConfig {
    pub fn new(num_tasks: usize) -> Self {
        Self {
            num_tasks,
            adapter_hidden: 16,
            adapter_depth: 2,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_tasks == 0 {
            return Err(Error::Config("at least one task is required".into()));
        }
        if !(2..=3).contains(&self.adapter_depth) || self.adapter_hidden == 0 {
            return Err(Error::Config(format!(
                "adapter depth must be 2 or 3 (got {}), hidden width positive",
                self.adapter_depth
            )));
        }
        Ok(())
    }
}

pub fn adapter_prefix(k: usize) -> String {
    format!("control.adapter.{k}.")
}

pub fn is_hypernet_param(name: &str) -> bool {
    name.starts_with("control.hyper.")
}

pub fn is_control_param(name: &str) -> bool {
    name.starts_with("control.")
}

/// Control-branch parameters: adapters, zero bridges, hypernet heads and
/// the encoder copy cloned from `base`.
pub fn init_control(unet: &UNetConfig, ctrl: &ControlConfig, base: &ParamStore, seed: u64) -> Result<ParamStore> {
    unet.validate()?;
    ctrl.validate()?;
    let mut rng = Rng::new(seed);
    let mut store = ParamStore::new();
    let c = unet.base_channels;
    let h = ctrl.adapter_hidden;
    for k in 0..ctrl.num_tasks {
        let p = adapter_prefix(k);
        let mut chans = vec![unet.in_channels, h];
        if ctrl.adapter_depth == 3 {
            chans.push(h);
        }
        chans.push(c);
        for (j, w) in chans.windows(2).enumerate() {
            store.insert(
                format!("{p}conv{}.w", j + 1),
                trunc_normal(&mut rng, &[w[1], w[0], 3, 3], INIT_STD),
            );
            store.insert(format!("{p}conv{}.b", j + 1), zeros(&[w[1]]));
        }
    }
    store.insert("control.zero_in.w", zeros(&[c, c, 1, 1]));
    store.insert("control.zero_in.b", zeros(&[c]));
    let d = unet.text_embed_dim;
    for (i, ci) in unet.injection_channels().into_iter().enumerate() {
        store.insert(format!("control.zero_out.{i}.w"), zeros(&[ci, ci, 1, 1]));
        store.insert(format!("control.zero_out.{i}.b"), zeros(&[ci]));
        store.insert(format!("control.hyper.{i}.w"), trunc_normal(&mut rng, &[ci, d], INIT_STD));
        store.insert(format!("control.hyper.{i}.b"), Tensor::full([ci], 1.0).with_grad(true));
    }
    store.insert("control.hyper.in.w", trunc_normal(&mut rng, &[c, d], INIT_STD));
    store.insert("control.hyper.in.b", Tensor::full([c], 1.0).with_grad(true));
    for (name, t) in clone_trainable_copy(base).iter() {
        store.insert(format!("{COPY_PREFIX}{name}"), t.clone());
    }
    Ok(store)
}

/// Frozen base plus freshly initialised control branch.
pub fn assemble(unet: &UNetConfig, ctrl: &ControlConfig, base: &ParamStore, seed: u64) -> Result<ParamStore> {
    let mut store = base.clone();
    store.set_trainable(|_| true, false);
    store.extend(init_control(unet, ctrl, base, seed)?)?;
    Ok(store)
}

/// One adapter input: which module, its blend weight and the condition
/// image it reads.
#[derive(Debug, Clone, PartialEq)]
pub struct AdapterBranch<T: Real = f32> {
    pub task: usize,
    pub weight: f64,
    pub cond: Tensor<T>,
}

/// Everything the control branch consumes besides `x_t`, `t` and the
/// prompt: adapter branches and the `[D]` instruction embedding fed to the
/// hypernet.
#[derive(Debug, Clone, PartialEq)]
pub struct ControlInput<T: Real = f32> {
    pub branches: Vec<AdapterBranch<T>>,
    pub instruction: Tensor<T>,
}

impl<T: Real> ControlInput<T> {
    pub fn single(task: usize, cond: Tensor<T>, instruction: Tensor<T>) -> Self {
        Self {
            branches: vec![AdapterBranch {
                task,
                weight: 1.0,
                cond,
            }],
            instruction,
        }
    }

    pub fn cast<U: Real>(&self) -> ControlInput<U> {
        ControlInput {
            branches: self
                .branches
                .iter()
                .map(|b| AdapterBranch {
                    task: b.task,
                    weight: b.weight,
                    cond: b.cond.cast(),
                })
                .collect(),
            instruction: self.instruction.cast(),
        }
    }
}

/// Graph-level view of the bound control branch.
pub struct Control<'a> {
    pub unet: &'a UNetConfig,
    pub ctrl: &'a ControlConfig,
    pub params: &'a Bindings,
}

impl Control<'_> {
    fn net(&self) -> UNet<'_> {
        UNet {
            cfg: self.unet,
            params: self.params,
        }
    }

    fn check_task(&self, task: usize) -> Result<()> {
        if task >= self.ctrl.num_tasks {
            return Err(Error::invalid(format!(
                "task index {task} outside 0..{}",
                self.ctrl.num_tasks
            )));
        }
        Ok(())
    }

    /// Module `task` applied to a `[N, 3, S, S]` condition image.
    pub fn adapter_forward<T: Real>(&self, g: &mut Graph<T>, cond: Var, task: usize) -> Result<Var> {
        self.check_task(task)?;
        let p = adapter_prefix(task);
        let mut h = cond;
        for j in 1..=self.ctrl.adapter_depth {
            let w = self.params.var(&format!("{p}conv{j}.w"))?;
            let b = self.params.var(&format!("{p}conv{j}.b"))?;
            h = g.conv2d(h, w, Some(b), 1, 1)?;
            h = g.silu(h)?;
        }
        Ok(h)
    }

    /// `sum_i w_i adapter_i(cond_i)` without any normalisation check.
    /// Zero-weight branches are skipped and a lone unit weight is applied
    /// as the identity.
    pub fn adapter_mix<T: Real>(&self, g: &mut Graph<T>, branches: &[(usize, f64, Var)]) -> Result<Var> {
        let live: Vec<_> = branches.iter().filter(|b| b.1 != 0.0).collect();
        if live.is_empty() {
            return Err(Error::invalid("adapter mix needs at least one nonzero weight"));
        }
        if let [&(task, w, cond)] = live.as_slice() {
            let out = self.adapter_forward(g, cond, task)?;
            return if w == 1.0 { Ok(out) } else { g.scale(out, w) };
        }
        let mut acc: Option<Var> = None;
        for &&(task, w, cond) in &live {
            let out = self.adapter_forward(g, cond, task)?;
            let out = g.scale(out, w)?;
            acc = Some(match acc {
                Some(a) => g.add(a, out)?,
                None => out,
            });
        }
        Ok(acc.expect("nonempty"))
    }

    /// Convex combination of every module's output on one condition image.
    pub fn blend_adapters<T: Real>(&self, g: &mut Graph<T>, cond: Var, weights: &[f64]) -> Result<Var> {
        validate_weights(weights, self.ctrl.num_tasks)?;
        let branches: Vec<_> = weights.iter().enumerate().map(|(k, &w)| (k, w, cond)).collect();
        self.adapter_mix(g, &branches)
    }

    /// Modulation vectors for every injection point followed by the one for
    /// the input bridge. `instruction` is `[D]`.
    pub fn hyper_modulations<T: Real>(&self, g: &mut Graph<T>, instruction: Var) -> Result<Vec<Var>> {
        let d = self.unet.text_embed_dim;
        if g.shape(instruction) != [d] {
            return Err(Error::Shape {
                op: "hyper_modulations",
                lhs: g.shape(instruction).to_vec(),
                rhs: vec![d],
            });
        }
        let e = g.reshape(instruction, &[1, d])?;
        let heads = (0..self.unet.injection_count())
            .map(|i| i.to_string())
            .chain(std::iter::once("in".to_string()));
        let mut out = Vec::new();
        for h in heads {
            let w = self.params.var(&format!("control.hyper.{h}.w"))?;
            let b = self.params.var(&format!("control.hyper.{h}.b"))?;
            let m = g.linear(e, w, Some(b))?;
            let c = g.shape(m)[1];
            out.push(g.reshape(m, &[c])?);
        }
        Ok(out)
    }

    /// 1x1 convolution `name` with its kernel scaled per input channel by
    /// `m`; the bias is not modulated.
    pub fn modulated_zero_conv<T: Real>(&self, g: &mut Graph<T>, name: &str, x: Var, m: Var) -> Result<Var> {
        let w = self.params.var(&format!("{name}.w"))?;
        let b = self.params.var(&format!("{name}.b"))?;
        modulated_conv(g, x, w, b, m)
    }

    /// Noise estimate of the frozen base with control residuals added at
    /// every injection point.
    pub fn controlled_denoise<T: Real>(
        &self,
        g: &mut Graph<T>,
        x: Var,
        t: &[usize],
        text: Var,
        input: &ControlInput<T>,
        steps: usize,
    ) -> Result<Var> {
        let net = self.net();
        net.check_input(g, x, t, text, steps)?;
        for b in &input.branches {
            self.check_task(b.task)?;
            if b.cond.shape() != g.shape(x) {
                return Err(Error::Shape {
                    op: "condition image",
                    lhs: b.cond.shape().to_vec(),
                    rhs: g.shape(x).to_vec(),
                });
            }
        }
        let emb = net.embed(g, t, text)?;
        let base = net.encode(g, "", x, emb, None)?;

        let branches = input
            .branches
            .iter()
            .map(|b| (b.task, b.weight, g.constant(b.cond.clone())))
            .collect::<Vec<_>>();
        let c = self.adapter_mix(g, &branches)?;
        let instr = g.constant(input.instruction.clone());
        let mods = self.hyper_modulations(g, instr)?;
        let (m_in, m_out) = mods.split_last().expect("input head present");
        let z2 = self.modulated_zero_conv(g, "control.zero_in", c, *m_in)?;
        let copy = net.encode(g, COPY_PREFIX, x, emb, Some(z2))?;

        let mut feats = Vec::with_capacity(base.len());
        for (i, ((&b, &f), &m)) in base.iter().zip(&copy).zip(m_out).enumerate() {
            let r = self.modulated_zero_conv(g, &format!("control.zero_out.{i}"), f, m)?;
            feats.push(g.add(b, r)?);
        }
        net.decode(g, feats, emb)
    }
}

/// `conv1x1(x, w * m[in], b)`.
pub fn modulated_conv<T: Real>(g: &mut Graph<T>, x: Var, w: Var, b: Var, m: Var) -> Result<Var> {
    let wm = g.scale_in_channels(w, m)?;
    g.conv2d(x, wm, Some(b), 1, 0)
}

/// Weights must be `k` finite nonnegative reals summing to 1 within 1e-6.
pub fn validate_weights(weights: &[f64], k: usize) -> Result<()> {
    if weights.len() != k {
        return Err(Error::invalid(format!("expected {k} task weights, got {}", weights.len())));
    }
    if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
        return Err(Error::invalid(format!("task weights must be finite and nonnegative: {weights:?}")));
    }
    let s: f64 = weights.iter().sum();
    if (s - 1.0).abs() > 1e-6 {
        return Err(Error::invalid(format!("task weights sum to {s}, expected 1")));
    }
    Ok(())
}

/// Owned unified model: frozen base, control branch and schedule length.
#[derive(Debug, Clone)]
pub struct UniControl {
    pub unet: UNetConfig,
    pub ctrl: ControlConfig,
    pub params: ParamStore,
    pub steps: usize,
}

impl UniControl {
    pub fn bound<'a>(&'a self, params: &'a Bindings) -> BoundControl<'a> {
        BoundControl {
            control: Control {
                unet: &self.unet,
                ctrl: &self.ctrl,
                params,
            },
            steps: self.steps,
        }
    }

    /// The same parameters read as the plain base denoiser.
    pub fn base_only(&self) -> BaseOnly<'_> {
        BaseOnly(self)
    }
}

/// A control branch bound to a graph, usable as a [`NoisePredictor`]
/// without rebinding.
pub struct BoundControl<'a> {
    pub control: Control<'a>,
    pub steps: usize,
}

impl NoisePredictor for BoundControl<'_> {
    type Cond = ControlInput;

    fn predict(&self, g: &mut Graph, x_t: Var, t: &[usize], text: Var, cond: &ControlInput) -> Result<Var> {
        self.control.controlled_denoise(g, x_t, t, text, cond, self.steps)
    }
}

impl NoisePredictor for UniControl {
    type Cond = ControlInput;

    fn predict(&self, g: &mut Graph, x_t: Var, t: &[usize], text: Var, cond: &ControlInput) -> Result<Var> {
        // Only the branches in use need binding.
        let used: Vec<String> = cond.branches.iter().map(|b| adapter_prefix(b.task)).collect();
        let b = self.params.bind_where(g, |n| {
            !n.starts_with("control.adapter.") || used.iter().any(|p| n.starts_with(p.as_str()))
        });
        self.bound(&b).predict(g, x_t, t, text, cond)
    }
}

/// Base-only view of a [`UniControl`]; control disabled.
pub struct BaseOnly<'a>(&'a UniControl);

impl NoisePredictor for BaseOnly<'_> {
    type Cond = ();

    fn predict(&self, g: &mut Graph, x_t: Var, t: &[usize], text: Var, _cond: &()) -> Result<Var> {
        let b = self.0.params.bind_where(g, |n| !is_control_param(n));
        let net = UNet {
            cfg: &self.0.unet,
            params: &b,
        };
        Ok(net.base_forward(g, x_t, t, text, self.0.steps)?.0)
    }
}
