//! Multi-task training of the control branch over a frozen base.

mod accounting;
mod adamw;
mod checkpoint;
mod eval;

pub use accounting::{count_params, ParamTable, PAPER_SCALE};
pub use adamw::AdamW;
pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, TensorEntry};
pub use eval::{edge_iou, eval_condition_fidelity, fidelity_report, score_condition, FidelityReport};

use std::collections::BTreeMap;

use crate::config::Config;
use crate::control::{assemble, is_control_param, is_hypernet_param, ControlInput, UniControl};
use crate::datagen::Dataset;
use crate::denoiser::{init_base, BaseModel};
use crate::diffusion::{training_loss, NoiseSchedule, TrainBatch};
use crate::error::{Error, Result};
use crate::grad::{Graph, Tensor};
use crate::params::ParamStore;
use crate::rng::{derive_seed, Rng};
use crate::tasks::{embedding_tensor, encode_text};

/// Uniform task index in `0..k`.
pub fn sample_task(rng: &mut Rng, k: usize) -> Result<usize> {
    if k == 0 {
        return Err(Error::invalid("cannot sample from zero tasks"));
    }
    Ok(rng.below(k as u64) as usize)
}

/// Dataset records regrouped per configured task, with prompt embeddings
/// precomputed.
#[derive(Debug, Clone)]
pub struct TrainingSet {
    pub images: Vec<Tensor>,
    pub conds: Vec<Tensor>,
    pub texts: Vec<Vec<f32>>,
    /// Record indices per task, in the config's task order.
    pub by_task: Vec<Vec<usize>>,
}

impl TrainingSet {
    pub fn new(cfg: &Config, data: &Dataset) -> Result<Self> {
        let s = cfg.image_size;
        let mut by_task = Vec::new();
        for t in &cfg.tasks {
            let part = data.partition(t.key);
            if part.is_empty() {
                return Err(Error::invalid(format!("dataset has no records for task {}", t.key)));
            }
            by_task.push(part);
        }
        for r in &data.records {
            if r.image.shape() != [3, s, s] || r.cond.shape() != [3, s, s] {
                return Err(Error::Shape {
                    op: "training record",
                    lhs: r.image.shape().to_vec(),
                    rhs: vec![3, s, s],
                });
            }
        }
        Ok(Self {
            images: data.records.iter().map(|r| r.image.clone()).collect(),
            conds: data.records.iter().map(|r| r.cond.clone()).collect(),
            texts: data.records.iter().map(|r| encode_text(&r.prompt)).collect(),
            by_task,
        })
    }

    fn gather(&self, idx: &[usize]) -> Result<(Tensor, Tensor, Tensor)> {
        let pick = |v: &[Tensor]| Tensor::stack(&idx.iter().map(|&i| v[i].clone()).collect::<Vec<_>>());
        let text: Vec<f32> = idx.iter().flat_map(|&i| self.texts[i].iter().copied()).collect();
        let dim = self.texts[idx[0]].len();
        Ok((pick(&self.images)?, pick(&self.conds)?, Tensor::new(vec![idx.len(), dim], text)?))
    }
}

/// One optimizer step's record.
#[derive(Debug, Clone)]
pub struct StepOutput {
    pub step: usize,
    pub task: usize,
    pub loss: f64,
    /// Gradients of every trainable tensor that took part in the step.
    pub grads: BTreeMap<String, Vec<f32>>,
}

impl StepOutput {
    /// `step<TAB>task<TAB>loss`.
    pub fn log_line(&self, task_key: &str) -> String {
        format!("{}\t{}\t{:.6}", self.step, task_key, self.loss)
    }
}

/// Fresh unified model for `cfg`: a base (optionally pretrained on `data`
/// for `base_steps`) frozen under a zero-initialised control branch.
pub fn initial_model(cfg: &Config, set: &TrainingSet) -> Result<UniControl> {
    let unet = cfg.unet();
    let mut base = init_base(&unet, derive_seed(cfg.seed, 1))?;
    if cfg.base_steps > 0 {
        base = pretrain_base(cfg, set, base)?;
    }
    let params = assemble(&unet, &cfg.control(), &base, derive_seed(cfg.seed, 2))?;
    Ok(UniControl {
        unet,
        ctrl: cfg.control(),
        params,
        steps: cfg.t,
    })
}

/// Text-conditioned denoising on the target images of every task.
fn pretrain_base(cfg: &Config, set: &TrainingSet, base: ParamStore) -> Result<ParamStore> {
    let schedule = cfg.schedule()?;
    let mut model = BaseModel {
        cfg: cfg.unet(),
        params: base,
        steps: cfg.t,
    };
    let mut opt = AdamW::new(cfg.base_lr, cfg.weight_decay);
    let mut rng = Rng::new(derive_seed(cfg.seed, 3));
    let all: Vec<usize> = set.by_task.iter().flatten().copied().collect();
    for _ in 0..cfg.base_steps {
        let idx: Vec<usize> = (0..cfg.batch_size)
            .map(|_| all[rng.below(all.len() as u64) as usize])
            .collect();
        let (x0, _, text) = set.gather(&idx)?;
        let batch = TrainBatch {
            tasks: vec![0; idx.len()],
            x0,
            text,
            cond: (),
        };
        let mut g = Graph::new();
        let b = model.params.bind(&mut g);
        let bound = BoundBase { model: &model, params: &b };
        let loss = training_loss(&mut g, &bound, &batch, &schedule, cfg.drop_prob, &mut rng)?;
        g.backward(loss)?;
        opt.step(&mut model.params, &b.grads(&g))?;
    }
    Ok(model.params)
}

struct BoundBase<'a> {
    model: &'a BaseModel,
    params: &'a crate::params::Bindings,
}

impl crate::diffusion::NoisePredictor for BoundBase<'_> {
    type Cond = ();

    fn predict(&self, g: &mut Graph, x_t: crate::grad::Var, t: &[usize], text: crate::grad::Var, _: &()) -> Result<crate::grad::Var> {
        let net = crate::denoiser::UNet {
            cfg: &self.model.cfg,
            params: self.params,
        };
        Ok(net.base_forward(g, x_t, t, text, self.model.steps)?.0)
    }
}

/// Stepwise control-branch trainer.
pub struct Trainer {
    pub cfg: Config,
    pub set: TrainingSet,
    pub model: UniControl,
    pub opt: AdamW,
    schedule: NoiseSchedule,
    rng: Rng,
    instructions: Vec<Tensor>,
    step: usize,
}

impl Trainer {
    pub fn new(cfg: &Config, data: &Dataset) -> Result<Self> {
        cfg.validate()?;
        let set = TrainingSet::new(cfg, data)?;
        let model = initial_model(cfg, &set)?;
        Self::with_model(cfg, set, model)
    }

    pub fn with_model(cfg: &Config, set: TrainingSet, model: UniControl) -> Result<Self> {
        Ok(Self {
            schedule: cfg.schedule()?,
            rng: Rng::new(derive_seed(cfg.seed, 4)),
            instructions: cfg
                .tasks
                .iter()
                .map(|t| embedding_tensor(&encode_text(t.instruction)))
                .collect(),
            opt: AdamW::new(cfg.lr, cfg.weight_decay),
            cfg: cfg.clone(),
            set,
            model,
            step: 0,
        })
    }

    pub fn steps_done(&self) -> usize {
        self.step
    }

    /// Gradients for the next minibatch without updating anything. Uses a
    /// clone of the random stream, so it does not disturb training.
    pub fn peek_gradients(&self) -> Result<StepOutput> {
        let mut rng = self.rng.clone();
        self.compute(&mut rng)
    }

    fn compute(&self, rng: &mut Rng) -> Result<StepOutput> {
        let k = sample_task(rng, self.cfg.tasks.len())?;
        let part = &self.set.by_task[k];
        let idx: Vec<usize> = (0..self.cfg.batch_size)
            .map(|_| part[rng.below(part.len() as u64) as usize])
            .collect();
        let (x0, cond, text) = self.set.gather(&idx)?;
        let batch = TrainBatch {
            tasks: vec![k; idx.len()],
            x0,
            text,
            cond: ControlInput::single(k, cond, self.instructions[k].clone()),
        };
        let mut g = Graph::new();
        let own = crate::control::adapter_prefix(k);
        let b = self
            .model
            .params
            .bind_where(&mut g, |n| !n.starts_with("control.adapter.") || n.starts_with(own.as_str()));
        let loss = training_loss(&mut g, &self.model.bound(&b), &batch, &self.schedule, self.cfg.drop_prob, rng)?;
        g.backward(loss)?;
        Ok(StepOutput {
            step: self.step,
            task: k,
            loss: g.value(loss).item() as f64,
            grads: b.grads(&g),
        })
    }

    /// Sample a task and a minibatch, compute the loss and apply AdamW to
    /// every trainable tensor that received a gradient (the hypernet only
    /// before the freeze step).
    pub fn step(&mut self) -> Result<StepOutput> {
        let mut rng = self.rng.clone();
        let out = self.compute(&mut rng)?;
        self.rng = rng;
        let frozen_hyper = self.step >= self.cfg.freeze_step();
        let grads: BTreeMap<String, Vec<f32>> = out
            .grads
            .iter()
            .filter(|(n, _)| !(frozen_hyper && is_hypernet_param(n)))
            .map(|(n, g)| (n.clone(), g.clone()))
            .collect();
        self.opt.step(&mut self.model.params, &grads)?;
        self.step += 1;
        Ok(out)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let mut rng = self.rng.clone();
        Checkpoint {
            params: self.model.params.clone(),
            step: self.step as u64,
            config: self.cfg.pairs().into_iter().map(|(k, v)| (k.to_string(), v)).collect(),
            rng_state: rng.fork_seed(),
        }
    }
}

/// Run all configured steps, reporting each to `log`.
pub fn train(cfg: &Config, data: &Dataset, mut log: impl FnMut(&StepOutput)) -> Result<Checkpoint> {
    let mut tr = Trainer::new(cfg, data)?;
    for _ in 0..cfg.steps {
        let out = tr.step()?;
        log(&out);
    }
    Ok(tr.checkpoint())
}

/// Rebuild the unified model stored in a checkpoint.
pub fn model_from_checkpoint(ckpt: &Checkpoint) -> Result<(Config, UniControl)> {
    let cfg = Config::parse(&ckpt.config_text())?;
    let mut params = ckpt.params.clone();
    params.set_trainable(|_| true, false);
    params.set_trainable(is_control_param, true);
    let expected = assemble(&cfg.unet(), &cfg.control(), &init_base(&cfg.unet(), 0)?, 0)?;
    for (name, t) in expected.iter() {
        let got = params
            .get(name)
            .map_err(|_| Error::Config(format!("checkpoint lacks tensor {name}")))?;
        if got.shape() != t.shape() {
            return Err(Error::Shape {
                op: "checkpoint tensor",
                lhs: got.shape().to_vec(),
                rhs: t.shape().to_vec(),
            });
        }
    }
    if params.len() != expected.len() {
        return Err(Error::Config("checkpoint holds tensors the configured model does not use".into()));
    }
    let model = UniControl {
        unet: cfg.unet(),
        ctrl: cfg.control(),
        params,
        steps: cfg.t,
    };
    Ok((cfg, model))
}
