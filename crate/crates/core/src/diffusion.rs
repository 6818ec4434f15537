//! Forward noising, the epsilon-prediction loss, classifier-free guidance
//! and a deterministic DDIM sampler.

use crate::error::{Error, Result};
use crate::grad::{Graph, Real, Tensor, Var};
use crate::rng::Rng;

/// Linear beta schedule with cumulative products, indexed by `t` in `1..=T`.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

impl NoiseSchedule {
    pub fn linear(steps: usize, beta_min: f64, beta_max: f64) -> Result<Self> {
        if steps == 0 {
            return Err(Error::invalid("schedule: T must be at least 1"));
        }
        if !(beta_min > 0.0 && beta_min <= beta_max && beta_max < 1.0) {
            return Err(Error::invalid(format!(
                "schedule: need 0 < beta_min <= beta_max < 1, got {beta_min}..{beta_max}"
            )));
        }
        let denom = (steps - 1).max(1) as f64;
        let betas: Vec<f64> = (0..steps)
            .map(|i| beta_min + i as f64 / denom * (beta_max - beta_min))
            .collect();
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let mut acc = 1.0;
        let alpha_bars = alphas
            .iter()
            .map(|a| {
                acc *= a;
                acc
            })
            .collect();
        Ok(Self {
            betas,
            alphas,
            alpha_bars,
        })
    }

    /// Number of diffusion steps `T`.
    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alphas[t - 1]
    }

    /// Cumulative product up to `t`; `alpha_bar(0)` is 1.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bars[t - 1]
        }
    }

    fn check_t(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps() {
            return Err(Error::invalid(format!(
                "timestep {t} outside 1..={}",
                self.steps()
            )));
        }
        Ok(())
    }
}

/// `sqrt(ab_t) x0 + sqrt(1 - ab_t) eps`.
pub fn add_noise(x0: &Tensor, t: usize, eps: &Tensor, schedule: &NoiseSchedule) -> Result<Tensor> {
    add_noise_batch(x0, &[t], eps, schedule)
}

/// Batched `add_noise`; `ts` has one entry per leading-axis sample (or a
/// single entry applied to all).
pub fn add_noise_batch(x0: &Tensor, ts: &[usize], eps: &Tensor, schedule: &NoiseSchedule) -> Result<Tensor> {
    if x0.shape() != eps.shape() {
        return Err(Error::Shape {
            op: "add_noise",
            lhs: x0.shape().to_vec(),
            rhs: eps.shape().to_vec(),
        });
    }
    for &t in ts {
        schedule.check_t(t)?;
    }
    let per = x0.numel() / ts.len().max(1);
    let data = x0
        .data()
        .iter()
        .zip(eps.data())
        .enumerate()
        .map(|(i, (&x, &e))| {
            let ab = schedule.alpha_bar(ts[(i / per).min(ts.len() - 1)]);
            (ab.sqrt() * x as f64 + (1.0 - ab).sqrt() * e as f64) as f32
        })
        .collect();
    Tensor::new(x0.shape().to_vec(), data)
}

/// Clean-image estimate implied by a noise prediction at step `t`.
pub fn predict_x0(x_t: &Tensor, eps: &Tensor, t: usize, schedule: &NoiseSchedule) -> Result<Tensor> {
    schedule.check_t(t)?;
    if x_t.shape() != eps.shape() {
        return Err(Error::Shape {
            op: "predict_x0",
            lhs: x_t.shape().to_vec(),
            rhs: eps.shape().to_vec(),
        });
    }
    let ab = schedule.alpha_bar(t);
    let data = x_t
        .data()
        .iter()
        .zip(eps.data())
        .map(|(&x, &e)| ((x as f64 - (1.0 - ab).sqrt() * e as f64) / ab.sqrt()) as f32)
        .collect();
    Tensor::new(x_t.shape().to_vec(), data)
}

/// Anything that predicts the added noise for a batch `x_t: [N, 3, S, S]`
/// at per-sample steps `t`, with text embeddings `text: [N, D]`.
pub trait NoisePredictor<T: Real = f32> {
    /// Visual conditioning the predictor consumes; `()` for none.
    type Cond;

    fn predict(&self, g: &mut Graph<T>, x_t: Var, t: &[usize], text: Var, cond: &Self::Cond) -> Result<Var>;
}

/// A single-task minibatch.
#[derive(Debug, Clone)]
pub struct TrainBatch<C> {
    pub tasks: Vec<usize>,
    pub x0: Tensor,
    /// `[N, D]` prompt embeddings.
    pub text: Tensor,
    pub cond: C,
}

impl<C> TrainBatch<C> {
    pub fn task(&self) -> Result<usize> {
        let first = *self
            .tasks
            .first()
            .ok_or_else(|| Error::invalid("training batch is empty"))?;
        if self.tasks.iter().any(|&k| k != first) {
            return Err(Error::invalid(format!(
                "training batch mixes tasks {:?}; each minibatch must come from one task",
                self.tasks
            )));
        }
        Ok(first)
    }
}

/// Noise-prediction loss on one minibatch: per sample `t ~ U[1, T]`,
/// `eps ~ N(0, I)`, and the prompt embedding replaced by the null
/// (all-zero) embedding with probability `drop_prob`. The task instruction
/// and the visual condition are never dropped.
pub fn training_loss<M: NoisePredictor>(
    g: &mut Graph,
    model: &M,
    batch: &TrainBatch<M::Cond>,
    schedule: &NoiseSchedule,
    drop_prob: f64,
    rng: &mut Rng,
) -> Result<Var> {
    batch.task()?;
    let n = batch.tasks.len();
    let xs = batch.x0.shape();
    if xs.first() != Some(&n) || batch.text.shape().first() != Some(&n) {
        return Err(Error::Shape {
            op: "training_loss",
            lhs: xs.to_vec(),
            rhs: batch.text.shape().to_vec(),
        });
    }
    let per = batch.x0.numel() / n;
    let dim = batch.text.numel() / n;
    let mut ts = Vec::with_capacity(n);
    let mut text = batch.text.clone();
    let mut eps = Vec::with_capacity(batch.x0.numel());
    for i in 0..n {
        ts.push(rng.below(schedule.steps() as u64) as usize + 1);
        if rng.bernoulli(drop_prob) {
            text.data_mut()[i * dim..(i + 1) * dim].fill(0.0);
        }
        eps.extend(rng.normal_vec(per));
    }
    let eps = Tensor::new(xs.to_vec(), eps)?;
    let x_t = add_noise_batch(&batch.x0, &ts, &eps, schedule)?;
    let x_t = g.constant(x_t);
    let text = g.constant(text.with_grad(false));
    let pred = model.predict(g, x_t, &ts, text, &batch.cond)?;
    let target = g.constant(eps);
    g.mse(pred, target)
}

/// `eps_uncond + w (eps_cond - eps_uncond)`, evaluated as
/// `(1 - w) eps_uncond + w eps_cond` so both `w = 0` and `w = 1` are exact.
pub fn cfg_combine(eps_cond: &Tensor, eps_uncond: &Tensor, w: f64) -> Result<Tensor> {
    if eps_cond.shape() != eps_uncond.shape() {
        return Err(Error::Shape {
            op: "cfg_combine",
            lhs: eps_cond.shape().to_vec(),
            rhs: eps_uncond.shape().to_vec(),
        });
    }
    let data = eps_cond
        .data()
        .iter()
        .zip(eps_uncond.data())
        .map(|(&c, &u)| ((1.0 - w) * u as f64 + w * c as f64) as f32)
        .collect();
    Tensor::new(eps_cond.shape().to_vec(), data)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GuidanceConfig {
    pub weight: f64,
    pub steps: usize,
    pub prompt_drop_prob: f64,
    /// Clamp each intermediate clean-image estimate to `[-1, 1]`.
    pub clip_x0: bool,
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        Self {
            weight: 9.0,
            steps: 50,
            prompt_drop_prob: 0.30,
            clip_x0: true,
        }
    }
}

impl GuidanceConfig {
    pub fn validate(&self, schedule: &NoiseSchedule) -> Result<()> {
        if !(self.weight >= 0.0) {
            return Err(Error::invalid("guidance weight must be >= 0"));
        }
        if self.steps == 0 || self.steps > schedule.steps() {
            return Err(Error::invalid(format!(
                "sampling steps {} outside 1..={}",
                self.steps,
                schedule.steps()
            )));
        }
        if !(0.0..=1.0).contains(&self.prompt_drop_prob) {
            return Err(Error::invalid("prompt drop probability must lie in [0, 1]"));
        }
        Ok(())
    }
}

/// Evenly spaced increasing subsequence of `1..=T` ending at `T`.
pub fn ddim_timesteps(total: usize, steps: usize) -> Vec<usize> {
    (0..steps).map(|k| ((k + 1) * total).div_ceil(steps)).collect()
}

/// Deterministic (eta = 0) DDIM with classifier-free guidance. Starts from
/// seeded standard-normal noise of `shape` (`[N, 3, S, S]`); `text` is the
/// `[N, D]` prompt embedding, the unconditional branch uses zeros.
pub fn ddim_sample<M: NoisePredictor>(
    model: &M,
    cond: &M::Cond,
    text: &Tensor,
    shape: &[usize],
    schedule: &NoiseSchedule,
    guidance: &GuidanceConfig,
    seed: u64,
) -> Result<Tensor> {
    guidance.validate(schedule)?;
    let n = shape[0];
    let numel: usize = shape.iter().product();
    let mut rng = Rng::new(seed);
    let mut x = Tensor::new(shape.to_vec(), rng.normal_vec(numel))?;
    let null = Tensor::zeros(text.shape().to_vec());
    let ts = ddim_timesteps(schedule.steps(), guidance.steps);

    let eval = |x: &Tensor, t: usize, text: &Tensor| -> Result<Tensor> {
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let tv = g.constant(text.clone());
        let out = model.predict(&mut g, xv, &vec![t; n], tv, cond)?;
        Ok(g.take(out))
    };

    for k in (0..ts.len()).rev() {
        let t = ts[k];
        let t_prev = if k == 0 { 0 } else { ts[k - 1] };
        let eps_c = eval(&x, t, text)?;
        let eps = if guidance.weight == 1.0 {
            eps_c
        } else {
            let eps_u = eval(&x, t, &null)?;
            cfg_combine(&eps_c, &eps_u, guidance.weight)?
        };
        let ab = schedule.alpha_bar(t);
        let ab_prev = schedule.alpha_bar(t_prev);
        let data = x
            .data()
            .iter()
            .zip(eps.data())
            .map(|(&xv, &e)| {
                let (xv, e) = (xv as f64, e as f64);
                let mut x0 = (xv - (1.0 - ab).sqrt() * e) / ab.sqrt();
                if guidance.clip_x0 {
                    x0 = x0.clamp(-1.0, 1.0);
                }
                (ab_prev.sqrt() * x0 + (1.0 - ab_prev).sqrt() * e) as f32
            })
            .collect();
        x = Tensor::new(shape.to_vec(), data)?;
        if !x.all_finite() {
            return Err(Error::NonFinite { op: "ddim_sample" });
        }
    }
    for v in x.data_mut() {
        *v = v.clamp(-1.0, 1.0);
    }
    Ok(x)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_step_schedule() {
        let s = NoiseSchedule::linear(1, 0.01, 0.02).unwrap();
        assert_eq!(s.beta(1), 0.01);
        assert_eq!(s.alpha_bar(1), 0.99);
    }

    #[test]
    fn schedule_rejects_bad_ranges() {
        assert!(NoiseSchedule::linear(0, 1e-4, 0.02).is_err());
        assert!(NoiseSchedule::linear(10, 0.0, 0.02).is_err());
        assert!(NoiseSchedule::linear(10, 0.03, 0.02).is_err());
        assert!(NoiseSchedule::linear(10, 1e-4, 1.0).is_err());
    }

    #[test]
    fn timesteps_cover_range() {
        assert_eq!(ddim_timesteps(200, 1), vec![200]);
        assert_eq!(ddim_timesteps(10, 10), (1..=10).collect::<Vec<_>>());
        let ts = ddim_timesteps(200, 50);
        assert_eq!(ts.len(), 50);
        assert_eq!(*ts.last().unwrap(), 200);
        assert!(ts.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn add_noise_rejects_bad_t() {
        let s = NoiseSchedule::linear(10, 1e-4, 0.02).unwrap();
        let x = Tensor::zeros([3]);
        assert!(add_noise(&x, 0, &x, &s).is_err());
        assert!(add_noise(&x, 11, &x, &s).is_err());
    }

    #[test]
    fn mixed_task_batch_rejected() {
        let b = TrainBatch {
            tasks: vec![0, 1],
            x0: Tensor::zeros([2, 1]),
            text: Tensor::zeros([2, 1]),
            cond: (),
        };
        assert!(b.task().is_err());
    }

    #[test]
    fn guidance_validation() {
        let s = NoiseSchedule::linear(20, 1e-4, 0.02).unwrap();
        let mut g = GuidanceConfig::default();
        assert!(g.validate(&s).is_err()); // 50 > 20
        g.steps = 20;
        assert!(g.validate(&s).is_ok());
        g.weight = -1.0;
        assert!(g.validate(&s).is_err());
    }
}
