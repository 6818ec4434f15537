//! Finite-difference verification of analytic gradients, run in `f64`.

use std::fmt;

use super::graph::{Graph, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::rng::Rng;

pub type LossFn = Box<dyn Fn(&mut Graph<f64>, &[Var]) -> Result<Var>>;

/// A scalar function of named parameters. Parameters whose
/// `requires_grad` is false are treated as frozen and are not checked.
pub struct GradCase {
    pub params: Vec<(String, Tensor<f64>)>,
    pub loss: LossFn,
}

#[derive(Debug, Clone, Copy)]
pub struct GradCheckOptions {
    /// Central-difference step.
    pub step: f64,
    /// Check at most this many entries per tensor, chosen by seed.
    pub max_entries: Option<usize>,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-3,
            max_entries: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradEntry {
    pub name: String,
    pub checked: usize,
    /// `|a - n| / max(|a|, |n|)` over the checked entries, 0 when both vanish.
    pub rel_error: f64,
    pub max_abs_error: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct GradReport {
    pub entries: Vec<GradEntry>,
}

impl GradReport {
    pub fn worst(&self) -> f64 {
        self.entries.iter().map(|e| e.rel_error).fold(0.0, f64::max)
    }

    pub fn passes(&self, tol: f64) -> bool {
        self.entries.iter().all(|e| e.rel_error < tol)
    }
}

impl fmt::Display for GradReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for e in &self.entries {
            writeln!(
                f,
                "{}\t{}\t{:.6e}\t{:.6e}",
                e.name, e.checked, e.rel_error, e.max_abs_error
            )?;
        }
        Ok(())
    }
}

/// Norms below this are treated as an exact zero gradient.
const ZERO_FLOOR: f64 = 1e-10;

fn evaluate(case: &GradCase, params: &[(String, Tensor<f64>)]) -> Result<(Graph<f64>, Var, Vec<Var>)> {
    let mut g = Graph::new();
    let vars: Vec<Var> = params.iter().map(|(_, t)| g.leaf(t.clone())).collect();
    let loss = (case.loss)(&mut g, &vars)?;
    Ok((g, loss, vars))
}

pub fn gradcheck<F>(builder: F, seed: u64) -> Result<GradReport>
where
    F: Fn(u64) -> Result<GradCase>,
{
    gradcheck_with(builder, seed, GradCheckOptions::default())
}

pub fn gradcheck_with<F>(builder: F, seed: u64, opts: GradCheckOptions) -> Result<GradReport>
where
    F: Fn(u64) -> Result<GradCase>,
{
    let case = builder(seed)?;
    let (mut g, loss, vars) = evaluate(&case, &case.params)?;
    if g.value(loss).numel() != 1 {
        return Err(Error::NotScalar(g.shape(loss).to_vec()));
    }
    g.backward(loss)?;

    let mut rng = Rng::new(seed ^ 0x6772_6164_6368_6b21);
    let mut params = case.params.clone();
    let mut report = GradReport::default();
    for (pi, var) in vars.iter().enumerate() {
        if !params[pi].1.requires_grad {
            continue;
        }
        let analytic = g.grad(*var).expect("leaf requiring grad has a grad").to_vec();
        let numel = analytic.len();
        let idx: Vec<usize> = match opts.max_entries {
            Some(m) if m < numel => (0..m).map(|_| rng.below(numel as u64) as usize).collect(),
            _ => (0..numel).collect(),
        };
        let mut diff2 = 0.0;
        let mut a2 = 0.0;
        let mut n2 = 0.0;
        let mut max_abs: f64 = 0.0;
        for &i in &idx {
            let orig = params[pi].1.data()[i];
            params[pi].1.data_mut()[i] = orig + opts.step;
            let (gp, lp, _) = evaluate(&case, &params)?;
            params[pi].1.data_mut()[i] = orig - opts.step;
            let (gm, lm, _) = evaluate(&case, &params)?;
            params[pi].1.data_mut()[i] = orig;
            let numeric = (gp.value(lp).item() - gm.value(lm).item()) / (2.0 * opts.step);
            let a = analytic[i];
            diff2 += (a - numeric) * (a - numeric);
            a2 += a * a;
            n2 += numeric * numeric;
            max_abs = max_abs.max((a - numeric).abs());
        }
        let denom = a2.sqrt().max(n2.sqrt());
        let rel_error = if denom < ZERO_FLOOR {
            0.0
        } else {
            diff2.sqrt() / denom
        };
        report.entries.push(GradEntry {
            name: params[pi].0.clone(),
            checked: idx.len(),
            rel_error,
            max_abs_error: max_abs,
        });
    }
    Ok(report)
}
