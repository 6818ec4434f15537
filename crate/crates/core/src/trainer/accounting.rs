use std::fmt;

use crate::control::{adapter_prefix, is_control_param, COPY_PREFIX};
use crate::params::ParamStore;

/// Parameter counts of a unified model against a stack of single-task
/// models, each of which would carry its own encoder copy, zero bridges
/// and one adapter over the shared frozen base.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamTable {
    pub tasks: usize,
    pub base: usize,
    pub control_copy: usize,
    pub zero_convs: usize,
    pub adapters: Vec<usize>,
    pub hypernet: usize,
}

impl ParamTable {
    pub fn adapters_total(&self) -> usize {
        self.adapters.iter().sum()
    }

    /// Encoder copy plus zero bridges: what every single-task branch needs.
    pub fn control_branch(&self) -> usize {
        self.control_copy + self.zero_convs
    }

    pub fn unified_total(&self) -> usize {
        self.base + self.control_branch() + self.adapters_total() + self.hypernet
    }

    pub fn single_task_control(&self) -> usize {
        self.control_branch() + self.adapters.first().copied().unwrap_or(0)
    }

    pub fn stacked_total(&self) -> usize {
        self.base + self.tasks * self.single_task_control()
    }
}

pub fn count_params(params: &ParamStore, tasks: usize) -> ParamTable {
    ParamTable {
        tasks,
        base: params.count(|n| !is_control_param(n)),
        control_copy: params.count(|n| n.starts_with(COPY_PREFIX)),
        zero_convs: params.count(|n| n.starts_with("control.zero_")),
        adapters: (0..tasks)
            .map(|k| {
                let p = adapter_prefix(k);
                params.count(|n| n.starts_with(p.as_str()))
            })
            .collect(),
        hypernet: params.count(|n| n.starts_with("control.hyper.")),
    }
}

/// Published full-scale figures in millions: base, control branch, adapter
/// per task, hypernet, unified total, nine-model stack.
pub const PAPER_SCALE: [(&str, f64); 6] = [
    ("base denoiser", 1065.7),
    ("control branch", 361.0),
    ("adapter per task", 0.06),
    ("hypernet", 12.7),
    ("unified total", 1440.0),
    ("stacked 9-task total", 4320.0),
];

fn millions(n: usize) -> String {
    format!("{:.3}M", n as f64 / 1e6)
}

impl fmt::Display for ParamTable {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "component\tparams\tshare")?;
        let row = |f: &mut fmt::Formatter<'_>, name: &str, n: usize| writeln!(f, "{name}\t{n}\t{}", millions(n));
        row(f, "base denoiser (frozen)", self.base)?;
        row(f, "control encoder copy", self.control_copy)?;
        row(f, "zero convolutions", self.zero_convs)?;
        for (k, &a) in self.adapters.iter().enumerate() {
            row(f, &format!("adapter {k}"), a)?;
        }
        row(f, "hypernet", self.hypernet)?;
        row(f, "unified total", self.unified_total())?;
        row(f, &format!("stacked {}-model total", self.tasks), self.stacked_total())?;
        writeln!(f)?;
        writeln!(f, "full-scale reference (millions)")?;
        for (name, m) in PAPER_SCALE {
            writeln!(f, "{name}\t{m}")?;
        }
        writeln!(f, "full-scale unified vs stacked: 1.44B vs 4.32B")
    }
}
