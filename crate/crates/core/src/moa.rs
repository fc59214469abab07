//! Parallel FFN adapters and the per-task router that mixes them.
//!
//! An adapter is `H(X) = W_u relu(W_d X)` with no biases, added next to a
//! frozen FFN: `O = F(X) + H(X)`. With K adapters and a task type `t`, the
//! router computes `O^t = F(X) + sum_k G[t,k] * H_k(X)` where each gate
//! `G[t,k]` is a trainable vector of width D broadcast over batch and
//! sequence positions.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::params::{Ctx, Group, ParamStore};
use crate::tensor::{Rng, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskType {
    ImageLevel,
    RegionLevel,
}

impl TaskType {
    pub const ALL: [TaskType; 2] = [TaskType::ImageLevel, TaskType::RegionLevel];

    /// Row of the gate tensor, and the adapter owned by this task at init.
    pub fn index(self) -> usize {
        match self {
            TaskType::ImageLevel => 0,
            TaskType::RegionLevel => 1,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            TaskType::ImageLevel => "image_level",
            TaskType::RegionLevel => "region_level",
        }
    }

    pub fn adapter_group(self) -> Group {
        match self {
            TaskType::ImageLevel => Group::AdapterImg,
            TaskType::RegionLevel => Group::AdapterReg,
        }
    }
}

impl fmt::Display for TaskType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for TaskType {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        TaskType::ALL
            .into_iter()
            .find(|t| t.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown task type {s:?}")))
    }
}

/// Adapter widths; W_d is `[d_model, rank]`, W_u is `[rank, d_model]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AdapterConfig {
    pub d_model: usize,
    pub rank: usize,
}

/// W_d ~ N(0, 0.02), W_u = 0, so a fresh adapter contributes exactly nothing.
pub fn init_adapter(
    store: &mut ParamStore,
    prefix: &str,
    cfg: &AdapterConfig,
    group: Group,
    rng: &mut Rng,
) -> Result<()> {
    if cfg.rank == 0 {
        return Err(Error::Config("adapter rank must be >= 1".into()));
    }
    store.randn(
        format!("{prefix}.down"),
        &[cfg.d_model, cfg.rank],
        0.02,
        group,
        rng,
    )?;
    store.zeros(format!("{prefix}.up"), &[cfg.rank, cfg.d_model], group)
}

/// `relu(X W_d) W_u`, position-wise over `X[..., D]`.
pub fn adapter_forward(ctx: &mut Ctx, prefix: &str, x: Var) -> Result<Var> {
    let down = ctx.param(&format!("{prefix}.down"))?;
    let up = ctx.param(&format!("{prefix}.up"))?;
    let d = ctx.tape.value(x).last_dim();
    let dd = ctx.tape.shape(down)[0];
    if d != dd {
        return Err(Error::shape(format!(
            "adapter {prefix} expects width {dd}, input has {d}"
        )));
    }
    let h = ctx.tape.matmul(x, down)?;
    let h = ctx.tape.relu(h);
    ctx.tape.matmul(h, up)
}

/// `F(X) + H(X)`.
pub fn adapter_residual(tape: &mut Tape, ffn_out: Var, adapter_out: Var) -> Result<Var> {
    if tape.shape(ffn_out) != tape.shape(adapter_out) {
        return Err(Error::shape(format!(
            "adapter output {:?} does not match ffn output {:?}",
            tape.shape(adapter_out),
            tape.shape(ffn_out)
        )));
    }
    tape.add(ffn_out, adapter_out)
}

/// `F(X) + sum_k G[t,k] * H_k(X)` with `gates[T, K, D]`.
pub fn router_forward(
    tape: &mut Tape,
    ffn_out: Var,
    adapter_outs: &[Var],
    gates: Var,
    task: TaskType,
) -> Result<Var> {
    let gs = tape.shape(gates).to_vec();
    if gs.len() != 3 {
        return Err(Error::shape(format!("gates must be [T, K, D], got {gs:?}")));
    }
    if adapter_outs.is_empty() || gs[1] != adapter_outs.len() {
        return Err(Error::shape(format!(
            "gates cover {} adapters, {} adapter outputs given",
            gs[1],
            adapter_outs.len()
        )));
    }
    let shape = tape.shape(ffn_out).to_vec();
    if shape.last() != Some(&gs[2]) {
        return Err(Error::shape(format!(
            "gate width {} vs hidden {shape:?}",
            gs[2]
        )));
    }
    if let Some(&bad) = adapter_outs
        .iter()
        .find(|&&h| tape.shape(h) != shape.as_slice())
    {
        return Err(Error::shape(format!(
            "adapter output {:?} does not match ffn output {shape:?}",
            tape.shape(bad)
        )));
    }
    if task.index() >= gs[0] {
        return Err(Error::shape(format!("no gate row for task {task}")));
    }
    let task_gates = tape.select(gates, task.index())?;
    let mut out = ffn_out;
    for (k, &h) in adapter_outs.iter().enumerate() {
        let g = tape.select(task_gates, k)?;
        let scaled = tape.mul(h, g)?;
        out = tape.add(out, scaled)?;
    }
    Ok(out)
}

/// Task-identity gates: each task's own adapter (index = task index) gets a
/// unit gate, every cross term is zero. Shape `[2, K, D]`.
pub fn init_gates(k: usize, d: usize) -> Result<Tensor> {
    if k == 0 {
        return Err(Error::Config("router needs at least one adapter".into()));
    }
    let t = TaskType::ALL.len();
    let mut g = Tensor::zeros(&[t, k, d])?;
    for task in TaskType::ALL {
        let ti = task.index();
        if ti < k {
            let start = (ti * k + ti) * d;
            g.data_mut()[start..start + d].fill(1.0);
        }
    }
    Ok(g)
}
