//! ImagineRNN: predicts the next frame feature from the current one, either
//! directly or as a residual on top of the input, and rolls itself forward
//! autoregressively.

use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::autodiff::{Graph, NodeId, ParamStore};
use crate::cells::{cell_step, linear_forward, CellParams, CellState, LinearParams};
use crate::error::{Error, Result};

#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash)]
pub enum PhiActivation {
    /// Plain affine map.
    Affine,
    Tanh,
}

impl fmt::Display for PhiActivation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PhiActivation::Affine => "affine",
            PhiActivation::Tanh => "tanh",
        })
    }
}

impl FromStr for PhiActivation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "affine" => Ok(PhiActivation::Affine),
            "tanh" => Ok(PhiActivation::Tanh),
            other => Err(Error::Config(format!(
                "unknown phi activation `{other}` (affine|tanh)"
            ))),
        }
    }
}

/// Projection from the ImagineRNN hidden space back to feature space.
#[derive(Clone, Debug, PartialEq)]
pub struct Phi {
    pub linear: LinearParams,
    pub activation: PhiActivation,
}

impl Phi {
    pub fn init<R: Rng>(
        store: &mut ParamStore,
        prefix: &str,
        d_h: usize,
        d_feat: usize,
        activation: PhiActivation,
        rng: &mut R,
    ) -> Self {
        Self {
            linear: LinearParams::init(store, prefix, d_h, d_feat, rng),
            activation,
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, h: NodeId) -> Result<NodeId> {
        let y = linear_forward(g, store, &self.linear, h)?;
        Ok(match self.activation {
            PhiActivation::Affine => y,
            PhiActivation::Tanh => g.tanh(y),
        })
    }
}

#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub struct ImaginationConfig {
    pub residual: bool,
    pub steps: usize,
}

impl ImaginationConfig {
    pub fn new(residual: bool, steps: usize) -> Result<Self> {
        if steps == 0 {
            return Err(Error::Config("imagination needs at least one step".into()));
        }
        Ok(Self { residual, steps })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ImaginedTrajectory {
    /// Predicted features for `t+1 ..= t+n`.
    pub features: Vec<NodeId>,
    /// ImagineRNN state after each step.
    pub states: Vec<CellState>,
    /// Raw `φ(h)` output of each step (the predicted change in residual mode).
    pub increments: Vec<NodeId>,
}

/// One ImagineRNN step: `h' = cell(f_prev, h)`, then `φ(h')` or, in residual
/// mode, `φ(h') + f_prev`. Returns `(f_hat, state', φ(h'))`.
pub fn imagine_step(
    g: &mut Graph,
    store: &ParamStore,
    cell: &CellParams,
    phi: &Phi,
    f_prev: NodeId,
    state: CellState,
    residual: bool,
) -> Result<(NodeId, CellState, NodeId)> {
    let (_, d_feat) = g.value(f_prev).dims2();
    if d_feat != phi.linear.d_out {
        return Err(Error::shape(
            "imagine_step",
            g.shape(f_prev),
            &[phi.linear.d_out],
        ));
    }
    let next = cell_step(g, store, cell, f_prev, state)?;
    let increment = phi.forward(g, store, next.h)?;
    let f_hat = if residual {
        g.add(increment, f_prev)?
    } else {
        increment
    };
    Ok((f_hat, next, increment))
}

/// Autoregressive rollout of `cfg.steps` imagined frames starting from the
/// last observed frame.
///
/// With `teacher` set, steps after the first consume the given ground-truth
/// frames (`teacher[k]` is the true frame at `t+k+1`) instead of the model's
/// own predictions.
pub fn rollout(
    g: &mut Graph,
    store: &ParamStore,
    cell: &CellParams,
    phi: &Phi,
    f_last_observed: NodeId,
    state: CellState,
    cfg: ImaginationConfig,
    teacher: Option<&[NodeId]>,
) -> Result<ImaginedTrajectory> {
    if let Some(t) = teacher {
        if t.len() + 1 < cfg.steps {
            return Err(Error::Contract(format!(
                "teacher forcing needs {} frames, got {}",
                cfg.steps - 1,
                t.len()
            )));
        }
    }
    let mut features = Vec::with_capacity(cfg.steps);
    let mut states = Vec::with_capacity(cfg.steps);
    let mut increments = Vec::with_capacity(cfg.steps);
    let mut input = f_last_observed;
    let mut state = state;
    for k in 0..cfg.steps {
        let (f_hat, next, inc) = imagine_step(g, store, cell, phi, input, state, cfg.residual)?;
        features.push(f_hat);
        states.push(next);
        increments.push(inc);
        state = next;
        input = match teacher {
            Some(t) if k < t.len() => t[k],
            _ => f_hat,
        };
    }
    Ok(ImaginedTrajectory {
        features,
        states,
        increments,
    })
}
