//! LSTM/GRU cell steps and affine layers.
//!
//! All inputs are row batches: `x` is `[batch × d_in]`, hidden states are
//! `[batch × d_h]`. A single vector is a batch of one.
//!
//! Gate conventions:
//! - LSTM gates are ordered `i, f, g, o`:
//!   `c' = f ⊙ c + i ⊙ g`, `h' = o ⊙ tanh(c')`.
//! - GRU gates are ordered `r, z, n` (reset, update, candidate):
//!   `n = tanh(W_n [x, r ⊙ h] + b_n)`, `h' = h + z ⊙ (n − h)`, so an update
//!   gate of zero carries the previous state through unchanged.
//!
//! Every gate owns a `[d_h × (d_in + d_h)]` matrix applied to the
//! concatenation `[x, h]` and a `[d_h]` bias.

use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::autodiff::{Graph, NodeId, ParamId, ParamStore, Tensor};
use crate::error::{Error, Result};

#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash)]
pub enum CellKind {
    Lstm,
    Gru,
}

impl CellKind {
    pub fn num_gates(self) -> usize {
        match self {
            CellKind::Lstm => 4,
            CellKind::Gru => 3,
        }
    }

    fn gate_names(self) -> &'static [&'static str] {
        match self {
            CellKind::Lstm => &["i", "f", "g", "o"],
            CellKind::Gru => &["r", "z", "n"],
        }
    }
}

impl fmt::Display for CellKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            CellKind::Lstm => "lstm",
            CellKind::Gru => "gru",
        })
    }
}

impl FromStr for CellKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "lstm" => Ok(CellKind::Lstm),
            "gru" => Ok(CellKind::Gru),
            other => Err(Error::Config(format!(
                "unknown cell kind `{other}` (lstm|gru)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CellParams {
    pub kind: CellKind,
    pub d_in: usize,
    pub d_h: usize,
    pub weights: Vec<ParamId>,
    pub biases: Vec<ParamId>,
}

impl CellParams {
    /// Registers gate weights under `<prefix>.w_<gate>` / `<prefix>.b_<gate>`.
    /// Weights are uniform in `±1/sqrt(d_in + d_h)`, biases zero except the
    /// LSTM forget gate which starts at `forget_bias`.
    pub fn init<R: Rng>(
        store: &mut ParamStore,
        prefix: &str,
        kind: CellKind,
        d_in: usize,
        d_h: usize,
        forget_bias: f64,
        rng: &mut R,
    ) -> Self {
        let fan_in = d_in + d_h;
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for &gate in kind.gate_names() {
            weights.push(store.add_uniform(
                format!("{prefix}.w_{gate}"),
                &[d_h, fan_in],
                fan_in,
                rng,
            ));
            let b = if kind == CellKind::Lstm && gate == "f" {
                forget_bias
            } else {
                0.0
            };
            biases.push(store.add(format!("{prefix}.b_{gate}"), Tensor::filled(&[d_h], b)));
        }
        Self {
            kind,
            d_in,
            d_h,
            weights,
            biases,
        }
    }

    /// Looks up an existing cell by its parameter names.
    pub fn bind(store: &ParamStore, prefix: &str, kind: CellKind) -> Result<Self> {
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for &gate in kind.gate_names() {
            weights.push(lookup(store, &format!("{prefix}.w_{gate}"))?);
            biases.push(lookup(store, &format!("{prefix}.b_{gate}"))?);
        }
        let shape = store.value(weights[0]).shape();
        let d_h = shape[0];
        let d_in = shape[1]
            .checked_sub(d_h)
            .filter(|&d| d > 0)
            .ok_or_else(|| {
                Error::Contract(format!("{prefix}: gate matrix {shape:?} too narrow"))
            })?;
        let params = Self {
            kind,
            d_in,
            d_h,
            weights,
            biases,
        };
        params.validate(store)?;
        Ok(params)
    }

    pub fn validate(&self, store: &ParamStore) -> Result<()> {
        let w_shape = [self.d_h, self.d_in + self.d_h];
        for (&w, &b) in self.weights.iter().zip(&self.biases) {
            if store.value(w).shape() != w_shape {
                return Err(Error::shape(
                    "cell weights",
                    store.value(w).shape(),
                    &w_shape,
                ));
            }
            if store.value(b).shape() != [self.d_h] {
                return Err(Error::shape(
                    "cell bias",
                    store.value(b).shape(),
                    &[self.d_h],
                ));
            }
        }
        Ok(())
    }

    fn gate(&self, g: &mut Graph, store: &ParamStore, idx: usize, input: NodeId) -> Result<NodeId> {
        let w = g.param(store, self.weights[idx]);
        let b = g.param(store, self.biases[idx]);
        let pre = g.matmul_nt(input, w)?;
        g.add_bias(pre, b)
    }
}

pub(crate) fn lookup(store: &ParamStore, name: &str) -> Result<ParamId> {
    store
        .find(name)
        .ok_or_else(|| Error::Contract(format!("missing parameter `{name}`")))
}

#[derive(Copy, Clone, Debug, PartialEq)]
pub struct CellState {
    pub h: NodeId,
    /// Memory cell; only present for LSTMs.
    pub c: Option<NodeId>,
}

impl CellState {
    pub fn zeros(g: &mut Graph, kind: CellKind, batch: usize, d_h: usize) -> Self {
        let h = g.leaf(Tensor::zeros(&[batch, d_h]));
        let c = (kind == CellKind::Lstm).then(|| g.leaf(Tensor::zeros(&[batch, d_h])));
        Self { h, c }
    }
}

pub fn cell_step(
    g: &mut Graph,
    store: &ParamStore,
    params: &CellParams,
    x: NodeId,
    state: CellState,
) -> Result<CellState> {
    let (batch, d_in) = g.value(x).dims2();
    if d_in != params.d_in {
        return Err(Error::shape(
            "cell_step input",
            g.shape(x),
            &[batch, params.d_in],
        ));
    }
    if g.value(state.h).dims2() != (batch, params.d_h) {
        return Err(Error::shape(
            "cell_step state",
            g.shape(state.h),
            &[batch, params.d_h],
        ));
    }
    match params.kind {
        CellKind::Lstm => {
            let c = state
                .c
                .ok_or_else(|| Error::Contract("LSTM step needs a memory cell".into()))?;
            let xh = g.concat_cols(&[x, state.h])?;
            let i = params.gate(g, store, 0, xh)?;
            let i = g.sigmoid(i);
            let f = params.gate(g, store, 1, xh)?;
            let f = g.sigmoid(f);
            let cand = params.gate(g, store, 2, xh)?;
            let cand = g.tanh(cand);
            let o = params.gate(g, store, 3, xh)?;
            let o = g.sigmoid(o);
            let keep = g.mul(f, c)?;
            let write = g.mul(i, cand)?;
            let c_next = g.add(keep, write)?;
            let squashed = g.tanh(c_next);
            let h_next = g.mul(o, squashed)?;
            Ok(CellState {
                h: h_next,
                c: Some(c_next),
            })
        }
        CellKind::Gru => {
            let xh = g.concat_cols(&[x, state.h])?;
            let r = params.gate(g, store, 0, xh)?;
            let r = g.sigmoid(r);
            let z = params.gate(g, store, 1, xh)?;
            let z = g.sigmoid(z);
            let rh = g.mul(r, state.h)?;
            let xrh = g.concat_cols(&[x, rh])?;
            let n = params.gate(g, store, 2, xrh)?;
            let n = g.tanh(n);
            let delta = g.sub(n, state.h)?;
            let step = g.mul(z, delta)?;
            let h_next = g.add(state.h, step)?;
            Ok(CellState { h: h_next, c: None })
        }
    }
}

/// `y = x Wᵀ + b` with `W: [d_out × d_in]`.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearParams {
    pub d_in: usize,
    pub d_out: usize,
    pub weight: ParamId,
    pub bias: ParamId,
}

impl LinearParams {
    pub fn init<R: Rng>(
        store: &mut ParamStore,
        prefix: &str,
        d_in: usize,
        d_out: usize,
        rng: &mut R,
    ) -> Self {
        let weight = store.add_uniform(format!("{prefix}.weight"), &[d_out, d_in], d_in, rng);
        let bias = store.add(format!("{prefix}.bias"), Tensor::zeros(&[d_out]));
        Self {
            d_in,
            d_out,
            weight,
            bias,
        }
    }

    pub fn bind(store: &ParamStore, prefix: &str) -> Result<Self> {
        let weight = lookup(store, &format!("{prefix}.weight"))?;
        let bias = lookup(store, &format!("{prefix}.bias"))?;
        let shape = store.value(weight).shape();
        if shape.len() != 2 || store.value(bias).shape() != [shape[0]] {
            return Err(Error::shape(
                "linear bind",
                shape,
                store.value(bias).shape(),
            ));
        }
        Ok(Self {
            d_in: shape[1],
            d_out: shape[0],
            weight,
            bias,
        })
    }
}

pub fn linear_forward(
    g: &mut Graph,
    store: &ParamStore,
    params: &LinearParams,
    x: NodeId,
) -> Result<NodeId> {
    let (_, d_in) = g.value(x).dims2();
    if d_in != params.d_in {
        return Err(Error::shape("linear_forward", g.shape(x), &[params.d_in]));
    }
    let w = g.param(store, params.weight);
    let b = g.param(store, params.bias);
    let y = g.matmul_nt(x, w)?;
    g.add_bias(y, b)
}
