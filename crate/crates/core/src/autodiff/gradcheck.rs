//! Central finite-difference checks of analytic gradients.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{FaultInjection, Graph, NodeId, ParamId, ParamStore, Tensor};
use crate::error::Result;

pub const DEFAULT_STEP: f64 = 1e-5;
pub const DEFAULT_TOLERANCE: f64 = 1e-4;

/// `‖a − n‖₂ / max(‖a‖₂, ‖n‖₂)`, or the absolute difference when both norms
/// are below `1e-10`.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = analytic.iter().zip(numeric).map(|(a, n)| a - n).collect();
    let scale = norm(analytic).max(norm(numeric));
    if scale < 1e-10 {
        norm(&diff)
    } else {
        norm(&diff) / scale
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamCheck {
    pub name: String,
    pub relative_error: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CheckReport {
    pub params: Vec<ParamCheck>,
}

impl CheckReport {
    pub fn worst(&self) -> f64 {
        self.params
            .iter()
            .map(|p| p.relative_error)
            .fold(0.0, f64::max)
    }

    pub fn worst_param(&self) -> Option<&ParamCheck> {
        self.params
            .iter()
            .max_by(|a, b| a.relative_error.total_cmp(&b.relative_error))
    }
}

/// Compares backward-pass gradients of the scalar built by `build` against
/// central differences, for every parameter in `store`.
///
/// `build` is called once for the analytic pass and twice per parameter
/// entry; it must be deterministic.
pub fn check<F>(
    store: &mut ParamStore,
    faults: FaultInjection,
    step: f64,
    mut build: F,
) -> Result<CheckReport>
where
    F: FnMut(&mut Graph, &ParamStore) -> Result<NodeId>,
{
    let mut graph = Graph::with_faults(faults);
    let root = build(&mut graph, store)?;
    graph.backward(root)?;
    let analytic: HashMap<ParamId, Tensor> = graph
        .param_grads()
        .map(|(pid, g)| {
            (
                pid,
                g.cloned()
                    .unwrap_or_else(|| Tensor::zeros(store.value(pid).shape())),
            )
        })
        .collect();
    drop(graph);

    let mut eval = |store: &ParamStore| -> Result<f64> {
        let mut g = Graph::new();
        let root = build(&mut g, store)?;
        Ok(g.value(root).data()[0])
    };

    let ids: Vec<ParamId> = store.ids().collect();
    let mut params = Vec::with_capacity(ids.len());
    for pid in ids {
        let len = store.value(pid).len();
        let mut numeric = vec![0.0; len];
        for (i, slot) in numeric.iter_mut().enumerate() {
            let original = store.value(pid).data()[i];
            store.value_mut(pid).data_mut()[i] = original + step;
            let plus = eval(store)?;
            store.value_mut(pid).data_mut()[i] = original - step;
            let minus = eval(store)?;
            store.value_mut(pid).data_mut()[i] = original;
            *slot = (plus - minus) / (2.0 * step);
        }
        let zeros;
        let analytic = match analytic.get(&pid) {
            Some(t) => t.data(),
            None => {
                zeros = vec![0.0; len];
                &zeros
            }
        };
        params.push(ParamCheck {
            name: store.get(pid).name.clone(),
            relative_error: relative_error(analytic, &numeric),
        });
    }
    Ok(CheckReport { params })
}

pub(crate) type Builder = fn(&mut Graph, &ParamStore, &[ParamId]) -> Result<NodeId>;

/// Every primitive feeds into a weighted sum so that the upstream gradient
/// is not uniform.
pub(crate) fn primitive_cases() -> Vec<(&'static str, Vec<Vec<usize>>, Builder)> {
    fn weigh(g: &mut Graph, y: NodeId) -> Result<NodeId> {
        let shape = g.shape(y).to_vec();
        let len: usize = shape.iter().product();
        let w = Tensor::new(shape, (0..len).map(|i| 0.3 + 0.17 * i as f64).collect())?;
        let w = g.leaf(w);
        let prod = g.mul(y, w)?;
        Ok(g.sum(prod))
    }
    vec![
        ("matmul", vec![vec![3, 4], vec![4, 2]], |g, s, p| {
            let (a, b) = (g.param(s, p[0]), g.param(s, p[1]));
            let y = g.matmul(a, b)?;
            weigh(g, y)
        }),
        ("matmul_nt", vec![vec![3, 4], vec![2, 4]], |g, s, p| {
            let (a, b) = (g.param(s, p[0]), g.param(s, p[1]));
            let y = g.matmul_nt(a, b)?;
            weigh(g, y)
        }),
        ("add", vec![vec![2, 3], vec![2, 3]], |g, s, p| {
            let (a, b) = (g.param(s, p[0]), g.param(s, p[1]));
            let y = g.add(a, b)?;
            weigh(g, y)
        }),
        ("sub", vec![vec![2, 3], vec![2, 3]], |g, s, p| {
            let (a, b) = (g.param(s, p[0]), g.param(s, p[1]));
            let y = g.sub(a, b)?;
            weigh(g, y)
        }),
        ("mul", vec![vec![2, 3], vec![2, 3]], |g, s, p| {
            let (a, b) = (g.param(s, p[0]), g.param(s, p[1]));
            let y = g.mul(a, b)?;
            weigh(g, y)
        }),
        ("scale", vec![vec![2, 3]], |g, s, p| {
            let a = g.param(s, p[0]);
            let y = g.scale(a, -1.7);
            weigh(g, y)
        }),
        ("add_bias", vec![vec![3, 4], vec![4]], |g, s, p| {
            let (a, b) = (g.param(s, p[0]), g.param(s, p[1]));
            let y = g.add_bias(a, b)?;
            weigh(g, y)
        }),
        ("sigmoid", vec![vec![2, 5]], |g, s, p| {
            let a = g.param(s, p[0]);
            let y = g.sigmoid(a);
            weigh(g, y)
        }),
        ("tanh", vec![vec![2, 5]], |g, s, p| {
            let a = g.param(s, p[0]);
            let y = g.tanh(a);
            weigh(g, y)
        }),
        (
            "concat",
            vec![vec![2, 3], vec![2, 2], vec![1, 5]],
            |g, s, p| {
                let (a, b, c) = (g.param(s, p[0]), g.param(s, p[1]), g.param(s, p[2]));
                let ab = g.concat_cols(&[a, b])?;
                let y = g.concat_rows(&[ab, c])?;
                weigh(g, y)
            },
        ),
        ("slice_rows", vec![vec![4, 3]], |g, s, p| {
            let a = g.param(s, p[0]);
            let top = g.slice_rows(a, 0, 3)?;
            let bottom = g.slice_rows(a, 1, 3)?;
            let y = g.mul(top, bottom)?;
            weigh(g, y)
        }),
        ("l2_normalize", vec![vec![3, 4]], |g, s, p| {
            let a = g.param(s, p[0]);
            let y = g.l2_normalize(a)?;
            weigh(g, y)
        }),
        ("mean", vec![vec![3, 4]], |g, s, p| {
            let a = g.param(s, p[0]);
            let sq = g.mul(a, a)?;
            Ok(g.mean(sq))
        }),
        ("cross_entropy", vec![vec![3, 4]], |g, s, p| {
            let a = g.param(s, p[0]);
            g.cross_entropy(a, &[(0, 1), (2, 3), (2, 0)])
        }),
    ]
}

/// Worst relative error over every primitive, each checked on `seeds`
/// random inputs, with the name of the worst case.
pub fn check_primitives(faults: FaultInjection, seeds: u64) -> Result<(f64, String)> {
    let mut worst = (0.0, String::new());
    for (name, shapes, build) in primitive_cases() {
        for seed in 0..seeds {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut store = ParamStore::new();
            let ids: Vec<ParamId> = shapes
                .iter()
                .enumerate()
                .map(|(i, shape)| {
                    let len = shape.iter().product();
                    let data = (0..len).map(|_| rng.random_range(-1.0..1.0)).collect();
                    Tensor::new(shape.clone(), data).map(|t| store.add(format!("{name}.{i}"), t))
                })
                .collect::<Result<_>>()?;
            let report = check(&mut store, faults, DEFAULT_STEP, |g, s| build(g, s, &ids))?;
            if report.worst() >= worst.0 {
                worst = (report.worst(), format!("{name} (seed {seed})"));
            }
        }
    }
    Ok(worst)
}
