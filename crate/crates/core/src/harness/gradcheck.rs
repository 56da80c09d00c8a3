//! Finite-difference suites run by the `gradcheck` command.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::gradcheck::{check, check_primitives, DEFAULT_STEP, DEFAULT_TOLERANCE};
use crate::autodiff::{FaultInjection, NodeId, ParamStore, Tensor};
use crate::cells::{cell_step, CellKind, CellParams, CellState};
use crate::error::Result;
use crate::imagination::{rollout, ImaginationConfig, Phi, PhiActivation};
use crate::losses::{nce_terms, LossMode, NceConfig};
use crate::pipeline::{
    forward_batch, timeline, AnticipationSample, Labels, ModelConfig, ModelParams, TimelineConfig,
    TrainOptions,
};

#[derive(Clone, Debug, PartialEq)]
pub struct SuiteResult {
    pub name: String,
    pub worst: f64,
    /// Parameter or case with the largest error.
    pub worst_at: String,
    pub seconds: f64,
}

impl SuiteResult {
    pub fn passed(&self) -> bool {
        self.worst <= DEFAULT_TOLERANCE
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradcheckReport {
    pub suites: Vec<SuiteResult>,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.suites.iter().all(SuiteResult::passed)
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        for s in &self.suites {
            out.push_str(&format!(
                "{:<5} {:<24} worst {:.3e} ({}) {:.2}s\n",
                if s.passed() { "PASS" } else { "FAIL" },
                s.name,
                s.worst,
                s.worst_at,
                s.seconds
            ));
        }
        out
    }
}

fn weights(rows: usize, cols: usize) -> Result<Tensor> {
    Tensor::new(
        vec![rows, cols],
        (0..rows * cols)
            .map(|i| (0.37 * i as f64 + 0.2).sin())
            .collect(),
    )
}

fn cell_suite(kind: CellKind, faults: FaultInjection, seeds: u64) -> Result<(f64, String)> {
    let mut worst = (0.0, String::new());
    for seed in 0..seeds {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let cell = CellParams::init(&mut store, "cell", kind, 3, 4, 1.0, &mut rng);
        let x = store.add_uniform("x", &[2, 3], 1, &mut rng);
        let h = store.add_uniform("h", &[2, 4], 1, &mut rng);
        let c = (kind == CellKind::Lstm).then(|| store.add_uniform("c", &[2, 4], 1, &mut rng));
        let report = check(&mut store, faults, DEFAULT_STEP, |g, s| {
            let nx = g.param(s, x);
            let state = CellState {
                h: g.param(s, h),
                c: c.map(|c| g.param(s, c)),
            };
            let s1 = cell_step(g, s, &cell, nx, state)?;
            let s2 = cell_step(g, s, &cell, nx, s1)?;
            let w = g.leaf(weights(2, 4)?);
            let out = g.mul(s2.h, w)?;
            Ok(g.sum(out))
        })?;
        if report.worst() >= worst.0 {
            let at = report
                .worst_param()
                .map(|p| p.name.clone())
                .unwrap_or_default();
            worst = (report.worst(), format!("{at}, seed {seed}"));
        }
    }
    Ok(worst)
}

fn rollout_suite(faults: FaultInjection) -> Result<(f64, String)> {
    let mut worst = (0.0, String::new());
    for kind in [CellKind::Lstm, CellKind::Gru] {
        for residual in [true, false] {
            let mut rng = ChaCha8Rng::seed_from_u64(8);
            let mut store = ParamStore::new();
            let cell = CellParams::init(&mut store, "imagine", kind, 3, 4, 1.0, &mut rng);
            let phi = Phi::init(&mut store, "phi", 4, 3, PhiActivation::Affine, &mut rng);
            let f0 = store.add_uniform("f0", &[2, 3], 1, &mut rng);
            let h0 = store.add_uniform("h0", &[2, 4], 1, &mut rng);
            let cfg = ImaginationConfig::new(residual, 4)?;
            let report = check(&mut store, faults, DEFAULT_STEP, |g, s| {
                let f = g.param(s, f0);
                let h = g.param(s, h0);
                let c = (kind == CellKind::Lstm).then(|| g.leaf(Tensor::zeros(&[2, 4])));
                let traj = rollout(g, s, &cell, &phi, f, CellState { h, c }, cfg, None)?;
                let all = g.concat_rows(&traj.features)?;
                let w = g.leaf(weights(8, 3)?);
                let out = g.mul(all, w)?;
                Ok(g.sum(out))
            })?;
            if report.worst() >= worst.0 {
                worst = (report.worst(), format!("{kind}, residual={residual}"));
            }
        }
    }
    Ok(worst)
}

fn nce_suite(faults: FaultInjection, seeds: u64) -> Result<(f64, String)> {
    let mut worst = (0.0, String::new());
    for seed in 0..seeds {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let preds: Vec<_> = (0..3)
            .map(|k| store.add_uniform(format!("pred{k}"), &[2, 4], 1, &mut rng))
            .collect();
        let truth: Vec<Tensor> = (0..3)
            .map(|_| {
                Tensor::new(
                    vec![2, 4],
                    (0..8).map(|_| rng.random_range(-1.0..1.0)).collect(),
                )
            })
            .collect::<Result<_>>()?;
        let report = check(&mut store, faults, DEFAULT_STEP, |g, s| {
            let p: Vec<NodeId> = preds.iter().map(|&id| g.param(s, id)).collect();
            let t: Vec<NodeId> = truth.iter().map(|x| g.leaf(x.clone())).collect();
            let terms = nce_terms(g, &p, &t, NceConfig::default())?;
            let all = g.concat_rows(&terms)?;
            Ok(g.mean(all))
        })?;
        if report.worst() >= worst.0 {
            worst = (report.worst(), format!("seed {seed}"));
        }
    }
    Ok(worst)
}

fn end_to_end_suite(faults: FaultInjection) -> Result<(f64, String)> {
    let tl = timeline(&TimelineConfig::default())?;
    let mut worst = (0.0, String::new());
    for cell in [CellKind::Lstm, CellKind::Gru] {
        for residual in [true, false] {
            for loss_mode in [LossMode::Contrastive, LossMode::L2, LossMode::ContrastiveL2] {
                let config = ModelConfig {
                    cell,
                    d_feat: 3,
                    d_hidden: 4,
                    num_actions: 2,
                    residual,
                    phi_activation: PhiActivation::Affine,
                    forget_bias: 1.0,
                };
                let mut model = ModelParams::init(config, 17)?;
                // keep imagined features away from the origin, where L2
                // normalization is badly conditioned for a fixed step
                let bias = model.store.value_mut(model.phi.linear.bias).data_mut();
                for (i, b) in bias.iter_mut().enumerate() {
                    *b = (1.3 * i as f64 + 0.4).sin();
                }
                let mut rng = ChaCha8Rng::seed_from_u64(117);
                let mut window = |rows: usize| {
                    Tensor::matrix(
                        rows,
                        3,
                        (0..rows * 3).map(|_| rng.random_range(-1.0..1.0)).collect(),
                    )
                };
                let samples: Vec<AnticipationSample> = (0..2)
                    .map(|i| {
                        Ok(AnticipationSample {
                            video_id: format!("g{i}"),
                            action_start: 5.0,
                            observed: vec![window(tl.encoder_steps)?],
                            future_truth: Some(vec![window(tl.future_offsets.len())?]),
                            labels: Labels {
                                verb: 0,
                                noun: i,
                                action: i,
                            },
                        })
                    })
                    .collect::<Result<_>>()?;
                let refs: Vec<&AnticipationSample> = samples.iter().collect();
                let opts = TrainOptions {
                    loss_mode,
                    ..TrainOptions::default()
                };
                let skeleton = model.clone();
                let report = check(&mut model.store, faults, DEFAULT_STEP, |g, store| {
                    let m = ModelParams {
                        store: store.clone(),
                        ..skeleton.clone()
                    };
                    let out = forward_batch(g, &m, &refs, 0, &tl, Some(&opts))?;
                    Ok(out.objective.expect("training objective").node)
                })?;
                if report.worst() >= worst.0 {
                    let at = report
                        .worst_param()
                        .map(|p| p.name.clone())
                        .unwrap_or_default();
                    worst = (
                        report.worst(),
                        format!("{cell}/{loss_mode}/residual={residual}: {at}"),
                    );
                }
            }
        }
    }
    Ok(worst)
}

/// Runs every suite. `faults` corrupts selected backward rules, which must
/// make at least one suite fail.
pub fn run_gradcheck(faults: FaultInjection) -> Result<GradcheckReport> {
    type Suite = Box<dyn Fn(FaultInjection) -> Result<(f64, String)>>;
    let suites: Vec<(&str, Suite)> = vec![
        ("primitives", Box::new(|f| check_primitives(f, 20))),
        ("lstm-cell", Box::new(|f| cell_suite(CellKind::Lstm, f, 5))),
        ("gru-cell", Box::new(|f| cell_suite(CellKind::Gru, f, 5))),
        ("rollout-n4", Box::new(rollout_suite)),
        ("nce-through-normalize", Box::new(|f| nce_suite(f, 5))),
        ("end-to-end-objective", Box::new(end_to_end_suite)),
    ];
    let mut results = Vec::with_capacity(suites.len());
    for (name, run) in suites {
        let start = Instant::now();
        let (worst, worst_at) = run(faults)?;
        results.push(SuiteResult {
            name: name.to_string(),
            worst,
            worst_at,
            seconds: start.elapsed().as_secs_f64(),
        });
    }
    Ok(GradcheckReport { suites: results })
}
