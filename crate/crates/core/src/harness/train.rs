use std::fmt::Write as _;
use std::path::Path;

use log::info;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Checkpoint, RunConfig};
use crate::autodiff::{Graph, SgdMomentum};
use crate::error::{Error, Result};
use crate::metrics::{predict_fused, topk_accuracy};
use crate::pipeline::{forward_batch, timeline, AnticipationSample, ModelParams, Timeline};
use crate::world::{derive_seed, Dataset, Split};

/// Anticipation time used for model selection.
pub const SELECTION_TIME: f64 = 1.0;

#[derive(Clone, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub l_c: f64,
    pub l_f: f64,
    pub l: f64,
    pub val_top5_1s: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainOutcome {
    pub best: Checkpoint,
    pub log: Vec<EpochLog>,
}

impl TrainOutcome {
    pub fn log_csv(&self) -> String {
        let mut out = String::from("epoch,L_c,L_f,L,val_top5@1s\n");
        for e in &self.log {
            writeln!(
                out,
                "{},{:.6},{:.6},{:.6},{:.6}",
                e.epoch, e.l_c, e.l_f, e.l, e.val_top5_1s
            )
            .expect("string write");
        }
        out
    }

    pub fn write_log(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.log_csv()).map_err(|e| Error::io(path, e))
    }
}

/// Top-5 action accuracy at `T = 1 s`.
pub fn selection_metric(
    model: &ModelParams,
    modality: usize,
    samples: &[AnticipationSample],
    tl: &Timeline,
    vocab: &crate::pipeline::ActionVocab,
) -> Result<f64> {
    let index = tl.prediction_index(SELECTION_TIME).ok_or_else(|| {
        Error::Config("anticipation_times must include 1 s for model selection".into())
    })?;
    let sweeps = predict_fused(&[(model, modality)], &[1.0], samples, tl, vocab)?;
    let scores: Vec<Vec<f64>> = sweeps.iter().map(|s| s.action[index].clone()).collect();
    let labels: Vec<usize> = samples.iter().map(|s| s.labels.action).collect();
    topk_accuracy(&scores, &labels, vocab.num_actions().min(5))
}

/// Mini-batch SGD with per-epoch seeded shuffling and early stopping on
/// validation top-5 action accuracy at `T = 1 s`.
pub fn train(cfg: &RunConfig, ds: &Dataset) -> Result<TrainOutcome> {
    cfg.validate()?;
    let tl = timeline(&cfg.timeline)?;
    tl.prediction_index(SELECTION_TIME).ok_or_else(|| {
        Error::Config("anticipation_times must include 1 s for model selection".into())
    })?;
    let modality = ds.manifest.modality_index(&cfg.modality)?;
    let vocab = &ds.manifest.vocab;
    let train_set = ds.samples(Split::Train, &tl, true)?;
    let val_set = ds.samples(Split::Val, &tl, false)?;
    if train_set.is_empty() || val_set.is_empty() {
        return Err(Error::TrainingData(format!(
            "need non-empty train and val splits (got {} and {})",
            train_set.len(),
            val_set.len()
        )));
    }

    let model_cfg = cfg.model_config(ds.manifest.modalities[modality].dim, vocab.num_actions());
    let mut model = ModelParams::init(model_cfg, cfg.seed)?;
    let optimizer = SgdMomentum::new(cfg.lr, cfg.momentum)?;
    let opts = cfg.train_options();
    let hash = cfg.hash();

    let mut log = Vec::new();
    let mut best: Option<Checkpoint> = None;
    let mut stale = 0usize;
    for epoch in 1..=cfg.max_epochs {
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(
            cfg.seed,
            &format!("epoch/{epoch}"),
        )));
        let (mut l_c, mut l_f, mut l) = (0.0, 0.0, 0.0);
        for (batch_index, batch) in order.chunks(cfg.batch_size).enumerate() {
            let samples: Vec<&AnticipationSample> = batch.iter().map(|&i| &train_set[i]).collect();
            let mut g = Graph::new();
            let out = forward_batch(&mut g, &model, &samples, modality, &tl, Some(&opts)).map_err(
                |e| match e {
                    Error::DegenerateVector { norm } if !norm.is_finite() => Error::Divergence {
                        epoch,
                        batch: batch_index,
                        loss: norm,
                    },
                    other => other,
                },
            )?;
            let objective = out
                .objective
                .expect("training forward returns an objective");
            let value = g.value(objective.node).data()[0];
            if !value.is_finite() {
                return Err(Error::Divergence {
                    epoch,
                    batch: batch_index,
                    loss: value,
                });
            }
            g.backward(objective.node)?;
            model.store.accumulate_grads(&g);
            optimizer.step(&mut model.store).map_err(|e| match e {
                Error::Optimizer { .. } => Error::Divergence {
                    epoch,
                    batch: batch_index,
                    loss: value,
                },
                other => other,
            })?;
            let weight = samples.len() as f64 / train_set.len() as f64;
            l_c += weight * objective.breakdown.contrastive;
            l_f += weight * objective.breakdown.classification;
            l += weight * objective.breakdown.total;
        }

        let val = selection_metric(&model, modality, &val_set, &tl, vocab)?;
        info!("epoch {epoch}: L_c {l_c:.4} L_f {l_f:.4} L {l:.4} val top5@1s {val:.4}");
        log.push(EpochLog {
            epoch,
            l_c,
            l_f,
            l,
            val_top5_1s: val,
        });
        if best.as_ref().is_none_or(|b| val > b.val_top5_1s) {
            best = Some(Checkpoint {
                model: model.clone(),
                epoch,
                val_top5_1s: val,
                config: cfg.clone(),
                config_hash: hash.clone(),
            });
            stale = 0;
        } else {
            stale += 1;
            if stale > cfg.patience {
                info!("early stop after epoch {epoch}");
                break;
            }
        }
    }
    Ok(TrainOutcome {
        best: best.expect("at least one epoch runs"),
        log,
    })
}
