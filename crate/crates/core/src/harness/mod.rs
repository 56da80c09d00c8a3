//! Training, evaluation of checkpoints, ablation grids and gradient checks.

mod checkpoint;
mod config;
pub mod gradcheck;
mod train;

pub use checkpoint::Checkpoint;
pub use config::{AblationGrid, RunConfig};
pub use train::{selection_metric, train, EpochLog, TrainOutcome, SELECTION_TIME};

use std::fmt::Write as _;
use std::path::Path;

use log::{info, warn};

use crate::cells::CellKind;
use crate::error::{Error, Result};
use crate::losses::LossMode;
use crate::metrics::{evaluate, EvalReport, ManyShot, Target};
use crate::pipeline::{timeline, Labels};
use crate::world::{Dataset, Split};

/// Many-shot classes computed from the training split.
pub fn many_shot_from_dataset(ds: &Dataset, threshold: usize) -> ManyShot {
    let labels: Vec<Labels> = ds
        .manifest
        .segments_in(Split::Train)
        .filter_map(|s| ds.manifest.vocab.labels(s.action).ok())
        .collect();
    ManyShot::from_training(&labels, &ds.manifest.vocab, threshold)
}

/// Evaluates one checkpoint, or the late fusion of several, on a split.
pub fn evaluate_checkpoints(
    ds: &Dataset,
    ckpts: &[Checkpoint],
    weights: &[f64],
    split: Split,
) -> Result<EvalReport> {
    let first = ckpts
        .first()
        .ok_or_else(|| Error::Eval("no checkpoint given".into()))?;
    for c in ckpts {
        if c.config.timeline != first.config.timeline {
            return Err(Error::Eval(
                "checkpoints were trained with different timelines".into(),
            ));
        }
        if c.model.config.num_actions != ds.manifest.vocab.num_actions() {
            return Err(Error::Eval(format!(
                "checkpoint predicts {} actions but the dataset has {}",
                c.model.config.num_actions,
                ds.manifest.vocab.num_actions()
            )));
        }
    }
    let models = ckpts
        .iter()
        .map(|c| {
            let m = ds.manifest.modality_index(&c.config.modality)?;
            let dim = ds.manifest.modalities[m].dim;
            if dim != c.model.config.d_feat {
                return Err(Error::Eval(format!(
                    "modality `{}` has dim {dim} but the checkpoint expects {}",
                    c.config.modality, c.model.config.d_feat
                )));
            }
            Ok((&c.model, m))
        })
        .collect::<Result<Vec<_>>>()?;
    let tl = timeline(&first.config.timeline)?;
    let samples = ds.samples(split, &tl, false)?;
    let many_shot = many_shot_from_dataset(ds, first.config.many_shot_threshold);
    evaluate(
        &models,
        weights,
        &samples,
        &tl,
        &ds.manifest.vocab,
        &many_shot,
    )
}

#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub struct Variant {
    pub loss_mode: LossMode,
    pub residual: bool,
    pub intention: bool,
    pub cell: CellKind,
}

impl Variant {
    pub fn label(&self) -> String {
        format!(
            "{}/{}/{}/{}",
            self.cell,
            self.loss_mode,
            if self.residual { "diff" } else { "no-diff" },
            if self.intention {
                "intention"
            } else {
                "no-intention"
            }
        )
    }

    pub fn apply(&self, base: &RunConfig) -> RunConfig {
        RunConfig {
            loss_mode: self.loss_mode,
            residual: self.residual,
            intention: self.intention,
            cell: self.cell,
            ..base.clone()
        }
    }
}

pub fn grid_variants(grid: &AblationGrid) -> Vec<Variant> {
    let mut out = Vec::new();
    for &loss_mode in &grid.loss_modes {
        for &residual in &grid.residual {
            for &intention in &grid.intention {
                for &cell in &grid.cells {
                    out.push(Variant {
                        loss_mode,
                        residual,
                        intention,
                        cell,
                    });
                }
            }
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub variant: Variant,
    /// Best epoch and the validation report of the selected checkpoint, or
    /// the error message.
    pub outcome: std::result::Result<(usize, EvalReport), String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    /// Verb, noun and action top-1/top-5 on the validation split at `T = 1 s`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from(
            "method,cell,loss,diff,intention,status,best_epoch,\
             verb_top1,verb_top5,noun_top1,noun_top5,action_top1,action_top5\n",
        );
        for row in &self.rows {
            let v = &row.variant;
            write!(
                out,
                "{},{},{},{},{}",
                v.label(),
                v.cell,
                v.loss_mode,
                if v.residual { "diff" } else { "no-diff" },
                if v.intention { "on" } else { "off" }
            )
            .expect("string write");
            match &row.outcome {
                Ok((epoch, report)) => {
                    write!(out, ",ok,{epoch}").expect("string write");
                    for target in [Target::Verb, Target::Noun, Target::Action] {
                        let r = report
                            .get(SELECTION_TIME, target)
                            .expect("report has T = 1 s");
                        write!(out, ",{:.6},{:.6}", r.top1, r.top5).expect("string write");
                    }
                }
                Err(message) => {
                    let clean = message.replace([',', '\n'], ";");
                    write!(out, ",error: {clean},,,,,,,").expect("string write");
                }
            }
            out.push('\n');
        }
        out
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }

    pub fn action_top1(&self, row: usize) -> Option<f64> {
        self.rows[row]
            .outcome
            .as_ref()
            .ok()
            .and_then(|(_, r)| r.get(SELECTION_TIME, Target::Action))
            .map(|r| r.top1)
    }
}

/// Trains one model per grid variant with the shared seed and evaluates the
/// selected checkpoint on the validation split. A failing variant is
/// recorded and the grid continues.
pub fn ablate(base: &RunConfig, ds: &Dataset) -> Result<AblationTable> {
    base.validate()?;
    let mut rows = Vec::new();
    for variant in grid_variants(&base.grid) {
        let cfg = variant.apply(base);
        info!("ablation variant {}", variant.label());
        let outcome = train(&cfg, ds).and_then(|t| {
            let report =
                evaluate_checkpoints(ds, std::slice::from_ref(&t.best), &[1.0], Split::Val)?;
            Ok((t.best.epoch, report))
        });
        if let Err(e) = &outcome {
            warn!("variant {} failed: {e}", variant.label());
        }
        rows.push(AblationRow {
            variant,
            outcome: outcome.map_err(|e| e.to_string()),
        });
    }
    Ok(AblationTable { rows })
}
