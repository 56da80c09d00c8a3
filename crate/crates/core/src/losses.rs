//! Imagination and classification objectives.
//!
//! The contrastive term scores an imagined feature against its ground-truth
//! frame and a set of distractors by temperature-scaled cosine similarity:
//!
//! ```text
//! L_c = -log( exp(f·f̂/τ) / (Σ_j exp(v_j·f̂/τ) + exp(f·f̂/τ)) )
//! ```
//!
//! with every vector L2-normalized first. Distractors are *hard* (other time
//! steps of the same sample) or *easy* (any frame of another sample in the
//! mini-batch).

use std::fmt;
use std::str::FromStr;

use crate::autodiff::{Graph, NodeId, Tensor};
use crate::error::{Error, Result};
use crate::pipeline::AnticipationSample;

#[derive(Copy, Clone, Debug, PartialEq)]
pub struct NceConfig {
    pub temperature: f64,
}

impl NceConfig {
    pub fn new(temperature: f64) -> Result<Self> {
        if !(temperature > 0.0 && temperature.is_finite()) {
            return Err(Error::Config(format!(
                "temperature must be > 0, got {temperature}"
            )));
        }
        Ok(Self { temperature })
    }
}

impl Default for NceConfig {
    fn default() -> Self {
        Self { temperature: 0.2 }
    }
}

#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum NegativeKind {
    /// Frame of another sample in the batch.
    Easy,
    /// Same sample, different time step.
    Hard,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CandidateSet {
    pub positive: Tensor,
    pub negatives: Vec<(Tensor, NegativeKind)>,
}

impl CandidateSet {
    pub fn count(&self, kind: NegativeKind) -> usize {
        self.negatives.iter().filter(|(_, k)| *k == kind).count()
    }
}

/// Candidates for the imagined frame `time` of `batch[sample]`, drawn from
/// the ground-truth future windows of `modality`.
pub fn build_candidates(
    batch: &[&AnticipationSample],
    modality: usize,
    sample: usize,
    time: usize,
) -> Result<CandidateSet> {
    fn window(s: &AnticipationSample, modality: usize) -> Result<&Tensor> {
        s.future_truth
            .as_ref()
            .and_then(|f| f.get(modality))
            .ok_or_else(|| {
                Error::TrainingData(format!("sample {} has no future frames", s.video_id))
            })
    }
    let own = window(
        batch.get(sample).ok_or_else(|| {
            Error::Contract(format!(
                "sample index {sample} outside batch of {}",
                batch.len()
            ))
        })?,
        modality,
    )?;
    let (steps, _) = own.dims2();
    if time >= steps {
        return Err(Error::Contract(format!(
            "time index {time} outside window of {steps}"
        )));
    }
    let row = |t: &Tensor, r: usize| Tensor::vector(t.row(r).to_vec());
    let mut negatives = Vec::new();
    for other in (0..steps).filter(|&t| t != time) {
        negatives.push((row(own, other), NegativeKind::Hard));
    }
    for (idx, s) in batch.iter().enumerate() {
        if idx == sample {
            continue;
        }
        let w = window(s, modality)?;
        for r in 0..w.dims2().0 {
            negatives.push((row(w, r), NegativeKind::Easy));
        }
    }
    if negatives.is_empty() {
        return Err(Error::Config(
            "contrastive loss needs at least one distractor: use a larger batch or window".into(),
        ));
    }
    Ok(CandidateSet {
        positive: row(own, time),
        negatives,
    })
}

/// Contrastive loss of one imagined feature against an explicit candidate set.
pub fn nce_loss(
    g: &mut Graph,
    f_hat: NodeId,
    candidates: &CandidateSet,
    cfg: NceConfig,
) -> Result<NodeId> {
    let mut rows: Vec<&[f64]> = vec![candidates.positive.data()];
    rows.extend(candidates.negatives.iter().map(|(t, _)| t.data()));
    let keys = Tensor::from_rows(&rows)?;
    let (_, d) = g.value(f_hat).dims2();
    if keys.dims2().1 != d {
        return Err(Error::shape("nce_loss", g.shape(f_hat), keys.shape()));
    }
    let keys = g.leaf(keys);
    let keys = g.l2_normalize(keys)?;
    let query = g.l2_normalize(f_hat)?;
    let sims = g.matmul_nt(query, keys)?;
    let logits = g.scale(sims, 1.0 / cfg.temperature);
    g.cross_entropy(logits, &[(0, 0)])
}

/// Contrastive terms for a whole mini-batch at once, one term per imagined
/// step.
///
/// `predictions[k]` and `truth[k]` are `[batch × d]` rows for step `k`. Every
/// ground-truth row in the window is a candidate for every prediction, which
/// is exactly the positive plus the hard and easy distractors of
/// [`build_candidates`].
pub fn nce_terms(
    g: &mut Graph,
    predictions: &[NodeId],
    truth: &[NodeId],
    cfg: NceConfig,
) -> Result<Vec<NodeId>> {
    if predictions.len() != truth.len() {
        return Err(Error::Contract(format!(
            "nce_terms: {} predictions vs {} targets",
            predictions.len(),
            truth.len()
        )));
    }
    nce_terms_in_window(g, predictions, truth, 0, cfg)
}

/// Like [`nce_terms`], but the positive of `predictions[k]` is
/// `window[offset + k]` and every row of `window` is a candidate.
pub fn nce_terms_in_window(
    g: &mut Graph,
    predictions: &[NodeId],
    window: &[NodeId],
    offset: usize,
    cfg: NceConfig,
) -> Result<Vec<NodeId>> {
    if predictions.is_empty() || offset + predictions.len() > window.len() {
        return Err(Error::Contract(format!(
            "nce_terms: {} predictions from step {offset} of a {}-step window",
            predictions.len(),
            window.len()
        )));
    }
    let (batch, _) = g.value(predictions[0]).dims2();
    if batch * window.len() < 2 {
        return Err(Error::Config(
            "contrastive loss needs at least one distractor: use a larger batch or window".into(),
        ));
    }
    let queries = stack(g, predictions)?;
    let queries = g.l2_normalize(queries)?;
    let keys = stack(g, window)?;
    let keys = g.l2_normalize(keys)?;
    let sims = g.matmul_nt(queries, keys)?;
    let logits = g.scale(sims, 1.0 / cfg.temperature);
    (0..predictions.len())
        .map(|k| {
            let picks: Vec<(usize, usize)> = (0..batch)
                .map(|b| (k * batch + b, (offset + k) * batch + b))
                .collect();
            g.cross_entropy(logits, &picks)
        })
        .collect()
}

fn stack(g: &mut Graph, parts: &[NodeId]) -> Result<NodeId> {
    match parts {
        [only] => Ok(*only),
        _ => g.concat_rows(parts),
    }
}

/// Mean squared error over all entries.
pub fn l2_loss(g: &mut Graph, f_hat: NodeId, f_true: NodeId) -> Result<NodeId> {
    let diff = g.sub(f_hat, f_true)?;
    let sq = g.mul(diff, diff)?;
    Ok(g.mean(sq))
}

/// Mean cross-entropy of `[batch × classes]` logits against one label per row.
pub fn classification_loss(g: &mut Graph, logits: NodeId, labels: &[usize]) -> Result<NodeId> {
    let (rows, classes) = g.value(logits).dims2();
    if rows != labels.len() {
        return Err(Error::shape(
            "classification_loss",
            g.shape(logits),
            &[labels.len()],
        ));
    }
    if let Some(&label) = labels.iter().find(|&&l| l >= classes) {
        return Err(Error::Label {
            label,
            num_classes: classes,
        });
    }
    let picks: Vec<(usize, usize)> = labels.iter().enumerate().map(|(r, &l)| (r, l)).collect();
    g.cross_entropy(logits, &picks)
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash)]
pub enum LossMode {
    Contrastive,
    L2,
    ContrastiveL2,
}

impl LossMode {
    pub fn uses_nce(self) -> bool {
        matches!(self, LossMode::Contrastive | LossMode::ContrastiveL2)
    }

    pub fn uses_l2(self) -> bool {
        matches!(self, LossMode::L2 | LossMode::ContrastiveL2)
    }
}

impl fmt::Display for LossMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LossMode::Contrastive => "contrastive",
            LossMode::L2 => "l2",
            LossMode::ContrastiveL2 => "contrastive+l2",
        })
    }
}

impl FromStr for LossMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "contrastive" => Ok(LossMode::Contrastive),
            "l2" => Ok(LossMode::L2),
            "contrastive+l2" => Ok(LossMode::ContrastiveL2),
            other => Err(Error::Config(format!(
                "unknown loss mode `{other}` (contrastive|l2|contrastive+l2)"
            ))),
        }
    }
}

/// Per-step imagination losses; only the lists the mode needs are filled.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ImaginationTerms {
    pub nce: Vec<NodeId>,
    pub l2: Vec<NodeId>,
}

#[derive(Copy, Clone, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    pub contrastive: f64,
    pub classification: f64,
    pub total: f64,
}

/// Combines the imagination and classification terms.
///
/// `L_c` is the mean of the per-step imagination terms selected by `mode`
/// (summed with unit weights for `contrastive+l2`), `L_f` the mean of the
/// classification terms and `L = L_c + L_f`. Without `intention` the
/// classification term is left out entirely and `L = L_c`.
pub fn total_loss(
    g: &mut Graph,
    terms: &ImaginationTerms,
    classification: &[NodeId],
    mode: LossMode,
    intention: bool,
) -> Result<(LossBreakdown, NodeId)> {
    if classification.is_empty() {
        return Err(Error::Contract(
            "total_loss needs at least one classification term".into(),
        ));
    }
    let steps: Vec<NodeId> = match mode {
        LossMode::Contrastive => terms.nce.clone(),
        LossMode::L2 => terms.l2.clone(),
        LossMode::ContrastiveL2 => {
            if terms.nce.len() != terms.l2.len() {
                return Err(Error::Contract(
                    "contrastive and l2 step counts differ".into(),
                ));
            }
            terms
                .nce
                .iter()
                .zip(&terms.l2)
                .map(|(&a, &b)| g.add(a, b))
                .collect::<Result<_>>()?
        }
    };
    if steps.is_empty() {
        return Err(Error::Contract(format!(
            "total_loss in mode {mode} needs at least one imagined step"
        )));
    }
    let stacked = g.concat_rows(&steps)?;
    let l_c = g.mean(stacked);
    let contrastive = g.value(l_c).data()[0];
    if !intention {
        return Ok((
            LossBreakdown {
                contrastive,
                classification: 0.0,
                total: contrastive,
            },
            l_c,
        ));
    }
    let stacked = g.concat_rows(classification)?;
    let l_f = g.mean(stacked);
    let total = g.add(l_c, l_f)?;
    Ok((
        LossBreakdown {
            contrastive,
            classification: g.value(l_f).data()[0],
            total: g.value(total).data()[0],
        },
        total,
    ))
}
