use std::collections::HashSet;

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

/// Verb and noun vocabularies plus the `(verb, noun)` pair behind every
/// action id.
#[derive(Clone, Debug, PartialEq)]
pub struct ActionVocab {
    pub verbs: Vec<String>,
    pub nouns: Vec<String>,
    pub actions: Vec<(usize, usize)>,
}

impl ActionVocab {
    pub fn new(
        verbs: Vec<String>,
        nouns: Vec<String>,
        actions: Vec<(usize, usize)>,
    ) -> Result<Self> {
        if actions.is_empty() {
            return Err(Error::Config("vocabulary has no actions".into()));
        }
        let mut seen = HashSet::new();
        for (id, &(v, n)) in actions.iter().enumerate() {
            if v >= verbs.len() || n >= nouns.len() {
                return Err(Error::Config(format!(
                    "action {id} refers to unknown verb {v} or noun {n}"
                )));
            }
            if !seen.insert((v, n)) {
                return Err(Error::Config(format!(
                    "action {id} duplicates pair ({v}, {n})"
                )));
            }
        }
        Ok(Self {
            verbs,
            nouns,
            actions,
        })
    }

    /// Every `(verb, noun)` pair, action id `v * nouns + n`.
    pub fn full_grid(num_verbs: usize, num_nouns: usize) -> Self {
        let verbs = (0..num_verbs).map(|v| format!("verb{v}")).collect();
        let nouns = (0..num_nouns).map(|n| format!("noun{n}")).collect();
        let actions = (0..num_verbs)
            .flat_map(|v| (0..num_nouns).map(move |n| (v, n)))
            .collect();
        Self {
            verbs,
            nouns,
            actions,
        }
    }

    pub fn num_actions(&self) -> usize {
        self.actions.len()
    }

    pub fn labels(&self, action: usize) -> Result<Labels> {
        let &(verb, noun) = self.actions.get(action).ok_or(Error::Label {
            label: action,
            num_classes: self.actions.len(),
        })?;
        Ok(Labels { verb, noun, action })
    }
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash)]
pub struct Labels {
    pub verb: usize,
    pub noun: usize,
    pub action: usize,
}

/// One anticipation instance.
#[derive(Clone, Debug, PartialEq)]
pub struct AnticipationSample {
    pub video_id: String,
    /// `τ_s` in seconds.
    pub action_start: f64,
    /// Per modality, `[encoder_steps × dim]` observed frames.
    pub observed: Vec<Tensor>,
    /// Per modality, `[anticipation_steps − 1 × dim]` true future frames.
    pub future_truth: Option<Vec<Tensor>>,
    pub labels: Labels,
}

/// Scores at every anticipation time for one sample.
#[derive(Clone, Debug, PartialEq)]
pub struct PredictionSweep {
    /// Anticipation times in seconds, descending.
    pub times: Vec<f64>,
    pub action: Vec<Vec<f64>>,
    pub verb: Vec<Vec<f64>>,
    pub noun: Vec<Vec<f64>>,
}

impl PredictionSweep {
    pub fn from_action_probs(
        times: Vec<f64>,
        action: Vec<Vec<f64>>,
        vocab: &ActionVocab,
    ) -> Result<Self> {
        if times.len() != action.len() {
            return Err(Error::Contract(format!(
                "{} times but {} score vectors",
                times.len(),
                action.len()
            )));
        }
        let mut verb = Vec::with_capacity(action.len());
        let mut noun = Vec::with_capacity(action.len());
        for probs in &action {
            let (v, n) = marginalize(probs, vocab)?;
            verb.push(v);
            noun.push(n);
        }
        Ok(Self {
            times,
            action,
            verb,
            noun,
        })
    }
}

/// Verb and noun probabilities obtained by summing action probabilities
/// over the actions sharing each verb (noun).
pub fn marginalize(action_probs: &[f64], vocab: &ActionVocab) -> Result<(Vec<f64>, Vec<f64>)> {
    if action_probs.len() != vocab.num_actions() {
        return Err(Error::Contract(format!(
            "{} action scores for {} actions",
            action_probs.len(),
            vocab.num_actions()
        )));
    }
    let sum: f64 = action_probs.iter().sum();
    if (sum - 1.0).abs() > 1e-6 || action_probs.iter().any(|&p| !(p >= 0.0)) {
        return Err(Error::Contract(format!(
            "action scores must be a probability vector (sum {sum})"
        )));
    }
    let mut verbs = vec![0.0; vocab.verbs.len()];
    let mut nouns = vec![0.0; vocab.nouns.len()];
    for (&p, &(v, n)) in action_probs.iter().zip(&vocab.actions) {
        verbs[v] += p;
        nouns[n] += p;
    }
    Ok((verbs, nouns))
}

/// Weighted average of per-modality action probabilities, divided by the
/// weight total, with verb/noun scores re-derived by [`marginalize`].
pub fn fuse(
    sweeps: &[PredictionSweep],
    weights: &[f64],
    vocab: &ActionVocab,
) -> Result<PredictionSweep> {
    let first = sweeps
        .first()
        .ok_or_else(|| Error::Contract("nothing to fuse".into()))?;
    if weights.len() != sweeps.len() {
        return Err(Error::Contract(format!(
            "{} weights for {} sweeps",
            weights.len(),
            sweeps.len()
        )));
    }
    if weights.iter().any(|&w| !(w >= 0.0 && w.is_finite())) {
        return Err(Error::Contract(format!(
            "fusion weights must be non-negative: {weights:?}"
        )));
    }
    let total: f64 = weights.iter().sum();
    if !(total > 0.0) {
        return Err(Error::Contract("fusion weights sum to zero".into()));
    }
    for s in sweeps {
        if s.times != first.times {
            return Err(Error::Contract(format!(
                "anticipation times differ: {:?} vs {:?}",
                s.times, first.times
            )));
        }
        if s.action.iter().any(|p| p.len() != vocab.num_actions()) {
            return Err(Error::Contract(
                "sweep does not match the vocabulary".into(),
            ));
        }
    }
    let action = (0..first.times.len())
        .map(|t| {
            (0..vocab.num_actions())
                .map(|a| {
                    let acc: f64 = sweeps
                        .iter()
                        .zip(weights)
                        .map(|(s, &w)| w * s.action[t][a])
                        .sum();
                    acc / total
                })
                .collect()
        })
        .collect();
    PredictionSweep::from_action_probs(first.times.clone(), action, vocab)
}

pub(crate) fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|x| (x - max).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / z).collect()
}
