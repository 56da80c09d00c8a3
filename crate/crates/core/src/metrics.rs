//! Top-k accuracy, Mean Top-5 Recall and per-anticipation-time reports.
//!
//! Ranks break ties by ascending class id: the rank of label `l` is the
//! number of classes `c` with `s_c > s_l`, or `s_c == s_l` and `c < l`.

use std::collections::BTreeSet;
use std::fmt::{self, Write as _};
use std::path::Path;

use log::warn;

use crate::error::{Error, Result};
use crate::pipeline::{
    fuse, predict_batch, ActionVocab, AnticipationSample, Labels, ModelParams, PredictionSweep,
    Timeline,
};

/// Zero-based position of `label` in the descending, id-tie-broken order.
pub fn rank_of(scores: &[f64], label: usize) -> usize {
    let s = scores[label];
    scores
        .iter()
        .enumerate()
        .filter(|&(c, &x)| x > s || (x == s && c < label))
        .count()
}

fn check_inputs(scores: &[Vec<f64>], labels: &[usize]) -> Result<usize> {
    if scores.len() != labels.len() {
        return Err(Error::Metric(format!(
            "{} score vectors for {} labels",
            scores.len(),
            labels.len()
        )));
    }
    let classes = scores
        .first()
        .map(Vec::len)
        .ok_or_else(|| Error::Metric("no samples".into()))?;
    for (i, (s, &l)) in scores.iter().zip(labels).enumerate() {
        if s.len() != classes {
            return Err(Error::Metric(format!(
                "sample {i} has {} scores, expected {classes}",
                s.len()
            )));
        }
        if l >= classes {
            return Err(Error::Label {
                label: l,
                num_classes: classes,
            });
        }
        if s.iter().any(|x| x.is_nan()) {
            return Err(Error::Metric(format!("sample {i} has NaN scores")));
        }
    }
    Ok(classes)
}

/// Fraction of samples whose label ranks among the top `k`.
pub fn topk_accuracy(scores: &[Vec<f64>], labels: &[usize], k: usize) -> Result<f64> {
    let classes = check_inputs(scores, labels)?;
    if k == 0 || k > classes {
        return Err(Error::Metric(format!("k = {k} is outside 1..={classes}")));
    }
    let hits = scores
        .iter()
        .zip(labels)
        .filter(|(s, &l)| rank_of(s, l) < k)
        .count();
    Ok(hits as f64 / labels.len() as f64)
}

/// Per-class top-5 recall averaged over `many_shot`. Classes without any
/// sample are skipped with a warning. With fewer than five classes the
/// cut-off is the number of classes.
pub fn mean_top5_recall(
    scores: &[Vec<f64>],
    labels: &[usize],
    many_shot: &BTreeSet<usize>,
) -> Result<f64> {
    if many_shot.is_empty() {
        return Err(Error::Metric("many-shot set is empty".into()));
    }
    let classes = check_inputs(scores, labels)?;
    let k = classes.min(5);
    let mut total = 0.0;
    let mut used = 0usize;
    for &c in many_shot {
        if c >= classes {
            return Err(Error::Label {
                label: c,
                num_classes: classes,
            });
        }
        let (mut n, mut hits) = (0usize, 0usize);
        for (s, &l) in scores.iter().zip(labels) {
            if l == c {
                n += 1;
                hits += usize::from(rank_of(s, l) < k);
            }
        }
        if n == 0 {
            warn!("many-shot class {c} has no samples; skipped");
            continue;
        }
        total += hits as f64 / n as f64;
        used += 1;
    }
    if used == 0 {
        return Err(Error::Metric("no many-shot class has any sample".into()));
    }
    Ok(total / used as f64)
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Target {
    Action,
    Noun,
    Verb,
}

impl Target {
    /// In name order.
    pub const ALL: [Target; 3] = [Target::Action, Target::Noun, Target::Verb];

    fn label(self, l: &Labels) -> usize {
        match self {
            Target::Action => l.action,
            Target::Noun => l.noun,
            Target::Verb => l.verb,
        }
    }

    fn scores(self, sweep: &PredictionSweep, t: usize) -> &[f64] {
        match self {
            Target::Action => &sweep.action[t],
            Target::Noun => &sweep.noun[t],
            Target::Verb => &sweep.verb[t],
        }
    }
}

impl fmt::Display for Target {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Target::Action => "action",
            Target::Noun => "noun",
            Target::Verb => "verb",
        })
    }
}

/// Many-shot classes per target.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManyShot {
    pub action: BTreeSet<usize>,
    pub verb: BTreeSet<usize>,
    pub noun: BTreeSet<usize>,
}

impl ManyShot {
    /// Classes with at least `threshold` training samples.
    pub fn from_training(labels: &[Labels], vocab: &ActionVocab, threshold: usize) -> Self {
        let count = |n: usize, pick: fn(&Labels) -> usize| -> BTreeSet<usize> {
            let mut counts = vec![0usize; n];
            for l in labels {
                counts[pick(l)] += 1;
            }
            (0..n).filter(|&c| counts[c] >= threshold).collect()
        };
        Self {
            action: count(vocab.num_actions(), |l| l.action),
            verb: count(vocab.verbs.len(), |l| l.verb),
            noun: count(vocab.nouns.len(), |l| l.noun),
        }
    }

    /// Every class counts as many-shot.
    pub fn all(vocab: &ActionVocab) -> Self {
        Self {
            action: (0..vocab.num_actions()).collect(),
            verb: (0..vocab.verbs.len()).collect(),
            noun: (0..vocab.nouns.len()).collect(),
        }
    }

    fn get(&self, target: Target) -> &BTreeSet<usize> {
        match target {
            Target::Action => &self.action,
            Target::Noun => &self.noun,
            Target::Verb => &self.verb,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalRow {
    pub time: f64,
    pub target: Target,
    pub top1: f64,
    pub top5: f64,
    pub mt5r: f64,
    pub n: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    /// Sorted by descending time, then target name.
    pub rows: Vec<EvalRow>,
}

impl EvalReport {
    pub fn from_sweeps(
        sweeps: &[PredictionSweep],
        labels: &[Labels],
        many_shot: &ManyShot,
    ) -> Result<Self> {
        let first = sweeps
            .first()
            .ok_or_else(|| Error::Eval("no samples to evaluate".into()))?;
        if sweeps.len() != labels.len() {
            return Err(Error::Eval(format!(
                "{} sweeps for {} labels",
                sweeps.len(),
                labels.len()
            )));
        }
        let mut order: Vec<usize> = (0..first.times.len()).collect();
        order.sort_by(|&a, &b| first.times[b].total_cmp(&first.times[a]));
        let mut rows = Vec::with_capacity(order.len() * 3);
        for t in order {
            for target in Target::ALL {
                let scores: Vec<Vec<f64>> = sweeps
                    .iter()
                    .map(|s| target.scores(s, t).to_vec())
                    .collect();
                let truth: Vec<usize> = labels.iter().map(|l| target.label(l)).collect();
                let classes = scores[0].len();
                rows.push(EvalRow {
                    time: first.times[t],
                    target,
                    top1: topk_accuracy(&scores, &truth, 1)?,
                    top5: topk_accuracy(&scores, &truth, classes.min(5))?,
                    mt5r: mean_top5_recall(&scores, &truth, many_shot.get(target))?,
                    n: truth.len(),
                });
            }
        }
        Ok(Self { rows })
    }

    pub fn get(&self, time: f64, target: Target) -> Option<&EvalRow> {
        self.rows
            .iter()
            .find(|r| r.target == target && (r.time - time).abs() < 1e-9)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("T,target,top1,top5,mt5r,n\n");
        for r in &self.rows {
            writeln!(
                out,
                "{:.2},{},{:.6},{:.6},{:.6},{}",
                r.time, r.target, r.top1, r.top5, r.mt5r, r.n
            )
            .expect("string write");
        }
        out
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }
}

const EVAL_CHUNK: usize = 64;

/// Prediction sweeps of one or more per-modality models, late-fused with
/// `weights` when there is more than one.
pub fn predict_fused(
    models: &[(&ModelParams, usize)],
    weights: &[f64],
    samples: &[AnticipationSample],
    tl: &Timeline,
    vocab: &ActionVocab,
) -> Result<Vec<PredictionSweep>> {
    if models.is_empty() {
        return Err(Error::Eval("no model to evaluate".into()));
    }
    if weights.len() != models.len() {
        return Err(Error::Eval(format!(
            "{} fusion weights for {} models",
            weights.len(),
            models.len()
        )));
    }
    let mut per_model: Vec<Vec<PredictionSweep>> = Vec::with_capacity(models.len());
    for &(model, modality) in models {
        let mut sweeps = Vec::with_capacity(samples.len());
        for chunk in samples.chunks(EVAL_CHUNK) {
            let refs: Vec<&AnticipationSample> = chunk.iter().collect();
            sweeps.extend(predict_batch(model, &refs, modality, tl, vocab)?);
        }
        per_model.push(sweeps);
    }
    if per_model.len() == 1 {
        return Ok(per_model.remove(0));
    }
    (0..samples.len())
        .map(|i| {
            let group: Vec<PredictionSweep> = per_model.iter().map(|m| m[i].clone()).collect();
            fuse(&group, weights, vocab)
        })
        .collect()
}

/// Evaluates (fused) models on a set of samples at every anticipation time.
pub fn evaluate(
    models: &[(&ModelParams, usize)],
    weights: &[f64],
    samples: &[AnticipationSample],
    tl: &Timeline,
    vocab: &ActionVocab,
    many_shot: &ManyShot,
) -> Result<EvalReport> {
    if samples.is_empty() {
        return Err(Error::Eval("evaluation split is empty".into()));
    }
    let sweeps = predict_fused(models, weights, samples, tl, vocab)?;
    let labels: Vec<Labels> = samples.iter().map(|s| s.labels).collect();
    EvalReport::from_sweeps(&sweeps, &labels, many_shot)
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;

    /// Rank by an explicit stable sort.
    fn oracle_rank(scores: &[f64], label: usize) -> usize {
        let mut idx: Vec<usize> = (0..scores.len()).collect();
        idx.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap().then(a.cmp(&b)));
        idx.iter().position(|&c| c == label).unwrap()
    }

    fn oracle_topk(scores: &[Vec<f64>], labels: &[usize], k: usize) -> f64 {
        let hits = scores
            .iter()
            .zip(labels)
            .filter(|(s, &l)| oracle_rank(s, l) < k)
            .count();
        hits as f64 / labels.len() as f64
    }

    fn oracle_mt5r(scores: &[Vec<f64>], labels: &[usize], many: &BTreeSet<usize>) -> f64 {
        let k = scores[0].len().min(5);
        let mut recalls = Vec::new();
        for &c in many {
            let members: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == c).collect();
            if members.is_empty() {
                continue;
            }
            let hits = members
                .iter()
                .filter(|&&i| oracle_rank(&scores[i], c) < k)
                .count();
            recalls.push(hits as f64 / members.len() as f64);
        }
        recalls.iter().sum::<f64>() / recalls.len() as f64
    }

    #[test]
    fn hand_ranked_example() {
        let scores = vec![vec![0.1, 0.5, 0.4], vec![0.6, 0.3, 0.1]];
        // label 2 ranks second in the first sample, label 1 second in the other
        assert_eq!(topk_accuracy(&scores, &[2, 1], 2).unwrap(), 1.0);
        assert_eq!(topk_accuracy(&scores, &[2, 1], 1).unwrap(), 0.0);
        // label 2 ranks last in the second sample
        assert_eq!(topk_accuracy(&scores, &[2, 2], 2).unwrap(), 0.5);
    }

    #[test]
    fn perfect_and_vacuous_cases() {
        let one_hot: Vec<Vec<f64>> = (0..4)
            .map(|i| (0..4).map(|c| f64::from(u8::from(c == i))).collect())
            .collect();
        let labels = [0, 1, 2, 3];
        for k in 1..=4 {
            assert_eq!(topk_accuracy(&one_hot, &labels, k).unwrap(), 1.0);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let random: Vec<Vec<f64>> = (0..4)
            .map(|_| (0..4).map(|_| rng.random()).collect())
            .collect();
        assert_eq!(topk_accuracy(&random, &labels, 4).unwrap(), 1.0);
        assert!(matches!(
            topk_accuracy(&random, &labels, 5),
            Err(Error::Metric(_))
        ));
        assert!(matches!(
            topk_accuracy(&random, &labels, 0),
            Err(Error::Metric(_))
        ));
    }

    #[test]
    fn ties_break_by_ascending_class_id() {
        let flat = vec![vec![0.25; 4]; 4];
        assert_eq!(rank_of(&flat[0], 0), 0);
        assert_eq!(rank_of(&flat[0], 3), 3);
        assert_eq!(topk_accuracy(&flat, &[0, 1, 2, 3], 1).unwrap(), 0.25);
        assert_eq!(topk_accuracy(&flat, &[0, 1, 2, 3], 2).unwrap(), 0.5);
    }

    #[test]
    fn recall_is_a_class_mean() {
        // seven classes ranked 0..6 for every sample: class 0 always hits the
        // top 5, class 6 never does
        let scores: Vec<Vec<f64>> = (0..4)
            .map(|_| (0..7).map(|c| 7.0 - c as f64).collect())
            .collect();
        let labels = [0, 0, 0, 6];
        assert_eq!(
            mean_top5_recall(&scores, &labels, &[0, 6].into()).unwrap(),
            0.5
        );
        assert_eq!(topk_accuracy(&scores, &labels, 5).unwrap(), 0.75);
    }

    #[test]
    fn recall_degenerate_cases() {
        let scores = vec![vec![0.9, 0.1], vec![0.8, 0.2]];
        assert_eq!(
            mean_top5_recall(&scores, &[0, 0], &[0].into()).unwrap(),
            1.0
        );
        assert!(matches!(
            mean_top5_recall(&scores, &[0, 0], &BTreeSet::new()),
            Err(Error::Metric(_))
        ));
        // class 1 has no samples and is skipped
        assert_eq!(
            mean_top5_recall(&scores, &[0, 0], &[0, 1].into()).unwrap(),
            1.0
        );
    }

    #[test]
    fn balanced_all_classes_recall_equals_top5() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let classes = 9;
        let labels: Vec<usize> = (0..classes * 4).map(|i| i % classes).collect();
        let scores: Vec<Vec<f64>> = labels
            .iter()
            .map(|_| (0..classes).map(|_| rng.random()).collect())
            .collect();
        let all: BTreeSet<usize> = (0..classes).collect();
        let r = mean_top5_recall(&scores, &labels, &all).unwrap();
        let t = topk_accuracy(&scores, &labels, 5).unwrap();
        assert!((r - t).abs() <= 1e-12);
    }

    #[test]
    fn verb_top1_tends_to_beat_action_top1() {
        // Labels are drawn from the predicted distribution, where the expected
        // verb top-1 is the largest verb marginal and can only exceed the
        // largest action probability.
        let vocab = ActionVocab::full_grid(3, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let trials = 200;
        let (mut wins, mut verb_sum, mut action_sum) = (0, 0.0, 0.0);
        for _ in 0..trials {
            let mut sweeps = Vec::new();
            let mut labels = Vec::new();
            for _ in 0..30 {
                let logits: Vec<f64> = (0..12).map(|_| rng.random_range(-2.0..2.0)).collect();
                let probs = crate::pipeline::softmax(&logits);
                let u: f64 = rng.random();
                let mut acc = 0.0;
                let action = probs.iter().position(|p| {
                    acc += p;
                    u < acc
                });
                labels.push(vocab.labels(action.unwrap_or(11)).unwrap());
                sweeps.push(
                    PredictionSweep::from_action_probs(vec![1.0], vec![probs], &vocab).unwrap(),
                );
            }
            let report = EvalReport::from_sweeps(&sweeps, &labels, &ManyShot::all(&vocab)).unwrap();
            let verb = report.get(1.0, Target::Verb).unwrap().top1;
            let action = report.get(1.0, Target::Action).unwrap().top1;
            wins += usize::from(verb >= action);
            verb_sum += verb;
            action_sum += action;
        }
        assert!(verb_sum > action_sum);
        assert!(wins as f64 / trials as f64 >= 0.95, "{wins}/{trials}");
    }

    #[test]
    fn report_layout_and_csv() {
        let vocab = ActionVocab::full_grid(3, 4);
        let times = vec![2.0, 1.0, 0.25];
        let sweep =
            PredictionSweep::from_action_probs(times, vec![vec![1.0 / 12.0; 12]; 3], &vocab)
                .unwrap();
        let labels: Vec<Labels> = (0..12).map(|a| vocab.labels(a).unwrap()).collect();
        let report =
            EvalReport::from_sweeps(&vec![sweep; 12], &labels, &ManyShot::all(&vocab)).unwrap();
        assert_eq!(report.rows.len(), 9);
        let r = report.get(1.0, Target::Action).unwrap();
        assert_eq!((r.top1, r.top5, r.n), (1.0 / 12.0, 5.0 / 12.0, 12));
        let csv = report.to_csv();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "T,target,top1,top5,mt5r,n");
        assert_eq!(lines[1], "2.00,action,0.083333,0.416667,0.416667,12");
        assert!(lines[2].starts_with("2.00,noun,"));
        assert!(lines[3].starts_with("2.00,verb,0.333333,1.000000"));
        assert!(lines[9].starts_with("0.25,verb"));
        for row in &report.rows {
            assert!(row.top1 <= row.top5 && (0.0..=1.0).contains(&row.top5));
        }
    }

    #[test]
    fn empty_split_is_an_eval_error() {
        let vocab = ActionVocab::full_grid(1, 2);
        assert!(matches!(
            EvalReport::from_sweeps(&[], &[], &ManyShot::all(&vocab)),
            Err(Error::Eval(_))
        ));
    }

    fn instance() -> impl Strategy<Value = (Vec<Vec<f64>>, Vec<usize>, usize, BTreeSet<usize>)> {
        (1usize..=20, 1usize..=50).prop_flat_map(|(classes, n)| {
            (
                // few distinct values so ties are common
                prop::collection::vec(prop::collection::vec(0u8..4, classes), n).prop_map(|v| {
                    v.into_iter()
                        .map(|r| r.into_iter().map(f64::from).collect())
                        .collect()
                }),
                prop::collection::vec(0..classes, n),
                1..=classes,
                prop::collection::btree_set(0..classes, 1..=classes),
            )
        })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]

        #[test]
        fn metrics_match_sort_oracle((scores, labels, k, many) in instance()) {
            prop_assert_eq!(topk_accuracy(&scores, &labels, k).unwrap(), oracle_topk(&scores, &labels, k));
            let has_member = many.iter().any(|c| labels.contains(c));
            match mean_top5_recall(&scores, &labels, &many) {
                Ok(r) => prop_assert_eq!(r, oracle_mt5r(&scores, &labels, &many)),
                Err(_) => prop_assert!(!has_member),
            }
        }

        #[test]
        fn topk_is_monotone_in_k((scores, labels, _k, _m) in instance()) {
            let classes = scores[0].len();
            let mut prev = 0.0;
            for k in 1..=classes {
                let acc = topk_accuracy(&scores, &labels, k).unwrap();
                prop_assert!(acc >= prev);
                prev = acc;
            }
            prop_assert_eq!(prev, 1.0);
        }

        #[test]
        fn sample_order_does_not_matter((scores, labels, k, _m) in instance(), seed in 0u64..1000) {
            let mut idx: Vec<usize> = (0..labels.len()).collect();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rand::seq::SliceRandom::shuffle(idx.as_mut_slice(), &mut rng);
            let s2: Vec<Vec<f64>> = idx.iter().map(|&i| scores[i].clone()).collect();
            let l2: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
            prop_assert_eq!(topk_accuracy(&scores, &labels, k).unwrap(), topk_accuracy(&s2, &l2, k).unwrap());
        }
    }
}
