//! Encoder → ImagineRNN → decoder → classifier.
//!
//! The encoder consumes the observed frames. Each timeline branch starts the
//! ImagineRNN and the decoder from the encoder state at the branch's last
//! observed frame. The decoder's first input is that frame; its following
//! inputs are the imagined frames. The classifier reads the decoder state at
//! each prediction point.
//!
//! Branches are stacked as row blocks of `batch` rows, longest first, so the
//! branches still running at any step form a prefix of the rows.

mod predictions;
mod timeline;

pub(crate) use predictions::softmax;
pub use predictions::{
    fuse, marginalize, ActionVocab, AnticipationSample, Labels, PredictionSweep,
};
pub use timeline::{timeline, Branch, Observation, PredictionPoint, Timeline, TimelineConfig};

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, NodeId, ParamStore, Tensor};
use crate::cells::{cell_step, linear_forward, CellKind, CellParams, CellState, LinearParams};
use crate::error::{Error, Result};
use crate::imagination::{imagine_step, Phi, PhiActivation};
use crate::losses::{
    classification_loss, l2_loss, nce_terms_in_window, total_loss, ImaginationTerms, LossBreakdown,
    LossMode, NceConfig,
};

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub cell: CellKind,
    pub d_feat: usize,
    pub d_hidden: usize,
    pub num_actions: usize,
    pub residual: bool,
    pub phi_activation: PhiActivation,
    pub forget_bias: f64,
}

/// Weights of one single-modality model.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub encoder: CellParams,
    pub imagine: CellParams,
    pub phi: Phi,
    pub decoder: CellParams,
    pub classifier: LinearParams,
}

impl ModelParams {
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        if config.d_feat < 1 || config.d_hidden < 1 || config.num_actions < 1 {
            return Err(Error::Config(format!(
                "model dimensions must be positive: {config:?}"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let (k, d, h) = (config.cell, config.d_feat, config.d_hidden);
        let encoder =
            CellParams::init(&mut store, "encoder", k, d, h, config.forget_bias, &mut rng);
        let imagine =
            CellParams::init(&mut store, "imagine", k, d, h, config.forget_bias, &mut rng);
        let phi = Phi::init(&mut store, "phi", h, d, config.phi_activation, &mut rng);
        let decoder =
            CellParams::init(&mut store, "decoder", k, d, h, config.forget_bias, &mut rng);
        let classifier =
            LinearParams::init(&mut store, "classifier", h, config.num_actions, &mut rng);
        Ok(Self {
            config,
            store,
            encoder,
            imagine,
            phi,
            decoder,
            classifier,
        })
    }

    /// Rebuilds a model around a store whose parameters follow the naming of
    /// [`ModelParams::init`].
    pub fn from_store(config: ModelConfig, store: ParamStore) -> Result<Self> {
        let encoder = CellParams::bind(&store, "encoder", config.cell)?;
        let imagine = CellParams::bind(&store, "imagine", config.cell)?;
        let decoder = CellParams::bind(&store, "decoder", config.cell)?;
        let phi = Phi {
            linear: LinearParams::bind(&store, "phi")?,
            activation: config.phi_activation,
        };
        let classifier = LinearParams::bind(&store, "classifier")?;
        let dims_ok = [&encoder, &imagine, &decoder]
            .iter()
            .all(|c| c.d_in == config.d_feat && c.d_h == config.d_hidden)
            && phi.linear.d_in == config.d_hidden
            && phi.linear.d_out == config.d_feat
            && classifier.d_in == config.d_hidden
            && classifier.d_out == config.num_actions;
        if !dims_ok || store.len() != 3 * 2 * config.cell.num_gates() + 4 {
            return Err(Error::Contract(
                "stored parameters do not match the model config".into(),
            ));
        }
        Ok(Self {
            config,
            store,
            encoder,
            imagine,
            phi,
            decoder,
            classifier,
        })
    }
}

/// Which prediction points contribute to the classification loss.
#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash)]
pub enum ClassificationPoints {
    All,
    /// Only the prediction at `T = 1 s`.
    OneSecond,
}

impl fmt::Display for ClassificationPoints {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ClassificationPoints::All => "all",
            ClassificationPoints::OneSecond => "1s",
        })
    }
}

impl FromStr for ClassificationPoints {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "all" => Ok(ClassificationPoints::All),
            "1s" => Ok(ClassificationPoints::OneSecond),
            other => Err(Error::Config(format!(
                "unknown classification points `{other}` (all|1s)"
            ))),
        }
    }
}

#[derive(Copy, Clone, Debug, PartialEq)]
pub struct TrainOptions {
    pub loss_mode: LossMode,
    /// Let the classification loss reach the ImagineRNN through the decoder.
    pub intention: bool,
    pub teacher_forcing: bool,
    pub nce: NceConfig,
    pub classification_points: ClassificationPoints,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self {
            loss_mode: LossMode::Contrastive,
            intention: true,
            teacher_forcing: false,
            nce: NceConfig::default(),
            classification_points: ClassificationPoints::All,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Objective {
    pub breakdown: LossBreakdown,
    /// Classification loss used to fit the decoder and classifier when the
    /// intention term is disabled; zero otherwise.
    pub head_loss: f64,
    /// Scalar to differentiate.
    pub node: NodeId,
}

#[derive(Clone, Debug)]
pub struct BatchOutput {
    pub objective: Option<Objective>,
    /// Per prediction point, `[batch × num_actions]` logits.
    pub logits: Vec<NodeId>,
    pub imagined: Vec<NodeId>,
    /// Decoder input at each step, after any detaching.
    pub decoder_inputs: Vec<NodeId>,
}

fn stack_rows(
    samples: &[&AnticipationSample],
    pick: impl Fn(&AnticipationSample) -> Result<&[f64]>,
) -> Result<Tensor> {
    let rows = samples
        .iter()
        .map(|s| pick(s))
        .collect::<Result<Vec<_>>>()?;
    Tensor::from_rows(&rows)
}

fn observed(s: &AnticipationSample, modality: usize) -> Result<&Tensor> {
    s.observed
        .get(modality)
        .ok_or_else(|| Error::Contract(format!("sample {} lacks modality {modality}", s.video_id)))
}

fn future(s: &AnticipationSample, modality: usize) -> Result<&Tensor> {
    s.future_truth
        .as_ref()
        .and_then(|f| f.get(modality))
        .ok_or_else(|| {
            Error::TrainingData(format!(
                "sample {} @ {}s has no future frames for training",
                s.video_id, s.action_start
            ))
        })
}

fn first_rows(g: &mut Graph, node: NodeId, rows: usize) -> Result<NodeId> {
    if g.value(node).dims2().0 == rows {
        Ok(node)
    } else {
        g.slice_rows(node, 0, rows)
    }
}

fn first_state_rows(g: &mut Graph, state: CellState, rows: usize) -> Result<CellState> {
    Ok(CellState {
        h: first_rows(g, state.h, rows)?,
        c: state.c.map(|c| first_rows(g, c, rows)).transpose()?,
    })
}

fn stack_nodes(g: &mut Graph, parts: &[NodeId]) -> Result<NodeId> {
    match parts {
        [only] => Ok(*only),
        _ => g.concat_rows(parts),
    }
}

/// Rows of branch `branch` in a stacked `[branches·batch × d]` node.
fn branch_rows(g: &mut Graph, node: NodeId, branch: usize, batch: usize) -> Result<NodeId> {
    if branch == 0 && g.value(node).dims2().0 == batch {
        Ok(node)
    } else {
        g.slice_rows(node, branch * batch, batch)
    }
}

/// Runs the full model on a batch. With `train` set the imagination and
/// classification losses are assembled into [`BatchOutput::objective`].
pub fn forward_batch(
    g: &mut Graph,
    model: &ModelParams,
    samples: &[&AnticipationSample],
    modality: usize,
    tl: &Timeline,
    train: Option<&TrainOptions>,
) -> Result<BatchOutput> {
    if samples.is_empty() {
        return Err(Error::Contract("empty batch".into()));
    }
    let cfg = &model.config;
    let store = &model.store;
    let batch = samples.len();
    for s in samples {
        let obs = observed(s, modality)?;
        if obs.dims2() != (tl.encoder_steps, cfg.d_feat) {
            return Err(Error::shape(
                "observed frames",
                obs.shape(),
                &[tl.encoder_steps, cfg.d_feat],
            ));
        }
    }
    let rollout_steps = tl.rollout_steps();
    let truth = match train {
        Some(_) => {
            if rollout_steps == 0 {
                return Err(Error::Contract(
                    "training needs at least one imagined step to supervise (anticipation span of one step)".into(),
                ));
            }
            for s in samples {
                let f = future(s, modality)?;
                if f.dims2() != (tl.future_offsets.len(), cfg.d_feat) {
                    return Err(Error::shape(
                        "future frames",
                        f.shape(),
                        &[tl.future_offsets.len(), cfg.d_feat],
                    ));
                }
            }
            (0..tl.future_offsets.len())
                .map(|k| Ok(g.leaf(stack_rows(samples, |s| Ok(future(s, modality)?.row(k)))?)))
                .collect::<Result<Vec<_>>>()?
        }
        None => Vec::new(),
    };

    let mut states = Vec::with_capacity(tl.encoder_steps);
    let mut frames = Vec::with_capacity(tl.encoder_steps);
    let mut enc = CellState::zeros(g, cfg.cell, batch, cfg.d_hidden);
    for i in 0..tl.encoder_steps {
        let x = stack_rows(samples, |s| Ok(observed(s, modality)?.row(i)))?;
        let x = g.leaf(x);
        enc = cell_step(g, store, &model.encoder, x, enc)?;
        states.push(enc);
        frames.push(x);
    }
    let starts: Vec<usize> = tl.branches.iter().map(|b| b.encoder_step - 1).collect();
    let first_frame = {
        let parts: Vec<NodeId> = starts.iter().map(|&i| frames[i]).collect();
        stack_nodes(g, &parts)?
    };
    let start_state = {
        let h: Vec<NodeId> = starts.iter().map(|&i| states[i].h).collect();
        let c: Option<Vec<NodeId>> = starts.iter().map(|&i| states[i].c).collect();
        CellState {
            h: stack_nodes(g, &h)?,
            c: c.map(|c| stack_nodes(g, &c)).transpose()?,
        }
    };
    let active_rows = |steps: usize, of: fn(&Branch) -> usize| {
        batch * tl.branches.iter().filter(|b| of(b) >= steps).count()
    };

    // imagined[k] holds step k+1 for every branch that imagines that far
    let teacher_forcing = matches!(train, Some(opts) if opts.teacher_forcing);
    let mut imagined = Vec::with_capacity(rollout_steps);
    let mut input = first_frame;
    let mut state = start_state;
    for k in 1..=rollout_steps {
        let rows = active_rows(k, Branch::rollout_steps);
        input = first_rows(g, input, rows)?;
        state = first_state_rows(g, state, rows)?;
        let (f_hat, next, _) = imagine_step(
            g,
            store,
            &model.imagine,
            &model.phi,
            input,
            state,
            cfg.residual,
        )?;
        imagined.push(f_hat);
        state = next;
        input = if teacher_forcing && k < rollout_steps {
            let parts: Vec<NodeId> = tl
                .branches
                .iter()
                .take_while(|b| b.rollout_steps() > k)
                .map(|b| truth[b.future_start + k - 1])
                .collect();
            stack_nodes(g, &parts)?
        } else {
            f_hat
        };
    }

    let block_intention = matches!(train, Some(opts) if !opts.intention);
    let mut decoder_inputs = vec![first_frame];
    for &f in imagined.iter().take(tl.decoder_steps().saturating_sub(1)) {
        decoder_inputs.push(if block_intention { g.detach(f) } else { f });
    }

    let mut dec = start_state;
    let mut logits = vec![None; tl.predictions.len()];
    for (j, &input) in decoder_inputs.iter().enumerate() {
        let step = j + 1;
        let rows = active_rows(step, |b| b.decoder_steps);
        let input = first_rows(g, input, rows)?;
        dec = first_state_rows(g, dec, rows)?;
        dec = cell_step(g, store, &model.decoder, input, dec)?;
        for (i, p) in tl.predictions.iter().enumerate() {
            if p.decoder_step == step {
                let h = branch_rows(g, dec.h, p.branch, batch)?;
                logits[i] = Some(linear_forward(g, store, &model.classifier, h)?);
            }
        }
    }
    let logits: Vec<NodeId> = logits
        .into_iter()
        .map(|l| l.ok_or_else(|| Error::Contract("prediction point beyond the decoder".into())))
        .collect::<Result<_>>()?;

    let objective = match train {
        Some(opts) => {
            let mut pairs = Vec::with_capacity(tl.branches.len());
            for (index, b) in tl.branches.iter().enumerate() {
                if b.rollout_steps() == 0 {
                    continue;
                }
                let preds = (0..b.rollout_steps())
                    .map(|k| branch_rows(g, imagined[k], index, batch))
                    .collect::<Result<Vec<_>>>()?;
                pairs.push((preds, b.future_start));
            }
            Some(objective(g, samples, tl, opts, &pairs, &truth, &logits)?)
        }
        None => None,
    };
    Ok(BatchOutput {
        objective,
        logits,
        imagined,
        decoder_inputs,
    })
}

/// `branches` pairs each branch's imagined frames with the index of their
/// first ground-truth row in `truth`.
fn objective(
    g: &mut Graph,
    samples: &[&AnticipationSample],
    tl: &Timeline,
    opts: &TrainOptions,
    branches: &[(Vec<NodeId>, usize)],
    truth: &[NodeId],
    logits: &[NodeId],
) -> Result<Objective> {
    let mut terms = ImaginationTerms::default();
    for (imagined, start) in branches {
        if opts.loss_mode.uses_nce() {
            terms
                .nce
                .extend(nce_terms_in_window(g, imagined, truth, *start, opts.nce)?);
        }
        if opts.loss_mode.uses_l2() {
            for (&f, &t) in imagined.iter().zip(&truth[*start..]) {
                terms.l2.push(l2_loss(g, f, t)?);
            }
        }
    }
    let labels: Vec<usize> = samples.iter().map(|s| s.labels.action).collect();
    let points: Vec<usize> = match opts.classification_points {
        ClassificationPoints::All => (0..logits.len()).collect(),
        ClassificationPoints::OneSecond => vec![tl
            .prediction_index(1.0)
            .ok_or_else(|| Error::Config("no prediction point at T = 1s".into()))?],
    };
    let class_terms = points
        .iter()
        .map(|&p| classification_loss(g, logits[p], &labels))
        .collect::<Result<Vec<_>>>()?;
    let (breakdown, mut node) =
        total_loss(g, &terms, &class_terms, opts.loss_mode, opts.intention)?;
    let mut head_loss = 0.0;
    if !opts.intention {
        let stacked = g.concat_rows(&class_terms)?;
        let head = g.mean(stacked);
        head_loss = g.value(head).data()[0];
        node = g.add(node, head)?;
    }
    Ok(Objective {
        breakdown,
        head_loss,
        node,
    })
}

fn sweeps_from_logits(
    g: &Graph,
    logits: &[NodeId],
    batch: usize,
    tl: &Timeline,
    vocab: &ActionVocab,
) -> Result<Vec<PredictionSweep>> {
    (0..batch)
        .map(|b| {
            let action = logits.iter().map(|&l| softmax(g.value(l).row(b))).collect();
            PredictionSweep::from_action_probs(tl.times(), action, vocab)
        })
        .collect()
}

/// Losses and predictions for a single training sample.
pub fn forward_train(
    model: &ModelParams,
    sample: &AnticipationSample,
    modality: usize,
    tl: &Timeline,
    vocab: &ActionVocab,
    opts: &TrainOptions,
) -> Result<(LossBreakdown, PredictionSweep)> {
    let mut g = Graph::new();
    let out = forward_batch(&mut g, model, &[sample], modality, tl, Some(opts))?;
    let sweep = sweeps_from_logits(&g, &out.logits, 1, tl, vocab)?.remove(0);
    Ok((out.objective.expect("train mode").breakdown, sweep))
}

pub fn predict_sweep(
    model: &ModelParams,
    sample: &AnticipationSample,
    modality: usize,
    tl: &Timeline,
    vocab: &ActionVocab,
) -> Result<PredictionSweep> {
    Ok(predict_batch(model, &[sample], modality, tl, vocab)?.remove(0))
}

pub fn predict_batch(
    model: &ModelParams,
    samples: &[&AnticipationSample],
    modality: usize,
    tl: &Timeline,
    vocab: &ActionVocab,
) -> Result<Vec<PredictionSweep>> {
    let mut g = Graph::new();
    let out = forward_batch(&mut g, model, samples, modality, tl, None)?;
    sweeps_from_logits(&g, &out.logits, samples.len(), tl, vocab)
}
