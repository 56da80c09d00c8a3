use std::fmt::Write as _;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::cells::CellKind;
use crate::error::{Error, Result};
use crate::imagination::PhiActivation;
use crate::kv::KvFile;
use crate::losses::{LossMode, NceConfig};
use crate::pipeline::{ClassificationPoints, ModelConfig, TimelineConfig, TrainOptions};

/// Ablation axes. Every combination is trained.
#[derive(Clone, Debug, PartialEq)]
pub struct AblationGrid {
    pub loss_modes: Vec<LossMode>,
    pub residual: Vec<bool>,
    pub intention: Vec<bool>,
    pub cells: Vec<CellKind>,
}

impl Default for AblationGrid {
    fn default() -> Self {
        Self {
            loss_modes: vec![LossMode::Contrastive, LossMode::L2],
            residual: vec![true, false],
            intention: vec![true, false],
            cells: vec![CellKind::Lstm, CellKind::Gru],
        }
    }
}

/// Training, model and evaluation settings.
///
/// Defaults are desk-scale; `preset = paper` switches to hidden size 1024
/// and batch size 128.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub modality: String,
    pub cell: CellKind,
    pub hidden: usize,
    pub loss_mode: LossMode,
    pub residual: bool,
    pub intention: bool,
    pub teacher_forcing: bool,
    pub classification_points: ClassificationPoints,
    pub phi_activation: PhiActivation,
    pub forget_bias: f64,
    pub lr: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub temperature: f64,
    pub seed: u64,
    pub timeline: TimelineConfig,
    pub many_shot_threshold: usize,
    pub grid: AblationGrid,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            modality: "appearance".into(),
            cell: CellKind::Lstm,
            hidden: 64,
            loss_mode: LossMode::Contrastive,
            residual: true,
            intention: true,
            teacher_forcing: false,
            classification_points: ClassificationPoints::All,
            phi_activation: PhiActivation::Affine,
            forget_bias: 1.0,
            lr: 0.01,
            momentum: 0.9,
            batch_size: 32,
            max_epochs: 100,
            patience: 15,
            temperature: 0.2,
            seed: 0,
            timeline: TimelineConfig::default(),
            many_shot_threshold: 10,
            grid: AblationGrid::default(),
        }
    }
}

fn parse_bool(kv: &KvFile, e: &crate::kv::KvEntry) -> Result<bool> {
    match e.value.as_str() {
        "true" | "yes" | "on" | "1" => Ok(true),
        "false" | "no" | "off" | "0" => Ok(false),
        other => Err(kv.error(e, format!("expected a boolean, found `{other}`"))),
    }
}

fn parse_bools(kv: &KvFile, e: &crate::kv::KvEntry) -> Result<Vec<bool>> {
    e.value
        .split(',')
        .map(|item| {
            let entry = crate::kv::KvEntry {
                value: item.trim().to_string(),
                ..e.clone()
            };
            parse_bool(kv, &entry)
        })
        .collect()
}

impl RunConfig {
    /// Hidden size and batch size used for full-scale runs.
    pub fn paper() -> Self {
        Self {
            hidden: 1024,
            batch_size: 128,
            ..Self::default()
        }
    }

    pub fn from_kv(kv: &KvFile) -> Result<Self> {
        let mut cfg = match kv.get("preset") {
            None => Self::default(),
            Some(e) => match e.value.as_str() {
                "desk" => Self::default(),
                "paper" => Self::paper(),
                other => return Err(kv.error(e, format!("unknown preset `{other}` (desk|paper)"))),
            },
        };
        for e in &kv.entries {
            match e.key.as_str() {
                "preset" => {}
                "modality" => cfg.modality = e.value.clone(),
                "cell" => cfg.cell = kv.value(e)?,
                "hidden" => cfg.hidden = kv.value(e)?,
                "loss" => cfg.loss_mode = kv.value(e)?,
                "residual" => cfg.residual = parse_bool(kv, e)?,
                "intention" => cfg.intention = parse_bool(kv, e)?,
                "teacher_forcing" => cfg.teacher_forcing = parse_bool(kv, e)?,
                "classification_points" => cfg.classification_points = kv.value(e)?,
                "phi_activation" => cfg.phi_activation = kv.value(e)?,
                "forget_bias" => cfg.forget_bias = kv.value(e)?,
                "lr" => cfg.lr = kv.value(e)?,
                "momentum" => cfg.momentum = kv.value(e)?,
                "batch_size" => cfg.batch_size = kv.value(e)?,
                "max_epochs" => cfg.max_epochs = kv.value(e)?,
                "patience" => cfg.patience = kv.value(e)?,
                "temperature" => cfg.temperature = kv.value(e)?,
                "seed" => cfg.seed = kv.value(e)?,
                "alpha_s" => cfg.timeline.alpha = kv.value(e)?,
                "window_s" => cfg.timeline.window = kv.value(e)?,
                "observation" => cfg.timeline.observation = kv.value(e)?,
                "encoder_end_s" => cfg.timeline.encoder_end_offset = kv.value(e)?,
                "anticipation_times" => cfg.timeline.anticipation_times = kv.list(e)?,
                "many_shot_threshold" => cfg.many_shot_threshold = kv.value(e)?,
                "grid_loss" => cfg.grid.loss_modes = kv.list(e)?,
                "grid_residual" => cfg.grid.residual = parse_bools(kv, e)?,
                "grid_intention" => cfg.grid.intention = parse_bools(kv, e)?,
                "grid_cell" => cfg.grid.cells = kv.list(e)?,
                _ => return Err(kv.unknown(e)),
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_kv(&KvFile::read(path)?)
    }

    pub fn parse(text: &str) -> Result<Self> {
        Self::from_kv(&KvFile::parse(text, None)?)
    }

    pub fn validate(&self) -> Result<()> {
        if self.hidden == 0 || self.batch_size == 0 {
            return Err(Error::Config(
                "hidden and batch_size must be positive".into(),
            ));
        }
        if self.max_epochs == 0 {
            return Err(Error::Config("max_epochs must be at least 1".into()));
        }
        if self.modality.is_empty() || self.modality.contains(char::is_whitespace) {
            return Err(Error::Config(format!(
                "bad modality name `{}`",
                self.modality
            )));
        }
        if !self.forget_bias.is_finite() {
            return Err(Error::Config("forget_bias must be finite".into()));
        }
        NceConfig::new(self.temperature)?;
        crate::autodiff::SgdMomentum::new(self.lr, self.momentum)?;
        crate::pipeline::timeline(&self.timeline)?;
        if self.grid.loss_modes.is_empty()
            || self.grid.residual.is_empty()
            || self.grid.intention.is_empty()
            || self.grid.cells.is_empty()
        {
            return Err(Error::Config(
                "every ablation axis needs at least one value".into(),
            ));
        }
        Ok(())
    }

    pub fn train_options(&self) -> TrainOptions {
        TrainOptions {
            loss_mode: self.loss_mode,
            intention: self.intention,
            teacher_forcing: self.teacher_forcing,
            nce: NceConfig {
                temperature: self.temperature,
            },
            classification_points: self.classification_points,
        }
    }

    pub fn model_config(&self, d_feat: usize, num_actions: usize) -> ModelConfig {
        ModelConfig {
            cell: self.cell,
            d_feat,
            d_hidden: self.hidden,
            num_actions,
            residual: self.residual,
            phi_activation: self.phi_activation,
            forget_bias: self.forget_bias,
        }
    }

    /// Canonical `key = value` text with every field; parsing it gives back
    /// the same configuration.
    pub fn to_kv_string(&self) -> String {
        fn join<T: ToString>(items: &[T]) -> String {
            items.iter().map(T::to_string).collect::<Vec<_>>().join(",")
        }
        let mut out = String::new();
        let mut put = |k: &str, v: String| writeln!(out, "{k} = {v}").expect("string write");
        put("modality", self.modality.clone());
        put("cell", self.cell.to_string());
        put("hidden", self.hidden.to_string());
        put("loss", self.loss_mode.to_string());
        put("residual", self.residual.to_string());
        put("intention", self.intention.to_string());
        put("teacher_forcing", self.teacher_forcing.to_string());
        put(
            "classification_points",
            self.classification_points.to_string(),
        );
        put("phi_activation", self.phi_activation.to_string());
        put("forget_bias", self.forget_bias.to_string());
        put("lr", self.lr.to_string());
        put("momentum", self.momentum.to_string());
        put("batch_size", self.batch_size.to_string());
        put("max_epochs", self.max_epochs.to_string());
        put("patience", self.patience.to_string());
        put("temperature", self.temperature.to_string());
        put("seed", self.seed.to_string());
        put("alpha_s", self.timeline.alpha.to_string());
        put("window_s", self.timeline.window.to_string());
        put("observation", self.timeline.observation.to_string());
        put(
            "encoder_end_s",
            self.timeline.encoder_end_offset.to_string(),
        );
        put(
            "anticipation_times",
            join(&self.timeline.anticipation_times),
        );
        put("many_shot_threshold", self.many_shot_threshold.to_string());
        put("grid_loss", join(&self.grid.loss_modes));
        put("grid_residual", join(&self.grid.residual));
        put("grid_intention", join(&self.grid.intention));
        put("grid_cell", join(&self.grid.cells));
        out
    }

    /// SHA-256 of the canonical text, hex encoded.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_kv_string().as_bytes()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_match_the_training_protocol() {
        let cfg = RunConfig::default();
        assert_eq!((cfg.lr, cfg.momentum, cfg.temperature), (0.01, 0.9, 0.2));
        assert_eq!((cfg.hidden, cfg.batch_size, cfg.max_epochs), (64, 32, 100));
        assert_eq!(cfg.loss_mode, LossMode::Contrastive);
        assert!(cfg.residual && cfg.intention);
        let paper = RunConfig::parse("preset = paper\n").unwrap();
        assert_eq!((paper.hidden, paper.batch_size), (1024, 128));
    }

    #[test]
    fn explicit_keys_override_the_preset_in_any_order() {
        let cfg = RunConfig::parse("hidden = 16\npreset = paper\n").unwrap();
        assert_eq!((cfg.hidden, cfg.batch_size), (16, 128));
    }

    #[test]
    fn unknown_keys_are_errors() {
        let err = RunConfig::parse("lr = 0.1\nlearning_rate = 0.1\n")
            .unwrap_err()
            .to_string();
        assert!(err.contains(":2") && err.contains("learning_rate"), "{err}");
    }

    #[test]
    fn invalid_values_are_errors() {
        assert!(RunConfig::parse("cell = rnn\n").is_err());
        assert!(RunConfig::parse("residual = maybe\n").is_err());
        assert!(RunConfig::parse("momentum = 1.5\n").is_err());
        assert!(RunConfig::parse("temperature = 0\n").is_err());
        assert!(RunConfig::parse("anticipation_times = 1.1\n").is_err());
        assert!(RunConfig::parse("grid_cell = \n").is_err());
    }

    #[test]
    fn canonical_text_round_trips() {
        let cfg = RunConfig::parse(
            "cell = gru\nloss = contrastive+l2\nresidual = false\nanticipation_times = 2, 1, 0.25\n\
             grid_residual = true\nphi_activation = tanh\nclassification_points = 1s\nobservation = shared\n",
        )
        .unwrap();
        let again = RunConfig::parse(&cfg.to_kv_string()).unwrap();
        assert_eq!(again, cfg);
        assert_eq!(again.hash(), cfg.hash());
        assert_ne!(RunConfig::default().hash(), cfg.hash());
        assert_eq!(cfg.hash().len(), 64);
    }
}
