//! Procedural egocentric-like feature streams and the on-disk dataset format.
//!
//! A video is a Markov chain of actions. Each action has one prototype per
//! modality built from a verb part, a noun part and a small action-specific
//! part. A frame is the current prototype, blended linearly into the next
//! action's prototype over the last `blend_s` seconds before a boundary,
//! plus a Gaussian random-walk drift and white noise.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::{self, Write as _};
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use log::{info, warn};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::kv::KvFile;
use crate::pipeline::{ActionVocab, AnticipationSample, Timeline};

const GRID_TOLERANCE: f64 = 1e-6;

#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::Config(format!(
                "unknown split `{other}` (train|val|test)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModalitySpec {
    pub name: String,
    pub dim: usize,
    pub noise_std: f64,
    pub drift_std: f64,
}

impl FromStr for ModalitySpec {
    type Err = Error;

    /// `name:dim:noise_std:drift_std`
    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.split(':').map(str::trim).collect();
        let bad = || {
            Error::Config(format!(
                "modality `{s}` is not name:dim:noise_std:drift_std"
            ))
        };
        if parts.len() != 4 || parts[0].is_empty() {
            return Err(bad());
        }
        Ok(Self {
            name: parts[0].to_string(),
            dim: parts[1].parse().map_err(|_| bad())?,
            noise_std: parts[2].parse().map_err(|_| bad())?,
            drift_std: parts[3].parse().map_err(|_| bad())?,
        })
    }
}

/// How the action transition matrix is produced.
#[derive(Clone, Debug, PartialEq)]
pub enum TransitionSpec {
    /// Each action has one seeded successor (never itself) taking
    /// probability `p`; the remaining mass is spread evenly over the other
    /// actions.
    Successor(f64),
    Uniform,
    Identity,
    /// Explicit row-stochastic matrix.
    Rows(Vec<Vec<f64>>),
}

impl FromStr for TransitionSpec {
    type Err = Error;

    /// `successor:<p>`, `uniform`, `identity` or `rows:<r0>;<r1>;...` with
    /// space-separated entries in each row.
    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        match s {
            "uniform" => return Ok(TransitionSpec::Uniform),
            "identity" => return Ok(TransitionSpec::Identity),
            _ => {}
        }
        if let Some(p) = s.strip_prefix("successor:") {
            let p: f64 = p
                .trim()
                .parse()
                .map_err(|_| Error::Config(format!("bad successor probability in `{s}`")))?;
            return Ok(TransitionSpec::Successor(p));
        }
        if let Some(rows) = s.strip_prefix("rows:") {
            let rows = rows
                .split(';')
                .map(|row| {
                    row.split_whitespace()
                        .map(|x| {
                            x.parse::<f64>()
                                .map_err(|_| Error::Config(format!("bad matrix entry `{x}`")))
                        })
                        .collect::<Result<Vec<f64>>>()
                })
                .collect::<Result<Vec<_>>>()?;
            return Ok(TransitionSpec::Rows(rows));
        }
        Err(Error::Config(format!(
            "unknown transition `{s}` (successor:<p>|uniform|identity|rows:...)"
        )))
    }
}

impl fmt::Display for TransitionSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TransitionSpec::Successor(p) => write!(f, "successor:{p}"),
            TransitionSpec::Uniform => f.write_str("uniform"),
            TransitionSpec::Identity => f.write_str("identity"),
            TransitionSpec::Rows(rows) => {
                f.write_str("rows:")?;
                for (i, row) in rows.iter().enumerate() {
                    if i > 0 {
                        f.write_str(";")?;
                    }
                    let cells: Vec<String> = row.iter().map(f64::to_string).collect();
                    f.write_str(&cells.join(" "))?;
                }
                Ok(())
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct WorldConfig {
    pub num_verbs: usize,
    pub num_nouns: usize,
    pub transition: TransitionSpec,
    pub min_duration_s: f64,
    pub max_duration_s: f64,
    pub segments_per_video: usize,
    pub blend_s: f64,
    pub alpha_s: f64,
    /// Std of the action-specific part of each prototype.
    pub action_offset_std: f64,
    pub modalities: Vec<ModalitySpec>,
    pub train_videos: usize,
    pub val_videos: usize,
    pub test_videos: usize,
    /// Segments starting earlier than this are not listed.
    pub min_start_s: f64,
    pub seed: u64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            num_verbs: 3,
            num_nouns: 4,
            transition: TransitionSpec::Successor(0.5),
            min_duration_s: 4.0,
            max_duration_s: 6.0,
            segments_per_video: 6,
            blend_s: 1.5,
            alpha_s: 0.25,
            action_offset_std: 0.3,
            modalities: vec![
                ModalitySpec {
                    name: "appearance".into(),
                    dim: 32,
                    noise_std: 0.5,
                    drift_std: 0.02,
                },
                ModalitySpec {
                    name: "motion".into(),
                    dim: 24,
                    noise_std: 0.7,
                    drift_std: 0.02,
                },
            ],
            train_videos: 300,
            val_videos: 60,
            test_videos: 60,
            min_start_s: 3.5,
            seed: 0,
        }
    }
}

impl WorldConfig {
    pub fn num_actions(&self) -> usize {
        self.num_verbs * self.num_nouns
    }

    pub fn from_kv(kv: &KvFile) -> Result<Self> {
        let mut cfg = Self::default();
        for e in &kv.entries {
            match e.key.as_str() {
                "num_verbs" => cfg.num_verbs = kv.value(e)?,
                "num_nouns" => cfg.num_nouns = kv.value(e)?,
                "transition" => cfg.transition = kv.value(e)?,
                "min_duration_s" => cfg.min_duration_s = kv.value(e)?,
                "max_duration_s" => cfg.max_duration_s = kv.value(e)?,
                "segments_per_video" => cfg.segments_per_video = kv.value(e)?,
                "blend_s" => cfg.blend_s = kv.value(e)?,
                "alpha_s" => cfg.alpha_s = kv.value(e)?,
                "action_offset_std" => cfg.action_offset_std = kv.value(e)?,
                "modalities" => cfg.modalities = kv.list(e)?,
                "train_videos" => cfg.train_videos = kv.value(e)?,
                "val_videos" => cfg.val_videos = kv.value(e)?,
                "test_videos" => cfg.test_videos = kv.value(e)?,
                "min_start_s" => cfg.min_start_s = kv.value(e)?,
                "seed" => cfg.seed = kv.value(e)?,
                _ => return Err(kv.unknown(e)),
            }
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_verbs == 0 || self.num_nouns == 0 {
            return Err(Error::Config("vocabulary sizes must be positive".into()));
        }
        if !(self.alpha_s > 0.0) {
            return Err(Error::Config("alpha_s must be positive".into()));
        }
        if !(self.min_duration_s > 0.0 && self.max_duration_s >= self.min_duration_s) {
            return Err(Error::Config(format!(
                "duration range [{}, {}] must be positive and ordered",
                self.min_duration_s, self.max_duration_s
            )));
        }
        if self.duration_steps().0 > self.duration_steps().1 {
            return Err(Error::Config(
                "duration range contains no multiple of alpha_s".into(),
            ));
        }
        if !(self.blend_s >= 0.0) || self.segments_per_video == 0 {
            return Err(Error::Config(
                "blend_s must be ≥ 0 and segments_per_video ≥ 1".into(),
            ));
        }
        if self.modalities.is_empty() {
            return Err(Error::Config("at least one modality is required".into()));
        }
        let mut names = BTreeSet::new();
        for m in &self.modalities {
            if m.dim < 2 {
                return Err(Error::Config(format!(
                    "modality `{}` needs dim ≥ 2",
                    m.name
                )));
            }
            if !(m.noise_std >= 0.0 && m.drift_std >= 0.0) {
                return Err(Error::Config(format!(
                    "modality `{}` has negative std",
                    m.name
                )));
            }
            if !names.insert(m.name.as_str()) || m.name.contains(['.', ',', '/']) {
                return Err(Error::Config(format!(
                    "bad or duplicate modality name `{}`",
                    m.name
                )));
            }
        }
        self.transition_matrix().map(|_| ())
    }

    fn duration_steps(&self) -> (u64, u64) {
        let lo = (self.min_duration_s / self.alpha_s - 1e-9).ceil() as u64;
        let hi = (self.max_duration_s / self.alpha_s + 1e-9).floor() as u64;
        (lo.max(1), hi)
    }

    /// Row-stochastic `[A × A]` matrix.
    pub fn transition_matrix(&self) -> Result<Vec<Vec<f64>>> {
        let a = self.num_actions();
        let matrix = match &self.transition {
            TransitionSpec::Uniform => vec![vec![1.0 / a as f64; a]; a],
            TransitionSpec::Identity => (0..a)
                .map(|i| (0..a).map(|j| f64::from(u8::from(i == j))).collect())
                .collect(),
            TransitionSpec::Successor(p) => {
                if !(0.0..=1.0).contains(p) {
                    return Err(Error::Config(format!(
                        "successor probability {p} outside [0, 1]"
                    )));
                }
                if a < 2 {
                    return Err(Error::Config(
                        "successor transitions need at least 2 actions".into(),
                    ));
                }
                let succ = successors(a, self.seed);
                let rest = (1.0 - p) / (a - 1) as f64;
                (0..a)
                    .map(|i| {
                        (0..a)
                            .map(|j| if j == succ[i] { *p } else { rest })
                            .collect()
                    })
                    .collect()
            }
            TransitionSpec::Rows(rows) => rows.clone(),
        };
        if matrix.len() != a || matrix.iter().any(|r| r.len() != a) {
            return Err(Error::Config(format!("transition matrix must be {a}×{a}")));
        }
        for (i, row) in matrix.iter().enumerate() {
            let sum: f64 = row.iter().sum();
            if row.iter().any(|&x| !(x >= 0.0)) || (sum - 1.0).abs() > 1e-9 {
                return Err(Error::Config(format!(
                    "transition row {i} is not a distribution (sum {sum})"
                )));
            }
        }
        Ok(matrix)
    }
}

/// Seeded derangement: every action gets a successor other than itself.
fn successors(a: usize, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "transition"));
    let mut perm: Vec<usize> = (0..a).collect();
    loop {
        perm.shuffle(&mut rng);
        if perm.iter().enumerate().all(|(i, &j)| i != j) {
            return perm;
        }
    }
}

/// Stable 64-bit seed from the global seed and a label.
pub fn derive_seed(seed: u64, label: &str) -> u64 {
    let digest = Sha256::digest(format!("{seed}/{label}").as_bytes());
    u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
}

/// `%g`-style formatting with 9 significant digits.
pub fn format_float(x: f64) -> String {
    if x == 0.0 || !x.is_finite() {
        return if x == 0.0 { "0".into() } else { x.to_string() };
    }
    let sci = format!("{x:.8e}");
    let (mantissa, exp) = sci.split_once('e').expect("scientific notation");
    let exp: i32 = exp.parse().expect("exponent");
    if (-5..9).contains(&exp) {
        let decimals = (8 - exp).max(0) as usize;
        trim_zeros(&format!("{x:.decimals$}"))
    } else {
        format!("{}e{exp}", trim_zeros(mantissa))
    }
}

fn trim_zeros(s: &str) -> String {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.').to_string()
    } else {
        s.to_string()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Segment {
    pub video_id: String,
    /// `τ_s` in seconds.
    pub action_start: f64,
    pub action: usize,
    pub split: Split,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModalityInfo {
    pub name: String,
    pub dim: usize,
    pub alpha_s: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetManifest {
    pub vocab: ActionVocab,
    pub segments: Vec<Segment>,
    pub modalities: Vec<ModalityInfo>,
    /// `(video_id, modality name) → feature file`, relative to the dataset root.
    pub feature_files: BTreeMap<(String, String), PathBuf>,
}

impl DatasetManifest {
    pub fn alpha_s(&self) -> f64 {
        self.modalities[0].alpha_s
    }

    pub fn modality_index(&self, name: &str) -> Result<usize> {
        self.modalities
            .iter()
            .position(|m| m.name == name)
            .ok_or_else(|| {
                let known: Vec<&str> = self.modalities.iter().map(|m| m.name.as_str()).collect();
                Error::Config(format!("unknown modality `{name}` (dataset has {known:?})"))
            })
    }

    pub fn segments_in(&self, split: Split) -> impl Iterator<Item = &Segment> {
        self.segments.iter().filter(move |s| s.split == split)
    }

    /// Training-split sample count per action.
    pub fn train_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.vocab.num_actions()];
        for s in self.segments_in(Split::Train) {
            counts[s.action] += 1;
        }
        counts
    }
}

struct VideoPlan {
    actions: Vec<usize>,
    /// Segment start times; one more entry than `actions`, the last being the
    /// video end.
    bounds: Vec<f64>,
}

fn plan_video(cfg: &WorldConfig, matrix: &[Vec<f64>], video_id: &str) -> VideoPlan {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, video_id));
    let a = cfg.num_actions();
    let (lo, hi) = cfg.duration_steps();
    let mut actions = Vec::with_capacity(cfg.segments_per_video);
    let mut bounds = vec![0.0];
    let mut current = rng.random_range(0..a);
    let mut step = 0u64;
    for k in 0..cfg.segments_per_video {
        if k > 0 {
            let u: f64 = rng.random();
            let mut acc = 0.0;
            let row = &matrix[current];
            current = row
                .iter()
                .position(|&p| {
                    acc += p;
                    u < acc
                })
                .unwrap_or_else(|| row.iter().rposition(|&p| p > 0.0).expect("non-empty row"));
        }
        actions.push(current);
        step += rng.random_range(lo..=hi);
        bounds.push(step as f64 * cfg.alpha_s);
    }
    VideoPlan { actions, bounds }
}

/// Per-action prototypes for one modality, `[A][dim]`.
fn prototypes(cfg: &WorldConfig, modality: &ModalitySpec) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(
        cfg.seed,
        &format!("prototypes/{}", modality.name),
    ));
    let unit = Normal::new(0.0, 1.0).expect("valid normal");
    let mut draw = |n: usize| -> Vec<Vec<f64>> {
        (0..n)
            .map(|_| (0..modality.dim).map(|_| unit.sample(&mut rng)).collect())
            .collect()
    };
    let verbs = draw(cfg.num_verbs);
    let nouns = draw(cfg.num_nouns);
    let extra = draw(cfg.num_actions());
    let scale = std::f64::consts::FRAC_1_SQRT_2;
    (0..cfg.num_actions())
        .map(|id| {
            let (v, n) = (id / cfg.num_nouns, id % cfg.num_nouns);
            (0..modality.dim)
                .map(|i| scale * (verbs[v][i] + nouns[n][i]) + cfg.action_offset_std * extra[id][i])
                .collect()
        })
        .collect()
}

/// Noise-free feature at time `t`.
fn clean_feature(cfg: &WorldConfig, plan: &VideoPlan, protos: &[Vec<f64>], t: f64) -> Vec<f64> {
    let last = plan.actions.len() - 1;
    let k = (0..=last)
        .rev()
        .find(|&k| t >= plan.bounds[k] - GRID_TOLERANCE)
        .unwrap_or(0);
    let current = &protos[plan.actions[k]];
    if k == last || cfg.blend_s == 0.0 {
        return current.clone();
    }
    let boundary = plan.bounds[k + 1];
    let w = ((t - (boundary - cfg.blend_s)) / cfg.blend_s).clamp(0.0, 1.0);
    let next = &protos[plan.actions[k + 1]];
    current
        .iter()
        .zip(next)
        .map(|(c, n)| (1.0 - w) * c + w * n)
        .collect()
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

/// Generates the dataset described by `cfg` into `out_dir`.
pub fn gen_dataset(cfg: &WorldConfig, out_dir: &Path) -> Result<DatasetManifest> {
    cfg.validate()?;
    let matrix = cfg.transition_matrix()?;
    let features_dir = out_dir.join("features");
    fs::create_dir_all(&features_dir).map_err(|e| Error::io(&features_dir, e))?;

    let vocab = ActionVocab::full_grid(cfg.num_verbs, cfg.num_nouns);
    let protos: Vec<Vec<Vec<f64>>> = cfg.modalities.iter().map(|m| prototypes(cfg, m)).collect();
    let splits = [
        (Split::Train, cfg.train_videos),
        (Split::Val, cfg.val_videos),
        (Split::Test, cfg.test_videos),
    ];

    let mut segments = Vec::new();
    let mut feature_files = BTreeMap::new();
    let mut index = 0usize;
    for (split, count) in splits {
        for _ in 0..count {
            let video_id = format!("v{index:04}");
            index += 1;
            let plan = plan_video(cfg, &matrix, &video_id);
            for k in 1..plan.actions.len() {
                if plan.bounds[k] >= cfg.min_start_s - GRID_TOLERANCE {
                    segments.push(Segment {
                        video_id: video_id.clone(),
                        action_start: plan.bounds[k],
                        action: plan.actions[k],
                        split,
                    });
                }
            }
            let frames = (plan.bounds[plan.actions.len()] / cfg.alpha_s).round() as usize;
            for (m, spec) in cfg.modalities.iter().enumerate() {
                let rel = PathBuf::from("features").join(format!("{video_id}.{}.csv", spec.name));
                let text = render_features(cfg, &plan, &protos[m], spec, &video_id, frames);
                write_file(&out_dir.join(&rel), &text)?;
                feature_files.insert((video_id.clone(), spec.name.clone()), rel);
            }
        }
    }

    let manifest = DatasetManifest {
        vocab,
        segments,
        modalities: cfg
            .modalities
            .iter()
            .map(|m| ModalityInfo {
                name: m.name.clone(),
                dim: m.dim,
                alpha_s: cfg.alpha_s,
            })
            .collect(),
        feature_files,
    };
    write_index(&manifest, out_dir)?;
    info!(
        "generated {} videos, {} segments into {}",
        index,
        manifest.segments.len(),
        out_dir.display()
    );
    Ok(manifest)
}

fn render_features(
    cfg: &WorldConfig,
    plan: &VideoPlan,
    protos: &[Vec<f64>],
    spec: &ModalitySpec,
    video_id: &str,
    frames: usize,
) -> String {
    let mut rng =
        ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &format!("{video_id}/{}", spec.name)));
    let unit = Normal::new(0.0, 1.0).expect("valid normal");
    let mut drift = vec![0.0; spec.dim];
    let mut out = String::from("time_s");
    for i in 0..spec.dim {
        write!(out, ",f{i}").expect("string write");
    }
    out.push('\n');
    for step in 0..=frames {
        let t = step as f64 * cfg.alpha_s;
        let clean = clean_feature(cfg, plan, protos, t);
        out.push_str(&format_float(t));
        for (i, c) in clean.iter().enumerate() {
            if step > 0 {
                drift[i] += spec.drift_std * unit.sample(&mut rng);
            }
            let noise = spec.noise_std * unit.sample(&mut rng);
            out.push(',');
            out.push_str(&format_float(c + drift[i] + noise));
        }
        out.push('\n');
    }
    out
}

fn write_index(manifest: &DatasetManifest, dir: &Path) -> Result<()> {
    let mut verbs = String::from("id,name\n");
    for (i, v) in manifest.vocab.verbs.iter().enumerate() {
        writeln!(verbs, "{i},{v}").expect("string write");
    }
    let mut nouns = String::from("id,name\n");
    for (i, n) in manifest.vocab.nouns.iter().enumerate() {
        writeln!(nouns, "{i},{n}").expect("string write");
    }
    let mut actions = String::from("action_id,verb_id,noun_id\n");
    for (i, (v, n)) in manifest.vocab.actions.iter().enumerate() {
        writeln!(actions, "{i},{v},{n}").expect("string write");
    }
    let mut segments = String::from("video_id,action_start_s,action_id,split\n");
    for s in &manifest.segments {
        writeln!(
            segments,
            "{},{},{},{}",
            s.video_id,
            format_float(s.action_start),
            s.action,
            s.split
        )
        .expect("string write");
    }
    let mut index = String::from("modality,dim,alpha_s\n");
    for m in &manifest.modalities {
        writeln!(index, "{},{},{}", m.name, m.dim, format_float(m.alpha_s)).expect("string write");
    }
    write_file(&dir.join("verbs.csv"), &verbs)?;
    write_file(&dir.join("nouns.csv"), &nouns)?;
    write_file(&dir.join("actions.csv"), &actions)?;
    write_file(&dir.join("segments.csv"), &segments)?;
    write_file(&dir.join("manifest.csv"), &index)
}

/// Rows of a CSV file with 1-based line numbers, header checked.
struct Table {
    path: PathBuf,
    rows: Vec<(usize, Vec<String>)>,
}

impl Table {
    fn read(path: &Path, header: &[&str]) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut lines = text.lines().enumerate();
        let (_, first) = lines
            .next()
            .ok_or_else(|| Error::load(path, 1, "empty file"))?;
        let got: Vec<&str> = first.split(',').map(str::trim).collect();
        if got != header {
            return Err(Error::load(
                path,
                1,
                format!("expected header `{}`", header.join(",")),
            ));
        }
        let mut rows = Vec::new();
        for (idx, line) in lines {
            if line.trim().is_empty() {
                continue;
            }
            let cells: Vec<String> = line.split(',').map(|c| c.trim().to_string()).collect();
            if cells.len() != header.len() {
                return Err(Error::load(
                    path,
                    idx + 1,
                    format!("expected {} columns, found {}", header.len(), cells.len()),
                ));
            }
            rows.push((idx + 1, cells));
        }
        Ok(Self {
            path: path.to_path_buf(),
            rows,
        })
    }

    fn parse<T: FromStr>(&self, line: usize, cell: &str, what: &str) -> Result<T> {
        cell.parse()
            .map_err(|_| Error::load(&self.path, line, format!("malformed {what} `{cell}`")))
    }
}

fn read_names(path: &Path) -> Result<Vec<String>> {
    let table = Table::read(path, &["id", "name"])?;
    let mut names = Vec::with_capacity(table.rows.len());
    for (line, cells) in &table.rows {
        let id: usize = table.parse(*line, &cells[0], "id")?;
        if id != names.len() {
            return Err(Error::load(
                path,
                *line,
                format!("ids must be 0,1,2,...; found {id}"),
            ));
        }
        names.push(cells[1].clone());
    }
    Ok(names)
}

/// One modality's frames for one video, keyed by step index `t / α`.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureTrack {
    pub frames: BTreeMap<i64, Vec<f64>>,
}

/// A loaded dataset with every feature track in memory.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub root: PathBuf,
    pub manifest: DatasetManifest,
    /// `tracks[modality][video_id]`
    pub tracks: Vec<BTreeMap<String, FeatureTrack>>,
}

/// Reads and validates a dataset directory. Every segment must have frames
/// covering `[τ_s − window_s, τ_s]` at step α in every modality.
pub fn load_dataset(dir: &Path, window_s: f64) -> Result<Dataset> {
    let verbs = read_names(&dir.join("verbs.csv"))?;
    let nouns = read_names(&dir.join("nouns.csv"))?;

    let actions_path = dir.join("actions.csv");
    let table = Table::read(&actions_path, &["action_id", "verb_id", "noun_id"])?;
    let mut actions = Vec::with_capacity(table.rows.len());
    for (line, cells) in &table.rows {
        let id: usize = table.parse(*line, &cells[0], "action id")?;
        let v: usize = table.parse(*line, &cells[1], "verb id")?;
        let n: usize = table.parse(*line, &cells[2], "noun id")?;
        if id != actions.len() {
            return Err(Error::load(
                &actions_path,
                *line,
                format!("action ids must be 0,1,2,...; found {id}"),
            ));
        }
        if v >= verbs.len() || n >= nouns.len() {
            return Err(Error::load(
                &actions_path,
                *line,
                format!("unknown verb {v} or noun {n}"),
            ));
        }
        actions.push((v, n));
    }
    let vocab = ActionVocab::new(verbs, nouns, actions)
        .map_err(|e| Error::load(&actions_path, 0, e.to_string()))?;

    let index_path = dir.join("manifest.csv");
    let table = Table::read(&index_path, &["modality", "dim", "alpha_s"])?;
    let mut modalities: Vec<ModalityInfo> = Vec::new();
    for (line, cells) in &table.rows {
        let info = ModalityInfo {
            name: cells[0].clone(),
            dim: table.parse(*line, &cells[1], "dim")?,
            alpha_s: table.parse(*line, &cells[2], "alpha_s")?,
        };
        if info.dim == 0 || !(info.alpha_s > 0.0) {
            return Err(Error::load(
                &index_path,
                *line,
                "dim and alpha_s must be positive",
            ));
        }
        if let Some(first) = modalities.first() {
            if first.alpha_s != info.alpha_s {
                return Err(Error::load(
                    &index_path,
                    *line,
                    "all modalities must share one alpha_s",
                ));
            }
        }
        if modalities.iter().any(|m| m.name == info.name) {
            return Err(Error::load(
                &index_path,
                *line,
                format!("duplicate modality `{}`", info.name),
            ));
        }
        modalities.push(info);
    }
    if modalities.is_empty() {
        return Err(Error::load(&index_path, 1, "no modalities listed"));
    }
    let alpha = modalities[0].alpha_s;

    let segments_path = dir.join("segments.csv");
    let table = Table::read(
        &segments_path,
        &["video_id", "action_start_s", "action_id", "split"],
    )?;
    let mut segments = Vec::with_capacity(table.rows.len());
    let mut video_split: BTreeMap<String, (Split, usize)> = BTreeMap::new();
    for (line, cells) in &table.rows {
        let seg = Segment {
            video_id: cells[0].clone(),
            action_start: table.parse(*line, &cells[1], "action start")?,
            action: table.parse(*line, &cells[2], "action id")?,
            split: table.parse(*line, &cells[3], "split")?,
        };
        if seg.action >= vocab.num_actions() {
            return Err(Error::load(
                &segments_path,
                *line,
                format!("action id {} is not in actions.csv", seg.action),
            ));
        }
        if seg.video_id.is_empty() || seg.video_id.contains(['/', '\\']) {
            return Err(Error::load(
                &segments_path,
                *line,
                format!("bad video id `{}`", seg.video_id),
            ));
        }
        match video_split.get(&seg.video_id) {
            Some(&(split, first_line)) if split != seg.split => {
                return Err(Error::load(
                    &segments_path,
                    *line,
                    format!(
                        "video `{}` is in split {} here but {split} on line {first_line}",
                        seg.video_id, seg.split
                    ),
                ));
            }
            Some(_) => {}
            None => {
                video_split.insert(seg.video_id.clone(), (seg.split, *line));
            }
        }
        segments.push(seg);
    }

    let mut feature_files = BTreeMap::new();
    let mut tracks = Vec::with_capacity(modalities.len());
    for info in &modalities {
        let mut per_video = BTreeMap::new();
        for video_id in video_split.keys() {
            let rel = PathBuf::from("features").join(format!("{video_id}.{}.csv", info.name));
            let track = read_track(&dir.join(&rel), info)?;
            feature_files.insert((video_id.clone(), info.name.clone()), rel);
            per_video.insert(video_id.clone(), track);
        }
        tracks.push(per_video);
    }

    let manifest = DatasetManifest {
        vocab,
        segments,
        modalities,
        feature_files,
    };
    let window_steps = (window_s / alpha).round() as i64;
    for seg in &manifest.segments {
        let end = step_of(seg.action_start, alpha).ok_or_else(|| {
            Error::load(
                &segments_path,
                0,
                format!(
                    "action start {} is not a multiple of {alpha}s",
                    seg.action_start
                ),
            )
        })?;
        for (m, info) in manifest.modalities.iter().enumerate() {
            let track = &tracks[m][&seg.video_id];
            if let Some(missing) =
                (end - window_steps..=end).find(|s| !track.frames.contains_key(s))
            {
                return Err(Error::load(
                    dir.join(&manifest.feature_files[&(seg.video_id.clone(), info.name.clone())]),
                    0,
                    format!(
                        "coverage gap: no frame at t={}s needed by the segment starting at {}s",
                        format_float(missing as f64 * alpha),
                        format_float(seg.action_start)
                    ),
                ));
            }
        }
    }
    Ok(Dataset {
        root: dir.to_path_buf(),
        manifest,
        tracks,
    })
}

fn step_of(t: f64, alpha: f64) -> Option<i64> {
    let ratio = t / alpha;
    let step = ratio.round();
    ((ratio - step).abs() <= GRID_TOLERANCE).then_some(step as i64)
}

fn read_track(path: &Path, info: &ModalityInfo) -> Result<FeatureTrack> {
    let mut header = vec!["time_s".to_string()];
    header.extend((0..info.dim).map(|i| format!("f{i}")));
    let header: Vec<&str> = header.iter().map(String::as_str).collect();
    let table = Table::read(path, &header)?;
    let mut frames = BTreeMap::new();
    for (line, cells) in &table.rows {
        let t: f64 = table.parse(*line, &cells[0], "time")?;
        let step = step_of(t, info.alpha_s).ok_or_else(|| {
            Error::load(
                path,
                *line,
                format!("time {t} is not a multiple of {}s", info.alpha_s),
            )
        })?;
        let row = cells[1..]
            .iter()
            .map(|c| {
                let x: f64 = table.parse(*line, c, "feature value")?;
                if x.is_finite() {
                    Ok(x)
                } else {
                    Err(Error::load(path, *line, "non-finite feature value"))
                }
            })
            .collect::<Result<Vec<f64>>>()?;
        if frames.insert(step, row).is_some() {
            return Err(Error::load(
                path,
                *line,
                format!("duplicate frame at t={t}"),
            ));
        }
    }
    Ok(FeatureTrack { frames })
}

impl Dataset {
    fn window(&self, modality: usize, seg: &Segment, offsets: &[f64]) -> Result<Tensor> {
        let alpha = self.manifest.alpha_s();
        let track = &self.tracks[modality][&seg.video_id];
        let dim = self.manifest.modalities[modality].dim;
        let mut data = Vec::with_capacity(offsets.len() * dim);
        for &off in offsets {
            let t = seg.action_start + off;
            let step = step_of(t, alpha)
                .ok_or_else(|| Error::Config(format!("offset {off}s is off the {alpha}s grid")))?;
            let row = track.frames.get(&step).ok_or_else(|| {
                Error::TrainingData(format!(
                    "video {} has no {} frame at t={}s",
                    seg.video_id, self.manifest.modalities[modality].name, t
                ))
            })?;
            data.extend_from_slice(row);
        }
        Tensor::matrix(offsets.len(), dim, data)
    }

    /// Samples of one split with every modality, plus future ground truth
    /// when `with_future` is set.
    pub fn samples(
        &self,
        split: Split,
        tl: &Timeline,
        with_future: bool,
    ) -> Result<Vec<AnticipationSample>> {
        if (tl.alpha - self.manifest.alpha_s()).abs() > GRID_TOLERANCE {
            return Err(Error::Config(format!(
                "timeline step {}s differs from the dataset's {}s",
                tl.alpha,
                self.manifest.alpha_s()
            )));
        }
        let modalities = self.manifest.modalities.len();
        self.manifest
            .segments_in(split)
            .map(|seg| {
                let observed = (0..modalities)
                    .map(|m| self.window(m, seg, &tl.observed_offsets))
                    .collect::<Result<Vec<_>>>()?;
                let future_truth = if with_future && !tl.future_offsets.is_empty() {
                    Some(
                        (0..modalities)
                            .map(|m| self.window(m, seg, &tl.future_offsets))
                            .collect::<Result<Vec<_>>>()?,
                    )
                } else {
                    None
                };
                Ok(AnticipationSample {
                    video_id: seg.video_id.clone(),
                    action_start: seg.action_start,
                    observed,
                    future_truth,
                    labels: self.manifest.vocab.labels(seg.action)?,
                })
            })
            .collect()
    }

    /// Actions with at least `threshold` training samples.
    pub fn many_shot_actions(&self, threshold: usize) -> BTreeSet<usize> {
        let counts = self.manifest.train_counts();
        let set: BTreeSet<usize> = (0..counts.len())
            .filter(|&a| counts[a] >= threshold)
            .collect();
        if set.is_empty() {
            warn!("no action has {threshold} training samples");
        }
        set
    }
}
