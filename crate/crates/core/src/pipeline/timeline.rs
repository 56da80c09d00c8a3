use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

/// Where observation stops for each anticipation time.
#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash)]
pub enum Observation {
    /// The prediction for `T` sees frames up to `τ_s − T`; each anticipation
    /// time gets its own rollout and decoder pass from the encoder state at
    /// that point.
    PerTime,
    /// Every prediction sees frames up to `τ_s − encoder_end_offset`; one
    /// rollout is shared and the prediction for `T` is read mid-decoder.
    Shared,
}

impl fmt::Display for Observation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Observation::PerTime => "per-time",
            Observation::Shared => "shared",
        })
    }
}

impl FromStr for Observation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "per-time" => Ok(Observation::PerTime),
            "shared" => Ok(Observation::Shared),
            other => Err(Error::Config(format!(
                "unknown observation mode `{other}` (per-time|shared)"
            ))),
        }
    }
}

/// Observation/anticipation layout around an action start `τ_s`.
///
/// `encoder_end_offset` is the longest anticipation span: imagined frames
/// never reach further back than `τ_s − encoder_end_offset + alpha`. With
/// [`Observation::Shared`] it is also where every observation stops.
#[derive(Clone, Debug, PartialEq)]
pub struct TimelineConfig {
    pub alpha: f64,
    pub window: f64,
    pub observation: Observation,
    pub encoder_end_offset: f64,
    /// Descending; defaults to every step from `encoder_end_offset` to `alpha`.
    pub anticipation_times: Vec<f64>,
}

impl Default for TimelineConfig {
    fn default() -> Self {
        Self::with_all_times(0.25, 3.5, 2.0)
    }
}

impl TimelineConfig {
    /// Per-time timeline that predicts at every step of the span.
    pub fn with_all_times(alpha: f64, window: f64, encoder_end_offset: f64) -> Self {
        let steps = (encoder_end_offset / alpha).round().max(0.0) as usize;
        let anticipation_times = (0..steps)
            .map(|j| encoder_end_offset - j as f64 * alpha)
            .collect();
        Self {
            alpha,
            window,
            observation: Observation::PerTime,
            encoder_end_offset,
            anticipation_times,
        }
    }

    pub fn shared(alpha: f64, window: f64, encoder_end_offset: f64) -> Self {
        Self {
            observation: Observation::Shared,
            ..Self::with_all_times(alpha, window, encoder_end_offset)
        }
    }
}

/// One rollout/decoder pass, started from the encoder state after
/// `encoder_step` observed frames.
#[derive(Copy, Clone, Debug, PartialEq)]
pub struct Branch {
    pub encoder_step: usize,
    pub decoder_steps: usize,
    /// Row of the future ground truth matching this branch's first
    /// imagined frame.
    pub future_start: usize,
}

impl Branch {
    pub fn rollout_steps(&self) -> usize {
        self.decoder_steps - 1
    }
}

#[derive(Copy, Clone, Debug, PartialEq)]
pub struct PredictionPoint {
    pub branch: usize,
    /// 1-based decoder step of the branch after which the prediction is read.
    pub decoder_step: usize,
    pub time: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Timeline {
    pub alpha: f64,
    pub observation: Observation,
    pub encoder_steps: usize,
    pub anticipation_steps: usize,
    /// Observed frame times relative to `τ_s` (negative, ascending).
    pub observed_offsets: Vec<f64>,
    /// Ground-truth future frame times relative to `τ_s`; one per imagined
    /// frame the full anticipation span can supervise.
    pub future_offsets: Vec<f64>,
    /// Ordered by non-increasing `decoder_steps`.
    pub branches: Vec<Branch>,
    pub predictions: Vec<PredictionPoint>,
}

fn whole_steps(what: &str, seconds: f64, alpha: f64) -> Result<usize> {
    let ratio = seconds / alpha;
    let rounded = ratio.round();
    if !(seconds >= 0.0) || (ratio - rounded).abs() > 1e-9 {
        return Err(Error::Config(format!(
            "{what} = {seconds}s is not a whole number of {alpha}s steps"
        )));
    }
    Ok(rounded as usize)
}

impl Timeline {
    /// Most imagined frames any branch needs.
    pub fn rollout_steps(&self) -> usize {
        self.decoder_steps().saturating_sub(1)
    }

    pub fn decoder_steps(&self) -> usize {
        self.branches
            .iter()
            .map(|b| b.decoder_steps)
            .max()
            .unwrap_or(0)
    }

    pub fn times(&self) -> Vec<f64> {
        self.predictions.iter().map(|p| p.time).collect()
    }

    /// Index of the prediction point closest to `time` within `alpha / 2`.
    pub fn prediction_index(&self, time: f64) -> Option<usize> {
        self.predictions
            .iter()
            .position(|p| (p.time - time).abs() < self.alpha / 2.0)
    }
}

pub fn timeline(cfg: &TimelineConfig) -> Result<Timeline> {
    let alpha = cfg.alpha;
    if !(alpha > 0.0 && alpha.is_finite()) {
        return Err(Error::Config(format!("alpha must be > 0, got {alpha}")));
    }
    if !(cfg.window > 0.0) {
        return Err(Error::Config(format!(
            "window must be > 0, got {}",
            cfg.window
        )));
    }
    let window_steps = whole_steps("window", cfg.window, alpha)?;
    let end_steps = whole_steps("encoder_end_offset", cfg.encoder_end_offset, alpha)?;
    if end_steps == 0 || end_steps > window_steps {
        return Err(Error::Config(format!(
            "encoder_end_offset must lie in [alpha, window], got {}",
            cfg.encoder_end_offset
        )));
    }
    if cfg.anticipation_times.is_empty() {
        return Err(Error::Config(
            "at least one anticipation time is required".into(),
        ));
    }
    let mut t_steps = Vec::with_capacity(cfg.anticipation_times.len());
    for &t in &cfg.anticipation_times {
        let steps = whole_steps("anticipation time", t, alpha)?;
        if steps == 0 || steps > end_steps {
            return Err(Error::Config(format!(
                "anticipation time {t}s must lie in [alpha, encoder_end_offset]"
            )));
        }
        if t_steps.last().is_some_and(|&prev| steps >= prev) {
            return Err(Error::Config(
                "anticipation times must be strictly descending".into(),
            ));
        }
        t_steps.push(steps);
    }
    let last_observed = match cfg.observation {
        Observation::Shared => end_steps,
        Observation::PerTime => *t_steps.last().expect("non-empty"),
    };
    let encoder_steps = window_steps - last_observed + 1;
    let (branches, predictions) = match cfg.observation {
        Observation::Shared => {
            let points: Vec<PredictionPoint> = t_steps
                .iter()
                .map(|&t| PredictionPoint {
                    branch: 0,
                    decoder_step: end_steps - t + 1,
                    time: t as f64 * alpha,
                })
                .collect();
            let branch = Branch {
                encoder_step: encoder_steps,
                decoder_steps: points.last().expect("non-empty").decoder_step,
                future_start: 0,
            };
            (vec![branch], points)
        }
        Observation::PerTime => t_steps
            .iter()
            .enumerate()
            .map(|(i, &t)| {
                let branch = Branch {
                    encoder_step: window_steps - t + 1,
                    decoder_steps: t,
                    future_start: end_steps - t,
                };
                let point = PredictionPoint {
                    branch: i,
                    decoder_step: t,
                    time: t as f64 * alpha,
                };
                (branch, point)
            })
            .unzip(),
    };
    let observed_offsets = (0..encoder_steps)
        .map(|i| -((window_steps - i) as f64) * alpha)
        .collect();
    let future_offsets = (1..end_steps)
        .map(|k| -((end_steps - k) as f64) * alpha)
        .collect();
    Ok(Timeline {
        alpha,
        observation: cfg.observation,
        encoder_steps,
        anticipation_steps: end_steps,
        observed_offsets,
        future_offsets,
        branches,
        predictions,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shared_layout() {
        let tl = timeline(&TimelineConfig::shared(0.25, 3.5, 2.0)).unwrap();
        assert_eq!(tl.encoder_steps, 7);
        assert_eq!(tl.anticipation_steps, 8);
        assert_eq!(tl.predictions.len(), 8);
        assert_eq!(
            tl.predictions[0],
            PredictionPoint {
                branch: 0,
                decoder_step: 1,
                time: 2.0
            }
        );
        assert_eq!(
            tl.predictions[7],
            PredictionPoint {
                branch: 0,
                decoder_step: 8,
                time: 0.25
            }
        );
        assert_eq!(tl.branches.len(), 1);
        assert_eq!(tl.rollout_steps(), 7);
        assert_eq!(tl.observed_offsets.first(), Some(&-3.5));
        assert_eq!(tl.observed_offsets.last(), Some(&-2.0));
        assert_eq!(tl.future_offsets.len(), 7);
        assert_eq!(tl.future_offsets.first(), Some(&-1.75));
        assert_eq!(tl.future_offsets.last(), Some(&-0.25));
        assert_eq!(tl.prediction_index(1.0), Some(4));
    }

    #[test]
    fn single_observed_frame_boundary() {
        let tl = timeline(&TimelineConfig::shared(0.25, 2.0, 2.0)).unwrap();
        assert_eq!(tl.encoder_steps, 1);
        let tl = timeline(&TimelineConfig::with_all_times(0.25, 2.0, 2.0)).unwrap();
        assert_eq!(tl.branches[0].encoder_step, 1);
    }

    #[test]
    fn non_integral_ratio_is_rejected() {
        let cfg = TimelineConfig {
            alpha: 0.3,
            window: 3.5,
            observation: Observation::PerTime,
            encoder_end_offset: 2.1,
            anticipation_times: vec![0.3],
        };
        assert!(matches!(timeline(&cfg), Err(Error::Config(_))));
    }

    #[test]
    fn rejects_times_beyond_observation_end() {
        let mut cfg = TimelineConfig::default();
        cfg.anticipation_times = vec![2.25, 1.0];
        assert!(timeline(&cfg).is_err());
        cfg.anticipation_times = vec![1.0, 1.5];
        assert!(timeline(&cfg).is_err());
    }

    #[test]
    fn subset_of_times_shortens_rollout() {
        let mut cfg = TimelineConfig::shared(0.25, 3.5, 2.0);
        cfg.anticipation_times = vec![2.0, 1.0];
        let tl = timeline(&cfg).unwrap();
        assert_eq!(tl.decoder_steps(), 5);
        assert_eq!(tl.rollout_steps(), 4);
        assert_eq!(tl.future_offsets.len(), 7);
    }

    #[test]
    fn per_time_layout() {
        let tl = timeline(&TimelineConfig::default()).unwrap();
        assert_eq!(tl.observation, Observation::PerTime);
        assert_eq!(tl.encoder_steps, 14);
        assert_eq!(tl.observed_offsets.last(), Some(&-0.25));
        assert_eq!(tl.branches.len(), 8);
        assert_eq!(tl.decoder_steps(), 8);
        assert_eq!(tl.rollout_steps(), 7);
        assert_eq!(tl.future_offsets.len(), 7);
        for (p, b) in tl.predictions.iter().zip(&tl.branches) {
            // observation ends at τ_s − T
            assert_eq!(tl.observed_offsets[b.encoder_step - 1], -p.time);
            assert_eq!(b.decoder_steps as f64 * tl.alpha, p.time);
            assert_eq!(p.decoder_step, b.decoder_steps);
            // first imagined frame is one step after the last observed one
            if b.rollout_steps() > 0 {
                assert_eq!(tl.future_offsets[b.future_start], -p.time + tl.alpha);
            }
        }
        assert!(tl
            .branches
            .windows(2)
            .all(|w| w[0].decoder_steps >= w[1].decoder_steps));
    }

    #[test]
    fn per_time_subset() {
        let mut cfg = TimelineConfig::default();
        cfg.anticipation_times = vec![1.5, 1.0];
        let tl = timeline(&cfg).unwrap();
        assert_eq!(tl.encoder_steps, 11);
        assert_eq!(tl.branches[0].encoder_step, 9);
        assert_eq!(tl.branches[1].future_start, 4);
        assert_eq!(tl.rollout_steps(), 5);
    }

    #[test]
    fn observation_mode_round_trips() {
        for m in [Observation::PerTime, Observation::Shared] {
            assert_eq!(m.to_string().parse::<Observation>().unwrap(), m);
        }
        assert!("later".parse::<Observation>().is_err());
    }
}
