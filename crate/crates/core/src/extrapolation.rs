//! Extrapolated frequency schedules: uniform interpolation, base rescaling,
//! ramped blending, and dominant-frequency correction (single and recursive).

use std::f64::consts::TAU;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rope::{build_schedule, dominant_among, encoding_collisions, FrequencySchedule, ResolutionSpec, RopeConfig};

/// Frequency a corrected index is set to for an axis of `target` tokens.
#[inline]
pub fn corrected_frequency(target: usize) -> f64 {
    TAU / target as f64
}

fn check_scale(s: f64) -> Result<()> {
    if !(s.is_finite() && s >= 1.0) {
        return Err(Error::Argument(format!("scale factor must be >= 1, got {s}")));
    }
    Ok(())
}

/// Records a correction for every index whose value changed.
fn diff_into(original: &FrequencySchedule, freqs: Vec<f64>) -> FrequencySchedule {
    let mut out = original.clone();
    for (i, new) in freqs.into_iter().enumerate() {
        if new != out.freqs[i] {
            out.set_freq(i, new);
        }
    }
    out
}

/// Position interpolation: every frequency divided by `s`.
pub fn scale_pi(schedule: &FrequencySchedule, s: f64) -> Result<FrequencySchedule> {
    check_scale(s)?;
    schedule.validate()?;
    let freqs = schedule.freqs.iter().map(|f| f / s).collect();
    Ok(diff_into(schedule, freqs))
}

/// NTK-aware scaling: rebuilds the schedule from base `s^(d/(d-2)) * b`.
pub fn scale_ntk(config: RopeConfig, s: f64) -> Result<FrequencySchedule> {
    check_scale(s)?;
    config.validate()?;
    if config.axis_dim < 4 {
        return Err(Error::Config(format!(
            "NTK scaling needs axis_dim >= 4, got {}",
            config.axis_dim
        )));
    }
    let d = config.axis_dim as f64;
    let lambda = s.powf(d / (d - 2.0));
    let scaled = build_schedule(RopeConfig {
        base: lambda * config.base,
        ..config
    })?;
    let original = build_schedule(config)?;
    Ok(diff_into(&original, scaled.freqs))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct YarnParams {
    pub alpha: f64,
    pub beta: f64,
}

impl Default for YarnParams {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            beta: 32.0,
        }
    }
}

impl YarnParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.beta > self.alpha && self.beta.is_finite()) {
            return Err(Error::Config(format!(
                "YaRN thresholds need 0 < alpha < beta, got alpha={} beta={}",
                self.alpha, self.beta
            )));
        }
        Ok(())
    }

    /// Blend weight toward the unscaled frequency for `rotations` turns over
    /// the training length.
    pub fn ramp(&self, rotations: f64) -> f64 {
        ((rotations - self.alpha) / (self.beta - self.alpha)).clamp(0.0, 1.0)
    }
}

/// Ramped blend between interpolation (few rotations) and the original
/// frequency (many rotations). No attention temperature is applied.
pub fn scale_yarn(
    config: RopeConfig,
    s: f64,
    train_length: usize,
    params: YarnParams,
) -> Result<FrequencySchedule> {
    check_scale(s)?;
    params.validate()?;
    if train_length == 0 {
        return Err(Error::Argument("training length must be positive".into()));
    }
    let original = build_schedule(config)?;
    let freqs = original
        .freqs
        .iter()
        .map(|&theta| {
            let rotations = train_length as f64 * theta / TAU;
            let gamma = params.ramp(rotations);
            let interpolated = theta / s;
            ((1.0 - gamma) * interpolated + gamma * theta).clamp(interpolated, theta)
        })
        .collect();
    Ok(diff_into(&original, freqs))
}

/// Sets the frequency whose period is nearest `reference_length` to
/// `2*pi / target_length`.
pub fn correct_dominant(
    schedule: &FrequencySchedule,
    reference_length: usize,
    target_length: usize,
) -> Result<(FrequencySchedule, usize)> {
    schedule.validate()?;
    if reference_length == 0 {
        return Err(Error::Argument("reference length must be positive".into()));
    }
    if target_length < reference_length {
        return Err(Error::Argument(format!(
            "target length {target_length} is below reference length {reference_length}"
        )));
    }
    let k = dominant_among(schedule, reference_length as f64, |_| true)
        .expect("validated schedule is non-empty");
    let mut out = schedule.clone();
    out.set_freq(k, corrected_frequency(target_length));
    Ok((out, k))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Axis {
    H,
    W,
}

impl fmt::Display for Axis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Axis::H => f.write_str("h"),
            Axis::W => f.write_str("w"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RdfcIteration {
    pub axis: Axis,
    pub observed_period: usize,
    pub chosen_index: usize,
    pub old: f64,
    pub new: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RdfcLog {
    pub iterations: Vec<RdfcIteration>,
    pub converged: bool,
}

impl RdfcLog {
    pub fn for_axis(&self, axis: Axis) -> impl Iterator<Item = &RdfcIteration> {
        self.iterations.iter().filter(move |it| it.axis == axis)
    }

    /// One JSON object per iteration, newline terminated.
    pub fn to_json_lines(&self) -> Result<String> {
        let mut out = String::new();
        for it in &self.iterations {
            out.push_str(&serde_json::to_string(it)?);
            out.push('\n');
        }
        Ok(out)
    }

    pub fn from_json_lines(text: &str) -> Result<Vec<RdfcIteration>> {
        text.lines()
            .filter(|l| !l.trim().is_empty())
            .map(|l| serde_json::from_str(l).map_err(|e| Error::Format(format!("rdfc log: {e}"))))
            .collect()
    }
}

/// Reports the repetition period currently observable along one axis.
///
/// Returning a value `>= target` means no repetition remains.
pub trait PeriodDetector {
    fn observe(&self, axis: Axis, schedule: &FrequencySchedule, previous: usize, target: usize) -> usize;
}

impl<F> PeriodDetector for F
where
    F: Fn(Axis, &FrequencySchedule, usize, usize) -> usize,
{
    fn observe(&self, axis: Axis, schedule: &FrequencySchedule, previous: usize, target: usize) -> usize {
        self(axis, schedule, previous, target)
    }
}

/// Surfaces the shortest uncorrected period in `[N (1 - window), target)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WindowDetector {
    pub window: f64,
}

pub fn auto_detector(window: f64) -> WindowDetector {
    WindowDetector { window }
}

impl PeriodDetector for WindowDetector {
    fn observe(&self, _axis: Axis, schedule: &FrequencySchedule, previous: usize, target: usize) -> usize {
        let lower = previous as f64 * (1.0 - self.window);
        let upper = target as f64;
        (0..schedule.len())
            .filter(|&i| !schedule.is_corrected(i))
            .map(|i| schedule.period(i))
            .filter(|&t| t >= lower && t < upper)
            .min_by(f64::total_cmp)
            .map(|t| (t.round() as usize).min(target.saturating_sub(1)).max(1))
            .unwrap_or(target)
    }
}

/// Scans uncorrected mid-band indices for duplicated encodings over the
/// target extent and reports the shortest colliding lag.
///
/// Only indices with period at least `N (1 - window)` are scanned; shorter
/// periods encode local texture rather than layout.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CollisionDetector {
    pub window: f64,
    pub tolerance: f64,
}

impl PeriodDetector for CollisionDetector {
    fn observe(&self, _axis: Axis, schedule: &FrequencySchedule, previous: usize, target: usize) -> usize {
        let lower = previous as f64 * (1.0 - self.window);
        if target < 2 {
            return target;
        }
        (0..schedule.len())
            .filter(|&i| !schedule.is_corrected(i) && schedule.period(i) >= lower)
            .filter_map(|i| {
                encoding_collisions(schedule, i, target, self.tolerance)
                    .ok()?
                    .into_iter()
                    .map(|(p, q)| q - p)
                    .min()
            })
            .min()
            .unwrap_or(target)
    }
}

struct AxisState {
    axis: Axis,
    schedule: FrequencySchedule,
    observed: usize,
    target: usize,
    steps: usize,
    setbacks: usize,
}

/// Recursive dominant-frequency correction over both axes.
///
/// Each round corrects, on every axis still repeating, the uncorrected index
/// whose period is nearest the observed period, then asks `detector` for the
/// new period. An axis may report a shorter period once; a second
/// non-increasing report is a stagnation error. Each axis may consume at most
/// `axis_dim / 2` indices.
pub fn rdfc(
    sched_h: &FrequencySchedule,
    sched_w: &FrequencySchedule,
    spec: ResolutionSpec,
    detector: &dyn PeriodDetector,
) -> Result<(FrequencySchedule, FrequencySchedule, RdfcLog)> {
    spec.validate()?;
    sched_h.validate()?;
    sched_w.validate()?;

    let mut axes = [
        AxisState {
            axis: Axis::H,
            schedule: sched_h.clone(),
            observed: spec.train_h,
            target: spec.target_h,
            steps: 0,
            setbacks: 0,
        },
        AxisState {
            axis: Axis::W,
            schedule: sched_w.clone(),
            observed: spec.train_w,
            target: spec.target_w,
            steps: 0,
            setbacks: 0,
        },
    ];
    let mut log = RdfcLog::default();

    while axes.iter().any(|a| a.observed < a.target) {
        for state in axes.iter_mut().filter(|a| a.observed < a.target) {
            let cap = state.schedule.len();
            let touched: Vec<usize> = state.schedule.corrections.iter().map(|c| c.index).collect();
            let chosen = if state.steps < cap {
                dominant_among(&state.schedule, state.observed as f64, |i| !touched.contains(&i))
            } else {
                None
            };
            let Some(k) = chosen else {
                return Err(Error::IterationCap {
                    axis: state.axis,
                    cap,
                    log,
                });
            };
            let new = corrected_frequency(state.target);
            log.iterations.push(RdfcIteration {
                axis: state.axis,
                observed_period: state.observed,
                chosen_index: k,
                old: state.schedule.freqs[k],
                new,
            });
            state.schedule.set_freq(k, new);
            state.steps += 1;
        }

        for state in axes.iter_mut().filter(|a| a.observed < a.target) {
            let next = detector.observe(state.axis, &state.schedule, state.observed, state.target);
            if next <= state.observed && next < state.target {
                state.setbacks += 1;
                if state.setbacks >= 2 {
                    return Err(Error::Stagnation {
                        axis: state.axis,
                        period: next,
                        log,
                    });
                }
            }
            state.observed = next;
        }
    }

    log.converged = true;
    let [h, w] = axes;
    Ok((h.schedule, w.schedule, log))
}
